// kvlab: run generation under a cache policy, record and replay attention
// traces, sweep policy grids, and emit the analytical reproductions.
//
// Exit codes: 0 success, 1 configuration or usage error, 2 I/O error,
// 3 internal contract violation.

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "kvlab/analysis.hpp"
#include "kvlab/decoder.hpp"
#include "kvlab/trace.hpp"

namespace {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Output plumbing

std::string resolve_out_dir(const std::string& flag_value) {
  if (!flag_value.empty()) return flag_value;
  if (const char* env = std::getenv("KVLAB_OUT_DIR"); env && *env) return env;
  return ".";
}

// Write-to-temp-then-rename, so an interrupted run never leaves a partial
// artifact under the final name.
void atomic_write(const std::filesystem::path& path, const std::string& content) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    os << content;
    if (!os) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw std::runtime_error("rename failed: " + path.string() + ": " + ec.message());
}

// ---------------------------------------------------------------------------
// Run configuration: decoder + policy + run parameters.  Fully serializable;
// the metrics artifact embeds it so any run can be reproduced from its
// output alone.

struct RunConfig {
  kvlab::DecoderConfig decoder;
  kvlab::PolicySpec policy = kvlab::make_policy(kvlab::PolicyKind::Keyformer);
  long prompt_len = 64;
  int gen_len = 32;
  std::uint64_t prompt_seed = 2;
  std::uint64_t noise_seed = 3;
};

json to_json(const RunConfig& rc) {
  return {{"decoder", kvlab::to_json(rc.decoder)}, {"policy", kvlab::to_json(rc.policy)},
          {"prompt_len", rc.prompt_len},           {"gen_len", rc.gen_len},
          {"prompt_seed", rc.prompt_seed},         {"noise_seed", rc.noise_seed}};
}

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");
  static const std::vector<std::string> known{"decoder",    "policy",      "prompt_len",
                                              "gen_len",    "prompt_seed", "noise_seed"};
  for (const auto& [key, value] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw std::invalid_argument("config: unknown key '" + key + "'");
  RunConfig rc;
  if (j.contains("decoder")) rc.decoder = kvlab::decoder_config_from_json(j.at("decoder"));
  if (j.contains("policy")) rc.policy = kvlab::policy_from_json(j.at("policy"));
  rc.prompt_len = j.value("prompt_len", rc.prompt_len);
  rc.gen_len = j.value("gen_len", rc.gen_len);
  rc.prompt_seed = j.value("prompt_seed", rc.prompt_seed);
  rc.noise_seed = j.value("noise_seed", rc.noise_seed);
  return rc;
}

json load_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Flag groups.  Values land in these structs; apply() only overwrites config
// fields whose flag was actually passed, so file values survive unless a
// flag beats them.

kvlab::TauSchedule parse_tau_range(const std::string& s) {
  const std::size_t colon = s.find(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == s.size())
    throw std::invalid_argument("--tau expects init:end, e.g. 1:2");
  try {
    std::size_t used = 0;
    const double a = std::stod(s.substr(0, colon), &used);
    if (used != colon) throw std::invalid_argument("");
    const std::string tail = s.substr(colon + 1);
    const double b = std::stod(tail, &used);
    if (used != tail.size()) throw std::invalid_argument("");
    return kvlab::TauSchedule(a, b, 0);  // validates the pair
  } catch (const std::invalid_argument&) {
    throw std::invalid_argument("--tau: cannot parse '" + s + "' (expected init:end)");
  }
}

kvlab::NoiseSpec noise_from_flags(const std::string& kind, std::optional<double> c,
                                  std::optional<double> mu, std::optional<double> sigma) {
  if (kind == "none") return kvlab::NoiseSpec::none();
  if (kind == "constant")
    return kvlab::NoiseSpec::constant(c.value_or(kvlab::kConstantNoiseDefault));
  if (kind == "gaussian")
    return kvlab::NoiseSpec::gaussian(mu.value_or(kvlab::kGaussianMuDefault),
                                      sigma.value_or(kvlab::kGaussianSigmaDefault));
  if (kind == "gumbel") return kvlab::NoiseSpec::gumbel();
  throw std::invalid_argument("--noise: unknown kind '" + kind +
                              "' (expected none|constant|gaussian|gumbel)");
}

struct PolicyFlags {
  std::string policy, scope, positions, noise, tau;
  double kv_pct = 0.0, recent_ratio = 0.0, alpha = 0.0;
  int k_abs = 0, sinks = 0;
  double noise_c = 0.0, noise_mu = 0.0, noise_sigma = 0.0;
  bool use_temperature = false;

  CLI::Option *o_policy = nullptr, *o_scope = nullptr, *o_positions = nullptr,
              *o_noise = nullptr, *o_tau = nullptr, *o_kv_pct = nullptr,
              *o_recent = nullptr, *o_alpha = nullptr, *o_k_abs = nullptr, *o_sinks = nullptr,
              *o_noise_c = nullptr, *o_noise_mu = nullptr, *o_noise_sigma = nullptr,
              *o_use_temp = nullptr;

  void add(CLI::App& app) {
    o_policy = app.add_option("--policy", policy,
                              "Eviction policy: full|window|key_only|attention_sink|"
                              "h2o|damped|keyformer");
    o_kv_pct = app.add_option("--kv-pct", kv_pct, "Cache budget as percent of prompt length");
    o_k_abs = app.add_option("--kv-abs", k_abs, "Cache budget as an absolute token count");
    o_recent = app.add_option("--recent-ratio", recent_ratio,
                              "Recent window as a fraction of the budget (scored policies)");
    o_sinks = app.add_option("--sinks", sinks, "Sink token count (attention_sink policy)");
    o_alpha = app.add_option("--alpha", alpha, "Score damping factor in (0,1] (damped policy)");
    o_noise = app.add_option("--noise", noise,
                             "Score noise: none|constant|gaussian|gumbel");
    o_noise_c = app.add_option("--noise-c", noise_c, "Constant noise shift");
    o_noise_mu = app.add_option("--noise-mu", noise_mu, "Gaussian noise mean");
    o_noise_sigma = app.add_option("--noise-sigma", noise_sigma, "Gaussian noise std");
    o_use_temp = app.add_option("--use-temperature", use_temperature,
                                "Apply the tau schedule to score softmaxes (true/false)");
    o_tau = app.add_option("--tau", tau, "Temperature ramp init:end, e.g. 1:2");
    o_scope = app.add_option("--scope", scope, "Score state scope: per_layer_head|shared");
    o_positions = app.add_option("--positions", positions,
                                 "Position ids after eviction: original|renumbered");
  }

  void apply(kvlab::PolicySpec& spec) const {
    if (o_policy->count()) {
      spec = kvlab::make_policy(kvlab::policy_kind_from_string(policy));
    }
    if (o_kv_pct->count() && o_k_abs->count())
      throw std::invalid_argument("--kv-pct and --kv-abs are mutually exclusive");
    if (o_kv_pct->count()) {
      spec.kv_pct = kv_pct;
      spec.k_abs.reset();
    }
    if (o_k_abs->count()) {
      spec.k_abs = k_abs;
      spec.kv_pct.reset();
    }
    if (o_recent->count()) spec.recent_ratio = recent_ratio;
    if (o_sinks->count()) spec.sinks = sinks;
    if (o_alpha->count()) spec.alpha = alpha;
    if (o_noise->count())
      spec.adjustment.noise = noise_from_flags(
          noise, o_noise_c->count() ? std::optional<double>(noise_c) : std::nullopt,
          o_noise_mu->count() ? std::optional<double>(noise_mu) : std::nullopt,
          o_noise_sigma->count() ? std::optional<double>(noise_sigma) : std::nullopt);
    if (o_use_temp->count()) spec.adjustment.use_temperature = use_temperature;
    if (o_tau->count()) {
      const kvlab::TauSchedule ts = parse_tau_range(tau);
      spec.tau_init = ts.tau_init;
      spec.tau_end = ts.tau_end;
    }
    if (o_scope->count()) spec.scope = kvlab::scope_from_string(scope);
    if (o_positions->count()) spec.position_mode = kvlab::position_mode_from_string(positions);
  }
};

struct DecoderFlags {
  int layers = 0, heads = 0, d_model = 0, vocab = 0, max_positions = 0;
  std::string pos_encoding;
  std::uint64_t seed = 0;

  CLI::Option *o_layers = nullptr, *o_heads = nullptr, *o_d_model = nullptr, *o_vocab = nullptr,
              *o_max_pos = nullptr, *o_pos_enc = nullptr, *o_seed = nullptr;

  void add(CLI::App& app) {
    o_layers = app.add_option("--layers", layers, "Decoder layers");
    o_heads = app.add_option("--heads", heads, "Attention heads per layer");
    o_d_model = app.add_option("--d-model", d_model, "Model width");
    o_vocab = app.add_option("--vocab", vocab, "Vocabulary size");
    o_max_pos = app.add_option("--max-positions", max_positions, "Positional table size");
    o_pos_enc = app.add_option("--pos-encoding", pos_encoding,
                               "Position encoding: sinusoidal|alibi");
    o_seed = app.add_option("--seed", seed,
                            "Weight seed; also seeds the prompt (+1) and noise (+2) "
                            "unless those are given explicitly");
  }

  void apply(RunConfig& rc, CLI::Option* o_prompt_seed, CLI::Option* o_noise_seed) const {
    if (o_layers->count()) rc.decoder.layers = layers;
    if (o_heads->count()) rc.decoder.heads = heads;
    if (o_d_model->count()) rc.decoder.d_model = d_model;
    if (o_vocab->count()) rc.decoder.vocab = vocab;
    if (o_max_pos->count()) rc.decoder.max_positions = max_positions;
    if (o_pos_enc->count()) rc.decoder.pos_encoding = kvlab::pos_encoding_from_string(pos_encoding);
    if (o_seed->count()) {
      rc.decoder.weight_seed = seed;
      if (!o_prompt_seed->count()) rc.prompt_seed = seed + 1;
      if (!o_noise_seed->count()) rc.noise_seed = seed + 2;
    }
  }
};

// ---------------------------------------------------------------------------
// generate

struct GenerateCmd {
  std::string config_path, out_dir;
  long prompt_len = 0;
  int gen_len = 0;
  std::uint64_t prompt_seed = 0, noise_seed = 0;
  PolicyFlags pf;
  DecoderFlags df;
  CLI::Option *o_prompt_len = nullptr, *o_gen = nullptr, *o_prompt_seed = nullptr,
              *o_noise_seed = nullptr;

  void add(CLI::App& app) {
    app.add_option("--config", config_path, "JSON run config; flags override its fields");
    df.add(app);
    pf.add(app);
    o_prompt_len = app.add_option("--prompt-len", prompt_len, "Synthetic prompt length");
    o_gen = app.add_option("--gen", gen_len, "Tokens to generate");
    o_prompt_seed = app.add_option("--prompt-seed", prompt_seed, "Synthetic prompt seed");
    o_noise_seed = app.add_option("--noise-seed", noise_seed, "Score noise seed");
    app.add_option("--out", out_dir, "Output directory (default $KVLAB_OUT_DIR or .)");
  }

  RunConfig build() const {
    RunConfig rc;
    if (!config_path.empty()) rc = run_config_from_json(load_json_file(config_path));
    df.apply(rc, o_prompt_seed, o_noise_seed);
    pf.apply(rc.policy);
    if (o_prompt_len->count()) rc.prompt_len = prompt_len;
    if (o_gen->count()) rc.gen_len = gen_len;
    if (o_prompt_seed->count()) rc.prompt_seed = prompt_seed;
    if (o_noise_seed->count()) rc.noise_seed = noise_seed;
    return rc;
  }

  int run() const {
    const RunConfig rc = build();
    rc.decoder.validate();
    const std::filesystem::path dir = resolve_out_dir(out_dir);

    const kvlab::Decoder dec(rc.decoder);
    const std::vector<int> prompt =
        kvlab::synthetic_prompt(rc.prompt_len, rc.decoder.vocab, rc.prompt_seed);
    kvlab::GenerationResult res =
        kvlab::generate(dec, prompt, rc.gen_len, rc.policy, rc.noise_seed);

    std::ostringstream trace_os;
    kvlab::write_trace(res.trace, trace_os);
    atomic_write(dir / "trace.jsonl", trace_os.str());

    const json tokens{{"prompt", prompt}, {"tokens", res.tokens}};
    atomic_write(dir / "tokens.json", tokens.dump(2) + "\n");

    json metrics = res.metrics;
    metrics["config"] = to_json(rc);
    atomic_write(dir / "metrics.json", metrics.dump(2) + "\n");

    std::cout << "generate: wrote " << res.trace.records.size() << " trace records, "
              << res.tokens.size() << " tokens to " << dir.string() << "\n";
    return 0;
  }
};

// ---------------------------------------------------------------------------
// replay

struct ReplayCmd {
  std::string trace_path, out_dir;
  PolicyFlags pf;

  void add(CLI::App& app) {
    app.add_option("--trace", trace_path, "Trace file to replay")->required();
    pf.add(app);
    app.add_option("--out", out_dir, "Output directory (default $KVLAB_OUT_DIR or .)");
  }

  int run() const {
    const kvlab::AttentionTrace trace = kvlab::read_trace_file(trace_path);
    const kvlab::PolicySpec baseline_spec = kvlab::policy_from_json(trace.header.policy);
    kvlab::PolicySpec spec = baseline_spec;
    pf.apply(spec);

    const kvlab::KeptTimeline requested = kvlab::replay(trace, spec);
    const kvlab::KeptTimeline baseline = kvlab::replay(trace, baseline_spec);
    const std::vector<double> series = kvlab::overlap(requested, baseline);

    const std::filesystem::path dir = resolve_out_dir(out_dir);
    atomic_write(dir / "timeline.csv", kvlab::timeline_to_csv(requested));

    std::ostringstream os;
    os << "t,jaccard_vs_baseline\n";
    for (std::size_t t = 0; t < series.size(); ++t) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.17g", series[t]);
      os << t << ',' << buf << '\n';
    }
    atomic_write(dir / "overlap.csv", os.str());

    const json summary{{"trace", trace_path},
                       {"baseline_policy", trace.header.policy},
                       {"replay_policy", kvlab::to_json(spec)},
                       {"mean_overlap", kvlab::mean_overlap(requested, baseline)},
                       {"first_divergence_step", kvlab::timeline_divergence(requested, baseline)}};
    atomic_write(dir / "replay.json", summary.dump(2) + "\n");

    std::cout << "replay: " << series.size() << " steps, mean overlap "
              << kvlab::mean_overlap(requested, baseline) << ", wrote " << dir.string() << "\n";
    return 0;
  }
};

// ---------------------------------------------------------------------------
// sweep

struct SweepCmd {
  std::string grid_path, out_dir;
  unsigned jobs = 0;

  void add(CLI::App& app) {
    app.add_option("--grid", grid_path, "JSON grid config")->required();
    app.add_option("--jobs", jobs, "Worker threads (default: hardware concurrency)");
    app.add_option("--out", out_dir, "Output directory (default $KVLAB_OUT_DIR or .)");
  }

  struct Row {
    RunConfig rc;
    std::string policy, tau;
    double kv_pct = 0.0, recent_ratio = 0.0, alpha = 0.0;
    std::uint64_t seed = 0;
  };

  static std::vector<Row> expand(const json& grid) {
    if (!grid.is_object()) throw std::invalid_argument("sweep: grid must be a JSON object");
    static const std::vector<std::string> known{"base",         "policies", "kv_pct",
                                                "recent_ratio", "alpha",    "tau",
                                                "seeds"};
    for (const auto& [key, value] : grid.items())
      if (std::find(known.begin(), known.end(), key) == known.end())
        throw std::invalid_argument("sweep: unknown grid key '" + key + "'");

    RunConfig base;
    if (grid.contains("base")) base = run_config_from_json(grid.at("base"));

    bool any_axis = false;
    auto axis = [&](const char* name, auto fallback) {
      using T = decltype(fallback);
      if (!grid.contains(name)) return std::vector<T>{fallback};
      const auto values = grid.at(name).template get<std::vector<T>>();
      if (values.empty())
        throw std::invalid_argument(std::string("sweep: axis '") + name + "' is empty");
      any_axis = true;
      return values;
    };

    const auto policies = axis("policies", kvlab::to_string(base.policy.kind));
    const auto kv_pcts = axis("kv_pct", base.policy.kv_pct.value_or(50.0));
    const auto ratios = axis("recent_ratio", base.policy.recent_ratio);
    const auto alphas = axis("alpha", base.policy.alpha);
    const auto taus = axis("tau", std::to_string(base.policy.tau_init) + ":" +
                                      std::to_string(base.policy.tau_end));
    const auto seeds = axis("seeds", base.noise_seed);
    if (!any_axis)
      throw std::invalid_argument("sweep: grid declares no axes (expected at least one of "
                                  "policies/kv_pct/recent_ratio/alpha/tau/seeds)");

    std::vector<Row> rows;
    for (const auto& p : policies)
      for (double pct : kv_pcts)
        for (double ratio : ratios)
          for (double a : alphas)
            for (const auto& tr : taus)
              for (std::uint64_t seed : seeds) {
                Row row;
                row.rc = base;
                row.rc.policy = kvlab::make_policy(kvlab::policy_kind_from_string(p));
                row.rc.policy.kv_pct = pct;
                row.rc.policy.k_abs.reset();
                row.rc.policy.recent_ratio = ratio;
                row.rc.policy.alpha = a;
                const kvlab::TauSchedule ts = parse_tau_range(tr);
                row.rc.policy.tau_init = ts.tau_init;
                row.rc.policy.tau_end = ts.tau_end;
                row.rc.noise_seed = seed;
                row.policy = p;
                row.kv_pct = pct;
                row.recent_ratio = ratio;
                row.alpha = a;
                row.tau = tr;
                row.seed = seed;
                rows.push_back(std::move(row));
              }
    return rows;
  }

  int run() const {
    const json grid = load_json_file(grid_path);
    const std::vector<Row> rows = expand(grid);

    // Axes never touch the decoder or the prompt, so every row shares one
    // immutable decoder and one prompt.
    rows.front().rc.decoder.validate();
    const kvlab::Decoder dec(rows.front().rc.decoder);
    const std::vector<int> prompt = kvlab::synthetic_prompt(
        rows.front().rc.prompt_len, rows.front().rc.decoder.vocab, rows.front().rc.prompt_seed);

    std::vector<json> metrics(rows.size());
    std::vector<std::string> errors(rows.size());
    std::atomic<std::size_t> cursor{0};
    const unsigned workers =
        std::max(1u, jobs ? jobs : std::thread::hardware_concurrency());

    auto work = [&] {
      for (;;) {
        const std::size_t i = cursor.fetch_add(1);
        if (i >= rows.size()) return;
        try {
          const kvlab::GenerationResult res = kvlab::generate(
              dec, prompt, rows[i].rc.gen_len, rows[i].rc.policy, rows[i].rc.noise_seed,
              /*record_rows=*/false, /*with_full_baseline=*/true);
          metrics[i] = res.metrics;
        } catch (const std::exception& e) {
          errors[i] = e.what();
        }
      }
    };
    std::vector<std::thread> pool;
    for (unsigned i = 0; i + 1 < workers; ++i) pool.emplace_back(work);
    work();
    for (std::thread& th : pool) th.join();

    std::size_t failed = 0;
    std::ostringstream os;
    os << "row,policy,kv_pct,recent_ratio,alpha,tau,seed,k,w,divergence_vs_full,error\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const Row& row = rows[i];
      os << i << ',' << row.policy << ',' << row.kv_pct << ',' << row.recent_ratio << ','
         << row.alpha << ',' << row.tau << ',' << row.seed << ',';
      if (errors[i].empty()) {
        os << metrics[i].at("k").get<int>() << ',' << metrics[i].at("w").get<int>() << ','
           << metrics[i].at("divergence_vs_full").get<int>() << ',';
      } else {
        ++failed;
        std::string msg = errors[i];
        for (char& c : msg)
          if (c == ',' || c == '\n') c = ';';
        os << ",,," << msg;
      }
      os << '\n';
    }
    if (failed == rows.size()) throw std::runtime_error("sweep: every row failed");

    const std::filesystem::path dir = resolve_out_dir(out_dir);
    atomic_write(dir / "sweep.csv", os.str());
    std::cout << "sweep: " << rows.size() - failed << "/" << rows.size() << " rows ok, wrote "
              << (dir / "sweep.csv").string() << "\n";
    return 0;
  }
};

// ---------------------------------------------------------------------------
// analyze

struct AnalyzeCmd {
  CLI::App* cdf = nullptr;
  CLI::App* sparsity = nullptr;
  CLI::App* shift = nullptr;
  CLI::App* entropy = nullptr;
  CLI::App* traffic = nullptr;

  std::string trace_path, out_dir, thresholds_csv, logits_csv, preset;
  int grid = 100, n = 64, count = 100, trials = 200, samples = 10000;
  double keep = 0.5, kv_pct = 50.0;
  std::uint64_t seed = 1;
  std::string noise_kind = "gumbel";
  int t_layers = 32, t_heads = 32, t_d_head = 128, t_dtype = 2, t_beams = 1;
  double t_params = 6.7e9;
  long prompt_len = 8192;
  int gen_len = 512;

  void add(CLI::App& app) {
    app.require_subcommand(1);

    cdf = app.add_subcommand("cdf", "Cumulative attention-mass curve from a trace");
    cdf->add_option("--trace", trace_path, "Trace file")->required();
    cdf->add_option("--grid", grid, "Fraction grid intervals (default 100)");
    cdf->add_option("--out", out_dir, "Output directory");

    sparsity = app.add_subcommand("sparsity", "Fraction of entries below theta * row max");
    sparsity->add_option("--trace", trace_path, "Trace file")->required();
    sparsity->add_option("--thresholds", thresholds_csv,
                         "Comma-separated thresholds in [0,1] (default 0,0.01,...,0.05)");
    sparsity->add_option("--out", out_dir, "Output directory");

    shift = app.add_subcommand("shift", "Softmax inflation after keeping the top fraction");
    shift->add_option("--logits", logits_csv, "Explicit comma-separated logit vector");
    shift->add_option("--n", n, "Random vector length (when --logits is absent)");
    shift->add_option("--count", count, "Number of random vectors");
    shift->add_option("--seed", seed, "Random vector seed");
    shift->add_option("--keep", keep, "Keep fraction in (0,1]");
    shift->add_option("--out", out_dir, "Output directory");

    entropy = app.add_subcommand("entropy", "Smoothing experiment: H(mean noised softmax) vs H(softmax)");
    entropy->add_option("--n", n, "Logit vector length");
    entropy->add_option("--trials", trials, "Trials");
    entropy->add_option("--samples", samples, "Noise draws per trial");
    entropy->add_option("--seed", seed, "Trial seed");
    entropy->add_option("--noise", noise_kind, "Noise kind (default gumbel)");
    entropy->add_option("--out", out_dir, "Output directory");

    traffic = app.add_subcommand("traffic", "Analytical KV/parameter byte traffic");
    traffic->add_option("--preset", preset, "Model preset: 7b");
    traffic->add_option("--layers", t_layers, "Layers");
    traffic->add_option("--heads", t_heads, "Heads");
    traffic->add_option("--d-head", t_d_head, "Head width");
    traffic->add_option("--dtype-bytes", t_dtype, "Bytes per element");
    traffic->add_option("--params", t_params, "Parameter count");
    traffic->add_option("--beams", t_beams, "Beam width (caches per sequence)");
    traffic->add_option("--prompt-len", prompt_len, "Prompt length n");
    traffic->add_option("--gen", gen_len, "Generated tokens T");
    traffic->add_option("--kv-pct", kv_pct, "Reduced cache percent");
    traffic->add_option("--out", out_dir, "Output directory");
  }

  int run_cdf() const {
    const kvlab::AttentionTrace trace = kvlab::read_trace_file(trace_path);
    const kvlab::CdfSeries series = kvlab::attention_cdf(trace, grid);
    const std::filesystem::path dir = resolve_out_dir(out_dir);
    atomic_write(dir / "cdf.csv", kvlab::cdf_to_csv(series));
    double mass_at_40 = 0.0;
    for (std::size_t i = 0; i < series.size(); ++i)
      if (series.fraction[i] <= 0.4) mass_at_40 = series.mass[i];
    const json summary{{"rows", trace.records.size()},
                       {"points", series.size()},
                       {"mass_at_fraction_0.4", mass_at_40}};
    atomic_write(dir / "cdf.json", summary.dump(2) + "\n");
    std::cout << "analyze cdf: " << series.size() << " points, wrote " << dir.string() << "\n";
    return 0;
  }

  int run_sparsity() const {
    std::vector<double> thresholds;
    if (thresholds_csv.empty()) {
      thresholds = {0.0, 0.01, 0.02, 0.03, 0.04, 0.05};
    } else {
      std::stringstream ss(thresholds_csv);
      std::string item;
      while (std::getline(ss, item, ',')) thresholds.push_back(std::stod(item));
      if (thresholds.empty()) throw std::invalid_argument("--thresholds: empty list");
    }
    const kvlab::AttentionTrace trace = kvlab::read_trace_file(trace_path);
    const std::vector<double> values = kvlab::threshold_sparsity(trace, thresholds);
    const std::filesystem::path dir = resolve_out_dir(out_dir);
    atomic_write(dir / "sparsity.csv", kvlab::sparsity_to_csv(thresholds, values));
    const json summary{{"thresholds", thresholds}, {"sparsity", values}};
    atomic_write(dir / "sparsity.json", summary.dump(2) + "\n");
    std::cout << "analyze sparsity: " << values.size() << " thresholds, wrote " << dir.string()
              << "\n";
    return 0;
  }

  int run_shift() const {
    std::vector<Eigen::VectorXd> inputs;
    if (!logits_csv.empty()) {
      std::vector<double> vals;
      std::stringstream ss(logits_csv);
      std::string item;
      while (std::getline(ss, item, ',')) vals.push_back(std::stod(item));
      if (vals.empty()) throw std::invalid_argument("--logits: empty vector");
      inputs.push_back(Eigen::Map<Eigen::VectorXd>(vals.data(),
                                                   static_cast<Eigen::Index>(vals.size())));
    } else {
      kvlab::RngStream rng(seed);
      for (int i = 0; i < count; ++i) {
        Eigen::VectorXd x(n);
        for (int j = 0; j < n; ++j) x[j] = rng.gaussian(0.0, 2.0);
        inputs.push_back(std::move(x));
      }
    }
    std::ostringstream os;
    os << "vector,n,keep_fraction,kept_count,inflation\n";
    double min_inf = 0.0, max_inf = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      const kvlab::ShiftResult res = kvlab::distribution_shift(inputs[i], keep);
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.17g", res.inflation);
      os << i << ',' << inputs[i].size() << ',' << keep << ',' << res.kept.size() << ',' << buf
         << '\n';
      min_inf = i == 0 ? res.inflation : std::min(min_inf, res.inflation);
      max_inf = std::max(max_inf, res.inflation);
    }
    const std::filesystem::path dir = resolve_out_dir(out_dir);
    atomic_write(dir / "shift.csv", os.str());
    const json summary{{"vectors", inputs.size()},
                       {"keep_fraction", keep},
                       {"min_inflation", min_inf},
                       {"max_inflation", max_inf}};
    atomic_write(dir / "shift.json", summary.dump(2) + "\n");
    std::cout << "analyze shift: " << inputs.size() << " vectors, wrote " << dir.string() << "\n";
    return 0;
  }

  int run_entropy() const {
    kvlab::RngStream rng(seed);
    const kvlab::NoiseSpec spec = noise_from_flags(noise_kind, std::nullopt, std::nullopt,
                                                   std::nullopt);
    const kvlab::EntropyResult res = kvlab::entropy_experiment(n, trials, samples, rng, spec);
    const std::filesystem::path dir = resolve_out_dir(out_dir);
    atomic_write(dir / "entropy.csv", kvlab::entropy_to_csv(res));
    atomic_write(dir / "entropy.json", kvlab::to_json(res).dump(2) + "\n");
    std::cout << "analyze entropy: win rate " << res.win_rate << " over "
              << res.h_raw.size() << " trials, wrote " << dir.string() << "\n";
    return 0;
  }

  int run_traffic() const {
    kvlab::TrafficModel model;
    if (preset == "7b") {
      model = kvlab::TrafficModel::preset_7b();
    } else if (preset.empty()) {
      model.layers = t_layers;
      model.heads = t_heads;
      model.d_head = t_d_head;
      model.dtype_bytes = t_dtype;
      model.param_count = t_params;
      model.beams = t_beams;
    } else {
      throw std::invalid_argument("--preset: unknown preset '" + preset + "' (expected 7b)");
    }
    if (!(kv_pct > 0.0) || kv_pct > 100.0)
      throw std::invalid_argument("--kv-pct must lie in (0, 100]");

    const kvlab::TrafficReport full = kvlab::kv_traffic(model, prompt_len, gen_len, 1.0);
    const kvlab::TrafficReport reduced =
        kvlab::kv_traffic(model, prompt_len, gen_len, kv_pct / 100.0);
    const std::vector<kvlab::LabelledTraffic> rows{{"full", 1.0, full},
                                                   {"reduced", kv_pct / 100.0, reduced}};
    const std::filesystem::path dir = resolve_out_dir(out_dir);
    atomic_write(dir / "traffic.csv", kvlab::traffic_to_csv(rows));
    const json summary{{"model",
                        {{"layers", model.layers},
                         {"heads", model.heads},
                         {"d_head", model.d_head},
                         {"dtype_bytes", model.dtype_bytes},
                         {"param_count", model.param_count},
                         {"beams", model.beams}}},
                       {"full", kvlab::to_json(full)},
                       {"reduced", kvlab::to_json(reduced)},
                       {"kv_ratio_full_over_reduced",
                        full.kv_bytes_per_step / reduced.kv_bytes_per_step},
                       {"crossover_tokens", model.crossover_tokens()}};
    atomic_write(dir / "traffic.json", summary.dump(2) + "\n");
    std::cout << "analyze traffic: crossover at " << model.crossover_tokens()
              << " tokens, wrote " << dir.string() << "\n";
    return 0;
  }

  int run() const {
    if (cdf->parsed()) return run_cdf();
    if (sparsity->parsed()) return run_sparsity();
    if (shift->parsed()) return run_shift();
    if (entropy->parsed()) return run_entropy();
    if (traffic->parsed()) return run_traffic();
    throw std::invalid_argument("analyze: missing subcommand");
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"KV-cache reduction lab: generation, trace replay, sweeps, and analyses"};
  app.require_subcommand(1);

  GenerateCmd generate_cmd;
  ReplayCmd replay_cmd;
  SweepCmd sweep_cmd;
  AnalyzeCmd analyze_cmd;

  CLI::App* generate = app.add_subcommand("generate", "Greedy generation under a cache policy");
  generate_cmd.add(*generate);
  CLI::App* replay = app.add_subcommand("replay", "Re-run cache selection over a recorded trace");
  replay_cmd.add(*replay);
  CLI::App* sweep = app.add_subcommand("sweep", "Run a policy grid, one CSV row per config");
  sweep_cmd.add(*sweep);
  CLI::App* analyze = app.add_subcommand("analyze", "Analytical reproductions");
  analyze_cmd.add(*analyze);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (generate->parsed()) return generate_cmd.run();
    if (replay->parsed()) return replay_cmd.run();
    if (sweep->parsed()) return sweep_cmd.run();
    if (analyze->parsed()) return analyze_cmd.run();
    std::cerr << "no subcommand given\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::logic_error& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
