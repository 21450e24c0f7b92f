// Acceptance gate: one pass/fail line per criterion, nonzero exit on any
// failure.  Each check is self-contained and uses its own oracle; nothing
// here depends on doctest.
#include <sys/wait.h>
#include <unistd.h>

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "kvlab/analysis.hpp"
#include "kvlab/cache_policy.hpp"
#include "kvlab/decoder.hpp"
#include "kvlab/numerics.hpp"
#include "kvlab/rng.hpp"
#include "kvlab/score_state.hpp"
#include "kvlab/trace.hpp"

namespace {

using namespace kvlab;

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---- criterion 1 --------------------------------------------------------

// A keyformer run with noise and temperature switched off must accumulate
// plain attention mass, which is exactly what h2o does.
bool c1_h2o_equivalence(std::string& detail) {
  Decoder dec{DecoderConfig{}};
  const int runs = 50;
  for (int i = 0; i < runs; ++i) {
    const std::vector<int> prompt = synthetic_prompt(128, dec.cfg.vocab, 1000 + i);
    const PolicySpec h2o = make_policy(PolicyKind::H2O);
    PolicySpec kf = make_policy(PolicyKind::Keyformer);
    kf.adjustment = AdjustmentStrategy{};
    const GenerationResult a = generate(dec, prompt, 64, h2o, 77 + i, false, false);
    const GenerationResult b = generate(dec, prompt, 64, kf, 77 + i, false, false);
    if (!(a.timeline == b.timeline) || a.tokens != b.tokens) {
      detail = "run " + std::to_string(i) + " differs";
      return false;
    }
  }
  detail = std::to_string(runs) + "/" + std::to_string(runs) + " runs identical";
  return true;
}

// ---- criterion 2 --------------------------------------------------------

// Exhaustive reference: force the w newest slots, enumerate every subset of
// the older ones with k - w members, take the maximum score sum, and break
// ties toward the lexicographically smallest kept list.  Dyadic scores make
// the sums exact.
std::vector<SlotId> oracle_select(const std::vector<SlotId>& pos, const std::vector<double>& sc,
                                  int k, int w) {
  const int m = static_cast<int>(pos.size());
  const std::vector<SlotId> recent(pos.end() - w, pos.end());
  const int older = m - w, need = k - w;
  std::vector<SlotId> best;
  double best_sum = 0.0;
  bool have = false;
  for (unsigned mask = 0; mask < (1u << older); ++mask) {
    if (std::popcount(mask) != need) continue;
    double sum = 0.0;
    std::vector<SlotId> kept;
    for (int j = 0; j < older; ++j)
      if (mask >> j & 1u) {
        sum += sc[static_cast<std::size_t>(j)];
        kept.push_back(pos[static_cast<std::size_t>(j)]);
      }
    kept.insert(kept.end(), recent.begin(), recent.end());
    if (!have || sum > best_sum || (sum == best_sum && kept < best)) {
      have = true;
      best_sum = sum;
      best = std::move(kept);
    }
  }
  return best;
}

bool c2_selection_vs_exhaustive(std::string& detail) {
  RngStream rng(20240811);
  int checked = 0;
  for (int i = 0; i < 10000; ++i) {
    const int m = 1 + static_cast<int>(rng.next_u64() % 12);
    const int k = 1 + static_cast<int>(rng.next_u64() % static_cast<unsigned>(std::min(m, 8)));
    std::vector<SlotId> pos(static_cast<std::size_t>(m));
    long p = static_cast<long>(rng.next_u64() % 3);
    for (auto& q : pos) {
      q = p;
      p += 1 + static_cast<long>(rng.next_u64() % 3);
    }
    Eigen::VectorXd mass(m);
    std::vector<double> sc(static_cast<std::size_t>(m));
    for (int j = 0; j < m; ++j) {
      sc[static_cast<std::size_t>(j)] = 0.25 * static_cast<double>(rng.next_u64() % 16);
      mass[j] = sc[static_cast<std::size_t>(j)];
    }
    ScoreAccumulator acc;
    for (SlotId q : pos) acc.add_slot(q);
    acc.accumulate(pos, mass);
    for (int w = 0; w <= k; ++w) {
      const std::vector<SlotId> got = select_keyformer(acc, pos, k, w);
      const std::vector<SlotId> want = oracle_select(pos, sc, k, w);
      ++checked;
      if (got != want) {
        detail = "instance " + std::to_string(i) + " (m=" + std::to_string(m) +
                 ", k=" + std::to_string(k) + ", w=" + std::to_string(w) + ") disagrees";
        return false;
      }
    }
  }
  detail = std::to_string(checked) + " selections matched";
  return true;
}

// ---- criterion 3 --------------------------------------------------------

bool c3_static_budget(std::string& detail) {
  DecoderConfig small;
  small.layers = 1;
  small.heads = 2;
  small.d_model = 16;
  small.vocab = 32;
  Decoder dec{small};
  const PolicyKind kinds[] = {PolicyKind::Window,  PolicyKind::KeyOnly, PolicyKind::AttentionSink,
                              PolicyKind::H2O,     PolicyKind::Damped,  PolicyKind::Keyformer};
  RngStream rng(99);
  for (int i = 0; i < 1000; ++i) {
    PolicySpec spec = make_policy(kinds[i % 6]);
    if (spec.kind == PolicyKind::Damped) spec.alpha = 0.5;
    const long n = 8 + static_cast<long>(rng.next_u64() % 17);
    const int gen = 2 + static_cast<int>(rng.next_u64() % 5);
    if (rng.next_u64() % 2)
      spec.kv_pct = 25.0 + 25.0 * static_cast<double>(rng.next_u64() % 3);
    else
      spec.k_abs = 1 + static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(n));
    const std::vector<int> prompt = synthetic_prompt(n, small.vocab, 7000 + i);
    const GenerationResult res = generate(dec, prompt, gen, spec, 40 + i, false, false);
    const ResolvedPolicy rp = resolve(spec, n, gen);
    for (int t = 0; t <= gen; ++t) {
      const std::size_t expect =
          static_cast<std::size_t>(std::min<long>(rp.k, n + t));
      for (int l = 0; l < small.layers; ++l)
        for (int h = 0; h < small.heads; ++h)
          if (res.timeline.at(t, l, h).size() != expect) {
            detail = "run " + std::to_string(i) + " step " + std::to_string(t) + ": size " +
                     std::to_string(res.timeline.at(t, l, h).size()) + " != " +
                     std::to_string(expect);
            return false;
          }
    }
    validate_timeline(res.timeline, n, rp.k, rp.w);
  }
  detail = "1000 runs held min(k, seen) at every step";
  return true;
}

// ---- criterion 4 --------------------------------------------------------

Eigen::VectorXf ref_layer_norm(const Eigen::VectorXf& x) {
  const float mean = x.mean();
  Eigen::ArrayXf c = x.array() - mean;
  const float var = c.square().mean();
  return (c / std::sqrt(var + 1e-5f)).matrix();
}

Eigen::MatrixXf ref_layer_norm_rows(const Eigen::MatrixXf& x) {
  Eigen::MatrixXf out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r)
    out.row(r) = ref_layer_norm(x.row(r).transpose()).transpose();
  return out;
}

float ref_gelu(float v) {
  return 0.5f * v * (1.0f + std::tanh(0.7978845608028654f * (v + 0.044715f * v * v * v)));
}

// From-scratch forward over the whole token sequence, no cache: the
// reference the incremental cached path has to reproduce.
Eigen::VectorXf batch_forward(const Decoder& dec, const std::vector<int>& toks) {
  const DecoderConfig& cfg = dec.cfg;
  const long n = static_cast<long>(toks.size());
  const int dm = cfg.d_model, dh = cfg.d_head(), H = cfg.heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  const bool alibi = cfg.pos_encoding == PosEncoding::Alibi;

  Eigen::MatrixXf x(n, dm);
  for (long i = 0; i < n; ++i) {
    x.row(i) = dec.embedding.row(toks[static_cast<std::size_t>(i)]);
    if (!alibi) x.row(i) += sinusoidal_position(i, dm).transpose();
  }
  for (const LayerWeights& w : dec.layers) {
    const Eigen::MatrixXf xn = ref_layer_norm_rows(x);
    const Eigen::MatrixXf q = xn * w.wq.transpose();
    const Eigen::MatrixXf k = xn * w.wk.transpose();
    const Eigen::MatrixXf v = xn * w.wv.transpose();
    Eigen::MatrixXf attn(n, dm);
    for (int h = 0; h < H; ++h) {
      const auto qh = q.middleCols(static_cast<Eigen::Index>(h) * dh, dh);
      const auto kh = k.middleCols(static_cast<Eigen::Index>(h) * dh, dh);
      const auto vh = v.middleCols(static_cast<Eigen::Index>(h) * dh, dh);
      const float slope = alibi ? alibi_slope(h, H) : 0.0f;
      Eigen::MatrixXf probs = Eigen::MatrixXf::Zero(n, n);
      for (long qi = 0; qi < n; ++qi) {
        Eigen::VectorXf row = (qh.row(qi) * kh.topRows(qi + 1).transpose()).transpose() * scale;
        if (alibi)
          for (long j = 0; j <= qi; ++j) row[j] -= slope * static_cast<float>(qi - j);
        probs.row(qi).head(qi + 1) = softmax(row).transpose();
      }
      attn.middleCols(static_cast<Eigen::Index>(h) * dh, dh) = probs * vh;
    }
    x += attn * w.wo.transpose();
    Eigen::MatrixXf ff = ref_layer_norm_rows(x) * w.w_in.transpose();
    x += ff.unaryExpr([](float u) { return ref_gelu(u); }) * w.w_out.transpose();
  }
  return dec.embedding * ref_layer_norm(x.row(n - 1).transpose());
}

bool c4_cached_vs_scratch(std::string& detail) {
  struct Shape {
    int layers, heads, d_model, vocab;
  };
  const Shape shapes[] = {{1, 1, 8, 16},  {1, 2, 16, 24}, {2, 2, 32, 64},  {2, 4, 32, 48},
                          {3, 2, 24, 32}, {2, 1, 16, 40}, {3, 4, 48, 64},  {1, 4, 16, 20},
                          {2, 3, 24, 33}, {4, 2, 32, 96}};
  float worst = 0.0f;
  int idx = 0;
  for (const Shape& sh : shapes)
    for (PosEncoding enc : {PosEncoding::Sinusoidal, PosEncoding::Alibi}) {
      DecoderConfig cfg;
      cfg.layers = sh.layers;
      cfg.heads = sh.heads;
      cfg.d_model = sh.d_model;
      cfg.vocab = sh.vocab;
      cfg.pos_encoding = enc;
      cfg.weight_seed = 11 + idx;
      Decoder dec{cfg};
      const long n = 9 + idx % 4;
      const int gen = 5;
      std::vector<int> toks = synthetic_prompt(n, cfg.vocab, 17 + idx);
      DecodeSession sess = make_session(dec, make_policy(PolicyKind::Full), n, gen, 1);
      StepOutput out = prefill(dec, sess, toks, nullptr, nullptr);
      worst = std::max(worst, (batch_forward(dec, toks) - out.next_logits).cwiseAbs().maxCoeff());
      for (int t = 1; t <= gen; ++t) {
        Eigen::Index next = 0;
        out.next_logits.maxCoeff(&next);
        toks.push_back(static_cast<int>(next));
        out = decode_step(dec, sess, static_cast<int>(next), nullptr, nullptr);
        worst =
            std::max(worst, (batch_forward(dec, toks) - out.next_logits).cwiseAbs().maxCoeff());
      }
      ++idx;
    }
  detail = "20 configs, max |delta| = " + fmt("%.2e", static_cast<double>(worst));
  return worst <= 1e-5f;
}

// ---- criterion 5 --------------------------------------------------------

bool c5_entropy_wins(std::string& detail) {
  RngStream rng(5150);
  const EntropyResult r = entropy_experiment(64, 200, 10000, rng);
  detail = "win rate " + fmt("%.3f", r.win_rate) + ", mean " + fmt("%.4f", r.mean_smoothed) +
           " vs " + fmt("%.4f", r.mean_raw);
  return r.win_rate >= 0.99 && r.mean_smoothed > r.mean_raw;
}

// ---- criterion 6 --------------------------------------------------------

bool c6_renormalization(std::string& detail) {
  RngStream rng(606);
  double worst_spread = 0.0, worst_oracle = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const int n = 2 + static_cast<int>(rng.next_u64() % 63);
    Eigen::VectorXd x(n);
    for (int j = 0; j < n; ++j) x[j] = rng.gaussian(0.0, 2.0);
    const double f = 0.25 + 0.25 * static_cast<double>(rng.next_u64() % 3);
    const ShiftResult r = distribution_shift(x, f);
    if (r.inflation < 1.0 - 1e-15) {
      detail = "inflation " + fmt("%.17g", r.inflation) + " < 1";
      return false;
    }
    const double r0 = r.reduced[0] / r.full[r.kept[0]];
    for (Eigen::Index j = 0; j < r.reduced.size(); ++j) {
      const double ratio = r.reduced[j] / r.full[r.kept[static_cast<std::size_t>(j)]];
      worst_spread = std::max(worst_spread, std::abs(ratio - r0) / r0);
    }
    // High-precision reference for the renormalized distribution.
    long double m = -1e400L;
    for (Eigen::Index idx : r.kept) m = std::max(m, static_cast<long double>(x[idx]));
    long double denom = 0.0L;
    for (Eigen::Index idx : r.kept) denom += std::exp(static_cast<long double>(x[idx]) - m);
    for (Eigen::Index j = 0; j < r.reduced.size(); ++j) {
      const long double want =
          std::exp(static_cast<long double>(x[r.kept[static_cast<std::size_t>(j)]]) - m) / denom;
      worst_oracle =
          std::max(worst_oracle, std::abs(r.reduced[j] - static_cast<double>(want)));
    }
  }
  detail = "1000 vectors, ratio spread " + fmt("%.2e", worst_spread) + ", oracle gap " +
           fmt("%.2e", worst_oracle);
  return worst_spread <= 1e-9 && worst_oracle <= 1e-9;
}

// ---- criterion 7 --------------------------------------------------------

bool c7_gumbel_sampler(std::string& detail) {
  const int n = 1000000;
  RngStream rng(2718281);
  std::vector<double> xs(static_cast<std::size_t>(n));
  double sum = 0.0;
  for (double& v : xs) {
    v = rng.gumbel();
    sum += v;
  }
  const double mean = sum / n;
  double var = 0.0;
  for (double v : xs) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / (n - 1));
  std::sort(xs.begin(), xs.end());
  double ks = 0.0;
  for (int i = 0; i < n; ++i) {
    const double cdf = std::exp(-std::exp(-xs[static_cast<std::size_t>(i)]));
    ks = std::max(ks, std::abs(cdf - static_cast<double>(i + 1) / n));
    ks = std::max(ks, std::abs(cdf - static_cast<double>(i) / n));
  }
  detail = "mean " + fmt("%.4f", mean) + " (target " + fmt("%.4f", kGumbelMean) + "), sd " +
           fmt("%.4f", sd) + " (target " + fmt("%.4f", kGumbelStd) + "), ks " + fmt("%.4f", ks);
  return std::abs(mean - kGumbelMean) <= 0.01 && std::abs(sd - kGumbelStd) <= 0.01 && ks < 0.01;
}

// ---- criterion 8 --------------------------------------------------------

bool c8_degeneracies(std::string& detail) {
  Decoder dec{DecoderConfig{}};
  const int runs = 50;
  for (int i = 0; i < runs; ++i) {
    const std::vector<int> prompt = synthetic_prompt(48, dec.cfg.vocab, 3000 + i);

    PolicySpec kf_recent = make_policy(PolicyKind::Keyformer);
    kf_recent.recent_ratio = 1.0;  // noise stays on; w = k reads no scores
    const GenerationResult a = generate(dec, prompt, 8, kf_recent, 9 + i, false, false);
    const GenerationResult b =
        generate(dec, prompt, 8, make_policy(PolicyKind::Window), 9 + i, false, false);
    if (!(a.timeline == b.timeline)) {
      detail = "w=k run " + std::to_string(i) + " differs from window";
      return false;
    }

    PolicySpec kf_score = make_policy(PolicyKind::Keyformer);
    kf_score.recent_ratio = 0.0;
    kf_score.adjustment = AdjustmentStrategy{};
    const GenerationResult c = generate(dec, prompt, 8, kf_score, 9 + i, false, false);
    const GenerationResult d =
        generate(dec, prompt, 8, make_policy(PolicyKind::KeyOnly), 9 + i, false, false);
    if (!(c.timeline == d.timeline) || c.tokens != d.tokens) {
      detail = "w=0 run " + std::to_string(i) + " differs from key-only";
      return false;
    }
  }
  detail = std::to_string(runs) + " runs per identity, timelines exact";
  return true;
}

// ---- criterion 9 --------------------------------------------------------

bool c9_traffic(std::string& detail) {
  TrafficModel unit;
  unit.dtype_bytes = 1;
  unit.layers = 1;
  unit.heads = 1;
  unit.d_head = 1;
  unit.param_count = 100.0;
  TrafficModel mid;
  mid.dtype_bytes = 2;
  mid.layers = 4;
  mid.heads = 8;
  mid.d_head = 12;
  mid.param_count = 1e8;
  mid.beams = 2;
  TrafficModel odd;
  odd.dtype_bytes = 4;
  odd.layers = 2;
  odd.heads = 5;
  odd.d_head = 7;
  odd.param_count = 3.1e9;
  odd.beams = 3;
  const TrafficModel models[] = {TrafficModel::preset_7b(), unit, mid, odd};
  for (const TrafficModel& m : models)
    for (long n : {128L, 129L, 4095L, 8192L})
      for (int T : {0, 1, 129}) {
        const TrafficReport full = kv_traffic(m, n, T, 1.0);
        const TrafficReport half = kv_traffic(m, n, T, 0.5);
        if (full.kv_total != 2.0 * half.kv_total ||
            full.kv_bytes_per_step != 2.0 * half.kv_bytes_per_step) {
          detail = "halving not exact at n=" + std::to_string(n) + ", T=" + std::to_string(T);
          return false;
        }
      }
  const double crossover = TrafficModel::preset_7b().crossover_tokens();
  detail = "halving exact on 48 cases; 7b crossover at " + fmt("%.0f", crossover) + " tokens";
  return crossover >= 4096.0 && crossover <= 16384.0;
}

// ---- criterion 10 -------------------------------------------------------

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("kvlab_accept_" + std::to_string(::getpid()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

bool c10_tau_schedule(std::string& detail) {
  RngStream rng(1010);
  for (int i = 0; i < 1000; ++i) {
    const double a = 0.25 + static_cast<double>(rng.next_u64() % 1000) / 250.0;
    const double b = a + static_cast<double>(rng.next_u64() % 1000) / 500.0;
    const int T = 1 + static_cast<int>(rng.next_u64() % 512);
    const TauSchedule s(a, b, T);
    const int t = static_cast<int>(rng.next_u64() % static_cast<unsigned>(T + 1));
    const double want = t == 0 ? a : t == T ? b : a + static_cast<double>(t) * ((b - a) / T);
    if (tau_at(s, t) != want || tau_at(s, 0) != a || tau_at(s, T) != b) {
      detail = "schedule (" + fmt("%.3f", a) + ", " + fmt("%.3f", b) + ", T=" +
               std::to_string(T) + ") wrong at t=" + std::to_string(t);
      return false;
    }
  }

  // The schedule must also be sweepable end to end from the CLI.
  TempDir dir;
  const std::filesystem::path grid = dir.path / "grid.json";
  {
    std::ofstream os(grid);
    os << R"({"base": {"prompt_len": 16, "gen_len": 4},
              "policies": ["keyformer"], "tau": ["1:1", "2:2", "1:2"], "seeds": [1]})";
  }
  const std::string cmd = std::string(KVLAB_BIN) + " sweep --grid " + grid.string() + " --out " +
                          dir.path.string() + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  if (status == -1 || !WIFEXITED(status) || WEXITSTATUS(status) != 0) {
    detail = "cli sweep exited nonzero";
    return false;
  }
  std::ifstream csv(dir.path / "sweep.csv");
  std::string line;
  std::getline(csv, line);  // header
  std::vector<std::string> taus;
  while (std::getline(csv, line)) {
    std::stringstream row(line);
    std::string field;
    for (int j = 0; j <= 5 && std::getline(row, field, ','); ++j)
      if (j == 5) taus.push_back(field);
    if (line.find("error") != std::string::npos || line.back() != ',') {
      detail = "sweep row reported an error: " + line;
      return false;
    }
  }
  if (taus != std::vector<std::string>{"1:1", "2:2", "1:2"}) {
    detail = "sweep emitted " + std::to_string(taus.size()) + " arms, expected 1:1, 2:2, 1:2";
    return false;
  }
  detail = "1000 exact evaluations; cli sweep covered all three arms";
  return true;
}

// ---- criterion 11 -------------------------------------------------------

std::vector<PolicySpec> replay_specs() {
  std::vector<PolicySpec> specs;
  specs.push_back(make_policy(PolicyKind::Full));
  specs.push_back(make_policy(PolicyKind::Window));
  specs.push_back(make_policy(PolicyKind::KeyOnly));
  specs.push_back(make_policy(PolicyKind::AttentionSink));
  specs.push_back(make_policy(PolicyKind::H2O));
  PolicySpec damped = make_policy(PolicyKind::Damped);
  damped.alpha = 0.7;
  specs.push_back(damped);
  specs.push_back(make_policy(PolicyKind::Keyformer));
  PolicySpec shared = make_policy(PolicyKind::Keyformer);
  shared.scope = ScoreScope::Shared;
  specs.push_back(shared);
  PolicySpec gauss = make_policy(PolicyKind::Keyformer);
  gauss.adjustment.noise = NoiseSpec::gaussian(0.5, 1.0);
  specs.push_back(gauss);
  PolicySpec renum = make_policy(PolicyKind::Keyformer);
  renum.position_mode = PositionMode::Renumbered;
  specs.push_back(renum);
  return specs;
}

bool c11_replay_fidelity(std::string& detail) {
  Decoder dec{DecoderConfig{}};
  const std::vector<PolicySpec> specs = replay_specs();
  for (std::size_t si = 0; si < specs.size(); ++si)
    for (int r = 0; r < 20; ++r) {
      const long n = 20 + 4 * (r % 3);
      const std::vector<int> prompt =
          synthetic_prompt(n, dec.cfg.vocab, 500 + 31 * static_cast<int>(si) + r);
      const GenerationResult res =
          generate(dec, prompt, 6, specs[si], 900 + r, true, false);
      if (!(replay(res.trace, specs[si]) == res.timeline)) {
        detail = "policy " + to_string(specs[si].kind) + " run " + std::to_string(r) +
                 " did not replay";
        return false;
      }
    }
  detail = std::to_string(specs.size()) + " policies x 20 runs replayed exactly";
  return true;
}

// ---- criterion 12 -------------------------------------------------------

bool c12_divergence(std::string& detail) {
  // Small d_model leaves the random decoder's attention nearly uniform and
  // the generations collapse into prompt-independent loops; at the top of
  // the size envelope the logits carry enough signal for retention quality
  // to show up in the trajectories.
  DecoderConfig cfg;
  cfg.d_model = 256;
  cfg.vocab = 256;
  Decoder dec{cfg};
  const int pairs = 50, gen = 48;
  const long n = 96;
  int at_least = 0;
  double mean_kf = 0.0, mean_win = 0.0;
  const auto late = [gen](int d) { return d < 0 ? gen + 1 : d; };
  for (int i = 0; i < pairs; ++i) {
    const std::vector<int> prompt = synthetic_prompt(n, dec.cfg.vocab, 2000 + i);
    const GenerationResult kf =
        generate(dec, prompt, gen, make_policy(PolicyKind::Keyformer), 600 + i, false, true);
    const GenerationResult win =
        generate(dec, prompt, gen, make_policy(PolicyKind::Window), 600 + i, false, true);
    const int dk = late(kf.metrics.at("divergence_vs_full").get<int>());
    const int dw = late(win.metrics.at("divergence_vs_full").get<int>());
    mean_kf += dk;
    mean_win += dw;
    if (dk >= dw) ++at_least;
  }
  detail = "keyformer held the full trajectory at least as long on " + std::to_string(at_least) +
           "/" + std::to_string(pairs) + " seeds (mean step " + fmt("%.1f", mean_kf / pairs) +
           " vs " + fmt("%.1f", mean_win / pairs) + ")";
  return at_least * 100 >= 60 * pairs;
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* desc;
    bool (*fn)(std::string&);
  };
  const Criterion criteria[] = {
      {1, "scored policies with adjustments off reproduce h2o exactly", c1_h2o_equivalence},
      {2, "greedy slot selection matches exhaustive search", c2_selection_vs_exhaustive},
      {3, "bounded caches hold exactly min(k, seen) after every step", c3_static_budget},
      {4, "cached decoding matches from-scratch recomputation within 1e-5", c4_cached_vs_scratch},
      {5, "noise smoothing raises softmax entropy in at least 99% of trials", c5_entropy_wins},
      {6, "reduced softmax renormalizes uniformly and never shrinks kept mass",
       c6_renormalization},
      {7, "gumbel sampler matches target mean, spread, and cdf", c7_gumbel_sampler},
      {8, "keyformer degenerates to window at w=k and to key-only at w=0", c8_degeneracies},
      {9, "kv traffic halves exactly at half budget and the 7b crossover lands near 8k",
       c9_traffic},
      {10, "temperature schedule is exact at every step and sweepable from the cli",
       c10_tau_schedule},
      {11, "trace replay reproduces recorded timelines for every policy", c11_replay_fidelity},
      {12, "keyformer holds the full trajectory at least as long as window on most seeds",
       c12_divergence},
  };
  int failures = 0;
  for (const Criterion& c : criteria) {
    std::string det;
    bool ok = false;
    try {
      ok = c.fn(det);
    } catch (const std::exception& e) {
      det = std::string("exception: ") + e.what();
    }
    std::printf("[%s] criterion %d: %s%s%s%s\n", ok ? "PASS" : "FAIL", c.id, c.desc,
                det.empty() ? "" : " (", det.c_str(), det.empty() ? "" : ")");
    std::fflush(stdout);
    if (!ok) ++failures;
  }
  return failures == 0 ? 0 : 1;
}
