#include "kvlab/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace kvlab {

std::string to_string(PosEncoding enc) {
  return enc == PosEncoding::Alibi ? "alibi" : "sinusoidal";
}

PosEncoding pos_encoding_from_string(const std::string& s) {
  if (s == "sinusoidal") return PosEncoding::Sinusoidal;
  if (s == "alibi") return PosEncoding::Alibi;
  throw std::invalid_argument("unknown position encoding '" + s + "'; valid: sinusoidal, alibi");
}

void DecoderConfig::validate() const {
  if (layers < 1 || layers > 8) throw std::invalid_argument("DecoderConfig: layers must be in [1, 8]");
  if (heads < 1) throw std::invalid_argument("DecoderConfig: heads must be >= 1");
  if (d_model < 2 || d_model > 256) throw std::invalid_argument("DecoderConfig: d_model must be in [2, 256]");
  if (d_model % 2 != 0) throw std::invalid_argument("DecoderConfig: d_model must be even");
  if (d_model % heads != 0) throw std::invalid_argument("DecoderConfig: d_model must be divisible by heads");
  if (vocab < 2 || vocab > 1024) throw std::invalid_argument("DecoderConfig: vocab must be in [2, 1024]");
  if (max_positions < 1 || max_positions > 2048)
    throw std::invalid_argument("DecoderConfig: max_positions must be in [1, 2048]");
}

nlohmann::json to_json(const DecoderConfig& cfg) {
  return {{"layers", cfg.layers},
          {"heads", cfg.heads},
          {"d_model", cfg.d_model},
          {"vocab", cfg.vocab},
          {"max_positions", cfg.max_positions},
          {"pos_encoding", to_string(cfg.pos_encoding)},
          {"weight_seed", cfg.weight_seed}};
}

DecoderConfig decoder_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("decoder config: expected a JSON object");
  DecoderConfig cfg;
  for (const auto& [key, val] : j.items()) {
    try {
      if (key == "layers") cfg.layers = val.get<int>();
      else if (key == "heads") cfg.heads = val.get<int>();
      else if (key == "d_model") cfg.d_model = val.get<int>();
      else if (key == "vocab") cfg.vocab = val.get<int>();
      else if (key == "max_positions") cfg.max_positions = val.get<int>();
      else if (key == "pos_encoding") cfg.pos_encoding = pos_encoding_from_string(val.get<std::string>());
      else if (key == "weight_seed") cfg.weight_seed = val.get<std::uint64_t>();
      else throw std::invalid_argument("decoder config: unknown key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument("decoder config: bad value for '" + key + "': " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

std::uint64_t DecoderConfig::hash() const {
  const std::string s = to_json(*this).dump();
  std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

float alibi_slope(int head, int n_heads) {
  if (n_heads < 1 || head < 0 || head >= n_heads)
    throw std::invalid_argument("alibi_slope: head out of range");
  int p = 1;
  while (p * 2 <= n_heads) p *= 2;
  if (head < p) return std::pow(2.0f, -8.0f * static_cast<float>(head + 1) / static_cast<float>(p));
  // Non-power-of-two head counts take the odd-indexed slopes of the next
  // power of two, interleaved after the base sequence.
  return std::pow(2.0f, -4.0f * static_cast<float>(2 * (head - p) + 1) / static_cast<float>(p));
}

Eigen::VectorXf sinusoidal_position(long pos, int d_model) {
  if (pos < 0 || d_model < 2 || d_model % 2 != 0)
    throw std::invalid_argument("sinusoidal_position: need pos >= 0 and even d_model");
  Eigen::VectorXf pe(d_model);
  for (int i = 0; i < d_model; i += 2) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / d_model);
    pe[i] = static_cast<float>(std::sin(static_cast<double>(pos) * freq));
    pe[i + 1] = static_cast<float>(std::cos(static_cast<double>(pos) * freq));
  }
  return pe;
}

namespace {

Eigen::MatrixXf gaussian_matrix(Eigen::Index rows, Eigen::Index cols, RngStream& rng) {
  Eigen::MatrixXf m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c)
      m(r, c) = static_cast<float>(rng.gaussian(0.0, 0.02));
  return m;
}

constexpr float kLnEps = 1e-5f;

Eigen::VectorXf layer_norm(const Eigen::VectorXf& x) {
  const float mean = x.mean();
  Eigen::ArrayXf c = x.array() - mean;
  const float var = c.square().mean();
  return (c / std::sqrt(var + kLnEps)).matrix();
}

Eigen::MatrixXf layer_norm_rows(const Eigen::MatrixXf& x) {
  Eigen::MatrixXf out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r)
    out.row(r) = layer_norm(x.row(r).transpose()).transpose();
  return out;
}

float gelu(float v) {
  constexpr float kSqrt2OverPi = 0.7978845608028654f;
  return 0.5f * v * (1.0f + std::tanh(kSqrt2OverPi * (v + 0.044715f * v * v * v)));
}

Eigen::MatrixXf gelu_all(Eigen::MatrixXf m) {
  return m.unaryExpr([](float v) { return gelu(v); });
}

Eigen::VectorXf gelu_all(Eigen::VectorXf v) {
  return v.unaryExpr([](float x) { return gelu(x); });
}

void push_snapshot(KeptTimeline* tl, const DecodeSession& s) {
  if (!tl) return;
  tl->layers = s.layers;
  tl->heads = s.heads;
  std::vector<std::vector<SlotId>> cells;
  cells.reserve(s.caches.size());
  for (const KvCache& c : s.caches) cells.push_back(c.positions());
  tl->steps.push_back(std::move(cells));
}

void record_row(AttentionTrace* trace, int t, int layer, int head, long q_pos,
                const std::vector<SlotId>& slots, const Eigen::VectorXd& logits) {
  if (!trace) return;
  TraceRecord r;
  r.t = t;
  r.layer = layer;
  r.head = head;
  r.q_pos = q_pos;
  r.slots = slots;
  r.logits.assign(logits.data(), logits.data() + logits.size());
  trace->records.push_back(std::move(r));
}

// Scoring mass for one attention row: noised, tempered softmax in double,
// damped only for the damped policy.  Noise comes from the row's
// (layer, head) stream, so replay can reproduce the draw order.
Eigen::VectorXd score_mass(const ResolvedPolicy& policy, const Eigen::VectorXd& row, int t,
                           RngStream& rng) {
  Eigen::VectorXd mass = keyformer_mass(row, policy.tau_for_step(t), policy.adjustment.noise, rng);
  if (policy.alpha != 1.0) mass = damp(mass, policy.alpha);
  return mass;
}

int validate_token(int token, int vocab) {
  if (token < 0 || token >= vocab) throw std::invalid_argument("token id outside vocab");
  return token;
}

}  // namespace

Decoder::Decoder(const DecoderConfig& config) : cfg(config) {
  cfg.validate();
  RngStream rng(cfg.weight_seed);
  embedding = gaussian_matrix(cfg.vocab, cfg.d_model, rng);
  layers.reserve(static_cast<std::size_t>(cfg.layers));
  for (int l = 0; l < cfg.layers; ++l) {
    LayerWeights w;
    w.wq = gaussian_matrix(cfg.d_model, cfg.d_model, rng);
    w.wk = gaussian_matrix(cfg.d_model, cfg.d_model, rng);
    w.wv = gaussian_matrix(cfg.d_model, cfg.d_model, rng);
    w.wo = gaussian_matrix(cfg.d_model, cfg.d_model, rng);
    w.w_in = gaussian_matrix(cfg.d_ff(), cfg.d_model, rng);
    w.w_out = gaussian_matrix(cfg.d_model, cfg.d_ff(), rng);
    layers.push_back(std::move(w));
  }
}

DecodeSession make_session(const Decoder& dec, const PolicySpec& spec, long prompt_len,
                           int gen_len, std::uint64_t noise_seed) {
  DecodeSession s;
  s.policy = resolve(spec, prompt_len, gen_len);
  s.layers = dec.cfg.layers;
  s.heads = dec.cfg.heads;
  const std::size_t cells = static_cast<std::size_t>(s.layers) * s.heads;
  s.caches.assign(cells, KvCache(s.policy.k, s.policy.w));
  s.scores = ScoreBank(s.policy.scope, s.layers, s.heads);
  const RngStream root(noise_seed);
  s.noise.reserve(cells);
  for (std::size_t i = 0; i < cells; ++i) s.noise.push_back(root.derive(i));
  return s;
}

StepOutput prefill(const Decoder& dec, DecodeSession& s, std::span<const int> prompt,
                   AttentionTrace* trace, KeptTimeline* timeline) {
  const DecoderConfig& cfg = dec.cfg;
  if (s.prefilled) throw std::logic_error("prefill: session already prefilled");
  const long n = static_cast<long>(prompt.size());
  if (n < 1) throw std::invalid_argument("prefill: prompt must be nonempty");
  if (n > cfg.max_positions) throw std::invalid_argument("prefill: prompt exceeds max_positions");
  for (int tok : prompt) validate_token(tok, cfg.vocab);

  const int L = cfg.layers, H = cfg.heads, dm = cfg.d_model, dh = cfg.d_head();
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  const bool scored = s.policy.scored();
  const bool shared = s.policy.scope == ScoreScope::Shared;
  const bool alibi = cfg.pos_encoding == PosEncoding::Alibi;

  // Both position modes agree during the prompt: nothing has been evicted,
  // so original and renumbered ids are both 0..n-1.
  Eigen::MatrixXf x(n, dm);
  for (long i = 0; i < n; ++i) {
    x.row(i) = dec.embedding.row(prompt[static_cast<std::size_t>(i)]);
    if (!alibi) x.row(i) += sinusoidal_position(i, dm).transpose();
  }

  // Shared scope defers per-row increments so each query row merges across
  // (layer, head) in a fixed order before touching the accumulator.
  std::vector<std::vector<StepUpdate>> row_updates;
  if (scored && shared) row_updates.resize(static_cast<std::size_t>(n));

  StepOutput out;
  out.row_slots.assign(static_cast<std::size_t>(L) * H, {});
  out.row_logits.assign(static_cast<std::size_t>(L) * H, {});

  for (int l = 0; l < L; ++l) {
    const LayerWeights& w = dec.layers[static_cast<std::size_t>(l)];
    const Eigen::MatrixXf xn = layer_norm_rows(x);
    const Eigen::MatrixXf q = xn * w.wq.transpose();
    const Eigen::MatrixXf k = xn * w.wk.transpose();
    const Eigen::MatrixXf v = xn * w.wv.transpose();
    Eigen::MatrixXf attn(n, dm);

    for (int h = 0; h < H; ++h) {
      const auto qh = q.middleCols(static_cast<Eigen::Index>(h) * dh, dh);
      const auto kh = k.middleCols(static_cast<Eigen::Index>(h) * dh, dh);
      const auto vh = v.middleCols(static_cast<Eigen::Index>(h) * dh, dh);
      KvCache& cache = s.cache(l, h);
      ScoreAccumulator& acc = s.scores.at(l, h);
      for (long i = 0; i < n; ++i) {
        cache.append({i, prompt[static_cast<std::size_t>(i)], kh.row(i).transpose(),
                      vh.row(i).transpose()});
        if (!acc.has_slot(i)) acc.add_slot(i);
      }
      const float slope = alibi ? alibi_slope(h, H) : 0.0f;
      Eigen::MatrixXf probs = Eigen::MatrixXf::Zero(n, n);
      for (long qi = 0; qi < n; ++qi) {
        Eigen::VectorXf row = (qh.row(qi) * kh.topRows(qi + 1).transpose()).transpose() * scale;
        if (alibi)
          for (long j = 0; j <= qi; ++j) row[j] -= slope * static_cast<float>(qi - j);
        std::vector<SlotId> slots(static_cast<std::size_t>(qi) + 1);
        for (long j = 0; j <= qi; ++j) slots[static_cast<std::size_t>(j)] = j;
        const Eigen::VectorXd row_d = row.cast<double>();
        record_row(trace, 0, l, h, qi, slots, row_d);
        const std::size_t cell = static_cast<std::size_t>(l) * H + h;
        if (qi == n - 1) {
          out.row_slots[cell] = slots;
          out.row_logits[cell] = row_d;
        }
        if (scored) {
          Eigen::VectorXd mass = score_mass(s.policy, row_d, 0, s.noise[cell]);
          if (shared)
            row_updates[static_cast<std::size_t>(qi)].push_back({std::move(slots), std::move(mass)});
          else
            acc.accumulate(slots, mass);
        }
        probs.row(qi).head(qi + 1) = softmax(row).transpose();
      }
      attn.middleCols(static_cast<Eigen::Index>(h) * dh, dh) = probs * vh;
    }
    x += attn * w.wo.transpose();
    x += gelu_all(Eigen::MatrixXf(layer_norm_rows(x) * w.w_in.transpose())) * w.w_out.transpose();
  }

  if (scored && shared) {
    ScoreAccumulator& acc = s.scores.at(0, 0);
    for (const auto& updates : row_updates) {
      const StepUpdate merged = merge_shared(updates);
      acc.accumulate(merged.slots, merged.mass);
    }
  }

  reduce_caches(s.caches, s.scores, s.policy);
  s.next_position = n;
  s.t = 0;
  s.prefilled = true;
  s.scores.set_step(0);
  push_snapshot(timeline, s);

  out.next_logits = dec.embedding * layer_norm(x.row(n - 1).transpose());
  return out;
}

StepOutput decode_step(const Decoder& dec, DecodeSession& s, int token,
                       AttentionTrace* trace, KeptTimeline* timeline) {
  const DecoderConfig& cfg = dec.cfg;
  if (!s.prefilled) throw std::logic_error("decode_step: prefill the session first");
  const int t = s.t + 1;
  if (t > s.policy.tau.horizon)
    throw std::invalid_argument("decode_step: generation horizon exhausted");
  validate_token(token, cfg.vocab);
  const long pos = s.next_position;
  if (pos >= cfg.max_positions)
    throw std::invalid_argument("decode_step: sequence exceeds max_positions");

  const int L = cfg.layers, H = cfg.heads, dm = cfg.d_model, dh = cfg.d_head();
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  const bool scored = s.policy.scored();
  const bool shared = s.policy.scope == ScoreScope::Shared;
  const bool alibi = cfg.pos_encoding == PosEncoding::Alibi;

  // Renumbered mode positions the new token at its cache index, which is
  // the same in every cache because budgets are uniform.
  const long input_id = s.policy.position_mode == PositionMode::Renumbered
                            ? static_cast<long>(s.cache(0, 0).size())
                            : pos;

  Eigen::VectorXf x = dec.embedding.row(token).transpose();
  if (!alibi) x += sinusoidal_position(input_id, dm);

  StepOutput out;
  out.row_slots.assign(static_cast<std::size_t>(L) * H, {});
  out.row_logits.assign(static_cast<std::size_t>(L) * H, {});
  std::vector<StepUpdate> step_updates;

  for (int l = 0; l < L; ++l) {
    const LayerWeights& w = dec.layers[static_cast<std::size_t>(l)];
    const Eigen::VectorXf xn = layer_norm(x);
    const Eigen::VectorXf q = w.wq * xn;
    const Eigen::VectorXf k = w.wk * xn;
    const Eigen::VectorXf v = w.wv * xn;
    Eigen::VectorXf attn(dm);

    for (int h = 0; h < H; ++h) {
      const std::size_t cell = static_cast<std::size_t>(l) * H + h;
      KvCache& cache = s.cache(l, h);
      ScoreAccumulator& acc = s.scores.at(l, h);
      cache.append({pos, token, k.segment(static_cast<Eigen::Index>(h) * dh, dh),
                    v.segment(static_cast<Eigen::Index>(h) * dh, dh)});
      if (!acc.has_slot(pos)) acc.add_slot(pos);

      const Eigen::MatrixXf keys = cache.keys();
      Eigen::VectorXf row = keys * q.segment(static_cast<Eigen::Index>(h) * dh, dh) * scale;
      if (alibi) {
        const std::vector<long> ids = position_ids(cache, s.policy.position_mode);
        const float slope = alibi_slope(h, H);
        const long q_id = ids.back();  // the query is the newest entry
        for (Eigen::Index j = 0; j < row.size(); ++j)
          row[j] -= slope * static_cast<float>(q_id - ids[static_cast<std::size_t>(j)]);
      }

      const std::vector<SlotId> slots = cache.positions();
      const Eigen::VectorXd row_d = row.cast<double>();
      record_row(trace, t, l, h, pos, slots, row_d);
      out.row_slots[cell] = slots;
      out.row_logits[cell] = row_d;

      if (scored) {
        Eigen::VectorXd mass = score_mass(s.policy, row_d, t, s.noise[cell]);
        if (shared)
          step_updates.push_back({slots, std::move(mass)});
        else
          acc.accumulate(slots, mass);
      }

      // Context mixing runs in float over the masked row; only the window
      // policy masks anything beyond what eviction already removed.
      const std::vector<std::size_t> mask = policy_attention_mask(s.policy, cache);
      Eigen::VectorXf masked(static_cast<Eigen::Index>(mask.size()));
      for (std::size_t j = 0; j < mask.size(); ++j)
        masked[static_cast<Eigen::Index>(j)] = row[static_cast<Eigen::Index>(mask[j])];
      const Eigen::VectorXf probs = softmax(masked);
      Eigen::VectorXf ctx = Eigen::VectorXf::Zero(dh);
      for (std::size_t j = 0; j < mask.size(); ++j)
        ctx += probs[static_cast<Eigen::Index>(j)] * cache.entry(mask[j]).value;
      attn.segment(static_cast<Eigen::Index>(h) * dh, dh) = ctx;
    }

    x += w.wo * attn;
    x += w.w_out * gelu_all(Eigen::VectorXf(w.w_in * layer_norm(x)));
  }

  if (scored && shared) {
    const StepUpdate merged = merge_shared(step_updates);
    s.scores.at(0, 0).accumulate(merged.slots, merged.mass);
  }

  reduce_caches(s.caches, s.scores, s.policy);
  s.next_position = pos + 1;
  s.t = t;
  s.scores.set_step(t);
  push_snapshot(timeline, s);

  out.next_logits = dec.embedding * layer_norm(x);
  return out;
}

std::vector<int> synthetic_prompt(long len, int vocab, std::uint64_t seed) {
  if (len < 1) throw std::invalid_argument("synthetic_prompt: length must be >= 1");
  if (vocab < 2) throw std::invalid_argument("synthetic_prompt: vocab must be >= 2");
  RngStream rng(seed);
  std::vector<int> out(static_cast<std::size_t>(len));
  for (auto& tok : out) tok = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(vocab));
  return out;
}

GenerationResult generate(const Decoder& dec, std::span<const int> prompt, int gen_len,
                          const PolicySpec& spec, std::uint64_t noise_seed, bool record_rows,
                          bool with_full_baseline) {
  if (gen_len < 1) throw std::invalid_argument("generate: gen_len must be >= 1");
  const long n = static_cast<long>(prompt.size());
  if (n + gen_len > dec.cfg.max_positions)
    throw std::invalid_argument("generate: prompt + gen_len exceeds max_positions");

  GenerationResult res;
  res.trace.header.version = 1;
  res.trace.header.config_hash = dec.cfg.hash();
  res.trace.header.layers = dec.cfg.layers;
  res.trace.header.heads = dec.cfg.heads;
  res.trace.header.prompt_len = n;
  res.trace.header.gen_len = gen_len;
  res.trace.header.weight_seed = dec.cfg.weight_seed;
  res.trace.header.noise_seed = noise_seed;
  res.trace.header.policy = to_json(spec);

  DecodeSession s = make_session(dec, spec, n, gen_len, noise_seed);
  AttentionTrace* sink = record_rows ? &res.trace : nullptr;
  StepOutput step = prefill(dec, s, prompt, sink, &res.timeline);
  res.tokens.reserve(static_cast<std::size_t>(gen_len));
  for (int t = 1; t <= gen_len; ++t) {
    Eigen::Index next = 0;
    step.next_logits.maxCoeff(&next);  // first maximum: lowest token id wins ties
    res.tokens.push_back(static_cast<int>(next));
    step = decode_step(dec, s, static_cast<int>(next), sink, &res.timeline);
  }

  nlohmann::json sizes = nlohmann::json::array();
  for (const auto& cells : res.timeline.steps) sizes.push_back(cells.front().size());

  int divergence = -1;
  if (spec.kind != PolicyKind::Full && with_full_baseline) {
    const GenerationResult full =
        generate(dec, prompt, gen_len, make_policy(PolicyKind::Full), noise_seed, false, false);
    divergence = divergence_step(res.tokens, full.tokens);
  }

  res.metrics = {{"prompt_len", n},
                 {"gen_len", gen_len},
                 {"k", s.policy.k},
                 {"w", s.policy.w},
                 {"policy", to_json(spec)},
                 {"noise_seed", noise_seed},
                 {"cache_sizes", sizes},
                 {"divergence_vs_full", divergence},
                 {"tokens", res.tokens}};
  return res;
}

}  // namespace kvlab
