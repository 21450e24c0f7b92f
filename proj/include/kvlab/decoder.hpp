// Desk-scale causal transformer decoder with seeded random weights.  No
// training: the model exists to produce realistic attention logits and a
// feedback loop where eviction changes later generations.
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "kvlab/cache_policy.hpp"
#include "kvlab/score_state.hpp"
#include "kvlab/trace.hpp"

namespace kvlab {

enum class PosEncoding { Sinusoidal, Alibi };

std::string to_string(PosEncoding enc);
PosEncoding pos_encoding_from_string(const std::string& s);

struct DecoderConfig {
  int layers = 2;
  int heads = 2;
  int d_model = 32;
  int vocab = 64;
  int max_positions = 512;
  PosEncoding pos_encoding = PosEncoding::Sinusoidal;
  std::uint64_t weight_seed = 1;

  int d_head() const { return d_model / heads; }
  int d_ff() const { return 4 * d_model; }

  // Desk-scale envelope: layers <= 8, d_model <= 256 (even, divisible by
  // heads), vocab <= 1024, max_positions <= 2048.
  void validate() const;

  // Stable content hash, stored in trace headers so a trace can be matched
  // back to the decoder that produced it.
  std::uint64_t hash() const;

  bool operator==(const DecoderConfig&) const = default;
};

nlohmann::json to_json(const DecoderConfig& cfg);
DecoderConfig decoder_config_from_json(const nlohmann::json& j);

// Standard geometric ALiBi slope for head h of n_heads: 2^(-8(h+1)/n) when
// n is a power of two, with the usual interleaved extension otherwise.
float alibi_slope(int head, int n_heads);

// Fixed sin/cos absolute position embedding, interleaved pairs.
Eigen::VectorXf sinusoidal_position(long pos, int d_model);

struct LayerWeights {
  Eigen::MatrixXf wq, wk, wv, wo;  // d_model x d_model
  Eigen::MatrixXf w_in;            // d_ff x d_model
  Eigen::MatrixXf w_out;           // d_model x d_ff
};

// Pre-LN decoder with tied input/output embeddings and parameterless layer
// norm.  All weights are N(0, 0.02) draws from one seeded stream, filled in
// a documented order (embedding, then per layer wq, wk, wv, wo, w_in,
// w_out, each row-major), so a seed pins every coefficient.  Weights are
// immutable after construction and shareable across threads.
struct Decoder {
  DecoderConfig cfg;
  Eigen::MatrixXf embedding;  // vocab x d_model
  std::vector<LayerWeights> layers;

  explicit Decoder(const DecoderConfig& config);
};

// Attention rows of the last query processed, one per (layer, head), plus
// the next-token logits.  Row logits are double copies of the float rows;
// the same values go into traces and score updates.
struct StepOutput {
  Eigen::VectorXf next_logits;
  std::vector<std::vector<SlotId>> row_slots;
  std::vector<Eigen::VectorXd> row_logits;
};

// Mutable per-sequence state: caches and score accumulators indexed by
// layer * heads + head, one noise stream per (layer, head) derived from the
// noise seed, and the step counter driving the temperature schedule.
struct DecodeSession {
  ResolvedPolicy policy;
  std::vector<KvCache> caches;
  ScoreBank scores;
  std::vector<RngStream> noise;
  int layers = 0;
  int heads = 0;
  long next_position = 0;
  int t = 0;
  bool prefilled = false;

  KvCache& cache(int layer, int head) {
    return caches[static_cast<std::size_t>(layer) * heads + head];
  }
  const KvCache& cache(int layer, int head) const {
    return caches[static_cast<std::size_t>(layer) * heads + head];
  }
};

DecodeSession make_session(const Decoder& dec, const PolicySpec& spec, long prompt_len,
                           int gen_len, std::uint64_t noise_seed);

// Full causal pass over the prompt: fills every cache, records one
// attention row per (layer, head, query), accumulates scores at tau_init,
// then applies the one-shot prompt reduction.  Returns the logits for the
// first generated token.
StepOutput prefill(const Decoder& dec, DecodeSession& s, std::span<const int> prompt,
                   AttentionTrace* trace, KeptTimeline* timeline);

// One generation step: appends the token's KV, attends over the cache with
// position ids per the policy's position mode, updates scores with the
// step's tau, and evicts back down to k at the end of the step.
StepOutput decode_step(const Decoder& dec, DecodeSession& s, int token,
                       AttentionTrace* trace, KeptTimeline* timeline);

struct GenerationResult {
  std::vector<int> tokens;  // greedy generations, length gen_len
  AttentionTrace trace;
  KeptTimeline timeline;
  nlohmann::json metrics;
};

// Greedy decoding for gen_len tokens.  The trace carries every attention
// row unless record_rows is off or gen_len is 0 (nothing to replay).
// Metrics include per-step cache sizes and the first step at which the
// generation diverges from a full-attention run of the same decoder.
GenerationResult generate(const Decoder& dec, std::span<const int> prompt, int gen_len,
                          const PolicySpec& spec, std::uint64_t noise_seed,
                          bool record_rows = true, bool with_full_baseline = true);

// Seeded uniform token ids, the synthetic prompt source.
std::vector<int> synthetic_prompt(long len, int vocab, std::uint64_t seed);

}  // namespace kvlab
