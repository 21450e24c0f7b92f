// KV cache container, eviction policies, and budget resolution.
#pragma once

#include <Eigen/Dense>

#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "kvlab/numerics.hpp"
#include "kvlab/score_state.hpp"

namespace kvlab {

enum class PolicyKind { Full, Window, KeyOnly, AttentionSink, H2O, Damped, Keyformer };
enum class PositionMode { Original, Renumbered };

std::string to_string(PolicyKind kind);
PolicyKind policy_kind_from_string(const std::string& s);
std::string to_string(PositionMode mode);
PositionMode position_mode_from_string(const std::string& s);

// Ablation defaults: the constant shift matches the mean of a standard
// Gumbel, the gaussian matches its first two moments.
inline constexpr double kConstantNoiseDefault = 0.5772;
inline constexpr double kGaussianMuDefault = 0.5772;
inline constexpr double kGaussianSigmaDefault = 1.2825;

struct CacheEntry {
  SlotId position = 0;  // position in the original sequence; unique forever
  int token_id = 0;
  Eigen::VectorXf key;
  Eigen::VectorXf value;
};

// Ordered KV store for one (layer, head) pair.  Entries are sorted by
// original position; appends must be strictly increasing, and a position
// that has been evicted can never be appended again.
class KvCache {
 public:
  static constexpr int kNoBudget = -1;

  KvCache() = default;
  KvCache(int budget, int window);

  int budget() const { return budget_; }
  int window() const { return window_; }
  bool bounded() const { return budget_ >= 0; }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const CacheEntry& entry(std::size_t i) const;
  long max_position() const { return entries_.empty() ? -1 : entries_.back().position; }

  std::vector<SlotId> positions() const;  // ascending
  bool contains(SlotId pos) const;
  const std::set<SlotId>& evicted() const { return evicted_; }

  // During the prompt fill (before anything was evicted) the cache may grow
  // past its budget; afterwards it may hold budget + 1 entries transiently,
  // between the append of a new token and the end-of-step eviction.
  void append(CacheEntry e);

  // Keeps exactly the given positions (a nonempty subset of the current
  // ones) and returns the evicted positions in ascending order.
  std::vector<SlotId> keep_only(std::span<const SlotId> kept);

  // Stacked keys / values in entry order, one row per cached token.
  Eigen::MatrixXf keys() const;
  Eigen::MatrixXf values() const;

 private:
  std::vector<CacheEntry> entries_;
  std::set<SlotId> evicted_;
  int budget_ = kNoBudget;
  int window_ = 0;
};

// User-facing policy description, before the budget is bound to a concrete
// prompt.  Exactly one of kv_pct / k_abs may be given; if neither is, the
// budget defaults to 50 percent of the prompt.
struct PolicySpec {
  PolicyKind kind = PolicyKind::Keyformer;
  std::optional<double> kv_pct;  // percent of prompt length, in (0, 100]
  std::optional<int> k_abs;      // absolute token budget, >= 1
  double recent_ratio = 0.3;     // w as a fraction of k (scored policies)
  int sinks = 4;                 // attention_sink only
  double alpha = 1.0;            // damped only, in (0, 1]
  AdjustmentStrategy adjustment;
  double tau_init = 1.0;
  double tau_end = 2.0;
  ScoreScope scope = ScoreScope::PerLayerHead;
  PositionMode position_mode = PositionMode::Original;

  bool operator==(const PolicySpec&) const = default;
};

// Spec with the kind's default adjustment filled in: keyformer gets Gumbel
// noise plus the temperature ramp, every other kind scores raw logits.
PolicySpec make_policy(PolicyKind kind);
AdjustmentStrategy default_adjustment(PolicyKind kind);

nlohmann::json to_json(const NoiseSpec& spec);
NoiseSpec noise_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PolicySpec& spec);
PolicySpec policy_from_json(const nlohmann::json& j);

// Policy with the budget bound to a prompt: k = floor(pct * n / 100) (at
// least 1), w derived per kind.  k = -1 means unbounded (full attention).
struct ResolvedPolicy {
  PolicyKind kind = PolicyKind::Full;
  int k = KvCache::kNoBudget;
  int w = 0;
  int sinks = 0;
  double alpha = 1.0;
  AdjustmentStrategy adjustment;
  ScoreScope scope = ScoreScope::PerLayerHead;
  PositionMode position_mode = PositionMode::Original;
  TauSchedule tau;

  bool bounded() const { return k >= 0; }
  bool scored() const {
    return kind == PolicyKind::Keyformer || kind == PolicyKind::H2O ||
           kind == PolicyKind::Damped || kind == PolicyKind::KeyOnly;
  }
  // tau used for the score softmax at decode step t.
  double tau_for_step(int t) const { return adjustment.use_temperature ? tau_at(tau, t) : 1.0; }

  bool operator==(const ResolvedPolicy&) const = default;
};

ResolvedPolicy resolve(const PolicySpec& spec, long prompt_len, int gen_len);

// Keyformer selection: the w most recent cache positions are always kept;
// the remaining k - w places go to the highest-scoring older slots.  Ties
// break toward the lower original position.  Result is ascending.  w = k
// degenerates to a pure recency window and reads no scores.
std::vector<SlotId> select_keyformer(const ScoreAccumulator& scores,
                                     std::span<const SlotId> cache_order, int k, int w);

// The k positions this policy would keep given the current cache contents.
// Scored kinds require `scores`; pass nullptr for the others.  If the cache
// holds <= k entries (or the policy is unbounded) everything is kept.
std::vector<SlotId> policy_keep_set(const KvCache& cache, const ScoreAccumulator* scores,
                                    const ResolvedPolicy& policy);

// One-shot reduction after the prompt pass.  Prunes cache and scores to the
// keep set; returns the evicted positions.  No-op when nothing exceeds k.
std::vector<SlotId> prompt_reduce(KvCache& cache, ScoreAccumulator* scores,
                                  const ResolvedPolicy& policy);

// Eviction of exactly one token at the end of a decode step.  The cache
// must hold k + 1 entries.  Returns the evicted position.
SlotId step_evict(KvCache& cache, ScoreAccumulator* scores, const ResolvedPolicy& policy);

// End-of-step reduction across a decoder's full cache set, honouring the
// score scope: per_layer_head reduces each cache against its own
// accumulator, shared computes one keep set from the first cache and the
// shared scores and applies it everywhere.  Caches already within budget
// are untouched.  Returns true if anything was evicted.
bool reduce_caches(std::vector<KvCache>& caches, ScoreBank& bank, const ResolvedPolicy& policy);

// Position ids the attention computation should use, in cache entry order:
// original sequence positions, or a dense renumbering 0..m-1 of the
// surviving entries.
std::vector<long> position_ids(const KvCache& cache, PositionMode mode);

// Indices (into cache entry order) the current query may attend to.  Only
// the window policy restricts attention beyond what eviction already did:
// it sees the last w entries.  Everything else attends to the whole cache.
std::vector<std::size_t> policy_attention_mask(const ResolvedPolicy& policy,
                                               const KvCache& cache);

}  // namespace kvlab
