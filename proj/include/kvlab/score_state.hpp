// Per-token score accumulators driving eviction decisions.
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "kvlab/numerics.hpp"
#include "kvlab/rng.hpp"

namespace kvlab {

// Identifier of a cached token: its position in the original sequence.
// Positions are never reused, so the id stays valid across evictions.
using SlotId = long;

enum class ScoreScope { PerLayerHead, Shared };

std::string to_string(ScoreScope scope);
ScoreScope scope_from_string(const std::string& s);

// What gets added to the logits before the score softmax, and whether the
// score softmax is tempered by the decode-step schedule.
struct AdjustmentStrategy {
  NoiseSpec noise = NoiseSpec::none();
  bool use_temperature = false;

  bool operator==(const AdjustmentStrategy&) const = default;
};

// Running score per cached slot for one (layer, head) pair, or one shared
// instance across all pairs.  Scores are double regardless of activation
// precision.  A slot that has been evicted can never be tracked again.
class ScoreAccumulator {
 public:
  ScoreAccumulator() = default;
  explicit ScoreAccumulator(ScoreScope scope) : scope_(scope) {}

  void add_slot(SlotId id);
  bool has_slot(SlotId id) const { return scores_.count(id) != 0; }
  std::size_t size() const { return scores_.size(); }

  // 0 for a slot never seen; querying an evicted slot is a contract error.
  double score(SlotId id) const;
  std::vector<SlotId> slots() const;              // ascending
  const std::map<SlotId, double>& scores() const { return scores_; }
  const std::set<SlotId>& evicted() const { return evicted_; }

  int step() const { return t_; }
  void set_step(int t);
  ScoreScope scope() const { return scope_; }

  // Adds mass[i] to slot slots[i].  Slots must be distinct tracked slots and
  // match the mass length; during the prompt pass a query row covers only
  // its causal prefix, so the list may be a subset of the tracked set.
  void accumulate(std::span<const SlotId> slots, const Eigen::VectorXd& mass);

  // Drops the given slots and remembers them as evicted.
  void evict(std::span<const SlotId> ids);

  nlohmann::json snapshot() const;
  static ScoreAccumulator from_snapshot(const nlohmann::json& j);

  bool operator==(const ScoreAccumulator&) const = default;

 private:
  std::map<SlotId, double> scores_;
  std::set<SlotId> evicted_;
  ScoreScope scope_ = ScoreScope::PerLayerHead;
  int t_ = 0;
};

// One (slots, mass) pair produced by a single head in a single step.
struct StepUpdate {
  std::vector<SlotId> slots;
  Eigen::VectorXd mass;
};

// y_i = x_i + z_i with z drawn per the strategy's noise spec.  Disabled
// noise returns x unchanged and consumes no randomness.
Eigen::VectorXd adjust_logits(const Eigen::VectorXd& x, const AdjustmentStrategy& strategy,
                              RngStream& rng);

// Score mass of one query row under the noised, tempered softmax:
// softmax((x + z) / tau) with z drawn per entry from `noise`.
Eigen::VectorXd keyformer_mass(const Eigen::VectorXd& logits, double tau,
                               const NoiseSpec& noise, RngStream& rng);

// Accumulates keyformer_mass for the row into `acc`.
void keyformer_increment(ScoreAccumulator& acc, std::span<const SlotId> slots,
                         const Eigen::VectorXd& logits, double tau,
                         const NoiseSpec& noise, RngStream& rng);

// Accumulates raw attention probabilities (accumulated-attention scoring).
// Equals keyformer_increment with noise disabled and tau = 1 on the same
// logits, provided probs = softmax(logits) at double precision.
void accattn_increment(ScoreAccumulator& acc, std::span<const SlotId> slots,
                       const Eigen::VectorXd& probs);

// Sums per-head updates into one update.  All inputs must cover the same
// slot list in the same order; summation order is the order given, so the
// reduction is deterministic.
StepUpdate merge_shared(std::span<const StepUpdate> updates);

// Removes evicted slots from the accumulator, keeping it aligned with the
// cache after an eviction.
void evict_from_state(ScoreAccumulator& acc, std::span<const SlotId> evicted);

// The set of accumulators for a decoder: one per (layer, head) pair, or a
// single shared one.  at(l, h) resolves to the shared instance when scope
// is Shared.
class ScoreBank {
 public:
  ScoreBank() = default;
  ScoreBank(ScoreScope scope, int layers, int heads);

  ScoreScope scope() const { return scope_; }
  int layers() const { return layers_; }
  int heads() const { return heads_; }
  std::size_t count() const { return accs_.size(); }

  ScoreAccumulator& at(int layer, int head);
  const ScoreAccumulator& at(int layer, int head) const;

  void set_step(int t);

  nlohmann::json snapshot() const;
  static ScoreBank from_snapshot(const nlohmann::json& j);

  bool operator==(const ScoreBank&) const = default;

 private:
  std::size_t index(int layer, int head) const;

  ScoreScope scope_ = ScoreScope::PerLayerHead;
  int layers_ = 0;
  int heads_ = 0;
  std::vector<ScoreAccumulator> accs_;
};

}  // namespace kvlab
