// Attention traces: JSONL recording, replay against other policies, and
// kept-set timeline comparisons.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "kvlab/cache_policy.hpp"
#include "kvlab/score_state.hpp"

namespace kvlab {

// Which tokens survived in every (layer, head) cache after each step.
// steps[t][layer * heads + head] is an ascending position list; step 0 is
// the state right after the prompt pass.
struct KeptTimeline {
  int layers = 0;
  int heads = 0;
  std::vector<std::vector<std::vector<SlotId>>> steps;

  const std::vector<SlotId>& at(int t, int layer, int head) const;
  int step_count() const { return static_cast<int>(steps.size()); }

  bool operator==(const KeptTimeline&) const = default;
};

// Per-step Jaccard similarity series: J_t averages |a ∩ b| / |a ∪ b| over
// the (layer, head) cells of step t.  Timelines must have identical shape.
std::vector<double> overlap(const KeptTimeline& a, const KeptTimeline& b);

// Mean of the overlap series.
double mean_overlap(const KeptTimeline& a, const KeptTimeline& b);

// First step whose kept sets differ anywhere, or -1 if identical.
int timeline_divergence(const KeptTimeline& a, const KeptTimeline& b);

// First index where two token sequences differ, or -1 if one is a prefix of
// the other (including exact equality).
int divergence_step(std::span<const int> a, std::span<const int> b);

// Rejects timelines that violate budget, recency, or irreversibility: cell
// sizes capped at k, the w freshest available positions always kept, and
// nothing ever returning after eviction.  k < 0 means unbounded.
void validate_timeline(const KeptTimeline& tl, long prompt_len, int k, int w);

struct TraceHeader {
  int version = 1;
  std::uint64_t config_hash = 0;
  int layers = 0;
  int heads = 0;
  long prompt_len = 0;
  int gen_len = 0;
  std::uint64_t weight_seed = 0;
  std::uint64_t noise_seed = 0;
  nlohmann::json policy;  // PolicySpec that produced the trace

  bool operator==(const TraceHeader&) const = default;
};

// One attention row: logits of query q_pos over the cache it saw, aligned
// with `slots`.  The query is always the newest cached token, so q_pos
// equals slots.back().
struct TraceRecord {
  int t = 0;
  int layer = 0;
  int head = 0;
  long q_pos = 0;
  std::vector<SlotId> slots;
  std::vector<double> logits;

  bool operator==(const TraceRecord&) const = default;
};

struct AttentionTrace {
  TraceHeader header;
  std::vector<TraceRecord> records;

  bool operator==(const AttentionTrace&) const = default;
};

// JSONL: one header object, then one object per record, ordered by
// (t, layer, head, q_pos).  Logits are printed with 17 significant digits,
// so reading back reproduces every double bit for bit.
void write_trace(const AttentionTrace& trace, std::ostream& os);
void write_trace_file(const AttentionTrace& trace, const std::string& path);

// Parses and validates a trace: header shape, record count (a file cut off
// mid-stream is rejected), record ordering, and slot/logit alignment.
// Throws std::runtime_error naming the offending line.
AttentionTrace read_trace(std::istream& is);
AttentionTrace read_trace_file(const std::string& path);

// Re-runs cache selection under `spec` using the recorded logits instead of
// a live model.  Rows are restricted to the slots the simulated cache still
// holds; noise streams are rebuilt from the header seed, so replaying the
// recording policy reproduces its live timeline exactly.  Throws
// std::runtime_error if the trace lacks slots the simulated cache needs
// (e.g. replaying a wider policy over a reduced trace).
KeptTimeline replay(const AttentionTrace& trace, const PolicySpec& spec);

// timeline.csv: one row per (t, layer, head), kept positions joined by ';'.
std::string timeline_to_csv(const KeptTimeline& tl);

}  // namespace kvlab
