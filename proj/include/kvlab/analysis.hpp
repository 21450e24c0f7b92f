// Analytical reproductions: attention-mass CDFs, threshold sparsity, the
// score-distribution shift under eviction, the entropy experiment, and a
// byte-level KV traffic model.
#pragma once

#include <Eigen/Dense>

#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "kvlab/numerics.hpp"
#include "kvlab/rng.hpp"
#include "kvlab/trace.hpp"

namespace kvlab {

// Cumulative attention mass as a function of the kept-token fraction.
// Both coordinates are nondecreasing in [0, 1] and the last point is (1, 1).
struct CdfSeries {
  std::vector<double> fraction;
  std::vector<double> mass;

  std::size_t size() const { return fraction.size(); }
};

// For every recorded row: softmax the logits, sort descending, accumulate.
// Rows of different lengths are aligned on the token-fraction axis by linear
// interpolation of each row's step curve, then averaged; `grid` sets the
// number of output intervals.  Uniform rows give the diagonal, one-hot rows
// reach mass 1 at fraction 1/row_len.
CdfSeries attention_cdf(const AttentionTrace& trace, int grid = 100);

// Fraction of attention entries with probability below theta * row_max, per
// threshold.  theta = 0 counts entries that are exactly zero, so the result
// is nondecreasing in theta.  Thresholds must lie in [0, 1].
std::vector<double> threshold_sparsity(const AttentionTrace& trace,
                                       std::span<const double> thresholds);

// What eviction does to the surviving tokens' softmax mass: the reduced
// distribution renormalises over a smaller denominator, inflating every kept
// probability by the same factor 1 / (kept mass under the full softmax).
struct ShiftResult {
  Eigen::VectorXd full;              // softmax over all of x
  std::vector<Eigen::Index> kept;    // surviving indices, ascending
  Eigen::VectorXd reduced;           // softmax over kept, aligned with kept
  double inflation = 1.0;            // max over kept of reduced / full
};

// kept = top-ceil(keep_fraction * n) indices by full probability, ties
// toward the lower index.  keep_fraction must lie in (0, 1].
ShiftResult distribution_shift(const Eigen::VectorXd& x, double keep_fraction);

// Monte Carlo test of the smoothing property H(E[softmax(x + zeta)]) >
// H(softmax(x)).  Each trial draws x with i.i.d. N(0, 2) entries, averages
// the noised softmax over `noise_samples` draws, and compares entropies.
struct EntropyResult {
  std::vector<double> h_smoothed;  // per trial, H of the averaged noised softmax
  std::vector<double> h_raw;       // per trial, H of softmax(x)
  double mean_smoothed = 0.0;
  double mean_raw = 0.0;
  double win_rate = 0.0;  // fraction of trials with h_smoothed > h_raw
};

EntropyResult entropy_experiment(int n, int trials, int noise_samples, RngStream& rng,
                                 const NoiseSpec& noise = NoiseSpec::gumbel());

// Byte accounting for one decode step: model parameters are read once per
// generated token; the KV cache contributes 2 (K and V) * beams * layers *
// heads * d_head * dtype_bytes per cached token.  Everything else (attention
// activations, projections) is ignored; these two terms are what dominate
// memory traffic at generation time.
struct TrafficModel {
  int dtype_bytes = 2;
  int layers = 0;
  int heads = 0;
  int d_head = 0;
  double param_count = 0.0;
  int beams = 1;  // beam search keeps one cache per beam

  double kv_bytes_per_token() const;
  double param_bytes() const;
  // Sequence length where the (unbounded) cache size overtakes the model
  // size.  Model dependent; for the 7B preset it lands in the high
  // thousands of tokens.
  double crossover_tokens() const;

  // MPT-7B-like shape: 32 layers, 32 heads, d_head 128, fp16, beam width 4.
  static TrafficModel preset_7b();
};

struct TrafficReport {
  double cache_tokens = 0.0;          // tokens read per step (analytic, real-valued)
  double kv_bytes_per_step = 0.0;
  double param_bytes_per_step = 0.0;
  double kv_total = 0.0;              // over all T steps
  double param_total = 0.0;
  double total = 0.0;
  double unbounded_kv_bytes = 0.0;    // cache size at n + T without eviction
  double crossover_tokens = 0.0;
};

// Analytical traffic for generating T tokens after a prompt of n, keeping
// cache_fraction of it.  The cache token count is the real number
// cache_fraction * n (capped by the unbounded size), so halving the fraction
// halves the KV component exactly.  cache_fraction in (0, 1]; T >= 0.
TrafficReport kv_traffic(const TrafficModel& model, long n, int T, double cache_fraction);

// CSV emitters.  Schemas (header row included):
//   cdf:      fraction,cumulative_mass
//   sparsity: threshold,sparsity
//   entropy:  trial,h_smoothed,h_raw,win
//   traffic:  label,cache_fraction,cache_tokens,kv_bytes_per_step,
//             param_bytes_per_step,total_bytes  (one row per labelled run)
std::string cdf_to_csv(const CdfSeries& series);
std::string sparsity_to_csv(std::span<const double> thresholds, std::span<const double> sparsity);
std::string entropy_to_csv(const EntropyResult& result);

struct LabelledTraffic {
  std::string label;
  double cache_fraction = 1.0;
  TrafficReport report;
};
std::string traffic_to_csv(std::span<const LabelledTraffic> rows);

nlohmann::json to_json(const TrafficReport& report);
nlohmann::json to_json(const EntropyResult& result);

}  // namespace kvlab
