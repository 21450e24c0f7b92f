#include "kvlab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace kvlab {

namespace {

// p is appended in place to avoid reallocating per row.
Eigen::VectorXd row_probs(const TraceRecord& r) {
  Eigen::Map<const Eigen::VectorXd> x(r.logits.data(), static_cast<Eigen::Index>(r.logits.size()));
  return softmax(x);
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

CdfSeries attention_cdf(const AttentionTrace& trace, int grid) {
  if (trace.records.empty()) throw std::invalid_argument("attention_cdf: empty trace");
  if (grid < 1) throw std::invalid_argument("attention_cdf: grid must be >= 1");

  std::vector<double> acc(static_cast<std::size_t>(grid) + 1, 0.0);
  for (const TraceRecord& r : trace.records) {
    Eigen::VectorXd p = row_probs(r);
    std::sort(p.data(), p.data() + p.size(), std::greater<double>());
    const Eigen::Index m = p.size();
    std::vector<double> cum(static_cast<std::size_t>(m) + 1, 0.0);
    for (Eigen::Index i = 0; i < m; ++i) cum[static_cast<std::size_t>(i) + 1] = cum[i] + p[i];
    const double total = cum.back();  // ~1 up to rounding; normalise so the endpoint is exact
    for (double& c : cum) c /= total;

    // Sample the row's step curve at the shared fraction grid by linear
    // interpolation between (i/m, cum[i]) knots.
    for (int j = 0; j <= grid; ++j) {
      const double pos = static_cast<double>(j) * m / grid;
      const auto i = static_cast<std::size_t>(std::min(pos, static_cast<double>(m - 1)));
      const double t = pos - static_cast<double>(i);
      acc[static_cast<std::size_t>(j)] += cum[i] + t * (cum[i + 1] - cum[i]);
    }
  }

  CdfSeries out;
  out.fraction.resize(acc.size());
  out.mass.resize(acc.size());
  const double rows = static_cast<double>(trace.records.size());
  for (std::size_t j = 0; j < acc.size(); ++j) {
    out.fraction[j] = static_cast<double>(j) / grid;
    out.mass[j] = acc[j] / rows;
  }
  out.fraction.back() = 1.0;
  out.mass.back() = 1.0;  // every row's curve was normalised to end at 1
  return out;
}

std::vector<double> threshold_sparsity(const AttentionTrace& trace,
                                       std::span<const double> thresholds) {
  if (trace.records.empty()) throw std::invalid_argument("threshold_sparsity: empty trace");
  for (double t : thresholds)
    if (!(t >= 0.0) || t > 1.0)
      throw std::invalid_argument("threshold_sparsity: thresholds must lie in [0, 1]");

  std::vector<std::size_t> below(thresholds.size(), 0);
  std::size_t entries = 0;
  for (const TraceRecord& r : trace.records) {
    const Eigen::VectorXd p = row_probs(r);
    const double row_max = p.maxCoeff();
    entries += static_cast<std::size_t>(p.size());
    for (std::size_t k = 0; k < thresholds.size(); ++k) {
      const double theta = thresholds[k];
      for (Eigen::Index i = 0; i < p.size(); ++i) {
        if (theta == 0.0 ? p[i] == 0.0 : p[i] < theta * row_max) ++below[k];
      }
    }
  }
  std::vector<double> out(thresholds.size());
  for (std::size_t k = 0; k < out.size(); ++k)
    out[k] = static_cast<double>(below[k]) / static_cast<double>(entries);
  return out;
}

ShiftResult distribution_shift(const Eigen::VectorXd& x, double keep_fraction) {
  if (x.size() == 0) throw std::invalid_argument("distribution_shift: empty logits");
  if (!(keep_fraction > 0.0) || keep_fraction > 1.0)
    throw std::invalid_argument("distribution_shift: keep_fraction must lie in (0, 1]");

  ShiftResult res;
  res.full = softmax(x);
  const Eigen::Index n = x.size();
  const auto keep = std::min<Eigen::Index>(
      n, static_cast<Eigen::Index>(std::ceil(keep_fraction * static_cast<double>(n))));

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return res.full[a] > res.full[b]; });
  res.kept.assign(order.begin(), order.begin() + keep);
  std::sort(res.kept.begin(), res.kept.end());

  res.reduced = reduced_softmax(x, res.kept);
  res.inflation = 0.0;
  for (Eigen::Index j = 0; j < res.reduced.size(); ++j)
    res.inflation = std::max(res.inflation, res.reduced[j] / res.full[res.kept[static_cast<std::size_t>(j)]]);
  return res;
}

EntropyResult entropy_experiment(int n, int trials, int noise_samples, RngStream& rng,
                                 const NoiseSpec& noise) {
  if (n < 1) throw std::invalid_argument("entropy_experiment: n must be >= 1");
  if (trials < 1 || noise_samples < 1)
    throw std::invalid_argument("entropy_experiment: trials and noise_samples must be >= 1");

  EntropyResult res;
  res.h_smoothed.reserve(static_cast<std::size_t>(trials));
  res.h_raw.reserve(static_cast<std::size_t>(trials));
  int wins = 0;
  for (int trial = 0; trial < trials; ++trial) {
    Eigen::VectorXd x(n);
    for (int i = 0; i < n; ++i) x[i] = rng.gaussian(0.0, 2.0);

    const Eigen::VectorXd z = softmax(x);
    Eigen::VectorXd zbar = Eigen::VectorXd::Zero(n);
    for (int s = 0; s < noise_samples; ++s) {
      const Eigen::VectorXd zeta = sample_noise(noise, n, rng);
      zbar += softmax(Eigen::VectorXd(x + zeta));
    }
    zbar /= static_cast<double>(noise_samples);

    const double hs = entropy(zbar);
    const double hr = entropy(z);
    res.h_smoothed.push_back(hs);
    res.h_raw.push_back(hr);
    res.mean_smoothed += hs;
    res.mean_raw += hr;
    if (hs > hr) ++wins;
  }
  res.mean_smoothed /= trials;
  res.mean_raw /= trials;
  res.win_rate = static_cast<double>(wins) / trials;
  return res;
}

double TrafficModel::kv_bytes_per_token() const {
  return 2.0 * beams * layers * heads * d_head * dtype_bytes;
}

double TrafficModel::param_bytes() const { return param_count * dtype_bytes; }

double TrafficModel::crossover_tokens() const { return param_bytes() / kv_bytes_per_token(); }

TrafficModel TrafficModel::preset_7b() {
  TrafficModel m;
  m.dtype_bytes = 2;
  m.layers = 32;
  m.heads = 32;
  m.d_head = 128;
  m.param_count = 6.7e9;
  m.beams = 4;
  return m;
}

TrafficReport kv_traffic(const TrafficModel& model, long n, int T, double cache_fraction) {
  if (model.layers < 1 || model.heads < 1 || model.d_head < 1 || model.dtype_bytes < 1 ||
      model.beams < 1 || !(model.param_count >= 0.0))
    throw std::invalid_argument("kv_traffic: malformed traffic model");
  if (n < 1) throw std::invalid_argument("kv_traffic: prompt length must be >= 1");
  if (T < 0) throw std::invalid_argument("kv_traffic: generation length must be >= 0");
  if (!(cache_fraction > 0.0) || cache_fraction > 1.0)
    throw std::invalid_argument("kv_traffic: cache_fraction must lie in (0, 1]");

  TrafficReport r;
  // Steady state: eviction pins the cache at fraction * n tokens, which the
  // bound n + T can never undercut.  Kept real-valued so that fraction 0.5
  // yields exactly half the bytes of fraction 1.
  r.cache_tokens = std::min(cache_fraction * static_cast<double>(n),
                            static_cast<double>(n + T));
  r.kv_bytes_per_step = r.cache_tokens * model.kv_bytes_per_token();
  r.param_bytes_per_step = model.param_bytes();
  r.kv_total = r.kv_bytes_per_step * T;
  r.param_total = r.param_bytes_per_step * T;
  r.total = r.kv_total + r.param_total;
  r.unbounded_kv_bytes = static_cast<double>(n + T) * model.kv_bytes_per_token();
  r.crossover_tokens = model.crossover_tokens();
  return r;
}

std::string cdf_to_csv(const CdfSeries& series) {
  std::ostringstream os;
  os << "fraction,cumulative_mass\n";
  for (std::size_t i = 0; i < series.size(); ++i)
    os << fmt(series.fraction[i]) << ',' << fmt(series.mass[i]) << '\n';
  return os.str();
}

std::string sparsity_to_csv(std::span<const double> thresholds,
                            std::span<const double> sparsity) {
  if (thresholds.size() != sparsity.size())
    throw std::invalid_argument("sparsity_to_csv: length mismatch");
  std::ostringstream os;
  os << "threshold,sparsity\n";
  for (std::size_t i = 0; i < thresholds.size(); ++i)
    os << fmt(thresholds[i]) << ',' << fmt(sparsity[i]) << '\n';
  return os.str();
}

std::string entropy_to_csv(const EntropyResult& result) {
  std::ostringstream os;
  os << "trial,h_smoothed,h_raw,win\n";
  for (std::size_t i = 0; i < result.h_smoothed.size(); ++i)
    os << i << ',' << fmt(result.h_smoothed[i]) << ',' << fmt(result.h_raw[i]) << ','
       << (result.h_smoothed[i] > result.h_raw[i] ? 1 : 0) << '\n';
  return os.str();
}

std::string traffic_to_csv(std::span<const LabelledTraffic> rows) {
  std::ostringstream os;
  os << "label,cache_fraction,cache_tokens,kv_bytes_per_step,param_bytes_per_step,total_bytes\n";
  for (const LabelledTraffic& row : rows)
    os << row.label << ',' << fmt(row.cache_fraction) << ',' << fmt(row.report.cache_tokens)
       << ',' << fmt(row.report.kv_bytes_per_step) << ',' << fmt(row.report.param_bytes_per_step)
       << ',' << fmt(row.report.total) << '\n';
  return os.str();
}

nlohmann::json to_json(const TrafficReport& report) {
  return {{"cache_tokens", report.cache_tokens},
          {"kv_bytes_per_step", report.kv_bytes_per_step},
          {"param_bytes_per_step", report.param_bytes_per_step},
          {"kv_total", report.kv_total},
          {"param_total", report.param_total},
          {"total", report.total},
          {"unbounded_kv_bytes", report.unbounded_kv_bytes},
          {"crossover_tokens", report.crossover_tokens}};
}

nlohmann::json to_json(const EntropyResult& result) {
  return {{"trials", result.h_smoothed.size()},
          {"mean_h_smoothed", result.mean_smoothed},
          {"mean_h_raw", result.mean_raw},
          {"win_rate", result.win_rate}};
}

}  // namespace kvlab
