// Softmax family, score-noise distributions, and the temperature schedule.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "kvlab/rng.hpp"

namespace kvlab {

template <typename Scalar>
using VecX = Eigen::Vector<Scalar, Eigen::Dynamic>;

// Moments of the standard Gumbel distribution: mean is the Euler-Mascheroni
// constant, standard deviation is pi / sqrt(6).
inline constexpr double kGumbelMean = 0.5772156649015329;
inline constexpr double kGumbelStd = 1.2825498301618641;

// Numerically stable softmax (max-shifted).  Throws on empty or non-finite
// input; the output sums to 1.  Exponentiation is element-wise std::exp, not
// Eigen's clamped packet exp, so an entry far enough below the max underflows
// to exactly zero instead of a clamped denormal.
template <typename Derived>
VecX<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  if (x.size() == 0) throw std::invalid_argument("softmax: empty input");
  VecX<Scalar> v = x;
  if (!v.allFinite()) throw std::invalid_argument("softmax: non-finite input");
  const Scalar m = v.maxCoeff();
  VecX<Scalar> e = (v.array() - m).unaryExpr([](Scalar t) { return std::exp(t); }).matrix();
  return e / e.sum();
}

// softmax(x / tau).  tau = 1 reproduces softmax(x) bit for bit because the
// division by 1.0 is exact.
template <typename Derived>
VecX<typename Derived::Scalar> tempered_softmax(const Eigen::MatrixBase<Derived>& x,
                                                double tau) {
  using Scalar = typename Derived::Scalar;
  if (!(tau > 0.0) || !std::isfinite(tau))
    throw std::invalid_argument("tempered_softmax: tau must be finite and > 0");
  VecX<Scalar> scaled = x.derived().template cast<Scalar>() / static_cast<Scalar>(tau);
  return softmax(scaled);
}

// Softmax restricted to a subset of indices: exp(x_i) / sum over kept only.
// Output is aligned with `kept` as given.  Every retained probability is
// >= the corresponding full-softmax probability (the denominator shrinks).
template <typename Derived>
VecX<typename Derived::Scalar> reduced_softmax(const Eigen::MatrixBase<Derived>& x,
                                               std::span<const Eigen::Index> kept) {
  using Scalar = typename Derived::Scalar;
  if (x.size() == 0) throw std::invalid_argument("reduced_softmax: empty input");
  if (kept.empty()) throw std::invalid_argument("reduced_softmax: empty kept set");
  std::vector<bool> seen(static_cast<std::size_t>(x.size()), false);
  for (Eigen::Index i : kept) {
    if (i < 0 || i >= x.size())
      throw std::invalid_argument("reduced_softmax: kept index out of range");
    if (seen[static_cast<std::size_t>(i)])
      throw std::invalid_argument("reduced_softmax: duplicate kept index");
    seen[static_cast<std::size_t>(i)] = true;
  }
  VecX<Scalar> v = x;
  if (!v.allFinite()) throw std::invalid_argument("reduced_softmax: non-finite input");
  VecX<Scalar> sub(static_cast<Eigen::Index>(kept.size()));
  for (Eigen::Index j = 0; j < sub.size(); ++j) sub[j] = v[kept[static_cast<std::size_t>(j)]];
  return softmax(sub);
}

// Uniform damping of a probability vector by alpha in (0, 1].  The result is
// no longer normalised; relative order (and hence the argmax) is unchanged.
template <typename Derived>
VecX<typename Derived::Scalar> damp(const Eigen::MatrixBase<Derived>& p, double alpha) {
  using Scalar = typename Derived::Scalar;
  if (!(alpha > 0.0) || alpha > 1.0 || !std::isfinite(alpha))
    throw std::invalid_argument("damp: alpha must be in (0, 1]");
  return p.derived() * static_cast<Scalar>(alpha);
}

// Shannon entropy in nats with the 0 * log 0 = 0 convention.  Assumes p is a
// probability vector; tiny negative rounding noise is treated as zero.
template <typename Derived>
double entropy(const Eigen::MatrixBase<Derived>& p) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double pi = static_cast<double>(p.derived()(i));
    if (pi > 0.0) h -= pi * std::log(pi);
  }
  return h < 0.0 ? 0.0 : h;
}

// Density of the standard Gumbel: exp(-z - exp(-z)).
inline double gumbel_pdf(double z) { return std::exp(-z - std::exp(-z)); }

enum class NoiseKind { None, Constant, Gaussian, Gumbel };

// Per-token additive noise applied to attention logits before the score
// softmax.  The constant and gaussian variants exist to isolate which
// property of Gumbel noise matters: its mean shift or its heavy right tail.
struct NoiseSpec {
  NoiseKind kind = NoiseKind::None;
  double c = 0.0;      // Constant: shift added to every logit
  double mu = 0.0;     // Gaussian: mean
  double sigma = 1.0;  // Gaussian: standard deviation

  static NoiseSpec none() { return {}; }

  static NoiseSpec constant(double c) {
    if (!std::isfinite(c)) throw std::invalid_argument("NoiseSpec: constant must be finite");
    NoiseSpec s;
    s.kind = NoiseKind::Constant;
    s.c = c;
    return s;
  }

  static NoiseSpec gaussian(double mu, double sigma) {
    if (!std::isfinite(mu) || !(sigma > 0.0) || !std::isfinite(sigma))
      throw std::invalid_argument("NoiseSpec: gaussian requires finite mu and sigma > 0");
    NoiseSpec s;
    s.kind = NoiseKind::Gaussian;
    s.mu = mu;
    s.sigma = sigma;
    return s;
  }

  static NoiseSpec gumbel() {
    NoiseSpec s;
    s.kind = NoiseKind::Gumbel;
    return s;
  }

  bool operator==(const NoiseSpec&) const = default;
};

// Draws n noise values.  None consumes no randomness; Gaussian consumes two
// uniforms per value, Gumbel one.  Draw counts matter: trace replay must
// advance the stream exactly as the live run did.
inline Eigen::VectorXd sample_noise(const NoiseSpec& spec, Eigen::Index n, RngStream& rng) {
  if (n <= 0) throw std::invalid_argument("sample_noise: n must be positive");
  Eigen::VectorXd z(n);
  switch (spec.kind) {
    case NoiseKind::None:
      z.setZero();
      break;
    case NoiseKind::Constant:
      z.setConstant(spec.c);
      break;
    case NoiseKind::Gaussian:
      for (Eigen::Index i = 0; i < n; ++i) z[i] = rng.gaussian(spec.mu, spec.sigma);
      break;
    case NoiseKind::Gumbel:
      for (Eigen::Index i = 0; i < n; ++i) z[i] = rng.gumbel();
      break;
  }
  return z;
}

// Linear temperature ramp over a fixed decode horizon: tau(0) = tau_init at
// the prompt, tau(T) = tau_end at the last generated token.
struct TauSchedule {
  double tau_init = 1.0;
  double tau_end = 2.0;
  int horizon = 0;  // T, number of generated tokens

  TauSchedule() = default;
  TauSchedule(double init, double end, int T) : tau_init(init), tau_end(end), horizon(T) {
    if (!(init > 0.0) || !std::isfinite(init))
      throw std::invalid_argument("TauSchedule: tau_init must be finite and > 0");
    if (end < init || !std::isfinite(end))
      throw std::invalid_argument("TauSchedule: tau_end must be finite and >= tau_init");
    if (T < 0) throw std::invalid_argument("TauSchedule: horizon must be >= 0");
  }

  double delta() const { return horizon > 0 ? (tau_end - tau_init) / horizon : 0.0; }

  bool operator==(const TauSchedule&) const = default;
};

// tau at decode step t (t = 0 is the prompt pass).  Endpoints are returned
// exactly, not through the linear formula, so tau(T) == tau_end holds in
// floating point for every horizon.
inline double tau_at(const TauSchedule& s, int t) {
  if (t < 0 || t > s.horizon) throw std::invalid_argument("tau_at: t outside [0, horizon]");
  if (t == 0) return s.tau_init;
  if (t == s.horizon) return s.tau_end;
  return s.tau_init + static_cast<double>(t) * s.delta();
}

}  // namespace kvlab
