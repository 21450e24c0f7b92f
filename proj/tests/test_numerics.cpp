#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <vector>

#include "kvlab/numerics.hpp"
#include "kvlab/rng.hpp"

using namespace kvlab;

namespace {

// High-precision reference values (50-digit arithmetic, rounded to double).
constexpr double kSoftmax1234[4] = {0.03205860328008499, 0.08714431874203257,
                                    0.23688281808991013, 0.6439142598879724};
constexpr double kReducedTop2[2] = {0.2689414213699951, 0.7310585786300049};
constexpr double kTempered1234Tau2[4] = {0.1015363240915518, 0.16740509727844333,
                                         0.27600434470659363, 0.45505423392341127};
constexpr double kEntropy1234 = 0.9475369639754255;
constexpr double kEntropyTempered2 = 1.2450504274673972;
constexpr double kLn4 = 1.3862943611198906;

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd x(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double d : v) x[i++] = d;
  return x;
}

}  // namespace

TEST_CASE("softmax matches the high-precision oracle") {
  const Eigen::VectorXd p = softmax(vec({1, 2, 3, 4}));
  REQUIRE(p.size() == 4);
  for (int i = 0; i < 4; ++i) CHECK(p[i] == doctest::Approx(kSoftmax1234[i]).epsilon(1e-14));
  CHECK(p.sum() == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("softmax properties under fuzzing") {
  RngStream rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng.next_u64() % 32);
    Eigen::VectorXd x(n);
    for (int i = 0; i < n; ++i) x[i] = (rng.uniform01() - 0.5) * 60.0;

    const Eigen::VectorXd p = softmax(x);
    CHECK(p.minCoeff() > 0.0);
    CHECK(p.sum() == doctest::Approx(1.0).epsilon(1e-12));

    // Shift invariance: adding a constant to every logit changes nothing.
    const Eigen::VectorXd q = softmax(Eigen::VectorXd(x.array() + 7.25));
    CHECK((p - q).cwiseAbs().maxCoeff() < 1e-12);

    // Order preservation.
    Eigen::Index xa, pa;
    x.maxCoeff(&xa);
    p.maxCoeff(&pa);
    CHECK(x[pa] == x[xa]);
  }
}

TEST_CASE("softmax rejects empty and non-finite input") {
  CHECK_THROWS_AS(softmax(Eigen::VectorXd()), std::invalid_argument);
  Eigen::VectorXd bad = vec({1, 2});
  bad[1] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(softmax(bad), std::invalid_argument);
  bad[1] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(softmax(bad), std::invalid_argument);
}

TEST_CASE("tempered softmax: tau 1 is bit-identical, tau 2 matches the oracle") {
  const Eigen::VectorXd x = vec({1, 2, 3, 4});
  const Eigen::VectorXd p1 = tempered_softmax(x, 1.0);
  const Eigen::VectorXd p = softmax(x);
  for (int i = 0; i < 4; ++i) CHECK(p1[i] == p[i]);

  const Eigen::VectorXd p2 = tempered_softmax(x, 2.0);
  for (int i = 0; i < 4; ++i)
    CHECK(p2[i] == doctest::Approx(kTempered1234Tau2[i]).epsilon(1e-14));

  // Large tau flattens toward uniform.
  const Eigen::VectorXd pu = tempered_softmax(x, 1e9);
  for (int i = 0; i < 4; ++i) CHECK(pu[i] == doctest::Approx(0.25).epsilon(1e-6));

  CHECK_THROWS_AS(tempered_softmax(x, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(tempered_softmax(x, -1.0), std::invalid_argument);
  CHECK_THROWS_AS(tempered_softmax(x, std::numeric_limits<double>::quiet_NaN()),
                  std::invalid_argument);
}

TEST_CASE("reduced softmax renormalizes over the kept set") {
  const Eigen::VectorXd x = vec({1, 2, 3, 4});
  const std::vector<Eigen::Index> top2{2, 3};
  const Eigen::VectorXd r = reduced_softmax(x, top2);
  REQUIRE(r.size() == 2);
  CHECK(r[0] == doctest::Approx(kReducedTop2[0]).epsilon(1e-14));
  CHECK(r[1] == doctest::Approx(kReducedTop2[1]).epsilon(1e-14));

  // Keeping everything reproduces the softmax bit for bit.
  const std::vector<Eigen::Index> all{0, 1, 2, 3};
  const Eigen::VectorXd full = reduced_softmax(x, all);
  const Eigen::VectorXd p = softmax(x);
  for (int i = 0; i < 4; ++i) CHECK(full[i] == p[i]);

  // Every kept probability inflates.
  for (int j = 0; j < 2; ++j) CHECK(r[j] >= p[top2[static_cast<std::size_t>(j)]]);

  CHECK_THROWS_AS(reduced_softmax(x, std::vector<Eigen::Index>{}), std::invalid_argument);
  CHECK_THROWS_AS(reduced_softmax(x, std::vector<Eigen::Index>{0, 0}), std::invalid_argument);
  CHECK_THROWS_AS(reduced_softmax(x, std::vector<Eigen::Index>{4}), std::invalid_argument);
  CHECK_THROWS_AS(reduced_softmax(x, std::vector<Eigen::Index>{-1}), std::invalid_argument);
}

TEST_CASE("damp scales mass uniformly and validates alpha") {
  const Eigen::VectorXd p = softmax(vec({1, 2, 3, 4}));
  const Eigen::VectorXd d = damp(p, 0.3);
  CHECK(d[0] == doctest::Approx(0.009617580984025497).epsilon(1e-14));
  CHECK(d.sum() == doctest::Approx(0.3).epsilon(1e-12));

  const Eigen::VectorXd id = damp(p, 1.0);
  for (int i = 0; i < 4; ++i) CHECK(id[i] == p[i]);

  // Order unchanged.
  Eigen::Index a, b;
  p.maxCoeff(&a);
  d.maxCoeff(&b);
  CHECK(a == b);

  CHECK_THROWS_AS(damp(p, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(damp(p, 1.5), std::invalid_argument);
  CHECK_THROWS_AS(damp(p, std::numeric_limits<double>::quiet_NaN()), std::invalid_argument);
}

TEST_CASE("entropy oracle values and conventions") {
  CHECK(entropy(softmax(vec({1, 2, 3, 4}))) == doctest::Approx(kEntropy1234).epsilon(1e-14));
  CHECK(entropy(tempered_softmax(vec({1, 2, 3, 4}), 2.0)) ==
        doctest::Approx(kEntropyTempered2).epsilon(1e-14));
  CHECK(entropy(vec({0.25, 0.25, 0.25, 0.25})) == doctest::Approx(kLn4).epsilon(1e-14));
  CHECK(entropy(vec({1.0})) == 0.0);
  CHECK(entropy(vec({1.0, 0.0})) == 0.0);  // 0 log 0 = 0
  // Temperature smooths: higher tau, higher entropy.
  CHECK(kEntropyTempered2 > kEntropy1234);
}

TEST_CASE("gumbel pdf: value at zero and unit mass") {
  CHECK(gumbel_pdf(0.0) == doctest::Approx(0.36787944117144233).epsilon(1e-15));
  CHECK(gumbel_pdf(-3.0) >= 0.0);
  CHECK(gumbel_pdf(10.0) >= 0.0);

  // Trapezoid over [-10, 20]; the tail mass outside is ~2e-9.
  const int steps = 300000;
  const double a = -10.0, b = 20.0, h = (b - a) / steps;
  double integral = 0.5 * (gumbel_pdf(a) + gumbel_pdf(b));
  for (int i = 1; i < steps; ++i) integral += gumbel_pdf(a + i * h);
  integral *= h;
  CHECK(std::abs(integral - 1.0) < 1e-6);
}

TEST_CASE("gumbel moment constants") {
  CHECK(kGumbelMean == 0.5772156649015329);
  CHECK(kGumbelStd == 1.2825498301618641);
}

TEST_CASE("noise specs validate their parameters") {
  CHECK_THROWS_AS(NoiseSpec::constant(std::numeric_limits<double>::infinity()),
                  std::invalid_argument);
  CHECK_THROWS_AS(NoiseSpec::gaussian(0.0, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(NoiseSpec::gaussian(std::numeric_limits<double>::quiet_NaN(), 1.0),
                  std::invalid_argument);
  CHECK(NoiseSpec::none().kind == NoiseKind::None);
  CHECK(NoiseSpec::gumbel().kind == NoiseKind::Gumbel);
}

TEST_CASE("sample_noise draw-count discipline") {
  SUBCASE("none consumes no randomness") {
    RngStream a(5), b(5);
    const Eigen::VectorXd z = sample_noise(NoiseSpec::none(), 7, a);
    CHECK(z.cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.uniform01() == b.uniform01());
  }
  SUBCASE("constant consumes no randomness") {
    RngStream a(5), b(5);
    const Eigen::VectorXd z = sample_noise(NoiseSpec::constant(0.5772), 3, a);
    for (int i = 0; i < 3; ++i) CHECK(z[i] == 0.5772);
    CHECK(a.uniform01() == b.uniform01());
  }
  SUBCASE("gumbel consumes one uniform per draw") {
    RngStream a(5), b(5);
    sample_noise(NoiseSpec::gumbel(), 4, a);
    for (int i = 0; i < 4; ++i) b.uniform01();
    CHECK(a.uniform01() == b.uniform01());
  }
  SUBCASE("gaussian consumes two uniforms per draw") {
    RngStream a(5), b(5);
    sample_noise(NoiseSpec::gaussian(0.0, 1.0), 4, a);
    for (int i = 0; i < 8; ++i) b.uniform01();
    CHECK(a.uniform01() == b.uniform01());
  }
  SUBCASE("n must be positive") {
    RngStream a(5);
    CHECK_THROWS_AS(sample_noise(NoiseSpec::gumbel(), 0, a), std::invalid_argument);
  }
}

TEST_CASE("gumbel and gaussian sample moments (quick check)") {
  RngStream rng(123);
  const int n = 100000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = rng.gumbel();
    sum += z;
    sq += z * z;
  }
  const double mean = sum / n;
  const double sd = std::sqrt(sq / n - mean * mean);
  CHECK(std::abs(mean - kGumbelMean) < 0.02);
  CHECK(std::abs(sd - kGumbelStd) < 0.02);

  sum = sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = rng.gaussian(0.5772, 1.2825);
    sum += z;
    sq += z * z;
  }
  const double gmean = sum / n;
  const double gsd = std::sqrt(sq / n - gmean * gmean);
  CHECK(std::abs(gmean - 0.5772) < 0.02);
  CHECK(std::abs(gsd - 1.2825) < 0.02);
}

TEST_CASE("rng streams are deterministic and lane-splittable") {
  RngStream a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  RngStream base(42);
  RngStream l0 = base.derive(0);
  RngStream l1 = base.derive(1);
  RngStream l0b = base.derive(0);
  CHECK(l0.next_u64() == l0b.next_u64());
  CHECK(l0.next_u64() != l1.next_u64());

  // derive does not disturb the parent.
  RngStream c(42);
  c.derive(9);
  RngStream d(42);
  CHECK(c.next_u64() == d.next_u64());

  RngStream u(7);
  for (int i = 0; i < 1000; ++i) {
    const double v = u.uniform01();
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("tau schedule: endpoints exact, interior linear, errors checked") {
  const TauSchedule s(1.0, 2.0, 10);
  CHECK(tau_at(s, 0) == 1.0);
  CHECK(tau_at(s, 10) == 2.0);
  CHECK(tau_at(s, 5) == 1.0 + 5.0 * ((2.0 - 1.0) / 10.0));

  // Same-endpoint schedule is constant.
  const TauSchedule flat(1.5, 1.5, 7);
  for (int t = 0; t <= 7; ++t) CHECK(tau_at(flat, t) == 1.5);

  // Zero horizon: only t = 0 is valid and returns tau_init.
  const TauSchedule zero(1.0, 2.0, 0);
  CHECK(tau_at(zero, 0) == 1.0);
  CHECK_THROWS_AS(tau_at(zero, 1), std::invalid_argument);

  CHECK_THROWS_AS(tau_at(s, -1), std::invalid_argument);
  CHECK_THROWS_AS(tau_at(s, 11), std::invalid_argument);
  CHECK_THROWS_AS(TauSchedule(0.0, 2.0, 5), std::invalid_argument);
  CHECK_THROWS_AS(TauSchedule(2.0, 1.0, 5), std::invalid_argument);
  CHECK_THROWS_AS(TauSchedule(1.0, 2.0, -1), std::invalid_argument);

  // Random tuples: the interior formula is reproduced exactly.
  RngStream rng(9);
  for (int i = 0; i < 200; ++i) {
    const double ti = 0.1 + 4.9 * rng.uniform01();
    const double te = ti + 3.0 * rng.uniform01();
    const int T = 1 + static_cast<int>(rng.next_u64() % 300);
    const int t = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(T + 1));
    const TauSchedule sched(ti, te, T);
    const double expect = t == 0 ? ti : (t == T ? te : ti + t * ((te - ti) / T));
    CHECK(tau_at(sched, t) == expect);
  }
}
