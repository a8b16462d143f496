#include <cmath>
#include <vector>

#include "doctest.h"
#include "hier/errors.h"
#include "hier/gates.h"
#include "hier/rng.h"
#include "oracles.h"

using namespace hier;

namespace {

const HardConcreteConfig kCfg;

double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Fraction of exact zeros and ones over `draws` samples of an r x c gate
// matrix filled with `log_alpha`.
std::pair<double, double> empirical_zero_one(double log_alpha, std::size_t draws, std::uint64_t seed) {
  const DenseMatrix la(1000, 100, log_alpha);
  Rng rng(seed, "mc_gates");
  std::size_t zeros = 0, ones = 0, total = 0;
  for (std::size_t d = 0; d < draws; ++d) {
    const GateSample s = sample_gates(la, kCfg, rng);
    for (double z : s.z.values()) {
      zeros += z == 0.0;
      ones += z == 1.0;
    }
    total += la.size();
  }
  return {static_cast<double>(zeros) / total, static_cast<double>(ones) / total};
}

}  // namespace

TEST_CASE("hard-concrete config validation") {
  CHECK_NOTHROW(kCfg.validate());
  HardConcreteConfig bad = kCfg;
  bad.gamma = 0.1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = kCfg;
  bad.zeta = 0.9;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = kCfg;
  bad.beta = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("sample examples") {
  const DenseMatrix la(1, 1, 0.0);
  const GateSample mid = gates_from_noise(la, DenseMatrix(1, 1, 0.5), kCfg);
  CHECK(std::abs(mid.z(0, 0) - 0.5) <= 1e-15);
  CHECK(mid.dz_dlog_alpha(0, 0) > 0.0);

  const GateSample low = gates_from_noise(la, DenseMatrix(1, 1, 1e-4), kCfg);
  CHECK(low.z(0, 0) == 0.0);
  CHECK(low.dz_dlog_alpha(0, 0) == 0.0);
  const GateSample high = gates_from_noise(la, DenseMatrix(1, 1, 1.0 - 1e-4), kCfg);
  CHECK(high.z(0, 0) == 1.0);
  CHECK(high.dz_dlog_alpha(0, 0) == 0.0);
}

TEST_CASE("sample_gates keeps its noise for replay and stays in [0, 1]") {
  Rng rng(1, "replay");
  DenseMatrix la(7, 5);
  for (double& v : la.values()) v = 3.0 * rng.normal();
  const GateSample s = sample_gates(la, kCfg, rng);
  const GateSample again = gates_from_noise(la, s.noise, kCfg);
  CHECK(again.z == s.z);
  for (double u : s.noise.values()) {
    CHECK(u > 0.0);
    CHECK(u < 1.0);
  }
  for (double z : s.z.values()) {
    CHECK(z >= 0.0);
    CHECK(z <= 1.0);
  }
}

TEST_CASE("gate derivative passes finite differences where unclamped") {
  Rng rng(2, "gate_fd");
  DenseMatrix la(4, 3), noise(4, 3);
  for (double& v : la.values()) v = rng.normal();
  for (double& u : noise.values()) u = 0.3 + 0.4 * rng.uniform();
  const GateSample s = gates_from_noise(la, noise, kCfg);
  const double h = 1e-5;
  for (std::size_t k = 0; k < la.size(); ++k) {
    DenseMatrix plus = la, minus = la;
    plus.values()[k] += h;
    minus.values()[k] -= h;
    const double fd = (gates_from_noise(plus, noise, kCfg).z.values()[k] -
                       gates_from_noise(minus, noise, kCfg).z.values()[k]) /
                      (2 * h);
    const double an = s.dz_dlog_alpha.values()[k];
    CHECK(std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)}) < 1e-5);
  }
}

TEST_CASE("P(Z = 0) and P(Z = 1) at log_alpha = 0") {
  const double closed = 1.0 - sigmoid_ref(-kCfg.beta * std::log(-kCfg.gamma / kCfg.zeta));
  // The quoted 0.1683 is rounded; the closed form is 0.168178.
  CHECK(std::abs(closed - 0.1683) <= 2e-4);
  CHECK(std::abs(oracle::hard_concrete_p_zero(0, kCfg.beta, kCfg.gamma, kCfg.zeta) - closed) <= 1e-12);
  CHECK(std::abs(oracle::hard_concrete_p_one(0, kCfg.beta, kCfg.gamma, kCfg.zeta) - closed) <= 1e-12);
  CHECK(std::abs(gate_open_probability(0.0, kCfg) - (1.0 - closed)) <= 1e-12);

  const auto [p0, p1] = empirical_zero_one(0.0, 10, 3);
  CHECK(std::abs(p0 - 0.1683) <= 0.003);
  CHECK(std::abs(p1 - 0.1683) <= 0.003);
}

TEST_CASE("expected_l0 examples") {
  CHECK(expected_l0(DenseMatrix(2, 3, -50.0), kCfg) < 1e-20);
  // The commonly quoted 4.99032 is off in the fourth decimal (6 * 0.831818 = 4.99091).
  CHECK(std::abs(expected_l0(DenseMatrix(2, 3, 0.0), kCfg) - 4.99032) <= 1e-3);
  CHECK(std::abs(expected_l0(DenseMatrix(2, 3, 0.0), kCfg) -
                 6.0 * sigmoid_ref(-(2.0 / 3.0) * std::log(0.1 / 1.1))) <= 1e-12);
}

TEST_CASE("expected_l0 is monotone with the right gradient") {
  Rng rng(4, "l0");
  DenseMatrix la(3, 4);
  for (double& v : la.values()) v = 2.0 * rng.normal();
  DenseMatrix grad;
  const double base = expected_l0(la, kCfg, &grad);
  for (std::size_t k = 0; k < la.size(); ++k) {
    DenseMatrix up = la, down = la;
    up.values()[k] += 1e-5;
    down.values()[k] -= 1e-5;
    const double hi = expected_l0(up, kCfg), lo = expected_l0(down, kCfg);
    CHECK(hi > base);
    CHECK(std::abs((hi - lo) / 2e-5 - grad.values()[k]) < 1e-7);
  }
}

TEST_CASE("expected_l0 matches the empirical non-zero frequency") {
  for (double la : {-4.0, -3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0, 4.0}) {
    const double expect = expected_l0(DenseMatrix(1, 1, la), kCfg);
    const auto [p0, p1] = empirical_zero_one(la, 10, 5);
    CHECK(std::abs((1.0 - p0) - expect) <= 0.005);
    CHECK(p0 > 0.0);
    CHECK(p1 > 0.0);
    CHECK(std::abs(p0 - oracle::hard_concrete_p_zero(la, kCfg.beta, kCfg.gamma, kCfg.zeta)) <= 0.003);
  }
}

TEST_CASE("deterministic gate examples and active count") {
  const DenseMatrix la(1, 3, std::vector<double>{0.0, -50.0, 50.0});
  const DenseMatrix z = deterministic_gates(la, kCfg);
  CHECK(z(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(z(0, 1) == 0.0);
  CHECK(z(0, 2) == 1.0);
  CHECK(count_active_gates(z) == 2);
  // sigmoid(log_alpha) * 1.2 - 0.1 > 0 iff log_alpha > log(1/11).
  CHECK(count_active_gates(deterministic_gates(DenseMatrix(1, 1, std::log(1.0 / 11) + 1e-6), kCfg)) == 1);
  CHECK(count_active_gates(deterministic_gates(DenseMatrix(1, 1, std::log(1.0 / 11) - 1e-6), kCfg)) == 0);
}

TEST_CASE("path_logit examples") {
  const DenseMatrix w(2, 2, std::vector<double>{1, 2, 3, 4});
  CHECK(path_logit(Vector{0.3, 0.7}, Vector{0.6, 0.4}, DenseMatrix(2, 2, 0.0), w, 1.0) == 0.0);
  // s_u one-hot at intent j = 0, s_i one-hot at exemplar k = 1.
  CHECK(path_logit(Vector{1, 0}, Vector{0, 1}, DenseMatrix(2, 2, 1.0), w, 1.0) == 3.0);
  CHECK(path_logit(Vector{0.5, 0.5}, Vector{0.5, 0.5}, DenseMatrix(2, 2, 1.0), w, 1.0) == 2.5);
}

TEST_CASE("path_logit is bilinear, linear in W, and row gating removes an exemplar") {
  Rng rng(6, "bilinear");
  DenseMatrix z(3, 2), w(3, 2), w2(3, 2);
  for (double& v : z.values()) v = rng.uniform();
  for (double& v : w.values()) v = rng.normal();
  for (double& v : w2.values()) v = rng.normal();
  const Vector su1 = {0.2, 0.8}, su2 = {0.6, 0.4};
  const Vector si1 = {0.1, 0.3, 0.6}, si2 = {0.5, 0.25, 0.25};
  const auto f = [&](const Vector& su, const Vector& si, const DenseMatrix& ww) {
    return path_logit(su, si, z, ww, 1.7);
  };
  Vector su_mix(2), si_mix(3);
  for (int k = 0; k < 2; ++k) su_mix[k] = 0.3 * su1[k] + 0.7 * su2[k];
  for (int k = 0; k < 3; ++k) si_mix[k] = 0.4 * si1[k] + 0.6 * si2[k];
  CHECK(std::abs(f(su_mix, si1, w) - (0.3 * f(su1, si1, w) + 0.7 * f(su2, si1, w))) <= 1e-12);
  CHECK(std::abs(f(su1, si_mix, w) - (0.4 * f(su1, si1, w) + 0.6 * f(su1, si2, w))) <= 1e-12);
  DenseMatrix wsum = w;
  for (std::size_t k = 0; k < wsum.size(); ++k) wsum.values()[k] += 2.0 * w2.values()[k];
  CHECK(std::abs(f(su1, si1, wsum) - (f(su1, si1, w) + 2.0 * f(su1, si1, w2))) <= 1e-12);

  DenseMatrix zr = z;
  zr(1, 0) = zr(1, 1) = 0.0;
  const Vector si_a = {0.1, 0.3, 0.6}, si_b = {0.1, 0.9, 0.6};
  CHECK(path_logit(su1, si_a, zr, w, 1.0) == path_logit(su1, si_b, zr, w, 1.0));
}
