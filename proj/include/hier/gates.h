#pragma once

#include <span>

#include "hier/numerics.h"
#include "hier/rng.h"

namespace hier {

inline constexpr const char* kGateLogAlpha = "gate_logalpha";
inline constexpr const char* kPathWeight = "path_weight";
inline constexpr const char* kPathScale = "path_scale";

// Hard-concrete distribution constants: temperature beta and the stretch
// interval (gamma, zeta). Requires gamma < 0 < 1 < zeta and 0 < beta < 1.
struct HardConcreteConfig {
  double beta = 2.0 / 3.0;
  double gamma = -0.1;
  double zeta = 1.1;

  void validate() const;
};

// Gates are laid out n x m: rows are item exemplars, columns user intents.
struct GateSample {
  DenseMatrix z;
  DenseMatrix noise;           // the u ~ U(0,1) draws, kept for replay
  DenseMatrix dz_dlog_alpha;   // zero where the hard sigmoid clamps
};

// eps = sigmoid((log u - log(1-u) + log_alpha) / beta)
// z   = clamp(eps * (zeta - gamma) + gamma, 0, 1)
GateSample gates_from_noise(const DenseMatrix& log_alpha, const DenseMatrix& noise,
                            const HardConcreteConfig& cfg);
GateSample sample_gates(const DenseMatrix& log_alpha, const HardConcreteConfig& cfg, Rng& rng);

// Noise-free estimator clamp(sigmoid(log_alpha) * (zeta - gamma) + gamma, 0, 1).
DenseMatrix deterministic_gates(const DenseMatrix& log_alpha, const HardConcreteConfig& cfg);
// Gates that survive pruning: deterministic value strictly above zero.
std::size_t count_active_gates(const DenseMatrix& zhat);

// Probability that a gate is non-zero.
double gate_open_probability(double log_alpha, const HardConcreteConfig& cfg);

// sum_jk sigmoid(log_alpha_jk - beta * log(-gamma / zeta)); gradient (if
// requested) is written, not accumulated.
double expected_l0(const DenseMatrix& log_alpha, const HardConcreteConfig& cfg,
                   DenseMatrix* grad = nullptr);

// kappa * s_i^T (Z .* W) s_u
double path_logit(std::span<const double> s_u, std::span<const double> s_i,
                  const DenseMatrix& z, const DenseMatrix& w, double kappa);

}  // namespace hier
