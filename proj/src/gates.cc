#include "hier/gates.h"

#include <algorithm>
#include <cmath>

#include "hier/errors.h"

namespace hier {

void HardConcreteConfig::validate() const {
  if (!(gamma < 0.0 && zeta > 1.0)) {
    throw ConfigError("hard concrete stretch must satisfy gamma < 0 < 1 < zeta");
  }
  if (!(beta > 0.0 && beta < 1.0)) throw ConfigError("hard concrete beta must be in (0, 1)");
}

GateSample gates_from_noise(const DenseMatrix& log_alpha, const DenseMatrix& noise,
                            const HardConcreteConfig& cfg) {
  GateSample out{DenseMatrix(log_alpha.rows(), log_alpha.cols()), noise,
                 DenseMatrix(log_alpha.rows(), log_alpha.cols())};
  const double span = cfg.zeta - cfg.gamma;
  for (std::size_t k = 0; k < log_alpha.size(); ++k) {
    const double u = noise.values()[k];
    const double eps =
        sigmoid((std::log(u) - std::log1p(-u) + log_alpha.values()[k]) / cfg.beta);
    const double stretched = eps * span + cfg.gamma;
    out.z.values()[k] = std::clamp(stretched, 0.0, 1.0);
    out.dz_dlog_alpha.values()[k] =
        (stretched > 0.0 && stretched < 1.0) ? span * eps * (1.0 - eps) / cfg.beta : 0.0;
  }
  return out;
}

GateSample sample_gates(const DenseMatrix& log_alpha, const HardConcreteConfig& cfg, Rng& rng) {
  DenseMatrix noise(log_alpha.rows(), log_alpha.cols());
  for (double& u : noise.values()) {
    // Rng::uniform is open on (0, 1); the guard documents the contract.
    do {
      u = rng.uniform();
    } while (u <= 0.0 || u >= 1.0);
  }
  return gates_from_noise(log_alpha, noise, cfg);
}

DenseMatrix deterministic_gates(const DenseMatrix& log_alpha, const HardConcreteConfig& cfg) {
  DenseMatrix z(log_alpha.rows(), log_alpha.cols());
  for (std::size_t k = 0; k < z.size(); ++k) {
    z.values()[k] = std::clamp(
        sigmoid(log_alpha.values()[k]) * (cfg.zeta - cfg.gamma) + cfg.gamma, 0.0, 1.0);
  }
  return z;
}

std::size_t count_active_gates(const DenseMatrix& zhat) {
  std::size_t n = 0;
  for (double z : zhat.values()) n += z > 0.0 ? 1 : 0;
  return n;
}

double gate_open_probability(double log_alpha, const HardConcreteConfig& cfg) {
  return sigmoid(log_alpha - cfg.beta * std::log(-cfg.gamma / cfg.zeta));
}

double expected_l0(const DenseMatrix& log_alpha, const HardConcreteConfig& cfg,
                   DenseMatrix* grad) {
  if (grad) *grad = DenseMatrix(log_alpha.rows(), log_alpha.cols());
  double total = 0.0;
  for (std::size_t k = 0; k < log_alpha.size(); ++k) {
    const double p = gate_open_probability(log_alpha.values()[k], cfg);
    total += p;
    if (grad) grad->values()[k] = p * (1.0 - p);
  }
  return total;
}

double path_logit(std::span<const double> s_u, std::span<const double> s_i,
                  const DenseMatrix& z, const DenseMatrix& w, double kappa) {
  double total = 0.0;
  for (std::size_t k = 0; k < z.rows(); ++k) {
    if (s_i[k] == 0.0) continue;
    double row = 0.0;
    for (std::size_t j = 0; j < z.cols(); ++j) row += z(k, j) * w(k, j) * s_u[j];
    total += s_i[k] * row;
  }
  return kappa * total;
}

}  // namespace hier
