#include "hier/grad_check.h"

#include <algorithm>
#include <cmath>

#include "hier/errors.h"

namespace hier {

std::vector<SliceGradError> grad_check(ParamStore& params, const LossFunction& loss,
                                       double step, const std::vector<std::string>& only) {
  const double base = loss(params, true);
  if (loss(params, false) != base) {
    throw NumericError("grad_check: loss is not deterministic at a fixed point");
  }
  std::vector<DenseMatrix> analytic;
  for (const auto& s : params.slices()) analytic.push_back(s.grad);

  std::vector<SliceGradError> report;
  for (std::size_t si = 0; si < params.slices().size(); ++si) {
    const std::string name = params.slices()[si].name;
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    SliceGradError err{name};
    auto values = params.slices()[si].value.values();
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double saved = values[k];
      values[k] = saved + step;
      const double up = loss(params, false);
      values[k] = saved - step;
      const double down = loss(params, false);
      values[k] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[si].values()[k];
      const double rel =
          std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      if (rel > err.max_rel_error || k == 0) {
        err.max_rel_error = std::max(err.max_rel_error, rel);
        if (rel >= err.max_rel_error) {
          err.worst_index = k;
          err.analytic = a;
          err.numeric = numeric;
        }
      }
    }
    report.push_back(err);
  }
  // Leave the gradient buffers holding the analytic gradient.
  loss(params, true);
  return report;
}

double max_error(const std::vector<SliceGradError>& errors) {
  double m = 0.0;
  for (const auto& e : errors) m = std::max(m, e.max_rel_error);
  return m;
}

}  // namespace hier
