#pragma once

#include <functional>
#include <string>
#include <vector>

#include "hier/param_store.h"

namespace hier {

// Evaluates the loss at the store's current values. When `with_grad` is
// set the function must zero and then fill the store's gradient buffers.
using LossFunction = std::function<double(ParamStore&, bool with_grad)>;

struct SliceGradError {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Central finite differences over every element of every slice (or of
// `only`, when non-empty). Relative error is
//   |analytic - numeric| / max(1, |analytic|, |numeric|).
// Throws NumericError if two evaluations at the same point differ, i.e. the
// loss is not deterministic under frozen randomness.
std::vector<SliceGradError> grad_check(ParamStore& params, const LossFunction& loss,
                                       double step = 1e-4,
                                       const std::vector<std::string>& only = {});

double max_error(const std::vector<SliceGradError>& errors);

}  // namespace hier
