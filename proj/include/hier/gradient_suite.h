#pragma once

#include <string>
#include <vector>

#include "hier/grad_check.h"
#include "hier/micro.h"
#include "hier/transfer.h"

namespace hier {

struct TermCheck {
  std::string term;
  std::vector<SliceGradError> errors;
  double max_rel_error = 0.0;
};

// Finite-difference checks of L_ET, L_ECL, L_IB (frozen gate noise),
// expected-L0 and the full L_PT on a micro instance. Parameters are
// restored afterwards.
std::vector<TermCheck> pretrain_gradient_checks(MicroInstance& mi, double step = 1e-4);

// A small target domain bridged to the micro graph (two seen users, one
// unseen) with categorical profiles.
TargetDomainData micro_target();

// Finite-difference check of the fine-tuning head (and, with
// `with_intents`, the unfrozen intent bank) on micro_target. The head's
// zero final layer is randomised first so every slice gets a gradient.
TermCheck finetune_gradient_check(const MicroInstance& mi, bool with_intents = true,
                                  double step = 1e-4);

}  // namespace hier
