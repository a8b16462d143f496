#pragma once

#include <cstdint>
#include <vector>

#include "hier/kgraph.h"
#include "hier/param_store.h"
#include "hier/train.h"

namespace hier {

// The standard gradient-check instance: 5 users, 8 items, 12 entities,
// d = 8, n = 4 exemplars, m = 3 intents, every neighbour used.
struct MicroInstance {
  KnowledgeGraph graph;
  TrainConfig cfg;
  ParamStore params;        // randomised away from the training init
  std::vector<Example> batch;
  DenseMatrix gate_noise;   // frozen u in [0.3, 0.7], keeps gates unclamped
};

struct MicroOptions {
  std::uint64_t seed = 7;
  std::size_t dim = 8;           // != feature dim (8) switches on feat_proj
  bool id_free_users = false;
};

MicroInstance micro_instance(const MicroOptions& opts = {});

}  // namespace hier
