#include "hier/micro.h"

#include <string>

#include "hier/rng.h"

namespace hier {

namespace {

constexpr std::size_t kUsers = 5;
constexpr std::size_t kItems = 8;
constexpr std::size_t kEntities = 12;
constexpr std::size_t kFeatureDim = 8;

KnowledgeGraph micro_graph(Rng& rng) {
  KnowledgeGraph g;
  for (std::size_t e = 0; e < kEntities; ++e) g.entities.intern("e" + std::to_string(e));
  g.relations.intern("rel");
  g.domains.intern("src");
  g.features = DenseMatrix(kEntities, kFeatureDim);
  for (double& x : g.features.values()) x = 0.5 * rng.normal();
  g.has_feature.assign(kEntities, true);

  // A ring plus a few chords; entity 11 stays isolated.
  for (Index e = 0; e < 10; ++e) g.triples.push_back({e, 0, (e + 1) % 10});
  g.triples.push_back({0, 0, 5});
  g.triples.push_back({2, 0, 8});
  g.triples.push_back({3, 0, 10});

  const std::vector<std::vector<Index>> item_entities = {
      {0}, {1, 2}, {3}, {4, 5, 6}, {7}, {8, 9}, {10, 11}, {2, 6}};
  for (std::size_t i = 0; i < kItems; ++i) g.items.intern("i" + std::to_string(i));
  g.item_entities = item_entities;

  for (std::size_t u = 0; u < kUsers; ++u) g.users.intern("u" + std::to_string(u));
  // user 4 has only a negative record, so its neighbourhood is empty.
  const std::vector<Interaction> log = {
      {0, 0, 0, 1, 1}, {0, 0, 3, 1, 2}, {0, 0, 5, 0, 3}, {0, 1, 1, 1, 4},
      {0, 1, 7, 1, 5}, {0, 1, 2, 0, 6}, {0, 2, 4, 1, 7}, {0, 2, 6, 1, 8},
      {0, 3, 5, 1, 9}, {0, 3, 0, 0, 10}, {0, 4, 2, 0, 11}};
  g.interactions = log;
  g.build_indices();
  return g;
}

}  // namespace

MicroInstance micro_instance(const MicroOptions& opts) {
  Rng rng(opts.seed, "micro");
  MicroInstance mi;
  mi.graph = micro_graph(rng);

  TrainConfig& c = mi.cfg;
  c.dim = opts.dim;
  c.layers = 2;
  c.n_exemplars = 4;
  c.n_intents = 3;
  c.neighbor_cap = 0;
  c.learnable_alpha = true;
  c.id_free_users = opts.id_free_users;
  c.tau = 0.5;
  c.lambda1 = 1.0;
  c.lambda2 = 1.0;
  c.lambda3 = 1.0;
  c.nonneg_path_weight = false;
  c.seed = opts.seed;

  mi.params = init_model_params(mi.graph, c);
  Rng perturb = rng.derive({1});
  for (auto& s : mi.params.slices()) {
    if (s.name == kGateLogAlpha) {
      for (double& x : s.value.values()) x = perturb.uniform() - 0.5;
    } else if (s.name == kLayerAlpha) {
      for (double& x : s.value.values()) x = 0.2 + 0.3 * perturb.uniform();
    } else if (s.name == kPathScale) {
      s.value(0, 0) = 1.3;
    } else {
      for (double& x : s.value.values()) x += 0.5 * perturb.normal();
    }
  }

  for (const auto& r : mi.graph.interactions) mi.batch.push_back({r.user, r.item, r.label});
  // sampled-negative style rows
  mi.batch.push_back({0, 6, 0});
  mi.batch.push_back({2, 1, 0});

  mi.gate_noise = DenseMatrix(c.n_exemplars, c.n_intents);
  for (double& u : mi.gate_noise.values()) u = 0.3 + 0.4 * perturb.uniform();
  return mi;
}

}  // namespace hier
