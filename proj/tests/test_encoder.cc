#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "hier/encoder.h"
#include "hier/errors.h"
#include "hier/rng.h"

using namespace hier;

namespace {

// Entities e0..e{n-1} with the given feature rows, items as entity lists,
// undirected edges and positive (user, item) pairs.
KnowledgeGraph make_graph(const std::vector<Vector>& features,
                          const std::vector<std::vector<Index>>& items,
                          const std::vector<std::pair<Index, Index>>& edges,
                          const std::vector<std::pair<Index, Index>>& positives,
                          std::size_t users) {
  KnowledgeGraph g;
  const std::size_t d0 = features.empty() ? 0 : features[0].size();
  g.features = DenseMatrix(features.size(), d0);
  for (std::size_t e = 0; e < features.size(); ++e) {
    g.entities.intern("e" + std::to_string(e));
    std::copy(features[e].begin(), features[e].end(), g.features.row(e).begin());
  }
  g.has_feature.assign(features.size(), true);
  if (!edges.empty()) g.relations.intern("r");
  for (auto [a, b] : edges) g.triples.push_back({a, 0, b});
  for (std::size_t i = 0; i < items.size(); ++i) g.items.intern("i" + std::to_string(i));
  g.item_entities = items;
  for (std::size_t u = 0; u < users; ++u) g.users.intern("u" + std::to_string(u));
  g.domains.intern("d");
  for (auto [u, i] : positives) g.interactions.push_back({0, u, i, 1, 0});
  g.build_indices();
  return g;
}

ParamStore params_for(const KnowledgeGraph& g, const EncoderConfig& cfg) {
  ParamStore store;
  init_encoder_params(store, g, cfg, 1);
  return store;
}

void check_close(std::span<const double> a, std::span<const double> b, double tol = 1e-12) {
  REQUIRE(a.size() == b.size());
  for (std::size_t k = 0; k < a.size(); ++k) CHECK(std::abs(a[k] - b[k]) <= tol);
}

}  // namespace

TEST_CASE("entity init copies features when dim equals d0") {
  const KnowledgeGraph g = make_graph({{1, 2}, {3, 4}}, {{0}}, {}, {}, 1);
  EncoderConfig cfg;
  cfg.dim = 2;
  ParamStore store;
  const auto warnings = init_encoder_params(store, g, cfg, 3);
  CHECK(warnings.empty());
  CHECK(store.value(kEntityEmb) == g.features);
  CHECK_FALSE(store.contains(kFeatProj));
  CHECK(store.value(kLayerAlpha).cols() == 3);
  for (double a : store.value(kLayerAlpha).values()) CHECK(a == doctest::Approx(1.0 / 3));
}

TEST_CASE("entity init registers a projection when dim differs from d0") {
  std::vector<Vector> feats(4, Vector(32, 0.5));
  const KnowledgeGraph g = make_graph(feats, {{0, 1}}, {}, {}, 2);
  EncoderConfig cfg;
  cfg.dim = 16;
  const ParamStore store = params_for(g, cfg);
  REQUIRE(store.contains(kFeatProj));
  CHECK(store.value(kFeatProj).rows() == 32);
  CHECK(store.value(kFeatProj).cols() == 16);
  CHECK(store.value(kEntityEmb).rows() == 4);
  CHECK(store.value(kEntityEmb).cols() == 16);
  CHECK(store.value(kUserEmb).rows() == 2);

  // The layer-0 entity vector is features * proj.
  EncoderPass pass(g, cfg, store, {});
  Vector expect(16, 0.0);
  for (std::size_t a = 0; a < 32; ++a) axpy(0.5, store.value(kFeatProj).row(a), expect);
  check_close(pass.entity_layer(0).row(0), expect);
}

TEST_CASE("missing feature rows initialise to zero with a warning") {
  KnowledgeGraph g = make_graph({{1, 2}, {0, 0}}, {{0, 1}}, {}, {}, 1);
  g.has_feature[1] = false;
  EncoderConfig cfg;
  cfg.dim = 2;
  ParamStore store;
  const auto warnings = init_encoder_params(store, g, cfg, 1);
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("e1") != std::string::npos);
  CHECK(store.value(kEntityEmb)(1, 0) == 0.0);
  CHECK(store.value(kEntityEmb)(1, 1) == 0.0);
}

TEST_CASE("user embeddings start small") {
  const KnowledgeGraph g = make_graph({{1, 0}}, {{0}}, {}, {}, 200);
  EncoderConfig cfg;
  cfg.dim = 2;
  const ParamStore store = params_for(g, cfg);
  double ss = 0.0;
  for (double v : store.value(kUserEmb).values()) ss += v * v;
  CHECK(std::sqrt(ss / 400.0) == doctest::Approx(0.01).epsilon(0.15));
}

TEST_CASE("cold users keep their layer-0 vector") {
  const KnowledgeGraph g = make_graph({{1, 0}, {0, 1}}, {{0}}, {}, {}, 1);
  EncoderConfig cfg;
  cfg.dim = 2;
  ParamStore store = params_for(g, cfg);
  store.value(kUserEmb)(0, 0) = 0.3;
  store.value(kUserEmb)(0, 1) = -0.2;
  EncoderPass pass(g, cfg, store, {});
  const NodeRepr r = pass.propagate_user(0);
  REQUIRE(r.layers.size() == 3);
  for (const Vector& h : r.layers) check_close(h, Vector{0.3, -0.2});
  check_close(r.combined, Vector{0.3, -0.2});
}

TEST_CASE("one user neighbour averages with self") {
  const KnowledgeGraph g = make_graph({{2, 4}}, {{0}}, {}, {{0, 0}}, 1);
  EncoderConfig cfg;
  cfg.dim = 2;
  ParamStore store = params_for(g, cfg);
  store.value(kUserEmb)(0, 0) = 1.0;
  store.value(kUserEmb)(0, 1) = 0.0;
  EncoderPass pass(g, cfg, store, {});
  const NodeRepr r = pass.propagate_user(0);
  check_close(r.layers[1], Vector{0.5 * (1 + 2), 0.5 * (0 + 4)});
}

TEST_CASE("two-hop user paths reach second-order entities") {
  // u -> e0 -> e1: e1 only enters through the entity-entity edge.
  const KnowledgeGraph g = make_graph({{1, 0}, {0, 1}}, {{0}, {1}}, {{0, 1}}, {{0, 0}}, 1);
  EncoderConfig cfg;
  cfg.dim = 2;
  ParamStore store = params_for(g, cfg);
  const Vector before = EncoderPass(g, cfg, store, {}).propagate_user(0).layers[2];
  store.value(kEntityEmb)(1, 0) = 0.0;
  store.value(kEntityEmb)(1, 1) = 0.0;
  const NodeRepr after = EncoderPass(g, cfg, store, {}).propagate_user(0);
  CHECK(after.layers[2] != before);
  // Layer 1 only sees layer-0 e0, which did not change.
  check_close(after.layers[1], EncoderPass(g, cfg, params_for(g, cfg), {})
                                   .propagate_user(0)
                                   .layers[1]);
}

TEST_CASE("item propagation examples") {
  const KnowledgeGraph g =
      make_graph({{1, 0}, {0, 1}, {3, 3}, {5, 7}}, {{0}, {0, 1}, {2}}, {{2, 3}}, {}, 1);
  EncoderConfig cfg;
  cfg.dim = 2;
  const ParamStore store = params_for(g, cfg);
  EncoderPass pass(g, cfg, store, {});

  // Single entity, no edges: every layer equals E[e0].
  const NodeRepr a = pass.propagate_item(0);
  for (const Vector& h : a.layers) check_close(h, Vector{1, 0});
  check_close(a.combined, Vector{1, 0});

  check_close(pass.propagate_item(1).layers[0], Vector{0.5, 0.5});
  check_close(pass.propagate_item(2).layers[1], Vector{0.5 * (3 + 5), 0.5 * (3 + 7)});
}

TEST_CASE("an item with no entities is an error") {
  const KnowledgeGraph g = make_graph({{1, 0}}, {{}}, {}, {}, 1);
  EncoderConfig cfg;
  cfg.dim = 2;
  const ParamStore store = params_for(g, cfg);
  EncoderPass pass(g, cfg, store, {});
  CHECK_THROWS_AS(pass.propagate_item(0), DataError);
}

TEST_CASE("alpha = (1, 0, 0) turns propagation into the identity") {
  Rng rng(4, "alpha");
  std::vector<Vector> feats(6, Vector(3));
  for (auto& f : feats)
    for (double& v : f) v = rng.normal();
  const KnowledgeGraph g = make_graph(feats, {{0, 1}, {2, 3, 4}}, {{0, 2}, {1, 3}, {4, 5}},
                                      {{0, 0}, {0, 1}, {1, 1}}, 2);
  EncoderConfig cfg;
  cfg.dim = 3;
  ParamStore store = params_for(g, cfg);
  store.value(kLayerAlpha).fill(0.0);
  store.value(kLayerAlpha)(0, 0) = 1.0;
  EncoderPass pass(g, cfg, store, {});
  for (Index u = 0; u < 2; ++u) check_close(pass.user(u), store.value(kUserEmb).row(u));
  for (Index i = 0; i < 2; ++i) {
    const NodeRepr r = pass.propagate_item(i);
    check_close(r.combined, r.layers[0]);
  }
}

TEST_CASE("neighbour order does not change propagation") {
  Rng rng(8, "perm");
  std::vector<Vector> feats(7, Vector(4));
  for (auto& f : feats)
    for (double& v : f) v = rng.normal();
  const std::vector<std::pair<Index, Index>> edges = {{0, 1}, {0, 2}, {0, 3}, {1, 4},
                                                      {2, 5}, {3, 6}, {4, 6}};
  std::vector<std::pair<Index, Index>> rev(edges.rbegin(), edges.rend());
  for (auto& [a, b] : rev) std::swap(a, b);
  const std::vector<std::pair<Index, Index>> pos = {{0, 0}, {0, 1}, {0, 2}};
  const std::vector<std::pair<Index, Index>> pos_rev = {{0, 2}, {0, 1}, {0, 0}};
  const KnowledgeGraph g1 = make_graph(feats, {{0, 1}, {2, 3}, {4, 5, 6}}, edges, pos, 1);
  const KnowledgeGraph g2 = make_graph(feats, {{1, 0}, {3, 2}, {6, 4, 5}}, rev, pos_rev, 1);
  EncoderConfig cfg;
  cfg.dim = 4;
  const ParamStore s1 = params_for(g1, cfg);
  const ParamStore s2 = params_for(g2, cfg);
  EncoderPass p1(g1, cfg, s1, {}), p2(g2, cfg, s2, {});
  check_close(p1.user(0), p2.user(0));
  for (Index i = 0; i < 3; ++i) check_close(p1.item(i), p2.item(i));
}

TEST_CASE("score examples and symmetry") {
  CHECK(score(Vector{0, 0}, Vector{3, -2}) == 0.5);
  CHECK(score(Vector{1, 0}, Vector{1, 0}) == doctest::Approx(0.731059).epsilon(1e-6));
  CHECK(score(Vector{1, 0}, Vector{0, 1}) == 0.5);
  Rng rng(2, "score");
  for (int t = 0; t < 100; ++t) {
    Vector a(5), b(5);
    for (double& v : a) v = rng.normal();
    for (double& v : b) v = rng.normal();
    CHECK(score(a, b) == score(b, a));
  }
}

TEST_CASE("loss_et examples") {
  CHECK(bce_with_logit(100.0, 1) <= 1e-11);
  CHECK(bce_with_logit(0.0, 1) == doctest::Approx(0.693147).epsilon(1e-6));
  double g = 0.0;
  bce_with_logit(0.0, 0, &g);
  CHECK(g == 0.5);

  DenseMatrix users(1, 2, std::vector<double>{0.3, -0.7});
  DenseMatrix items(1, 2, std::vector<double>{1.1, 0.4});
  const std::vector<Record> one = {{0, 0, 1}};
  const std::vector<Record> two = {{0, 0, 1}, {0, 0, 1}};
  const PairLoss l1 = loss_et(one, users, items);
  const PairLoss l2 = loss_et(two, users, items);
  CHECK(l2.loss == 2.0 * l1.loss);
  CHECK(l2.grad_users(0, 0) == 2.0 * l1.grad_users(0, 0));
}

TEST_CASE("loss_et decreases along its negative gradient") {
  Rng rng(5, "line");
  DenseMatrix users(3, 4), items(5, 4);
  for (double& v : users.values()) v = rng.normal();
  for (double& v : items.values()) v = rng.normal();
  std::vector<Record> batch;
  for (Index u = 0; u < 3; ++u)
    for (Index i = 0; i < 5; ++i) batch.push_back({u, i, static_cast<int>((u + i) % 2)});

  const PairLoss base = loss_et(batch, users, items);
  for (double step : {1e-2, 1e-3, 1e-4}) {
    DenseMatrix u2 = users, i2 = items;
    axpy(-step, base.grad_users.values(), u2.values());
    axpy(-step, base.grad_items.values(), i2.values());
    CHECK(loss_et(batch, u2, i2).loss < base.loss);
  }
}
