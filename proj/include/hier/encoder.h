#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hier/kgraph.h"
#include "hier/numerics.h"
#include "hier/param_store.h"

namespace hier {

inline constexpr const char* kEntityEmb = "entity_emb";
inline constexpr const char* kUserEmb = "user_emb";
inline constexpr const char* kLayerAlpha = "layer_alpha";
inline constexpr const char* kFeatProj = "feat_proj";

struct EncoderConfig {
  std::size_t dim = 32;
  int layers = 2;
  bool learnable_alpha = false;
  // h_u^(0) = mean of the user's entity neighbours instead of an id embedding.
  bool id_free_users = false;
};

// Registers entity_emb, user_emb, layer_alpha (and feat_proj when
// dim != d0). Entity rows copy the features when dim == d0; otherwise the
// layer-0 entity vector is entity_emb + features * feat_proj with
// entity_emb starting at zero. Returns warnings for missing feature rows.
std::vector<std::string> init_encoder_params(ParamStore& store, const KnowledgeGraph& graph,
                                             const EncoderConfig& cfg, std::uint64_t seed);

struct NeighborPolicy {
  std::size_t cap = 0;  // 0 = use every neighbour
  std::uint64_t seed = 0;
  std::uint64_t epoch = 0;
};

struct NodeRepr {
  std::vector<Vector> layers;  // h^(0..L)
  Vector combined;             // sum_l alpha_l h^(l)
};

// Self-inclusive mean aggregator: 0.5 * (self + mean(neighbours)); returns
// self unchanged for an empty neighbour set.
Vector aggregate(std::span<const double> self, const DenseMatrix& table,
                 std::span<const Index> neighbors);

// One forward pass of the graph encoder at fixed parameters. Entity layers
// are materialised for the whole graph; users are propagated lazily.
// Gradients w.r.t. user/item combined vectors are accumulated and pushed
// into the ParamStore by backward().
class EncoderPass {
 public:
  EncoderPass(const KnowledgeGraph& graph, const EncoderConfig& cfg, const ParamStore& store,
              NeighborPolicy policy);

  NodeRepr propagate_user(Index u);
  NodeRepr propagate_item(Index i) const;

  std::span<const double> user(Index u);
  Vector item(Index i) const;
  // Combined (layer-weighted) entity representation.
  std::span<const double> entity(Index e) const { return combined_.row(e); }
  const DenseMatrix& entity_layer(int l) const { return entity_layers_[l]; }

  void add_user_grad(Index u, std::span<const double> g);
  void add_item_grad(Index i, std::span<const double> g);
  void add_entity_grad(Index e, std::span<const double> g);

  // Adds d(loss)/d(params) for every accumulated gradient into store grads.
  void backward(ParamStore& store) const;

  std::size_t dim() const { return cfg_.dim; }
  const std::vector<double>& alpha() const { return alpha_; }

 private:
  struct UserState {
    std::vector<std::vector<Index>> samples;  // per hop
    std::vector<Vector> layers;
    Vector combined;
    Vector grad;
  };
  UserState& user_state(Index u);

  const KnowledgeGraph& graph_;
  EncoderConfig cfg_;
  NeighborPolicy policy_;
  std::vector<double> alpha_;
  const DenseMatrix* user_emb_ = nullptr;
  std::vector<DenseMatrix> entity_layers_;
  std::vector<std::vector<std::vector<Index>>> entity_samples_;  // [hop][entity]
  DenseMatrix combined_;
  DenseMatrix combined_grad_;
  std::vector<std::optional<UserState>> users_;
};

// Binary cross-entropy of sigmoid(logit) with the probability clamped to
// [1e-12, 1 - 1e-12]. dlogit receives sigmoid(logit) - y.
double bce_with_logit(double logit, int label, double* dlogit = nullptr);

// sigma(h_u . h_i)
double score(std::span<const double> h_u, std::span<const double> h_i);

// A labelled pair whose indices address rows of caller-supplied matrices.
struct Record {
  Index user;
  Index item;
  int label;
};

struct PairLoss {
  double loss = 0.0;
  DenseMatrix grad_users;
  DenseMatrix grad_items;
};

// Sum over the batch of BCE(y, sigma(h_u . h_i)).
PairLoss loss_et(std::span<const Record> batch, const DenseMatrix& users,
                 const DenseMatrix& items);

}  // namespace hier
