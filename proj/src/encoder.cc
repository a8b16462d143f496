#include "hier/encoder.h"

#include <algorithm>
#include <cmath>

#include "hier/errors.h"
#include "hier/rng.h"

namespace hier {

std::vector<std::string> init_encoder_params(ParamStore& store, const KnowledgeGraph& graph,
                                             const EncoderConfig& cfg, std::uint64_t seed) {
  if (cfg.layers < 0) throw ConfigError("layers must be >= 0");
  std::vector<std::string> warnings;
  const std::size_t d0 = graph.feature_dim();
  const std::size_t d = cfg.dim;
  Rng init(seed, "init");

  DenseMatrix& emb = store.add(kEntityEmb, graph.entities.size(), d);
  if (d == d0) {
    emb = graph.features;
  } else {
    DenseMatrix& proj = store.add(kFeatProj, d0, d);
    Rng r = init.derive({1});
    const double scale = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(d0, 1)));
    for (double& v : proj.values()) v = scale * r.normal();
  }
  for (std::size_t e = 0; e < graph.entities.size(); ++e) {
    if (!graph.has_feature[e]) {
      warnings.push_back("entity " + graph.entities.name(static_cast<Index>(e)) +
                         " has no feature row; initialised to zero");
    }
  }

  DenseMatrix& users = store.add(kUserEmb, graph.users.size(), d);
  Rng r = init.derive({2});
  for (double& v : users.values()) v = 0.01 * r.normal();

  DenseMatrix& alpha = store.add(kLayerAlpha, 1, cfg.layers + 1, cfg.learnable_alpha);
  alpha.fill(1.0 / (cfg.layers + 1));
  return warnings;
}

Vector aggregate(std::span<const double> self, const DenseMatrix& table,
                 std::span<const Index> neighbors) {
  Vector out(self.begin(), self.end());
  if (neighbors.empty()) return out;
  Vector mean(self.size(), 0.0);
  for (Index e : neighbors) axpy(1.0, table.row(e), mean);
  const double inv = 1.0 / static_cast<double>(neighbors.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = 0.5 * (out[k] + inv * mean[k]);
  return out;
}

EncoderPass::EncoderPass(const KnowledgeGraph& graph, const EncoderConfig& cfg,
                         const ParamStore& store, NeighborPolicy policy)
    : graph_(graph), cfg_(cfg), policy_(policy) {
  const std::size_t n_ent = graph.entities.size();
  const std::size_t d = cfg.dim;
  const auto& alpha = store.value(kLayerAlpha);
  if (alpha.cols() != static_cast<std::size_t>(cfg.layers + 1)) {
    throw ConfigError("layer_alpha width does not match layers + 1");
  }
  alpha_.assign(alpha.values().begin(), alpha.values().end());
  user_emb_ = &store.value(kUserEmb);

  DenseMatrix h0 = store.value(kEntityEmb);
  if (h0.cols() != d) throw ConfigError("entity_emb width does not match dim");
  if (store.contains(kFeatProj)) {
    const auto& proj = store.value(kFeatProj);
    for (std::size_t e = 0; e < n_ent; ++e) {
      const auto f = graph.features.row(e);
      auto out = h0.row(e);
      for (std::size_t a = 0; a < f.size(); ++a) {
        if (f[a] != 0.0) axpy(f[a], proj.row(a), out);
      }
    }
  }
  entity_layers_.push_back(std::move(h0));
  entity_samples_.resize(cfg.layers);
  for (int l = 0; l < cfg.layers; ++l) {
    auto& samples = entity_samples_[l];
    samples.resize(n_ent);
    DenseMatrix next(n_ent, d);
    const DenseMatrix& prev = entity_layers_.back();
    for (std::size_t e = 0; e < n_ent; ++e) {
      samples[e] = sample_neighbors(graph.entity_neighbors(static_cast<Index>(e)),
                                    NodeKind::kEntity, static_cast<Index>(e), l, policy.cap,
                                    policy.seed, policy.epoch)
                       .neighbors;
      const Vector v = aggregate(prev.row(e), prev, samples[e]);
      std::copy(v.begin(), v.end(), next.row(e).begin());
    }
    entity_layers_.push_back(std::move(next));
  }
  combined_ = DenseMatrix(n_ent, d);
  for (int l = 0; l <= cfg.layers; ++l) {
    auto src = entity_layers_[l].values();
    auto dst = combined_.values();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += alpha_[l] * src[k];
  }
  combined_grad_ = DenseMatrix(n_ent, d);
  users_.resize(graph.users.size());
}

EncoderPass::UserState& EncoderPass::user_state(Index u) {
  if (u >= users_.size()) throw DataError("user index out of range");
  if (users_[u]) return *users_[u];
  UserState st;
  const std::size_t d = cfg_.dim;
  const auto all = graph_.user_entity_neighbors(u);
  for (int l = 0; l < cfg_.layers; ++l) {
    st.samples.push_back(sample_neighbors(all, NodeKind::kUser, u, l, policy_.cap,
                                          policy_.seed, policy_.epoch)
                             .neighbors);
  }
  Vector h0(d, 0.0);
  if (cfg_.id_free_users) {
    const auto& first = cfg_.layers > 0 ? st.samples[0] : std::vector<Index>(all.begin(), all.end());
    for (Index e : first) axpy(1.0 / static_cast<double>(first.size()), entity_layers_[0].row(e), h0);
  } else {
    const auto row = user_emb_->row(u);
    h0.assign(row.begin(), row.end());
  }
  st.layers.push_back(std::move(h0));
  for (int l = 0; l < cfg_.layers; ++l) {
    st.layers.push_back(aggregate(st.layers.back(), entity_layers_[l], st.samples[l]));
  }
  st.combined.assign(d, 0.0);
  for (int l = 0; l <= cfg_.layers; ++l) axpy(alpha_[l], st.layers[l], st.combined);
  st.grad.assign(d, 0.0);
  users_[u] = std::move(st);
  return *users_[u];
}

NodeRepr EncoderPass::propagate_user(Index u) {
  const auto& st = user_state(u);
  return {st.layers, st.combined};
}

NodeRepr EncoderPass::propagate_item(Index i) const {
  const auto& ents = graph_.item_entities.at(i);
  if (ents.empty()) throw DataError("item " + graph_.items.name(i) + " has no entities");
  NodeRepr out;
  const double inv = 1.0 / static_cast<double>(ents.size());
  for (int l = 0; l <= cfg_.layers; ++l) {
    Vector h(cfg_.dim, 0.0);
    for (Index e : ents) axpy(inv, entity_layers_[l].row(e), h);
    out.layers.push_back(std::move(h));
  }
  out.combined = item(i);
  return out;
}

std::span<const double> EncoderPass::user(Index u) { return user_state(u).combined; }

Vector EncoderPass::item(Index i) const {
  const auto& ents = graph_.item_entities.at(i);
  if (ents.empty()) throw DataError("item " + graph_.items.name(i) + " has no entities");
  Vector h(cfg_.dim, 0.0);
  const double inv = 1.0 / static_cast<double>(ents.size());
  for (Index e : ents) axpy(inv, combined_.row(e), h);
  return h;
}

void EncoderPass::add_user_grad(Index u, std::span<const double> g) {
  axpy(1.0, g, user_state(u).grad);
}

void EncoderPass::add_item_grad(Index i, std::span<const double> g) {
  const auto& ents = graph_.item_entities.at(i);
  const double inv = 1.0 / static_cast<double>(ents.size());
  for (Index e : ents) axpy(inv, g, combined_grad_.row(e));
}

void EncoderPass::add_entity_grad(Index e, std::span<const double> g) {
  axpy(1.0, g, combined_grad_.row(e));
}

void EncoderPass::backward(ParamStore& store) const {
  const int L = cfg_.layers;
  const std::size_t n_ent = combined_.rows();
  const std::size_t d = cfg_.dim;
  auto& g_alpha = store.grad(kLayerAlpha);

  std::vector<DenseMatrix> g_layers;
  for (int l = 0; l <= L; ++l) {
    DenseMatrix g(n_ent, d);
    auto src = combined_grad_.values();
    auto dst = g.values();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = alpha_[l] * src[k];
    g_alpha(0, l) += dot(entity_layers_[l].values(), src);
    g_layers.push_back(std::move(g));
  }

  auto& g_user_emb = store.grad(kUserEmb);
  for (std::size_t u = 0; u < users_.size(); ++u) {
    if (!users_[u]) continue;
    const UserState& st = *users_[u];
    if (std::all_of(st.grad.begin(), st.grad.end(), [](double v) { return v == 0.0; })) continue;
    std::vector<Vector> g(L + 1);
    for (int l = 0; l <= L; ++l) {
      g_alpha(0, l) += dot(st.layers[l], st.grad);
      g[l].assign(d, 0.0);
      axpy(alpha_[l], st.grad, g[l]);
    }
    for (int l = L; l >= 1; --l) {
      const auto& nb = st.samples[l - 1];
      if (nb.empty()) {
        axpy(1.0, g[l], g[l - 1]);
        continue;
      }
      axpy(0.5, g[l], g[l - 1]);
      const double w = 0.5 / static_cast<double>(nb.size());
      for (Index e : nb) axpy(w, g[l], g_layers[l - 1].row(e));
    }
    if (cfg_.id_free_users) {
      const auto all = graph_.user_entity_neighbors(static_cast<Index>(u));
      const std::vector<Index> first =
          L > 0 ? st.samples[0] : std::vector<Index>(all.begin(), all.end());
      for (Index e : first) {
        axpy(1.0 / static_cast<double>(first.size()), g[0], g_layers[0].row(e));
      }
    } else {
      axpy(1.0, g[0], g_user_emb.row(u));
    }
  }

  for (int l = L; l >= 1; --l) {
    const auto& samples = entity_samples_[l - 1];
    for (std::size_t e = 0; e < n_ent; ++e) {
      const auto ge = g_layers[l].row(e);
      const auto& nb = samples[e];
      if (nb.empty()) {
        axpy(1.0, ge, g_layers[l - 1].row(e));
        continue;
      }
      axpy(0.5, ge, g_layers[l - 1].row(e));
      const double w = 0.5 / static_cast<double>(nb.size());
      for (Index n : nb) axpy(w, ge, g_layers[l - 1].row(n));
    }
  }

  auto& g_emb = store.grad(kEntityEmb);
  axpy(1.0, g_layers[0].values(), g_emb.values());
  if (store.contains(kFeatProj)) {
    auto& g_proj = store.grad(kFeatProj);
    for (std::size_t e = 0; e < n_ent; ++e) {
      const auto f = graph_.features.row(e);
      const auto ge = g_layers[0].row(e);
      for (std::size_t a = 0; a < f.size(); ++a) {
        if (f[a] != 0.0) axpy(f[a], ge, g_proj.row(a));
      }
    }
  }
}

double bce_with_logit(double logit, int label, double* dlogit) {
  constexpr double kEps = 1e-12;
  const double p = sigmoid(logit);
  const double pc = std::clamp(p, kEps, 1.0 - kEps);
  if (dlogit) *dlogit = p - static_cast<double>(label);
  return label == 1 ? -std::log(pc) : -std::log(1.0 - pc);
}

double score(std::span<const double> h_u, std::span<const double> h_i) {
  return sigmoid(dot(h_u, h_i));
}

PairLoss loss_et(std::span<const Record> batch, const DenseMatrix& users,
                 const DenseMatrix& items) {
  PairLoss out{0.0, DenseMatrix(users.rows(), users.cols()),
               DenseMatrix(items.rows(), items.cols())};
  for (const auto& r : batch) {
    double g = 0.0;
    out.loss += bce_with_logit(dot(users.row(r.user), items.row(r.item)), r.label, &g);
    axpy(g, items.row(r.item), out.grad_users.row(r.user));
    axpy(g, users.row(r.user), out.grad_items.row(r.item));
  }
  return out;
}

}  // namespace hier
