#include "hier/contrast.h"

#include <algorithm>
#include <cmath>

#include "hier/errors.h"

namespace hier {

void ContrastConfig::validate() const {
  if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
  if (lambda1 < 0.0) throw ConfigError("lambda1 must be >= 0");
}

Vector bank_similarity(std::span<const double> h, const DenseMatrix& bank) {
  return softmax(matvec(bank, h));
}

Vector bank_view(std::span<const double> s, const DenseMatrix& bank) {
  return matvec_transposed(bank, s);
}

void bank_similarity_backward(std::span<const double> h, const DenseMatrix& bank,
                              std::span<const double> s, std::span<const double> grad_s,
                              std::span<double> grad_h, DenseMatrix& grad_bank) {
  const Vector g_logits = softmax_backward(s, grad_s);
  for (std::size_t r = 0; r < bank.rows(); ++r) {
    if (g_logits[r] == 0.0) continue;
    axpy(g_logits[r], h, grad_bank.row(r));
    axpy(g_logits[r], bank.row(r), grad_h);
  }
}

namespace {

struct Normalised {
  DenseMatrix unit;
  Vector norm;
};

Normalised normalise(const DenseMatrix& m) {
  Normalised out{DenseMatrix(m.rows(), m.cols()), Vector(m.rows())};
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double n = norm2(m.row(r));
    if (n == 0.0) throw NumericError("cosine similarity of a zero-norm representation");
    out.norm[r] = n;
    auto dst = out.unit.row(r);
    const auto src = m.row(r);
    for (std::size_t k = 0; k < src.size(); ++k) dst[k] = src[k] / n;
  }
  return out;
}

// Log-sum-exp over `logits`, skipping index `skip` when non-negative; also
// returns the softmax weights (zero at `skip`).
double log_softmax_denominator(std::span<const double> logits, long skip, Vector& weights) {
  double mx = -INFINITY;
  for (std::size_t l = 0; l < logits.size(); ++l) {
    if (static_cast<long>(l) != skip) mx = std::max(mx, logits[l]);
  }
  double total = 0.0;
  weights.assign(logits.size(), 0.0);
  for (std::size_t l = 0; l < logits.size(); ++l) {
    if (static_cast<long>(l) == skip) continue;
    weights[l] = std::exp(logits[l] - mx);
    total += weights[l];
  }
  for (double& w : weights) w /= total;
  return mx + std::log(total);
}

}  // namespace

InfoNceResult infonce_bidirectional(const DenseMatrix& anchors, const DenseMatrix& views,
                                    double tau, InfoNceMode mode) {
  const std::size_t b = anchors.rows();
  if (b < 2) throw NumericError("InfoNCE needs a batch of at least 2 (no negatives)");
  if (views.rows() != b || views.cols() != anchors.cols()) {
    throw NumericError("InfoNCE: anchor/view shape mismatch");
  }
  const Normalised a = normalise(anchors);
  const Normalised v = normalise(views);

  DenseMatrix sim(b, b);  // sim(k, l) = cos(a_k, v_l)
  for (std::size_t k = 0; k < b; ++k) {
    for (std::size_t l = 0; l < b; ++l) sim(k, l) = dot(a.unit.row(k), v.unit.row(l));
  }

  // dloss/dsim accumulated in g.
  DenseMatrix g(b, b);
  double loss = 0.0;
  const bool exclusive = mode == InfoNceMode::kNegativesOnly;
  Vector logits(b), weights;
  for (std::size_t k = 0; k < b; ++k) {
    // anchor a_k against every view v_l
    for (std::size_t l = 0; l < b; ++l) logits[l] = sim(k, l) / tau;
    loss += log_softmax_denominator(logits, exclusive ? static_cast<long>(k) : -1, weights) -
            logits[k];
    for (std::size_t l = 0; l < b; ++l) g(k, l) += weights[l] / tau;
    g(k, k) -= 1.0 / tau;
    // view v_k against every anchor a_l: cos(v_k, a_l) = sim(l, k)
    for (std::size_t l = 0; l < b; ++l) logits[l] = sim(l, k) / tau;
    loss += log_softmax_denominator(logits, exclusive ? static_cast<long>(k) : -1, weights) -
            logits[k];
    for (std::size_t l = 0; l < b; ++l) g(l, k) += weights[l] / tau;
    g(k, k) -= 1.0 / tau;
  }

  InfoNceResult out{loss, DenseMatrix(b, anchors.cols()), DenseMatrix(b, views.cols())};
  for (std::size_t k = 0; k < b; ++k) {
    for (std::size_t l = 0; l < b; ++l) {
      const double gkl = g(k, l);
      if (gkl == 0.0) continue;
      const double c = sim(k, l);
      auto ga = out.grad_anchors.row(k);
      auto gv = out.grad_views.row(l);
      const auto au = a.unit.row(k);
      const auto vu = v.unit.row(l);
      const double sa = gkl / a.norm[k];
      const double sv = gkl / v.norm[l];
      for (std::size_t d = 0; d < au.size(); ++d) {
        ga[d] += sa * (vu[d] - c * au[d]);
        gv[d] += sv * (au[d] - c * vu[d]);
      }
    }
  }
  return out;
}

namespace {

// Shared body of loss_ecl / intent_agreement: views through `bank`, InfoNCE
// scaled by `sign`, and backprop into the representations and the bank.
BankContrastResult bank_contrast(const DenseMatrix& reprs, const DenseMatrix& bank,
                                 const ContrastConfig& cfg, double sign) {
  const std::size_t b = reprs.rows();
  DenseMatrix sims(b, bank.rows());
  DenseMatrix views(b, bank.cols());
  for (std::size_t r = 0; r < b; ++r) {
    const Vector s = bank_similarity(reprs.row(r), bank);
    const Vector v = bank_view(s, bank);
    std::copy(s.begin(), s.end(), sims.row(r).begin());
    std::copy(v.begin(), v.end(), views.row(r).begin());
  }
  const InfoNceResult nce = infonce_bidirectional(reprs, views, cfg.tau, cfg.mode);

  BankContrastResult out{sign * nce.loss, DenseMatrix(b, reprs.cols()),
                         DenseMatrix(bank.rows(), bank.cols())};
  for (std::size_t r = 0; r < b; ++r) {
    auto g_h = out.grad_reprs.row(r);
    axpy(sign, nce.grad_anchors.row(r), g_h);
    // view = bank^T s: d/dbank[j] += s_j * g_view, d/ds = bank . g_view
    Vector g_view(nce.grad_views.row(r).begin(), nce.grad_views.row(r).end());
    for (double& x : g_view) x *= sign;
    const auto s = sims.row(r);
    for (std::size_t j = 0; j < bank.rows(); ++j) axpy(s[j], g_view, out.grad_bank.row(j));
    const Vector g_s = matvec(bank, g_view);
    bank_similarity_backward(reprs.row(r), bank, s, g_s, g_h, out.grad_bank);
  }
  return out;
}

}  // namespace

BankContrastResult loss_ecl(const DenseMatrix& items, const DenseMatrix& exemplars,
                            const ContrastConfig& cfg) {
  return bank_contrast(items, exemplars, cfg, 1.0);
}

BankContrastResult intent_agreement(const DenseMatrix& users, const DenseMatrix& intents,
                                    const ContrastConfig& cfg) {
  return bank_contrast(users, intents, cfg, -1.0);
}

IbResult loss_ib(std::span<const Record> batch, const DenseMatrix& users,
                 const DenseMatrix& items, const DenseMatrix& item_sims,
                 const DenseMatrix& intents, const PathTerm& path, const ContrastConfig& cfg) {
  const std::size_t nu = users.rows();
  const std::size_t d = users.cols();
  const std::size_t m = intents.rows();
  IbResult out;
  out.grad_users = DenseMatrix(nu, d);
  out.grad_items = DenseMatrix(items.rows(), d);
  out.grad_item_sims = DenseMatrix(items.rows(), item_sims.cols());
  out.grad_intents = DenseMatrix(m, d);

  // Intent views.
  DenseMatrix s_u(nu, m), h_hat(nu, d);
  for (std::size_t u = 0; u < nu; ++u) {
    const Vector s = bank_similarity(users.row(u), intents);
    const Vector v = bank_view(s, intents);
    std::copy(s.begin(), s.end(), s_u.row(u).begin());
    std::copy(v.begin(), v.end(), h_hat.row(u).begin());
  }

  // Path term: t_i = kappa * A^T s_i with A = Z .* W.
  const bool use_path = path.z != nullptr;
  DenseMatrix a, t, r;
  if (use_path) {
    const std::size_t n = path.z->rows();
    a = DenseMatrix(n, m);
    for (std::size_t k = 0; k < a.size(); ++k) {
      a.values()[k] = path.z->values()[k] * path.w->values()[k];
    }
    t = DenseMatrix(items.rows(), m);
    r = DenseMatrix(items.rows(), m);
    for (std::size_t i = 0; i < items.rows(); ++i) {
      const Vector ti = matvec_transposed(a, item_sims.row(i));
      for (std::size_t j = 0; j < m; ++j) t(i, j) = path.kappa * ti[j];
    }
  }

  DenseMatrix g_hat(nu, d), g_su(nu, m);
  for (const auto& rec : batch) {
    double logit = dot(h_hat.row(rec.user), items.row(rec.item));
    if (use_path) logit += dot(t.row(rec.item), s_u.row(rec.user));
    double g = 0.0;
    out.task += bce_with_logit(logit, rec.label, &g);
    axpy(g, items.row(rec.item), g_hat.row(rec.user));
    axpy(g, h_hat.row(rec.user), out.grad_items.row(rec.item));
    if (use_path) {
      axpy(g, t.row(rec.item), g_su.row(rec.user));
      axpy(g, s_u.row(rec.user), r.row(rec.item));
    }
  }

  if (use_path) {
    const std::size_t n = a.rows();
    out.grad_z = DenseMatrix(n, m);
    out.grad_w = DenseMatrix(n, m);
    for (std::size_t i = 0; i < items.rows(); ++i) {
      const auto ri = r.row(i);
      if (std::all_of(ri.begin(), ri.end(), [](double x) { return x == 0.0; })) continue;
      const auto si = item_sims.row(i);
      const Vector ar = matvec(a, ri);  // A r_i
      out.grad_kappa += dot(si, ar);
      axpy(path.kappa, ar, out.grad_item_sims.row(i));
      for (std::size_t k = 0; k < n; ++k) {
        if (si[k] == 0.0) continue;
        for (std::size_t j = 0; j < m; ++j) {
          const double ga = path.kappa * si[k] * ri[j];
          out.grad_z(k, j) += ga * (*path.w)(k, j);
          out.grad_w(k, j) += ga * (*path.z)(k, j);
        }
      }
    }
  }

  // Agreement term between h_u and its intent view. Zero-norm users (cold
  // users in id-free mode) have no direction and are left out.
  std::vector<std::size_t> rows;
  for (std::size_t u = 0; u < nu; ++u) {
    if (norm2(users.row(u)) > 0.0) rows.push_back(u);
  }
  if (rows.size() < 2) {
    out.agreement_skipped = true;
  } else {
    DenseMatrix a(rows.size(), d), v(rows.size(), d);
    for (std::size_t k = 0; k < rows.size(); ++k) {
      std::copy(users.row(rows[k]).begin(), users.row(rows[k]).end(), a.row(k).begin());
      std::copy(h_hat.row(rows[k]).begin(), h_hat.row(rows[k]).end(), v.row(k).begin());
    }
    const InfoNceResult nce = infonce_bidirectional(a, v, cfg.tau, cfg.mode);
    out.agreement = -nce.loss;
    if (cfg.lambda1 != 0.0) {
      for (std::size_t k = 0; k < rows.size(); ++k) {
        axpy(-cfg.lambda1, nce.grad_anchors.row(k), out.grad_users.row(rows[k]));
        axpy(-cfg.lambda1, nce.grad_views.row(k), g_hat.row(rows[k]));
      }
    }
  }
  out.total = out.task + cfg.lambda1 * out.agreement;

  // Backprop the intent views: h_hat = I^T s_u, s_u = softmax(I h_u).
  for (std::size_t u = 0; u < nu; ++u) {
    const auto gh = g_hat.row(u);
    const auto su = s_u.row(u);
    for (std::size_t j = 0; j < m; ++j) axpy(su[j], gh, out.grad_intents.row(j));
    Vector g_s = matvec(intents, gh);
    axpy(1.0, g_su.row(u), g_s);
    bank_similarity_backward(users.row(u), intents, su, g_s, out.grad_users.row(u),
                             out.grad_intents);
  }
  return out;
}

}  // namespace hier
