#pragma once

#include <span>
#include <string>

#include "hier/encoder.h"
#include "hier/numerics.h"

namespace hier {

inline constexpr const char* kExemplarBank = "exemplar_bank";
inline constexpr const char* kIntentBank = "intent_bank";

// Whether the InfoNCE denominator also contains the positive pair.
enum class InfoNceMode { kPositiveInclusive, kNegativesOnly };

struct ContrastConfig {
  double tau = 0.2;
  double lambda1 = 0.1;
  InfoNceMode mode = InfoNceMode::kPositiveInclusive;

  void validate() const;
};

// s = softmax(bank . h). Shared by the exemplar (P) and intent (I) banks.
Vector bank_similarity(std::span<const double> h, const DenseMatrix& bank);
// view = bank^T . s, a convex combination of bank rows.
Vector bank_view(std::span<const double> s, const DenseMatrix& bank);

inline Vector exemplar_similarity(std::span<const double> h_i, const DenseMatrix& p) {
  return bank_similarity(h_i, p);
}
inline Vector exemplar_view(std::span<const double> s_i, const DenseMatrix& p) {
  return bank_view(s_i, p);
}
inline Vector intent_similarity(std::span<const double> h_u, const DenseMatrix& intents) {
  return bank_similarity(h_u, intents);
}
inline Vector intent_view(std::span<const double> s_u, const DenseMatrix& intents) {
  return bank_view(s_u, intents);
}

// Backprop of s = softmax(bank . h): accumulates into grad_h and grad_bank.
void bank_similarity_backward(std::span<const double> h, const DenseMatrix& bank,
                              std::span<const double> s, std::span<const double> grad_s,
                              std::span<double> grad_h, DenseMatrix& grad_bank);

struct InfoNceResult {
  double loss = 0.0;
  DenseMatrix grad_anchors;
  DenseMatrix grad_views;
};

// Bidirectional InfoNCE with cosine similarity and in-batch negatives:
//   -sum_k [ log softmax_l(cos(a_k, v_l)/tau)[k] + log softmax_l(cos(v_k, a_l)/tau)[k] ]
// Throws NumericError for a batch smaller than 2.
InfoNceResult infonce_bidirectional(const DenseMatrix& anchors, const DenseMatrix& views,
                                    double tau, InfoNceMode mode);

struct BankContrastResult {
  double value = 0.0;
  DenseMatrix grad_reprs;
  DenseMatrix grad_bank;
};

// Exemplar-level contrastive loss over item representations (one per row).
BankContrastResult loss_ecl(const DenseMatrix& items, const DenseMatrix& exemplars,
                            const ContrastConfig& cfg);

// The user agreement term: sum of log-softmax terms between h_u and its
// intent view. Its value is the negated InfoNCE, so minimising it pushes
// the two views apart.
BankContrastResult intent_agreement(const DenseMatrix& users, const DenseMatrix& intents,
                                    const ContrastConfig& cfg);

// Gated decision-path term injected into the revised score. Null `z`
// disables it.
struct PathTerm {
  const DenseMatrix* z = nullptr;  // n x m
  const DenseMatrix* w = nullptr;  // n x m
  double kappa = 1.0;
};

struct IbResult {
  double task = 0.0;       // revised L_ET
  double agreement = 0.0;  // unweighted agreement term
  double total = 0.0;      // task + lambda1 * agreement
  bool agreement_skipped = false;
  DenseMatrix grad_users;
  DenseMatrix grad_items;
  DenseMatrix grad_item_sims;
  DenseMatrix grad_intents;
  DenseMatrix grad_z;
  DenseMatrix grad_w;
  double grad_kappa = 0.0;
};

// L_IB = sum BCE(y, sigma(hat_h_u . h_i + path)) + lambda1 * agreement.
// `batch` indexes rows of `users` / `items`; `item_sims` holds s_i per item
// row (only read when the path term is active). Zero-norm users are left
// out of the agreement term, which is skipped with fewer than two users.
IbResult loss_ib(std::span<const Record> batch, const DenseMatrix& users,
                 const DenseMatrix& items, const DenseMatrix& item_sims,
                 const DenseMatrix& intents, const PathTerm& path, const ContrastConfig& cfg);

}  // namespace hier
