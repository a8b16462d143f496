#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hier/kgraph.h"
#include "hier/transfer.h"

namespace hier {

struct RankingTask {
  Index user;
  Index positive;
  std::vector<Index> negatives;
};

// Candidates sorted by descending score; equal scores keep ascending item
// index.
std::vector<Index> rank(std::span<const Index> candidates, std::span<const double> scores);

// 1-based position of `positive` after ranking; a NaN score is a
// NumericError.
std::size_t positive_position(Index positive, double positive_score,
                              std::span<const Index> negatives,
                              std::span<const double> negative_scores);

double hit_at_k(std::size_t position, std::size_t k);
// Single relevant item: 1 / log2(position + 1) inside the cut-off.
double ndcg_at_k(std::size_t position, std::size_t k);

struct MetricRow {
  std::size_t k = 0;
  double hit = 0.0;
  double ndcg = 0.0;
  std::size_t n_tasks = 0;
};

using Scorer = std::function<double(Index user, Index item)>;

std::vector<MetricRow> evaluate(std::span<const RankingTask> tasks, const Scorer& scorer,
                                std::span<const std::size_t> ks);
// Columns K, hit, ndcg, n_tasks.
std::string metrics_tsv(std::span<const MetricRow> rows);

struct EvalConfig {
  std::size_t negatives = 999;  // 0 = every candidate item
  std::vector<std::size_t> ks = {10, 25, 50};
  std::uint64_t seed = 1;

  void validate() const;
  KeyValues to_kv() const;
  static EvalConfig from_kv(const KeyValues& kv);
  static const std::vector<std::string>& keys();
};

// One task per positive test row. Candidates are target items the user has
// no positive for (train or test); when more than cfg.negatives exist a
// seeded uniform sample is drawn.
std::vector<RankingTask> build_tasks(const TargetDomainData& data, const EvalConfig& cfg);

// Mean of 10 / |candidates| over tasks (expected Hit@10 of a random ranking).
double random_hit_at_10(std::span<const RankingTask> tasks);

// hat_h_u . h_i over precomputed encodings. The scorer keeps a reference to
// `enc`.
Scorer zeroshot_scorer(const TargetEncodings& enc);
// Fine-tuned head score. With `intents`, hat_h_u is recomputed from the
// tuned bank. References to every argument are kept.
Scorer finetuned_scorer(const TargetEncodings& enc, const ParamStore& head,
                        const ParamStore* intents, const FieldVocab& vocab,
                        const TargetDomainData& data);

}  // namespace hier
