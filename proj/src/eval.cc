#include "hier/eval.h"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <sstream>

#include "hier/contrast.h"
#include "hier/errors.h"
#include "hier/rng.h"

namespace hier {

std::vector<Index> rank(std::span<const Index> candidates, std::span<const double> scores) {
  if (candidates.size() != scores.size()) throw NumericError("rank: size mismatch");
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return candidates[a] < candidates[b];
  });
  std::vector<Index> out;
  out.reserve(order.size());
  for (std::size_t k : order) out.push_back(candidates[k]);
  return out;
}

std::size_t positive_position(Index positive, double positive_score,
                              std::span<const Index> negatives,
                              std::span<const double> negative_scores) {
  if (std::isnan(positive_score)) throw NumericError("NaN ranking score");
  std::size_t ahead = 0;
  for (std::size_t k = 0; k < negatives.size(); ++k) {
    const double s = negative_scores[k];
    if (std::isnan(s)) throw NumericError("NaN ranking score");
    if (s > positive_score || (s == positive_score && negatives[k] < positive)) ++ahead;
  }
  return ahead + 1;
}

double hit_at_k(std::size_t position, std::size_t k) { return position <= k ? 1.0 : 0.0; }

double ndcg_at_k(std::size_t position, std::size_t k) {
  if (position == 0 || position > k) return 0.0;
  return 1.0 / std::log2(static_cast<double>(position) + 1.0);
}

std::vector<MetricRow> evaluate(std::span<const RankingTask> tasks, const Scorer& scorer,
                                std::span<const std::size_t> ks) {
  std::vector<MetricRow> rows;
  for (std::size_t k : ks) rows.push_back({k, 0.0, 0.0, tasks.size()});
  std::vector<double> neg_scores;
  for (const RankingTask& t : tasks) {
    neg_scores.resize(t.negatives.size());
    for (std::size_t k = 0; k < t.negatives.size(); ++k) {
      neg_scores[k] = scorer(t.user, t.negatives[k]);
    }
    const std::size_t pos =
        positive_position(t.positive, scorer(t.user, t.positive), t.negatives, neg_scores);
    for (auto& r : rows) {
      r.hit += hit_at_k(pos, r.k);
      r.ndcg += ndcg_at_k(pos, r.k);
    }
  }
  if (!tasks.empty()) {
    for (auto& r : rows) {
      r.hit /= static_cast<double>(tasks.size());
      r.ndcg /= static_cast<double>(tasks.size());
    }
  }
  return rows;
}

std::string metrics_tsv(std::span<const MetricRow> rows) {
  std::ostringstream os;
  os << "K\thit\tndcg\tn_tasks\n";
  for (const auto& r : rows) {
    os << r.k << '\t' << format_real(r.hit) << '\t' << format_real(r.ndcg) << '\t' << r.n_tasks
       << '\n';
  }
  return os.str();
}

void EvalConfig::validate() const {
  if (ks.empty()) throw ConfigError("eval_ks must list at least one cut-off");
  for (std::size_t k : ks) {
    if (k == 0) throw ConfigError("eval_ks entries must be positive");
  }
}

KeyValues EvalConfig::to_kv() const {
  KeyValues kv;
  kv.set("eval_negatives", std::to_string(negatives));
  std::string list;
  for (std::size_t k : ks) list += (list.empty() ? "" : ",") + std::to_string(k);
  kv.set("eval_ks", list);
  kv.set("seed", std::to_string(seed));
  return kv;
}

const std::vector<std::string>& EvalConfig::keys() {
  static const std::vector<std::string> k = {"eval_negatives", "eval_ks", "seed"};
  return k;
}

EvalConfig EvalConfig::from_kv(const KeyValues& kv) {
  EvalConfig c;
  for (const auto& [key, v] : kv.entries()) {
    if (key == "eval_negatives") {
      const long long n = parse_int(key, v);
      if (n < 0) throw ConfigError("eval_negatives must be >= 0");
      c.negatives = static_cast<std::size_t>(n);
    } else if (key == "eval_ks") {
      c.ks.clear();
      for (std::string_view tok : split(v, ',')) {
        const long long k = parse_int(key, tok);
        if (k <= 0) throw ConfigError("eval_ks entries must be positive");
        c.ks.push_back(static_cast<std::size_t>(k));
      }
    } else if (key == "seed") {
      c.seed = static_cast<std::uint64_t>(parse_int(key, v));
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

std::vector<RankingTask> build_tasks(const TargetDomainData& data, const EvalConfig& cfg) {
  cfg.validate();
  std::vector<std::vector<Index>> liked(data.users.size());
  for (const auto* rows : {&data.train, &data.test}) {
    for (const auto& r : *rows) {
      if (r.label == 1) liked[r.user].push_back(r.item);
    }
  }
  for (auto& l : liked) {
    std::sort(l.begin(), l.end());
    l.erase(std::unique(l.begin(), l.end()), l.end());
  }
  std::vector<RankingTask> tasks;
  for (std::size_t t = 0; t < data.test.size(); ++t) {
    const TargetRow& r = data.test[t];
    if (r.label != 1) continue;
    RankingTask task{r.user, r.item, {}};
    for (std::size_t i = 0; i < data.items.size(); ++i) {
      if (!std::binary_search(liked[r.user].begin(), liked[r.user].end(), static_cast<Index>(i))) {
        task.negatives.push_back(static_cast<Index>(i));
      }
    }
    if (cfg.negatives > 0 && task.negatives.size() > cfg.negatives) {
      // Partial Fisher-Yates keyed by the task's position in the test file.
      Rng rng = Rng(cfg.seed, "eval_negatives").derive({t});
      for (std::size_t k = 0; k < cfg.negatives; ++k) {
        const std::size_t j = k + rng.below(task.negatives.size() - k);
        std::swap(task.negatives[k], task.negatives[j]);
      }
      task.negatives.resize(cfg.negatives);
      std::sort(task.negatives.begin(), task.negatives.end());
    }
    tasks.push_back(std::move(task));
  }
  return tasks;
}

double random_hit_at_10(std::span<const RankingTask> tasks) {
  if (tasks.empty()) return 0.0;
  double total = 0.0;
  for (const auto& t : tasks) {
    total += std::min(1.0, 10.0 / static_cast<double>(t.negatives.size() + 1));
  }
  return total / static_cast<double>(tasks.size());
}

Scorer zeroshot_scorer(const TargetEncodings& enc) {
  return [&enc](Index u, Index i) { return zeroshot_score(enc.users.row(u), enc.items.row(i)); };
}

Scorer finetuned_scorer(const TargetEncodings& enc, const ParamStore& head,
                        const ParamStore* intents, const FieldVocab& vocab,
                        const TargetDomainData& data) {
  auto users = std::make_shared<DenseMatrix>(enc.users);
  if (intents) {
    const DenseMatrix& bank = intents->value(kIntentBank);
    for (std::size_t u = 0; u < users->rows(); ++u) {
      const Vector h = intent_view_of(enc.raw_users.row(u), bank);
      std::copy(h.begin(), h.end(), users->row(u).begin());
    }
  }
  return [users, &enc, &head, &vocab, &data](Index u, Index i) {
    const std::vector<Index> rows = example_rows(vocab, data, u, i);
    return head_forward(users->row(u), enc.items.row(i), rows, head).logit;
  };
}

}  // namespace hier
