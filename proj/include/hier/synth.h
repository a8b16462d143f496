#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "hier/config.h"
#include "hier/kgraph.h"
#include "hier/param_store.h"
#include "hier/rng.h"
#include "hier/train.h"
#include "hier/transfer.h"

namespace hier {

// Planted path mask M*: rows are item clusters, columns user intents.
using PathMask = std::vector<std::vector<int>>;

struct SynthConfig {
  std::size_t users = 2000;
  std::size_t items = 500;  // source + held-out target items
  std::size_t entities = 300;
  std::size_t source_domains = 3;
  std::size_t target_domains = 1;
  std::size_t c_exemplar = 4;
  std::size_t c_intent = 3;
  // (cluster, intent) pairs with M*_{kj} = 1.
  std::vector<std::pair<std::size_t, std::size_t>> paths = {{0, 0}, {1, 1}, {2, 2}, {3, 0}};
  double noise = 0.05;
  std::size_t d0 = 32;
  std::uint64_t seed = 1;

  double edge_mix = 0.9;  // probability an entity edge stays inside its cluster
  std::size_t edges_per_entity = 3;
  std::size_t relations = 3;
  std::size_t min_item_entities = 2;
  std::size_t max_item_entities = 4;
  // Entity weight (rank + 1)^-exponent within its cluster; 0 = uniform items.
  double popularity_exponent = 1.0;
  std::size_t intents_per_user = 1;
  std::size_t positives_per_user = 10;
  std::size_t negatives_per_positive = 1;

  double target_item_fraction = 0.2;
  double target_user_fraction = 0.5;
  std::size_t target_new_users = 0;  // per target domain, absent from the source graph
  std::size_t target_train_positives = 2;
  std::size_t target_test_positives = 1;
  double segment_noise = 0.2;  // chance the user segment profile is a random intent

  void validate() const;
  PathMask mask() const;
  KeyValues to_kv() const;
  static SynthConfig from_kv(const KeyValues& kv);
  static const std::vector<std::string>& keys();
};

struct IntentMixture {
  std::vector<std::size_t> intents;
  std::vector<double> weights;  // sums to 1
  std::size_t dominant() const;
};

struct GroundTruth {
  std::size_t c_exemplar = 0;
  std::size_t c_intent = 0;
  PathMask mask;
  std::vector<std::pair<std::string, std::size_t>> entity_cluster;
  std::vector<std::pair<std::string, std::size_t>> item_cluster;  // source and target items
  std::vector<std::pair<std::string, IntentMixture>> user_intents;
  std::vector<std::pair<std::string, std::vector<std::string>>> target_items;  // by domain

  // Keys: format, c_exemplar, c_intent, path_mask, entity_cluster,
  // item_cluster, user_intents, target_items.
  std::string to_json() const;
  static GroundTruth from_json(const std::string& text);
  static GroundTruth load(const std::filesystem::path& path);

  std::size_t cluster_of_item(const std::string& name) const;
  std::size_t cluster_of_entity(const std::string& name) const;
  const IntentMixture* intents_of(const std::string& user) const;
};

struct TargetDomain {
  std::string name;
  TargetDomainData data;
};

struct SynthDataset {
  KnowledgeGraph graph;
  std::vector<TargetDomain> targets;
  GroundTruth truth;
};

// Intent j ~ mixture, then cluster k uniform over {k : M*_{kj} = 1}.
std::size_t draw_positive_cluster(const IntentMixture& mix, const PathMask& mask, Rng& rng);

// Throws ConfigError when an intent has no allowed cluster.
SynthDataset generate(const SynthConfig& cfg);

// <dir>/{entities,triples,item_entities,interactions}.tsv, ground_truth.json,
// synth.cfg and one target directory per target domain (target/ for the
// first, target_<k>/ after that).
void write_dataset(const SynthDataset& ds, const SynthConfig& cfg, const std::filesystem::path& dir);
std::filesystem::path target_dir(const std::filesystem::path& dir, std::size_t k);

struct RecoveryReport {
  double purity = 0.0;
  double path_auc = 0.0;
  std::size_t active_gates = 0;
  // Aggregated gate strength per planted (cluster, intent).
  std::vector<std::vector<double>> cluster_intent_gates;
};

// Purity: items take their argmax exemplar, every exemplar votes for its
// majority cluster. Path AUC ranks G_kj = sum_ab q(a|k) r(b|j) Zhat_ab against
// M*, where q and r are the exemplar/intent assignment frequencies of each
// planted cluster and intent. Throws ConfigError when the bank has fewer rows
// than planted clusters.
RecoveryReport recovery_report(const KnowledgeGraph& graph, const ParamStore& params,
                               const TrainConfig& cfg, const GroundTruth& truth);

// Parameters with entity vectors at their cluster centroid, banks pointing at
// the planted clusters and intents, and gates open exactly on M*. Needs
// cfg.dim >= c_exemplar.
ParamStore oracle_params(const KnowledgeGraph& graph, const TrainConfig& cfg,
                         const GroundTruth& truth);

}  // namespace hier
