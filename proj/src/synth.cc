#include "hier/synth.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <tuple>

#include "hier/contrast.h"
#include "hier/encoder.h"
#include "hier/errors.h"
#include "hier/gates.h"
#include "json.hpp"

namespace hier {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

constexpr const char* kGroundTruthFormat = "hier-ground-truth";

// Centroids sit at 4/sqrt(2) on orthogonal axes: pairwise distance 4.
const double kCentroidScale = 4.0 / std::sqrt(2.0);

std::size_t pick_weighted(const std::vector<double>& cumulative, Rng& rng) {
  const double r = rng.uniform() * cumulative.back();
  const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), r);
  return std::min<std::size_t>(it - cumulative.begin(), cumulative.size() - 1);
}

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t k = v.size(); k > 1; --k) std::swap(v[k - 1], v[rng.below(k)]);
}

std::vector<std::size_t> balanced_labels(std::size_t n, std::size_t c, Rng& rng) {
  std::vector<std::size_t> labels(n);
  for (std::size_t k = 0; k < n; ++k) labels[k] = k % c;
  shuffle(labels, rng);
  return labels;
}

IntentMixture draw_mixture(const SynthConfig& cfg, Rng& rng) {
  std::vector<std::size_t> all(cfg.c_intent);
  std::iota(all.begin(), all.end(), 0);
  IntentMixture mix;
  for (std::size_t k = 0; k < cfg.intents_per_user; ++k) {
    const std::size_t j = k + rng.below(all.size() - k);
    std::swap(all[k], all[j]);
    mix.intents.push_back(all[k]);
  }
  std::sort(mix.intents.begin(), mix.intents.end());
  mix.weights.assign(mix.intents.size(), 1.0 / static_cast<double>(mix.intents.size()));
  return mix;
}

int flip(int label, double noise, Rng& rng) {
  return rng.uniform() < noise ? 1 - label : label;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path.string() + ": cannot open");
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

// ---------------------------------------------------------------------------
// SynthConfig

void SynthConfig::validate() const {
  if (users == 0 || items == 0 || entities == 0) {
    throw ConfigError("synth_users, synth_items and synth_entities must be positive");
  }
  if (source_domains == 0) throw ConfigError("synth_source_domains must be positive");
  if (c_exemplar == 0 || c_intent == 0) throw ConfigError("c_exemplar and c_intent must be positive");
  if (!(noise >= 0.0 && noise < 0.5)) throw ConfigError("synth_noise must be in [0, 0.5)");
  if (d0 < c_exemplar) throw ConfigError("synth_d0 must be >= c_exemplar");
  if (!(edge_mix >= 0.0 && edge_mix <= 1.0)) throw ConfigError("synth_edge_mix must be in [0, 1]");
  if (relations == 0) throw ConfigError("synth_relations must be positive");
  if (min_item_entities == 0 || min_item_entities > max_item_entities) {
    throw ConfigError("need 0 < synth_min_item_entities <= synth_max_item_entities");
  }
  if (entities < c_exemplar * max_item_entities) {
    throw ConfigError("synth_entities too small for c_exemplar * synth_max_item_entities");
  }
  if (popularity_exponent < 0.0) throw ConfigError("synth_popularity_exponent must be >= 0");
  if (intents_per_user == 0 || intents_per_user > c_intent) {
    throw ConfigError("synth_intents_per_user must be in [1, c_intent]");
  }
  if (!(target_item_fraction >= 0.0 && target_item_fraction < 1.0)) {
    throw ConfigError("synth_target_item_fraction must be in [0, 1)");
  }
  if (!(target_user_fraction >= 0.0 && target_user_fraction <= 1.0)) {
    throw ConfigError("synth_target_user_fraction must be in [0, 1]");
  }
  if (!(segment_noise >= 0.0 && segment_noise <= 1.0)) {
    throw ConfigError("synth_segment_noise must be in [0, 1]");
  }
  for (const auto& [k, j] : paths) {
    if (k >= c_exemplar || j >= c_intent) {
      throw ConfigError("synth_paths entry " + std::to_string(k) + ":" + std::to_string(j) +
                        " is outside the planted clusters/intents");
    }
  }
  const PathMask m = mask();
  for (std::size_t j = 0; j < c_intent; ++j) {
    bool any = false;
    for (std::size_t k = 0; k < c_exemplar; ++k) any = any || m[k][j] == 1;
    if (!any) throw ConfigError("intent " + std::to_string(j) + " has no allowed cluster in synth_paths");
  }
}

PathMask SynthConfig::mask() const {
  PathMask m(c_exemplar, std::vector<int>(c_intent, 0));
  for (const auto& [k, j] : paths) {
    if (k < c_exemplar && j < c_intent) m[k][j] = 1;
  }
  return m;
}

const std::vector<std::string>& SynthConfig::keys() {
  static const std::vector<std::string> k = {
      "synth_users", "synth_items", "synth_entities", "synth_source_domains",
      "synth_target_domains", "c_exemplar", "c_intent", "synth_paths", "synth_noise", "synth_d0",
      "seed", "synth_edge_mix", "synth_edges_per_entity", "synth_relations",
      "synth_min_item_entities", "synth_max_item_entities", "synth_popularity_exponent",
      "synth_intents_per_user", "synth_positives_per_user", "synth_negatives_per_positive",
      "synth_target_item_fraction", "synth_target_user_fraction", "synth_target_new_users",
      "synth_target_train_positives", "synth_target_test_positives", "synth_segment_noise"};
  return k;
}

KeyValues SynthConfig::to_kv() const {
  KeyValues kv;
  const auto u = [&](const char* key, std::size_t v) { kv.set(key, std::to_string(v)); };
  const auto r = [&](const char* key, double v) { kv.set(key, format_real(v)); };
  u("synth_users", users);
  u("synth_items", items);
  u("synth_entities", entities);
  u("synth_source_domains", source_domains);
  u("synth_target_domains", target_domains);
  u("c_exemplar", c_exemplar);
  u("c_intent", c_intent);
  std::string p;
  for (const auto& [k, j] : paths) {
    p += (p.empty() ? "" : ",") + std::to_string(k) + ":" + std::to_string(j);
  }
  kv.set("synth_paths", p);
  r("synth_noise", noise);
  u("synth_d0", d0);
  kv.set("seed", std::to_string(seed));
  r("synth_edge_mix", edge_mix);
  u("synth_edges_per_entity", edges_per_entity);
  u("synth_relations", relations);
  u("synth_min_item_entities", min_item_entities);
  u("synth_max_item_entities", max_item_entities);
  r("synth_popularity_exponent", popularity_exponent);
  u("synth_intents_per_user", intents_per_user);
  u("synth_positives_per_user", positives_per_user);
  u("synth_negatives_per_positive", negatives_per_positive);
  r("synth_target_item_fraction", target_item_fraction);
  r("synth_target_user_fraction", target_user_fraction);
  u("synth_target_new_users", target_new_users);
  u("synth_target_train_positives", target_train_positives);
  u("synth_target_test_positives", target_test_positives);
  r("synth_segment_noise", segment_noise);
  return kv;
}

SynthConfig SynthConfig::from_kv(const KeyValues& kv) {
  SynthConfig c;
  for (const auto& [key, v] : kv.entries()) {
    const auto count = [&]() {
      const long long n = parse_int(key, v);
      if (n < 0) throw ConfigError(key + " must be >= 0");
      return static_cast<std::size_t>(n);
    };
    if (key == "synth_users") c.users = count();
    else if (key == "synth_items") c.items = count();
    else if (key == "synth_entities") c.entities = count();
    else if (key == "synth_source_domains") c.source_domains = count();
    else if (key == "synth_target_domains") c.target_domains = count();
    else if (key == "c_exemplar") c.c_exemplar = count();
    else if (key == "c_intent") c.c_intent = count();
    else if (key == "synth_paths") {
      c.paths.clear();
      for (auto tok : split(v, ',')) {
        const auto kj = split(tok, ':');
        if (kj.size() != 2) throw ConfigError("synth_paths entries must look like cluster:intent");
        const long long k = parse_int(key, kj[0]);
        const long long j = parse_int(key, kj[1]);
        if (k < 0 || j < 0) throw ConfigError("synth_paths entries must be >= 0");
        c.paths.emplace_back(static_cast<std::size_t>(k), static_cast<std::size_t>(j));
      }
    } else if (key == "synth_noise") c.noise = parse_real(key, v);
    else if (key == "synth_d0") c.d0 = count();
    else if (key == "seed") c.seed = static_cast<std::uint64_t>(parse_int(key, v));
    else if (key == "synth_edge_mix") c.edge_mix = parse_real(key, v);
    else if (key == "synth_edges_per_entity") c.edges_per_entity = count();
    else if (key == "synth_relations") c.relations = count();
    else if (key == "synth_min_item_entities") c.min_item_entities = count();
    else if (key == "synth_max_item_entities") c.max_item_entities = count();
    else if (key == "synth_popularity_exponent") c.popularity_exponent = parse_real(key, v);
    else if (key == "synth_intents_per_user") c.intents_per_user = count();
    else if (key == "synth_positives_per_user") c.positives_per_user = count();
    else if (key == "synth_negatives_per_positive") c.negatives_per_positive = count();
    else if (key == "synth_target_item_fraction") c.target_item_fraction = parse_real(key, v);
    else if (key == "synth_target_user_fraction") c.target_user_fraction = parse_real(key, v);
    else if (key == "synth_target_new_users") c.target_new_users = count();
    else if (key == "synth_target_train_positives") c.target_train_positives = count();
    else if (key == "synth_target_test_positives") c.target_test_positives = count();
    else if (key == "synth_segment_noise") c.segment_noise = parse_real(key, v);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// GroundTruth

std::size_t IntentMixture::dominant() const {
  std::size_t best = 0;
  for (std::size_t k = 1; k < weights.size(); ++k) {
    if (weights[k] > weights[best]) best = k;
  }
  return intents.at(best);
}

std::string GroundTruth::to_json() const {
  ojson j;
  j["format"] = kGroundTruthFormat;
  j["c_exemplar"] = c_exemplar;
  j["c_intent"] = c_intent;
  j["path_mask"] = mask;
  ojson ec = ojson::object();
  for (const auto& [name, k] : entity_cluster) ec[name] = k;
  j["entity_cluster"] = ec;
  ojson ic = ojson::object();
  for (const auto& [name, k] : item_cluster) ic[name] = k;
  j["item_cluster"] = ic;
  ojson ui = ojson::object();
  for (const auto& [name, mix] : user_intents) {
    ojson pairs = ojson::array();
    for (std::size_t k = 0; k < mix.intents.size(); ++k) {
      pairs.push_back(ojson::array({mix.intents[k], mix.weights[k]}));
    }
    ui[name] = pairs;
  }
  j["user_intents"] = ui;
  ojson ti = ojson::object();
  for (const auto& [domain, names] : target_items) ti[domain] = names;
  j["target_items"] = ti;
  return j.dump(1) + "\n";
}

GroundTruth GroundTruth::from_json(const std::string& text) {
  GroundTruth t;
  try {
    const ojson j = ojson::parse(text);
    if (j.at("format") != kGroundTruthFormat) throw DataError("ground truth: unexpected format");
    t.c_exemplar = j.at("c_exemplar").get<std::size_t>();
    t.c_intent = j.at("c_intent").get<std::size_t>();
    t.mask = j.at("path_mask").get<PathMask>();
    for (const auto& [name, k] : j.at("entity_cluster").items()) {
      t.entity_cluster.emplace_back(name, k.get<std::size_t>());
    }
    for (const auto& [name, k] : j.at("item_cluster").items()) {
      t.item_cluster.emplace_back(name, k.get<std::size_t>());
    }
    for (const auto& [name, pairs] : j.at("user_intents").items()) {
      IntentMixture mix;
      for (const auto& p : pairs) {
        mix.intents.push_back(p.at(0).get<std::size_t>());
        mix.weights.push_back(p.at(1).get<double>());
      }
      t.user_intents.emplace_back(name, std::move(mix));
    }
    for (const auto& [domain, names] : j.at("target_items").items()) {
      t.target_items.emplace_back(domain, names.get<std::vector<std::string>>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("ground truth: ") + e.what());
  }
  if (t.mask.size() != t.c_exemplar) throw DataError("ground truth: path_mask has wrong row count");
  for (const auto& row : t.mask) {
    if (row.size() != t.c_intent) throw DataError("ground truth: path_mask has wrong column count");
  }
  return t;
}

GroundTruth GroundTruth::load(const fs::path& path) {
  try {
    return from_json(read_text(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::size_t GroundTruth::cluster_of_item(const std::string& name) const {
  for (const auto& [n, k] : item_cluster) {
    if (n == name) return k;
  }
  throw DataError("ground truth has no item " + name);
}

std::size_t GroundTruth::cluster_of_entity(const std::string& name) const {
  for (const auto& [n, k] : entity_cluster) {
    if (n == name) return k;
  }
  throw DataError("ground truth has no entity " + name);
}

const IntentMixture* GroundTruth::intents_of(const std::string& user) const {
  for (const auto& [n, mix] : user_intents) {
    if (n == user) return &mix;
  }
  return nullptr;
}

// ---------------------------------------------------------------------------
// Generation

std::size_t draw_positive_cluster(const IntentMixture& mix, const PathMask& mask, Rng& rng) {
  std::vector<double> cum(mix.weights.size());
  std::partial_sum(mix.weights.begin(), mix.weights.end(), cum.begin());
  const std::size_t j = mix.intents[pick_weighted(cum, rng)];
  std::vector<std::size_t> allowed;
  for (std::size_t k = 0; k < mask.size(); ++k) {
    if (mask[k][j] == 1) allowed.push_back(k);
  }
  if (allowed.empty()) throw ConfigError("intent " + std::to_string(j) + " has no allowed cluster");
  return allowed[rng.below(allowed.size())];
}

SynthDataset generate(const SynthConfig& cfg) {
  cfg.validate();
  const PathMask mask = cfg.mask();
  SynthDataset ds;
  KnowledgeGraph& g = ds.graph;
  GroundTruth& truth = ds.truth;
  truth.c_exemplar = cfg.c_exemplar;
  truth.c_intent = cfg.c_intent;
  truth.mask = mask;
  const std::size_t c = cfg.c_exemplar;

  // Entities: balanced clusters, Gaussian features around the centroid with
  // total noise variance 1.
  Rng ent_rng(cfg.seed, "synth_entities");
  const std::vector<std::size_t> ent_cluster = balanced_labels(cfg.entities, c, ent_rng);
  g.features = DenseMatrix(cfg.entities, cfg.d0);
  g.has_feature.assign(cfg.entities, true);
  const double sigma = 1.0 / std::sqrt(static_cast<double>(cfg.d0));
  for (std::size_t e = 0; e < cfg.entities; ++e) {
    g.entities.intern("e" + std::to_string(e));
    auto row = g.features.row(e);
    for (std::size_t k = 0; k < cfg.d0; ++k) row[k] = sigma * ent_rng.normal();
    row[ent_cluster[e]] += kCentroidScale;
    truth.entity_cluster.emplace_back(g.entities.name(static_cast<Index>(e)), ent_cluster[e]);
  }
  std::vector<std::vector<Index>> cluster_entities(c);
  for (std::size_t e = 0; e < cfg.entities; ++e) {
    cluster_entities[ent_cluster[e]].push_back(static_cast<Index>(e));
  }
  // Power-law popularity over a random rank order inside each cluster.
  std::vector<double> ent_weight(cfg.entities, 1.0);
  for (auto& members : cluster_entities) {
    std::vector<Index> order = members;
    shuffle(order, ent_rng);
    for (std::size_t r = 0; r < order.size(); ++r) {
      ent_weight[order[r]] = std::pow(static_cast<double>(r + 1), -cfg.popularity_exponent);
    }
  }

  // Entity-entity edges, mostly inside the cluster.
  Rng edge_rng(cfg.seed, "synth_edges");
  std::set<std::tuple<Index, Index, Index>> seen;
  for (std::size_t e = 0; e < cfg.entities; ++e) {
    for (std::size_t k = 0; k < cfg.edges_per_entity; ++k) {
      Index other;
      if (edge_rng.uniform() < cfg.edge_mix) {
        const auto& members = cluster_entities[ent_cluster[e]];
        other = members[edge_rng.below(members.size())];
      } else {
        other = static_cast<Index>(edge_rng.below(cfg.entities));
      }
      const std::string rel = "r" + std::to_string(edge_rng.below(cfg.relations));
      if (other == e) continue;
      const Index r = g.relations.find(rel) ? *g.relations.find(rel) : Index(g.relations.size());
      if (!seen.insert({static_cast<Index>(e), r, other}).second) continue;
      g.relations.intern(rel);
      g.triples.push_back({static_cast<Index>(e), r, other});
    }
  }

  // Items: balanced clusters, entities drawn inside the cluster.
  Rng item_rng(cfg.seed, "synth_items");
  const std::vector<std::size_t> item_cluster = balanced_labels(cfg.items, c, item_rng);
  std::vector<std::vector<Index>> item_ents(cfg.items);
  std::vector<double> item_weight(cfg.items, 0.0);
  for (std::size_t i = 0; i < cfg.items; ++i) {
    std::vector<Index> pool = cluster_entities[item_cluster[i]];
    const std::size_t n =
        cfg.min_item_entities + item_rng.below(cfg.max_item_entities - cfg.min_item_entities + 1);
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t j = k + item_rng.below(pool.size() - k);
      std::swap(pool[k], pool[j]);
      item_ents[i].push_back(pool[k]);
      item_weight[i] += ent_weight[pool[k]];
    }
  }
  // Hold out a fraction of every cluster for the target domains.
  std::vector<int> target_of(cfg.items, -1);
  for (std::size_t k = 0; k < c; ++k) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < cfg.items; ++i) {
      if (item_cluster[i] == k) members.push_back(i);
    }
    shuffle(members, item_rng);
    const auto held = cfg.target_domains == 0
                          ? std::size_t{0}
                          : static_cast<std::size_t>(std::llround(
                                cfg.target_item_fraction * static_cast<double>(members.size())));
    for (std::size_t r = 0; r < held; ++r) {
      target_of[members[r]] = static_cast<int>(r % cfg.target_domains);
    }
  }
  std::vector<std::size_t> source_items;
  std::vector<Index> graph_item(cfg.items, 0);
  std::vector<std::size_t> item_domain(cfg.items, 0);
  for (std::size_t i = 0; i < cfg.items; ++i) {
    const bool target = target_of[i] >= 0;
    const std::string name = (target ? "t" : "i") + std::to_string(i);
    truth.item_cluster.emplace_back(name, item_cluster[i]);
    if (target) continue;
    graph_item[i] = g.items.intern(name);
    g.item_entities.push_back(item_ents[i]);
    item_domain[i] = item_rng.below(cfg.source_domains);
    source_items.push_back(i);
  }
  if (source_items.empty()) throw ConfigError("synth config leaves no source items");

  // Per-cluster cumulative popularity over a candidate item set.
  const auto cluster_tables = [&](const std::vector<std::size_t>& pool) {
    std::vector<std::vector<std::size_t>> members(c);
    std::vector<std::vector<double>> cum(c);
    for (std::size_t i : pool) {
      members[item_cluster[i]].push_back(i);
      const double w = cfg.popularity_exponent == 0.0 ? 1.0 : item_weight[i];
      cum[item_cluster[i]].push_back((cum[item_cluster[i]].empty() ? 0.0 : cum[item_cluster[i]].back()) + w);
    }
    return std::make_pair(members, cum);
  };
  const auto [src_members, src_cum] = cluster_tables(source_items);
  for (std::size_t k = 0; k < c; ++k) {
    if (src_members[k].empty()) throw ConfigError("synth cluster " + std::to_string(k) + " has no source items");
  }

  // Users and source interactions.
  Rng user_rng(cfg.seed, "synth_users");
  Rng inter_rng(cfg.seed, "synth_interactions");
  std::vector<IntentMixture> mixtures(cfg.users);
  std::int64_t clock = 0;
  for (std::size_t u = 0; u < cfg.users; ++u) {
    const std::string name = "u" + std::to_string(u);
    mixtures[u] = draw_mixture(cfg, user_rng);
    truth.user_intents.emplace_back(name, mixtures[u]);
    for (std::size_t p = 0; p < cfg.positives_per_user; ++p) {
      const std::size_t k = draw_positive_cluster(mixtures[u], mask, inter_rng);
      const std::size_t item = src_members[k][pick_weighted(src_cum[k], inter_rng)];
      const auto emit = [&](std::size_t i, int label) {
        const Index d = g.domains.intern("src" + std::to_string(item_domain[i]));
        const Index uu = g.users.intern(name);
        g.interactions.push_back({d, uu, graph_item[i], flip(label, cfg.noise, inter_rng), clock++});
      };
      emit(item, 1);
      for (std::size_t n = 0; n < cfg.negatives_per_positive; ++n) {
        emit(source_items[inter_rng.below(source_items.size())], 0);
      }
    }
  }
  g.build_indices();

  // Target domains: held-out items over the same entities.
  Rng tgt_rng(cfg.seed, "synth_target");
  for (std::size_t t = 0; t < cfg.target_domains; ++t) {
    TargetDomain dom;
    dom.name = "tgt" + std::to_string(t);
    TargetDomainData& data = dom.data;
    std::vector<std::size_t> pool;
    std::vector<std::string> names;
    for (std::size_t i = 0; i < cfg.items; ++i) {
      if (target_of[i] != static_cast<int>(t)) continue;
      pool.push_back(i);
      names.push_back("t" + std::to_string(i));
      data.items.intern(names.back());
      data.item_entities.push_back(item_ents[i]);
      std::size_t brand = 0;
      for (std::size_t k = 1; k < item_ents[i].size(); ++k) {
        if (ent_weight[item_ents[i][k]] > ent_weight[item_ents[i][brand]]) brand = k;
      }
      data.item_profiles.push_back({{"category", "c" + std::to_string(item_cluster[i])},
                                    {"brand", "b" + std::to_string(item_ents[i][brand])}});
    }
    truth.target_items.emplace_back(dom.name, names);
    if (pool.empty()) {
      ds.targets.push_back(std::move(dom));
      continue;
    }
    std::vector<Index> local(cfg.items, 0);
    for (std::size_t k = 0; k < pool.size(); ++k) local[pool[k]] = static_cast<Index>(k);
    const auto [members, cum] = cluster_tables(pool);

    // Source users taking part, in index order, then new users.
    std::vector<std::size_t> ids(cfg.users);
    std::iota(ids.begin(), ids.end(), 0);
    const auto n_seen = static_cast<std::size_t>(
        std::llround(cfg.target_user_fraction * static_cast<double>(cfg.users)));
    for (std::size_t k = 0; k < n_seen; ++k) std::swap(ids[k], ids[k + tgt_rng.below(cfg.users - k)]);
    ids.resize(n_seen);
    std::sort(ids.begin(), ids.end());
    std::vector<std::pair<std::string, IntentMixture>> participants;
    for (std::size_t u : ids) participants.emplace_back("u" + std::to_string(u), mixtures[u]);
    for (std::size_t k = 0; k < cfg.target_new_users; ++k) {
      participants.emplace_back("n" + std::to_string(t) + "_" + std::to_string(k),
                                draw_mixture(cfg, tgt_rng));
      truth.user_intents.push_back(participants.back());
    }

    for (const auto& [name, mix] : participants) {
      const Index u = data.users.intern(name);
      const std::size_t segment = tgt_rng.uniform() < cfg.segment_noise
                                      ? tgt_rng.below(cfg.c_intent)
                                      : mix.dominant();
      data.user_profiles.push_back({{"segment", "s" + std::to_string(segment)},
                                    {"age", "a" + std::to_string(tgt_rng.below(5))}});
      // Distinct positive items: test rows first, then train rows.
      std::vector<std::size_t> liked;
      const std::size_t want = cfg.target_test_positives + cfg.target_train_positives;
      for (std::size_t attempt = 0; liked.size() < want && attempt < 50 * want; ++attempt) {
        const std::size_t k = draw_positive_cluster(mix, mask, tgt_rng);
        if (members[k].empty()) continue;
        const std::size_t item = members[k][pick_weighted(cum[k], tgt_rng)];
        if (std::find(liked.begin(), liked.end(), item) == liked.end()) liked.push_back(item);
      }
      const std::size_t n_test = std::min(cfg.target_test_positives, liked.size());
      for (std::size_t k = 0; k < n_test; ++k) data.test.push_back({u, local[liked[k]], 1, clock++});
      for (std::size_t k = n_test; k < liked.size(); ++k) {
        data.train.push_back({u, local[liked[k]], flip(1, cfg.noise, tgt_rng), clock++});
        for (std::size_t n = 0; n < cfg.negatives_per_positive; ++n) {
          std::size_t neg = pool[tgt_rng.below(pool.size())];
          for (int retry = 0; retry < 20 && std::count(liked.begin(), liked.end(), neg); ++retry) {
            neg = pool[tgt_rng.below(pool.size())];
          }
          data.train.push_back({u, local[neg], flip(0, cfg.noise, tgt_rng), clock++});
        }
      }
    }
    ds.targets.push_back(std::move(dom));
  }
  return ds;
}

fs::path target_dir(const fs::path& dir, std::size_t k) {
  return k == 0 ? dir / "target" : dir / ("target_" + std::to_string(k));
}

void write_dataset(const SynthDataset& ds, const SynthConfig& cfg, const fs::path& dir) {
  export_graph(ds.graph, dir);
  for (std::size_t k = 0; k < ds.targets.size(); ++k) {
    write_target(ds.targets[k].data, ds.graph, ds.targets[k].name, target_dir(dir, k));
  }
  std::ofstream(dir / "ground_truth.json", std::ios::binary) << ds.truth.to_json();
  std::ofstream(dir / "synth.cfg", std::ios::binary) << cfg.to_kv().to_text();
}

// ---------------------------------------------------------------------------
// Recovery

namespace {

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

double ranking_auc(const std::vector<double>& pos, const std::vector<double>& neg) {
  if (pos.empty() || neg.empty()) return 0.5;
  double wins = 0.0;
  for (double p : pos) {
    for (double n : neg) wins += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
  }
  return wins / static_cast<double>(pos.size() * neg.size());
}

}  // namespace

RecoveryReport recovery_report(const KnowledgeGraph& graph, const ParamStore& params,
                               const TrainConfig& cfg, const GroundTruth& truth) {
  const DenseMatrix& exemplars = params.value(kExemplarBank);
  const DenseMatrix& intents = params.value(kIntentBank);
  const std::size_t n = exemplars.rows();
  const std::size_t m = intents.rows();
  const std::size_t c = truth.c_exemplar;
  const std::size_t ci = truth.c_intent;
  if (n < c) {
    throw ConfigError("exemplar bank has " + std::to_string(n) + " rows, fewer than the " +
                      std::to_string(c) + " planted clusters");
  }
  EncoderPass pass(graph, cfg.encoder(), params, NeighborPolicy{0, cfg.seed, 0});

  // Item -> exemplar assignment.
  std::vector<std::vector<double>> item_counts(n, std::vector<double>(c, 0.0));
  std::vector<double> cluster_size(c, 0.0);
  for (Index i = 0; i < graph.items.size(); ++i) {
    const std::size_t k = truth.cluster_of_item(graph.items.name(i));
    const Vector h = pass.item(i);
    const std::size_t a = argmax(bank_similarity(h, exemplars));
    item_counts[a][k] += 1.0;
    cluster_size[k] += 1.0;
  }
  RecoveryReport rep;
  double majority = 0.0;
  double total = 0.0;
  for (const auto& row : item_counts) {
    majority += *std::max_element(row.begin(), row.end());
    total += std::accumulate(row.begin(), row.end(), 0.0);
  }
  rep.purity = total > 0.0 ? majority / total : 0.0;

  // User -> intent slot assignment by dominant planted intent.
  std::vector<std::vector<double>> user_counts(m, std::vector<double>(ci, 0.0));
  std::vector<double> intent_size(ci, 0.0);
  std::unordered_map<std::string, std::size_t> dominant;
  for (const auto& [name, mix] : truth.user_intents) dominant.emplace(name, mix.dominant());
  for (Index u = 0; u < graph.users.size(); ++u) {
    const auto it = dominant.find(graph.users.name(u));
    if (it == dominant.end()) continue;
    const std::span<const double> h = pass.user(u);
    if (norm2(h) == 0.0) continue;
    const std::size_t b = argmax(bank_similarity(h, intents));
    user_counts[b][it->second] += 1.0;
    intent_size[it->second] += 1.0;
  }

  const DenseMatrix zhat = cfg.use_gates
                               ? deterministic_gates(params.value(kGateLogAlpha), cfg.hard_concrete)
                               : DenseMatrix(n, m, 1.0);
  rep.active_gates = count_active_gates(zhat);
  rep.cluster_intent_gates.assign(c, std::vector<double>(ci, 0.0));
  std::vector<double> pos, neg;
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t j = 0; j < ci; ++j) {
      double gkj = 0.0;
      for (std::size_t a = 0; a < n; ++a) {
        if (item_counts[a][k] == 0.0) continue;
        const double q = item_counts[a][k] / cluster_size[k];
        for (std::size_t b = 0; b < m; ++b) {
          if (user_counts[b][j] == 0.0) continue;
          gkj += q * (user_counts[b][j] / intent_size[j]) * zhat(a, b);
        }
      }
      rep.cluster_intent_gates[k][j] = gkj;
      (truth.mask[k][j] == 1 ? pos : neg).push_back(gkj);
    }
  }
  rep.path_auc = ranking_auc(pos, neg);
  return rep;
}

ParamStore oracle_params(const KnowledgeGraph& graph, const TrainConfig& cfg,
                         const GroundTruth& truth) {
  const std::size_t c = truth.c_exemplar;
  const std::size_t ci = truth.c_intent;
  if (cfg.dim < c) throw ConfigError("oracle parameters need dim >= c_exemplar");
  ParamStore p = init_model_params(graph, cfg);
  if (p.contains(kFeatProj)) p.value(kFeatProj).fill(0.0);
  DenseMatrix& ent = p.value(kEntityEmb);
  ent.fill(0.0);
  for (Index e = 0; e < graph.entities.size(); ++e) {
    ent(e, truth.cluster_of_entity(graph.entities.name(e))) = kCentroidScale;
  }
  if (p.contains(kUserEmb)) p.value(kUserEmb).fill(0.0);

  const double scale = 5.0;
  DenseMatrix& ex = p.value(kExemplarBank);
  ex.fill(0.0);
  for (std::size_t a = 0; a < ex.rows(); ++a) ex(a, a % c) = scale;
  DenseMatrix& in = p.value(kIntentBank);
  in.fill(0.0);
  for (std::size_t b = 0; b < in.rows(); ++b) {
    const std::size_t j = b % ci;
    double allowed = 0.0;
    for (std::size_t k = 0; k < c; ++k) allowed += truth.mask[k][j];
    for (std::size_t k = 0; k < c; ++k) {
      if (truth.mask[k][j] == 1) in(b, k) = scale / std::sqrt(allowed);
    }
  }
  DenseMatrix& la = p.value(kGateLogAlpha);
  DenseMatrix& w = p.value(kPathWeight);
  for (std::size_t a = 0; a < la.rows(); ++a) {
    for (std::size_t b = 0; b < la.cols(); ++b) {
      const bool open = truth.mask[a % c][b % ci] == 1;
      la(a, b) = open ? 8.0 : -8.0;
      w(a, b) = open ? 1.0 : 0.0;
    }
  }
  p.round_to_precision();
  return p;
}

}  // namespace hier
