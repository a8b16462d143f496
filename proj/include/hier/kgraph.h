#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "hier/numerics.h"

namespace hier {

using Index = std::uint32_t;

// Opaque string ids mapped to dense indices in first-seen order.
class IdTable {
 public:
  Index intern(std::string_view name);
  std::optional<Index> find(std::string_view name) const;
  const std::string& name(Index i) const { return names_[i]; }
  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }

  bool operator==(const IdTable& other) const { return names_ == other.names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, Index> index_;
};

struct Triple {
  Index head;
  Index relation;
  Index tail;
  bool operator==(const Triple&) const = default;
};

struct Interaction {
  Index domain;
  Index user;
  Index item;
  int label;  // 0 or 1
  std::int64_t timestamp;
  bool operator==(const Interaction&) const = default;
};

// Entities with d0-dim features, entity-entity triples, item->entity links
// and per-domain labelled interactions. Immutable once built.
class KnowledgeGraph {
 public:
  IdTable entities;
  IdTable relations;
  IdTable items;
  IdTable users;
  IdTable domains;

  DenseMatrix features;            // |entities| x d0; zero rows where missing
  std::vector<bool> has_feature;   // false -> row was missing in the input
  std::vector<Triple> triples;     // deduplicated, first-seen order
  std::vector<std::vector<Index>> item_entities;
  std::vector<Interaction> interactions;

  std::size_t feature_dim() const { return features.cols(); }

  // Recomputes adjacency after the raw tables change.
  void build_indices();

  // Undirected, deduplicated entity-entity neighbours (relations ignored).
  std::span<const Index> entity_neighbors(Index e) const { return entity_adj_[e]; }

  // Multiset union of the entities of every item `u` labelled positively.
  // Unknown or cold users yield an empty span.
  std::span<const Index> user_entity_neighbors(Index u) const;
  std::span<const Index> user_positive_items(Index u) const;

  bool operator==(const KnowledgeGraph& other) const;

 private:
  std::vector<std::vector<Index>> entity_adj_;
  std::vector<std::vector<Index>> user_entities_;
  std::vector<std::vector<Index>> user_items_;
};

struct DatasetPaths {
  std::filesystem::path entities;
  std::filesystem::path triples;
  std::filesystem::path item_entities;
  std::filesystem::path interactions;

  static DatasetPaths in_dir(const std::filesystem::path& dir);
};

struct IngestReport {
  std::size_t entities = 0;
  std::size_t triples = 0;
  std::size_t duplicate_triples = 0;
  std::size_t items = 0;
  std::size_t interactions = 0;
  std::size_t users = 0;
  std::size_t missing_features = 0;
  std::vector<std::string> warnings;
};

// Throws DataError with `file:line` context on malformed or dangling input.
KnowledgeGraph ingest(const DatasetPaths& paths, IngestReport* report = nullptr);

// Writes the four TSV files in index order; ingest(export(G)) == G.
void export_graph(const KnowledgeGraph& graph, const std::filesystem::path& dir);

// Parsing helpers shared with the transfer and synth modules.
std::vector<std::string_view> split(std::string_view s, char sep);
std::vector<std::string> read_lines(const std::filesystem::path& path);

enum class NodeKind : std::uint64_t { kEntity = 1, kUser = 2 };

struct NeighborSample {
  Index center = 0;
  int hop = 0;
  std::vector<Index> neighbors;
};

// Returns all neighbours when cap == 0 or |neighbors| <= cap; otherwise a
// uniform sample of `cap` positions without replacement, a pure function of
// (seed, kind, center, hop, epoch).
NeighborSample sample_neighbors(std::span<const Index> neighbors, NodeKind kind,
                                Index center, int hop, std::size_t cap,
                                std::uint64_t seed, std::uint64_t epoch);

}  // namespace hier
