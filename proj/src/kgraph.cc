#include "hier/kgraph.h"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>
#include <set>
#include <tuple>

#include "hier/config.h"
#include "hier/errors.h"
#include "hier/rng.h"

namespace hier {

Index IdTable::intern(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it != index_.end()) return it->second;
  const auto idx = static_cast<Index>(names_.size());
  names_.emplace_back(name);
  index_.emplace(names_.back(), idx);
  return idx;
}

std::optional<Index> IdTable::find(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

void KnowledgeGraph::build_indices() {
  entity_adj_.assign(entities.size(), {});
  for (const auto& t : triples) {
    if (t.head == t.tail) continue;
    entity_adj_[t.head].push_back(t.tail);
    entity_adj_[t.tail].push_back(t.head);
  }
  for (auto& adj : entity_adj_) {
    std::sort(adj.begin(), adj.end());
    adj.erase(std::unique(adj.begin(), adj.end()), adj.end());
  }
  user_entities_.assign(users.size(), {});
  user_items_.assign(users.size(), {});
  for (const auto& r : interactions) {
    if (r.label != 1) continue;
    user_items_[r.user].push_back(r.item);
    const auto& ents = item_entities[r.item];
    user_entities_[r.user].insert(user_entities_[r.user].end(), ents.begin(), ents.end());
  }
}

std::span<const Index> KnowledgeGraph::user_entity_neighbors(Index u) const {
  if (u >= user_entities_.size()) return {};
  return user_entities_[u];
}

std::span<const Index> KnowledgeGraph::user_positive_items(Index u) const {
  if (u >= user_items_.size()) return {};
  return user_items_[u];
}

bool KnowledgeGraph::operator==(const KnowledgeGraph& o) const {
  return entities == o.entities && relations == o.relations && items == o.items &&
         users == o.users && domains == o.domains && features == o.features &&
         has_feature == o.has_feature && triples == o.triples &&
         item_entities == o.item_entities && interactions == o.interactions;
}

DatasetPaths DatasetPaths::in_dir(const std::filesystem::path& dir) {
  return {dir / "entities.tsv", dir / "triples.tsv", dir / "item_entities.tsv",
          dir / "interactions.tsv"};
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (true) {
    const auto next = s.find(sep, pos);
    if (next == std::string_view::npos) {
      out.push_back(s.substr(pos));
      return out;
    }
    out.push_back(s.substr(pos, next - pos));
    pos = next + 1;
  }
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

namespace {

std::string where(const std::filesystem::path& p, std::size_t line) {
  return p.filename().string() + ":" + std::to_string(line + 1);
}

bool skip(const std::string& line) { return line.empty() || line[0] == '#'; }

}  // namespace

KnowledgeGraph ingest(const DatasetPaths& paths, IngestReport* report) {
  KnowledgeGraph g;
  IngestReport local;
  IngestReport& rep = report ? *report : local;
  rep = IngestReport{};

  // entities.tsv: id<TAB>f1,...,f_d0
  std::vector<std::vector<double>> rows;
  std::size_t dim = 0;
  {
    const auto lines = read_lines(paths.entities);
    for (std::size_t n = 0; n < lines.size(); ++n) {
      if (skip(lines[n])) continue;
      const auto cols = split(lines[n], '\t');
      if (cols.size() > 2 || cols[0].empty()) {
        throw DataError(where(paths.entities, n) + ": expected `entity_id<TAB>features`");
      }
      if (g.entities.find(cols[0])) {
        throw DataError(where(paths.entities, n) + ": duplicate entity " + std::string(cols[0]));
      }
      g.entities.intern(cols[0]);
      std::vector<double> feat;
      if (cols.size() == 2 && !cols[1].empty()) {
        for (auto tok : split(cols[1], ',')) {
          double v = 0.0;
          auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
          if (ec != std::errc() || ptr != tok.data() + tok.size()) {
            throw DataError(where(paths.entities, n) + ": bad feature value `" +
                            std::string(tok) + "`");
          }
          feat.push_back(v);
        }
        if (dim == 0) dim = feat.size();
        if (feat.size() != dim) {
          throw DataError(where(paths.entities, n) + ": feature dimension " +
                          std::to_string(feat.size()) + " != " + std::to_string(dim));
        }
      }
      rows.push_back(std::move(feat));
    }
  }
  g.features = DenseMatrix(rows.size(), dim);
  g.has_feature.assign(rows.size(), false);
  for (std::size_t e = 0; e < rows.size(); ++e) {
    if (rows[e].empty()) {
      ++rep.missing_features;
      rep.warnings.push_back("entity " + g.entities.name(static_cast<Index>(e)) +
                             " has no features; using zeros");
      continue;
    }
    g.has_feature[e] = true;
    std::copy(rows[e].begin(), rows[e].end(), g.features.row(e).begin());
  }

  auto entity_ref = [&](std::string_view id, const std::filesystem::path& p, std::size_t n) {
    auto e = g.entities.find(id);
    if (!e) throw DataError(where(p, n) + ": unknown entity " + std::string(id));
    return *e;
  };

  // triples.tsv: head<TAB>relation<TAB>tail
  {
    std::set<std::tuple<Index, Index, Index>> seen;
    const auto lines = read_lines(paths.triples);
    for (std::size_t n = 0; n < lines.size(); ++n) {
      if (skip(lines[n])) continue;
      const auto cols = split(lines[n], '\t');
      if (cols.size() != 3) {
        throw DataError(where(paths.triples, n) + ": expected `head<TAB>relation<TAB>tail`");
      }
      const Index h = entity_ref(cols[0], paths.triples, n);
      const Index t = entity_ref(cols[2], paths.triples, n);
      const Index r = g.relations.intern(cols[1]);
      if (!seen.insert({h, r, t}).second) {
        ++rep.duplicate_triples;
        continue;
      }
      g.triples.push_back({h, r, t});
    }
  }

  // item_entities.tsv: item<TAB>e1,e2,...
  {
    const auto lines = read_lines(paths.item_entities);
    for (std::size_t n = 0; n < lines.size(); ++n) {
      if (skip(lines[n])) continue;
      const auto cols = split(lines[n], '\t');
      if (cols.size() != 2 || cols[0].empty()) {
        throw DataError(where(paths.item_entities, n) + ": expected `item_id<TAB>e1,e2,...`");
      }
      if (g.items.find(cols[0])) {
        throw DataError(where(paths.item_entities, n) + ": duplicate item " +
                        std::string(cols[0]));
      }
      std::vector<Index> ents;
      if (!cols[1].empty()) {
        for (auto tok : split(cols[1], ',')) ents.push_back(entity_ref(tok, paths.item_entities, n));
      }
      if (ents.empty()) {
        throw DataError(where(paths.item_entities, n) + ": item " + std::string(cols[0]) +
                        " has no entities");
      }
      g.items.intern(cols[0]);
      g.item_entities.push_back(std::move(ents));
    }
  }

  // interactions.tsv: domain<TAB>user<TAB>item<TAB>label<TAB>timestamp
  {
    const auto lines = read_lines(paths.interactions);
    for (std::size_t n = 0; n < lines.size(); ++n) {
      if (skip(lines[n])) continue;
      const auto cols = split(lines[n], '\t');
      if (cols.size() != 5) {
        throw DataError(where(paths.interactions, n) +
                        ": expected `domain<TAB>user<TAB>item<TAB>label<TAB>timestamp`");
      }
      auto item = g.items.find(cols[2]);
      if (!item) throw DataError(where(paths.interactions, n) + ": unknown item " + std::string(cols[2]));
      if (cols[3] != "0" && cols[3] != "1") {
        throw DataError(where(paths.interactions, n) + ": label must be 0 or 1");
      }
      std::int64_t ts = 0;
      auto [ptr, ec] = std::from_chars(cols[4].data(), cols[4].data() + cols[4].size(), ts);
      if (ec != std::errc() || ptr != cols[4].data() + cols[4].size()) {
        throw DataError(where(paths.interactions, n) + ": bad timestamp");
      }
      g.interactions.push_back({g.domains.intern(cols[0]), g.users.intern(cols[1]), *item,
                                cols[3] == "1" ? 1 : 0, ts});
    }
  }

  g.build_indices();
  rep.entities = g.entities.size();
  rep.triples = g.triples.size();
  rep.items = g.items.size();
  rep.interactions = g.interactions.size();
  rep.users = g.users.size();
  return g;
}

void export_graph(const KnowledgeGraph& g, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto paths = DatasetPaths::in_dir(dir);
  {
    std::ofstream out(paths.entities);
    for (std::size_t e = 0; e < g.entities.size(); ++e) {
      out << g.entities.name(static_cast<Index>(e)) << '\t';
      if (g.has_feature[e]) {
        const auto row = g.features.row(e);
        for (std::size_t k = 0; k < row.size(); ++k) {
          if (k) out << ',';
          out << format_real(row[k]);
        }
      }
      out << '\n';
    }
  }
  {
    std::ofstream out(paths.triples);
    for (const auto& t : g.triples) {
      out << g.entities.name(t.head) << '\t' << g.relations.name(t.relation) << '\t'
          << g.entities.name(t.tail) << '\n';
    }
  }
  {
    std::ofstream out(paths.item_entities);
    for (std::size_t i = 0; i < g.items.size(); ++i) {
      out << g.items.name(static_cast<Index>(i)) << '\t';
      const auto& ents = g.item_entities[i];
      for (std::size_t k = 0; k < ents.size(); ++k) {
        if (k) out << ',';
        out << g.entities.name(ents[k]);
      }
      out << '\n';
    }
  }
  {
    std::ofstream out(paths.interactions);
    for (const auto& r : g.interactions) {
      out << g.domains.name(r.domain) << '\t' << g.users.name(r.user) << '\t'
          << g.items.name(r.item) << '\t' << r.label << '\t' << r.timestamp << '\n';
    }
  }
}

NeighborSample sample_neighbors(std::span<const Index> neighbors, NodeKind kind,
                                Index center, int hop, std::size_t cap,
                                std::uint64_t seed, std::uint64_t epoch) {
  NeighborSample out{center, hop, {}};
  if (cap == 0 || neighbors.size() <= cap) {
    out.neighbors.assign(neighbors.begin(), neighbors.end());
    return out;
  }
  Rng rng = Rng(seed, "neighbors")
                .derive({static_cast<std::uint64_t>(kind), center,
                         static_cast<std::uint64_t>(hop), epoch});
  // Partial Fisher-Yates over positions.
  std::vector<std::size_t> pos(neighbors.size());
  std::iota(pos.begin(), pos.end(), std::size_t{0});
  out.neighbors.reserve(cap);
  for (std::size_t k = 0; k < cap; ++k) {
    const std::size_t j = k + rng.below(pos.size() - k);
    std::swap(pos[k], pos[j]);
    out.neighbors.push_back(neighbors[pos[k]]);
  }
  return out;
}

}  // namespace hier
