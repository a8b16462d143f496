#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <tuple>

#include "doctest.h"
#include "hier/errors.h"
#include "hier/kgraph.h"

using namespace hier;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::path(HIER_TEST_TMP) / "kgraph" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void put(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

struct Files {
  std::string entities = "e1\t1,0\ne2\t0,1\ne3\t1,1\n";
  std::string triples = "e1\tr\te2\ne2\tr\te3\n";
  std::string item_entities = "i1\te1,e2\ni2\te2,e3\n";
  std::string interactions =
      "d1\tu1\ti1\t1\t10\n"
      "d1\tu1\ti2\t1\t11\n"
      "d1\tu2\ti2\t0\t12\n"
      "d2\tu3\ti1\t0\t13\n";
};

fs::path write_files(const std::string& name, const Files& f) {
  const fs::path dir = scratch(name);
  put(dir / "entities.tsv", f.entities);
  put(dir / "triples.tsv", f.triples);
  put(dir / "item_entities.tsv", f.item_entities);
  put(dir / "interactions.tsv", f.interactions);
  return dir;
}

std::string error_of(const fs::path& dir) {
  try {
    ingest(DatasetPaths::in_dir(dir));
  } catch (const DataError& e) {
    return e.what();
  }
  return {};
}

std::multiset<std::string> names(const KnowledgeGraph& g, std::span<const Index> ids) {
  std::multiset<std::string> out;
  for (Index e : ids) out.insert(g.entities.name(e));
  return out;
}

}  // namespace

TEST_CASE("ingest keeps exact counts") {
  IngestReport rep;
  const KnowledgeGraph g = ingest(DatasetPaths::in_dir(write_files("counts", {})), &rep);
  CHECK(g.entities.size() == 3);
  CHECK(g.triples.size() == 2);
  CHECK(g.items.size() == 2);
  CHECK(g.interactions.size() == 4);
  CHECK(g.users.size() == 3);
  CHECK(g.domains.size() == 2);
  CHECK(g.feature_dim() == 2);
  CHECK(rep.entities == 3);
  CHECK(rep.triples == 2);
  CHECK(rep.interactions == 4);
  CHECK(rep.duplicate_triples == 0);
  CHECK(g.features(2, 0) == 1.0);
  CHECK(g.interactions[2].label == 0);
  CHECK(g.interactions[3].timestamp == 13);
}

TEST_CASE("dangling references name the offending id and line") {
  Files f;
  f.item_entities = "i1\te1,e2\ni2\te2,e99\n";
  const std::string msg = error_of(write_files("dangling_item", f));
  CHECK(msg.find("unknown entity e99") != std::string::npos);
  CHECK(msg.find("item_entities.tsv:2") != std::string::npos);

  Files t;
  t.triples = "e1\tr\te2\ne7\tr\te3\n";
  CHECK(error_of(write_files("dangling_triple", t)).find("unknown entity e7") !=
        std::string::npos);

  Files l;
  l.interactions = "d1\tu1\ti1\t2\t10\n";
  CHECK(error_of(write_files("bad_label", l)).find("label") != std::string::npos);

  Files u;
  u.interactions = "d1\tu1\ti9\t1\t10\n";
  CHECK(error_of(write_files("unknown_item", u)).find("unknown item i9") != std::string::npos);
}

TEST_CASE("duplicate triples are dropped and counted like a set") {
  Files f;
  f.triples = "e1\tr\te2\ne2\tr\te3\ne1\tr\te2\ne1\ts\te2\ne2\tr\te3\ne3\tr\te1\n";
  IngestReport rep;
  const KnowledgeGraph g = ingest(DatasetPaths::in_dir(write_files("dups", f)), &rep);

  std::set<std::tuple<std::string, std::string, std::string>> oracle;
  std::size_t lines = 0;
  for (const auto& line : {std::tuple{"e1", "r", "e2"}, {"e2", "r", "e3"}, {"e1", "r", "e2"},
                           {"e1", "s", "e2"}, {"e2", "r", "e3"}, {"e3", "r", "e1"}}) {
    oracle.emplace(std::get<0>(line), std::get<1>(line), std::get<2>(line));
    ++lines;
  }
  CHECK(g.triples.size() == oracle.size());
  CHECK(rep.duplicate_triples == lines - oracle.size());
  std::set<std::tuple<std::string, std::string, std::string>> got;
  for (const Triple& t : g.triples) {
    got.emplace(g.entities.name(t.head), g.relations.name(t.relation), g.entities.name(t.tail));
  }
  CHECK(got == oracle);
}

TEST_CASE("missing feature rows become zero with a warning") {
  Files f;
  f.entities = "e1\t1,0\ne2\t\ne3\t1,1\n";
  IngestReport rep;
  const KnowledgeGraph g = ingest(DatasetPaths::in_dir(write_files("missing", f)), &rep);
  CHECK(rep.missing_features == 1);
  CHECK_FALSE(rep.warnings.empty());
  CHECK_FALSE(g.has_feature[1]);
  CHECK(g.features(1, 0) == 0.0);
  CHECK(g.features(1, 1) == 0.0);
}

TEST_CASE("user entity neighbours") {
  Files f;
  f.item_entities = "i1\te1,e2\ni2\te2,e3\ni3\te3\n";
  f.interactions =
      "d1\tu1\ti1\t1\t1\n"
      "d1\tu2\ti1\t1\t1\n"
      "d1\tu2\ti2\t1\t2\n"
      "d1\tu3\ti1\t0\t3\n"
      "d1\tu2\ti3\t0\t4\n";
  const KnowledgeGraph g = ingest(DatasetPaths::in_dir(write_files("user_nbrs", f)));
  const Index u1 = *g.users.find("u1"), u2 = *g.users.find("u2"), u3 = *g.users.find("u3");

  CHECK(names(g, g.user_entity_neighbors(u1)) == std::multiset<std::string>{"e1", "e2"});
  CHECK(names(g, g.user_entity_neighbors(u2)) ==
        std::multiset<std::string>{"e1", "e2", "e2", "e3"});
  CHECK(g.user_entity_neighbors(u3).empty());
  CHECK(g.user_entity_neighbors(Index{999}).empty());
}

TEST_CASE("negative records never reach user neighbours") {
  Files a;
  a.item_entities = "i1\te1\ni2\te2\n";
  a.interactions = "d\tu\ti1\t1\t1\nd\tu\ti2\t0\t2\n";
  Files b = a;
  b.item_entities = "i1\te1\ni2\te3,e2\n";
  const KnowledgeGraph ga = ingest(DatasetPaths::in_dir(write_files("neg_a", a)));
  const KnowledgeGraph gb = ingest(DatasetPaths::in_dir(write_files("neg_b", b)));
  const Index ua = *ga.users.find("u"), ub = *gb.users.find("u");
  CHECK(names(ga, ga.user_entity_neighbors(ua)) == names(gb, gb.user_entity_neighbors(ub)));
}

TEST_CASE("entity neighbours are undirected and deduplicated") {
  Files f;
  f.triples = "e1\tr\te2\ne2\ts\te1\ne2\tr\te3\n";
  const KnowledgeGraph g = ingest(DatasetPaths::in_dir(write_files("adj", f)));
  const Index e2 = *g.entities.find("e2");
  CHECK(names(g, g.entity_neighbors(e2)) == std::multiset<std::string>{"e1", "e3"});
  CHECK(names(g, g.entity_neighbors(*g.entities.find("e3"))) ==
        std::multiset<std::string>{"e2"});
}

TEST_CASE("export then ingest is the identity") {
  Files f;
  f.triples += "e1\tr\te2\n";
  const KnowledgeGraph g = ingest(DatasetPaths::in_dir(write_files("rt_src", f)));
  const fs::path out = scratch("rt_out");
  export_graph(g, out);
  const KnowledgeGraph back = ingest(DatasetPaths::in_dir(out));
  CHECK(back == g);
  const fs::path out2 = scratch("rt_out2");
  export_graph(back, out2);
  CHECK(ingest(DatasetPaths::in_dir(out2)) == g);
}

TEST_CASE("sample_neighbors small fan-out returns everything") {
  const std::vector<Index> nbrs = {4, 8, 15};
  const NeighborSample s = sample_neighbors(nbrs, NodeKind::kEntity, 3, 1, 10, 42, 0);
  CHECK(s.neighbors == nbrs);
  CHECK(s.center == 3);
  CHECK(s.hop == 1);
  CHECK(sample_neighbors(nbrs, NodeKind::kEntity, 3, 1, 0, 42, 0).neighbors == nbrs);
}

TEST_CASE("sample_neighbors is deterministic, duplicate free and keyed by its inputs") {
  std::vector<Index> nbrs(100);
  for (Index k = 0; k < 100; ++k) nbrs[k] = 1000 + k;
  const auto a = sample_neighbors(nbrs, NodeKind::kUser, 7, 0, 10, 5, 3);
  const auto b = sample_neighbors(nbrs, NodeKind::kUser, 7, 0, 10, 5, 3);
  CHECK(a.neighbors == b.neighbors);
  CHECK(a.neighbors.size() == 10);
  CHECK(std::set<Index>(a.neighbors.begin(), a.neighbors.end()).size() == 10);
  for (Index x : a.neighbors) CHECK(std::find(nbrs.begin(), nbrs.end(), x) != nbrs.end());

  CHECK(sample_neighbors(nbrs, NodeKind::kUser, 7, 0, 10, 5, 4).neighbors != a.neighbors);
  CHECK(sample_neighbors(nbrs, NodeKind::kUser, 7, 1, 10, 5, 3).neighbors != a.neighbors);
  CHECK(sample_neighbors(nbrs, NodeKind::kUser, 8, 0, 10, 5, 3).neighbors != a.neighbors);
  CHECK(sample_neighbors(nbrs, NodeKind::kEntity, 7, 0, 10, 5, 3).neighbors != a.neighbors);
  CHECK(sample_neighbors(nbrs, NodeKind::kUser, 7, 0, 10, 6, 3).neighbors != a.neighbors);
}

TEST_CASE("sample_neighbors is uniform over epochs") {
  std::vector<Index> nbrs(100);
  for (Index k = 0; k < 100; ++k) nbrs[k] = k;
  std::vector<double> freq(100, 0.0);
  const std::size_t trials = 100000;
  for (std::uint64_t epoch = 0; epoch < trials; ++epoch) {
    for (Index x : sample_neighbors(nbrs, NodeKind::kEntity, 11, 1, 10, 3, epoch).neighbors) {
      freq[x] += 1.0;
    }
  }
  for (double f : freq) CHECK(std::abs(f / trials - 0.10) <= 0.01);
}
