#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "doctest.h"
#include "hier/cli.h"
#include "json.hpp"

using namespace hier;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::path(HIER_TEST_TMP) / "cli" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Relative path -> contents for every file under `dir`.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return out;
}

nlohmann::json manifest(const fs::path& dir) {
  return nlohmann::json::parse(slurp(dir / "run_manifest.json"));
}

// Small dataset plus a quick pretraining config shared by the cases below.
fs::path small_config(const fs::path& dir) {
  const fs::path cfg = dir / "c.cfg";
  std::ofstream(cfg) << "synth_users = 200\nsynth_items = 90\nsynth_entities = 60\n"
                        "synth_positives_per_user = 5\ndim = 8\nn_exemplars = 6\nn_intents = 4\n"
                        "epochs = 2\nbatch_size = 128\n";
  return cfg;
}

}  // namespace

TEST_CASE("gen-synth, pretrain, finetune and eval produce their artifacts") {
  const fs::path root = scratch("pipeline");
  const std::string cfg = small_config(root).string();
  const std::string data = (root / "data").string(), run_dir = (root / "run").string();

  Run r = run({"gen-synth", "--config", cfg, "--out", data});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(fs::exists(fs::path(data) / "ground_truth.json"));

  r = run({"pretrain", "--config", cfg, "--data", data, "--out", run_dir});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(fs::exists(fs::path(run_dir) / "checkpoint"));
  CHECK(fs::exists(fs::path(run_dir) / "train_log.tsv"));

  const std::string ck = (fs::path(run_dir) / "checkpoint").string();
  const std::string ev = (root / "eval").string();
  r = run({"eval", "--data", data, "--checkpoint", ck, "--truth",
           (fs::path(data) / "ground_truth.json").string(), "--out", ev});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const std::string metrics = slurp(fs::path(ev) / "metrics.tsv");
  CHECK(metrics.rfind("K\thit\tndcg\tn_tasks\n", 0) == 0);
  CHECK(fs::exists(fs::path(ev) / "recovery.tsv"));

  const std::string head = (root / "head").string();
  r = run({"finetune", "--data", data, "--checkpoint", ck, "--set", "ft_epochs=2", "--out", head});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  r = run({"eval", "--data", data, "--checkpoint", ck, "--head", head, "--out", root / "eval_ft"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(fs::exists(root / "eval_ft" / "metrics.tsv"));

  r = run({"zeroshot", "--data", data, "--checkpoint", ck, "--out", root / "zs"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(fs::exists(root / "zs" / "scores.tsv"));

  r = run({"export-gates", "--checkpoint", ck, "--out", root / "gates"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(slurp(root / "gates" / "gates.tsv").rfind("exemplar\tintent_0", 0) == 0);

  for (const char* d : {"data", "run", "eval", "head", "eval_ft", "zs", "gates"}) {
    const nlohmann::json m = manifest(root / d);
    CHECK(m.contains("config_hash"));
    CHECK(m.contains("seed"));
    CHECK(m.contains("version"));
    CHECK(m["outputs"].size() > 0);
  }
}

TEST_CASE("unknown flags and keys are config errors") {
  const fs::path root = scratch("errors");
  Run r = run({"gen-synth", "--out", (root / "a").string(), "--bogus"});
  CHECK(r.code == 2);
  CHECK(r.err.rfind("error: kind=config", 0) == 0);
  CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);

  r = run({"gen-synth", "--out", (root / "b").string(), "--set", "synth_userz=10"});
  CHECK(r.code == 2);
  CHECK(r.err.find("synth_userz") != std::string::npos);

  r = run({"frobnicate"});
  CHECK(r.code == 2);

  r = run({"pretrain", "--data", (root / "missing").string(), "--out", (root / "c").string()});
  CHECK(r.code == 3);
  CHECK(r.err.rfind("error: kind=data", 0) == 0);
}

TEST_CASE("malformed input reports file and line") {
  const fs::path root = scratch("malformed");
  const std::string data = (root / "data").string();
  REQUIRE(run({"gen-synth", "--config", small_config(root).string(), "--out", data}).code == 0);
  std::ofstream(fs::path(data) / "triples.tsv", std::ios::app) << "e0\tr0\tnowhere\n";
  const Run r = run({"pretrain", "--data", data, "--out", (root / "run").string()});
  CHECK(r.code == 3);
  CHECK(r.err.find("triples.tsv:") != std::string::npos);
}

TEST_CASE("gradcheck on the micro instance passes") {
  const fs::path root = scratch("gradcheck");
  const Run r = run({"gradcheck", "--scale", "micro", "--out", root.string()});
  CHECK_MESSAGE(r.code == 0, r.out);
  CHECK(r.out.find(" PASS") != std::string::npos);
  CHECK(run({"gradcheck", "--scale", "huge", "--out", root.string()}).code == 2);
}

TEST_CASE("repeated pretrain runs match apart from timestamps and leave inputs untouched") {
  const fs::path root = scratch("repeat");
  const std::string cfg = small_config(root).string();
  const std::string data = (root / "data").string();
  REQUIRE(run({"gen-synth", "--config", cfg, "--out", data}).code == 0);
  const auto before = snapshot(data);

  const fs::path a = root / "a", b = root / "b";
  REQUIRE(run({"pretrain", "--config", cfg, "--seed", "7", "--data", data, "--out", a.string()}).code == 0);
  REQUIRE(run({"pretrain", "--config", cfg, "--seed", "7", "--data", data, "--out", b.string()}).code == 0);
  CHECK(snapshot(data) == before);

  nlohmann::json ma = manifest(a), mb = manifest(b);
  CHECK(ma["seed"] == "7");
  ma.erase("timestamp");
  mb.erase("timestamp");
  // Output paths differ by construction; everything else must match.
  ma["args"] = mb["args"] = nullptr;
  CHECK(ma == mb);
  auto sa = snapshot(a), sb = snapshot(b);
  sa.erase("run_manifest.json");
  sb.erase("run_manifest.json");
  CHECK(sa == sb);
}

TEST_CASE("a run can be repeated from its manifest alone") {
  const fs::path root = scratch("replay");
  const std::string data = (root / "data").string();
  REQUIRE(run({"gen-synth", "--config", small_config(root).string(), "--out", data}).code == 0);
  const nlohmann::json m = manifest(data);
  std::vector<std::string> args = {m["command"].get<std::string>()};
  for (const auto& [key, value] : m["config"].items()) {
    args.push_back("--set");
    args.push_back(key + "=" + value.get<std::string>());
  }
  const std::string again = (root / "again").string();
  args.insert(args.end(), {"--out", again});
  REQUIRE(run(args).code == 0);
  auto sa = snapshot(data), sb = snapshot(again);
  sa.erase("run_manifest.json");
  sb.erase("run_manifest.json");
  CHECK(sa == sb);
}
