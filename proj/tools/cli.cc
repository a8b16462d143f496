#include "hier/cli.h"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "hier/config.h"
#include "hier/errors.h"
#include "hier/eval.h"
#include "hier/gates.h"
#include "hier/gradient_suite.h"
#include "hier/kgraph.h"
#include "hier/micro.h"
#include "hier/param_store.h"
#include "hier/rng.h"
#include "hier/synth.h"
#include "hier/train.h"
#include "hier/transfer.h"
#include "json.hpp"

#ifndef HIER_VERSION
#define HIER_VERSION "0.0.0"
#endif

namespace hier {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

constexpr double kGradTolerance = 1e-5;

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;
};

// Module key sets a config file may mention.
const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = [] {
    std::set<std::string> k;
    for (const auto* list : {&TrainConfig::keys(), &SynthConfig::keys(), &HeadConfig::keys(),
                             &EvalConfig::keys()}) {
      k.insert(list->begin(), list->end());
    }
    return k;
  }();
  return keys;
}

KeyValues gather_config(const Common& c) {
  KeyValues kv = c.config.empty() ? KeyValues{} : KeyValues::load(c.config);
  for (const auto& s : c.sets) kv.apply_override(s);
  if (c.seed) kv.set("seed", std::to_string(*c.seed));
  for (const auto& [key, v] : kv.entries()) {
    if (!known_keys().count(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  return kv;
}

KeyValues subset(const KeyValues& kv, const std::vector<std::string>& keys) {
  KeyValues out;
  for (const auto& [key, v] : kv.entries()) {
    if (std::find(keys.begin(), keys.end(), key) != keys.end()) out.set(key, v);
  }
  return out;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct Manifest {
  std::string command;
  std::vector<std::string> args;
  KeyValues config;
  std::vector<std::pair<std::string, std::string>> inputs;
  std::vector<std::string> outputs;

  void write(const fs::path& dir) const {
    ojson j;
    j["command"] = command;
    j["args"] = args;
    j["version"] = HIER_VERSION;
    const std::string* seed = config.find("seed");
    j["seed"] = seed ? *seed : "";
    const std::string text = config.to_text();
    j["config_hash"] = hex64(fnv1a64(text));
    ojson cfg = ojson::object();
    for (const auto& [k, v] : config.entries()) cfg[k] = v;
    j["config"] = cfg;
    ojson in = ojson::object();
    for (const auto& [k, v] : inputs) in[k] = v;
    j["inputs"] = in;
    j["outputs"] = outputs;
    j["timestamp"] = utc_now();
    fs::create_directories(dir);
    std::ofstream(dir / "run_manifest.json", std::ios::binary) << j.dump(1) << '\n';
  }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path.string() + ": cannot write");
  out << text;
}

void require_dir(const std::string& flag, const std::string& path) {
  if (path.empty()) throw ConfigError(flag + " is required");
  if (!fs::is_directory(path)) throw DataError(flag + " " + path + ": not a directory");
}

KnowledgeGraph load_graph(const std::string& dir, std::ostream& out) {
  IngestReport rep;
  KnowledgeGraph g = ingest(DatasetPaths::in_dir(dir), &rep);
  out << "ingested " << rep.entities << " entities, " << rep.triples << " triples, " << rep.items
      << " items, " << rep.users << " users, " << rep.interactions << " interactions\n";
  for (const auto& w : rep.warnings) out << "warning: " << w << '\n';
  return g;
}

std::string escape(std::string s) {
  std::string out;
  for (char ch : s) {
    if (ch == '"' || ch == '\\') out += '\\';
    out += ch == '\n' ? ' ' : ch;
  }
  return out;
}

int fail(std::ostream& err, const char* kind, const std::string& msg, int code) {
  err << "error: kind=" << kind << " msg=\"" << escape(msg) << "\"\n";
  return code;
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_gen_synth(const Common& c, Manifest& m, std::ostream& out) {
  const SynthConfig cfg = SynthConfig::from_kv(subset(gather_config(c), SynthConfig::keys()));
  m.config = cfg.to_kv();
  const SynthDataset ds = generate(cfg);
  write_dataset(ds, cfg, c.out);
  out << "wrote " << ds.graph.items.size() << " source items, " << ds.graph.interactions.size()
      << " interactions and " << ds.targets.size() << " target domain(s) to " << c.out << '\n';
  m.outputs = {"entities.tsv", "triples.tsv", "item_entities.tsv", "interactions.tsv",
               "ground_truth.json", "synth.cfg"};
  for (std::size_t k = 0; k < ds.targets.size(); ++k) {
    m.outputs.push_back(target_dir("", k).string());
  }
  return kExitOk;
}

int cmd_pretrain(const Common& c, const std::string& data, Manifest& m, std::ostream& out) {
  const TrainConfig cfg = TrainConfig::from_kv(subset(gather_config(c), TrainConfig::keys()));
  m.config = cfg.to_kv();
  m.inputs = {{"data", data}};
  require_dir("--data", data);
  const KnowledgeGraph g = load_graph(data, out);
  const PretrainResult r = pretrain(g, cfg, c.out);
  for (std::size_t e = 0; e < r.log.epoch_mean_loss.size(); ++e) {
    out << "epoch " << e << " mean L_PT " << format_real(r.log.epoch_mean_loss[e]) << '\n';
  }
  m.outputs = {"checkpoint", "checkpoints", "train_log.tsv"};
  return kExitOk;
}

struct TargetInputs {
  std::string data;
  std::string target;
  std::string checkpoint;
};

std::string target_or_default(const TargetInputs& in) {
  return in.target.empty() ? (fs::path(in.data) / "target").string() : in.target;
}

int cmd_finetune(const Common& c, const TargetInputs& in, Manifest& m, std::ostream& out) {
  const HeadConfig hc = HeadConfig::from_kv(subset(gather_config(c), HeadConfig::keys()));
  m.config = hc.to_kv();
  const std::string target = target_or_default(in);
  m.inputs = {{"data", in.data}, {"target", target}, {"checkpoint", in.checkpoint}};
  require_dir("--data", in.data);
  require_dir("--target", target);
  require_dir("--checkpoint", in.checkpoint);
  const KnowledgeGraph g = load_graph(in.data, out);
  const Checkpoint ck = load_checkpoint(in.checkpoint);
  const TargetDomainData t = load_target(target, g);
  const FinetuneResult r = finetune(g, ck, t, hc);
  for (const auto& w : r.warnings) out << "warning: " << w << '\n';
  for (std::size_t e = 0; e < r.epoch_loss.size(); ++e) {
    out << "epoch " << e << " loss " << format_real(r.epoch_loss[e]) << '\n';
  }
  save_head(r, hc, c.out);
  m.outputs = {"head", "vocab.json"};
  if (r.intents) m.outputs.push_back("intent_bank");
  return kExitOk;
}

void report_metrics(const std::vector<MetricRow>& rows, const std::vector<RankingTask>& tasks,
                    std::ostream& out) {
  for (const auto& r : rows) {
    out << "Hit@" << r.k << ' ' << format_real(r.hit) << "  NDCG@" << r.k << ' '
        << format_real(r.ndcg) << '\n';
  }
  out << "random Hit@10 " << format_real(random_hit_at_10(tasks)) << " over " << tasks.size()
      << " tasks\n";
}

int cmd_eval(const Common& c, const TargetInputs& in, const std::string& head_dir,
             const std::string& truth_path, bool zeroshot_only, Manifest& m, std::ostream& out) {
  const EvalConfig ecfg = EvalConfig::from_kv(subset(gather_config(c), EvalConfig::keys()));
  m.config = ecfg.to_kv();
  const std::string target = target_or_default(in);
  m.inputs = {{"data", in.data}, {"target", target}, {"checkpoint", in.checkpoint}};
  if (!head_dir.empty()) m.inputs.emplace_back("head", head_dir);
  if (!truth_path.empty()) m.inputs.emplace_back("truth", truth_path);
  require_dir("--data", in.data);
  require_dir("--target", target);
  require_dir("--checkpoint", in.checkpoint);
  const KnowledgeGraph g = load_graph(in.data, out);
  const Checkpoint ck = load_checkpoint(in.checkpoint);
  const TrainConfig cfg = TrainConfig::from_kv(ck.config);
  const TargetDomainData t = load_target(target, g);
  const TargetEncodings enc = encode_target(g, ck.params, cfg, t);
  for (const auto& w : enc.warnings) out << "warning: " << w << '\n';
  const std::vector<RankingTask> tasks = build_tasks(t, ecfg);

  std::optional<LoadedHead> head;
  if (!head_dir.empty()) {
    require_dir("--head", head_dir);
    head = load_head(head_dir);
  }
  const Scorer scorer =
      head ? finetuned_scorer(enc, head->head, head->intents ? &*head->intents : nullptr,
                              head->vocab, t)
           : zeroshot_scorer(enc);
  const std::vector<MetricRow> rows = evaluate(tasks, scorer, ecfg.ks);
  fs::create_directories(c.out);
  write_text(fs::path(c.out) / "metrics.tsv", metrics_tsv(rows));
  m.outputs = {"metrics.tsv"};
  report_metrics(rows, tasks, out);

  if (zeroshot_only) {
    std::ostringstream s;
    s << "user\titem\tscore\n";
    for (const auto& task : tasks) {
      s << t.users.name(task.user) << '\t' << t.items.name(task.positive) << '\t'
        << format_real(scorer(task.user, task.positive)) << '\n';
      for (Index i : task.negatives) {
        s << t.users.name(task.user) << '\t' << t.items.name(i) << '\t'
          << format_real(scorer(task.user, i)) << '\n';
      }
    }
    write_text(fs::path(c.out) / "scores.tsv", s.str());
    m.outputs.push_back("scores.tsv");
  }
  if (!truth_path.empty()) {
    const GroundTruth truth = GroundTruth::load(truth_path);
    const RecoveryReport rep = recovery_report(g, ck.params, cfg, truth);
    std::ostringstream s;
    s << "purity\t" << format_real(rep.purity) << "\npath_auc\t" << format_real(rep.path_auc)
      << "\nactive_gates\t" << rep.active_gates << '\n';
    for (std::size_t k = 0; k < rep.cluster_intent_gates.size(); ++k) {
      s << "cluster_" << k;
      for (double v : rep.cluster_intent_gates[k]) s << '\t' << format_real(v);
      s << '\n';
    }
    write_text(fs::path(c.out) / "recovery.tsv", s.str());
    out << s.str();
    m.outputs.push_back("recovery.tsv");
  }
  return kExitOk;
}

int cmd_gradcheck(const Common& c, const std::string& scale, Manifest& m, std::ostream& out) {
  if (scale != "micro") throw ConfigError("gradcheck supports --scale micro only");
  const KeyValues kv = gather_config(c);
  MicroOptions opts;
  if (const std::string* s = kv.find("seed")) opts.seed = static_cast<std::uint64_t>(parse_int("seed", *s));
  m.config = kv;
  MicroInstance mi = micro_instance(opts);
  std::vector<TermCheck> checks = pretrain_gradient_checks(mi);
  checks.push_back(finetune_gradient_check(mi));
  double worst = 0.0;
  out << "term\tslice\tmax_rel_error\n";
  for (const auto& t : checks) {
    for (const auto& e : t.errors) {
      out << t.term << '\t' << e.name << '\t' << format_real(e.max_rel_error) << '\n';
    }
    worst = std::max(worst, t.max_rel_error);
  }
  out << "max_rel_error " << format_real(worst) << (worst < kGradTolerance ? " PASS" : " FAIL")
      << '\n';
  return worst < kGradTolerance ? kExitOk : kExitCheck;
}

int cmd_export_gates(const Common& c, const std::string& checkpoint, Manifest& m,
                     std::ostream& out) {
  m.inputs = {{"checkpoint", checkpoint}};
  require_dir("--checkpoint", checkpoint);
  const Checkpoint ck = load_checkpoint(checkpoint);
  const TrainConfig cfg = TrainConfig::from_kv(ck.config);
  m.config = cfg.to_kv();
  const DenseMatrix& la = ck.params.value(kGateLogAlpha);
  const DenseMatrix z =
      cfg.use_gates ? deterministic_gates(la, cfg.hard_concrete) : DenseMatrix(la.rows(), la.cols(), 1.0);
  std::ostringstream s;
  s << "exemplar";
  for (std::size_t j = 0; j < z.cols(); ++j) s << "\tintent_" << j;
  s << '\n';
  const std::size_t active = count_active_gates(z);
  for (std::size_t a = 0; a < z.rows(); ++a) {
    s << a;
    for (std::size_t j = 0; j < z.cols(); ++j) {
      s << '\t' << format_real(z(a, j));
    }
    s << '\n';
  }
  fs::create_directories(c.out);
  write_text(fs::path(c.out) / "gates.tsv", s.str());
  m.outputs = {"gates.tsv"};
  out << active << " of " << z.size() << " gates active\n";
  return kExitOk;
}

void add_common(CLI::App* app, Common& c, bool out_required) {
  app->add_option("--config", c.config, "key = value config file");
  app->add_option("--set", c.sets, "override, key=value (repeatable)");
  app->add_option("--seed", c.seed, "shortcut for --set seed=N");
  auto* o = app->add_option("--out", c.out, "output directory");
  if (out_required) o->required();
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"hier: knowledge-graph bridged cross-domain recommender pretraining"};
  app.require_subcommand(1);
  app.set_version_flag("--version", HIER_VERSION);

  Common common;
  std::string data, head_dir, truth, scale = "micro";
  TargetInputs tin;

  auto* gen = app.add_subcommand("gen-synth", "generate a synthetic dataset with planted structure");
  add_common(gen, common, true);
  auto* pre = app.add_subcommand("pretrain", "pretrain on a source graph");
  add_common(pre, common, true);
  pre->add_option("--data", data, "source dataset directory")->required();
  auto* ft = app.add_subcommand("finetune", "fine-tune the transfer head on a target domain");
  add_common(ft, common, true);
  auto* zs = app.add_subcommand("zeroshot", "zero-shot scores and metrics on a target domain");
  add_common(zs, common, true);
  auto* ev = app.add_subcommand("eval", "ranking metrics on a target domain");
  add_common(ev, common, true);
  for (auto* sub : {ft, zs, ev}) {
    sub->add_option("--data", tin.data, "source dataset directory")->required();
    sub->add_option("--target", tin.target, "target directory (default <data>/target)");
    sub->add_option("--checkpoint", tin.checkpoint, "pretrained checkpoint directory")->required();
  }
  ev->add_option("--head", head_dir, "fine-tuned head directory (zero-shot when absent)");
  ev->add_option("--truth", truth, "ground_truth.json for a planted-recovery report");
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  add_common(gc, common, false);
  gc->add_option("--scale", scale, "instance size (micro)");
  auto* eg = app.add_subcommand("export-gates", "write the deterministic gate matrix");
  add_common(eg, common, true);
  eg->add_option("--checkpoint", tin.checkpoint, "checkpoint directory")->required();

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << HIER_VERSION << '\n';
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    return fail(err, "config", e.what(), kExitConfig);
  }

  CLI::App* sub = app.get_subcommands().front();
  Manifest m;
  m.command = sub->get_name();
  m.args = args;
  if (common.out.empty()) common.out = ".";
  try {
    int code = kExitOk;
    if (sub == gen) code = cmd_gen_synth(common, m, out);
    else if (sub == pre) code = cmd_pretrain(common, data, m, out);
    else if (sub == ft) code = cmd_finetune(common, tin, m, out);
    else if (sub == zs) code = cmd_eval(common, tin, "", "", true, m, out);
    else if (sub == ev) code = cmd_eval(common, tin, head_dir, truth, false, m, out);
    else if (sub == gc) code = cmd_gradcheck(common, scale, m, out);
    else if (sub == eg) code = cmd_export_gates(common, tin.checkpoint, m, out);
    m.write(common.out);
    if (code == kExitCheck) return fail(err, "check", "gradient check above tolerance", code);
    return code;
  } catch (const ConfigError& e) {
    return fail(err, "config", e.what(), kExitConfig);
  } catch (const DataError& e) {
    return fail(err, "data", e.what(), kExitData);
  } catch (const NumericError& e) {
    return fail(err, "numeric", e.what(), kExitNumeric);
  } catch (const fs::filesystem_error& e) {
    return fail(err, "data", e.what(), kExitData);
  } catch (const std::exception& e) {
    return fail(err, "internal", e.what(), 1);
  }
}

}  // namespace hier
