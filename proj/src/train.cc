#include "hier/train.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "hier/errors.h"

namespace hier {

namespace {

std::string precision_name(Precision p) { return p == Precision::kFloat32 ? "32" : "64"; }

std::string mode_name(InfoNceMode m) {
  return m == InfoNceMode::kNegativesOnly ? "negatives_only" : "inclusive";
}

std::size_t parse_size(std::string_view key, std::string_view text) {
  const long long v = parse_int(key, text);
  if (v < 0) throw ConfigError(std::string(key) + " must be >= 0");
  return static_cast<std::size_t>(v);
}

}  // namespace

void TrainConfig::validate() const {
  if (dim == 0) throw ConfigError("dim must be positive");
  if (layers < 0) throw ConfigError("layers must be >= 0");
  if (n_exemplars == 0 || n_intents == 0) throw ConfigError("bank sizes must be positive");
  if (lambda1 < 0.0 || lambda2 < 0.0 || lambda3 < 0.0) {
    throw ConfigError("lambda1, lambda2 and lambda3 must be >= 0");
  }
  contrast().validate();
  hard_concrete.validate();
  if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
  if (!(gate_lr_scale > 0.0)) throw ConfigError("gate_lr_scale must be > 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("adam betas must be in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be > 0");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (k_neg == 0) throw ConfigError("k_neg must be >= 1");
  if (contrast_max_batch < 2) throw ConfigError("contrast_max_batch must be >= 2");
  if (keep_checkpoints == 0) throw ConfigError("keep_checkpoints must be >= 1");
}

KeyValues TrainConfig::to_kv() const {
  KeyValues kv;
  kv.set("dim", std::to_string(dim));
  kv.set("layers", std::to_string(layers));
  kv.set("n_exemplars", std::to_string(n_exemplars));
  kv.set("n_intents", std::to_string(n_intents));
  kv.set("neighbor_cap", std::to_string(neighbor_cap));
  kv.set("learnable_alpha", learnable_alpha ? "true" : "false");
  kv.set("id_free_users", id_free_users ? "true" : "false");
  kv.set("tau", format_real(tau));
  kv.set("lambda1", format_real(lambda1));
  kv.set("lambda2", format_real(lambda2));
  kv.set("lambda3", format_real(lambda3));
  kv.set("infonce_mode", mode_name(infonce_mode));
  kv.set("original_view_loss", original_view_loss ? "true" : "false");
  kv.set("loss_reduction", mean_reduction ? "mean" : "sum");
  kv.set("hc_beta", format_real(hard_concrete.beta));
  kv.set("hc_gamma", format_real(hard_concrete.gamma));
  kv.set("hc_zeta", format_real(hard_concrete.zeta));
  kv.set("gate_init", format_real(gate_init));
  kv.set("path_scale", format_real(path_scale));
  kv.set("nonneg_path_weight", nonneg_path_weight ? "true" : "false");
  kv.set("use_graph", use_graph ? "true" : "false");
  kv.set("use_gates", use_gates ? "true" : "false");
  kv.set("lr", format_real(lr));
  kv.set("gate_lr_scale", format_real(gate_lr_scale));
  kv.set("adam_beta1", format_real(adam_beta1));
  kv.set("adam_beta2", format_real(adam_beta2));
  kv.set("adam_eps", format_real(adam_eps));
  kv.set("batch_size", std::to_string(batch_size));
  kv.set("epochs", std::to_string(epochs));
  kv.set("k_neg", std::to_string(k_neg));
  kv.set("contrast_max_batch", std::to_string(contrast_max_batch));
  kv.set("seed", std::to_string(seed));
  kv.set("deterministic", deterministic ? "true" : "false");
  kv.set("precision", precision_name(precision));
  kv.set("keep_checkpoints", std::to_string(keep_checkpoints));
  return kv;
}

const std::vector<std::string>& TrainConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    const KeyValues kv = TrainConfig{}.to_kv();
    for (const auto& [key, value] : kv.entries()) out.push_back(key);
    return out;
  }();
  return k;
}

TrainConfig TrainConfig::from_kv(const KeyValues& kv) {
  TrainConfig c;
  for (const auto& [key, v] : kv.entries()) {
    if (key == "dim") c.dim = parse_size(key, v);
    else if (key == "layers") c.layers = static_cast<int>(parse_int(key, v));
    else if (key == "n_exemplars") c.n_exemplars = parse_size(key, v);
    else if (key == "n_intents") c.n_intents = parse_size(key, v);
    else if (key == "neighbor_cap") c.neighbor_cap = parse_size(key, v);
    else if (key == "learnable_alpha") c.learnable_alpha = parse_bool(key, v);
    else if (key == "id_free_users") c.id_free_users = parse_bool(key, v);
    else if (key == "tau") c.tau = parse_real(key, v);
    else if (key == "lambda1") c.lambda1 = parse_real(key, v);
    else if (key == "lambda2") c.lambda2 = parse_real(key, v);
    else if (key == "lambda3") c.lambda3 = parse_real(key, v);
    else if (key == "infonce_mode") {
      if (v == "inclusive") c.infonce_mode = InfoNceMode::kPositiveInclusive;
      else if (v == "negatives_only") c.infonce_mode = InfoNceMode::kNegativesOnly;
      else throw ConfigError("infonce_mode must be inclusive or negatives_only, got '" + v + "'");
    }
    else if (key == "original_view_loss") c.original_view_loss = parse_bool(key, v);
    else if (key == "loss_reduction") {
      if (v == "mean") c.mean_reduction = true;
      else if (v == "sum") c.mean_reduction = false;
      else throw ConfigError("loss_reduction must be mean or sum, got '" + v + "'");
    }
    else if (key == "hc_beta") c.hard_concrete.beta = parse_real(key, v);
    else if (key == "hc_gamma") c.hard_concrete.gamma = parse_real(key, v);
    else if (key == "hc_zeta") c.hard_concrete.zeta = parse_real(key, v);
    else if (key == "gate_init") c.gate_init = parse_real(key, v);
    else if (key == "path_scale") c.path_scale = parse_real(key, v);
    else if (key == "nonneg_path_weight") c.nonneg_path_weight = parse_bool(key, v);
    else if (key == "use_graph") c.use_graph = parse_bool(key, v);
    else if (key == "use_gates") c.use_gates = parse_bool(key, v);
    else if (key == "lr") c.lr = parse_real(key, v);
    else if (key == "gate_lr_scale") c.gate_lr_scale = parse_real(key, v);
    else if (key == "adam_beta1") c.adam_beta1 = parse_real(key, v);
    else if (key == "adam_beta2") c.adam_beta2 = parse_real(key, v);
    else if (key == "adam_eps") c.adam_eps = parse_real(key, v);
    else if (key == "batch_size") c.batch_size = parse_size(key, v);
    else if (key == "epochs") c.epochs = parse_size(key, v);
    else if (key == "k_neg") c.k_neg = parse_size(key, v);
    else if (key == "contrast_max_batch") c.contrast_max_batch = parse_size(key, v);
    else if (key == "seed") c.seed = static_cast<std::uint64_t>(parse_size(key, v));
    else if (key == "deterministic") c.deterministic = parse_bool(key, v);
    else if (key == "precision") {
      if (v == "64") c.precision = Precision::kFloat64;
      else if (v == "32") c.precision = Precision::kFloat32;
      else throw ConfigError("precision must be 32 or 64, got '" + v + "'");
    }
    else if (key == "keep_checkpoints") c.keep_checkpoints = parse_size(key, v);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  c.validate();
  return c;
}

EncoderConfig TrainConfig::encoder() const {
  return {dim, use_graph ? layers : 0, learnable_alpha, id_free_users};
}

ContrastConfig TrainConfig::contrast() const { return {tau, lambda1, infonce_mode}; }

ParamStore init_model_params(const KnowledgeGraph& graph, const TrainConfig& cfg,
                             std::vector<std::string>* warnings) {
  cfg.validate();
  ParamStore store;
  auto w = init_encoder_params(store, graph, cfg.encoder(), cfg.seed);
  if (warnings) warnings->insert(warnings->end(), w.begin(), w.end());

  Rng rng(cfg.seed, "init_banks");
  const double bank_std = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
  for (double& x : store.add(kExemplarBank, cfg.n_exemplars, cfg.dim).values()) {
    x = bank_std * rng.normal();
  }
  for (double& x : store.add(kIntentBank, cfg.n_intents, cfg.dim).values()) {
    x = bank_std * rng.normal();
  }
  store.add(kGateLogAlpha, cfg.n_exemplars, cfg.n_intents, cfg.use_gates)
      .fill(cfg.use_gates ? cfg.gate_init : 0.0);
  Rng wrng(cfg.seed, "init_path_weight");
  const double w_std = 1.0 / std::sqrt(static_cast<double>(cfg.n_exemplars * cfg.n_intents));
  for (double& x : store.add(kPathWeight, cfg.n_exemplars, cfg.n_intents).values()) {
    x = w_std * wrng.normal();
    if (cfg.nonneg_path_weight) x = std::abs(x);
  }
  store.add(kPathScale, 1, 1, false).fill(cfg.path_scale);
  store.set_precision(cfg.precision);
  return store;
}

BatchView gather_batch(EncoderPass& pass, std::span<const Example> batch) {
  BatchView v;
  std::unordered_map<Index, Index> user_row, item_row;
  v.records.reserve(batch.size());
  for (const Example& ex : batch) {
    auto [ui, unew] = user_row.try_emplace(ex.user, static_cast<Index>(v.users.size()));
    if (unew) v.users.push_back(ex.user);
    auto [ii, inew] = item_row.try_emplace(ex.item, static_cast<Index>(v.items.size()));
    if (inew) v.items.push_back(ex.item);
    v.records.push_back({ui->second, ii->second, ex.label});
  }
  const std::size_t d = pass.dim();
  v.hu = DenseMatrix(v.users.size(), d);
  v.hi = DenseMatrix(v.items.size(), d);
  for (std::size_t r = 0; r < v.users.size(); ++r) {
    const auto h = pass.user(v.users[r]);
    std::copy(h.begin(), h.end(), v.hu.row(r).begin());
  }
  for (std::size_t r = 0; r < v.items.size(); ++r) {
    const Vector h = pass.item(v.items[r]);
    std::copy(h.begin(), h.end(), v.hi.row(r).begin());
  }
  return v;
}

void scatter_batch_grads(EncoderPass& pass, const BatchView& view, const DenseMatrix& g_users,
                         const DenseMatrix& g_items) {
  for (std::size_t r = 0; r < view.users.size(); ++r) {
    pass.add_user_grad(view.users[r], g_users.row(r));
  }
  for (std::size_t r = 0; r < view.items.size(); ++r) {
    pass.add_item_grad(view.items[r], g_items.row(r));
  }
}

LossParts assemble_pretrain_loss(const KnowledgeGraph& graph, const TrainConfig& cfg,
                                 ParamStore& store, std::span<const Example> batch,
                                 const GateMode& gates, const NeighborPolicy& policy,
                                 bool with_grad) {
  if (batch.empty()) throw NumericError("empty training batch");
  if (with_grad) store.zero_grad();
  const std::size_t d = cfg.dim;

  EncoderPass pass(graph, cfg.encoder(), store, policy);

  const BatchView view = gather_batch(pass, batch);
  const auto& items = view.items;
  const auto& records = view.records;
  const DenseMatrix& hu = view.hu;
  const DenseMatrix& hi = view.hi;

  const DenseMatrix& exemplars = store.value(kExemplarBank);
  const DenseMatrix& intents = store.value(kIntentBank);
  const DenseMatrix& log_alpha = store.value(kGateLogAlpha);
  const DenseMatrix& path_w = store.value(kPathWeight);
  const double kappa = store.value(kPathScale)(0, 0);
  const std::size_t n = exemplars.rows();

  DenseMatrix item_sims(items.size(), n);
  for (std::size_t r = 0; r < items.size(); ++r) {
    const Vector s = exemplar_similarity(hi.row(r), exemplars);
    std::copy(s.begin(), s.end(), item_sims.row(r).begin());
  }

  // Gate realisation: sampled, deterministic, or all-open without gating.
  DenseMatrix z, dz;
  if (!cfg.use_gates) {
    z = DenseMatrix(log_alpha.rows(), log_alpha.cols(), 1.0);
  } else if (gates.kind == GateMode::Kind::kNoise) {
    GateSample g = gates_from_noise(log_alpha, gates.noise, cfg.hard_concrete);
    z = std::move(g.z);
    dz = std::move(g.dz_dlog_alpha);
  } else {
    z = deterministic_gates(log_alpha, cfg.hard_concrete);
    dz = DenseMatrix(z.rows(), z.cols());
    const double span = cfg.hard_concrete.zeta - cfg.hard_concrete.gamma;
    for (std::size_t k = 0; k < z.size(); ++k) {
      const double p = sigmoid(log_alpha.values()[k]);
      const double s = p * span + cfg.hard_concrete.gamma;
      dz.values()[k] = (s > 0.0 && s < 1.0) ? span * p * (1.0 - p) : 0.0;
    }
  }

  // Mean reduction: task / |records| + lambda1 * agreement / (2 |anchors|).
  // loss_ib returns sums, so lambda1 is rescaled and everything is divided
  // by |records| afterwards.
  const ContrastConfig ccfg = cfg.contrast();
  double task_scale = 1.0;
  double agree_scale = 1.0;
  ContrastConfig ib_cfg = ccfg;
  if (cfg.mean_reduction) {
    std::size_t anchors = 0;
    for (std::size_t u = 0; u < hu.rows(); ++u) anchors += norm2(hu.row(u)) > 0.0 ? 1 : 0;
    task_scale = 1.0 / static_cast<double>(records.size());
    if (anchors >= 2) {
      agree_scale = 1.0 / (2.0 * static_cast<double>(anchors));
      ib_cfg.lambda1 = cfg.lambda1 * agree_scale / task_scale;
    }
  }
  IbResult ib =
      loss_ib(records, hu, hi, item_sims, intents, PathTerm{&z, &path_w, kappa}, ib_cfg);
  if (task_scale != 1.0) {
    for (DenseMatrix* m : {&ib.grad_users, &ib.grad_items, &ib.grad_item_sims, &ib.grad_intents,
                           &ib.grad_z, &ib.grad_w}) {
      for (double& x : m->values()) x *= task_scale;
    }
    ib.grad_kappa *= task_scale;
  }

  LossParts parts;
  parts.task = ib.task * task_scale;
  parts.agreement = ib.agreement * agree_scale;

  DenseMatrix g_hu = ib.grad_users;
  DenseMatrix g_hi = ib.grad_items;

  if (cfg.original_view_loss) {
    const PairLoss et = loss_et(records, hu, hi);
    parts.task += et.loss * task_scale;
    axpy(task_scale, et.grad_users.values(), g_hu.values());
    axpy(task_scale, et.grad_items.values(), g_hi.values());
  }

  // Exemplar contrast over the batch's distinct positive items.
  DenseMatrix g_exemplars(n, d);
  {
    std::vector<Index> pos_rows;
    std::vector<bool> seen(items.size(), false);
    for (const Record& r : records) {
      if (r.label != 1 || seen[r.item]) continue;
      seen[r.item] = true;
      if (norm2(hi.row(r.item)) == 0.0) continue;
      pos_rows.push_back(r.item);
      if (pos_rows.size() == cfg.contrast_max_batch) break;
    }
    if (pos_rows.size() >= 2) {
      DenseMatrix sub(pos_rows.size(), d);
      for (std::size_t k = 0; k < pos_rows.size(); ++k) {
        std::copy(hi.row(pos_rows[k]).begin(), hi.row(pos_rows[k]).end(), sub.row(k).begin());
      }
      const BankContrastResult ecl = loss_ecl(sub, exemplars, ccfg);
      const double scale =
          cfg.mean_reduction ? 1.0 / (2.0 * static_cast<double>(pos_rows.size())) : 1.0;
      parts.ecl = ecl.value * scale;
      if (cfg.lambda2 != 0.0) {
        for (std::size_t k = 0; k < pos_rows.size(); ++k) {
          axpy(cfg.lambda2 * scale, ecl.grad_reprs.row(k), g_hi.row(pos_rows[k]));
        }
        axpy(cfg.lambda2 * scale, ecl.grad_bank.values(), g_exemplars.values());
      }
    }
  }

  DenseMatrix g_l0;
  if (cfg.use_gates) parts.l0 = expected_l0(log_alpha, cfg.hard_concrete, &g_l0);

  const DenseMatrix det = cfg.use_gates ? deterministic_gates(log_alpha, cfg.hard_concrete)
                                        : DenseMatrix(z.rows(), z.cols(), 1.0);
  parts.active_gates = count_active_gates(det);

  parts.total = parts.task + cfg.lambda1 * parts.agreement + cfg.lambda2 * parts.ecl +
                cfg.lambda3 * parts.l0;

  if (!with_grad) return parts;

  // Exemplar similarities feed the path logit.
  for (std::size_t r = 0; r < items.size(); ++r) {
    bool any = false;
    for (double x : ib.grad_item_sims.row(r)) any = any || x != 0.0;
    if (!any) continue;
    bank_similarity_backward(hi.row(r), exemplars, item_sims.row(r), ib.grad_item_sims.row(r),
                             g_hi.row(r), g_exemplars);
  }

  scatter_batch_grads(pass, view, g_hu, g_hi);
  pass.backward(store);

  axpy(1.0, g_exemplars.values(), store.grad(kExemplarBank).values());
  axpy(1.0, ib.grad_intents.values(), store.grad(kIntentBank).values());
  axpy(1.0, ib.grad_w.values(), store.grad(kPathWeight).values());
  store.grad(kPathScale)(0, 0) += ib.grad_kappa;
  if (cfg.use_gates) {
    auto g = store.grad(kGateLogAlpha).values();
    for (std::size_t k = 0; k < g.size(); ++k) {
      g[k] += ib.grad_z.values()[k] * dz.values()[k] + cfg.lambda3 * g_l0.values()[k];
    }
  }
  return parts;
}

std::vector<Index> sample_negatives(std::span<const Index> positives,
                                    std::span<const Index> universe, std::size_t k, Rng& rng) {
  if (k == 0) throw ConfigError("k_neg must be >= 1");
  std::size_t liked = 0;
  for (Index i : universe) {
    if (std::binary_search(positives.begin(), positives.end(), i)) ++liked;
  }
  const std::size_t available = universe.size() - liked;
  std::vector<Index> out;
  if (available <= k) {
    for (Index i : universe) {
      if (!std::binary_search(positives.begin(), positives.end(), i)) out.push_back(i);
    }
    return out;
  }
  // Rejection sampling; accepted draws are distinct and never liked.
  while (out.size() < k) {
    const Index cand = universe[rng.below(universe.size())];
    if (std::binary_search(positives.begin(), positives.end(), cand)) continue;
    if (std::find(out.begin(), out.end(), cand) != out.end()) continue;
    out.push_back(cand);
  }
  return out;
}

void adam_step(ParamStore& params, AdamState& state, const AdamConfig& cfg,
               const std::function<double(const std::string&)>& lr_scale) {
  auto& slices = params.slices();
  if (state.m.empty()) {
    for (const auto& s : slices) {
      state.m.emplace_back(s.value.rows(), s.value.cols());
      state.v.emplace_back(s.value.rows(), s.value.cols());
    }
  }
  if (state.m.size() != slices.size()) throw NumericError("adam state does not match params");
  for (std::size_t k = 0; k < slices.size(); ++k) {
    const auto& s = slices[k];
    if (state.m[k].rows() != s.value.rows() || state.m[k].cols() != s.value.cols()) {
      throw NumericError("adam state shape mismatch for slice " + s.name);
    }
    if (s.trainable && !s.grad.all_finite()) {
      throw NumericError("non-finite gradient in slice " + s.name);
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t k = 0; k < slices.size(); ++k) {
    auto& s = slices[k];
    if (!s.trainable) continue;
    const double lr = cfg.lr * (lr_scale ? lr_scale(s.name) : 1.0);
    auto p = s.value.values();
    const auto g = s.grad.values();
    auto m = state.m[k].values();
    auto v = state.v[k].values();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg.eps);
    }
  }
}

std::string TrainLog::to_tsv() const {
  std::ostringstream os;
  os << "step\tL_PT\tL_task\tL_agree\tL_ECL\tL0\tactive_gates\tms\n";
  for (const auto& r : rows) {
    os << r.step << '\t' << format_real(r.parts.total) << '\t' << format_real(r.parts.task)
       << '\t' << format_real(r.parts.agreement) << '\t' << format_real(r.parts.ecl) << '\t'
       << format_real(r.parts.l0) << '\t' << r.parts.active_gates << '\t' << format_real(r.ms)
       << '\n';
  }
  return os.str();
}

std::vector<Index> interaction_item_universe(const KnowledgeGraph& graph) {
  std::vector<bool> seen(graph.items.size(), false);
  for (const auto& r : graph.interactions) seen[r.item] = true;
  std::vector<Index> out;
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (seen[i]) out.push_back(static_cast<Index>(i));
  }
  return out;
}

namespace {

namespace fs = std::filesystem;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

std::string epoch_dir_name(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%04zu", epoch);
  return buf;
}

void prune_checkpoints(const fs::path& root, std::size_t keep) {
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory() && e.path().filename().string().rfind("epoch_", 0) == 0) {
      dirs.push_back(e.path());
    }
  }
  std::sort(dirs.begin(), dirs.end());
  while (dirs.size() > keep) {
    fs::remove_all(dirs.front());
    dirs.erase(dirs.begin());
  }
}

void project_nonneg(DenseMatrix& w) {
  for (double& x : w.values()) x = std::max(x, 0.0);
}

}  // namespace

PretrainResult pretrain(const KnowledgeGraph& graph, const TrainConfig& cfg,
                        const fs::path& out_dir) {
  cfg.validate();
  if (graph.interactions.empty()) throw DataError("no interactions to pretrain on");
  PretrainResult result{init_model_params(graph, cfg), {}};
  ParamStore& params = result.params;
  const KeyValues cfg_kv = cfg.to_kv();

  std::vector<std::vector<Index>> liked(graph.users.size());
  for (std::size_t u = 0; u < liked.size(); ++u) {
    const auto p = graph.user_positive_items(static_cast<Index>(u));
    liked[u].assign(p.begin(), p.end());
    std::sort(liked[u].begin(), liked[u].end());
    liked[u].erase(std::unique(liked[u].begin(), liked[u].end()), liked[u].end());
  }
  const std::vector<Index> universe = interaction_item_universe(graph);

  if (!out_dir.empty()) fs::create_directories(out_dir / "checkpoints");

  const AdamConfig adam{cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps};
  const auto lr_scale = [&](const std::string& name) {
    return name == kGateLogAlpha ? cfg.gate_lr_scale : 1.0;
  };
  AdamState state;
  ParamStore last_good = params;

  auto finish = [&](const ParamStore& final_params) {
    if (out_dir.empty()) return;
    save_checkpoint(final_params, cfg_kv, out_dir / "checkpoint");
    write_text(out_dir / "train_log.tsv", result.log.to_tsv());
  };

  std::vector<std::size_t> order(graph.interactions.size());
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle = Rng(cfg.seed, "shuffle").derive({epoch});
    for (std::size_t k = order.size(); k > 1; --k) {
      std::swap(order[k - 1], order[shuffle.below(k)]);
    }
    const NeighborPolicy policy{cfg.neighbor_cap, cfg.seed, epoch};
    double epoch_loss = 0.0;
    std::size_t epoch_examples = 0;

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++step) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      Rng neg_rng = Rng(cfg.seed, "negatives").derive({step});
      std::vector<Example> batch;
      for (std::size_t k = start; k < stop; ++k) {
        const Interaction& rec = graph.interactions[order[k]];
        batch.push_back({rec.user, rec.item, rec.label});
        if (rec.label != 1) continue;
        for (Index neg : sample_negatives(liked[rec.user], universe, cfg.k_neg, neg_rng)) {
          batch.push_back({rec.user, neg, 0});
        }
      }

      GateMode gates;
      if (cfg.use_gates) {
        Rng gate_rng = Rng(cfg.seed, "gate_noise").derive({step});
        gates = GateMode::frozen(
            sample_gates(params.value(kGateLogAlpha), cfg.hard_concrete, gate_rng).noise);
      }

      const auto t0 = std::chrono::steady_clock::now();
      try {
        const LossParts parts =
            assemble_pretrain_loss(graph, cfg, params, batch, gates, policy, true);
        if (!std::isfinite(parts.total)) {
          throw NumericError("non-finite loss at step " + std::to_string(step));
        }
        adam_step(params, state, adam, lr_scale);
        if (cfg.nonneg_path_weight) project_nonneg(params.value(kPathWeight));
        params.round_to_precision();
        for (const auto& s : params.slices()) {
          if (!s.value.all_finite()) {
            throw NumericError("non-finite value in slice " + s.name + " at step " +
                               std::to_string(step));
          }
        }
        const auto t1 = std::chrono::steady_clock::now();
        const double ms =
            cfg.deterministic ? 0.0
                              : std::chrono::duration<double, std::milli>(t1 - t0).count();
        result.log.rows.push_back({step, epoch, parts, ms});
        // Per-example average either way: mean-reduced totals are weighted by batch size.
        epoch_loss += cfg.mean_reduction ? parts.total * static_cast<double>(batch.size()) : parts.total;
        epoch_examples += batch.size();
      } catch (const NumericError& e) {
        params = last_good;
        finish(last_good);
        throw NumericError(std::string("training diverged: ") + e.what() +
                           "; restored last good parameters");
      }
    }

    result.log.epoch_mean_loss.push_back(epoch_loss / static_cast<double>(epoch_examples));
    last_good = params;
    if (!out_dir.empty()) {
      save_checkpoint(params, cfg_kv, out_dir / "checkpoints" / epoch_dir_name(epoch));
      prune_checkpoints(out_dir / "checkpoints", cfg.keep_checkpoints);
    }
  }
  finish(params);
  return result;
}

}  // namespace hier
