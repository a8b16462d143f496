#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hier/config.h"
#include "hier/contrast.h"
#include "hier/encoder.h"
#include "hier/gates.h"
#include "hier/kgraph.h"
#include "hier/param_store.h"
#include "hier/rng.h"

namespace hier {

struct TrainConfig {
  // model shape
  std::size_t dim = 32;
  int layers = 2;
  std::size_t n_exemplars = 300;
  std::size_t n_intents = 50;
  std::size_t neighbor_cap = 10;
  bool learnable_alpha = false;
  bool id_free_users = false;

  // objective
  double tau = 0.2;
  double lambda1 = 0.1;
  double lambda2 = 1.0;
  double lambda3 = 1e-2;
  InfoNceMode infonce_mode = InfoNceMode::kPositiveInclusive;
  bool original_view_loss = false;
  // Mean: task, agreement and ECL are averaged over their records, anchors
  // and directions; the L0 term stays a count. Sum: every term is a plain sum.
  bool mean_reduction = true;
  HardConcreteConfig hard_concrete;
  double gate_init = 0.0;  // initial log_alpha
  double path_scale = 1.0;
  bool nonneg_path_weight = true;

  // ablation switches: graph propagation and decision-path gating
  bool use_graph = true;
  bool use_gates = true;

  // optimisation
  double lr = 1e-3;
  double gate_lr_scale = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 256;
  std::size_t epochs = 10;
  std::size_t k_neg = 4;
  std::size_t contrast_max_batch = 128;
  std::uint64_t seed = 1;
  bool deterministic = true;
  Precision precision = Precision::kFloat64;
  std::size_t keep_checkpoints = 3;

  void validate() const;
  KeyValues to_kv() const;
  // Unknown keys raise ConfigError.
  static TrainConfig from_kv(const KeyValues& kv);
  static const std::vector<std::string>& keys();

  EncoderConfig encoder() const;
  ContrastConfig contrast() const;
};

// Registers every pretraining slice: encoder slices, exemplar_bank,
// intent_bank, gate_logalpha, path_weight and path_scale.
ParamStore init_model_params(const KnowledgeGraph& graph, const TrainConfig& cfg,
                             std::vector<std::string>* warnings = nullptr);

// Gate realisation used by one loss evaluation.
struct GateMode {
  enum class Kind { kNoise, kDeterministic };
  Kind kind = Kind::kDeterministic;
  DenseMatrix noise;  // n x m draws when kind == kNoise

  static GateMode frozen(DenseMatrix noise) { return {Kind::kNoise, std::move(noise)}; }
  static GateMode deterministic() { return {}; }
};

// One training example addressed by global user / item indices.
struct Example {
  Index user;
  Index item;
  int label;
};

// Batch-local user / item rows (first-seen order) and their encodings.
struct BatchView {
  std::vector<Index> users;
  std::vector<Index> items;
  std::vector<Record> records;  // rows of hu / hi
  DenseMatrix hu;
  DenseMatrix hi;
};

BatchView gather_batch(EncoderPass& pass, std::span<const Example> batch);
// Hands d(loss)/d(hu), d(loss)/d(hi) back to the encoder pass.
void scatter_batch_grads(EncoderPass& pass, const BatchView& view, const DenseMatrix& g_users,
                         const DenseMatrix& g_items);

struct LossParts {
  double total = 0.0;
  double task = 0.0;       // revised L_ET (+ original-view L_ET when enabled)
  double agreement = 0.0;  // raw agreement term, weighted by lambda1 in total
  double ecl = 0.0;
  double l0 = 0.0;
  std::size_t active_gates = 0;  // deterministic gate value > 0
};

// L_PT = L_IB + lambda2 * L_ECL + lambda3 * E[L0]. When with_grad is set the
// store gradients are zeroed and filled. Throws NumericError on an empty
// batch.
LossParts assemble_pretrain_loss(const KnowledgeGraph& graph, const TrainConfig& cfg,
                                 ParamStore& store, std::span<const Example> batch,
                                 const GateMode& gates, const NeighborPolicy& policy,
                                 bool with_grad);

// Up to k distinct items drawn uniformly from `universe` minus `positives`
// (both sorted ascending). Returns every candidate when fewer than k exist.
std::vector<Index> sample_negatives(std::span<const Index> positives,
                                    std::span<const Index> universe, std::size_t k, Rng& rng);

struct AdamState {
  std::vector<DenseMatrix> m;
  std::vector<DenseMatrix> v;
  std::uint64_t step = 0;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// In-place Adam with bias correction over every trainable slice.
// `lr_scale(name)` multiplies the learning rate per slice. Throws
// NumericError naming the slice on a non-finite gradient.
void adam_step(ParamStore& params, AdamState& state, const AdamConfig& cfg,
               const std::function<double(const std::string&)>& lr_scale = {});

struct TrainLogRow {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  LossParts parts;
  double ms = 0.0;
};

struct TrainLog {
  std::vector<TrainLogRow> rows;
  std::vector<double> epoch_mean_loss;

  // step, L_PT, L_task, L_agree, L_ECL, L0, active_gates, ms
  std::string to_tsv() const;
};

struct PretrainResult {
  ParamStore params;
  TrainLog log;
};

// Mini-batch Adam over the graph's labelled interactions plus k_neg sampled
// negatives per positive. When `out_dir` is non-empty writes
// checkpoints/epoch_NNNN (last keep_checkpoints), checkpoint/ and
// train_log.tsv. A non-finite loss restores the last good parameters,
// writes them as the final checkpoint and throws NumericError.
PretrainResult pretrain(const KnowledgeGraph& graph, const TrainConfig& cfg,
                        const std::filesystem::path& out_dir = {});

// Items that occur in any interaction of the graph, ascending.
std::vector<Index> interaction_item_universe(const KnowledgeGraph& graph);

}  // namespace hier
