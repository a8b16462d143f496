#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "hier/kgraph.h"
#include "hier/param_store.h"
#include "hier/train.h"

namespace hier {

// Ordered categorical fields of one profile row: `field=value;...`.
using FieldMap = std::vector<std::pair<std::string, std::string>>;

FieldMap parse_profile(std::string_view text);

struct TargetRow {
  Index user;  // TargetDomainData::users
  Index item;  // TargetDomainData::items
  int label;
  std::int64_t timestamp;
};

// A target domain bridged to a source graph through shared entities.
struct TargetDomainData {
  IdTable users;
  IdTable items;
  std::vector<std::vector<Index>> item_entities;  // source entity indices
  std::vector<TargetRow> train;
  std::vector<TargetRow> test;
  std::vector<FieldMap> user_profiles;  // by target user index; may be empty
  std::vector<FieldMap> item_profiles;
};

// Reads <dir>/item_entities.tsv, interactions_train.tsv,
// interactions_test.tsv and (optionally) profiles_user.tsv,
// profiles_item.tsv. A target item without a known source entity is a
// DataError.
TargetDomainData load_target(const std::filesystem::path& dir, const KnowledgeGraph& source);
void write_target(const TargetDomainData& data, const KnowledgeGraph& source,
                  const std::string& domain, const std::filesystem::path& dir);

// Frozen encodings computed from pretrained parameters with every
// neighbour (no sampling). All user methods return the raw combined
// representation h_u; apply intent_view_of() for hat_h_u.
class UniversalEncoder {
 public:
  UniversalEncoder(const KnowledgeGraph& source, const ParamStore& params, const TrainConfig& cfg);

  Vector user(Index source_user);
  // Id-free encoding from an explicit entity multiset; zero for an empty set.
  Vector user_from_entities(std::span<const Index> entities) const;
  // The source user with the same id when one exists, otherwise the id-free
  // encoding of `fallback_entities` (a warning is appended).
  Vector target_user(const std::string& id, std::span<const Index> fallback_entities,
                     std::vector<std::string>* warnings);
  // Mean of the combined representations of the item's entities.
  Vector item(std::span<const Index> entities) const;

  std::size_t dim() const { return cfg_.dim; }

 private:
  const KnowledgeGraph& source_;
  TrainConfig cfg_;
  EncoderPass pass_;
};

// hat_h_u = I^T softmax(I h_u)
Vector intent_view_of(std::span<const double> h_user, const DenseMatrix& intents);

struct HeadConfig {
  std::size_t hidden1 = 128;
  std::size_t hidden2 = 64;
  std::size_t fm_dim = 8;
  std::size_t deep_hidden = 32;
  std::size_t deep_out = 8;
  double lr = 1e-3;
  std::size_t batch_size = 256;
  std::size_t epochs = 5;
  std::size_t k_neg = 4;
  // Also trains the intent bank (the encoder itself stays frozen).
  bool unfreeze_intents = false;
  std::uint64_t seed = 1;

  void validate() const;
  KeyValues to_kv() const;
  static HeadConfig from_kv(const KeyValues& kv);
  static const std::vector<std::string>& keys();
};

// Per-field vocabularies over user fields then item fields; index 0 of
// every field is the OOV row.
class FieldVocab {
 public:
  static FieldVocab build(const TargetDomainData& data);

  std::size_t num_fields() const { return fields_.size(); }
  std::size_t total_size() const { return total_; }
  const std::vector<std::string>& fields() const { return fields_; }
  // One global row index per field for a (user profile, item profile) pair.
  std::vector<Index> encode(const FieldMap& user, const FieldMap& item) const;

  std::string to_json() const;
  static FieldVocab from_json(std::string_view text);

 private:
  std::vector<std::string> fields_;  // "u.<name>" / "i.<name>"
  std::vector<std::vector<std::string>> values_;  // excluding OOV
  std::vector<std::size_t> offsets_;
  std::size_t total_ = 0;
  std::vector<std::unordered_map<std::string, Index>> lookup_;

  void index();
};

// Head slice names.
inline constexpr const char* kFmLinear = "fm_linear";
inline constexpr const char* kFmEmbed = "fm_embed";
inline constexpr const char* kDeepW0 = "deep_w0";
inline constexpr const char* kDeepB0 = "deep_b0";
inline constexpr const char* kDeepW1 = "deep_w1";
inline constexpr const char* kDeepB1 = "deep_b1";
inline constexpr const char* kMlpW0 = "mlp_w0";
inline constexpr const char* kMlpB0 = "mlp_b0";
inline constexpr const char* kMlpW1 = "mlp_w1";
inline constexpr const char* kMlpB1 = "mlp_b1";
inline constexpr const char* kMlpW2 = "mlp_w2";
inline constexpr const char* kMlpB2 = "mlp_b2";

// He-initialised head with a zero final layer (score 0.5 everywhere).
ParamStore init_head(std::size_t dim, std::size_t num_fields, std::size_t vocab_size,
                     const HeadConfig& cfg);

struct DeepFmOutput {
  Vector out;  // [first-order sum, FM pairwise sum, deep tower (deep_out)]
  // cached activations for backward
  Vector deep_input;
  Vector deep_hidden;
};

DeepFmOutput deepfm_forward(std::span<const Index> rows, const ParamStore& head);
// Accumulates d(loss)/d(head) given d(loss)/d(out).
void deepfm_backward(std::span<const Index> rows, const DeepFmOutput& fwd,
                     std::span<const double> grad_out, ParamStore& head);

struct HeadForward {
  Vector input;  // hat_h_u || h_i || deepfm
  Vector h1, h2;
  double logit = 0.0;
  DeepFmOutput fm;
};

HeadForward head_forward(std::span<const double> h_user, std::span<const double> h_item,
                         std::span<const Index> rows, const ParamStore& head);
// sigma(MLP(hat_h_u || h_i || DeepFM(x_u || x_i)))
double finetune_score(std::span<const double> h_user, std::span<const double> h_item,
                      std::span<const Index> rows, const ParamStore& head);
// Backprop of d(loss)/d(logit) into the head; returns d(loss)/d(h_user) and
// d(loss)/d(h_item) concatenated.
Vector head_backward(const HeadForward& fwd, std::span<const Index> rows, double grad_logit,
                     ParamStore& head);

// hat_h_u . h_i
double zeroshot_score(std::span<const double> h_user, std::span<const double> h_item);

// Encodings of every target user / item under frozen pretrained params.
struct TargetEncodings {
  DenseMatrix raw_users;  // h_u
  DenseMatrix users;      // hat_h_u under the pretrained intent bank
  DenseMatrix items;
  std::vector<std::string> warnings;
};
TargetEncodings encode_target(const KnowledgeGraph& source, const ParamStore& pretrained,
                              const TrainConfig& cfg, const TargetDomainData& data);

struct FinetuneExample {
  Index user;
  Index item;
  int label;
};

// Sum of BCE over the batch; `rows[k]` are the vocab rows of batch[k]. When
// `intents` is non-null hat_h_u is recomputed from it and its gradient is
// filled as well. Gradients are zeroed first when with_grad is set.
double finetune_loss(const TargetEncodings& enc, ParamStore& head, ParamStore* intents,
                     std::span<const FinetuneExample> batch,
                     std::span<const std::vector<Index>> rows, bool with_grad);

struct FinetuneResult {
  ParamStore head;
  std::optional<ParamStore> intents;  // tuned intent bank when unfrozen
  FieldVocab vocab;
  std::vector<double> epoch_loss;  // mean per-example training loss after each epoch
  std::vector<std::string> warnings;
};

FinetuneResult finetune(const KnowledgeGraph& source, const Checkpoint& checkpoint,
                        const TargetDomainData& data, const HeadConfig& cfg);

// <dir>/head (checkpoint), <dir>/vocab.json and, when tuned,
// <dir>/intent_bank (checkpoint).
void save_head(const FinetuneResult& result, const HeadConfig& cfg,
               const std::filesystem::path& dir);

struct LoadedHead {
  ParamStore head;
  HeadConfig cfg;
  FieldVocab vocab;
  std::optional<ParamStore> intents;
};
LoadedHead load_head(const std::filesystem::path& dir);

// Per-user vocab rows for every (user, item) pair are built on demand.
std::vector<Index> example_rows(const FieldVocab& vocab, const TargetDomainData& data,
                                Index user, Index item);

}  // namespace hier
