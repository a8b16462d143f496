#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "hier/contrast.h"
#include "hier/errors.h"
#include "hier/gradient_suite.h"
#include "hier/micro.h"
#include "hier/rng.h"
#include "hier/synth.h"
#include "hier/train.h"
#include "hier/transfer.h"

using namespace hier;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::path(HIER_TEST_TMP) / "transfer" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Vector relu_dense(const Vector& x, const DenseMatrix& w, const DenseMatrix& b, bool relu) {
  Vector y(w.cols());
  for (std::size_t c = 0; c < w.cols(); ++c) {
    double s = b(0, c);
    for (std::size_t r = 0; r < x.size(); ++r) s += x[r] * w(r, c);
    y[c] = relu ? std::max(s, 0.0) : s;
  }
  return y;
}

void randomise(ParamStore& head, std::uint64_t seed) {
  Rng rng(seed, "head_rand");
  for (auto& s : head.slices())
    for (double& v : s.value.values()) v = 0.3 * rng.normal();
}

struct Pretrained {
  SynthDataset ds;
  Checkpoint ck;
};

Pretrained small_pretrained() {
  SynthConfig s;
  s.users = 150;
  s.items = 80;
  s.entities = 48;
  s.d0 = 8;
  s.positives_per_user = 6;
  s.seed = 4;
  Pretrained p{generate(s), {}};
  TrainConfig c;
  c.dim = 8;
  c.n_exemplars = 6;
  c.n_intents = 4;
  c.batch_size = 128;
  c.epochs = 3;
  c.lr = 1e-2;
  p.ck = {pretrain(p.ds.graph, c).params, c.to_kv()};
  return p;
}

}  // namespace

TEST_CASE("target item representation is a multiset mean of entity vectors") {
  MicroInstance mi = micro_instance();
  UniversalEncoder enc(mi.graph, mi.params, mi.cfg);
  EncoderPass pass(mi.graph, mi.cfg.encoder(), mi.params, {});
  const std::vector<Index> one = {2};
  const Vector h = enc.item(one);
  for (std::size_t k = 0; k < h.size(); ++k) CHECK(std::abs(h[k] - pass.entity(2)[k]) <= 1e-12);

  const Vector pair = enc.item(std::vector<Index>{2, 5});
  for (std::size_t k = 0; k < h.size(); ++k) {
    CHECK(std::abs(pair[k] - 0.5 * (pass.entity(2)[k] + pass.entity(5)[k])) <= 1e-12);
  }
  const Vector swapped = enc.item(std::vector<Index>{5, 2});
  for (std::size_t k = 0; k < h.size(); ++k) CHECK(std::abs(pair[k] - swapped[k]) <= 1e-15);
  const Vector dup = enc.item(std::vector<Index>{2, 2, 5});
  for (std::size_t k = 0; k < h.size(); ++k) {
    CHECK(std::abs(dup[k] - (2.0 * pass.entity(2)[k] + pass.entity(5)[k]) / 3.0) <= 1e-12);
  }
}

TEST_CASE("deepfm zero embeddings and the FM identity") {
  HeadConfig cfg;
  cfg.fm_dim = 4;
  ParamStore head = init_head(3, 3, 10, cfg);
  head.value(kFmEmbed).fill(0.0);
  const std::vector<Index> rows = {1, 4, 7};
  const DeepFmOutput zero = deepfm_forward(rows, head);
  CHECK(zero.out[0] == 0.0);
  CHECK(zero.out[1] == 0.0);

  randomise(head, 1);
  const DeepFmOutput f = deepfm_forward(rows, head);
  const DenseMatrix& e = head.value(kFmEmbed);
  double pairwise = 0.0;
  for (std::size_t a = 0; a < rows.size(); ++a)
    for (std::size_t b = a + 1; b < rows.size(); ++b)
      for (std::size_t k = 0; k < 4; ++k) pairwise += e(rows[a], k) * e(rows[b], k);
  CHECK(std::abs(f.out[1] - pairwise) <= 1e-12);
  double first = 0.0;
  for (Index r : rows) first += head.value(kFmLinear)(r, 0);
  CHECK(std::abs(f.out[0] - first) <= 1e-12);
  CHECK(f.out.size() == 2 + cfg.deep_out);

  // Two fields: the pairwise term is v1 . v2.
  const std::vector<Index> two = {2, 3};
  double v12 = 0.0;
  for (std::size_t k = 0; k < 4; ++k) v12 += e(2, k) * e(3, k);
  CHECK(std::abs(deepfm_forward(two, head).out[1] - v12) <= 1e-12);
}

TEST_CASE("out-of-vocabulary values use the reserved row") {
  const TargetDomainData data = micro_target();
  const FieldVocab vocab = FieldVocab::build(data);
  const FieldMap odd_user = {{"segment", "never-seen"}};
  const FieldMap no_item;
  const std::vector<Index> rows = vocab.encode(odd_user, no_item);
  REQUIRE(rows.size() == vocab.num_fields());
  const std::vector<Index> oov = vocab.encode({}, {});
  CHECK(rows == oov);
  HeadConfig cfg;
  const ParamStore head = init_head(8, vocab.num_fields(), vocab.total_size(), cfg);
  CHECK_NOTHROW(deepfm_forward(rows, head));
  CHECK(FieldVocab::from_json(vocab.to_json()).to_json() == vocab.to_json());
}

TEST_CASE("fresh heads score one half and the forward pass composes by hand") {
  HeadConfig cfg;
  cfg.hidden1 = 6;
  cfg.hidden2 = 5;
  cfg.deep_hidden = 4;
  cfg.deep_out = 3;
  cfg.fm_dim = 2;
  ParamStore head = init_head(2, 2, 6, cfg);
  const Vector hu = {0.3, -1.2}, hi = {0.8, 0.1};
  const std::vector<Index> rows = {1, 4};
  CHECK(finetune_score(hu, hi, rows, head) == 0.5);

  randomise(head, 2);
  const DenseMatrix& e = head.value(kFmEmbed);
  Vector deep_in = {e(1, 0), e(1, 1), e(4, 0), e(4, 1)};
  const Vector dh = relu_dense(deep_in, head.value(kDeepW0), head.value(kDeepB0), true);
  const Vector dout = relu_dense(dh, head.value(kDeepW1), head.value(kDeepB1), false);
  Vector x = {hu[0], hu[1], hi[0], hi[1], head.value(kFmLinear)(1, 0) + head.value(kFmLinear)(4, 0),
              e(1, 0) * e(4, 0) + e(1, 1) * e(4, 1)};
  x.insert(x.end(), dout.begin(), dout.end());
  const Vector h1 = relu_dense(x, head.value(kMlpW0), head.value(kMlpB0), true);
  const Vector h2 = relu_dense(h1, head.value(kMlpW1), head.value(kMlpB1), true);
  const double logit = relu_dense(h2, head.value(kMlpW2), head.value(kMlpB2), false)[0];
  CHECK(std::abs(finetune_score(hu, hi, rows, head) - 1.0 / (1.0 + std::exp(-logit))) <= 1e-12);

  for (int t = 0; t < 20; ++t) {
    const Vector big = {50.0 * t, -30.0 * t};
    const double s = finetune_score(big, hi, rows, head);
    CHECK(s >= 0.0);
    CHECK(s <= 1.0);
  }
}

TEST_CASE("head width mismatch is a config error") {
  const ParamStore head = init_head(4, 1, 3, HeadConfig{});
  const std::vector<Index> rows = {0};
  CHECK_THROWS_AS(head_forward(Vector(3), Vector(3), rows, head), ConfigError);
}

TEST_CASE("zero-shot score examples") {
  CHECK(zeroshot_score(Vector{1.5, -2}, Vector{0, 0}) == 0.0);
  CHECK(zeroshot_score(Vector{1, 1}, Vector{1, 1}) == 2.0);
  Rng rng(3, "zs");
  Vector u(4);
  for (double& v : u) v = rng.normal();
  std::vector<Vector> items(30, Vector(4));
  for (auto& it : items)
    for (double& v : it) v = rng.normal();
  const auto order = [&](double scale) {
    std::vector<std::size_t> idx(items.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::vector<double> s;
    for (const auto& it : items) {
      Vector scaled = it;
      for (double& v : scaled) v *= scale;
      s.push_back(zeroshot_score(u, scaled));
    }
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return s[a] > s[b]; });
    return idx;
  };
  CHECK(order(1.0) == order(3.7));
  CHECK(order(1.0) == order(0.01));
}

TEST_CASE("unseen target users fall back to the id-free encoding") {
  MicroInstance mi = micro_instance();
  const TargetDomainData data = micro_target();
  const TargetEncodings enc = encode_target(mi.graph, mi.params, mi.cfg, data);
  CHECK_FALSE(enc.warnings.empty());
  for (std::size_t u = 0; u < data.users.size(); ++u) {
    const Vector hat = intent_view_of(enc.raw_users.row(u), mi.params.value(kIntentBank));
    for (std::size_t k = 0; k < hat.size(); ++k) CHECK(std::abs(hat[k] - enc.users(u, k)) <= 1e-15);
  }
}

TEST_CASE("target data round-trips and rejects unknown entities") {
  MicroInstance mi = micro_instance();
  const TargetDomainData data = micro_target();
  const fs::path dir = scratch("target");
  write_target(data, mi.graph, "tgt", dir);
  const TargetDomainData back = load_target(dir, mi.graph);
  CHECK(back.users == data.users);
  CHECK(back.items == data.items);
  CHECK(back.item_entities == data.item_entities);
  CHECK(back.train.size() == data.train.size());
  CHECK(back.test.size() == data.test.size());
  CHECK(back.user_profiles == data.user_profiles);
  CHECK(back.item_profiles == data.item_profiles);

  std::ofstream(dir / "item_entities.tsv", std::ios::app) << "zz\tnot_an_entity\n";
  CHECK_THROWS_AS(load_target(dir, mi.graph), DataError);
}

TEST_CASE("fine-tuning: zero epochs, monotone loss, frozen encoder") {
  const Pretrained p = small_pretrained();
  const TargetDomainData& data = p.ds.targets.at(0).data;
  const Checkpoint before = p.ck;

  HeadConfig cfg;
  cfg.epochs = 0;
  const FinetuneResult none = finetune(p.ds.graph, p.ck, data, cfg);
  CHECK(none.epoch_loss.empty());
  const FieldVocab vocab = FieldVocab::build(data);
  CHECK(none.head == init_head(8, vocab.num_fields(), vocab.total_size(), cfg));

  cfg.epochs = 5;
  const FinetuneResult r = finetune(p.ds.graph, p.ck, data, cfg);
  REQUIRE(r.epoch_loss.size() == 5);
  for (std::size_t e = 1; e < 5; ++e) CHECK(r.epoch_loss[e] < r.epoch_loss[e - 1]);
  CHECK_FALSE(r.intents.has_value());
  CHECK(p.ck.params == before.params);

  cfg.unfreeze_intents = true;
  const FinetuneResult tuned = finetune(p.ds.graph, p.ck, data, cfg);
  REQUIRE(tuned.intents.has_value());
  CHECK_FALSE(tuned.intents->value(kIntentBank) == p.ck.params.value(kIntentBank));
  CHECK(p.ck.params == before.params);
}

TEST_CASE("saved heads reload and score bit-exactly") {
  const Pretrained p = small_pretrained();
  const TargetDomainData& data = p.ds.targets.at(0).data;
  HeadConfig cfg;
  cfg.epochs = 1;
  cfg.unfreeze_intents = true;
  const FinetuneResult r = finetune(p.ds.graph, p.ck, data, cfg);
  const fs::path dir = scratch("head");
  save_head(r, cfg, dir);
  const LoadedHead back = load_head(dir);
  CHECK(back.head == r.head);
  CHECK(back.intents->value(kIntentBank) == r.intents->value(kIntentBank));
  CHECK(back.cfg.to_kv().to_text() == cfg.to_kv().to_text());

  const TrainConfig tcfg = TrainConfig::from_kv(p.ck.config);
  const TargetEncodings enc = encode_target(p.ds.graph, p.ck.params, tcfg, data);
  for (const auto& row : data.test) {
    const auto rows_a = example_rows(r.vocab, data, row.user, row.item);
    const auto rows_b = example_rows(back.vocab, data, row.user, row.item);
    CHECK(rows_a == rows_b);
    CHECK(finetune_score(enc.users.row(row.user), enc.items.row(row.item), rows_a, r.head) ==
          finetune_score(enc.users.row(row.user), enc.items.row(row.item), rows_b, back.head));
  }
}

TEST_CASE("head config round-trips and rejects unknown keys") {
  HeadConfig c;
  c.hidden1 = 17;
  c.unfreeze_intents = true;
  CHECK(HeadConfig::from_kv(c.to_kv()).to_kv().to_text() == c.to_kv().to_text());
  KeyValues kv;
  kv.set("bogus", "1");
  CHECK_THROWS_AS(HeadConfig::from_kv(kv), ConfigError);
}
