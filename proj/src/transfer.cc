#include "hier/transfer.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

#include "json.hpp"

#include "hier/contrast.h"
#include "hier/errors.h"
#include "hier/rng.h"

namespace hier {

namespace fs = std::filesystem;

FieldMap parse_profile(std::string_view text) {
  FieldMap out;
  if (text.empty()) return out;
  for (std::string_view tok : split(text, ';')) {
    if (tok.empty()) continue;
    const auto eq = tok.find('=');
    if (eq == std::string_view::npos || eq == 0) {
      throw DataError("malformed profile field `" + std::string(tok) + "`, expected field=value");
    }
    out.emplace_back(std::string(tok.substr(0, eq)), std::string(tok.substr(eq + 1)));
  }
  return out;
}

namespace {

std::string where(const fs::path& p, std::size_t line) {
  return p.filename().string() + ":" + std::to_string(line + 1);
}

bool skip(const std::string& line) { return line.empty() || line[0] == '#'; }

void read_rows(const fs::path& path, TargetDomainData& data, std::vector<TargetRow>& out) {
  const auto lines = read_lines(path);
  for (std::size_t n = 0; n < lines.size(); ++n) {
    if (skip(lines[n])) continue;
    const auto cols = split(lines[n], '\t');
    if (cols.size() != 5) {
      throw DataError(where(path, n) +
                      ": expected `domain<TAB>user<TAB>item<TAB>label<TAB>timestamp`");
    }
    const auto item = data.items.find(cols[2]);
    if (!item) throw DataError(where(path, n) + ": unknown item " + std::string(cols[2]));
    if (cols[3] != "0" && cols[3] != "1") {
      throw DataError(where(path, n) + ": label must be 0 or 1");
    }
    std::int64_t ts = 0;
    auto [ptr, ec] = std::from_chars(cols[4].data(), cols[4].data() + cols[4].size(), ts);
    if (ec != std::errc() || ptr != cols[4].data() + cols[4].size()) {
      throw DataError(where(path, n) + ": bad timestamp");
    }
    out.push_back({data.users.intern(cols[1]), *item, cols[3] == "1" ? 1 : 0, ts});
  }
}

void read_profiles(const fs::path& path, IdTable& table, bool intern,
                   std::vector<FieldMap>& out) {
  if (!fs::exists(path)) return;
  const auto lines = read_lines(path);
  for (std::size_t n = 0; n < lines.size(); ++n) {
    if (skip(lines[n])) continue;
    const auto cols = split(lines[n], '\t');
    if (cols.size() > 2 || cols[0].empty()) {
      throw DataError(where(path, n) + ": expected `id<TAB>field=value;...`");
    }
    std::optional<Index> id = intern ? table.intern(cols[0]) : table.find(cols[0]);
    if (!id) throw DataError(where(path, n) + ": unknown id " + std::string(cols[0]));
    if (out.size() < table.size()) out.resize(table.size());
    try {
      out[*id] = cols.size() == 2 ? parse_profile(cols[1]) : FieldMap{};
    } catch (const DataError& e) {
      throw DataError(where(path, n) + ": " + e.what());
    }
  }
}

std::string profile_text(const FieldMap& m) {
  std::string s;
  for (const auto& [k, v] : m) {
    if (!s.empty()) s += ';';
    s += k + "=" + v;
  }
  return s;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

}  // namespace

TargetDomainData load_target(const fs::path& dir, const KnowledgeGraph& source) {
  TargetDomainData data;
  const fs::path ie = dir / "item_entities.tsv";
  const auto lines = read_lines(ie);
  for (std::size_t n = 0; n < lines.size(); ++n) {
    if (skip(lines[n])) continue;
    const auto cols = split(lines[n], '\t');
    if (cols.size() != 2 || cols[0].empty()) {
      throw DataError(where(ie, n) + ": expected `item_id<TAB>e1,e2,...`");
    }
    if (data.items.find(cols[0])) {
      throw DataError(where(ie, n) + ": duplicate item " + std::string(cols[0]));
    }
    std::vector<Index> ents;
    for (std::string_view e : split(cols[1], ',')) {
      if (e.empty()) continue;
      const auto idx = source.entities.find(e);
      if (!idx) throw DataError(where(ie, n) + ": unknown entity " + std::string(e));
      ents.push_back(*idx);
    }
    if (ents.empty()) {
      throw DataError(where(ie, n) + ": item " + std::string(cols[0]) +
                      " has no known entity to bridge from the source graph");
    }
    data.items.intern(cols[0]);
    data.item_entities.push_back(std::move(ents));
  }
  read_rows(dir / "interactions_train.tsv", data, data.train);
  read_rows(dir / "interactions_test.tsv", data, data.test);
  read_profiles(dir / "profiles_user.tsv", data.users, true, data.user_profiles);
  read_profiles(dir / "profiles_item.tsv", data.items, false, data.item_profiles);
  data.user_profiles.resize(data.users.size());
  data.item_profiles.resize(data.items.size());
  return data;
}

void write_target(const TargetDomainData& data, const KnowledgeGraph& source,
                  const std::string& domain, const fs::path& dir) {
  fs::create_directories(dir);
  std::string ie;
  for (std::size_t i = 0; i < data.items.size(); ++i) {
    ie += data.items.name(static_cast<Index>(i)) + '\t';
    for (std::size_t k = 0; k < data.item_entities[i].size(); ++k) {
      if (k) ie += ',';
      ie += source.entities.name(data.item_entities[i][k]);
    }
    ie += '\n';
  }
  write_file(dir / "item_entities.tsv", ie);
  const auto rows_text = [&](const std::vector<TargetRow>& rows) {
    std::string s;
    for (const auto& r : rows) {
      s += domain + '\t' + data.users.name(r.user) + '\t' + data.items.name(r.item) + '\t' +
           std::to_string(r.label) + '\t' + std::to_string(r.timestamp) + '\n';
    }
    return s;
  };
  write_file(dir / "interactions_train.tsv", rows_text(data.train));
  write_file(dir / "interactions_test.tsv", rows_text(data.test));
  std::string up, ip;
  for (std::size_t u = 0; u < data.user_profiles.size(); ++u) {
    up += data.users.name(static_cast<Index>(u)) + '\t' + profile_text(data.user_profiles[u]) +
          '\n';
  }
  for (std::size_t i = 0; i < data.item_profiles.size(); ++i) {
    ip += data.items.name(static_cast<Index>(i)) + '\t' + profile_text(data.item_profiles[i]) +
          '\n';
  }
  write_file(dir / "profiles_user.tsv", up);
  write_file(dir / "profiles_item.tsv", ip);
}

// ---------------------------------------------------------------------------
// Universal encoder

UniversalEncoder::UniversalEncoder(const KnowledgeGraph& source, const ParamStore& params,
                                   const TrainConfig& cfg)
    : source_(source), cfg_(cfg), pass_(source, cfg.encoder(), params, {0, cfg.seed, 0}) {}

Vector UniversalEncoder::user(Index source_user) {
  const auto h = pass_.user(source_user);
  return {h.begin(), h.end()};
}

Vector UniversalEncoder::user_from_entities(std::span<const Index> entities) const {
  const std::size_t d = cfg_.dim;
  if (entities.empty()) return Vector(d, 0.0);
  const auto& alpha = pass_.alpha();
  Vector layer(d, 0.0);
  const double inv = 1.0 / static_cast<double>(entities.size());
  for (Index e : entities) axpy(inv, pass_.entity_layer(0).row(e), layer);
  Vector combined(d, 0.0);
  axpy(alpha[0], layer, combined);
  for (std::size_t l = 1; l < alpha.size(); ++l) {
    layer = aggregate(layer, pass_.entity_layer(static_cast<int>(l) - 1), entities);
    axpy(alpha[l], layer, combined);
  }
  return combined;
}

Vector UniversalEncoder::target_user(const std::string& id, std::span<const Index> fallback,
                                     std::vector<std::string>* warnings) {
  if (const auto u = source_.users.find(id)) return user(*u);
  if (warnings) {
    warnings->push_back("user " + id + " unseen at pre-training; using the id-free encoding");
  }
  return user_from_entities(fallback);
}

Vector UniversalEncoder::item(std::span<const Index> entities) const {
  if (entities.empty()) throw DataError("item has no entities to pool");
  Vector h(cfg_.dim, 0.0);
  const double inv = 1.0 / static_cast<double>(entities.size());
  for (Index e : entities) axpy(inv, pass_.entity(e), h);
  return h;
}

Vector intent_view_of(std::span<const double> h_user, const DenseMatrix& intents) {
  return intent_view(intent_similarity(h_user, intents), intents);
}

double zeroshot_score(std::span<const double> h_user, std::span<const double> h_item) {
  return dot(h_user, h_item);
}

TargetEncodings encode_target(const KnowledgeGraph& source, const ParamStore& pretrained,
                              const TrainConfig& cfg, const TargetDomainData& data) {
  if (pretrained.value(kEntityEmb).cols() != cfg.dim) {
    throw ConfigError("checkpoint entity_emb width does not match config dim");
  }
  UniversalEncoder enc(source, pretrained, cfg);
  const std::size_t d = cfg.dim;
  TargetEncodings out{DenseMatrix(data.users.size(), d), DenseMatrix(data.users.size(), d),
                      DenseMatrix(data.items.size(), d), {}};
  std::vector<std::vector<Index>> fallback(data.users.size());
  for (const auto& r : data.train) {
    if (r.label != 1) continue;
    const auto& ents = data.item_entities[r.item];
    fallback[r.user].insert(fallback[r.user].end(), ents.begin(), ents.end());
  }
  const DenseMatrix& intents = pretrained.value(kIntentBank);
  for (std::size_t u = 0; u < data.users.size(); ++u) {
    const Vector raw =
        enc.target_user(data.users.name(static_cast<Index>(u)), fallback[u], &out.warnings);
    std::copy(raw.begin(), raw.end(), out.raw_users.row(u).begin());
    const Vector hat = intent_view_of(raw, intents);
    std::copy(hat.begin(), hat.end(), out.users.row(u).begin());
  }
  for (std::size_t i = 0; i < data.items.size(); ++i) {
    const Vector h = enc.item(data.item_entities[i]);
    std::copy(h.begin(), h.end(), out.items.row(i).begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Head configuration

void HeadConfig::validate() const {
  if (hidden1 == 0 || hidden2 == 0 || fm_dim == 0 || deep_hidden == 0 || deep_out == 0) {
    throw ConfigError("head layer widths must be positive");
  }
  if (!(lr > 0.0)) throw ConfigError("ft_lr must be > 0");
  if (batch_size == 0) throw ConfigError("ft_batch_size must be positive");
  if (k_neg == 0) throw ConfigError("ft_k_neg must be >= 1");
}

KeyValues HeadConfig::to_kv() const {
  KeyValues kv;
  kv.set("ft_hidden1", std::to_string(hidden1));
  kv.set("ft_hidden2", std::to_string(hidden2));
  kv.set("fm_dim", std::to_string(fm_dim));
  kv.set("deep_hidden", std::to_string(deep_hidden));
  kv.set("deep_out", std::to_string(deep_out));
  kv.set("ft_lr", format_real(lr));
  kv.set("ft_batch_size", std::to_string(batch_size));
  kv.set("ft_epochs", std::to_string(epochs));
  kv.set("ft_k_neg", std::to_string(k_neg));
  kv.set("ft_unfreeze_intents", unfreeze_intents ? "true" : "false");
  kv.set("seed", std::to_string(seed));
  return kv;
}

const std::vector<std::string>& HeadConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    const KeyValues kv = HeadConfig{}.to_kv();
    for (const auto& [key, value] : kv.entries()) out.push_back(key);
    return out;
  }();
  return k;
}

HeadConfig HeadConfig::from_kv(const KeyValues& kv) {
  HeadConfig c;
  const auto size = [](const std::string& key, const std::string& v) {
    const long long x = parse_int(key, v);
    if (x < 0) throw ConfigError(key + " must be >= 0");
    return static_cast<std::size_t>(x);
  };
  for (const auto& [key, v] : kv.entries()) {
    if (key == "ft_hidden1") c.hidden1 = size(key, v);
    else if (key == "ft_hidden2") c.hidden2 = size(key, v);
    else if (key == "fm_dim") c.fm_dim = size(key, v);
    else if (key == "deep_hidden") c.deep_hidden = size(key, v);
    else if (key == "deep_out") c.deep_out = size(key, v);
    else if (key == "ft_lr") c.lr = parse_real(key, v);
    else if (key == "ft_batch_size") c.batch_size = size(key, v);
    else if (key == "ft_epochs") c.epochs = size(key, v);
    else if (key == "ft_k_neg") c.k_neg = size(key, v);
    else if (key == "ft_unfreeze_intents") c.unfreeze_intents = parse_bool(key, v);
    else if (key == "seed") c.seed = size(key, v);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Field vocabularies

void FieldVocab::index() {
  offsets_.clear();
  lookup_.assign(fields_.size(), {});
  total_ = 0;
  for (std::size_t f = 0; f < fields_.size(); ++f) {
    offsets_.push_back(total_);
    for (std::size_t k = 0; k < values_[f].size(); ++k) {
      lookup_[f].emplace(values_[f][k], static_cast<Index>(k + 1));
    }
    total_ += values_[f].size() + 1;
  }
}

FieldVocab FieldVocab::build(const TargetDomainData& data) {
  FieldVocab v;
  std::unordered_map<std::string, std::size_t> field_index;
  std::vector<std::unordered_map<std::string, bool>> seen;
  const auto add = [&](const std::string& prefix, const std::vector<FieldMap>& profiles) {
    for (const auto& profile : profiles) {
      for (const auto& [name, value] : profile) {
        const std::string key = prefix + name;
        auto [it, fresh] = field_index.try_emplace(key, v.fields_.size());
        if (fresh) {
          v.fields_.push_back(key);
          v.values_.emplace_back();
          seen.emplace_back();
        }
        if (seen[it->second].emplace(value, true).second) v.values_[it->second].push_back(value);
      }
    }
  };
  add("u.", data.user_profiles);
  add("i.", data.item_profiles);
  v.index();
  return v;
}

std::vector<Index> FieldVocab::encode(const FieldMap& user, const FieldMap& item) const {
  std::vector<Index> rows(fields_.size());
  for (std::size_t f = 0; f < fields_.size(); ++f) rows[f] = static_cast<Index>(offsets_[f]);
  const auto fill = [&](const std::string& prefix, const FieldMap& m) {
    for (const auto& [name, value] : m) {
      const auto it = std::find(fields_.begin(), fields_.end(), prefix + name);
      if (it == fields_.end()) continue;  // field unseen in training data
      const std::size_t f = static_cast<std::size_t>(it - fields_.begin());
      const auto hit = lookup_[f].find(value);
      if (hit != lookup_[f].end()) rows[f] = static_cast<Index>(offsets_[f] + hit->second);
    }
  };
  fill("u.", user);
  fill("i.", item);
  return rows;
}

std::string FieldVocab::to_json() const {
  nlohmann::ordered_json j;
  j["format"] = "hier-field-vocab";
  j["fields"] = nlohmann::ordered_json::array();
  for (std::size_t f = 0; f < fields_.size(); ++f) {
    j["fields"].push_back({{"name", fields_[f]}, {"values", values_[f]}});
  }
  return j.dump(2) + "\n";
}

FieldVocab FieldVocab::from_json(std::string_view text) {
  FieldVocab v;
  try {
    const auto j = nlohmann::json::parse(text);
    for (const auto& f : j.at("fields")) {
      v.fields_.push_back(f.at("name").get<std::string>());
      v.values_.push_back(f.at("values").get<std::vector<std::string>>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed field vocabulary: ") + e.what());
  }
  v.index();
  return v;
}

std::vector<Index> example_rows(const FieldVocab& vocab, const TargetDomainData& data,
                                Index user, Index item) {
  static const FieldMap kEmpty;
  const FieldMap& up = user < data.user_profiles.size() ? data.user_profiles[user] : kEmpty;
  const FieldMap& ip = item < data.item_profiles.size() ? data.item_profiles[item] : kEmpty;
  return vocab.encode(up, ip);
}

// ---------------------------------------------------------------------------
// DeepFM and MLP head

ParamStore init_head(std::size_t dim, std::size_t num_fields, std::size_t vocab_size,
                     const HeadConfig& cfg) {
  cfg.validate();
  ParamStore head;
  Rng rng(cfg.seed, "init_head");
  const auto he = [&](DenseMatrix& w, double gain) {
    const double std = std::sqrt(gain / static_cast<double>(std::max<std::size_t>(w.rows(), 1)));
    for (double& x : w.values()) x = std * rng.normal();
  };
  const std::size_t k = cfg.fm_dim;
  head.add(kFmLinear, std::max<std::size_t>(vocab_size, 1), 1);
  for (double& x : head.add(kFmEmbed, std::max<std::size_t>(vocab_size, 1), k).values()) {
    x = 0.1 * rng.normal();
  }
  he(head.add(kDeepW0, std::max<std::size_t>(num_fields * k, 1), cfg.deep_hidden), 2.0);
  head.add(kDeepB0, 1, cfg.deep_hidden);
  he(head.add(kDeepW1, cfg.deep_hidden, cfg.deep_out), 1.0);
  head.add(kDeepB1, 1, cfg.deep_out);

  const std::size_t in = 2 * dim + 2 + cfg.deep_out;
  he(head.add(kMlpW0, in, cfg.hidden1), 2.0);
  head.add(kMlpB0, 1, cfg.hidden1);
  he(head.add(kMlpW1, cfg.hidden1, cfg.hidden2), 2.0);
  head.add(kMlpB1, 1, cfg.hidden2);
  head.add(kMlpW2, cfg.hidden2, 1);
  head.add(kMlpB2, 1, 1);
  return head;
}

namespace {

// y = relu?(x^T W + b)
Vector dense(std::span<const double> x, const DenseMatrix& w, const DenseMatrix& b, bool relu) {
  Vector y(b.values().begin(), b.values().end());
  for (std::size_t r = 0; r < x.size(); ++r) {
    if (x[r] != 0.0) axpy(x[r], w.row(r), y);
  }
  if (relu) {
    for (double& v : y) v = std::max(v, 0.0);
  }
  return y;
}

// Given d(loss)/d(y) (post-activation), accumulates weight grads and
// returns d(loss)/d(x).
Vector dense_backward(std::span<const double> x, std::span<const double> y, Vector g_y,
                      const DenseMatrix& w, DenseMatrix& gw, DenseMatrix& gb, bool relu) {
  if (relu) {
    for (std::size_t k = 0; k < g_y.size(); ++k) {
      if (y[k] <= 0.0) g_y[k] = 0.0;
    }
  }
  axpy(1.0, g_y, gb.values());
  Vector g_x(x.size(), 0.0);
  for (std::size_t r = 0; r < x.size(); ++r) {
    if (x[r] != 0.0) axpy(x[r], g_y, gw.row(r));
    g_x[r] = dot(w.row(r), g_y);
  }
  return g_x;
}

}  // namespace

DeepFmOutput deepfm_forward(std::span<const Index> rows, const ParamStore& head) {
  const DenseMatrix& lin = head.value(kFmLinear);
  const DenseMatrix& emb = head.value(kFmEmbed);
  const std::size_t k = emb.cols();
  DeepFmOutput out;
  double first = 0.0;
  Vector sum(k, 0.0);
  double sq = 0.0;
  out.deep_input.assign(head.value(kDeepW0).rows(), 0.0);
  for (std::size_t f = 0; f < rows.size(); ++f) {
    first += lin(rows[f], 0);
    const auto v = emb.row(rows[f]);
    axpy(1.0, v, sum);
    sq += dot(v, v);
    std::copy(v.begin(), v.end(), out.deep_input.begin() + static_cast<long>(f * k));
  }
  const double pair = 0.5 * (dot(sum, sum) - sq);
  out.deep_hidden = dense(out.deep_input, head.value(kDeepW0), head.value(kDeepB0), true);
  const Vector deep = dense(out.deep_hidden, head.value(kDeepW1), head.value(kDeepB1), false);
  out.out.reserve(2 + deep.size());
  out.out.push_back(first);
  out.out.push_back(pair);
  out.out.insert(out.out.end(), deep.begin(), deep.end());
  return out;
}

void deepfm_backward(std::span<const Index> rows, const DeepFmOutput& fwd,
                     std::span<const double> grad_out, ParamStore& head) {
  const DenseMatrix& emb = head.value(kFmEmbed);
  const std::size_t k = emb.cols();
  DenseMatrix& g_lin = head.grad(kFmLinear);
  DenseMatrix& g_emb = head.grad(kFmEmbed);

  Vector g_deep(grad_out.begin() + 2, grad_out.end());
  const Vector deep_out(fwd.out.begin() + 2, fwd.out.end());
  const Vector g_hidden = dense_backward(fwd.deep_hidden, deep_out, g_deep, head.value(kDeepW1),
                                         head.grad(kDeepW1), head.grad(kDeepB1), false);
  const Vector g_input = dense_backward(fwd.deep_input, fwd.deep_hidden, g_hidden,
                                       head.value(kDeepW0), head.grad(kDeepW0),
                                       head.grad(kDeepB0), true);

  Vector sum(k, 0.0);
  for (Index r : rows) axpy(1.0, emb.row(r), sum);
  for (std::size_t f = 0; f < rows.size(); ++f) {
    const Index r = rows[f];
    g_lin(r, 0) += grad_out[0];
    auto ge = g_emb.row(r);
    const auto v = emb.row(r);
    for (std::size_t c = 0; c < k; ++c) {
      ge[c] += grad_out[1] * (sum[c] - v[c]) + g_input[f * k + c];
    }
  }
}

HeadForward head_forward(std::span<const double> h_user, std::span<const double> h_item,
                         std::span<const Index> rows, const ParamStore& head) {
  HeadForward f;
  f.fm = deepfm_forward(rows, head);
  f.input.reserve(h_user.size() + h_item.size() + f.fm.out.size());
  f.input.insert(f.input.end(), h_user.begin(), h_user.end());
  f.input.insert(f.input.end(), h_item.begin(), h_item.end());
  f.input.insert(f.input.end(), f.fm.out.begin(), f.fm.out.end());
  if (f.input.size() != head.value(kMlpW0).rows()) {
    throw ConfigError("head input width " + std::to_string(f.input.size()) +
                      " does not match mlp_w0 rows " +
                      std::to_string(head.value(kMlpW0).rows()));
  }
  f.h1 = dense(f.input, head.value(kMlpW0), head.value(kMlpB0), true);
  f.h2 = dense(f.h1, head.value(kMlpW1), head.value(kMlpB1), true);
  f.logit = dense(f.h2, head.value(kMlpW2), head.value(kMlpB2), false)[0];
  return f;
}

double finetune_score(std::span<const double> h_user, std::span<const double> h_item,
                      std::span<const Index> rows, const ParamStore& head) {
  return sigmoid(head_forward(h_user, h_item, rows, head).logit);
}

Vector head_backward(const HeadForward& fwd, std::span<const Index> rows, double grad_logit,
                     ParamStore& head) {
  const Vector g_h2 = dense_backward(fwd.h2, Vector{fwd.logit}, Vector{grad_logit},
                                     head.value(kMlpW2), head.grad(kMlpW2), head.grad(kMlpB2),
                                     false);
  const Vector g_h1 = dense_backward(fwd.h1, fwd.h2, g_h2, head.value(kMlpW1), head.grad(kMlpW1),
                                     head.grad(kMlpB1), true);
  const Vector g_in = dense_backward(fwd.input, fwd.h1, g_h1, head.value(kMlpW0),
                                     head.grad(kMlpW0), head.grad(kMlpB0), true);
  const std::size_t reprs = fwd.input.size() - fwd.fm.out.size();
  deepfm_backward(rows, fwd.fm, std::span<const double>(g_in).subspan(reprs), head);
  return Vector(g_in.begin(), g_in.begin() + static_cast<long>(reprs));
}

// ---------------------------------------------------------------------------
// Fine-tuning

double finetune_loss(const TargetEncodings& enc, ParamStore& head, ParamStore* intents,
                     std::span<const FinetuneExample> batch,
                     std::span<const std::vector<Index>> rows, bool with_grad) {
  if (batch.size() != rows.size()) throw NumericError("finetune batch / rows size mismatch");
  if (with_grad) {
    head.zero_grad();
    if (intents) intents->zero_grad();
  }
  const std::size_t d = enc.items.cols();
  double loss = 0.0;
  for (std::size_t k = 0; k < batch.size(); ++k) {
    const FinetuneExample& ex = batch[k];
    Vector hat;
    Vector s;
    if (intents) {
      const DenseMatrix& bank = intents->value(kIntentBank);
      s = intent_similarity(enc.raw_users.row(ex.user), bank);
      hat = intent_view(s, bank);
    } else {
      hat.assign(enc.users.row(ex.user).begin(), enc.users.row(ex.user).end());
    }
    const HeadForward f = head_forward(hat, enc.items.row(ex.item), rows[k], head);
    double g = 0.0;
    loss += bce_with_logit(f.logit, ex.label, &g);
    if (!with_grad) continue;
    const Vector g_in = head_backward(f, rows[k], g, head);
    if (intents) {
      const DenseMatrix& bank = intents->value(kIntentBank);
      DenseMatrix& g_bank = intents->grad(kIntentBank);
      const std::span<const double> g_hat(g_in.data(), d);
      for (std::size_t j = 0; j < bank.rows(); ++j) axpy(s[j], g_hat, g_bank.row(j));
      const Vector g_s = matvec(bank, g_hat);
      Vector unused(d, 0.0);
      bank_similarity_backward(enc.raw_users.row(ex.user), bank, s, g_s, unused, g_bank);
    }
  }
  return loss;
}

FinetuneResult finetune(const KnowledgeGraph& source, const Checkpoint& checkpoint,
                        const TargetDomainData& data, const HeadConfig& cfg) {
  cfg.validate();
  const TrainConfig tcfg = TrainConfig::from_kv(checkpoint.config);
  FinetuneResult result;
  const TargetEncodings enc = encode_target(source, checkpoint.params, tcfg, data);
  result.warnings = enc.warnings;
  result.vocab = FieldVocab::build(data);
  result.head = init_head(tcfg.dim, result.vocab.num_fields(), result.vocab.total_size(), cfg);
  if (cfg.unfreeze_intents) {
    ParamStore bank;
    bank.add(kIntentBank, tcfg.n_intents, tcfg.dim) = checkpoint.params.value(kIntentBank);
    result.intents = std::move(bank);
  }
  ParamStore* intents = result.intents ? &*result.intents : nullptr;

  // Fixed training set: logged rows plus k_neg sampled negatives per positive.
  std::vector<std::vector<Index>> liked(data.users.size());
  for (const auto& r : data.train) {
    if (r.label == 1) liked[r.user].push_back(r.item);
  }
  for (auto& l : liked) {
    std::sort(l.begin(), l.end());
    l.erase(std::unique(l.begin(), l.end()), l.end());
  }
  std::vector<Index> universe(data.items.size());
  std::iota(universe.begin(), universe.end(), 0);
  std::vector<FinetuneExample> examples;
  Rng neg_rng(cfg.seed, "ft_negatives");
  for (const auto& r : data.train) {
    examples.push_back({r.user, r.item, r.label});
    if (r.label != 1) continue;
    for (Index neg : sample_negatives(liked[r.user], universe, cfg.k_neg, neg_rng)) {
      examples.push_back({r.user, neg, 0});
    }
  }
  std::vector<std::vector<Index>> rows;
  rows.reserve(examples.size());
  for (const auto& ex : examples) rows.push_back(example_rows(result.vocab, data, ex.user, ex.item));

  const AdamConfig adam{cfg.lr, 0.9, 0.999, 1e-8};
  AdamState head_state, bank_state;
  std::vector<std::size_t> order(examples.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle = Rng(cfg.seed, "ft_shuffle").derive({epoch});
    for (std::size_t k = order.size(); k > 1; --k) {
      std::swap(order[k - 1], order[shuffle.below(k)]);
    }
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      std::vector<FinetuneExample> batch;
      std::vector<std::vector<Index>> batch_rows;
      for (std::size_t k = start; k < stop; ++k) {
        batch.push_back(examples[order[k]]);
        batch_rows.push_back(rows[order[k]]);
      }
      const double loss = finetune_loss(enc, result.head, intents, batch, batch_rows, true);
      if (!std::isfinite(loss)) throw NumericError("fine-tuning diverged (non-finite loss)");
      adam_step(result.head, head_state, adam);
      if (intents) adam_step(*intents, bank_state, adam);
    }
    const double full = finetune_loss(enc, result.head, intents, examples, rows, false);
    result.epoch_loss.push_back(full / static_cast<double>(std::max<std::size_t>(examples.size(), 1)));
  }
  return result;
}

void save_head(const FinetuneResult& result, const HeadConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  save_checkpoint(result.head, cfg.to_kv(), dir / "head");
  write_file(dir / "vocab.json", result.vocab.to_json());
  if (result.intents) save_checkpoint(*result.intents, cfg.to_kv(), dir / "intent_bank");
}

LoadedHead load_head(const fs::path& dir) {
  Checkpoint head = load_checkpoint(dir / "head");
  LoadedHead out{std::move(head.params), HeadConfig::from_kv(head.config), {}, std::nullopt};
  std::ifstream in(dir / "vocab.json", std::ios::binary);
  if (!in) throw DataError("cannot open " + (dir / "vocab.json").string());
  const std::string text{std::istreambuf_iterator<char>(in), {}};
  out.vocab = FieldVocab::from_json(text);
  if (fs::exists(dir / "intent_bank")) out.intents = load_checkpoint(dir / "intent_bank").params;
  return out;
}

}  // namespace hier
