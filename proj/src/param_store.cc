#include "hier/param_store.h"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "hier/errors.h"
#include "json.hpp"

namespace hier {

namespace {

const char* dtype_name(Precision p) { return p == Precision::kFloat64 ? "f64" : "f32"; }

void put_le(std::string& out, std::uint64_t bits, int bytes) {
  for (int b = 0; b < bytes; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
}

std::uint64_t get_le(const std::string& in, std::size_t pos, int bytes) {
  std::uint64_t bits = 0;
  for (int b = 0; b < bytes; ++b) {
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + b])) << (8 * b);
  }
  return bits;
}

}  // namespace

DenseMatrix& ParamStore::add(std::string name, std::size_t rows, std::size_t cols,
                             bool trainable) {
  if (contains(name)) throw ConfigError("duplicate parameter slice `" + name + "`");
  slices_.push_back({std::move(name), DenseMatrix(rows, cols), DenseMatrix(rows, cols),
                     trainable});
  return slices_.back().value;
}

bool ParamStore::contains(std::string_view name) const {
  for (const auto& s : slices_) {
    if (s.name == name) return true;
  }
  return false;
}

ParamSlice& ParamStore::slice(std::string_view name) {
  for (auto& s : slices_) {
    if (s.name == name) return s;
  }
  throw ConfigError("unknown parameter slice `" + std::string(name) + "`");
}

const ParamSlice& ParamStore::slice(std::string_view name) const {
  return const_cast<ParamStore*>(this)->slice(name);
}

void ParamStore::zero_grad() {
  for (auto& s : slices_) s.grad.fill(0.0);
}

void ParamStore::set_precision(Precision p) {
  precision_ = p;
  round_to_precision();
}

void ParamStore::round_to_precision() {
  if (precision_ != Precision::kFloat32) return;
  for (auto& s : slices_) {
    for (double& v : s.value.values()) v = static_cast<double>(static_cast<float>(v));
  }
}

bool ParamStore::operator==(const ParamStore& other) const {
  if (slices_.size() != other.slices_.size() || precision_ != other.precision_) return false;
  for (std::size_t k = 0; k < slices_.size(); ++k) {
    const auto& a = slices_[k];
    const auto& b = other.slices_[k];
    if (a.name != b.name || a.trainable != b.trainable) return false;
    if (a.value.rows() != b.value.rows() || a.value.cols() != b.value.cols()) return false;
    // Bitwise comparison so that -0.0 and NaN payloads count as differences.
    if (std::memcmp(a.value.values().data(), b.value.values().data(),
                    a.value.size() * sizeof(double)) != 0) {
      return false;
    }
  }
  return true;
}

void save_checkpoint(const ParamStore& params, const KeyValues& config,
                     const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const int width = params.precision() == Precision::kFloat64 ? 8 : 4;

  nlohmann::ordered_json manifest;
  manifest["format"] = "hier-checkpoint";
  manifest["version"] = 1;
  manifest["dtype"] = dtype_name(params.precision());
  nlohmann::ordered_json cfg = nlohmann::ordered_json::object();
  for (const auto& [k, v] : config.entries()) cfg[k] = v;
  manifest["config"] = cfg;

  std::string blob;
  nlohmann::ordered_json slices = nlohmann::ordered_json::array();
  for (const auto& s : params.slices()) {
    nlohmann::ordered_json entry;
    entry["name"] = s.name;
    entry["shape"] = {s.value.rows(), s.value.cols()};
    entry["offset"] = blob.size();
    entry["dtype"] = dtype_name(params.precision());
    entry["trainable"] = s.trainable;
    slices.push_back(entry);
    for (double v : s.value.values()) {
      if (width == 8) {
        put_le(blob, std::bit_cast<std::uint64_t>(v), 8);
      } else {
        put_le(blob, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
      }
    }
  }
  manifest["slices"] = slices;

  std::ofstream man(dir / "manifest.json", std::ios::binary);
  man << manifest.dump(2) << "\n";
  std::ofstream bin(dir / "params.bin", std::ios::binary);
  bin.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!man || !bin) throw DataError("failed writing checkpoint to " + dir.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream man(dir / "manifest.json", std::ios::binary);
  if (!man) throw DataError("missing checkpoint manifest in " + dir.string());
  nlohmann::ordered_json manifest;
  try {
    manifest = nlohmann::ordered_json::parse(man);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  std::ifstream bin(dir / "params.bin", std::ios::binary);
  if (!bin) throw DataError("missing checkpoint blob in " + dir.string());
  std::stringstream ss;
  ss << bin.rdbuf();
  const std::string blob = ss.str();

  Checkpoint ck;
  const std::string dtype = manifest.at("dtype").get<std::string>();
  const Precision precision = dtype == "f32" ? Precision::kFloat32 : Precision::kFloat64;
  const int width = precision == Precision::kFloat64 ? 8 : 4;
  for (const auto& [k, v] : manifest.at("config").items()) {
    ck.config.set(k, v.get<std::string>());
  }
  for (const auto& entry : manifest.at("slices")) {
    const auto rows = entry.at("shape")[0].get<std::size_t>();
    const auto cols = entry.at("shape")[1].get<std::size_t>();
    const auto offset = entry.at("offset").get<std::size_t>();
    if (offset + rows * cols * width > blob.size()) {
      throw DataError("checkpoint blob too short for slice " +
                      entry.at("name").get<std::string>());
    }
    DenseMatrix& m = ck.params.add(entry.at("name").get<std::string>(), rows, cols,
                                   entry.at("trainable").get<bool>());
    auto values = m.values();
    for (std::size_t k = 0; k < values.size(); ++k) {
      const std::size_t pos = offset + k * width;
      if (width == 8) {
        values[k] = std::bit_cast<double>(get_le(blob, pos, 8));
      } else {
        values[k] = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(blob, pos, 4)));
      }
    }
  }
  ck.params.set_precision(precision);
  return ck;
}

}  // namespace hier
