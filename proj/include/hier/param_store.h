#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "hier/config.h"
#include "hier/numerics.h"

namespace hier {

enum class Precision { kFloat64, kFloat32 };

struct ParamSlice {
  std::string name;
  DenseMatrix value;
  DenseMatrix grad;  // same shape as value
  bool trainable = true;
};

// Named parameter slices with a gradient buffer of identical layout.
// Insertion order is the canonical order for checkpoints and optimizers.
class ParamStore {
 public:
  DenseMatrix& add(std::string name, std::size_t rows, std::size_t cols,
                   bool trainable = true);

  bool contains(std::string_view name) const;
  ParamSlice& slice(std::string_view name);
  const ParamSlice& slice(std::string_view name) const;

  DenseMatrix& value(std::string_view name) { return slice(name).value; }
  const DenseMatrix& value(std::string_view name) const { return slice(name).value; }
  DenseMatrix& grad(std::string_view name) { return slice(name).grad; }
  const DenseMatrix& grad(std::string_view name) const { return slice(name).grad; }

  std::vector<ParamSlice>& slices() { return slices_; }
  const std::vector<ParamSlice>& slices() const { return slices_; }

  void zero_grad();

  Precision precision() const { return precision_; }
  // Switching to 32-bit rounds every stored value to float.
  void set_precision(Precision p);
  // Re-applies the storage precision after an in-place update.
  void round_to_precision();

  bool operator==(const ParamStore& other) const;

 private:
  std::vector<ParamSlice> slices_;
  Precision precision_ = Precision::kFloat64;
};

struct Checkpoint {
  ParamStore params;
  KeyValues config;
};

// Writes <dir>/manifest.json (name, shape, offset, dtype per slice plus the
// config) and <dir>/params.bin (little-endian values in manifest order).
void save_checkpoint(const ParamStore& params, const KeyValues& config,
                     const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace hier
