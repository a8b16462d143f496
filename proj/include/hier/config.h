#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace hier {

// Ordered flat `key = value` configuration. Later assignments of the same
// key overwrite earlier ones in place, so the serialised order is stable.
class KeyValues {
 public:
  KeyValues() = default;

  static KeyValues parse(std::string_view text, std::string_view origin = "<string>");
  static KeyValues load(const std::filesystem::path& path);

  void set(std::string key, std::string value);
  // Applies a `key=value` override; throws ConfigError when malformed.
  void apply_override(std::string_view assignment);
  void merge(const KeyValues& other);

  const std::string* find(std::string_view key) const;
  bool empty() const { return entries_.empty(); }
  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  std::string to_text() const;

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

// Typed readers used by the config structs. All throw ConfigError naming
// the key on malformed values.
double parse_real(std::string_view key, std::string_view text);
long long parse_int(std::string_view key, std::string_view text);
bool parse_bool(std::string_view key, std::string_view text);

// Shortest round-trip decimal form of a double.
std::string format_real(double v);

}  // namespace hier
