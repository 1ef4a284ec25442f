#pragma once

// Flat `key = value` configuration. Lines starting with '#' are comments. Keys are
// dotted by convention (e.g. `vq3d.channels = 8,16,32`).

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace rad2ct {

class Config {
 public:
  Config() = default;

  static Config parse(const std::string& text);
  static Config load(const std::filesystem::path& path);

  /// Applies a `key=value` override.
  void apply_override(const std::string& assignment);
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  std::size_t get_size(const std::string& key, std::size_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<std::size_t> get_size_list(const std::string& key, const std::vector<std::size_t>& fallback) const;

  std::vector<double> get_double_list(const std::string& key, const std::vector<double>& fallback) const;
  /// Entries whose key starts with `prefix`, prefix kept.
  Config with_prefix(const std::string& prefix) const;
  void merge(const Config& other);

  /// Sorted `key=value` lines; equal configs give identical text.
  std::string canonical_text() const;
  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

std::string join_sizes(const std::vector<std::size_t>& values);

}  // namespace rad2ct
