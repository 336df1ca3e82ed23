// SPDX-License-Identifier: Apache-2.0
//
// Flat key=value configuration: one entry per line, '#' starts a comment.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace cwamsn {

/// Shortest text that parses back to exactly `v`.
std::string format_double(double v);

class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text, const std::string& origin = "config");
  static KeyValueConfig load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, std::string value);
  std::optional<std::string> get(const std::string& key) const;

  /// Typed reads; a present but malformed value throws ConfigError naming the key.
  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::size_t get_size(const std::string& key, std::size_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;

  /// Keys never read through a getter; used to reject unknown keys.
  std::vector<std::string> unused_keys() const;

  /// Sorted key=value lines.
  std::string dump() const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
  mutable std::map<std::string, bool> used_;
};

}  // namespace cwamsn
