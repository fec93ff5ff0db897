#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace controlstyle {

/// Flat `key = value` configuration shared by every subcommand.
///
/// One assignment per line; `#` starts a comment; blank lines are ignored.
/// Keys are free-form dotted names (`ae.epochs`, `cs.lambda_style`). Lists
/// are comma separated (`unet.channels = 64, 96, 128`).
class Config {
 public:
  using Map = std::map<std::string, std::string, std::less<>>;

  Config() = default;

  static Config parse(std::string_view text);
  static Config load(const std::filesystem::path& path);

  void set(std::string key, std::string value);
  /// Applies a `key=value` override as given on the command line.
  void apply_override(std::string_view assignment);
  void merge(const Config& other);

  bool contains(std::string_view key) const;
  std::string get_string(std::string_view key, std::string fallback) const;
  int64_t get_int(std::string_view key, int64_t fallback) const;
  double get_double(std::string_view key, double fallback) const;
  bool get_bool(std::string_view key, bool fallback) const;
  std::vector<int64_t> get_int_list(std::string_view key, std::vector<int64_t> fallback) const;

  /// Sorted `key = value` lines; the form hashed into run manifests.
  std::string canonical() const;
  /// FNV-1a 64-bit hash of canonical(), as 16 hex digits.
  std::string hash() const;

  const Map& entries() const { return entries_; }

 private:
  Map entries_;
};

/// FNV-1a 64-bit digest, hex encoded. Used for config and file lineage.
std::string fnv1a_hex(std::string_view bytes);
std::string file_digest(const std::filesystem::path& path);

}  // namespace controlstyle
