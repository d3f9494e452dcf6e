#pragma once

// Flat key=value configuration with '#' comments.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mmclip/error.hpp"

namespace mmclip {

class ConfigError : public Error {
 public:
  using Error::Error;
};

class Config {
 public:
  Config() = default;

  /// Parses "key = value" lines. Blank lines and lines starting with '#'
  /// are skipped; text after an unquoted '#' is a comment.
  static Config parse(const std::string& text);
  static Config load(const std::string& path);

  bool contains(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value);
  /// Later entries win.
  void merge(const Config& overrides);

  std::string get(const std::string& key, const std::string& fallback) const;
  std::string require(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  long long get_int(const std::string& key, long long fallback) const;
  std::size_t get_size(const std::string& key, std::size_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  /// Comma-separated numbers.
  std::vector<double> get_doubles(const std::string& key, std::vector<double> fallback) const;
  std::vector<std::uint64_t> get_u64s(const std::string& key,
                                      std::vector<std::uint64_t> fallback) const;

  /// Sorted "key=value" lines.
  std::string canonical() const;
  /// FNV-1a 64 of canonical(), as 16 hex digits.
  std::string hash() const;

  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

std::uint64_t fnv1a64(const std::string& bytes);
std::string hex64(std::uint64_t v);

}  // namespace mmclip
