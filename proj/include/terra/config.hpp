#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "terra/common.hpp"

namespace terra {

// Flat key=value configuration. '#' starts a comment; blank lines ignored.
// Flags override file values; the effective map is echoed into run manifests
// so experiments diff cleanly.
class Config {
 public:
  Config() = default;

  static Config from_file(const std::string& path);
  static Config from_string(const std::string& text);

  bool has(const std::string& key) const { return kv_.count(key) > 0; }
  void set(const std::string& key, const std::string& value) { kv_[key] = value; }

  std::string get_str(const std::string& key, const std::string& fallback) const;
  int64_t get_int(const std::string& key, int64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  // Canonical text form: sorted keys, one per line.
  std::string to_text() const;
  uint64_t digest() const { return fnv1a(to_text()); }

  const std::map<std::string, std::string>& entries() const { return kv_; }

 private:
  std::map<std::string, std::string> kv_;
};

}  // namespace terra
