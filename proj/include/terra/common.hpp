#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace terra {

// Error taxonomy maps 1:1 onto CLI exit codes (2/3/4).
enum class ErrorKind { invalid_input, numeric, io };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void raise_invalid(const std::string& msg) {
  throw Error(ErrorKind::invalid_input, msg);
}
[[noreturn]] inline void raise_numeric(const std::string& msg) {
  throw Error(ErrorKind::numeric, msg);
}
[[noreturn]] inline void raise_io(const std::string& msg) {
  throw Error(ErrorKind::io, msg);
}

inline void check_input(bool cond, const std::string& msg) {
  if (!cond) raise_invalid(msg);
}

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// FNV-1a, used for config digests and content keys.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a(const std::string& s, uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a(s.data(), s.size(), h);
}

}  // namespace terra
