#include <cstdlib>
#include <cstring>

#include "terra/common.hpp"
#include "terra/kernels.hpp"

namespace terra::kernels {

namespace {

const Backend& select() {
  const char* env = std::getenv("TERRA_SIMD");
  if (env && std::strcmp(env, "auto") != 0) {
    if (std::strcmp(env, "scalar") == 0) return scalar_backend();
    if (std::strcmp(env, "avx2") == 0) {
      const Backend* b = avx2_backend();
      if (!b) raise_invalid("TERRA_SIMD=avx2 requested but AVX2 is unavailable");
      return *b;
    }
    if (std::strcmp(env, "neon") == 0) {
      const Backend* b = neon_backend();
      if (!b) raise_invalid("TERRA_SIMD=neon requested but NEON is unavailable");
      return *b;
    }
    raise_invalid(std::string("unknown TERRA_SIMD value: ") + env);
  }
  if (const Backend* b = avx2_backend()) return *b;
  if (const Backend* b = neon_backend()) return *b;
  return scalar_backend();
}

}  // namespace

const Backend& active() {
  static const Backend& chosen = select();
  return chosen;
}

std::vector<const Backend*> available_backends() {
  std::vector<const Backend*> out{&scalar_backend()};
  if (const Backend* b = avx2_backend()) out.push_back(b);
  if (const Backend* b = neon_backend()) out.push_back(b);
  return out;
}

}  // namespace terra::kernels
