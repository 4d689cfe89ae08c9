#include <cmath>
#include <vector>

#include "doctest.h"
#include "terra/kernels.hpp"
#include "terra/rng.hpp"

using terra::Rng;
namespace K = terra::kernels;

namespace {

std::vector<float> random_vec(Rng& rng, size_t n, double lo = -2.0, double hi = 2.0) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
  return v;
}

// Vector backends may reassociate, so equality is within a small relative bound.
void expect_close(const std::vector<float>& a, const std::vector<float>& b, double tol) {
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    double denom = std::max({std::abs(double(a[i])), std::abs(double(b[i])), 1.0});
    CHECK(std::abs(double(a[i]) - double(b[i])) / denom < tol);
  }
}

}  // namespace

TEST_CASE("every available backend matches the scalar reference") {
  const auto& ref = K::scalar_backend();
  Rng rng(7);
  // Sizes straddle the vector widths to hit remainder loops.
  std::vector<size_t> sizes = {1, 3, 7, 8, 9, 15, 16, 17, 64, 100, 255};

  for (const K::Backend* b : K::available_backends()) {
    CAPTURE(b->name);
    for (size_t n : sizes) {
      auto x = random_vec(rng, n);
      auto y = random_vec(rng, n);
      std::vector<float> got(n), want(n);

      b->add(x.data(), y.data(), got.data(), n);
      ref.add(x.data(), y.data(), want.data(), n);
      expect_close(got, want, 1e-6);

      b->sub(x.data(), y.data(), got.data(), n);
      ref.sub(x.data(), y.data(), want.data(), n);
      expect_close(got, want, 1e-6);

      b->mul(x.data(), y.data(), got.data(), n);
      ref.mul(x.data(), y.data(), want.data(), n);
      expect_close(got, want, 1e-6);

      b->axpy(0.37f, x.data(), y.data(), got.data(), n);
      ref.axpy(0.37f, x.data(), y.data(), want.data(), n);
      expect_close(got, want, 1e-6);

      b->scale(-1.25f, x.data(), got.data(), n);
      ref.scale(-1.25f, x.data(), want.data(), n);
      expect_close(got, want, 1e-6);

      got = y;
      want = y;
      b->acc_add(got.data(), x.data(), n);
      ref.acc_add(want.data(), x.data(), n);
      expect_close(got, want, 1e-6);

      got = y;
      want = y;
      b->acc_axpy(got.data(), 1.7f, x.data(), n);
      ref.acc_axpy(want.data(), 1.7f, x.data(), n);
      expect_close(got, want, 1e-6);

      CHECK(std::abs(b->dot(x.data(), y.data(), n) - ref.dot(x.data(), y.data(), n)) <
            1e-4 * (1.0 + n));
      CHECK(std::abs(b->sum(x.data(), n) - ref.sum(x.data(), n)) < 1e-4 * (1.0 + n));
      CHECK(b->max(x.data(), n) == ref.max(x.data(), n));
    }
  }
}

TEST_CASE("matmul variants agree with the reference on assorted shapes") {
  const auto& ref = K::scalar_backend();
  Rng rng(11);
  struct Shape {
    size_t m, k, n;
  };
  std::vector<Shape> shapes = {{1, 1, 1}, {2, 3, 4}, {5, 7, 9}, {16, 16, 16},
                               {8, 144, 16}, {13, 64, 33}, {1, 100, 1}};
  for (const K::Backend* b : K::available_backends()) {
    CAPTURE(b->name);
    for (auto [m, k, n] : shapes) {
      auto A = random_vec(rng, m * k);
      auto B = random_vec(rng, k * n);
      std::vector<float> got(m * n, 0.5f), want(m * n, 0.5f);
      b->matmul(A.data(), B.data(), got.data(), m, k, n, false);
      ref.matmul(A.data(), B.data(), want.data(), m, k, n, false);
      expect_close(got, want, 1e-4);
      // accumulate path
      b->matmul(A.data(), B.data(), got.data(), m, k, n, true);
      ref.matmul(A.data(), B.data(), want.data(), m, k, n, true);
      expect_close(got, want, 1e-4);
    }
  }
}

TEST_CASE("power-2 quantization kernels agree bit-exactly across backends") {
  const auto& ref = K::scalar_backend();
  Rng rng(23);
  size_t n = 1003;
  std::vector<float> x(n);
  for (auto& v : x) v = static_cast<float>(rng.uniform(-1.3, 1.3));
  x[0] = 0.0f;
  x[1] = 1.0f;
  x[2] = -1.0f;
  x[3] = 0.25f;

  for (const K::Backend* b : K::available_backends()) {
    CAPTURE(b->name);
    std::vector<int8_t> q8a(n), q8b(n);
    b->quantize_pow2_i8(x.data(), q8a.data(), n, 127.5f, -127, 127);
    ref.quantize_pow2_i8(x.data(), q8b.data(), n, 127.5f, -127, 127);
    CHECK(q8a == q8b);

    std::vector<float> d8a(n), d8b(n);
    b->dequantize_pow2_i8(q8a.data(), d8a.data(), n, 127.5f);
    ref.dequantize_pow2_i8(q8b.data(), d8b.data(), n, 127.5f);
    CHECK(d8a == d8b);

    std::vector<int16_t> q16a(n), q16b(n);
    b->quantize_pow2_i16(x.data(), q16a.data(), n, 32767.5f, -32767, 32767);
    ref.quantize_pow2_i16(x.data(), q16b.data(), n, 32767.5f, -32767, 32767);
    CHECK(q16a == q16b);

    std::vector<float> d16a(n), d16b(n);
    b->dequantize_pow2_i16(q16a.data(), d16a.data(), n, 32767.5f);
    ref.dequantize_pow2_i16(q16b.data(), d16b.data(), n, 32767.5f);
    CHECK(d16a == d16b);
  }
}

TEST_CASE("active backend selection is stable and among the available set") {
  const auto& a = K::active();
  const auto& again = K::active();
  CHECK(&a == &again);
  bool found = false;
  for (const K::Backend* b : K::available_backends()) {
    if (b == &a) found = true;
  }
  CHECK(found);
}
