#include <cmath>
#include <cstring>

#include "doctest.h"
#include "terra/checkpoint.hpp"
#include "terra/grad_check.hpp"
#include "terra/ops.hpp"
#include "terra/rng.hpp"

using namespace terra::core;
using terra::Error;
using terra::Rng;

namespace {

template <class T>
TensorT<T> random_tensor(Rng& rng, std::vector<int64_t> shape, double lo = -1.0, double hi = 1.0) {
  TensorT<T> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

using DVal = ValT<double>;
using DTape = TapeT<double>;
using DTensor = TensorT<double>;

// Finite-difference pass for a scalar expression of one input tensor.
void check_fd(const std::function<DVal(DTape&, DVal)>& f, const DTensor& x, double tol = 1e-6,
              double eps = 1e-5) {
  auto r = grad_check<double>(f, x, eps);
  CAPTURE(r.worst_index);
  CHECK(r.finite);
  CHECK(r.max_rel_error < tol);
}

}  // namespace

TEST_CASE("primitive forward values") {
  Tape tape;

  SUBCASE("matmul by identity returns the operand") {
    Tensor ident({3, 3});
    for (int i = 0; i < 3; ++i) ident.data[static_cast<size_t>(i * 3 + i)] = 1.0f;
    Rng rng(1);
    Tensor a = random_tensor<float>(rng, {3, 3});
    auto out = matmul(tape.leaf(ident), tape.leaf(a));
    for (size_t i = 0; i < 9; ++i) CHECK(out.tensor().data[i] == doctest::Approx(a.data[i]));
  }

  SUBCASE("softmax of a constant row is uniform") {
    auto out = softmax_last(tape.leaf(Tensor({3}, {0.0f, 0.0f, 0.0f})));
    for (auto v : out.tensor().data) CHECK(v == doctest::Approx(1.0f / 3.0f));
  }

  SUBCASE("L2 normalization of [3,4]") {
    auto out = l2_normalize_last(tape.leaf(Tensor({2}, {3.0f, 4.0f})));
    CHECK(out.tensor().data[0] == doctest::Approx(0.6f));
    CHECK(out.tensor().data[1] == doctest::Approx(0.8f));
  }

  SUBCASE("shape mismatch is rejected") {
    auto a = tape.leaf(Tensor({2, 3}));
    auto b = tape.leaf(Tensor({2, 2}));
    CHECK_THROWS_AS((void)add(a, b), Error);
    CHECK_THROWS_AS((void)matmul(a, a), Error);
  }

  SUBCASE("leading-axis broadcast only") {
    auto a = tape.leaf(Tensor({2, 3}));
    auto suffix = tape.leaf(Tensor({3}));
    CHECK_NOTHROW((void)add(a, suffix));
    auto lead = tape.leaf(Tensor({2}));
    CHECK_THROWS_AS((void)add(a, lead), Error);
  }
}

TEST_CASE("scalar derivatives") {
  SUBCASE("d/dx x^2 at 3 is 6") {
    DTape tape;
    auto x = tape.leaf(DTensor::scalar(3.0));
    auto loss = sum_all(pow_const(x, 2.0));
    auto grads = tape.backward(loss);
    CHECK(grads.at(x.id).data[0] == doctest::Approx(6.0));
  }

  SUBCASE("constant has zero gradient") {
    DTape tape;
    auto x = tape.leaf(DTensor::scalar(1.5));
    auto c = tape.constant(DTensor::scalar(7.0));
    auto loss = sum_all(mul(c, c));
    auto grads = tape.backward(loss);
    CHECK_FALSE(grads.has(x.id));
  }

  SUBCASE("non-scalar loss is rejected") {
    DTape tape;
    auto x = tape.leaf(DTensor({2}, {1.0, 2.0}));
    CHECK_THROWS_AS((void)tape.backward(x), Error);
  }
}

TEST_CASE("grad_check: stated examples") {
  SUBCASE("f = sum(x^2) at [1,2] has error below 1e-4") {
    auto r = grad_check<double>(
        [](DTape& t, DVal x) {
          (void)t;
          return sum_all(pow_const(x, 2.0));
        },
        DTensor({2}, {1.0, 2.0}), 1e-3);
    CHECK(r.finite);
    CHECK(r.max_rel_error < 1e-4);
  }

  SUBCASE("constant function has error 0") {
    auto r = grad_check<double>(
        [](DTape& t, DVal x) {
          (void)x;
          return t.constant(DTensor::scalar(4.0));
        },
        DTensor({3}, {1.0, 2.0, 3.0}), 1e-3);
    CHECK(r.finite);
    CHECK(r.max_rel_error == 0.0);
  }

  SUBCASE("non-finite evaluation reports the offending component") {
    auto r = grad_check<double>(
        [](DTape& t, DVal x) {
          (void)t;
          return sum_all(log_op(x));
        },
        DTensor({2}, {1.0, 1e-9}), 1e-3);
    // stepping component 1 by -eps crosses into log of a negative number
    CHECK_FALSE(r.finite);
    CHECK(r.worst_index == 1);
  }
}

TEST_CASE("per-primitive gradients agree with central differences") {
  Rng rng(42);
  // randomized shapes up to 4 axes
  std::vector<std::vector<int64_t>> shapes = {{5}, {3, 4}, {2, 3, 4}, {2, 2, 3, 2}};

  for (const auto& shape : shapes) {
    CAPTURE(shape_str(shape));
    DTensor x = random_tensor<double>(rng, shape, 0.3, 1.7);  // positive: log/pow-safe

    check_fd([](DTape&, DVal v) { return sum_all(pow_const(mul(v, v), 1.0)); }, x);
    check_fd([](DTape&, DVal v) { return mean_all(abs_op(v)); }, x);
    check_fd([](DTape&, DVal v) { return sum_all(log_op(v)); }, x);
    check_fd([](DTape&, DVal v) { return sum_all(exp_op(scale(v, 0.3))); }, x);
    check_fd([](DTape&, DVal v) { return sum_all(pow_const(v, 1.7)); }, x);
    check_fd([](DTape&, DVal v) { return sum_all(gelu(v)); }, x);
    check_fd([](DTape&, DVal v) { return sum_all(mul(softmax_last(v), v)); }, x);
    check_fd([](DTape&, DVal v) { return sum_all(mul(log_softmax_last(v), v)); }, x);
    check_fd([](DTape&, DVal v) { return sum_all(mul(l2_normalize_last(v), v)); }, x);
    check_fd([](DTape&, DVal v) { return sum_all(pow_const(sum_last(v), 2.0)); }, x);
    check_fd(
        [](DTape& t, DVal v) {
          auto gain = t.constant(DTensor::full({v.shape().back()}, 1.2));
          auto bias = t.constant(DTensor::full({v.shape().back()}, 0.1));
          auto y = layer_norm_last(v, gain, bias);
          return sum_all(mul(y, y));
        },
        x, 1e-4);
  }

  SUBCASE("binary ops with broadcast") {
    DTensor a = random_tensor<double>(rng, {3, 4});
    DTensor suffix_c = random_tensor<double>(rng, {4});
    check_fd(
        [&](DTape& t, DVal v) {
          auto suffix = t.constant(suffix_c);
          return sum_all(mul(add(v, suffix), sub(v, suffix)));
        },
        a);
    // gradient w.r.t. the broadcast operand
    DTensor big_c = random_tensor<double>(rng, {3, 4});
    check_fd(
        [&](DTape& t, DVal v) {
          auto big = t.constant(big_c);
          return sum_all(mul(add(big, v), v));
        },
        random_tensor<double>(rng, {4}));
  }

  SUBCASE("matmul and bmm") {
    DTensor a = random_tensor<double>(rng, {3, 4});
    DTensor w_c = random_tensor<double>(rng, {4, 5});
    check_fd(
        [&](DTape& t, DVal v) {
          auto w = t.constant(w_c);
          auto y = matmul(v, w);
          return sum_all(mul(y, y));
        },
        a);
    DTensor q = random_tensor<double>(rng, {2, 3, 4});
    DTensor kt_c = random_tensor<double>(rng, {2, 5, 4});
    check_fd(
        [&](DTape& t, DVal v) {
          auto k = t.constant(kt_c);
          auto y = bmm(v, k, true);
          return sum_all(mul(y, y));
        },
        q);
    DTensor kn_c = random_tensor<double>(rng, {2, 4, 5});
    check_fd(
        [&](DTape& t, DVal v) {
          auto k = t.constant(kn_c);
          auto y = bmm(v, k, false);
          return sum_all(mul(y, y));
        },
        q);
  }

  SUBCASE("conv, resize, crop, permute, concat") {
    DTensor img = random_tensor<double>(rng, {5, 6, 3});
    DTensor cw = random_tensor<double>(rng, {3, 3, 3, 2}, -0.4, 0.4);
    DTensor cb = random_tensor<double>(rng, {2});
    check_fd(
        [&](DTape& t, DVal v) {
          auto w = t.constant(cw);
          auto b = t.constant(cb);
          auto y = conv2d_3x3(v, w, b);
          return sum_all(mul(y, y));
        },
        img, 1e-5);
    check_fd(
        [&](DTape&, DVal v) {
          auto y = bilinear_resize(v, 9, 4);
          return sum_all(mul(y, y));
        },
        img, 1e-5);
    check_fd(
        [&](DTape&, DVal v) {
          auto y = crop2d(v, 1, 2, 3, 3);
          return sum_all(mul(y, y));
        },
        img, 1e-5);
    check_fd(
        [&](DTape&, DVal v) {
          auto y = permute(v, {2, 0, 1});
          return sum_all(mul(y, y));
        },
        img, 1e-5);
    DTensor other_c = random_tensor<double>(rng, {5, 6, 2});
    check_fd(
        [&](DTape& t, DVal v) {
          auto other = t.constant(other_c);
          auto y = concat<double>({v, other}, 2);
          return sum_all(mul(y, y));
        },
        img, 1e-5);
    // conv weight gradient
    DTensor cx = random_tensor<double>(rng, {4, 4, 3});
    check_fd(
        [&](DTape& t, DVal w) {
          auto x = t.constant(cx);
          auto b = t.constant(cb);
          auto y = conv2d_3x3(x, w, b);
          return sum_all(mul(y, y));
        },
        random_tensor<double>(rng, {3, 3, 3, 2}, -0.4, 0.4), 1e-5);
  }

  SUBCASE("attention composite") {
    DTensor q = random_tensor<double>(rng, {2, 3, 4});
    DTensor ak = random_tensor<double>(rng, {2, 5, 4});
    DTensor av = random_tensor<double>(rng, {2, 5, 6});
    check_fd(
        [&](DTape& t, DVal v) {
          auto k = t.constant(ak);
          auto val = t.constant(av);
          auto y = attention(v, k, val);
          return sum_all(mul(y, y));
        },
        q, 1e-5);
  }
}

TEST_CASE("composite expression matches finite differences at the stated setting") {
  // rel 1e-3 at eps 1e-3
  Rng rng(5);
  DTensor x = random_tensor<double>(rng, {2, 3, 4}, 0.2, 1.2);
  DTensor w_c = random_tensor<double>(rng, {4, 4});
  auto r = grad_check<double>(
      [&](DTape& t, DVal v) {
        auto w = t.constant(w_c);
        auto flat = reshape(v, {6, 4});
        auto h = gelu(matmul(flat, w));
        auto sm = softmax_last(h);
        auto n = l2_normalize_last(add(sm, shift(abs_op(flat), 0.1)));
        return mean_all(mul(n, n));
      },
      x, 1e-3);
  CHECK(r.finite);
  CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("forward evaluation is bit-deterministic and tapes are reusable") {
  Rng rng(9);
  Tensor x = random_tensor<float>(rng, {4, 8});
  Tensor w = random_tensor<float>(rng, {8, 8});

  auto run = [&](std::vector<float>* grad_out) {
    Tape tape;
    auto xv = tape.leaf(x);
    auto wv = tape.leaf(w);
    auto y = softmax_last(gelu(matmul(xv, wv)));
    auto loss = mean_all(mul(y, y));
    if (grad_out) {
      auto grads = tape.backward(loss);
      *grad_out = grads.at(wv.id).data;
    }
    return loss.tensor().data[0];
  };

  std::vector<float> g1, g2;
  float l1 = run(&g1);
  float l2 = run(&g2);
  CHECK(std::memcmp(&l1, &l2, sizeof(float)) == 0);
  CHECK(g1 == g2);

  // two backward passes over one tape give identical gradients
  Tape tape;
  auto xv = tape.leaf(x);
  auto wv = tape.leaf(w);
  auto loss = mean_all(mul(matmul(xv, wv), matmul(xv, wv)));
  auto ga = tape.backward(loss);
  auto gb = tape.backward(loss);
  CHECK(ga.at(wv.id).data == gb.at(wv.id).data);
}

TEST_CASE("checkpoint round trip preserves names, shapes and bits") {
  Rng rng(13);
  std::map<std::string, Tensor> params;
  params["encoder.w"] = random_tensor<float>(rng, {3, 5});
  params["encoder.b"] = random_tensor<float>(rng, {5});
  params["head.w"] = random_tensor<float>(rng, {2, 2, 2, 2});

  std::string path = "checkpoint_roundtrip.bin";
  save_checkpoint(path, params);
  auto loaded = load_checkpoint(path);
  REQUIRE(loaded.size() == params.size());
  for (const auto& [name, t] : params) {
    REQUIRE(loaded.count(name) == 1);
    CHECK(loaded[name].shape == t.shape);
    CHECK(loaded[name].data == t.data);
  }
  CHECK_THROWS_AS((void)load_checkpoint("missing_file.bin"), Error);
  std::remove(path.c_str());
}
