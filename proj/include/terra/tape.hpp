#pragma once

#include <cstring>
#include <vector>
#include <functional>
#include <type_traits>
#include <utility>
#include <vector>

#include "terra/kernels.hpp"
#include "terra/tensor.hpp"

namespace terra::core {

namespace detail {

// Inner loops route through the dispatch table for float and fall back to
// plain loops for other scalar types (the double instantiation exists for
// finite-difference oracles, not speed).

template <class T>
inline void kadd(const T* a, const T* b, T* o, size_t n) {
  if constexpr (std::is_same_v<T, float>) {
    kernels::active().add(a, b, o, n);
  } else {
    for (size_t i = 0; i < n; ++i) o[i] = a[i] + b[i];
  }
}

template <class T>
inline void ksub(const T* a, const T* b, T* o, size_t n) {
  if constexpr (std::is_same_v<T, float>) {
    kernels::active().sub(a, b, o, n);
  } else {
    for (size_t i = 0; i < n; ++i) o[i] = a[i] - b[i];
  }
}

template <class T>
inline void kmul(const T* a, const T* b, T* o, size_t n) {
  if constexpr (std::is_same_v<T, float>) {
    kernels::active().mul(a, b, o, n);
  } else {
    for (size_t i = 0; i < n; ++i) o[i] = a[i] * b[i];
  }
}

template <class T>
inline void kscale(T alpha, const T* x, T* o, size_t n) {
  if constexpr (std::is_same_v<T, float>) {
    kernels::active().scale(alpha, x, o, n);
  } else {
    for (size_t i = 0; i < n; ++i) o[i] = alpha * x[i];
  }
}

template <class T>
inline void kacc_add(T* acc, const T* x, size_t n) {
  if constexpr (std::is_same_v<T, float>) {
    kernels::active().acc_add(acc, x, n);
  } else {
    for (size_t i = 0; i < n; ++i) acc[i] += x[i];
  }
}

template <class T>
inline void kacc_axpy(T* acc, T alpha, const T* x, size_t n) {
  if constexpr (std::is_same_v<T, float>) {
    kernels::active().acc_axpy(acc, alpha, x, n);
  } else {
    for (size_t i = 0; i < n; ++i) acc[i] += alpha * x[i];
  }
}

template <class T>
inline T kdot(const T* a, const T* b, size_t n) {
  if constexpr (std::is_same_v<T, float>) {
    return kernels::active().dot(a, b, n);
  } else {
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) acc += static_cast<double>(a[i]) * b[i];
    return static_cast<T>(acc);
  }
}

template <class T>
inline T ksum(const T* x, size_t n) {
  if constexpr (std::is_same_v<T, float>) {
    return kernels::active().sum(x, n);
  } else {
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) acc += x[i];
    return static_cast<T>(acc);
  }
}

template <class T>
inline T kmax(const T* x, size_t n) {
  if constexpr (std::is_same_v<T, float>) {
    return kernels::active().max(x, n);
  } else {
    T m = x[0];
    for (size_t i = 1; i < n; ++i) m = x[i] > m ? x[i] : m;
    return m;
  }
}

// C (m x n) = A (m x k) * B (k x n); accumulate adds into C.
template <class T>
inline void kmatmul(const T* a, const T* b, T* c, size_t m, size_t k, size_t n,
                    bool accumulate) {
  if constexpr (std::is_same_v<T, float>) {
    kernels::active().matmul(a, b, c, m, k, n, accumulate);
  } else {
    if (!accumulate) std::memset(c, 0, m * n * sizeof(T));
    for (size_t i = 0; i < m; ++i) {
      const T* arow = a + i * k;
      T* crow = c + i * n;
      for (size_t kk = 0; kk < k; ++kk) {
        T av = arow[kk];
        const T* brow = b + kk * n;
        for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

// C (m x n) += or = A (m x k) * B^T where B is (n x k). B is transposed into
// scratch so the broadcast-row matmul kernel does the arithmetic.
template <class T>
inline void kmatmul_nt(const T* a, const T* b, T* c, size_t m, size_t k, size_t n,
                       bool accumulate) {
  if (m == 1 || k * n < 256) {
    for (size_t i = 0; i < m; ++i) {
      const T* arow = a + i * k;
      T* crow = c + i * n;
      for (size_t j = 0; j < n; ++j) {
        T v = kdot(arow, b + j * k, k);
        crow[j] = accumulate ? crow[j] + v : v;
      }
    }
    return;
  }
  std::vector<T> bt(k * n);
  for (size_t j = 0; j < n; ++j) {
    for (size_t kk = 0; kk < k; ++kk) bt[kk * n + j] = b[j * k + kk];
  }
  kmatmul(a, bt.data(), c, m, k, n, accumulate);
}

// C (k x n) += or = A^T * B where A is (m x k), B is (m x n). The smaller
// operand is transposed so the fast kernel does the arithmetic.
template <class T>
inline void kmatmul_tn(const T* a, const T* b, T* c, size_t m, size_t k, size_t n,
                       bool accumulate) {
  if (k * n >= 256 && m > 1) {
    if (m * n * 2 < m * k) {
      // C^T = B^T A, then transpose-accumulate into C
      std::vector<T> bt(n * m);
      for (size_t i = 0; i < m; ++i) {
        for (size_t j = 0; j < n; ++j) bt[j * m + i] = b[i * n + j];
      }
      std::vector<T> ct(n * k);
      kmatmul(bt.data(), a, ct.data(), n, m, k, false);
      if (accumulate) {
        for (size_t kk = 0; kk < k; ++kk) {
          for (size_t j = 0; j < n; ++j) c[kk * n + j] += ct[j * k + kk];
        }
      } else {
        for (size_t kk = 0; kk < k; ++kk) {
          for (size_t j = 0; j < n; ++j) c[kk * n + j] = ct[j * k + kk];
        }
      }
      return;
    }
    std::vector<T> at(k * m);
    for (size_t i = 0; i < m; ++i) {
      for (size_t kk = 0; kk < k; ++kk) at[kk * m + i] = a[i * k + kk];
    }
    kmatmul(at.data(), b, c, k, m, n, accumulate);
    return;
  }
  if (!accumulate) std::memset(c, 0, k * n * sizeof(T));
  for (size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (size_t kk = 0; kk < k; ++kk) kacc_axpy(c + kk * n, arow[kk], brow, n);
  }
}

}  // namespace detail

template <class T>
class TapeT;

// Handle to a node on a tape.
template <class T>
struct ValT {
  TapeT<T>* tape = nullptr;
  int32_t id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const TensorT<T>& tensor() const;
  const std::vector<int64_t>& shape() const { return tensor().shape; }
};

// Per-node gradients produced by one backward pass. The tape itself is
// untouched by backward, so a second pass over the same tape is valid and
// yields identical results.
template <class T>
class GradientsT {
 public:
  explicit GradientsT(size_t nodes) : grads_(nodes), has_(nodes, 0) {}

  bool has(int32_t id) const { return has_[static_cast<size_t>(id)] != 0; }

  const TensorT<T>& at(int32_t id) const {
    check_input(has(id), "gradients: node has no gradient");
    return grads_[static_cast<size_t>(id)];
  }

  TensorT<T>& accum_slot(int32_t id, const std::vector<int64_t>& shape) {
    auto i = static_cast<size_t>(id);
    if (!has_[i]) {
      grads_[i] = TensorT<T>(shape);
      has_[i] = 1;
    }
    return grads_[i];
  }

 private:
  std::vector<TensorT<T>> grads_;
  std::vector<char> has_;
};

// Reverse-mode tape. Node creation order is a topological order, so the
// backward sweep is a single reverse pass visiting each node once.
template <class T>
class TapeT {
 public:
  using BackFn =
      std::function<void(const TapeT<T>&, int32_t self, const TensorT<T>& gout, GradientsT<T>&)>;

  ValT<T> leaf(TensorT<T> v) { return emit(std::move(v), {}, nullptr); }
  ValT<T> constant(TensorT<T> v) { return emit(std::move(v), {}, nullptr); }

  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

  const TensorT<T>& value(int32_t id) const { return nodes_[static_cast<size_t>(id)].value; }
  size_t size() const { return nodes_.size(); }

  ValT<T> emit(TensorT<T> value, std::vector<int32_t> parents, BackFn back) {
    Node node;
    node.value = std::move(value);
    if (grad_enabled_) {
      node.parents = std::move(parents);
      node.back = std::move(back);
    }
    nodes_.push_back(std::move(node));
    return ValT<T>{this, static_cast<int32_t>(nodes_.size() - 1)};
  }

  GradientsT<T> backward(ValT<T> loss) const {
    check_input(loss.valid() && loss.tape == this, "backward: loss not on this tape");
    check_input(value(loss.id).is_scalar(), "backward: loss must be scalar");
    GradientsT<T> grads(nodes_.size());
    grads.accum_slot(loss.id, value(loss.id).shape).data[0] = T(1);
    run_backward(loss.id, grads);
    return grads;
  }

  // Reverse sweep from externally supplied cotangents; composes with a
  // downstream tape whose leaves are this tape's outputs.
  GradientsT<T> backward_seeded(const std::vector<std::pair<ValT<T>, TensorT<T>>>& seeds) const {
    check_input(!seeds.empty(), "backward_seeded: no seeds");
    GradientsT<T> grads(nodes_.size());
    int32_t top = 0;
    for (const auto& [val, cotangent] : seeds) {
      check_input(val.valid() && val.tape == this, "backward_seeded: value not on this tape");
      check_input(cotangent.shape == value(val.id).shape,
                  "backward_seeded: cotangent shape mismatch");
      auto& slot = grads.accum_slot(val.id, cotangent.shape);
      detail::kacc_add(slot.data.data(), cotangent.data.data(), cotangent.data.size());
      top = std::max(top, val.id);
    }
    run_backward(top, grads);
    return grads;
  }

 private:
  void run_backward(int32_t top, GradientsT<T>& grads) const {
    for (int32_t id = top; id >= 0; --id) {
      const Node& node = nodes_[static_cast<size_t>(id)];
      if (!node.back || !grads.has(id)) continue;
      node.back(*this, id, grads.at(id), grads);
    }
  }

  struct Node {
    TensorT<T> value;
    std::vector<int32_t> parents;
    BackFn back;
  };
  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

template <class T>
const TensorT<T>& ValT<T>::tensor() const {
  return tape->value(id);
}

using Tape = TapeT<float>;
using Val = ValT<float>;
using Gradients = GradientsT<float>;

}  // namespace terra::core
