#pragma once

#include <algorithm>
#include <cmath>
#include <memory>

#include "terra/tape.hpp"

// Primitive set for the autodiff tape: elementwise arithmetic, matmul,
// 3x3 convolution, softmax / log-softmax, layer and L2 normalization,
// reductions, permutes, bilinear resampling. Broadcasting is restricted to
// leading-axis expansion (second operand's shape must be a suffix of the
// first's, or a single element); anything else requires an explicit reshape.

namespace terra::core {

namespace detail {

template <class T>
inline bool suffix_broadcastable(const TensorT<T>& a, const TensorT<T>& b) {
  if (b.numel() == 1) return true;
  if (b.ndim() > a.ndim()) return false;
  size_t off = a.shape.size() - b.shape.size();
  for (size_t i = 0; i < b.shape.size(); ++i) {
    if (a.shape[off + i] != b.shape[i]) return false;
  }
  return true;
}

template <class T>
inline void check_binary(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
  check_input(suffix_broadcastable(a, b),
              std::string(op) + ": shapes " + shape_str(a.shape) + " and " +
                  shape_str(b.shape) + " do not conform");
}

// Reduce gout over leading blocks into the (smaller) parent's shape.
template <class T>
inline void reduce_into(TensorT<T>& gparent, const TensorT<T>& gout) {
  size_t nb = gparent.data.size();
  size_t total = gout.data.size();
  if (nb == 1) {
    gparent.data[0] += ksum(gout.data.data(), total);
    return;
  }
  for (size_t off = 0; off < total; off += nb) {
    kacc_add(gparent.data.data(), gout.data.data() + off, nb);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops
// ---------------------------------------------------------------------------

template <class T>
ValT<T> add(ValT<T> a, ValT<T> b) {
  const auto& ta = a.tensor();
  const auto& tb = b.tensor();
  detail::check_binary(ta, tb, "add");
  TensorT<T> out(ta.shape);
  size_t nb = tb.data.size();
  if (nb == ta.data.size()) {
    detail::kadd(ta.data.data(), tb.data.data(), out.data.data(), nb);
  } else if (nb == 1) {
    T bv = tb.data[0];
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] + bv;
  } else {
    for (size_t off = 0; off < ta.data.size(); off += nb) {
      detail::kadd(ta.data.data() + off, tb.data.data(), out.data.data() + off, nb);
    }
  }
  return a.tape->emit(std::move(out), {a.id, b.id},
                      [pa = a.id, pb = b.id](const TapeT<T>& t, int32_t, const TensorT<T>& g,
                                             GradientsT<T>& grads) {
                        auto& ga = grads.accum_slot(pa, t.value(pa).shape);
                        detail::kacc_add(ga.data.data(), g.data.data(), g.data.size());
                        auto& gb = grads.accum_slot(pb, t.value(pb).shape);
                        detail::reduce_into(gb, g);
                      });
}

template <class T>
ValT<T> sub(ValT<T> a, ValT<T> b) {
  const auto& ta = a.tensor();
  const auto& tb = b.tensor();
  detail::check_binary(ta, tb, "sub");
  TensorT<T> out(ta.shape);
  size_t nb = tb.data.size();
  if (nb == ta.data.size()) {
    detail::ksub(ta.data.data(), tb.data.data(), out.data.data(), nb);
  } else if (nb == 1) {
    T bv = tb.data[0];
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] - bv;
  } else {
    for (size_t off = 0; off < ta.data.size(); off += nb) {
      detail::ksub(ta.data.data() + off, tb.data.data(), out.data.data() + off, nb);
    }
  }
  return a.tape->emit(std::move(out), {a.id, b.id},
                      [pa = a.id, pb = b.id](const TapeT<T>& t, int32_t, const TensorT<T>& g,
                                             GradientsT<T>& grads) {
                        auto& ga = grads.accum_slot(pa, t.value(pa).shape);
                        detail::kacc_add(ga.data.data(), g.data.data(), g.data.size());
                        auto& gb = grads.accum_slot(pb, t.value(pb).shape);
                        TensorT<T> neg(g.shape);
                        detail::kscale(T(-1), g.data.data(), neg.data.data(), g.data.size());
                        detail::reduce_into(gb, neg);
                      });
}

template <class T>
ValT<T> mul(ValT<T> a, ValT<T> b) {
  const auto& ta = a.tensor();
  const auto& tb = b.tensor();
  detail::check_binary(ta, tb, "mul");
  TensorT<T> out(ta.shape);
  size_t nb = tb.data.size();
  if (nb == ta.data.size()) {
    detail::kmul(ta.data.data(), tb.data.data(), out.data.data(), nb);
  } else if (nb == 1) {
    detail::kscale(tb.data[0], ta.data.data(), out.data.data(), ta.data.size());
  } else {
    for (size_t off = 0; off < ta.data.size(); off += nb) {
      detail::kmul(ta.data.data() + off, tb.data.data(), out.data.data() + off, nb);
    }
  }
  return a.tape->emit(
      std::move(out), {a.id, b.id},
      [pa = a.id, pb = b.id](const TapeT<T>& t, int32_t, const TensorT<T>& g,
                             GradientsT<T>& grads) {
        const auto& ta = t.value(pa);
        const auto& tb = t.value(pb);
        size_t nb = tb.data.size();
        auto& ga = grads.accum_slot(pa, ta.shape);
        if (nb == ta.data.size()) {
          for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * tb.data[i];
        } else if (nb == 1) {
          detail::kacc_axpy(ga.data.data(), tb.data[0], g.data.data(), g.data.size());
        } else {
          for (size_t off = 0; off < g.data.size(); off += nb) {
            for (size_t i = 0; i < nb; ++i) ga.data[off + i] += g.data[off + i] * tb.data[i];
          }
        }
        auto& gb = grads.accum_slot(pb, tb.shape);
        TensorT<T> ag(g.shape);
        detail::kmul(g.data.data(), ta.data.data(), ag.data.data(), g.data.size());
        detail::reduce_into(gb, ag);
      });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

template <class T>
ValT<T> scale(ValT<T> a, double c) {
  const auto& ta = a.tensor();
  TensorT<T> out(ta.shape);
  detail::kscale(static_cast<T>(c), ta.data.data(), out.data.data(), ta.data.size());
  return a.tape->emit(std::move(out), {a.id},
                      [pa = a.id, c](const TapeT<T>& t, int32_t, const TensorT<T>& g,
                                     GradientsT<T>& grads) {
                        auto& ga = grads.accum_slot(pa, t.value(pa).shape);
                        detail::kacc_axpy(ga.data.data(), static_cast<T>(c), g.data.data(),
                                          g.data.size());
                      });
}

template <class T>
ValT<T> shift(ValT<T> a, double c) {
  const auto& ta = a.tensor();
  TensorT<T> out(ta.shape);
  for (size_t i = 0; i < ta.data.size(); ++i) out.data[i] = ta.data[i] + static_cast<T>(c);
  return a.tape->emit(std::move(out), {a.id},
                      [pa = a.id](const TapeT<T>& t, int32_t, const TensorT<T>& g,
                                  GradientsT<T>& grads) {
                        auto& ga = grads.accum_slot(pa, t.value(pa).shape);
                        detail::kacc_add(ga.data.data(), g.data.data(), g.data.size());
                      });
}

template <class T>
ValT<T> neg(ValT<T> a) {
  return scale(a, -1.0);
}

template <class T>
ValT<T> abs_op(ValT<T> a) {
  const auto& ta = a.tensor();
  TensorT<T> out(ta.shape);
  for (size_t i = 0; i < ta.data.size(); ++i) out.data[i] = std::abs(ta.data[i]);
  return a.tape->emit(std::move(out), {a.id},
                      [pa = a.id](const TapeT<T>& t, int32_t, const TensorT<T>& g,
                                  GradientsT<T>& grads) {
                        const auto& ta = t.value(pa);
                        auto& ga = grads.accum_slot(pa, ta.shape);
                        for (size_t i = 0; i < g.data.size(); ++i) {
                          T s = ta.data[i] > T(0) ? T(1) : (ta.data[i] < T(0) ? T(-1) : T(0));
                          ga.data[i] += s * g.data[i];
                        }
                      });
}

template <class T>
ValT<T> pow_const(ValT<T> a, double p) {
  const auto& ta = a.tensor();
  TensorT<T> out(ta.shape);
  for (size_t i = 0; i < ta.data.size(); ++i) {
    out.data[i] = static_cast<T>(std::pow(static_cast<double>(ta.data[i]), p));
  }
  return a.tape->emit(std::move(out), {a.id},
                      [pa = a.id, p](const TapeT<T>& t, int32_t, const TensorT<T>& g,
                                     GradientsT<T>& grads) {
                        const auto& ta = t.value(pa);
                        auto& ga = grads.accum_slot(pa, ta.shape);
                        for (size_t i = 0; i < g.data.size(); ++i) {
                          double d = p * std::pow(static_cast<double>(ta.data[i]), p - 1.0);
                          ga.data[i] += static_cast<T>(d) * g.data[i];
                        }
                      });
}

template <class T>
ValT<T> log_op(ValT<T> a) {
  const auto& ta = a.tensor();
  TensorT<T> out(ta.shape);
  for (size_t i = 0; i < ta.data.size(); ++i) {
    if (!(ta.data[i] > T(0))) raise_numeric("log: nonpositive input");
    out.data[i] = std::log(ta.data[i]);
  }
  return a.tape->emit(std::move(out), {a.id},
                      [pa = a.id](const TapeT<T>& t, int32_t, const TensorT<T>& g,
                                  GradientsT<T>& grads) {
                        const auto& ta = t.value(pa);
                        auto& ga = grads.accum_slot(pa, ta.shape);
                        for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] / ta.data[i];
                      });
}

template <class T>
ValT<T> exp_op(ValT<T> a) {
  const auto& ta = a.tensor();
  TensorT<T> out(ta.shape);
  for (size_t i = 0; i < ta.data.size(); ++i) out.data[i] = std::exp(ta.data[i]);
  return a.tape->emit(std::move(out), {a.id},
                      [pa = a.id](const TapeT<T>& t, int32_t self, const TensorT<T>& g,
                                  GradientsT<T>& grads) {
                        const auto& y = t.value(self);
                        auto& ga = grads.accum_slot(pa, t.value(pa).shape);
                        for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * y.data[i];
                      });
}

// Exact GELU, x * Phi(x).
template <class T>
ValT<T> gelu(ValT<T> a) {
  const auto& ta = a.tensor();
  TensorT<T> out(ta.shape);
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  for (size_t i = 0; i < ta.data.size(); ++i) {
    double x = ta.data[i];
    out.data[i] = static_cast<T>(0.5 * x * (1.0 + std::erf(x * inv_sqrt2)));
  }
  return a.tape->emit(
      std::move(out), {a.id},
      [pa = a.id](const TapeT<T>& t, int32_t, const TensorT<T>& g, GradientsT<T>& grads) {
        const auto& ta = t.value(pa);
        auto& ga = grads.accum_slot(pa, ta.shape);
        constexpr double inv_sqrt2 = 0.70710678118654752440;
        constexpr double inv_sqrt2pi = 0.39894228040143267794;
        for (size_t i = 0; i < g.data.size(); ++i) {
          double x = ta.data[i];
          double phi = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
          double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
          ga.data[i] += static_cast<T>(phi + x * pdf) * g.data[i];
        }
      });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <class T>
ValT<T> reshape(ValT<T> a, std::vector<int64_t> shape) {
  const auto& ta = a.tensor();
  check_input(TensorT<T>::numel_of(shape) == ta.numel(), "reshape: element count mismatch");
  TensorT<T> out(std::move(shape), ta.data);
  return a.tape->emit(std::move(out), {a.id},
                      [pa = a.id](const TapeT<T>& t, int32_t, const TensorT<T>& g,
                                  GradientsT<T>& grads) {
                        auto& ga = grads.accum_slot(pa, t.value(pa).shape);
                        detail::kacc_add(ga.data.data(), g.data.data(), g.data.size());
                      });
}

namespace detail {

inline std::vector<int64_t> permuted_shape(const std::vector<int64_t>& s,
                                           const std::vector<int>& axes) {
  std::vector<int64_t> out(s.size());
  for (size_t i = 0; i < axes.size(); ++i) out[i] = s[static_cast<size_t>(axes[i])];
  return out;
}

template <class T>
void permute_copy(const TensorT<T>& src, const std::vector<int>& axes, TensorT<T>& dst) {
  int nd = src.ndim();
  std::vector<int64_t> sstride(nd, 1);
  for (int i = nd - 2; i >= 0; --i) sstride[i] = sstride[i + 1] * src.shape[i + 1];
  std::vector<int64_t> dshape = dst.shape;
  std::vector<int64_t> idx(nd, 0);
  size_t total = src.data.size();
  for (size_t lin = 0; lin < total; ++lin) {
    int64_t soff = 0;
    for (int i = 0; i < nd; ++i) soff += idx[i] * sstride[static_cast<size_t>(axes[i])];
    dst.data[lin] = src.data[static_cast<size_t>(soff)];
    for (int i = nd - 1; i >= 0; --i) {
      if (++idx[i] < dshape[i]) break;
      idx[i] = 0;
    }
  }
}

}  // namespace detail

template <class T>
ValT<T> permute(ValT<T> a, std::vector<int> axes) {
  const auto& ta = a.tensor();
  check_input(static_cast<int>(axes.size()) == ta.ndim(), "permute: axis count mismatch");
  TensorT<T> out(detail::permuted_shape(ta.shape, axes));
  detail::permute_copy(ta, axes, out);
  return a.tape->emit(std::move(out), {a.id},
                      [pa = a.id, axes](const TapeT<T>& t, int32_t, const TensorT<T>& g,
                                        GradientsT<T>& grads) {
                        std::vector<int> inv(axes.size());
                        for (size_t i = 0; i < axes.size(); ++i) inv[static_cast<size_t>(axes[i])] = static_cast<int>(i);
                        const auto& ta = t.value(pa);
                        TensorT<T> gp(ta.shape);
                        detail::permute_copy(g, inv, gp);
                        auto& ga = grads.accum_slot(pa, ta.shape);
                        detail::kacc_add(ga.data.data(), gp.data.data(), gp.data.size());
                      });
}

template <class T>
ValT<T> concat(const std::vector<ValT<T>>& parts, int axis) {
  check_input(!parts.empty(), "concat: no inputs");
  const auto& first = parts[0].tensor();
  int nd = first.ndim();
  check_input(axis >= 0 && axis < nd, "concat: bad axis");
  std::vector<int64_t> shape = first.shape;
  int64_t axis_total = 0;
  for (const auto& p : parts) {
    const auto& tp = p.tensor();
    check_input(tp.ndim() == nd, "concat: rank mismatch");
    for (int i = 0; i < nd; ++i) {
      if (i != axis) check_input(tp.shape[i] == shape[i], "concat: extent mismatch");
    }
    axis_total += tp.shape[axis];
  }
  shape[axis] = axis_total;
  TensorT<T> out(shape);

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[i];
  for (int i = axis + 1; i < nd; ++i) inner *= shape[i];
  int64_t out_row = axis_total * inner;

  std::vector<int32_t> ids;
  std::vector<int64_t> offsets;    // element offset of each part within a row
  std::vector<int64_t> part_rows;  // elements each part contributes per row
  int64_t acc = 0;
  for (const auto& p : parts) {
    ids.push_back(p.id);
    offsets.push_back(acc * inner);
    part_rows.push_back(p.tensor().shape[axis] * inner);
    acc += p.tensor().shape[axis];
  }
  for (size_t pi = 0; pi < parts.size(); ++pi) {
    const auto& tp = parts[pi].tensor();
    for (int64_t o = 0; o < outer; ++o) {
      std::copy(tp.data.begin() + o * part_rows[pi], tp.data.begin() + (o + 1) * part_rows[pi],
                out.data.begin() + o * out_row + offsets[pi]);
    }
  }
  return parts[0].tape->emit(
      std::move(out), ids,
      [ids, offsets, part_rows, outer, out_row](const TapeT<T>& t, int32_t, const TensorT<T>& g,
                                                GradientsT<T>& grads) {
        for (size_t pi = 0; pi < ids.size(); ++pi) {
          auto& gp = grads.accum_slot(ids[pi], t.value(ids[pi]).shape);
          for (int64_t o = 0; o < outer; ++o) {
            detail::kacc_add(gp.data.data() + o * part_rows[pi],
                             g.data.data() + o * out_row + offsets[pi],
                             static_cast<size_t>(part_rows[pi]));
          }
        }
      });
}

// Crop rows/cols from a (H, W, C) grid.
template <class T>
ValT<T> crop2d(ValT<T> a, int64_t r0, int64_t c0, int64_t h, int64_t w) {
  const auto& ta = a.tensor();
  check_input(ta.ndim() == 3, "crop2d: expected (H, W, C)");
  int64_t H = ta.shape[0], W = ta.shape[1], C = ta.shape[2];
  check_input(r0 >= 0 && c0 >= 0 && h > 0 && w > 0 && r0 + h <= H && c0 + w <= W,
              "crop2d: window out of bounds");
  TensorT<T> out({h, w, C});
  for (int64_t r = 0; r < h; ++r) {
    const T* src = ta.data.data() + ((r0 + r) * W + c0) * C;
    std::copy(src, src + w * C, out.data.data() + r * w * C);
  }
  return a.tape->emit(std::move(out), {a.id},
                      [pa = a.id, r0, c0, h, w](const TapeT<T>& t, int32_t, const TensorT<T>& g,
                                                GradientsT<T>& grads) {
                        const auto& ta = t.value(pa);
                        int64_t W = ta.shape[1], C = ta.shape[2];
                        auto& ga = grads.accum_slot(pa, ta.shape);
                        for (int64_t r = 0; r < h; ++r) {
                          detail::kacc_add(ga.data.data() + ((r0 + r) * W + c0) * C,
                                           g.data.data() + r * w * C,
                                           static_cast<size_t>(w * C));
                        }
                      });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <class T>
ValT<T> matmul(ValT<T> a, ValT<T> b) {
  const auto& ta = a.tensor();
  const auto& tb = b.tensor();
  check_input(ta.ndim() == 2 && tb.ndim() == 2, "matmul: expected 2-D operands");
  check_input(ta.shape[1] == tb.shape[0], "matmul: inner extents differ: " +
                                              shape_str(ta.shape) + " x " + shape_str(tb.shape));
  int64_t m = ta.shape[0], k = ta.shape[1], n = tb.shape[1];
  TensorT<T> out({m, n});
  detail::kmatmul(ta.data.data(), tb.data.data(), out.data.data(), m, k, n, false);
  return a.tape->emit(
      std::move(out), {a.id, b.id},
      [pa = a.id, pb = b.id, m, k, n](const TapeT<T>& t, int32_t, const TensorT<T>& g,
                                      GradientsT<T>& grads) {
        const auto& ta = t.value(pa);
        const auto& tb = t.value(pb);
        auto& ga = grads.accum_slot(pa, ta.shape);
        detail::kmatmul_nt(g.data.data(), tb.data.data(), ga.data.data(), m, n, k, true);
        auto& gb = grads.accum_slot(pb, tb.shape);
        detail::kmatmul_tn(ta.data.data(), g.data.data(), gb.data.data(), m, k, n, true);
      });
}

// Batched matmul over a shared leading axis. With transpose_b, computes
// a (B,m,k) x b (B,n,k)^T -> (B,m,n).
template <class T>
ValT<T> bmm(ValT<T> a, ValT<T> b, bool transpose_b = false) {
  const auto& ta = a.tensor();
  const auto& tb = b.tensor();
  check_input(ta.ndim() == 3 && tb.ndim() == 3, "bmm: expected 3-D operands");
  check_input(ta.shape[0] == tb.shape[0], "bmm: batch extents differ");
  int64_t B = ta.shape[0], m = ta.shape[1], k = ta.shape[2];
  int64_t n = transpose_b ? tb.shape[1] : tb.shape[2];
  check_input(transpose_b ? tb.shape[2] == k : tb.shape[1] == k, "bmm: inner extents differ");
  TensorT<T> out({B, m, n});
  for (int64_t i = 0; i < B; ++i) {
    const T* pa_ = ta.data.data() + i * m * k;
    const T* pb_ = tb.data.data() + i * (transpose_b ? n * k : k * n);
    T* pc = out.data.data() + i * m * n;
    if (transpose_b) {
      detail::kmatmul_nt(pa_, pb_, pc, m, k, n, false);
    } else {
      detail::kmatmul(pa_, pb_, pc, m, k, n, false);
    }
  }
  return a.tape->emit(
      std::move(out), {a.id, b.id},
      [pa = a.id, pb = b.id, B, m, k, n, transpose_b](const TapeT<T>& t, int32_t,
                                                      const TensorT<T>& g, GradientsT<T>& grads) {
        const auto& ta = t.value(pa);
        const auto& tb = t.value(pb);
        auto& ga = grads.accum_slot(pa, ta.shape);
        auto& gb = grads.accum_slot(pb, tb.shape);
        for (int64_t i = 0; i < B; ++i) {
          const T* gi = g.data.data() + i * m * n;
          const T* ai = ta.data.data() + i * m * k;
          const T* bi = tb.data.data() + i * (transpose_b ? n * k : k * n);
          T* gai = ga.data.data() + i * m * k;
          T* gbi = gb.data.data() + i * (transpose_b ? n * k : k * n);
          if (transpose_b) {
            // out = a x b^T: ga += g x b; gb += g^T x a
            detail::kmatmul(gi, bi, gai, m, n, k, true);
            detail::kmatmul_tn(gi, ai, gbi, m, n, k, true);
          } else {
            detail::kmatmul_nt(gi, bi, gai, m, n, k, true);
            detail::kmatmul_tn(ai, gi, gbi, m, k, n, true);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Row-wise normalizations (over the last axis)
// ---------------------------------------------------------------------------

template <class T>
ValT<T> softmax_last(ValT<T> a) {
  const auto& ta = a.tensor();
  check_input(ta.ndim() >= 1, "softmax: rank-0 input");
  int64_t cols = ta.shape.back();
  int64_t rows = ta.numel() / cols;
  TensorT<T> out(ta.shape);
  for (int64_t r = 0; r < rows; ++r) {
    const T* x = ta.data.data() + r * cols;
    T* y = out.data.data() + r * cols;
    T mx = detail::kmax(x, static_cast<size_t>(cols));
    double total = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      y[j] = std::exp(x[j] - mx);
      total += y[j];
    }
    T inv = static_cast<T>(1.0 / total);
    detail::kscale(inv, y, y, static_cast<size_t>(cols));
  }
  return a.tape->emit(
      std::move(out), {a.id},
      [pa = a.id, rows, cols](const TapeT<T>& t, int32_t self, const TensorT<T>& g,
                              GradientsT<T>& grads) {
        const auto& y = t.value(self);
        auto& ga = grads.accum_slot(pa, t.value(pa).shape);
        for (int64_t r = 0; r < rows; ++r) {
          const T* yr = y.data.data() + r * cols;
          const T* gr = g.data.data() + r * cols;
          T* gar = ga.data.data() + r * cols;
          T gy = detail::kdot(gr, yr, static_cast<size_t>(cols));
          for (int64_t j = 0; j < cols; ++j) gar[j] += yr[j] * (gr[j] - gy);
        }
      });
}

template <class T>
ValT<T> log_softmax_last(ValT<T> a) {
  const auto& ta = a.tensor();
  check_input(ta.ndim() >= 1, "log_softmax: rank-0 input");
  int64_t cols = ta.shape.back();
  int64_t rows = ta.numel() / cols;
  TensorT<T> out(ta.shape);
  for (int64_t r = 0; r < rows; ++r) {
    const T* x = ta.data.data() + r * cols;
    T* y = out.data.data() + r * cols;
    T mx = detail::kmax(x, static_cast<size_t>(cols));
    double total = 0.0;
    for (int64_t j = 0; j < cols; ++j) total += std::exp(static_cast<double>(x[j] - mx));
    T lse = mx + static_cast<T>(std::log(total));
    for (int64_t j = 0; j < cols; ++j) y[j] = x[j] - lse;
  }
  return a.tape->emit(
      std::move(out), {a.id},
      [pa = a.id, rows, cols](const TapeT<T>& t, int32_t self, const TensorT<T>& g,
                              GradientsT<T>& grads) {
        const auto& y = t.value(self);
        auto& ga = grads.accum_slot(pa, t.value(pa).shape);
        for (int64_t r = 0; r < rows; ++r) {
          const T* yr = y.data.data() + r * cols;
          const T* gr = g.data.data() + r * cols;
          T* gar = ga.data.data() + r * cols;
          T gsum = detail::ksum(gr, static_cast<size_t>(cols));
          for (int64_t j = 0; j < cols; ++j) gar[j] += gr[j] - std::exp(yr[j]) * gsum;
        }
      });
}

template <class T>
ValT<T> layer_norm_last(ValT<T> x, ValT<T> gain, ValT<T> bias, double eps = 1e-5) {
  const auto& tx = x.tensor();
  int64_t cols = tx.shape.back();
  int64_t rows = tx.numel() / cols;
  check_input(gain.tensor().numel() == cols && bias.tensor().numel() == cols,
              "layer_norm: gain/bias extent mismatch");
  TensorT<T> out(tx.shape);
  const T* gn = gain.tensor().data.data();
  const T* bs = bias.tensor().data.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = tx.data.data() + r * cols;
    T* yr = out.data.data() + r * cols;
    double mean = detail::ksum(xr, static_cast<size_t>(cols)) / static_cast<double>(cols);
    double var = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      double d = xr[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    double inv = 1.0 / std::sqrt(var + eps);
    for (int64_t j = 0; j < cols; ++j) {
      yr[j] = static_cast<T>((xr[j] - mean) * inv) * gn[j] + bs[j];
    }
  }
  return x.tape->emit(
      std::move(out), {x.id, gain.id, bias.id},
      [px = x.id, pg = gain.id, pb = bias.id, rows, cols, eps](
          const TapeT<T>& t, int32_t, const TensorT<T>& g, GradientsT<T>& grads) {
        const auto& tx = t.value(px);
        const auto& tg = t.value(pg);
        auto& gx = grads.accum_slot(px, tx.shape);
        auto& gg = grads.accum_slot(pg, tg.shape);
        auto& gb = grads.accum_slot(pb, t.value(pb).shape);
        const T* gn = tg.data.data();
        std::vector<double> norm(static_cast<size_t>(cols));
        for (int64_t r = 0; r < rows; ++r) {
          const T* xr = tx.data.data() + r * cols;
          const T* gr = g.data.data() + r * cols;
          T* gxr = gx.data.data() + r * cols;
          double mean = detail::ksum(xr, static_cast<size_t>(cols)) / static_cast<double>(cols);
          double var = 0.0;
          for (int64_t j = 0; j < cols; ++j) {
            double d = xr[j] - mean;
            var += d * d;
          }
          var /= static_cast<double>(cols);
          double inv = 1.0 / std::sqrt(var + eps);
          double mean_gy = 0.0, mean_gyn = 0.0;
          for (int64_t j = 0; j < cols; ++j) {
            norm[static_cast<size_t>(j)] = (xr[j] - mean) * inv;
            double gy = static_cast<double>(gr[j]) * gn[j];
            mean_gy += gy;
            mean_gyn += gy * norm[static_cast<size_t>(j)];
          }
          mean_gy /= static_cast<double>(cols);
          mean_gyn /= static_cast<double>(cols);
          for (int64_t j = 0; j < cols; ++j) {
            double gy = static_cast<double>(gr[j]) * gn[j];
            gxr[j] += static_cast<T>(inv * (gy - mean_gy - norm[static_cast<size_t>(j)] * mean_gyn));
            gg.data[static_cast<size_t>(j)] += gr[j] * static_cast<T>(norm[static_cast<size_t>(j)]);
            gb.data[static_cast<size_t>(j)] += gr[j];
          }
        }
      });
}

// Rows scaled to unit L2 norm. Rows with norm below `floor` are rejected.
template <class T>
ValT<T> l2_normalize_last(ValT<T> a, double floor = 1e-12) {
  const auto& ta = a.tensor();
  int64_t cols = ta.shape.back();
  int64_t rows = ta.numel() / cols;
  TensorT<T> out(ta.shape);
  for (int64_t r = 0; r < rows; ++r) {
    const T* x = ta.data.data() + r * cols;
    T* y = out.data.data() + r * cols;
    double nsq = 0.0;
    for (int64_t j = 0; j < cols; ++j) nsq += static_cast<double>(x[j]) * x[j];
    double norm = std::sqrt(nsq);
    if (!(norm > floor)) raise_numeric("l2_normalize: zero-norm row");
    T inv = static_cast<T>(1.0 / norm);
    detail::kscale(inv, x, y, static_cast<size_t>(cols));
  }
  return a.tape->emit(
      std::move(out), {a.id},
      [pa = a.id, rows, cols](const TapeT<T>& t, int32_t self, const TensorT<T>& g,
                              GradientsT<T>& grads) {
        const auto& ta = t.value(pa);
        const auto& y = t.value(self);
        auto& ga = grads.accum_slot(pa, ta.shape);
        for (int64_t r = 0; r < rows; ++r) {
          const T* xr = ta.data.data() + r * cols;
          const T* yr = y.data.data() + r * cols;
          const T* gr = g.data.data() + r * cols;
          T* gar = ga.data.data() + r * cols;
          double nsq = 0.0;
          for (int64_t j = 0; j < cols; ++j) nsq += static_cast<double>(xr[j]) * xr[j];
          double inv = 1.0 / std::sqrt(nsq);
          double gy = 0.0;
          for (int64_t j = 0; j < cols; ++j) gy += static_cast<double>(gr[j]) * yr[j];
          for (int64_t j = 0; j < cols; ++j) {
            gar[j] += static_cast<T>(inv * (gr[j] - yr[j] * gy));
          }
        }
      });
}

// Scale each row of a (..., C) tensor by the matching entry of a rank-1
// tensor with one value per row.
template <class T>
ValT<T> scale_rows(ValT<T> a, ValT<T> s) {
  const auto& ta = a.tensor();
  const auto& ts = s.tensor();
  check_input(ta.ndim() >= 2, "scale_rows: need at least 2 axes");
  int64_t cols = ta.shape.back();
  int64_t rows = ta.numel() / cols;
  check_input(ts.numel() == rows, "scale_rows: row-count mismatch");
  TensorT<T> out(ta.shape);
  for (int64_t r = 0; r < rows; ++r) {
    detail::kscale(ts.data[static_cast<size_t>(r)], ta.data.data() + r * cols,
                   out.data.data() + r * cols, static_cast<size_t>(cols));
  }
  return a.tape->emit(
      std::move(out), {a.id, s.id},
      [pa = a.id, ps = s.id, rows, cols](const TapeT<T>& t, int32_t, const TensorT<T>& g,
                                         GradientsT<T>& grads) {
        const auto& ta = t.value(pa);
        const auto& ts = t.value(ps);
        auto& ga = grads.accum_slot(pa, ta.shape);
        auto& gs = grads.accum_slot(ps, ts.shape);
        for (int64_t r = 0; r < rows; ++r) {
          detail::kacc_axpy(ga.data.data() + r * cols, ts.data[static_cast<size_t>(r)],
                            g.data.data() + r * cols, static_cast<size_t>(cols));
          gs.data[static_cast<size_t>(r)] += detail::kdot(
              g.data.data() + r * cols, ta.data.data() + r * cols, static_cast<size_t>(cols));
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class T>
ValT<T> sum_all(ValT<T> a) {
  const auto& ta = a.tensor();
  TensorT<T> out = TensorT<T>::scalar(detail::ksum(ta.data.data(), ta.data.size()));
  return a.tape->emit(std::move(out), {a.id},
                      [pa = a.id](const TapeT<T>& t, int32_t, const TensorT<T>& g,
                                  GradientsT<T>& grads) {
                        auto& ga = grads.accum_slot(pa, t.value(pa).shape);
                        T gv = g.data[0];
                        for (auto& v : ga.data) v += gv;
                      });
}

template <class T>
ValT<T> mean_all(ValT<T> a) {
  const auto& ta = a.tensor();
  check_input(ta.numel() > 0, "mean: empty tensor");
  return scale(sum_all(a), 1.0 / static_cast<double>(ta.numel()));
}

// Sum over the last axis; output drops that axis (scalar stays rank-1).
template <class T>
ValT<T> sum_last(ValT<T> a) {
  const auto& ta = a.tensor();
  check_input(ta.ndim() >= 1, "sum_last: rank-0 input");
  int64_t cols = ta.shape.back();
  int64_t rows = ta.numel() / cols;
  std::vector<int64_t> shape(ta.shape.begin(), ta.shape.end() - 1);
  if (shape.empty()) shape.push_back(1);
  TensorT<T> out(shape);
  for (int64_t r = 0; r < rows; ++r) {
    out.data[static_cast<size_t>(r)] =
        detail::ksum(ta.data.data() + r * cols, static_cast<size_t>(cols));
  }
  return a.tape->emit(std::move(out), {a.id},
                      [pa = a.id, rows, cols](const TapeT<T>& t, int32_t, const TensorT<T>& g,
                                              GradientsT<T>& grads) {
                        auto& ga = grads.accum_slot(pa, t.value(pa).shape);
                        for (int64_t r = 0; r < rows; ++r) {
                          T gv = g.data[static_cast<size_t>(r)];
                          T* row = ga.data.data() + r * cols;
                          for (int64_t j = 0; j < cols; ++j) row[j] += gv;
                        }
                      });
}

// ---------------------------------------------------------------------------
// 3x3 convolution (same padding) over (H, W, Cin) with (3, 3, Cin, Cout)
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void im2col_3x3(const TensorT<T>& x, std::vector<T>& col) {
  int64_t H = x.shape[0], W = x.shape[1], C = x.shape[2];
  col.assign(static_cast<size_t>(H * W * 9 * C), T(0));
  for (int64_t r = 0; r < H; ++r) {
    for (int64_t c = 0; c < W; ++c) {
      T* dst = col.data() + (r * W + c) * 9 * C;
      for (int64_t dr = -1; dr <= 1; ++dr) {
        for (int64_t dc = -1; dc <= 1; ++dc) {
          int64_t rr = r + dr, cc = c + dc;
          T* cell = dst + ((dr + 1) * 3 + (dc + 1)) * C;
          if (rr >= 0 && rr < H && cc >= 0 && cc < W) {
            const T* src = x.data.data() + (rr * W + cc) * C;
            std::copy(src, src + C, cell);
          }
        }
      }
    }
  }
}

template <class T>
void col2im_3x3(const std::vector<T>& col, TensorT<T>& gx) {
  int64_t H = gx.shape[0], W = gx.shape[1], C = gx.shape[2];
  for (int64_t r = 0; r < H; ++r) {
    for (int64_t c = 0; c < W; ++c) {
      const T* src = col.data() + (r * W + c) * 9 * C;
      for (int64_t dr = -1; dr <= 1; ++dr) {
        for (int64_t dc = -1; dc <= 1; ++dc) {
          int64_t rr = r + dr, cc = c + dc;
          if (rr < 0 || rr >= H || cc < 0 || cc >= W) continue;
          kacc_add(gx.data.data() + (rr * W + cc) * C,
                   src + ((dr + 1) * 3 + (dc + 1)) * C, static_cast<size_t>(C));
        }
      }
    }
  }
}

}  // namespace detail

template <class T>
ValT<T> conv2d_3x3(ValT<T> x, ValT<T> w, ValT<T> bias) {
  const auto& tx = x.tensor();
  const auto& tw = w.tensor();
  check_input(tx.ndim() == 3, "conv2d: input must be (H, W, C)");
  check_input(tw.ndim() == 4 && tw.shape[0] == 3 && tw.shape[1] == 3,
              "conv2d: weights must be (3, 3, Cin, Cout)");
  check_input(tw.shape[2] == tx.shape[2], "conv2d: channel mismatch");
  int64_t H = tx.shape[0], W = tx.shape[1], Cin = tx.shape[2], Cout = tw.shape[3];
  check_input(bias.tensor().numel() == Cout, "conv2d: bias extent mismatch");

  auto col = std::make_shared<std::vector<T>>();
  detail::im2col_3x3(tx, *col);
  TensorT<T> out({H, W, Cout});
  detail::kmatmul(col->data(), tw.data.data(), out.data.data(), H * W, 9 * Cin, Cout, false);
  const T* b = bias.tensor().data.data();
  for (int64_t p = 0; p < H * W; ++p) {
    detail::kacc_add(out.data.data() + p * Cout, b, static_cast<size_t>(Cout));
  }
  // the im2col buffer is kept for the backward pass when recording
  if (!x.tape->grad_enabled()) col.reset();
  return x.tape->emit(
      std::move(out), {x.id, w.id, bias.id},
      [px = x.id, pw = w.id, pb = bias.id, H, W, Cin, Cout, col](
          const TapeT<T>& t, int32_t, const TensorT<T>& g, GradientsT<T>& grads) {
        const auto& tx = t.value(px);
        const auto& tw = t.value(pw);
        // weight gradient: col^T (HW x 9Cin)^T * g (HW x Cout)
        auto& gw = grads.accum_slot(pw, tw.shape);
        detail::kmatmul_tn(col->data(), g.data.data(), gw.data.data(), H * W, 9 * Cin, Cout,
                           true);
        // input gradient through col
        std::vector<T> gcol(static_cast<size_t>(H * W * 9 * Cin));
        detail::kmatmul_nt(g.data.data(), tw.data.data(), gcol.data(), H * W, Cout, 9 * Cin,
                           false);
        auto& gx = grads.accum_slot(px, tx.shape);
        detail::col2im_3x3(gcol, gx);
        auto& gb = grads.accum_slot(pb, t.value(pb).shape);
        for (int64_t p = 0; p < H * W; ++p) {
          detail::kacc_add(gb.data.data(), g.data.data() + p * Cout, static_cast<size_t>(Cout));
        }
      });
}

// ---------------------------------------------------------------------------
// Bilinear resampling, half-pixel-center convention (shared project-wide)
// ---------------------------------------------------------------------------

namespace detail {

struct ResampleTap {
  int64_t lo;
  int64_t hi;
  double w_hi;  // weight of hi; lo gets 1 - w_hi
};

inline ResampleTap bilinear_tap(int64_t dst, int64_t src_extent, int64_t dst_extent) {
  double pos = (static_cast<double>(dst) + 0.5) * static_cast<double>(src_extent) /
                   static_cast<double>(dst_extent) -
               0.5;
  if (pos < 0.0) pos = 0.0;
  double max_pos = static_cast<double>(src_extent - 1);
  if (pos > max_pos) pos = max_pos;
  auto lo = static_cast<int64_t>(std::floor(pos));
  int64_t hi = std::min(lo + 1, src_extent - 1);
  return {lo, hi, pos - static_cast<double>(lo)};
}

}  // namespace detail

template <class T>
ValT<T> bilinear_resize(ValT<T> x, int64_t H2, int64_t W2) {
  const auto& tx = x.tensor();
  check_input(tx.ndim() == 3, "bilinear_resize: input must be (H, W, C)");
  check_input(H2 > 0 && W2 > 0, "bilinear_resize: target extents must be positive");
  int64_t H = tx.shape[0], W = tx.shape[1], C = tx.shape[2];
  TensorT<T> out({H2, W2, C});
  for (int64_t r = 0; r < H2; ++r) {
    auto tr = detail::bilinear_tap(r, H, H2);
    for (int64_t c = 0; c < W2; ++c) {
      auto tc = detail::bilinear_tap(c, W, W2);
      const T* p00 = tx.data.data() + (tr.lo * W + tc.lo) * C;
      const T* p01 = tx.data.data() + (tr.lo * W + tc.hi) * C;
      const T* p10 = tx.data.data() + (tr.hi * W + tc.lo) * C;
      const T* p11 = tx.data.data() + (tr.hi * W + tc.hi) * C;
      T* dst = out.data.data() + (r * W2 + c) * C;
      double w00 = (1 - tr.w_hi) * (1 - tc.w_hi), w01 = (1 - tr.w_hi) * tc.w_hi;
      double w10 = tr.w_hi * (1 - tc.w_hi), w11 = tr.w_hi * tc.w_hi;
      for (int64_t ch = 0; ch < C; ++ch) {
        dst[ch] = static_cast<T>(w00 * p00[ch] + w01 * p01[ch] + w10 * p10[ch] + w11 * p11[ch]);
      }
    }
  }
  return x.tape->emit(
      std::move(out), {x.id},
      [px = x.id, H, W, C, H2, W2](const TapeT<T>& t, int32_t, const TensorT<T>& g,
                                   GradientsT<T>& grads) {
        auto& gx = grads.accum_slot(px, t.value(px).shape);
        for (int64_t r = 0; r < H2; ++r) {
          auto tr = detail::bilinear_tap(r, H, H2);
          for (int64_t c = 0; c < W2; ++c) {
            auto tc = detail::bilinear_tap(c, W, W2);
            const T* src = g.data.data() + (r * W2 + c) * C;
            double w00 = (1 - tr.w_hi) * (1 - tc.w_hi), w01 = (1 - tr.w_hi) * tc.w_hi;
            double w10 = tr.w_hi * (1 - tc.w_hi), w11 = tr.w_hi * tc.w_hi;
            T* g00 = gx.data.data() + (tr.lo * W + tc.lo) * C;
            T* g01 = gx.data.data() + (tr.lo * W + tc.hi) * C;
            T* g10 = gx.data.data() + (tr.hi * W + tc.lo) * C;
            T* g11 = gx.data.data() + (tr.hi * W + tc.hi) * C;
            for (int64_t ch = 0; ch < C; ++ch) {
              g00[ch] += static_cast<T>(w00 * src[ch]);
              g01[ch] += static_cast<T>(w01 * src[ch]);
              g10[ch] += static_cast<T>(w10 * src[ch]);
              g11[ch] += static_cast<T>(w11 * src[ch]);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Composites
// ---------------------------------------------------------------------------

// Scaled dot-product attention over one axis: q (B,t,d), k (B,s,d),
// v (B,s,dv) -> (B,t,dv). Exact (no approximation).
template <class T>
ValT<T> attention(ValT<T> q, ValT<T> k, ValT<T> v) {
  const auto& tq = q.tensor();
  check_input(tq.ndim() == 3, "attention: q must be (B, t, d)");
  double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(tq.shape[2]));
  auto logits = scale(bmm(q, k, /*transpose_b=*/true), inv_sqrt_d);
  auto weights = softmax_last(logits);
  return bmm(weights, v);
}

template <class T>
ValT<T> linear(ValT<T> x, ValT<T> w, ValT<T> b) {
  return add(matmul(x, w), b);
}

}  // namespace terra::core
