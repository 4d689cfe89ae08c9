#pragma once

#include <cmath>
#include <functional>
#include <limits>

#include "terra/ops.hpp"

namespace terra::core {

struct GradCheckResult {
  double max_rel_error = 0.0;
  int64_t worst_index = -1;
  bool finite = true;  // false when evaluation produced a non-finite value

  bool passed(double tol) const { return finite && max_rel_error < tol; }
};

// Compares the tape gradient of a scalar function against central finite
// differences, component by component:
//   err_i = |analytic_i - (f(x+e_i*eps) - f(x-e_i*eps)) / (2 eps)| / max(|analytic_i|, 1e-8)
// Meaningful tolerances require the double instantiation; float rounding
// noise swamps the difference quotient.
template <class T>
GradCheckResult grad_check_components(
    const std::function<ValT<T>(TapeT<T>&, ValT<T>)>& f, const TensorT<T>& x, double eps,
    const std::vector<int64_t>& components) {
  check_input(eps > 0.0, "grad_check: eps must be positive");
  GradCheckResult result;

  // A numeric fault anywhere in an evaluation counts as a non-finite result.
  auto eval = [&](const TensorT<T>& at) -> double {
    TapeT<T> t2;
    t2.set_grad_enabled(false);
    ValT<T> v = t2.leaf(at);
    try {
      return static_cast<double>(f(t2, v).tensor().data[0]);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::numeric) return std::numeric_limits<double>::quiet_NaN();
      throw;
    }
  };

  TapeT<T> tape;
  ValT<T> xv = tape.leaf(x);
  ValT<T> loss = f(tape, xv);
  check_input(loss.tensor().is_scalar(), "grad_check: f must return a scalar");
  if (!std::isfinite(static_cast<double>(loss.tensor().data[0]))) {
    result.finite = false;
    result.worst_index = -1;
    result.max_rel_error = std::numeric_limits<double>::infinity();
    return result;
  }
  GradientsT<T> grads = tape.backward(loss);
  TensorT<T> g = grads.has(xv.id) ? grads.at(xv.id) : TensorT<T>(x.shape);

  for (int64_t i : components) {
    TensorT<T> xp = x, xm = x;
    xp.data[static_cast<size_t>(i)] += static_cast<T>(eps);
    xm.data[static_cast<size_t>(i)] -= static_cast<T>(eps);
    double fp = eval(xp);
    double fm = eval(xm);
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      result.finite = false;
      result.worst_index = i;
      result.max_rel_error = std::numeric_limits<double>::infinity();
      return result;
    }
    double numeric = (fp - fm) / (2.0 * eps);
    double analytic = static_cast<double>(g.data[static_cast<size_t>(i)]);
    double rel = std::abs(analytic - numeric) / std::max(std::abs(analytic), 1e-8);
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_index = i;
    }
  }
  return result;
}

template <class T>
GradCheckResult grad_check(const std::function<ValT<T>(TapeT<T>&, ValT<T>)>& f,
                           const TensorT<T>& x, double eps) {
  std::vector<int64_t> all(static_cast<size_t>(x.numel()));
  for (size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int64_t>(i);
  return grad_check_components(f, x, eps, all);
}

}  // namespace terra::core
