#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "terra/eval.hpp"
#include "terra/geometry.hpp"

namespace terra::eval {

namespace {

double l2_distance(const Embedding& a, const Embedding& b) {
  check_input(a.size() == b.size(), "knn: embedding dimension mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

struct Neighbor {
  double dist;
  double label;
};

std::vector<Neighbor> nearest(const std::vector<LabeledEmbedding>& train,
                              const Embedding& query, int k) {
  check_input(!train.empty(), "knn: empty training set");
  check_input(k >= 1 && static_cast<size_t>(k) <= train.size(),
              "knn: k must be between 1 and the training size");
  std::vector<Neighbor> all;
  all.reserve(train.size());
  for (const auto& t : train) all.push_back({l2_distance(t.e, query), t.label});
  // exact distance ties order by label so results are row-order independent
  std::stable_sort(all.begin(), all.end(), [](const Neighbor& a, const Neighbor& b) {
    if (a.dist != b.dist) return a.dist < b.dist;
    return a.label < b.label;
  });
  all.resize(static_cast<size_t>(k));
  return all;
}

}  // namespace

double knn_classify(const std::vector<LabeledEmbedding>& train, const Embedding& query, int k) {
  auto neighbors = nearest(train, query, k);
  std::map<double, int> votes;
  std::map<double, double> closest;
  for (const auto& n : neighbors) {
    votes[n.label] += 1;
    auto it = closest.find(n.label);
    if (it == closest.end() || n.dist < it->second) closest[n.label] = n.dist;
  }
  int best_votes = 0;
  for (const auto& [label, v] : votes) best_votes = std::max(best_votes, v);
  // among tied classes: nearest representative, then lowest class id
  double best_label = 0.0;
  double best_dist = std::numeric_limits<double>::infinity();
  bool found = false;
  for (const auto& [label, v] : votes) {  // map order = ascending label
    if (v != best_votes) continue;
    if (!found || closest[label] < best_dist) {
      found = true;
      best_label = label;
      best_dist = closest[label];
    }
  }
  return best_label;
}

double knn_regress(const std::vector<LabeledEmbedding>& train, const Embedding& query, int k,
                   KnnWeighting weighting) {
  auto neighbors = nearest(train, query, k);
  double num = 0.0, den = 0.0;
  for (const auto& n : neighbors) {
    double w = weighting == KnnWeighting::literal ? n.dist : 1.0 / (n.dist + 1e-9);
    num += w * n.label;
    den += w;
  }
  if (den <= 0.0) {
    // all distances zero under the literal weighting: plain mean
    double acc = 0.0;
    for (const auto& n : neighbors) acc += n.label;
    return acc / static_cast<double>(neighbors.size());
  }
  return num / den;
}

// ---------------------------------------------------------------------------
// Linear probes
// ---------------------------------------------------------------------------

namespace {

// Solves (A^T A + lambda J) w = A^T y for each target column, where J is the
// identity with a zero in the intercept slot. Cholesky when positive
// definite; symmetric Jacobi pseudo-inverse otherwise (flagged).
struct NormalSolver {
  std::vector<double> ata;  // (D+1)^2
  size_t d1 = 0;
  bool pseudo = false;
  std::vector<double> chol;     // Cholesky factor when usable
  std::vector<double> pinv;     // pseudo-inverse otherwise

  NormalSolver(const std::vector<LabeledEmbedding>& train, double lambda) {
    size_t d = train[0].e.size();
    d1 = d + 1;
    ata.assign(d1 * d1, 0.0);
    for (const auto& t : train) {
      std::vector<double> row(d1);
      for (size_t i = 0; i < d; ++i) row[i] = t.e[i];
      row[d] = 1.0;
      for (size_t i = 0; i < d1; ++i) {
        for (size_t j = i; j < d1; ++j) ata[i * d1 + j] += row[i] * row[j];
      }
    }
    for (size_t i = 0; i < d1; ++i) {
      for (size_t j = 0; j < i; ++j) ata[i * d1 + j] = ata[j * d1 + i];
    }
    for (size_t i = 0; i + 1 < d1; ++i) ata[i * d1 + i] += lambda;  // intercept unpenalized

    chol = ata;
    if (!cholesky(chol, d1)) {
      pseudo = true;
      pinv = pseudo_inverse(ata, d1);
    }
  }

  static bool cholesky(std::vector<double>& a, size_t n) {
    for (size_t i = 0; i < n; ++i) {
      for (size_t j = 0; j <= i; ++j) {
        double sum = a[i * n + j];
        for (size_t k = 0; k < j; ++k) sum -= a[i * n + k] * a[j * n + k];
        if (i == j) {
          if (sum <= 1e-10) return false;
          a[i * n + i] = std::sqrt(sum);
        } else {
          a[i * n + j] = sum / a[j * n + j];
        }
      }
    }
    return true;
  }

  // Jacobi eigendecomposition of the symmetric normal matrix.
  static std::vector<double> pseudo_inverse(const std::vector<double>& m, size_t n) {
    std::vector<double> a = m;
    std::vector<double> v(n * n, 0.0);
    for (size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
    for (int sweep = 0; sweep < 64; ++sweep) {
      double off = 0.0;
      for (size_t p = 0; p < n; ++p) {
        for (size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
      }
      if (off < 1e-22) break;
      for (size_t p = 0; p < n; ++p) {
        for (size_t q = p + 1; q < n; ++q) {
          double apq = a[p * n + q];
          if (std::abs(apq) < 1e-300) continue;
          double app = a[p * n + p], aqq = a[q * n + q];
          double theta = (aqq - app) / (2.0 * apq);
          double t = (theta >= 0 ? 1.0 : -1.0) /
                     (std::abs(theta) + std::sqrt(theta * theta + 1.0));
          double c = 1.0 / std::sqrt(t * t + 1.0);
          double s = t * c;
          for (size_t k = 0; k < n; ++k) {
            double akp = a[k * n + p], akq = a[k * n + q];
            a[k * n + p] = c * akp - s * akq;
            a[k * n + q] = s * akp + c * akq;
          }
          for (size_t k = 0; k < n; ++k) {
            double apk = a[p * n + k], aqk = a[q * n + k];
            a[p * n + k] = c * apk - s * aqk;
            a[q * n + k] = s * apk + c * aqk;
          }
          for (size_t k = 0; k < n; ++k) {
            double vkp = v[k * n + p], vkq = v[k * n + q];
            v[k * n + p] = c * vkp - s * vkq;
            v[k * n + q] = s * vkp + c * vkq;
          }
        }
      }
    }
    double max_eig = 0.0;
    for (size_t i = 0; i < n; ++i) max_eig = std::max(max_eig, std::abs(a[i * n + i]));
    double tol = max_eig * 1e-12;
    std::vector<double> out(n * n, 0.0);
    for (size_t e = 0; e < n; ++e) {
      double eig = a[e * n + e];
      if (std::abs(eig) <= tol) continue;
      double inv = 1.0 / eig;
      for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j < n; ++j) out[i * n + j] += inv * v[i * n + e] * v[j * n + e];
      }
    }
    return out;
  }

  std::vector<double> solve(const std::vector<double>& rhs) const {
    std::vector<double> w(d1, 0.0);
    if (pseudo) {
      for (size_t i = 0; i < d1; ++i) {
        double acc = 0.0;
        for (size_t j = 0; j < d1; ++j) acc += pinv[i * d1 + j] * rhs[j];
        w[i] = acc;
      }
      return w;
    }
    // forward then backward substitution on the Cholesky factor
    std::vector<double> y(d1, 0.0);
    for (size_t i = 0; i < d1; ++i) {
      double sum = rhs[i];
      for (size_t k = 0; k < i; ++k) sum -= chol[i * d1 + k] * y[k];
      y[i] = sum / chol[i * d1 + i];
    }
    for (size_t ii = d1; ii-- > 0;) {
      double sum = y[ii];
      for (size_t k = ii + 1; k < d1; ++k) sum -= chol[k * d1 + ii] * w[k];
      w[ii] = sum / chol[ii * d1 + ii];
    }
    return w;
  }
};

std::vector<double> rhs_for_targets(const std::vector<LabeledEmbedding>& train,
                                    const std::vector<double>& targets) {
  size_t d = train[0].e.size();
  std::vector<double> rhs(d + 1, 0.0);
  for (size_t r = 0; r < train.size(); ++r) {
    for (size_t i = 0; i < d; ++i) rhs[i] += static_cast<double>(train[r].e[i]) * targets[r];
    rhs[d] += targets[r];
  }
  return rhs;
}

double affine_eval(const std::vector<double>& coef, const Embedding& q) {
  check_input(coef.size() == q.size() + 1, "linear: dimension mismatch");
  double acc = coef.back();
  for (size_t i = 0; i < q.size(); ++i) acc += coef[i] * q[i];
  return acc;
}

}  // namespace

double LinearProbe::score(const Embedding& query, size_t class_index) const {
  return affine_eval(coefs[class_index], query);
}

double LinearProbe::predict(const Embedding& query) const {
  check_input(!coefs.empty(), "linear probe: not fitted");
  size_t best = 0;
  double best_score = score(query, 0);
  for (size_t c = 1; c < coefs.size(); ++c) {
    double s = score(query, c);
    if (s > best_score) {  // ties resolve to the lowest class id
      best_score = s;
      best = c;
    }
  }
  return class_ids[best];
}

LinearProbe linear_fit(const std::vector<LabeledEmbedding>& train, double lambda) {
  check_input(!train.empty(), "linear_fit: empty training set");
  check_input(lambda >= 0.0, "linear_fit: negative ridge strength");
  LinearProbe probe;
  for (const auto& t : train) probe.class_ids.push_back(t.label);
  std::sort(probe.class_ids.begin(), probe.class_ids.end());
  probe.class_ids.erase(std::unique(probe.class_ids.begin(), probe.class_ids.end()),
                        probe.class_ids.end());

  NormalSolver solver(train, lambda);
  probe.used_pseudo_inverse = solver.pseudo;
  for (double cls : probe.class_ids) {
    std::vector<double> targets(train.size());
    for (size_t r = 0; r < train.size(); ++r) targets[r] = train[r].label == cls ? 1.0 : -1.0;
    probe.coefs.push_back(solver.solve(rhs_for_targets(train, targets)));
  }
  return probe;
}

double LinearRegressor::predict(const Embedding& query) const {
  return affine_eval(coef, query);
}

LinearRegressor regression_linear(const std::vector<LabeledEmbedding>& train, double lambda) {
  check_input(!train.empty(), "regression_linear: empty training set");
  NormalSolver solver(train, lambda);
  std::vector<double> targets(train.size());
  for (size_t r = 0; r < train.size(); ++r) targets[r] = train[r].label;
  LinearRegressor reg;
  reg.coef = solver.solve(rhs_for_targets(train, targets));
  reg.used_pseudo_inverse = solver.pseudo;
  return reg;
}

// ---------------------------------------------------------------------------
// Change detection
// ---------------------------------------------------------------------------

Embedding concat_pair(const EmbeddingPair& pair) {
  Embedding out = pair.before;
  out.insert(out.end(), pair.after.begin(), pair.after.end());
  return out;
}

ChangeThresholdResult change_unsupervised(const std::vector<EmbeddingPair>& pairs,
                                          const std::vector<double>& labels) {
  check_input(pairs.size() == labels.size() && !pairs.empty(),
              "change_unsupervised: pairs and labels must align");
  ChangeThresholdResult result;
  result.magnitudes.reserve(pairs.size());
  for (const auto& p : pairs) {
    auto before = geom::normalize(p.before);
    auto after = geom::normalize(p.after);
    result.magnitudes.push_back(geom::change_magnitude(before, after));
  }

  // balanced accuracy over the classes present; unlike the strict metric
  // this tolerates single-class validation labels (recall of that class)
  auto sweep_ba = [&](const std::vector<double>& preds) {
    std::map<double, std::pair<int64_t, int64_t>> per_class;  // correct, total
    for (size_t j = 0; j < labels.size(); ++j) {
      auto& [correct, total] = per_class[labels[j]];
      ++total;
      if (preds[j] == labels[j]) ++correct;
    }
    double acc = 0.0;
    for (const auto& [cls, ct] : per_class) {
      acc += static_cast<double>(ct.first) / static_cast<double>(ct.second);
    }
    return acc / static_cast<double>(per_class.size());
  };

  double best_ba = -1.0, best_threshold = 0.0;
  std::vector<double> best_preds;
  for (int i = 1; i <= 9; ++i) {
    double threshold = 0.1 * i;
    std::vector<double> preds(pairs.size());
    for (size_t j = 0; j < pairs.size(); ++j) {
      preds[j] = result.magnitudes[j] >= threshold ? 1.0 : 0.0;
    }
    double ba = sweep_ba(preds);
    if (ba > best_ba) {
      best_ba = ba;
      best_threshold = threshold;
      best_preds = preds;
    }
  }
  result.threshold = best_threshold;
  result.balanced_accuracy = best_ba;
  result.predictions = std::move(best_preds);
  return result;
}

}  // namespace terra::eval
