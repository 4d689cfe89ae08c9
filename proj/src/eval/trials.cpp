#include <algorithm>
#include <limits>
#include <cmath>
#include <map>

#include "terra/eval.hpp"
#include "terra/thread_pool.hpp"

namespace terra::eval {

EmbeddingPair EmbeddingProvider::pair(const EvalRow& row, size_t row_index) const {
  (void)row;
  (void)row_index;
  raise_invalid("embedding provider: change pairs are not available from this source");
}

std::string TrialSpec::name() const {
  std::string s;
  switch (shots) {
    case Shots::one:
      s = "1shot";
      break;
    case Shots::ten:
      s = "10shot";
      break;
    case Shots::max:
      s = "max";
      break;
  }
  s += "_";
  switch (transfer) {
    case Transfer::knn1:
      s += "knn1";
      break;
    case Transfer::knn3:
      s += "knn3";
      break;
    case Transfer::linear:
      s += "linear";
      break;
  }
  if (change_supervised == false) s += "_unsupervised";
  return s;
}

MetricKind default_metric(const Dataset& dataset) {
  if (dataset.change || dataset.labels_integral) return MetricKind::balanced_accuracy;
  return MetricKind::r_squared;
}

namespace {

constexpr int64_t kNestedClassFloor = 200;  // below this, the nested scheme
constexpr int64_t kInnerBootstraps = 20;
constexpr int64_t kBootstraps = 100;
constexpr int kRegressionBins = 10;

struct TrialData {
  std::vector<size_t> train_rows;  // indices into dataset.rows
  std::vector<size_t> test_rows;
  std::vector<Embedding> train_embeddings;
  std::vector<Embedding> test_embeddings;
  std::vector<double> train_labels;
  std::vector<double> test_labels;
};

// Content-derived ordering key so sampling is independent of file row order.
uint64_t row_key(const EvalRow& row) {
  uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](const void* p, size_t n) { h = fnv1a(p, n, h); };
  mix(&row.x, sizeof(row.x));
  mix(&row.y, sizeof(row.y));
  mix(&row.label, sizeof(row.label));
  mix(&row.valid_start_ms, sizeof(row.valid_start_ms));
  mix(&row.support_start_ms, sizeof(row.support_start_ms));
  mix(&row.valid_before_start_ms, sizeof(row.valid_before_start_ms));
  mix(&row.valid_after_start_ms, sizeof(row.valid_after_start_ms));
  return h;
}

TrialData assemble(const Dataset& dataset, const EmbeddingProvider& embeddings,
                   const TrialSpec& spec) {
  TrialData data;
  std::vector<size_t> order(dataset.rows.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return row_key(dataset.rows[a]) < row_key(dataset.rows[b]);
  });
  for (size_t i : order) {
    const auto& row = dataset.rows[i];
    Embedding e;
    if (dataset.change && spec.change_supervised) {
      e = concat_pair(embeddings.pair(row, i));
    } else if (!dataset.change) {
      e = embeddings.embedding(row, i);
    }
    if (row.split == "train") {
      data.train_rows.push_back(i);
      data.train_embeddings.push_back(std::move(e));
      data.train_labels.push_back(row.label);
    } else {
      data.test_rows.push_back(i);
      data.test_embeddings.push_back(std::move(e));
      data.test_labels.push_back(row.label);
    }
  }
  return data;
}

// Stratification groups: classes for classification, equal-width label bins
// for regression.
std::map<int64_t, std::vector<size_t>> strata(const TrialData& data, bool classification) {
  std::map<int64_t, std::vector<size_t>> groups;
  if (classification) {
    std::map<double, int64_t> ids;
    for (double l : data.train_labels) ids.emplace(l, 0);
    int64_t next = 0;
    for (auto& [label, id] : ids) id = next++;
    for (size_t i = 0; i < data.train_labels.size(); ++i) {
      groups[ids[data.train_labels[i]]].push_back(i);
    }
    return groups;
  }
  double lo = data.train_labels[0], hi = data.train_labels[0];
  for (double l : data.train_labels) {
    lo = std::min(lo, l);
    hi = std::max(hi, l);
  }
  double span = hi > lo ? hi - lo : 1.0;
  for (size_t i = 0; i < data.train_labels.size(); ++i) {
    auto bin = static_cast<int64_t>((data.train_labels[i] - lo) / span * kRegressionBins);
    bin = std::min<int64_t>(bin, kRegressionBins - 1);
    groups[bin].push_back(i);
  }
  return groups;
}

std::vector<LabeledEmbedding> gather(const TrialData& data, const std::vector<size_t>& idx) {
  std::vector<LabeledEmbedding> out;
  out.reserve(idx.size());
  for (size_t i : idx) out.push_back({data.train_embeddings[i], data.train_labels[i]});
  return out;
}

// n per stratum without replacement (whole stratum when smaller).
std::vector<size_t> balanced_sample(const std::map<int64_t, std::vector<size_t>>& groups,
                                    int64_t per_group, Rng& rng) {
  std::vector<size_t> out;
  for (const auto& [gid, members] : groups) {
    std::vector<size_t> pool = members;
    // Fisher-Yates prefix shuffle
    auto take = std::min<size_t>(static_cast<size_t>(per_group), pool.size());
    for (size_t i = 0; i < take; ++i) {
      size_t j = static_cast<size_t>(
          rng.uniform_int(static_cast<int64_t>(i), static_cast<int64_t>(pool.size()) - 1));
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
  }
  return out;
}

std::vector<double> predict_all(const std::vector<LabeledEmbedding>& train,
                                const std::vector<Embedding>& queries, const TrialSpec& spec,
                                bool classification) {
  std::vector<double> preds(queries.size());
  int k = spec.transfer == Transfer::knn3 ? 3 : 1;
  if (spec.transfer == Transfer::linear) {
    if (classification) {
      auto probe = linear_fit(train, spec.ridge_lambda);
      for (size_t i = 0; i < queries.size(); ++i) preds[i] = probe.predict(queries[i]);
    } else {
      auto reg = regression_linear(train, 0.0);
      for (size_t i = 0; i < queries.size(); ++i) preds[i] = reg.predict(queries[i]);
    }
    return preds;
  }
  auto kk = std::min<size_t>(static_cast<size_t>(k), train.size());
  for (size_t i = 0; i < queries.size(); ++i) {
    preds[i] = classification
                   ? knn_classify(train, queries[i], static_cast<int>(kk))
                   : knn_regress(train, queries[i], static_cast<int>(kk), spec.knn_weighting);
  }
  return preds;
}

}  // namespace

MetricReport run_trial(const Dataset& dataset, const EmbeddingProvider& embeddings,
                       const TrialSpec& spec, MetricKind kind, uint64_t seed) {
  bool classification = dataset.change || dataset.labels_integral;

  if (dataset.change && !spec.change_supervised) {
    // unsupervised thresholding runs on the validation split alone
    std::vector<EmbeddingPair> pairs;
    std::vector<double> labels;
    for (size_t i = 0; i < dataset.rows.size(); ++i) {
      if (dataset.rows[i].split != "test") continue;
      pairs.push_back(embeddings.pair(dataset.rows[i], i));
      labels.push_back(dataset.rows[i].label);
    }
    check_input(!pairs.empty(), "run_trial: no test rows");
    auto sweep = change_unsupervised(pairs, labels);
    Rng rng(splitmix64(seed ^ 0xB007));
    auto report = bootstrap_stats(sweep.predictions, labels, kind, kBootstraps, rng);
    report.metric = metric_name(kind);
    report.trial = spec.name();
    report.seed = seed;
    return report;
  }

  TrialData data = assemble(dataset, embeddings, spec);
  check_input(!data.train_rows.empty(), "run_trial: no train rows");
  check_input(!data.test_rows.empty(), "run_trial: no test rows");
  auto groups = strata(data, classification);
  if (classification) {
    for (const auto& [gid, members] : groups) {
      check_input(!members.empty(),
                  "run_trial: class " + std::to_string(gid) + " has zero train rows");
    }
  }

  int64_t c_min = std::numeric_limits<int64_t>::max();
  bool balanced = true;
  for (const auto& [gid, members] : groups) {
    c_min = std::min(c_min, static_cast<int64_t>(members.size()));
  }
  for (const auto& [gid, members] : groups) {
    balanced &= static_cast<int64_t>(members.size()) == c_min;
  }

  MetricReport report;
  if (spec.shots != Shots::max) {
    // subsampled low-shot trials: K independent class-balanced folds
    auto shots = static_cast<int64_t>(spec.shots);
    int64_t repeats = spec.repeats > 0 ? spec.repeats : (spec.shots == Shots::one ? 1000 : 500);
    std::vector<double> fold_metrics(static_cast<size_t>(repeats));
    ThreadPool pool(ThreadPool::default_threads());
    pool.parallel_for(static_cast<size_t>(repeats), [&](size_t fold) {
      Rng rng(splitmix64(seed ^ (0xF01D + fold * 0x9E37ull)));
      auto train = gather(data, balanced_sample(groups, shots, rng));
      auto preds = predict_all(train, data.test_embeddings, spec, classification);
      fold_metrics[fold] = metric(preds, data.test_labels, kind);
    });
    report = kfold_stats(fold_metrics);
  } else if ((classification && c_min >= kNestedClassFloor) ||
             (!classification &&
              static_cast<int64_t>(data.train_rows.size()) >= kNestedClassFloor)) {
    // full trial: one predictor (balanced when classes are uneven), metric
    // uncertainty by bootstrap resampling of the validation split
    std::vector<LabeledEmbedding> train;
    if (classification && !balanced) {
      Rng rng(splitmix64(seed ^ 0xBA1A));
      train = gather(data, balanced_sample(groups, c_min, rng));
    } else {
      std::vector<size_t> all(data.train_rows.size());
      for (size_t i = 0; i < all.size(); ++i) all[i] = i;
      train = gather(data, all);
    }
    auto preds = predict_all(train, data.test_embeddings, spec, classification);
    Rng rng(splitmix64(seed ^ 0xB007));
    report = bootstrap_stats(preds, data.test_labels, kind, kBootstraps, rng);
  } else {
    // small-class max trial: nested scheme, K balanced training sets by the
    // group-fold count crossed with inner bootstrap resamples; spread is the
    // total deviation over all (outer, inner) metric values
    int64_t folds = balanced && classification
                        ? 1
                        : kfold_count(classification
                                          ? c_min
                                          : static_cast<int64_t>(data.train_rows.size()));
    std::vector<double> values(static_cast<size_t>(folds * kInnerBootstraps));
    ThreadPool pool(ThreadPool::default_threads());
    pool.parallel_for(static_cast<size_t>(folds), [&](size_t fold) {
      Rng rng(splitmix64(seed ^ (0x2E57ED + fold * 0x51ull)));
      auto train = gather(data, balanced_sample(groups, c_min, rng));
      auto preds = predict_all(train, data.test_embeddings, spec, classification);
      for (int64_t ib = 0; ib < kInnerBootstraps; ++ib) {
        auto weights = bootstrap_resample_weights(data.test_labels.size(), rng);
        values[fold * static_cast<size_t>(kInnerBootstraps) + static_cast<size_t>(ib)] =
            metric(preds, data.test_labels, kind, &weights);
      }
    });
    report = kfold_stats(values);
    report.method = "nested";
    report.folds = folds;
    report.bootstraps = kInnerBootstraps;
  }

  report.metric = metric_name(kind);
  report.trial = spec.name();
  report.seed = seed;
  return report;
}

}  // namespace terra::eval
