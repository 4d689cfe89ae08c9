#pragma once

#include <optional>
#include <string>
#include <vector>

#include "terra/rng.hpp"
#include "terra/temporal.hpp"

// Low-shot evaluation over embedding tables: dataset schema validation,
// spatial proximity filtering, kNN / linear-probe transfer, change
// detection, metrics and uncertainty estimation.

namespace terra::eval {

// One labeled point in the standard evaluation schema. Change-detection
// datasets additionally carry before/after labels and periods.
struct EvalRow {
  double x = 0.0;  // longitude, decimal degrees
  double y = 0.0;  // latitude, decimal degrees
  double label = 0.0;
  std::string label_name;
  int64_t valid_start_ms = 0, valid_end_ms = 0;      // may coincide (single date)
  int64_t support_start_ms = 0, support_end_ms = 0;  // at most one year long
  std::string split;                                 // "train" | "test"
  std::optional<int64_t> shard;

  bool is_change = false;
  double label_before = 0.0, label_after = 0.0;
  std::string label_before_name, label_after_name;
  int64_t valid_before_start_ms = 0, valid_before_end_ms = 0;
  int64_t valid_after_start_ms = 0, valid_after_end_ms = 0;
  int64_t support_before_start_ms = 0, support_before_end_ms = 0;
  int64_t support_after_start_ms = 0, support_after_end_ms = 0;
};

struct Dataset {
  std::vector<EvalRow> rows;
  bool change = false;
  bool labels_integral = true;  // every label integer-valued: classification
};

// Parses CSV or line-JSON files carrying the standard field names and
// validates every row (coordinate precision, period bounds, split values).
// Violations are reported together with their row numbers.
Dataset load_dataset(const std::string& path);

// Schema checks shared by the loader; returns human-readable violations.
std::vector<std::string> validate_row(const EvalRow& row, const std::string& x_literal,
                                      const std::string& y_literal);

// ---------------------------------------------------------------------------
// Spatial machinery
// ---------------------------------------------------------------------------

// Great-circle distance on a 6371 km sphere.
double haversine_km(double lon_a, double lat_a, double lon_b, double lat_b);

// Greedy retention in input order: a row is dropped when it lies within
// min_km of any retained row.
std::vector<size_t> proximity_filter(const std::vector<EvalRow>& rows, double min_km = 1.28);

enum class Split { train, test };

// Connected components over the radius graph (union-find); whole components
// are assigned to splits to approach train_frac per class without ever
// splitting a component.
std::vector<Split> component_split(const std::vector<EvalRow>& rows, double radius_km,
                                   double train_frac);

// ---------------------------------------------------------------------------
// Transfer predictors
// ---------------------------------------------------------------------------

using Embedding = std::vector<float>;

struct LabeledEmbedding {
  Embedding e;
  double label = 0.0;
};

// Majority label of the k nearest neighbours under L2. Ties go to the class
// whose nearest representative is closest, then to the lowest class id.
double knn_classify(const std::vector<LabeledEmbedding>& train, const Embedding& query, int k);

enum class KnnWeighting {
  literal,  // w_i = the L2 distance, the formula as stated
  inverse,  // w_i = 1 / (distance + 1e-9)
};

// Weighted average of the k nearest labels.
double knn_regress(const std::vector<LabeledEmbedding>& train, const Embedding& query, int k,
                   KnnWeighting weighting = KnnWeighting::literal);

// One-vs-rest linear probe with intercept, least squares on +-1 targets;
// ridge strength lambda (0 reproduces ordinary least squares exactly).
// Rank-deficient designs at lambda 0 fall back to the pseudo-inverse and
// are flagged.
struct LinearProbe {
  std::vector<double> class_ids;           // sorted distinct labels
  std::vector<std::vector<double>> coefs;  // per class, D + 1 values (intercept last)
  bool used_pseudo_inverse = false;

  double predict(const Embedding& query) const;  // argmax class score
  double score(const Embedding& query, size_t class_index) const;
};

LinearProbe linear_fit(const std::vector<LabeledEmbedding>& train, double lambda = 1.0);

// Regression analog: affine least squares (lambda 0 by default).
struct LinearRegressor {
  std::vector<double> coef;  // D + 1, intercept last
  bool used_pseudo_inverse = false;

  double predict(const Embedding& query) const;
};

LinearRegressor regression_linear(const std::vector<LabeledEmbedding>& train,
                                  double lambda = 0.0);

// ---------------------------------------------------------------------------
// Change detection
// ---------------------------------------------------------------------------

struct EmbeddingPair {
  Embedding before, after;
};

Embedding concat_pair(const EmbeddingPair& pair);

struct ChangeThresholdResult {
  double threshold = 0.0;
  std::vector<double> predictions;  // 0 / 1
  double balanced_accuracy = 0.0;
  std::vector<double> magnitudes;  // d_j per pair
};

// Unsupervised change detection: per-pair change magnitude thresholded by
// the best of {0.1, ..., 0.9} under balanced accuracy over the whole
// validation set; ties resolve to the smallest threshold.
ChangeThresholdResult change_unsupervised(const std::vector<EmbeddingPair>& pairs,
                                          const std::vector<double>& labels);

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

enum class MetricKind { balanced_accuracy, ber, ber_kappa, r_squared, mae };

const char* metric_name(MetricKind kind);

// Optionally weighted (bootstrap resample counts). Balanced accuracy needs
// at least two classes present in the truth.
double metric(const std::vector<double>& predictions, const std::vector<double>& truths,
              MetricKind kind, const std::vector<double>* weights = nullptr);

// ---------------------------------------------------------------------------
// Uncertainty
// ---------------------------------------------------------------------------

struct MetricReport {
  std::string metric;
  double mean = 0.0;
  std::optional<double> sigma;
  std::string method;  // "kfold" | "bootstrap" | "nested"
  int64_t folds = 0;
  int64_t bootstraps = 0;
  std::string dataset;
  std::string trial;
  uint64_t seed = 0;
};

// ceil(1000 / 2^log10(c_min)) group folds for the least-present class.
int64_t kfold_count(int64_t c_min);

// One fold when every class holds the same number of training labels,
// otherwise the group-fold count for the least-present class.
int64_t kfold_count(const std::vector<int64_t>& class_counts);

// Multinomial resample weights: m draws over m slots, summing to m exactly.
std::vector<double> bootstrap_resample_weights(size_t m, Rng& rng);

// Mean and K-1 sample deviation over fold metrics; sigma absent for K = 1.
MetricReport kfold_stats(const std::vector<double>& fold_metrics);

// B weighted resamples of the validation split with replacement; every
// resample's weights sum to the split size exactly.
MetricReport bootstrap_stats(const std::vector<double>& predictions,
                             const std::vector<double>& truths, MetricKind kind, int64_t b,
                             Rng& rng);

// ---------------------------------------------------------------------------
// Trials
// ---------------------------------------------------------------------------

enum class Shots { one = 1, ten = 10, max = -1 };
enum class Transfer { knn1, knn3, linear };

struct TrialSpec {
  Shots shots = Shots::max;
  Transfer transfer = Transfer::linear;
  int64_t repeats = 0;  // 0 = default (1000 for 1-shot, 500 for 10-shot)
  double ridge_lambda = 1.0;
  KnnWeighting knn_weighting = KnnWeighting::literal;
  bool change_supervised = true;  // concat pairs; false = unsupervised threshold

  std::string name() const;
};

// Embeddings per dataset row; change rows provide a before/after pair.
class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual Embedding embedding(const EvalRow& row, size_t row_index) const = 0;
  virtual EmbeddingPair pair(const EvalRow& row, size_t row_index) const;
};

// Assembles class-balanced training sets per the trial spec, fits the
// transfer, scores the test split and aggregates uncertainty: k-fold stats
// for subsampled trials, bootstrap for max trials, the nested scheme when a
// max trial has a class below 200 examples.
MetricReport run_trial(const Dataset& dataset, const EmbeddingProvider& embeddings,
                       const TrialSpec& spec, MetricKind kind, uint64_t seed);

// Default headline metric for the dataset/trial combination.
MetricKind default_metric(const Dataset& dataset);

}  // namespace terra::eval
