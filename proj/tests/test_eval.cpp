#include <cmath>
#include <map>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "terra/eval_io.hpp"
#include "terra/fixtures.hpp"
#include "terra/geometry.hpp"

using namespace terra;
using namespace terra::eval;

namespace {

EvalRow basic_row(double x, double y, double label, const std::string& split) {
  EvalRow r;
  r.x = x;
  r.y = y;
  r.label = label;
  r.split = split;
  r.support_start_ms = 0;
  r.support_end_ms = 300LL * temporal::kMsPerDay;
  r.valid_start_ms = 0;
  r.valid_end_ms = 200LL * temporal::kMsPerDay;
  return r;
}

Embedding basis(size_t dim, size_t axis, float sign = 1.0f) {
  Embedding e(dim, 0.0f);
  e[axis] = sign;
  return e;
}

}  // namespace

TEST_CASE("dataset loading and validation") {
  const char* header =
      "x,y,label,split,valid_time_start_ms,valid_time_end_ms,support_time_start_ms,support_time_"
      "end_ms\n";

  SUBCASE("well-formed rows load") {
    std::ofstream f("ok.csv");
    f << header << "12.3456,-45.0001,1,train,1000,2000,500,4000\n"
      << "13.5000,-46.1234,0,test,1000,1000,500,4000\n";  // single-date valid period
    f.close();
    auto ds = load_dataset("ok.csv");
    CHECK(ds.rows.size() == 2);
    CHECK_FALSE(ds.change);
    CHECK(ds.labels_integral);
    std::filesystem::remove("ok.csv");
  }

  SUBCASE("three-decimal coordinates are rejected") {
    std::ofstream f("bad_precision.csv");
    f << header << "12.345,-45.0001,1,train,1000,2000,500,4000\n";
    f.close();
    try {
      (void)load_dataset("bad_precision.csv");
      FAIL("expected rejection");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("row 1") != std::string::npos);
      CHECK(std::string(e.what()).find("precision") != std::string::npos);
    }
    std::filesystem::remove("bad_precision.csv");
  }

  SUBCASE("support periods over a year are rejected") {
    std::ofstream f("long_support.csv");
    int64_t two_years = 2LL * 365 * temporal::kMsPerDay;
    f << header << "12.3456,-45.0001,1,train,1000,2000,0," << two_years << "\n";
    f.close();
    CHECK_THROWS_AS((void)load_dataset("long_support.csv"), Error);
    std::filesystem::remove("long_support.csv");
  }

  SUBCASE("change rows with the full field set are accepted") {
    FixtureSpec spec;
    spec.change = true;
    spec.train_per_class = 4;
    spec.test_per_class = 4;
    auto fx = make_fixture(spec);
    write_fixture(fx, "change.csv", "change_table.bin");
    auto ds = load_dataset("change.csv");
    CHECK(ds.change);
    CHECK(ds.rows.size() == fx.dataset.rows.size());
    std::filesystem::remove("change.csv");
    std::filesystem::remove("change_table.bin");
  }

  SUBCASE("line-JSON loads like CSV") {
    std::ofstream f("rows.jsonl");
    f << R"({"x":12.3456,"y":-45.0001,"label":1,"split":"train","valid_time_start_ms":1000,)"
      << R"("valid_time_end_ms":2000,"support_time_start_ms":500,"support_time_end_ms":4000})"
      << "\n";
    f.close();
    auto ds = load_dataset("rows.jsonl");
    CHECK(ds.rows.size() == 1);
    CHECK(ds.rows[0].x == doctest::Approx(12.3456));
    std::filesystem::remove("rows.jsonl");
  }
}

TEST_CASE("proximity filter") {
  SUBCASE("duplicate coordinate is dropped, distant pair retained") {
    std::vector<EvalRow> rows = {basic_row(10.0001, 50.0001, 0, "train"),
                                 basic_row(10.0001, 50.0001, 1, "train"),
                                 basic_row(10.0300, 50.0001, 1, "train")};  // ~2.1 km east
    auto kept = proximity_filter(rows, 1.28);
    REQUIRE(kept.size() == 2);
    CHECK(kept[0] == 0);
    CHECK(kept[1] == 2);
  }

  SUBCASE("random cloud: output pairwise distances exceed the bound (O(n^2) oracle)") {
    Rng rng(17);
    std::vector<EvalRow> rows;
    for (int i = 0; i < 500; ++i) {
      rows.push_back(basic_row(8.0 + rng.uniform(0.0, 0.15), 47.0 + rng.uniform(0.0, 0.15), 0,
                               "train"));
    }
    auto kept = proximity_filter(rows, 1.28);
    CHECK(kept.size() > 10);
    for (size_t a = 0; a < kept.size(); ++a) {
      for (size_t b = a + 1; b < kept.size(); ++b) {
        CHECK(haversine_km(rows[kept[a]].x, rows[kept[a]].y, rows[kept[b]].x, rows[kept[b]].y) >=
              1.28);
      }
    }
  }
}

TEST_CASE("component split") {
  SUBCASE("mutually close points form one component in one split") {
    std::vector<EvalRow> rows;
    for (int i = 0; i < 6; ++i) {
      rows.push_back(basic_row(10.0 + i * 0.002, 50.0, i % 2, "train"));
    }
    auto split = component_split(rows, 1.28, 0.5);
    for (size_t i = 1; i < rows.size(); ++i) CHECK(split[i] == split[0]);
  }

  SUBCASE("two far clusters land in different splits at train_frac one half") {
    std::vector<EvalRow> rows;
    for (int i = 0; i < 5; ++i) rows.push_back(basic_row(10.0 + i * 0.002, 50.0, 0, "train"));
    for (int i = 0; i < 5; ++i) rows.push_back(basic_row(30.0 + i * 0.002, 50.0, 0, "train"));
    auto split = component_split(rows, 1.28, 0.5);
    CHECK(split[0] != split[5]);
    for (int i = 1; i < 5; ++i) CHECK(split[i] == split[0]);
    for (int i = 6; i < 10; ++i) CHECK(split[i] == split[5]);
  }

  SUBCASE("no close pairs reduces to per-point assignment") {
    std::vector<EvalRow> rows;
    for (int i = 0; i < 8; ++i) rows.push_back(basic_row(10.0 + i * 1.0, 50.0, 0, "train"));
    auto split = component_split(rows, 1.28, 0.5);
    int train = 0;
    for (auto s : split) train += s == Split::train ? 1 : 0;
    CHECK(train == 4);
  }
}

TEST_CASE("knn classification") {
  const size_t dim = 64;
  std::vector<LabeledEmbedding> train = {
      {basis(dim, 0), 0}, {basis(dim, 1), 0}, {basis(dim, 2), 1}, {basis(dim, 3), 2}};

  SUBCASE("query equal to a train embedding returns its label at k=1") {
    CHECK(knn_classify(train, basis(dim, 2), 1) == 1);
  }

  SUBCASE("majority of {A, A, B} is A") {
    Embedding q(dim, 0.0f);
    q[0] = q[1] = 0.7071f;  // close to both label-0 points
    CHECK(knn_classify(train, q, 3) == 0);
  }

  SUBCASE("random instances match an exhaustive oracle") {
    Rng rng(23);
    for (int inst = 0; inst < 50; ++inst) {
      std::vector<LabeledEmbedding> t;
      int n = 5 + static_cast<int>(rng.uniform_int(0, 45));
      for (int i = 0; i < n; ++i) {
        Embedding e(dim);
        for (auto& v : e) v = static_cast<float>(rng.normal());
        t.push_back({e, static_cast<double>(rng.uniform_int(0, 3))});
      }
      Embedding q(dim);
      for (auto& v : q) v = static_cast<float>(rng.normal());
      for (int k : {1, 3}) {
        if (k > n) continue;
        // independent oracle: full sort by distance, count labels, tie-break
        std::vector<std::pair<double, double>> byd;
        for (const auto& te : t) {
          double d = 0;
          for (size_t j = 0; j < dim; ++j) {
            d += (double(te.e[j]) - q[j]) * (double(te.e[j]) - q[j]);
          }
          byd.push_back({std::sqrt(d), te.label});
        }
        std::sort(byd.begin(), byd.end());
        std::map<double, int> votes;
        std::map<double, double> near;
        for (int i = 0; i < k; ++i) {
          votes[byd[size_t(i)].second]++;
          if (!near.count(byd[size_t(i)].second)) near[byd[size_t(i)].second] = byd[size_t(i)].first;
        }
        int best = 0;
        for (auto& [l, v] : votes) best = std::max(best, v);
        double expect = -1, bestd = 1e30;
        for (auto& [l, v] : votes) {
          if (v == best && near[l] < bestd) {
            bestd = near[l];
            expect = l;
          }
        }
        CHECK(knn_classify(t, q, k) == expect);
      }
    }
  }
}

TEST_CASE("knn regression") {
  const size_t dim = 4;
  std::vector<LabeledEmbedding> train = {
      {basis(dim, 0), 0.0}, {basis(dim, 1), 1.0}, {basis(dim, 2), 5.0}};

  SUBCASE("constant neighbor labels return the constant under either weighting") {
    std::vector<LabeledEmbedding> t = {{basis(dim, 0), 2.5}, {basis(dim, 1), 2.5}};
    Embedding q(dim, 0.5f);
    CHECK(knn_regress(t, q, 2, KnnWeighting::literal) == doctest::Approx(2.5));
    CHECK(knn_regress(t, q, 2, KnnWeighting::inverse) == doctest::Approx(2.5));
  }

  SUBCASE("k=1 returns the nearest label") {
    CHECK(knn_regress(train, basis(dim, 2), 1, KnnWeighting::literal) == doctest::Approx(5.0));
    CHECK(knn_regress(train, basis(dim, 2), 1, KnnWeighting::inverse) == doctest::Approx(5.0));
  }

  SUBCASE("distances (1,3), labels (0,1): literal 0.75, inverse 0.25") {
    // place the query so distances to the two train points are exactly 1 and 3
    std::vector<LabeledEmbedding> t = {{{1.0f, 0.0f}, 0.0}, {{5.0f, 0.0f}, 1.0}};
    Embedding q = {2.0f, 0.0f};
    CHECK(knn_regress(t, q, 2, KnnWeighting::literal) == doctest::Approx(0.75));
    CHECK(knn_regress(t, q, 2, KnnWeighting::inverse) == doctest::Approx(0.25).epsilon(1e-6));
  }
}

TEST_CASE("linear probe") {
  Rng rng(29);
  const size_t dim = 8;

  SUBCASE("separable clusters reach full train accuracy") {
    std::vector<LabeledEmbedding> train;
    for (int i = 0; i < 20; ++i) {
      Embedding e(dim);
      for (auto& v : e) v = static_cast<float>(rng.normal() * 0.1);
      e[0] += i % 2 ? 3.0f : -3.0f;
      train.push_back({e, static_cast<double>(i % 2)});
    }
    auto probe = linear_fit(train, 1.0);
    for (const auto& t : train) CHECK(probe.predict(t.e) == t.label);
  }

  SUBCASE("identical embeddings tie-break to the lowest class id") {
    std::vector<LabeledEmbedding> train;
    for (int i = 0; i < 6; ++i) train.push_back({Embedding(dim, 0.5f), double(i % 3)});
    auto probe = linear_fit(train, 0.0);
    CHECK(probe.used_pseudo_inverse);
    CHECK(probe.predict(Embedding(dim, 0.5f)) == 0.0);
  }

  SUBCASE("lambda 0 satisfies the normal equations (oracle check)") {
    for (int inst = 0; inst < 20; ++inst) {
      std::vector<LabeledEmbedding> train;
      int n = 20 + static_cast<int>(rng.uniform_int(0, 20));
      for (int i = 0; i < n; ++i) {
        Embedding e(dim);
        for (auto& v : e) v = static_cast<float>(rng.normal());
        train.push_back({e, static_cast<double>(rng.uniform_int(0, 2))});
      }
      auto probe = linear_fit(train, 0.0);
      REQUIRE_FALSE(probe.used_pseudo_inverse);
      // residual of (A^T A) w = A^T y per class
      for (size_t c = 0; c < probe.class_ids.size(); ++c) {
        size_t d1 = dim + 1;
        std::vector<double> ata(d1 * d1, 0.0), aty(d1, 0.0);
        for (const auto& t : train) {
          std::vector<double> row(d1, 1.0);
          for (size_t j = 0; j < dim; ++j) row[j] = t.e[j];
          double y = t.label == probe.class_ids[c] ? 1.0 : -1.0;
          for (size_t i = 0; i < d1; ++i) {
            aty[i] += row[i] * y;
            for (size_t j = 0; j < d1; ++j) ata[i * d1 + j] += row[i] * row[j];
          }
        }
        double worst = 0.0, scale = 0.0;
        for (size_t i = 0; i < d1; ++i) {
          double lhs = 0.0;
          for (size_t j = 0; j < d1; ++j) lhs += ata[i * d1 + j] * probe.coefs[c][j];
          worst = std::max(worst, std::abs(lhs - aty[i]));
          scale = std::max(scale, std::abs(aty[i]));
        }
        CHECK(worst / std::max(scale, 1.0) < 1e-6);
      }
    }
  }
}

TEST_CASE("linear regression head") {
  Rng rng(31);
  const size_t dim = 6;

  SUBCASE("exactly affine labels give zero residual") {
    std::vector<LabeledEmbedding> train;
    std::vector<double> w(dim);
    for (auto& v : w) v = rng.normal();
    for (int i = 0; i < 30; ++i) {
      Embedding e(dim);
      for (auto& v : e) v = static_cast<float>(rng.normal());
      double label = 0.7;
      for (size_t j = 0; j < dim; ++j) label += w[j] * e[j];
      train.push_back({e, label});
    }
    auto reg = regression_linear(train, 0.0);
    for (const auto& t : train) CHECK(reg.predict(t.e) == doctest::Approx(t.label).epsilon(1e-6));
  }

  SUBCASE("constant labels predict the constant") {
    std::vector<LabeledEmbedding> train;
    for (int i = 0; i < 10; ++i) {
      Embedding e(dim);
      for (auto& v : e) v = static_cast<float>(rng.normal());
      train.push_back({e, 4.25});
    }
    auto reg = regression_linear(train, 0.0);
    Embedding q(dim, 0.3f);
    CHECK(reg.predict(q) == doctest::Approx(4.25).epsilon(1e-9));
  }
}

TEST_CASE("change detection") {
  const size_t dim = 64;

  SUBCASE("identical vs orthogonal pairs separate perfectly at k=1") {
    Rng rng(61);
    std::vector<LabeledEmbedding> train;
    // no-change: identical halves; change: orthogonal halves
    for (int i = 0; i < 8; ++i) {
      EmbeddingPair p;
      p.before = basis(dim, static_cast<size_t>(i));
      p.after = i % 2 ? basis(dim, static_cast<size_t>(i) + 10) : p.before;
      train.push_back({concat_pair(p), double(i % 2)});
    }
    // queries jitter the training pairs without crossing the class boundary
    for (int i = 0; i < 8; ++i) {
      EmbeddingPair q;
      q.before = basis(dim, static_cast<size_t>(i));
      q.after = i % 2 ? basis(dim, static_cast<size_t>(i) + 10) : q.before;
      for (auto& v : q.before) v += static_cast<float>(0.05 * rng.normal());
      for (auto& v : q.after) v += static_cast<float>(0.05 * rng.normal());
      CHECK(knn_classify(train, concat_pair(q), 1) == double(i % 2));
    }
    // swapped concatenation order at train and query, applied consistently
    std::vector<LabeledEmbedding> swapped;
    for (int i = 0; i < 8; ++i) {
      EmbeddingPair p;
      p.before = basis(dim, static_cast<size_t>(i));
      p.after = i % 2 ? basis(dim, static_cast<size_t>(i) + 10) : p.before;
      swapped.push_back({concat_pair({p.after, p.before}), double(i % 2)});
    }
    for (int i = 0; i < 8; ++i) {
      EmbeddingPair q;
      q.before = basis(dim, static_cast<size_t>(i));
      q.after = i % 2 ? basis(dim, static_cast<size_t>(i) + 10) : q.before;
      CHECK(knn_classify(train, concat_pair(q), 1) ==
            knn_classify(swapped, concat_pair({q.after, q.before}), 1));
    }
  }

  SUBCASE("unsupervised threshold: identical pairs, all no-change") {
    std::vector<EmbeddingPair> pairs(5, {basis(dim, 0), basis(dim, 0)});
    std::vector<double> labels(5, 0.0);
    auto result = change_unsupervised(pairs, labels);
    CHECK(result.balanced_accuracy == 1.0);
    CHECK(result.threshold == doctest::Approx(0.1));  // smallest of the tie
  }

  SUBCASE("constructed magnitudes 0.05 / 0.95 pick a separating threshold") {
    std::vector<EmbeddingPair> pairs;
    std::vector<double> labels;
    // cos(theta) = 0.9 -> d = 0.05 ; cos = -0.9 -> d = 0.95
    for (int i = 0; i < 10; ++i) {
      bool change = i % 2;
      Embedding b = basis(dim, 0);
      Embedding a(dim, 0.0f);
      a[0] = change ? -0.9f : 0.9f;
      a[1] = static_cast<float>(std::sqrt(1.0 - 0.81));
      pairs.push_back({b, a});
      labels.push_back(change ? 1.0 : 0.0);
    }
    auto result = change_unsupervised(pairs, labels);
    CHECK(result.balanced_accuracy == 1.0);
    CHECK(result.threshold > 0.05);
    CHECK(result.threshold <= 0.9);
  }

  SUBCASE("returned threshold is the BA argmax over the nine-element sweep (oracle)") {
    Rng rng(37);
    for (int inst = 0; inst < 25; ++inst) {
      std::vector<EmbeddingPair> pairs;
      std::vector<double> labels;
      int n = 10 + static_cast<int>(rng.uniform_int(0, 30));
      for (int i = 0; i < n; ++i) {
        Embedding b(dim), a(dim);
        for (auto& v : b) v = static_cast<float>(rng.normal());
        for (auto& v : a) v = static_cast<float>(rng.normal());
        pairs.push_back({b, a});
        labels.push_back(static_cast<double>(rng.uniform_int(0, 1)));
      }
      auto result = change_unsupervised(pairs, labels);
      // exhaustive reimplementation
      double best_ba = -1, best_thr = 0;
      for (int t = 1; t <= 9; ++t) {
        double thr = 0.1 * t;
        double correct0 = 0, total0 = 0, correct1 = 0, total1 = 0;
        for (size_t j = 0; j < pairs.size(); ++j) {
          auto nb = geom::normalize(pairs[j].before);
          auto na = geom::normalize(pairs[j].after);
          double d = geom::change_magnitude(nb, na);
          double pred = d >= thr ? 1.0 : 0.0;
          if (labels[j] == 0) {
            total0 += 1;
            correct0 += pred == 0 ? 1 : 0;
          } else {
            total1 += 1;
            correct1 += pred == 1 ? 1 : 0;
          }
        }
        double ba = 0.0;
        int classes = 0;
        if (total0 > 0) {
          ba += correct0 / total0;
          ++classes;
        }
        if (total1 > 0) {
          ba += correct1 / total1;
          ++classes;
        }
        ba /= classes;
        if (ba > best_ba) {
          best_ba = ba;
          best_thr = thr;
        }
      }
      CHECK(result.threshold == doctest::Approx(best_thr));
      CHECK(result.balanced_accuracy == doctest::Approx(best_ba));
    }
  }
}

TEST_CASE("metrics") {
  std::vector<double> truth = {0, 0, 1, 1};

  SUBCASE("perfect classifier") {
    std::vector<double> pred = {0, 0, 1, 1};
    CHECK(metric(pred, truth, MetricKind::balanced_accuracy) == 1.0);
    CHECK(metric(pred, truth, MetricKind::ber) == 0.0);
    CHECK(metric(pred, truth, MetricKind::ber_kappa) == 0.0);
  }

  SUBCASE("constant predictor on two balanced classes") {
    std::vector<double> pred = {0, 0, 0, 0};
    CHECK(metric(pred, truth, MetricKind::balanced_accuracy) == 0.5);
    CHECK(metric(pred, truth, MetricKind::ber_kappa) == 1.0);  // 0.5 / 0.5
  }

  SUBCASE("worse than random clamps at one") {
    std::vector<double> pred = {1, 1, 0, 0};
    CHECK(metric(pred, truth, MetricKind::ber_kappa) == 1.0);
  }

  SUBCASE("BA plus BER is exactly one") {
    Rng rng(41);
    for (int i = 0; i < 20; ++i) {
      std::vector<double> p(8), t(8);
      for (size_t j = 0; j < 8; ++j) {
        p[j] = static_cast<double>(rng.uniform_int(0, 2));
        t[j] = static_cast<double>(j % 3);
      }
      double ba = metric(p, t, MetricKind::balanced_accuracy);
      double ber = metric(p, t, MetricKind::ber);
      CHECK(ba + ber == 1.0);
      double bk = metric(p, t, MetricKind::ber_kappa);
      CHECK(bk >= 0.0);
      CHECK(bk <= 1.0);
    }
  }

  SUBCASE("single-class truth is rejected for BA") {
    std::vector<double> pred = {0, 0};
    std::vector<double> ones = {1, 1};
    CHECK_THROWS_AS((void)metric(pred, ones, MetricKind::balanced_accuracy), Error);
  }

  SUBCASE("regression metrics") {
    std::vector<double> t = {1.0, 2.0, 3.0, 4.0};
    std::vector<double> p = {1.1, 1.9, 3.2, 3.8};
    CHECK(metric(p, t, MetricKind::mae) == doctest::Approx(0.15));
    CHECK(metric(t, t, MetricKind::r_squared) == 1.0);
    // predicting the mean gives R^2 of zero
    std::vector<double> mean_pred(4, 2.5);
    CHECK(metric(mean_pred, t, MetricKind::r_squared) == doctest::Approx(0.0));
  }
}

TEST_CASE("fold counts and uncertainty statistics") {
  SUBCASE("group-fold formula") {
    CHECK(kfold_count(75) == 273);
    CHECK(kfold_count(10) == 500);
    CHECK(kfold_count(std::vector<int64_t>{50, 50, 50}) == 1);  // balanced
    CHECK(kfold_count(std::vector<int64_t>{75, 120}) == 273);

    SUBCASE("random counts match a direct reimplementation") {
      Rng rng(43);
      for (int i = 0; i < 50; ++i) {
        int64_t c = 1 + rng.uniform_int(0, 99999);
        auto expect = static_cast<int64_t>(
            std::ceil(1000.0 / std::pow(2.0, std::log10(static_cast<double>(c)))));
        CHECK(kfold_count(c) == expect);
      }
    }
  }

  SUBCASE("kfold statistics") {
    auto same = kfold_stats({0.75, 0.75, 0.75});
    CHECK(same.mean == doctest::Approx(0.75));
    CHECK(*same.sigma == 0.0);

    auto pair = kfold_stats({0.0, 1.0});
    CHECK(pair.mean == 0.5);
    CHECK(*pair.sigma == doctest::Approx(0.70710678).epsilon(1e-6));

    auto one = kfold_stats({0.4});
    CHECK_FALSE(one.sigma.has_value());

    SUBCASE("textbook sample standard deviation oracle") {
      Rng rng(47);
      std::vector<double> m(37);
      for (auto& v : m) v = rng.uniform();
      auto r = kfold_stats(m);
      double mean = 0;
      for (double v : m) mean += v;
      mean /= static_cast<double>(m.size());
      double ss = 0;
      for (double v : m) ss += (v - mean) * (v - mean);
      CHECK(r.mean == doctest::Approx(mean).epsilon(1e-12));
      CHECK(*r.sigma ==
            doctest::Approx(std::sqrt(ss / static_cast<double>(m.size() - 1))).epsilon(1e-12));
    }
  }

  SUBCASE("bootstrap statistics") {
    std::vector<double> truth = {0, 0, 1, 1, 0, 1};
    SUBCASE("constant metric gives zero sigma") {
      Rng rng(3);
      auto r = bootstrap_stats(truth, truth, MetricKind::balanced_accuracy, 100, rng);
      CHECK(r.mean == 1.0);
      CHECK(*r.sigma == 0.0);
      CHECK(r.bootstraps == 100);
    }
    SUBCASE("fixed seed reproduces the report") {
      std::vector<double> pred = {0, 1, 1, 1, 0, 0};
      Rng a(9), b(9);
      auto ra = bootstrap_stats(pred, truth, MetricKind::balanced_accuracy, 100, a);
      auto rb = bootstrap_stats(pred, truth, MetricKind::balanced_accuracy, 100, b);
      CHECK(ra.mean == rb.mean);
      CHECK(*ra.sigma == *rb.sigma);
    }
    SUBCASE("weights always sum to the split size") {
      Rng rng(11);
      for (int i = 0; i < 200; ++i) {
        auto w = bootstrap_resample_weights(17, rng);
        double sum = 0;
        for (double v : w) sum += v;
        CHECK(sum == 17.0);
      }
    }
    SUBCASE("MAE bootstrap matches an independent seeded reimplementation") {
      std::vector<double> t(10), p(10);
      Rng init(13);
      for (size_t i = 0; i < 10; ++i) {
        t[i] = init.uniform();
        p[i] = t[i] + 0.1 * init.normal();
      }
      Rng a(21);
      auto r = bootstrap_stats(p, t, MetricKind::mae, 100, a);
      // reimplementation with the same generator contract
      Rng b(21);
      std::vector<double> samples;
      for (int i = 0; i < 100; ++i) {
        auto w = bootstrap_resample_weights(10, b);
        double num = 0, den = 0;
        for (size_t j = 0; j < 10; ++j) {
          num += w[j] * std::abs(t[j] - p[j]);
          den += w[j];
        }
        samples.push_back(num / den);
      }
      double mean = 0;
      for (double v : samples) mean += v;
      mean /= 100.0;
      double ss = 0;
      for (double v : samples) ss += (v - mean) * (v - mean);
      CHECK(r.mean == doctest::Approx(mean).epsilon(1e-12));
      CHECK(*r.sigma == doctest::Approx(std::sqrt(ss / 99.0)).epsilon(1e-12));
    }
  }
}

TEST_CASE("run_trial") {
  SUBCASE("1-shot kNN over a clustered fixture") {
    FixtureSpec spec;
    spec.classes = 3;
    spec.train_per_class = 10;
    spec.test_per_class = 15;
    spec.cluster_spread = 0.15;
    auto fx = make_fixture(spec);
    TableSource table(fx.table, 64);
    TrialSpec trial;
    trial.shots = Shots::one;
    trial.transfer = Transfer::knn1;
    trial.repeats = 50;
    auto report = run_trial(fx.dataset, table, trial, MetricKind::balanced_accuracy, 5);
    CHECK(report.method == "kfold");
    CHECK(report.folds == 50);
    CHECK(report.mean > 0.8);  // tight clusters are nearly separable
    CHECK(report.sigma.has_value());
  }

  SUBCASE("row order does not change the report") {
    FixtureSpec spec;
    spec.classes = 3;
    spec.train_per_class = 8;
    spec.test_per_class = 10;
    auto fx = make_fixture(spec);
    TrialSpec trial;
    trial.shots = Shots::one;
    trial.transfer = Transfer::knn1;
    trial.repeats = 20;

    TableSource table(fx.table, 64);
    auto base = run_trial(fx.dataset, table, trial, MetricKind::balanced_accuracy, 5);

    // rotate rows (and the table with them)
    Dataset rotated = fx.dataset;
    std::vector<Embedding> rotated_table = fx.table;
    std::rotate(rotated.rows.begin(), rotated.rows.begin() + 7, rotated.rows.end());
    std::rotate(rotated_table.begin(), rotated_table.begin() + 7, rotated_table.end());
    TableSource table2(rotated_table, 64);
    auto permuted = run_trial(rotated, table2, trial, MetricKind::balanced_accuracy, 5);
    CHECK(base.mean == permuted.mean);
    CHECK(*base.sigma == *permuted.sigma);
  }

  SUBCASE("max trial with small classes uses the nested scheme") {
    FixtureSpec spec;
    spec.classes = 2;
    spec.train_per_class = 12;
    spec.test_per_class = 20;
    auto fx = make_fixture(spec);
    // unbalance the training split a little: one class loses a row
    fx.dataset.rows[0].split = "test";
    TableSource table(fx.table, 64);
    TrialSpec trial;
    trial.shots = Shots::max;
    trial.transfer = Transfer::knn1;
    auto report = run_trial(fx.dataset, table, trial, MetricKind::balanced_accuracy, 5);
    CHECK(report.method == "nested");
    CHECK(report.folds == kfold_count(11));
    CHECK(report.bootstraps == 20);
  }

  SUBCASE("linearly structured labels favor the linear probe over 1-NN") {
    FixtureSpec spec;
    spec.classes = 2;
    spec.seed = 7;
    spec.train_per_class = 60;
    spec.test_per_class = 80;
    spec.cluster_spread = 2.0;  // heavy overlap in space, labels via hyperplane
    auto fx = make_fixture(spec);
    // relabel by a hyperplane through the embedding space
    Rng rng(99);
    Embedding w(64);
    for (auto& v : w) v = static_cast<float>(rng.normal());
    for (size_t i = 0; i < fx.dataset.rows.size(); ++i) {
      double s = 0;
      for (size_t j = 0; j < 64; ++j) s += w[j] * fx.table[i][j];
      fx.dataset.rows[i].label = s > 0 ? 1.0 : 0.0;
    }
    TableSource table(fx.table, 64);
    TrialSpec linear;
    linear.shots = Shots::max;
    linear.transfer = Transfer::linear;
    TrialSpec knn;
    knn.shots = Shots::max;
    knn.transfer = Transfer::knn1;
    auto lr = run_trial(fx.dataset, table, linear, MetricKind::balanced_accuracy, 5);
    auto kr = run_trial(fx.dataset, table, knn, MetricKind::balanced_accuracy, 5);
    CHECK(lr.mean > kr.mean);
  }

  SUBCASE("regression trial reports R^2") {
    FixtureSpec spec;
    spec.regression = true;
    spec.train_per_class = 220;
    spec.test_per_class = 100;
    auto fx = make_fixture(spec);
    TableSource table(fx.table, 64);
    TrialSpec trial;
    trial.shots = Shots::max;
    trial.transfer = Transfer::linear;
    auto report = run_trial(fx.dataset, table, trial, MetricKind::r_squared, 5);
    CHECK(report.mean > 0.99);  // labels are affine in the embeddings
    CHECK(report.method == "bootstrap");
  }

  SUBCASE("unsupervised change trial") {
    FixtureSpec spec;
    spec.change = true;
    spec.classes = 3;
    spec.train_per_class = 10;
    spec.test_per_class = 30;
    spec.cluster_spread = 0.05;
    auto fx = make_fixture(spec);
    TableSource table(fx.table, 64);
    TrialSpec trial;
    trial.shots = Shots::max;
    trial.change_supervised = false;
    auto report = run_trial(fx.dataset, table, trial, MetricKind::balanced_accuracy, 5);
    CHECK(report.mean > 0.9);
  }
}

TEST_CASE("embedding table and report round trips") {
  Rng rng(51);
  std::vector<Embedding> rows;
  for (int i = 0; i < 5; ++i) {
    Embedding e(64);
    for (auto& v : e) v = static_cast<float>(rng.normal());
    rows.push_back(e);
  }
  write_table("table_rt.bin", rows, 64);
  auto table = load_table("table_rt.bin");
  REQUIRE(table.rows() == 5);
  EvalRow dummy;
  for (size_t i = 0; i < 5; ++i) CHECK(table.embedding(dummy, i) == rows[i]);
  std::filesystem::remove("table_rt.bin");

  MetricReport r;
  r.dataset = "fixture";
  r.trial = "max_linear";
  r.metric = "balanced_accuracy";
  r.mean = 0.91;
  r.sigma = 0.02;
  r.method = "bootstrap";
  r.bootstraps = 100;
  r.seed = 7;
  append_report("reports_rt.jsonl", r);
  auto reports = read_reports("reports_rt.jsonl");
  REQUIRE(reports.size() == 1);
  CHECK(reports[0].mean == 0.91);
  CHECK(*reports[0].sigma == 0.02);
  CHECK(reports[0].trial == "max_linear");

  write_report_plot("plot_rt.svg", "plot_rt.csv", reports, "fixture");
  CHECK(std::filesystem::exists("plot_rt.svg"));
  CHECK(std::filesystem::file_size("plot_rt.svg") > 200);
  std::filesystem::remove("reports_rt.jsonl");
  std::filesystem::remove("plot_rt.svg");
  std::filesystem::remove("plot_rt.csv");
}
