#include <cmath>
#include <vector>

#include "doctest.h"
#include "latcast/eval.hpp"
#include "latcast/prior.hpp"

using namespace latcast;

namespace {

model::ModelConfig tiny_cfg() {
  model::ModelConfig cfg;
  cfg.d = 8;
  cfg.heads = 2;
  cfg.embedder_layers = 2;
  cfg.dilations = {1, 2};
  cfg.predictor_layers = 1;
  return cfg;
}

ContextBatch tiny_batch(std::uint64_t seed, std::size_t n_ctx = 4) {
  prior::HyperPrior hp;
  prior::BatchShape shape{n_ctx, 1, 16, 4};
  Rng rng(seed);
  return prior::generate_context_batch(hp, shape, rng);
}

}  // namespace

TEST_SUITE("eval") {
  TEST_CASE("mse fixtures") {
    CHECK(eval::mse({1.0, 2.0}, {1.0, 2.0}) == 0.0);
    CHECK(eval::mse({1.5, 2.5}, {1.0, 2.0}) == doctest::Approx(0.25));
    CHECK(eval::mse({1.0, 2.0}, {0.0, 0.0}) == doctest::Approx(2.5));
    CHECK(eval::mse({3.0, 7.0}, {1.0, 2.0}) == eval::mse({1.0, 2.0}, {3.0, 7.0}));
    CHECK_THROWS_AS(eval::mse({1.0}, {1.0, 2.0}), std::invalid_argument);
  }

  TEST_CASE("crrmse fixtures") {
    CHECK(eval::crrmse({1.0, 2.0, 3.0}, {1.0, 2.0, 3.0}) == 0.0);

    // target all 1, forecast all 1 + delta over H = 3 steps:
    // C_f - C_y = delta * t, so mean square = delta^2 * (1 + 4 + 9) / 3;
    // denominator = |3| / 3 + 1e-8.
    const double delta = 0.5;
    const double expect =
        std::sqrt(delta * delta * (1.0 + 4.0 + 9.0) / 3.0) / (3.0 / 3.0 + 1e-8);
    CHECK(eval::crrmse({1.5, 1.5, 1.5}, {1.0, 1.0, 1.0}) == doctest::Approx(expect).epsilon(1e-10));

    // Zero target: the epsilon guard keeps the value finite.
    CHECK(std::isfinite(eval::crrmse({1.0, 1.0}, {0.0, 0.0})));
  }

  TEST_CASE("bin accuracy fixtures") {
    pipeline::BinSpec spec;
    const std::size_t B = spec.count;
    std::vector<double> targets{0.0, 1.0, -1.0, 2.0};
    std::vector<double> probs(targets.size() * B, 0.0);
    for (std::size_t r = 0; r < targets.size(); ++r) probs[r * B + spec.index(targets[r])] = 1.0;
    CHECK(eval::bin_accuracy(probs, B, targets, spec) == 1.0);

    // Break one row: 3 of 4 correct.
    probs[0 * B + spec.index(0.0)] = 0.0;
    probs[0 * B + spec.index(3.0)] = 1.0;
    CHECK(eval::bin_accuracy(probs, B, targets, spec) == doctest::Approx(0.75));
  }

  TEST_CASE("forecast is deterministic and matches a one-hot oracle") {
    auto cfg = tiny_cfg();
    Rng rng(1);
    auto p = model::init_params<float>(cfg, rng);
    auto batch = tiny_batch(2);
    auto a = eval::forecast(cfg, p, batch);
    auto b = eval::forecast(cfg, p, batch);
    CHECK(a.point == b.point);
    REQUIRE(a.point.size() == batch.n_held * batch.horizon);
    // Rows sum to one.
    for (std::size_t r = 0; r < a.point.size(); ++r) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.bins; ++k) s += a.probs[r * a.bins + k];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
    }
    // Point forecasts stay inside the bin range.
    for (double v : a.point) {
      CHECK(v >= cfg.bins.lo);
      CHECK(v <= cfg.bins.hi);
    }
  }

  TEST_CASE("context subsampling keeps the selected rows") {
    auto batch = tiny_batch(3);
    auto sub = eval::subsample_context(batch, {2, 0});
    CHECK(sub.n_ctx == 2);
    const std::size_t row = batch.seq_len * 3;
    for (std::size_t j = 0; j < row; ++j) {
      CHECK(sub.context[j] == batch.context[2 * row + j]);
      CHECK(sub.context[row + j] == batch.context[0 * row + j]);
    }
    CHECK_THROWS_AS(eval::subsample_context(batch, {9}), std::out_of_range);
  }

  TEST_CASE("ablation curve has the right shape and errors") {
    auto cfg = tiny_cfg();
    Rng rng(4);
    auto p = model::init_params<float>(cfg, rng);
    std::vector<ContextBatch> pool{tiny_batch(5), tiny_batch(6)};
    Rng arng(7);
    auto curve = eval::ablate_context_size(cfg, p, pool, {1, 2, 4}, 2, arng);
    REQUIRE(curve.size() == 3);
    for (const auto& pt : curve) {
      CHECK(pt.mean >= 0.0);
      CHECK(pt.stddev >= 0.0);
    }
    auto csv = eval::ablation_csv(curve);
    CHECK(csv.rfind("size,mean,std\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);

    Rng arng2(8);
    CHECK_THROWS_AS(eval::ablate_context_size(cfg, p, pool, {5}, 1, arng2),
                    std::invalid_argument);
  }

  TEST_CASE("ablation is deterministic under a fixed seed") {
    auto cfg = tiny_cfg();
    Rng rng(9);
    auto p = model::init_params<float>(cfg, rng);
    std::vector<ContextBatch> pool{tiny_batch(10)};
    Rng a(11), b(11);
    auto ca = eval::ablate_context_size(cfg, p, pool, {1, 2}, 3, a);
    auto cb = eval::ablate_context_size(cfg, p, pool, {1, 2}, 3, b);
    for (std::size_t i = 0; i < ca.size(); ++i) {
      CHECK(ca[i].mean == cb[i].mean);
      CHECK(ca[i].stddev == cb[i].stddev);
    }
  }

  TEST_CASE("summary embedding length and determinism") {
    auto cfg = tiny_cfg();
    Rng rng(12);
    auto p = model::init_params<float>(cfg, rng);
    auto batch = tiny_batch(13);
    std::vector<double> window(batch.context.begin(),
                               batch.context.begin() + std::ptrdiff_t(batch.seq_len * 3));
    auto e1 = eval::summary_embed(cfg, p, window);
    auto e2 = eval::summary_embed(cfg, p, window);
    CHECK(e1.size() == cfg.d);
    CHECK(e1 == e2);
  }

  TEST_CASE("knn probe equals brute force and handles ties") {
    // Exact-match test point with k = 1.
    std::vector<std::vector<double>> tr{{0.0, 0.0}, {1.0, 1.0}, {2.0, 2.0}};
    std::vector<int> try_{0, 1, 2};
    CHECK(eval::knn_probe(tr, try_, {{1.0, 1.0}}, {1}, 1) == 1.0);
    CHECK_THROWS_AS(eval::knn_probe(tr, try_, {{0.0, 0.0}}, {0}, 4), std::invalid_argument);

    // Two separated Gaussian clusters, k = 1, accuracy > 0.95.
    Rng rng(14);
    std::vector<std::vector<double>> train_x, test_x;
    std::vector<int> train_y, test_y;
    for (int i = 0; i < 200; ++i) {
      const int label = i % 2;
      const double cx = label == 0 ? -3.0 : 3.0;
      std::vector<double> v{cx + rng.normal(), rng.normal()};
      if (i < 100) {
        train_x.push_back(v);
        train_y.push_back(label);
      } else {
        test_x.push_back(v);
        test_y.push_back(label);
      }
    }
    CHECK(eval::knn_probe(train_x, train_y, test_x, test_y, 1) > 0.95);

    // Brute-force 1-NN equivalence on the same data.
    std::size_t hits = 0;
    for (std::size_t t = 0; t < test_x.size(); ++t) {
      double best = 1e300;
      std::size_t arg = 0;
      for (std::size_t i = 0; i < train_x.size(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < 2; ++j) {
          const double d = train_x[i][j] - test_x[t][j];
          s += d * d;
        }
        if (s < best) {
          best = s;
          arg = i;
        }
      }
      if (train_y[arg] == test_y[t]) ++hits;
    }
    CHECK(eval::knn_probe(train_x, train_y, test_x, test_y, 1) ==
          doctest::Approx(double(hits) / double(test_x.size())));
  }

  TEST_CASE("patch segmentation fixtures") {
    const std::size_t d = 2;

    SUBCASE("constant embeddings form a single patch") {
      std::vector<double> emb(10 * d, 1.0);
      auto idx = eval::patch_segment(emb, d);
      CHECK(idx.boundaries == std::vector<std::size_t>{0});
      REQUIRE(idx.means.size() == 1);
      CHECK(idx.means[0] == std::vector<double>{1.0, 1.0});
    }

    SUBCASE("one large jump splits into exactly two patches") {
      std::vector<double> emb;
      for (int i = 0; i < 8; ++i) {
        const double base = i < 4 ? 0.0 : 10.0;
        // Small within-patch wobble keeps the median step distance nonzero.
        emb.push_back(base + 0.01 * (i % 2));
        emb.push_back(base);
      }
      auto idx = eval::patch_segment(emb, d, 2.0);
      CHECK(idx.boundaries == std::vector<std::size_t>{0, 4});
      REQUIRE(idx.means.size() == 2);
      CHECK(idx.means[1][1] == doctest::Approx(10.0));
    }

    SUBCASE("patches tile the window") {
      Rng rng(15);
      std::vector<double> emb(32 * d);
      for (auto& v : emb) v = rng.normal();
      auto idx = eval::patch_segment(emb, d);
      REQUIRE(!idx.boundaries.empty());
      CHECK(idx.boundaries.front() == 0);
      for (std::size_t i = 1; i < idx.boundaries.size(); ++i)
        CHECK(idx.boundaries[i] > idx.boundaries[i - 1]);
      CHECK(idx.boundaries.back() < 32);
      CHECK(idx.means.size() == idx.boundaries.size());
    }

    SUBCASE("too-short window errors") {
      std::vector<double> emb(d, 0.0);
      CHECK_THROWS_AS(eval::patch_segment(emb, d), std::invalid_argument);
    }
  }

  TEST_CASE("nearest patches excludes the query window and finds duplicates") {
    const std::size_t d = 2;
    std::vector<double> w0, w1;
    for (int i = 0; i < 6; ++i) {
      const double b0 = i < 3 ? 0.0 : 5.0;
      w0.push_back(b0 + 0.01 * (i % 2));
      w0.push_back(b0);
      w1.push_back(b0 + 0.01 * (i % 2));  // same shape in another window
      w1.push_back(b0);
    }
    auto i0 = eval::patch_segment(w0, d, 2.0, 0);
    auto i1 = eval::patch_segment(w1, d, 2.0, 1);
    auto matches = eval::nearest_patches({i0, i1}, i0.means[0], 3, 0);
    REQUIRE(!matches.empty());
    CHECK(matches[0].window == 1);
    CHECK(matches[0].distance == doctest::Approx(0.0));
    for (const auto& m : matches) CHECK(m.window != 0);
  }

  TEST_CASE("naive baselines fixtures") {
    auto b = eval::naive_baselines({3.0, 3.0, 3.0}, 4, 2);
    CHECK(b.last_value == std::vector<double>(4, 3.0));
    CHECK(b.climatology == std::vector<double>(4, 3.0));
    CHECK(b.seasonal_naive == std::vector<double>(4, 3.0));

    auto s = eval::naive_baselines({1.0, 2.0, 1.0, 2.0}, 2, 2);
    CHECK(s.seasonal_naive == std::vector<double>{1.0, 2.0});
    CHECK(s.climatology == std::vector<double>{1.5, 1.5});

    CHECK_THROWS_AS(eval::naive_baselines({1.0}, 2, 3), std::invalid_argument);
  }

  TEST_CASE("pca projection fixtures") {
    SUBCASE("rank-1 data concentrates variance on the first component") {
      Rng rng(16);
      std::vector<std::vector<double>> vecs;
      std::vector<double> dir(8);
      for (auto& v : dir) v = rng.normal();
      for (int i = 0; i < 40; ++i) {
        const double t = rng.normal();
        std::vector<double> v(8);
        for (std::size_t j = 0; j < 8; ++j) v[j] = t * dir[j];
        vecs.push_back(v);
      }
      auto proj = eval::pca_project(vecs, 2);
      double var1 = 0.0, var2 = 0.0, m1 = 0.0, m2 = 0.0;
      for (std::size_t i = 0; i < vecs.size(); ++i) {
        m1 += proj[i * 2];
        m2 += proj[i * 2 + 1];
      }
      m1 /= double(vecs.size());
      m2 /= double(vecs.size());
      for (std::size_t i = 0; i < vecs.size(); ++i) {
        var1 += (proj[i * 2] - m1) * (proj[i * 2] - m1);
        var2 += (proj[i * 2 + 1] - m2) * (proj[i * 2 + 1] - m2);
      }
      CHECK(var1 / (var1 + var2) > 0.999);
      // Projection of centered data has zero mean.
      CHECK(m1 == doctest::Approx(0.0).epsilon(1e-9));
      CHECK(m2 == doctest::Approx(0.0).scale(1.0).epsilon(1e-9));
    }

    SUBCASE("3-point hand fixture matches the analytic eigenvector") {
      // Points (0,0), (1,1), (2,2): principal direction (1,1)/sqrt(2),
      // centered coordinates -sqrt(2), 0, +sqrt(2).
      std::vector<std::vector<double>> vecs{{0.0, 0.0}, {1.0, 1.0}, {2.0, 2.0}};
      auto proj = eval::pca_project(vecs, 1);
      CHECK(proj[0] == doctest::Approx(-std::sqrt(2.0)).epsilon(1e-8));
      CHECK(proj[1] == doctest::Approx(0.0).scale(1.0).epsilon(1e-8));
      CHECK(proj[2] == doctest::Approx(std::sqrt(2.0)).epsilon(1e-8));
    }

    SUBCASE("degenerate all-equal input flags and zeroes") {
      std::vector<std::vector<double>> vecs(5, std::vector<double>{1.0, 2.0, 3.0});
      bool deg = false;
      auto proj = eval::pca_project(vecs, 2, &deg);
      CHECK(deg);
      for (double v : proj) CHECK(v == 0.0);
    }
  }
}
