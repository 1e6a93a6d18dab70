#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "latcast/prior.hpp"

using namespace latcast;
using namespace latcast::prior;

TEST_SUITE("prior") {
  TEST_CASE("log-uniform map fixtures and roundtrip") {
    CHECK(map_log_uniform(0.0, 507.0) == 0.0);
    CHECK(map_log_uniform(1.0016, 507.0) ==
          doctest::Approx(std::log2(1.0016 * 507.0 + 1.0)).epsilon(1e-14));
    CHECK(map_log_uniform(1.0016, 507.0) == doctest::Approx(8.9910).epsilon(1e-4));
    CHECK(unmap_log_uniform(map_log_uniform(1.0016, 507.0), 507.0) ==
          doctest::Approx(1.0016).epsilon(1e-12));
    for (double x : {0.1, 0.5, 1.0}) {
      CHECK(unmap_log_uniform(map_log_uniform(x, 53.6), 53.6) ==
            doctest::Approx(x).epsilon(1e-12));
    }
    CHECK_THROWS_AS(map_log_uniform(-1.0, 507.0), std::domain_error);
    // Strictly increasing.
    CHECK(map_log_uniform(0.2, 53.6) < map_log_uniform(0.3, 53.6));
  }

  TEST_CASE("context sub-ranges nest inside the hyperprior") {
    HyperPrior hp;
    Rng rng(1);
    for (int i = 0; i < 2000; ++i) {
      auto cp = sample_context_params(hp, rng);
      CHECK(cp.annual.within(hp.annual_scale));
      CHECK(cp.monthly.within(hp.monthly_scale));
      CHECK(cp.weekly.within(hp.weekly_scale));
      CHECK(cp.linear.within(hp.linear_trend));
      CHECK(cp.exp_trend.within(hp.exp_trend));
      CHECK(cp.resolution.within(hp.resolution));
      CHECK(hp.noise_shape.contains(cp.noise_shape_k));
      CHECK(cp.harmonics_week >= hp.harmonics_min);
      CHECK(cp.harmonics_week <= hp.harmonics_max);
    }
  }

  TEST_CASE("degenerate hyperprior ranges collapse exactly") {
    HyperPrior hp;
    hp.annual_scale = {0.5, 0.5};
    Rng rng(2);
    auto cp = sample_context_params(hp, rng);
    CHECK(cp.annual.lo == 0.5);
    CHECK(cp.annual.hi == 0.5);
    auto centers = sample_cluster_centers(cp, hp, rng);
    CHECK(centers.annual.mu1 == 0.5);
    CHECK(centers.annual.mu2 == 0.5);
  }

  TEST_CASE("cluster centers lie inside the context sub-range") {
    HyperPrior hp;
    Rng rng(3);
    for (int i = 0; i < 500; ++i) {
      auto cp = sample_context_params(hp, rng);
      auto cent = sample_cluster_centers(cp, hp, rng);
      CHECK(cp.annual.contains(cent.annual.mu1));
      CHECK(cp.annual.contains(cent.annual.mu2));
      CHECK(cp.weekly.contains(cent.weekly.mu1));
      CHECK(cp.resolution.contains(cent.resolution.mu2));
      CHECK(hp.weekly_scale.contains(cent.weekly.mu1));
    }
  }

  TEST_CASE("series params: sigma statistics and coefficient counts") {
    HyperPrior hp;
    Rng rng(4);
    auto cp = sample_context_params(hp, rng);
    auto cent = sample_cluster_centers(cp, hp, rng);

    // Seasonality scale scatter around the chosen center has std 0.15.
    std::vector<double> draws;
    for (int i = 0; i < 10000; ++i) {
      auto ps = sample_series_params(cent, 1, cp, hp, rng);
      draws.push_back(ps.m_annual - cent.annual.mu1);
      CHECK(ps.c_week.size() == std::size_t(cp.harmonics_week));
      CHECK(ps.d_week.size() == std::size_t(cp.harmonics_week));
      CHECK(ps.c_month.size() == std::size_t(cp.harmonics_month));
      CHECK(ps.c_year.size() == std::size_t(cp.harmonics_year));
      CHECK(ps.k == cp.noise_shape_k);
      CHECK(hp.linear_offset.contains(ps.c_lin));
      CHECK(hp.exp_offset.contains(ps.c_exp));
      CHECK(cp.noise_scale.contains(ps.m_noise));
    }
    double mean = 0.0;
    for (double d : draws) mean += d;
    mean /= double(draws.size());
    double var = 0.0;
    for (double d : draws) var += (d - mean) * (d - mean);
    const double stddev = std::sqrt(var / double(draws.size()));
    CHECK(stddev == doctest::Approx(0.15).epsilon(0.07));
  }

  TEST_CASE("fourier coefficient variance approximates 1/delta") {
    HyperPrior hp;
    hp.harmonics_min = 4;
    hp.harmonics_max = 4;
    Rng rng(5);
    auto cp = sample_context_params(hp, rng);
    auto cent = sample_cluster_centers(cp, hp, rng);
    double sum2 = 0.0;
    std::size_t n = 0;
    for (int i = 0; i < 20000; ++i) {
      auto ps = sample_series_params(cent, 1, cp, hp, rng);
      for (double c : ps.c_week) {
        sum2 += c * c;
        ++n;
      }
    }
    CHECK(sum2 / double(n) == doctest::Approx(0.25).epsilon(0.05));
  }

  TEST_CASE("trend fixtures") {
    SeriesParams ps;

    SUBCASE("no linear component gives the constant 1") {
      ps.m_lin = 0.0;
      ps.c_lin = 0.0;
      ps.m_exp = 1.001;
      ps.c_exp = 0.7;
      for (double t : {0.0, 1.0, 10.0, 100.0}) CHECK(eval_trend(t, ps) == 1.0);
    }

    SUBCASE("direct formula oracle at t = 3.5") {
      ps.m_lin = 0.01;
      ps.c_lin = 0.4;
      ps.m_exp = 1.0007;
      ps.c_exp = 1.3;
      const double t = 3.5;
      const double expect = 1.0 + (0.01 * t + 0.4) * (1.3 * std::pow(1.0007, t));
      CHECK(eval_trend(t, ps) == doctest::Approx(expect).epsilon(1e-10));
    }

    SUBCASE("overflow clamps and flags") {
      ps.m_lin = 1e5;
      ps.c_lin = 1e5;
      ps.m_exp = 1.0016;
      ps.c_exp = 2.0;
      bool flagged = false;
      const double v = eval_trend(1e4, ps, 1e6, &flagged);
      CHECK(std::abs(v) <= 1e6);
      CHECK(flagged);
    }
  }

  TEST_CASE("seasonality fixtures") {
    HyperPrior hp;
    SeriesParams ps;
    ps.delta_week = 2;
    ps.c_week = {0.3, -0.2};
    ps.d_week = {0.1, 0.4};
    ps.delta_month = 1;
    ps.c_month = {0.0};
    ps.d_month = {0.0};
    ps.delta_year = 1;
    ps.c_year = {0.0};
    ps.d_year = {0.0};

    SUBCASE("all scales zero gives 1") {
      ps.m_weekly = 0.0;
      ps.m_monthly = 0.0;
      ps.m_annual = 0.0;
      for (double t : {0.0, 2.5, 17.0}) CHECK(eval_seasonality(t, ps, hp) == 1.0);
    }

    SUBCASE("single component is periodic with p_week") {
      ps.m_weekly = 1.2;
      for (double t : {0.0, 1.3, 5.9}) {
        CHECK(eval_seasonality(t, ps, hp) ==
              doctest::Approx(eval_seasonality(t + hp.p_week, ps, hp)).epsilon(1e-9));
      }
    }

    SUBCASE("mean over one period is 1") {
      ps.m_weekly = 0.8;
      const int steps = 200000;
      double mean = 0.0;
      for (int i = 0; i < steps; ++i)
        mean += eval_seasonality(hp.p_week * double(i) / double(steps), ps, hp);
      mean /= double(steps);
      CHECK(mean == doctest::Approx(1.0).epsilon(1e-6));
    }
  }

  TEST_CASE("noise centering") {
    SUBCASE("zero amplitude is exactly 1") {
      Rng rng(6);
      for (double v : sample_noise(1000, 2.0, 0.0, rng)) CHECK(v == 1.0);
    }

    SUBCASE("median of z' is 1 for several shapes") {
      for (double k : {0.8, 2.0, 5.0}) {
        Rng rng(7);
        auto z = sample_noise(100000, k, 0.3, rng);
        std::nth_element(z.begin(), z.begin() + std::ptrdiff_t(z.size() / 2), z.end());
        CHECK(z[z.size() / 2] == doctest::Approx(1.0).epsilon(0.01));
      }
    }
  }

  TEST_CASE("synthesize_series raw grid and neutrality") {
    HyperPrior hp;
    SeriesParams ps;
    ps.rho = 53.6;
    ps.delta_week = ps.delta_month = ps.delta_year = 1;
    ps.c_week = ps.d_week = ps.c_month = ps.d_month = ps.c_year = ps.d_year = {0.0};
    ps.m_lin = 0.02;
    ps.c_lin = 0.5;
    ps.m_exp = 1.0005;
    ps.c_exp = 1.0;
    ps.m_noise = 0.0;
    Rng rng(8);
    auto s = synthesize_series(ps, 240, hp, rng);
    REQUIRE(s.t.size() == 240);
    CHECK(s.t.front() == 0.0);
    CHECK(s.t.back() == doctest::Approx(239.0 / 53.6).epsilon(1e-12));
    // With zero seasonality and noise, values equal the trend exactly.
    for (std::size_t i = 0; i < s.t.size(); ++i)
      CHECK(s.v[i] == doctest::Approx(eval_trend(s.t[i], ps)).epsilon(1e-12));
  }

  TEST_CASE("batch shapes and determinism") {
    HyperPrior hp;
    BatchShape shape{14, 2, 240, 60};
    Rng a(9), b(9);
    std::vector<SeriesParams> params;
    auto b1 = generate_context_batch(hp, shape, a, false, &params);
    auto b2 = generate_context_batch(hp, shape, b);
    CHECK(b1.context.size() == 14 * 240 * 3);
    CHECK(b1.held_history.size() == 2 * 180 * 3);
    CHECK(b1.held_target.size() == 2 * 60);
    CHECK(b1.psi_targets.size() == 2 * 9);
    CHECK(params.size() == 16);
    CHECK(b1.context == b2.context);
    CHECK(b1.held_target == b2.held_target);
    CHECK(b1.psi_targets == b2.psi_targets);

    BatchShape minimal{1, 1, 8, 2};
    Rng c(10);
    auto b3 = generate_context_batch(hp, minimal, c);
    CHECK(b3.n_ctx == 1);
    CHECK(b3.held_target.size() == 2);
  }

  TEST_CASE("psi normalization endpoints") {
    HyperPrior hp;
    SeriesParams ps;
    // Midpoint of the annual range maps to 0.5.
    ps.m_annual = 0.5 * (hp.annual_scale.lo + hp.annual_scale.hi);
    // Resolution at the hyperprior minimum maps to 0 in log-unit space.
    ps.rho = hp.resolution.lo;
    ps.m_exp = hp.exp_trend.hi;
    ps.delta_week = ps.delta_month = ps.delta_year = 1;
    ps.c_week = ps.d_week = ps.c_month = ps.d_month = ps.c_year = ps.d_year = {0.0};
    auto psi = normalize_psi(ps, hp);
    REQUIRE(psi.size() == 9);
    CHECK(psi[0] == doctest::Approx(0.5).epsilon(1e-12));
    // rho slot is last; m_exp log-unit maps its maximum to 1.
    CHECK(psi.back() == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
    CHECK(si_target_count(false) == 9);
    CHECK(si_target_count(true) == 10);
    CHECK(normalize_psi(ps, hp, true).size() == 10);
  }

  TEST_CASE("hyperprior validation") {
    HyperPrior hp;
    CHECK_NOTHROW(hp.validate());
    hp.kappa_rho = -1.0;
    CHECK_THROWS_AS(hp.validate(), std::invalid_argument);
  }
}
