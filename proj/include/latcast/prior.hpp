#pragma once

// Context-aware synthetic series prior: hyperprior -> context ranges ->
// cluster centers -> per-series parameters, then trend * seasonality * noise
// synthesis on a raw time grid.

#include <array>
#include <cstddef>
#include <vector>

#include "latcast/batch.hpp"
#include "latcast/rng.hpp"

namespace latcast::prior {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  double width() const { return hi - lo; }
  bool contains(double x) const { return x >= lo && x <= hi; }
  bool within(const Range& outer) const { return lo >= outer.lo && hi <= outer.hi; }
};

// Global sampling limits for the simulation engine. Defaults are the
// published hyperprior table; every range is overridable through config.
struct HyperPrior {
  Range annual_scale{-8.0, 8.0};
  Range monthly_scale{-4.0, 4.0};
  Range weekly_scale{-2.0, 2.0};
  double seasonality_sigma = 0.15;

  Range linear_trend{-0.015, 0.015};
  double linear_trend_sigma = 0.005;
  Range exp_trend{0.996, 1.0016};
  double exp_trend_sigma = 0.001;
  double kappa_exp = 507.0;

  Range noise_shape{0.8, 5.0};  // Weibull k, one draw per context
  std::array<Range, 3> noise_scale_ranges{{{0.0, 0.1}, {0.2, 0.4}, {0.6, 0.8}}};
  double kappa_noise = 1.0;  // used only for SI log-unit-normalization

  Range resolution{0.1, 1.0};
  double kappa_rho = 53.6;

  Range linear_offset{-1.0, 2.0};
  Range exp_offset{-1.0, 2.0};

  int harmonics_min = 4;
  int harmonics_max = 12;

  double p_week = 7.0;
  double p_month = 30.417;
  // The published table repeats the monthly period for the annual component;
  // keep that value as the default and leave 365.25 selectable via config.
  double p_year = 30.417;

  double trend_cap = 1e6;

  void validate() const;  // throws std::invalid_argument on a bad field
};

// One context's sub-ranges drawn from the hyperprior.
struct ContextParams {
  Range annual, monthly, weekly;
  Range linear;
  Range exp_trend;   // raw (unmapped) space
  Range resolution;  // raw (unmapped) space
  double noise_shape_k = 1.0;
  Range noise_scale;
  int harmonics_week = 1, harmonics_month = 1, harmonics_year = 1;
};

struct CenterPair {
  double mu1 = 0.0, mu2 = 0.0;
  double pick(int cluster) const { return cluster == 1 ? mu1 : mu2; }
};

struct ClusterCenters {
  CenterPair annual, monthly, weekly, linear, exp_trend, resolution;
};

// All per-series simulation parameters; also the SI regression target.
struct SeriesParams {
  double m_annual = 0.0, m_monthly = 0.0, m_weekly = 0.0;
  double m_lin = 0.0, c_lin = 0.0;
  double m_exp = 1.0, c_exp = 0.0;
  double k = 1.0;        // Weibull shape, context-shared
  double m_noise = 0.0;  // noise amplitude
  double rho = 1.0;      // resolution: points per unit of raw time
  int delta_week = 1, delta_month = 1, delta_year = 1;
  std::vector<double> c_week, d_week;    // length delta_week
  std::vector<double> c_month, d_month;  // length delta_month
  std::vector<double> c_year, d_year;    // length delta_year
  int cluster = 1;
};

struct SyntheticSeries {
  std::vector<double> t;  // raw grid, t_i = i / rho
  std::vector<double> v;
  SeriesParams params;
  bool overflow_flagged = false;
};

// log2(x * kappa + 1); throws std::domain_error when x*kappa + 1 <= 0.
double map_log_uniform(double x, double kappa);
double unmap_log_uniform(double y, double kappa);

ContextParams sample_context_params(const HyperPrior& hp, Rng& rng);
ClusterCenters sample_cluster_centers(const ContextParams& cp, const HyperPrior& hp, Rng& rng);
SeriesParams sample_series_params(const ClusterCenters& centers, int cluster,
                                  const ContextParams& cp, const HyperPrior& hp, Rng& rng);

double eval_trend(double t, const SeriesParams& psi, double cap = 1e6,
                  bool* flagged = nullptr);
double eval_seasonality(double t, const SeriesParams& psi, const HyperPrior& hp);

// Multiplicative Weibull noise centered so that median(z') = 1.
std::vector<double> sample_noise(std::size_t len, double k, double m_noise, Rng& rng);

SyntheticSeries synthesize_series(const SeriesParams& psi, std::size_t seq_len,
                                  const HyperPrior& hp, Rng& rng);

// Unit-normalized SI regression targets (9 values; optionally the noise
// shape k as a configurable 10th slot).
std::vector<double> normalize_psi(const SeriesParams& psi, const HyperPrior& hp,
                                  bool include_noise_shape = false);
std::size_t si_target_count(bool include_noise_shape = false);

struct BatchShape {
  std::size_t n_ctx = 14;
  std::size_t n_held = 2;
  std::size_t seq_len = 240;
  std::size_t horizon = 60;
};

// `out_params`, when given, receives one SeriesParams per series (context
// series first, then held-out).
ContextBatch generate_context_batch(const HyperPrior& hp, const BatchShape& shape, Rng& rng,
                                    bool include_noise_shape_target = false,
                                    std::vector<SeriesParams>* out_params = nullptr);

}  // namespace latcast::prior
