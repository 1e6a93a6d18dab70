#include "latcast/prior.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "latcast/pipeline.hpp"

namespace latcast::prior {

namespace {

void check_range(const Range& r, const char* name) {
  if (!(r.lo <= r.hi))
    throw std::invalid_argument(std::string("hyperprior range ") + name + " has min > max");
}

}  // namespace

void HyperPrior::validate() const {
  check_range(annual_scale, "annual_scale");
  check_range(monthly_scale, "monthly_scale");
  check_range(weekly_scale, "weekly_scale");
  check_range(linear_trend, "linear_trend");
  check_range(exp_trend, "exp_trend");
  check_range(noise_shape, "noise_shape");
  check_range(resolution, "resolution");
  check_range(linear_offset, "linear_offset");
  check_range(exp_offset, "exp_offset");
  for (const auto& r : noise_scale_ranges) check_range(r, "noise_scale");
  if (seasonality_sigma < 0 || linear_trend_sigma < 0 || exp_trend_sigma < 0)
    throw std::invalid_argument("hyperprior variances must be >= 0");
  if (kappa_exp <= 0 || kappa_rho <= 0 || kappa_noise <= 0)
    throw std::invalid_argument("hyperprior multipliers must be > 0");
  if (harmonics_min < 1 || harmonics_max < harmonics_min)
    throw std::invalid_argument("harmonics range must be positive integers with min <= max");
  if (noise_shape.lo <= 0) throw std::invalid_argument("noise shape k must be > 0");
  if (p_week <= 0 || p_month <= 0 || p_year <= 0)
    throw std::invalid_argument("seasonality periods must be > 0");
}

double map_log_uniform(double x, double kappa) {
  if (kappa <= 0) throw std::domain_error("map_log_uniform: kappa must be > 0");
  const double arg = x * kappa + 1.0;
  if (arg <= 0) throw std::domain_error("map_log_uniform: x*kappa + 1 must be > 0");
  return std::log2(arg);
}

double unmap_log_uniform(double y, double kappa) {
  if (kappa <= 0) throw std::domain_error("unmap_log_uniform: kappa must be > 0");
  return (std::exp2(y) - 1.0) / kappa;
}

namespace {

Range sample_sub_range(const Range& outer, Rng& rng) {
  const double a = rng.uniform(outer.lo, outer.hi);
  const double b = rng.uniform(outer.lo, outer.hi);
  return {std::min(a, b), std::max(a, b)};
}

// Sub-range drawn uniformly in log-mapped space, reported in raw space.
Range sample_sub_range_log(const Range& outer, double kappa, Rng& rng) {
  const double lo_m = map_log_uniform(outer.lo, kappa);
  const double hi_m = map_log_uniform(outer.hi, kappa);
  const double a = unmap_log_uniform(rng.uniform(lo_m, hi_m), kappa);
  const double b = unmap_log_uniform(rng.uniform(lo_m, hi_m), kappa);
  return {std::min(a, b), std::max(a, b)};
}

}  // namespace

ContextParams sample_context_params(const HyperPrior& hp, Rng& rng) {
  hp.validate();
  ContextParams cp;
  cp.annual = sample_sub_range(hp.annual_scale, rng);
  cp.monthly = sample_sub_range(hp.monthly_scale, rng);
  cp.weekly = sample_sub_range(hp.weekly_scale, rng);
  cp.linear = sample_sub_range(hp.linear_trend, rng);
  cp.exp_trend = sample_sub_range_log(hp.exp_trend, hp.kappa_exp, rng);
  cp.resolution = sample_sub_range_log(hp.resolution, hp.kappa_rho, rng);
  cp.noise_shape_k = rng.uniform(hp.noise_shape.lo, hp.noise_shape.hi);
  cp.noise_scale = hp.noise_scale_ranges[static_cast<std::size_t>(
      rng.uniform_int(0, static_cast<int>(hp.noise_scale_ranges.size()) - 1))];
  cp.harmonics_week = rng.uniform_int(hp.harmonics_min, hp.harmonics_max);
  cp.harmonics_month = rng.uniform_int(hp.harmonics_min, hp.harmonics_max);
  cp.harmonics_year = rng.uniform_int(hp.harmonics_min, hp.harmonics_max);
  return cp;
}

namespace {

CenterPair sample_pair(const Range& sub, Rng& rng) {
  return {rng.uniform(sub.lo, sub.hi), rng.uniform(sub.lo, sub.hi)};
}

CenterPair sample_pair_log(const Range& sub, double kappa, Rng& rng) {
  const double lo_m = map_log_uniform(sub.lo, kappa);
  const double hi_m = map_log_uniform(sub.hi, kappa);
  return {unmap_log_uniform(rng.uniform(lo_m, hi_m), kappa),
          unmap_log_uniform(rng.uniform(lo_m, hi_m), kappa)};
}

}  // namespace

ClusterCenters sample_cluster_centers(const ContextParams& cp, const HyperPrior& hp, Rng& rng) {
  ClusterCenters cc;
  cc.annual = sample_pair(cp.annual, rng);
  cc.monthly = sample_pair(cp.monthly, rng);
  cc.weekly = sample_pair(cp.weekly, rng);
  cc.linear = sample_pair(cp.linear, rng);
  cc.exp_trend = sample_pair_log(cp.exp_trend, hp.kappa_exp, rng);
  cc.resolution = sample_pair_log(cp.resolution, hp.kappa_rho, rng);
  return cc;
}

SeriesParams sample_series_params(const ClusterCenters& centers, int cluster,
                                  const ContextParams& cp, const HyperPrior& hp, Rng& rng) {
  if (cluster != 1 && cluster != 2)
    throw std::invalid_argument("cluster must be 1 or 2");
  SeriesParams psi;
  psi.cluster = cluster;
  psi.m_annual = rng.normal(centers.annual.pick(cluster), hp.seasonality_sigma);
  psi.m_monthly = rng.normal(centers.monthly.pick(cluster), hp.seasonality_sigma);
  psi.m_weekly = rng.normal(centers.weekly.pick(cluster), hp.seasonality_sigma);
  psi.m_lin = rng.normal(centers.linear.pick(cluster), hp.linear_trend_sigma);
  psi.m_exp = rng.normal(centers.exp_trend.pick(cluster), hp.exp_trend_sigma);
  // Resolution has no published variance; the cluster center is used as-is.
  psi.rho = centers.resolution.pick(cluster);
  psi.c_lin = rng.uniform(hp.linear_offset.lo, hp.linear_offset.hi);
  psi.c_exp = rng.uniform(hp.exp_offset.lo, hp.exp_offset.hi);
  psi.k = cp.noise_shape_k;
  psi.m_noise = rng.uniform(cp.noise_scale.lo, cp.noise_scale.hi);
  psi.delta_week = cp.harmonics_week;
  psi.delta_month = cp.harmonics_month;
  psi.delta_year = cp.harmonics_year;

  auto draw_coeffs = [&rng](int delta, std::vector<double>& c, std::vector<double>& d) {
    const double stddev = std::sqrt(1.0 / delta);
    c.resize(delta);
    d.resize(delta);
    for (int f = 0; f < delta; ++f) {
      c[f] = rng.normal(0.0, stddev);
      d[f] = rng.normal(0.0, stddev);
    }
  };
  draw_coeffs(psi.delta_week, psi.c_week, psi.d_week);
  draw_coeffs(psi.delta_month, psi.c_month, psi.d_month);
  draw_coeffs(psi.delta_year, psi.c_year, psi.d_year);
  return psi;
}

double eval_trend(double t, const SeriesParams& psi, double cap, bool* flagged) {
  // m_exp (~1) is the exponential base; c_exp scales the exponential factor.
  double v = 1.0 + (psi.m_lin * t + psi.c_lin) * (psi.c_exp * std::pow(psi.m_exp, t));
  if (!std::isfinite(v)) {
    if (flagged) *flagged = true;
    return cap;
  }
  if (std::abs(v) > cap) {
    if (flagged) *flagged = true;
    v = std::clamp(v, -cap, cap);
  }
  return v;
}

namespace {

double seasonal_component(double t, double scale, double period, const std::vector<double>& c,
                          const std::vector<double>& d) {
  double acc = 0.0;
  for (std::size_t f = 0; f < c.size(); ++f) {
    const double w = 2.0 * std::numbers::pi * static_cast<double>(f + 1) * t / period;
    acc += c[f] * std::sin(w) + d[f] * std::cos(w);
  }
  return 1.0 + scale * acc;
}

}  // namespace

double eval_seasonality(double t, const SeriesParams& psi, const HyperPrior& hp) {
  return seasonal_component(t, psi.m_weekly, hp.p_week, psi.c_week, psi.d_week) *
         seasonal_component(t, psi.m_monthly, hp.p_month, psi.c_month, psi.d_month) *
         seasonal_component(t, psi.m_annual, hp.p_year, psi.c_year, psi.d_year);
}

std::vector<double> sample_noise(std::size_t len, double k, double m_noise, Rng& rng) {
  if (k <= 0) throw std::invalid_argument("noise shape k must be > 0");
  if (m_noise < 0) throw std::invalid_argument("noise amplitude must be >= 0");
  const double z_median = std::pow(std::numbers::ln2, 1.0 / k);
  std::vector<double> out(len);
  for (auto& v : out) v = 1.0 + m_noise * (rng.weibull(k) - z_median);
  return out;
}

SyntheticSeries synthesize_series(const SeriesParams& psi, std::size_t seq_len,
                                  const HyperPrior& hp, Rng& rng) {
  if (seq_len < 2) throw std::invalid_argument("synthesize_series needs seq_len >= 2");
  if (psi.rho <= 0) throw std::invalid_argument("resolution rho must be > 0");
  SyntheticSeries out;
  out.params = psi;
  out.t.resize(seq_len);
  out.v.resize(seq_len);
  const auto noise = sample_noise(seq_len, psi.k, psi.m_noise, rng);
  for (std::size_t i = 0; i < seq_len; ++i) {
    const double t = static_cast<double>(i) / psi.rho;
    out.t[i] = t;
    out.v[i] = eval_trend(t, psi, hp.trend_cap, &out.overflow_flagged) *
               eval_seasonality(t, psi, hp) * noise[i];
  }
  return out;
}

namespace {

double unit_norm(double x, const Range& r) {
  const double w = r.width();
  return w > 0 ? (x - r.lo) / w : 0.5;
}

double log_unit_norm(double x, const Range& r, double kappa) {
  const double lo = map_log_uniform(r.lo, kappa);
  const double hi = map_log_uniform(r.hi, kappa);
  return hi > lo ? (map_log_uniform(x, kappa) - lo) / (hi - lo) : 0.5;
}

}  // namespace

std::size_t si_target_count(bool include_noise_shape) { return include_noise_shape ? 10 : 9; }

std::vector<double> normalize_psi(const SeriesParams& psi, const HyperPrior& hp,
                                  bool include_noise_shape) {
  const Range noise_overall{hp.noise_scale_ranges.front().lo, hp.noise_scale_ranges.back().hi};
  std::vector<double> out = {
      unit_norm(psi.m_annual, hp.annual_scale),
      unit_norm(psi.m_monthly, hp.monthly_scale),
      unit_norm(psi.m_weekly, hp.weekly_scale),
      unit_norm(psi.m_lin, hp.linear_trend),
      log_unit_norm(psi.m_exp, hp.exp_trend, hp.kappa_exp),
      unit_norm(psi.c_lin, hp.linear_offset),
      unit_norm(psi.c_exp, hp.exp_offset),
      log_unit_norm(psi.m_noise, noise_overall, hp.kappa_noise),
      log_unit_norm(psi.rho, hp.resolution, hp.kappa_rho),
  };
  if (include_noise_shape) out.push_back(unit_norm(psi.k, hp.noise_shape));
  return out;
}

ContextBatch generate_context_batch(const HyperPrior& hp, const BatchShape& shape, Rng& rng,
                                    bool include_noise_shape_target,
                                    std::vector<SeriesParams>* out_params) {
  if (shape.n_ctx < 1 || shape.n_held < 1)
    throw std::invalid_argument("context batch needs n_ctx >= 1 and n_held >= 1");
  if (shape.horizon < 1 || shape.horizon >= shape.seq_len)
    throw std::invalid_argument("context batch needs 1 <= horizon < seq_len");

  const std::size_t S = shape.seq_len, H = shape.horizon;
  const std::size_t hist = S - H;
  const auto axis = pipeline::normalize_time_axis(S, H);

  const ContextParams cp = sample_context_params(hp, rng);
  const ClusterCenters centers = sample_cluster_centers(cp, hp, rng);

  ContextBatch batch;
  batch.n_ctx = shape.n_ctx;
  batch.n_held = shape.n_held;
  batch.seq_len = S;
  batch.horizon = H;
  batch.tau = axis.tau;
  batch.context.assign(shape.n_ctx * S * ContextBatch::kFeatures, 0.0);
  batch.held_history.assign(shape.n_held * hist * ContextBatch::kFeatures, 0.0);
  batch.held_full.assign(shape.n_held * S * ContextBatch::kFeatures, 0.0);
  batch.held_target.assign(shape.n_held * H, 0.0);
  batch.held_stats.resize(shape.n_held);
  if (out_params) out_params->clear();

  const std::size_t total = shape.n_ctx + shape.n_held;
  for (std::size_t idx = 0; idx < total; ++idx) {
    const int cluster = rng.uniform() < 0.5 ? 1 : 2;
    const SeriesParams psi = sample_series_params(centers, cluster, cp, hp, rng);
    const SyntheticSeries series = synthesize_series(psi, S, hp, rng);
    batch.trend_overflow = batch.trend_overflow || series.overflow_flagged;
    auto [norm, stats] = pipeline::znorm_2std(series.v, hist);
    if (out_params) out_params->push_back(psi);

    if (idx < shape.n_ctx) {
      double* f = batch.context.data() + idx * S * ContextBatch::kFeatures;
      for (std::size_t i = 0; i < S; ++i) {
        f[i * 3 + 0] = axis.tau[i];
        f[i * 3 + 1] = norm[i];
        f[i * 3 + 2] = 1.0;
      }
    } else {
      const std::size_t h = idx - shape.n_ctx;
      double* fh = batch.held_history.data() + h * hist * ContextBatch::kFeatures;
      for (std::size_t i = 0; i < hist; ++i) {
        fh[i * 3 + 0] = axis.tau[i];
        fh[i * 3 + 1] = norm[i];
        fh[i * 3 + 2] = 1.0;
      }
      double* ff = batch.held_full.data() + h * S * ContextBatch::kFeatures;
      for (std::size_t i = 0; i < S; ++i) {
        ff[i * 3 + 0] = axis.tau[i];
        ff[i * 3 + 1] = norm[i];
        ff[i * 3 + 2] = 1.0;
      }
      for (std::size_t i = 0; i < H; ++i) batch.held_target[h * H + i] = norm[hist + i];
      batch.held_stats[h] = stats;
      const auto psi_n = normalize_psi(psi, hp, include_noise_shape_target);
      batch.psi_targets.insert(batch.psi_targets.end(), psi_n.begin(), psi_n.end());
    }
  }
  return batch;
}

}  // namespace latcast::prior
