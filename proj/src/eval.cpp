#include "latcast/eval.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

namespace latcast::eval {

ForecastResult forecast(const model::ModelConfig& cfg, const model::ModelParamsT<float>& params,
                        const ContextBatch& batch) {
  auto out = model::forward(cfg, params, batch, /*with_target=*/false);
  const std::size_t Nh = batch.n_held, H = batch.horizon, B = cfg.bins.count;
  ForecastResult r;
  r.n_held = Nh;
  r.horizon = H;
  r.bins = B;
  auto probs = ag::softmax(ag::reshape(out.logits, {Nh * H, B}));
  r.probs.assign(probs.data().begin(), probs.data().end());
  r.point.resize(Nh * H);
  r.variance.resize(Nh * H);
  r.denorm.resize(Nh * H);
  r.target = batch.held_target;
  for (std::size_t i = 0; i < Nh; ++i) {
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t row = i * H + h;
      double mean = 0.0, second = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const double p = r.probs[row * B + b];
        const double cb = cfg.bins.center(b);
        mean += p * cb;
        second += p * cb * cb;
      }
      r.point[row] = mean;
      r.variance[row] = std::max(0.0, second - mean * mean);
      r.denorm[row] = pipeline::denorm({mean}, batch.held_stats[i])[0];
    }
  }
  return r;
}

double mse(const std::vector<double>& forecast, const std::vector<double>& target) {
  if (forecast.size() != target.size() || forecast.empty())
    throw std::invalid_argument("mse needs equal-length non-empty sequences");
  double s = 0.0;
  for (std::size_t i = 0; i < forecast.size(); ++i) {
    const double d = forecast[i] - target[i];
    s += d * d;
  }
  return s / double(forecast.size());
}

double crrmse(const std::vector<double>& forecast, const std::vector<double>& target) {
  if (forecast.size() != target.size() || forecast.empty())
    throw std::invalid_argument("crrmse needs equal-length non-empty sequences");
  const std::size_t H = forecast.size();
  double cf = 0.0, cy = 0.0, s = 0.0;
  for (std::size_t i = 0; i < H; ++i) {
    cf += forecast[i];
    cy += target[i];
    const double d = cf - cy;
    s += d * d;
  }
  return std::sqrt(s / double(H)) / (std::abs(cy) / double(H) + 1e-8);
}

double bin_accuracy(const std::vector<double>& probs, std::size_t bins,
                    const std::vector<double>& targets, const pipeline::BinSpec& spec) {
  if (bins == 0 || targets.empty() || probs.size() != targets.size() * bins)
    throw std::invalid_argument("bin_accuracy shape mismatch");
  std::size_t hits = 0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    std::size_t best = 0;
    for (std::size_t b = 1; b < bins; ++b)
      if (probs[r * bins + b] > probs[r * bins + best]) best = b;
    if (best == spec.index(targets[r])) ++hits;
  }
  return double(hits) / double(targets.size());
}

ContextBatch subsample_context(const ContextBatch& batch, const std::vector<std::size_t>& keep) {
  ContextBatch out = batch;
  out.n_ctx = keep.size();
  out.context.clear();
  const std::size_t row = batch.seq_len * ContextBatch::kFeatures;
  for (std::size_t idx : keep) {
    if (idx >= batch.n_ctx) throw std::out_of_range("context subsample index out of range");
    out.context.insert(out.context.end(), batch.context.begin() + idx * row,
                       batch.context.begin() + (idx + 1) * row);
  }
  return out;
}

std::vector<AblationPoint> ablate_context_size(const model::ModelConfig& cfg,
                                               const model::ModelParamsT<float>& params,
                                               const std::vector<ContextBatch>& pool,
                                               const std::vector<std::size_t>& sizes,
                                               std::size_t trials, Rng& rng) {
  if (pool.empty() || sizes.empty() || trials == 0)
    throw std::invalid_argument("ablation needs batches, sizes and trials");
  std::vector<AblationPoint> curve;
  for (std::size_t n : sizes) {
    if (n < 1) throw std::invalid_argument("context size must be >= 1");
    std::vector<double> values;
    for (const auto& batch : pool) {
      if (n > batch.n_ctx)
        throw std::invalid_argument("context size exceeds the example pool");
      for (std::size_t t = 0; t < trials; ++t) {
        // Sample n distinct example indices.
        std::vector<std::size_t> all(batch.n_ctx);
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t j = i + std::size_t(rng.uniform_int(0, int(all.size() - i - 1)));
          std::swap(all[i], all[j]);
        }
        all.resize(n);
        auto sub = subsample_context(batch, all);
        auto fr = forecast(cfg, params, sub);
        values.push_back(mse(fr.point, fr.target));
      }
    }
    AblationPoint pt;
    pt.size = n;
    for (double v : values) pt.mean += v;
    pt.mean /= double(values.size());
    double var = 0.0;
    for (double v : values) var += (v - pt.mean) * (v - pt.mean);
    pt.stddev = std::sqrt(var / double(values.size()));
    curve.push_back(pt);
  }
  return curve;
}

std::string ablation_csv(const std::vector<AblationPoint>& curve) {
  std::ostringstream os;
  os << "size,mean,std\n";
  os.precision(12);
  for (const auto& p : curve) os << p.size << "," << p.mean << "," << p.stddev << "\n";
  return os.str();
}

std::vector<double> step_embed(const model::ModelConfig& cfg,
                               const model::ModelParamsT<float>& params,
                               const std::vector<double>& features) {
  const std::size_t F = ContextBatch::kFeatures;
  if (features.size() % F != 0 || features.empty())
    throw std::invalid_argument("window features must be (S, 3) row-major");
  const std::size_t S = features.size() / F;
  std::vector<float> data(features.begin(), features.end());
  auto x = ag::Tensor<float>::from({std::size_t(1), S, F}, std::move(data));
  auto emb = model::embed(cfg, params.embedder, x);
  return std::vector<double>(emb.data().begin(), emb.data().end());
}

std::vector<double> summary_embed(const model::ModelConfig& cfg,
                                  const model::ModelParamsT<float>& params,
                                  const std::vector<double>& features) {
  const std::size_t F = ContextBatch::kFeatures;
  const std::size_t S = features.size() / F;
  std::vector<float> data(features.begin(), features.end());
  auto x = ag::Tensor<float>::from({std::size_t(1), S, F}, std::move(data));
  auto emb = model::embed(cfg, params.embedder, x);
  auto pooled = model::pool_context(cfg, emb, params.query);
  return std::vector<double>(pooled.data().begin(), pooled.data().end());
}

double knn_probe(const std::vector<std::vector<double>>& train_x, const std::vector<int>& train_y,
                 const std::vector<std::vector<double>>& test_x, const std::vector<int>& test_y,
                 std::size_t k) {
  if (train_x.empty()) throw std::invalid_argument("knn_probe: empty training set");
  if (k < 1 || k > train_x.size())
    throw std::invalid_argument("knn_probe: k must lie in [1, train size]");
  if (train_x.size() != train_y.size() || test_x.size() != test_y.size())
    throw std::invalid_argument("knn_probe: label count mismatch");
  std::size_t hits = 0;
  for (std::size_t t = 0; t < test_x.size(); ++t) {
    // (distance, index) pairs; index order is the deterministic tie-break.
    std::vector<std::pair<double, std::size_t>> d(train_x.size());
    for (std::size_t i = 0; i < train_x.size(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < train_x[i].size(); ++j) {
        const double diff = train_x[i][j] - test_x[t][j];
        s += diff * diff;
      }
      d[i] = {s, i};
    }
    std::partial_sort(d.begin(), d.begin() + std::ptrdiff_t(k), d.end());
    std::map<int, std::pair<std::size_t, std::size_t>> votes;  // label -> (count, best index)
    for (std::size_t i = 0; i < k; ++i) {
      auto& v = votes.emplace(train_y[d[i].second], std::make_pair(0u, d[i].second)).first->second;
      ++v.first;
      v.second = std::min(v.second, d[i].second);
    }
    int best_label = votes.begin()->first;
    std::pair<std::size_t, std::size_t> best{0, 0};
    bool first = true;
    for (const auto& [label, cnt] : votes) {
      if (first || cnt.first > best.first ||
          (cnt.first == best.first && cnt.second < best.second)) {
        best_label = label;
        best = cnt;
        first = false;
      }
    }
    if (best_label == test_y[t]) ++hits;
  }
  return test_x.empty() ? 0.0 : double(hits) / double(test_x.size());
}

PatchIndex patch_segment(const std::vector<double>& embeddings, std::size_t d, double c,
                         std::size_t window) {
  if (d == 0 || embeddings.size() % d != 0)
    throw std::invalid_argument("patch_segment: embeddings must be (S, d) row-major");
  const std::size_t S = embeddings.size() / d;
  if (S < 2) throw std::invalid_argument("patch_segment: window must have at least 2 steps");

  std::vector<double> dist(S - 1);
  for (std::size_t i = 0; i + 1 < S; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = embeddings[(i + 1) * d + j] - embeddings[i * d + j];
      s += diff * diff;
    }
    dist[i] = std::sqrt(s);
  }
  std::vector<double> sorted = dist;
  std::sort(sorted.begin(), sorted.end());
  const double median = (S - 1) % 2 == 1 ? sorted[(S - 1) / 2]
                                         : 0.5 * (sorted[(S - 1) / 2 - 1] + sorted[(S - 1) / 2]);
  const double threshold = c * median;

  PatchIndex idx;
  idx.dim = d;
  idx.window = window;
  idx.boundaries.push_back(0);
  for (std::size_t i = 0; i + 1 < S; ++i)
    if (dist[i] > threshold) idx.boundaries.push_back(i + 1);
  for (std::size_t p = 0; p < idx.boundaries.size(); ++p) {
    const std::size_t start = idx.boundaries[p];
    const std::size_t end = (p + 1 < idx.boundaries.size()) ? idx.boundaries[p + 1] : S;
    std::vector<double> mean(d, 0.0);
    for (std::size_t i = start; i < end; ++i)
      for (std::size_t j = 0; j < d; ++j) mean[j] += embeddings[i * d + j];
    for (auto& v : mean) v /= double(end - start);
    idx.means.push_back(std::move(mean));
  }
  return idx;
}

std::vector<PatchMatch> nearest_patches(const std::vector<PatchIndex>& index,
                                        const std::vector<double>& query, std::size_t top_k,
                                        std::size_t exclude_window) {
  std::vector<PatchMatch> all;
  for (const auto& w : index) {
    if (w.window == exclude_window) continue;
    for (std::size_t p = 0; p < w.means.size(); ++p) {
      if (w.means[p].size() != query.size())
        throw std::invalid_argument("nearest_patches: dimension mismatch");
      double s = 0.0;
      for (std::size_t j = 0; j < query.size(); ++j) {
        const double diff = w.means[p][j] - query[j];
        s += diff * diff;
      }
      all.push_back({w.window, p, std::sqrt(s)});
    }
  }
  std::stable_sort(all.begin(), all.end(),
                   [](const PatchMatch& a, const PatchMatch& b) { return a.distance < b.distance; });
  if (all.size() > top_k) all.resize(top_k);
  return all;
}

Baselines naive_baselines(const std::vector<double>& history, std::size_t horizon,
                          std::size_t period) {
  if (history.empty()) throw std::invalid_argument("naive baselines need history");
  if (period < 1 || period > history.size())
    throw std::invalid_argument("seasonal-naive period exceeds history length");
  Baselines b;
  b.last_value.assign(horizon, history.back());
  double mean = 0.0;
  for (double v : history) mean += v;
  mean /= double(history.size());
  b.climatology.assign(horizon, mean);
  b.seasonal_naive.resize(horizon);
  const std::size_t start = history.size() - period;
  for (std::size_t h = 0; h < horizon; ++h)
    b.seasonal_naive[h] = history[start + (h % period)];
  return b;
}

std::vector<double> pca_project(const std::vector<std::vector<double>>& vectors, std::size_t dims,
                                bool* degenerate) {
  if (vectors.size() < dims || vectors.empty())
    throw std::invalid_argument("pca_project needs at least `dims` vectors");
  const std::size_t n = vectors.size(), d = vectors[0].size();
  Eigen::MatrixXd X(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) X(Eigen::Index(i), Eigen::Index(j)) = vectors[i][j];
  const Eigen::RowVectorXd mu = X.colwise().mean();
  X.rowwise() -= mu;

  if (degenerate) *degenerate = false;
  if (X.cwiseAbs().maxCoeff() == 0.0) {
    if (degenerate) *degenerate = true;
    return std::vector<double>(n * dims, 0.0);
  }

  const Eigen::MatrixXd cov = (X.transpose() * X) / double(n > 1 ? n - 1 : 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  std::vector<double> out(n * dims, 0.0);
  for (std::size_t kcomp = 0; kcomp < dims; ++kcomp) {
    // Eigenvalues come in ascending order; take from the top.
    Eigen::VectorXd v = solver.eigenvectors().col(Eigen::Index(d - 1 - kcomp));
    // Deterministic sign: make the largest-magnitude coordinate positive.
    Eigen::Index imax;
    v.cwiseAbs().maxCoeff(&imax);
    if (v(imax) < 0.0) v = -v;
    const Eigen::VectorXd proj = X * v;
    for (std::size_t i = 0; i < n; ++i) out[i * dims + kcomp] = proj(Eigen::Index(i));
  }
  return out;
}

}  // namespace latcast::eval
