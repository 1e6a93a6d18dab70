#pragma once

// Forecasting metrics, context-size ablation, embedding extraction and
// probes, patch segmentation, naive baselines, and PCA projection.

#include <cstddef>
#include <string>
#include <vector>

#include "latcast/model.hpp"

namespace latcast::eval {

struct ForecastResult {
  std::size_t n_held = 0, horizon = 0, bins = 0;
  std::vector<double> probs;     // (n_held, H, bins), rows sum to 1
  std::vector<double> point;     // (n_held, H), distribution mean, normalized
  std::vector<double> variance;  // (n_held, H)
  std::vector<double> denorm;    // (n_held, H), via each window's NormStats
  std::vector<double> target;    // (n_held, H), normalized reference
};

ForecastResult forecast(const model::ModelConfig& cfg, const model::ModelParamsT<float>& params,
                        const ContextBatch& batch);

// Mean squared error over equal-length sequences (normalized space).
double mse(const std::vector<double>& forecast, const std::vector<double>& target);

// Cumulative relative RMSE: with C_f, C_y the cumulative sums over the
// horizon, sqrt(mean((C_f - C_y)^2)) / (|C_y(H)| / H + 1e-8).
double crrmse(const std::vector<double>& forecast, const std::vector<double>& target);

// Fraction of steps whose argmax bin matches the target's bin.
double bin_accuracy(const std::vector<double>& probs, std::size_t bins,
                    const std::vector<double>& targets, const pipeline::BinSpec& spec);

struct AblationPoint {
  std::size_t size = 0;
  double mean = 0.0;
  double stddev = 0.0;
};

// For each context size n, subsample n examples per (batch, trial), forecast
// and aggregate point MSE. Every batch must hold at least max(sizes) examples.
std::vector<AblationPoint> ablate_context_size(const model::ModelConfig& cfg,
                                               const model::ModelParamsT<float>& params,
                                               const std::vector<ContextBatch>& pool,
                                               const std::vector<std::size_t>& sizes,
                                               std::size_t trials, Rng& rng);

// CSV with header "size,mean,std".
std::string ablation_csv(const std::vector<AblationPoint>& curve);

// Context batch restricted to the given context example indices.
ContextBatch subsample_context(const ContextBatch& batch, const std::vector<std::size_t>& keep);

// Fixed-length summary of one window: embed, then learned-query pooling.
// `features` is (S, 3) row-major.
std::vector<double> summary_embed(const model::ModelConfig& cfg,
                                  const model::ModelParamsT<float>& params,
                                  const std::vector<double>& features);

// Per-timestep embeddings of one window, (S, d) row-major.
std::vector<double> step_embed(const model::ModelConfig& cfg,
                               const model::ModelParamsT<float>& params,
                               const std::vector<double>& features);

// k-nearest-neighbor majority vote, squared Euclidean distance, ties broken
// by the smallest training index.
double knn_probe(const std::vector<std::vector<double>>& train_x, const std::vector<int>& train_y,
                 const std::vector<std::vector<double>>& test_x, const std::vector<int>& test_y,
                 std::size_t k);

struct PatchIndex {
  std::size_t dim = 0;
  std::size_t window = 0;                 // source window reference
  std::vector<std::size_t> boundaries;    // strictly increasing patch starts (first is 0)
  std::vector<std::vector<double>> means; // one averaged vector per patch
};

// Boundaries where the step-to-step embedding distance exceeds
// c * median(step distances). `embeddings` is (S, d) row-major, S >= 2.
PatchIndex patch_segment(const std::vector<double>& embeddings, std::size_t d, double c = 2.0,
                         std::size_t window = 0);

struct PatchMatch {
  std::size_t window = 0;
  std::size_t patch = 0;
  double distance = 0.0;
};

// Top-k patches by L2 between mean vectors, excluding the query's own window.
std::vector<PatchMatch> nearest_patches(const std::vector<PatchIndex>& index,
                                        const std::vector<double>& query, std::size_t top_k,
                                        std::size_t exclude_window);

struct Baselines {
  std::vector<double> last_value;
  std::vector<double> climatology;
  std::vector<double> seasonal_naive;
};

Baselines naive_baselines(const std::vector<double>& history, std::size_t horizon,
                          std::size_t period);

// PCA to `dims` components: center, exact symmetric eigendecomposition,
// deterministic sign (largest-magnitude coordinate of each component made
// positive). Returns (n, dims) row-major. All-equal input projects to zero
// and sets *degenerate.
std::vector<double> pca_project(const std::vector<std::vector<double>>& vectors, std::size_t dims,
                                bool* degenerate = nullptr);

}  // namespace latcast::eval
