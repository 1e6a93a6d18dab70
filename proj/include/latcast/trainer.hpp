#pragma once

// Training loop: cosine-annealing schedule with warm restarts, linear EMA /
// weight-decay warmup, two independent AdamW streams separated by the
// decoder's stop-gradient, deterministic per-(epoch, step) batch seeding,
// and checkpointing with bit-identical resume.

#include <cstdint>
#include <string>
#include <vector>

#include "latcast/model.hpp"
#include "latcast/prior.hpp"

namespace latcast::train {

struct TrainConfig {
  model::ModelConfig model;
  prior::HyperPrior prior;
  prior::BatchShape shape{14, 2, 240, 60};

  double base_lr = 9e-4;
  std::size_t cycle_epochs = 9;  // warm-restart period T0
  double restart_decay = 0.96;   // per-cycle peak decay

  std::size_t warmup_epochs = 95;
  double ema_start = 0.9952, ema_end = 1.0;
  double wd_start = 1.77e-4, wd_end = 4.9e-2;

  std::size_t batch_size = 32;        // context batches per optimizer step
  std::size_t batches_per_epoch = 250;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;

  std::size_t val_batches = 4;  // fixed-seed validation set size

  void validate() const;
};

// Learning rate at a fractional position inside the warm-restart schedule.
double lr_at(const TrainConfig& cfg, std::size_t epoch, std::size_t step_in_epoch);

// (EMA decay, weight decay) from the linear warmup, clamped past the end.
// Accepts fractional epochs; integer epochs evaluate at their start.
std::pair<double, double> warmup_at(const TrainConfig& cfg, double epoch);

// Decoupled-weight-decay adaptive-moment optimizer (beta1 0.9, beta2 0.999,
// eps 1e-8), one instance per parameter stream.
struct AdamW {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::uint64_t steps = 0;
  std::vector<std::vector<float>> m, v;

  void init(const std::vector<ag::Tensor<float>>& params);
  // Applies decay directly to weights, then the moment update.
  void step(std::vector<ag::Tensor<float>>& params, double lr, double weight_decay);
};

struct StepReport {
  double main_loss = 0.0;
  double decoder_loss = 0.0;
  double latent_loss = 0.0;  // unweighted mean squared latent error
  double grad_norm_main = 0.0;
  double grad_norm_decoder = 0.0;
  double lr = 0.0;
  bool skipped = false;  // non-finite loss guard fired
};

struct EpochReport {
  std::size_t epoch = 0;
  double mean_main_loss = 0.0;
  double mean_decoder_loss = 0.0;
  double mean_latent_loss = 0.0;
  double val_mse = 0.0;  // decoder point-forecast MSE on the fixed validation set
  std::size_t skipped_steps = 0;
};

class Trainer {
 public:
  explicit Trainer(TrainConfig cfg);

  // One optimizer step over `batches`: forward + both backwards, then main
  // step, decoder step, EMA update. Order matches the documented contract;
  // the two streams touch disjoint parameters, so computing both gradients
  // before the first update changes no value.
  StepReport train_step(const std::vector<ContextBatch>& batches);

  // Runs batches_per_epoch steps with freshly generated synthetic batches,
  // then evaluates the fixed-seed validation set.
  EpochReport train_epoch();

  // Deterministic batch for (epoch, step, slot); stateless given the seed.
  ContextBatch make_batch(std::size_t epoch, std::size_t step, std::size_t slot) const;
  std::vector<ContextBatch> validation_set() const;

  // Decoder point-forecast MSE (normalized space) averaged over batches.
  double eval_mse(const std::vector<ContextBatch>& batches);

  void save_checkpoint(const std::string& path) const;
  static Trainer load_checkpoint(const std::string& path);

  const TrainConfig& config() const { return cfg_; }
  model::ModelParamsT<float>& params() { return params_; }
  std::size_t epoch() const { return epoch_; }
  std::size_t step_in_epoch() const { return step_in_epoch_; }

 private:
  Trainer() = default;

  TrainConfig cfg_;
  model::ModelParamsT<float> params_;
  AdamW opt_main_, opt_decoder_;
  std::size_t epoch_ = 0;
  std::size_t step_in_epoch_ = 0;
};

// JSON round-trip for configs (missing keys keep defaults; unknown keys throw).
std::string config_to_json(const TrainConfig& cfg);
TrainConfig config_from_json(const std::string& text);

// Applies one dotted-key override, e.g. ("prior.kappa_rho", "53.6") or
// ("model.dilations", "[1,2,4]"). Unknown keys throw std::invalid_argument.
void apply_config_override(TrainConfig& cfg, const std::string& key, const std::string& value);

}  // namespace latcast::train
