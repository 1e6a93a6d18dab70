#include "latcast/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "json.hpp"
#include "latcast/container.hpp"

namespace latcast::train {

using nlohmann::json;

void TrainConfig::validate() const {
  model.validate();
  prior.validate();
  if (base_lr <= 0.0) throw std::invalid_argument("base learning rate must be positive");
  if (cycle_epochs < 1) throw std::invalid_argument("warm-restart period must be >= 1 epoch");
  if (restart_decay <= 0.0 || restart_decay > 1.0)
    throw std::invalid_argument("restart decay must lie in (0, 1]");
  if (batch_size < 1 || batches_per_epoch < 1)
    throw std::invalid_argument("batch size and batches per epoch must be >= 1");
  if (shape.n_ctx < 1 || shape.n_held < 1 || shape.horizon < 1 ||
      shape.horizon >= shape.seq_len)
    throw std::invalid_argument("invalid batch shape");
}

double lr_at(const TrainConfig& cfg, std::size_t epoch, std::size_t step_in_epoch) {
  const std::size_t cycle = epoch / cfg.cycle_epochs;
  const double within = double(epoch % cfg.cycle_epochs) +
                        double(step_in_epoch) / double(cfg.batches_per_epoch);
  const double progress = within / double(cfg.cycle_epochs);
  const double peak = cfg.base_lr * std::pow(cfg.restart_decay, double(cycle));
  return 0.5 * peak * (1.0 + std::cos(M_PI * progress));
}

std::pair<double, double> warmup_at(const TrainConfig& cfg, double epoch) {
  const double t = std::clamp(epoch / double(cfg.warmup_epochs), 0.0, 1.0);
  return {cfg.ema_start + t * (cfg.ema_end - cfg.ema_start),
          cfg.wd_start + t * (cfg.wd_end - cfg.wd_start)};
}

// ---------------------------------------------------------------------------
// Optimizer.

void AdamW::init(const std::vector<ag::Tensor<float>>& params) {
  steps = 0;
  m.clear();
  v.clear();
  for (const auto& p : params) {
    m.emplace_back(p.size(), 0.0f);
    v.emplace_back(p.size(), 0.0f);
  }
}

void AdamW::step(std::vector<ag::Tensor<float>>& params, double lr, double weight_decay) {
  if (m.size() != params.size()) throw std::logic_error("optimizer not initialized for stream");
  ++steps;
  const double bc1 = 1.0 - std::pow(beta1, double(steps));
  const double bc2 = 1.0 - std::pow(beta2, double(steps));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i].data();
    const auto& g = params[i].grad();
    // Decoupled decay: applied to the weights directly, not via gradients.
    for (auto& x : w) x = static_cast<float>(double(x) * (1.0 - lr * weight_decay));
    if (g.empty()) continue;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j];
      m[i][j] = static_cast<float>(beta1 * double(m[i][j]) + (1.0 - beta1) * gj);
      v[i][j] = static_cast<float>(beta2 * double(v[i][j]) + (1.0 - beta2) * gj * gj);
      const double mhat = double(m[i][j]) / bc1;
      const double vhat = double(v[i][j]) / bc2;
      w[j] = static_cast<float>(double(w[j]) - lr * mhat / (std::sqrt(vhat) + eps));
    }
  }
}

// ---------------------------------------------------------------------------
// Trainer.

namespace {

double grad_norm(std::vector<ag::Tensor<float>>& params) {
  double s = 0.0;
  for (auto& p : params)
    for (auto g : p.grad()) s += double(g) * double(g);
  return std::sqrt(s);
}

constexpr std::uint64_t kValStream = 0x56414c0000000000ULL;  // validation streams

}  // namespace

Trainer::Trainer(TrainConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  params_ = model::init_params<float>(cfg_.model, rng);
  opt_main_.init(model::main_params(params_));
  opt_decoder_.init(model::decoder_params(params_));
}

ContextBatch Trainer::make_batch(std::size_t epoch, std::size_t step, std::size_t slot) const {
  const std::uint64_t stream =
      1 + (std::uint64_t(epoch) * cfg_.batches_per_epoch + step) * cfg_.batch_size + slot;
  Rng rng = Rng(cfg_.seed).split(stream);
  return prior::generate_context_batch(cfg_.prior, cfg_.shape, rng,
                                       cfg_.model.si_include_noise_shape);
}

std::vector<ContextBatch> Trainer::validation_set() const {
  std::vector<ContextBatch> out;
  for (std::size_t i = 0; i < cfg_.val_batches; ++i) {
    Rng rng = Rng(cfg_.seed).split(kValStream + i);
    out.push_back(prior::generate_context_batch(cfg_.prior, cfg_.shape, rng,
                                                cfg_.model.si_include_noise_shape));
  }
  return out;
}

StepReport Trainer::train_step(const std::vector<ContextBatch>& batches) {
  if (batches.empty()) throw std::invalid_argument("train_step needs at least one batch");
  StepReport rep;
  rep.lr = lr_at(cfg_, epoch_, step_in_epoch_);
  const double frac_epoch = double(epoch_) + double(step_in_epoch_) / double(cfg_.batches_per_epoch);
  const auto [ema_decay, weight_decay] = warmup_at(cfg_, frac_epoch);

  auto main_stream = model::main_params(params_);
  auto decoder_stream = model::decoder_params(params_);
  for (auto& p : main_stream) p.zero_grad();
  for (auto& p : decoder_stream) p.zero_grad();

  const float inv = 1.0f / float(batches.size());
  bool finite = true;
  for (const auto& b : batches) {
    auto out = model::forward(cfg_.model, params_, b);
    auto [main_loss, dec_loss] = model::total_loss(cfg_.model, out, b);
    if (!std::isfinite(main_loss.item()) || !std::isfinite(dec_loss.item())) {
      finite = false;
      break;
    }
    rep.main_loss += double(main_loss.item()) * inv;
    rep.decoder_loss += double(dec_loss.item()) * inv;
    double latent = 0.0;
    for (std::size_t i = 0; i < out.yhat.size(); ++i) {
      const double d = double(out.yhat.data()[i]) - double(out.ytarget.data()[i]);
      latent += d * d;
    }
    rep.latent_loss += latent / double(out.yhat.size()) * inv;
    ag::backward(ag::scale(main_loss, inv));
    ag::backward(ag::scale(dec_loss, inv));
  }

  if (!finite) {
    // Non-finite guard: report and leave every parameter untouched.
    rep.skipped = true;
  } else {
    rep.grad_norm_main = grad_norm(main_stream);
    rep.grad_norm_decoder = grad_norm(decoder_stream);
    opt_main_.step(main_stream, rep.lr, weight_decay);
    opt_decoder_.step(decoder_stream, rep.lr, weight_decay);
    model::ema_update(params_, ema_decay);
  }

  ++step_in_epoch_;
  if (step_in_epoch_ >= cfg_.batches_per_epoch) {
    step_in_epoch_ = 0;
    ++epoch_;
  }
  return rep;
}

EpochReport Trainer::train_epoch() {
  EpochReport rep;
  rep.epoch = epoch_;
  const std::size_t steps = cfg_.batches_per_epoch;
  for (std::size_t s = 0; s < steps; ++s) {
    std::vector<ContextBatch> batches;
    for (std::size_t b = 0; b < cfg_.batch_size; ++b)
      batches.push_back(make_batch(epoch_, step_in_epoch_, b));
    const StepReport sr = train_step(batches);
    rep.mean_main_loss += sr.main_loss / double(steps);
    rep.mean_decoder_loss += sr.decoder_loss / double(steps);
    rep.mean_latent_loss += sr.latent_loss / double(steps);
    if (sr.skipped) ++rep.skipped_steps;
  }
  rep.val_mse = eval_mse(validation_set());
  return rep;
}

double Trainer::eval_mse(const std::vector<ContextBatch>& batches) {
  double total = 0.0;
  std::size_t count = 0;
  const auto& bins = cfg_.model.bins;
  for (const auto& b : batches) {
    auto out = model::forward(cfg_.model, params_, b, /*with_target=*/false);
    const std::size_t rows = b.n_held * b.horizon, B = bins.count;
    auto probs = ag::softmax(ag::reshape(out.logits, {rows, B}));
    for (std::size_t r = 0; r < rows; ++r) {
      double mean = 0.0;
      for (std::size_t k = 0; k < B; ++k)
        mean += double(probs.data()[r * B + k]) * bins.center(k);
      const double d = mean - b.held_target[r];
      total += d * d;
      ++count;
    }
  }
  return count ? total / double(count) : 0.0;
}

// ---------------------------------------------------------------------------
// Checkpointing.

namespace {

std::string pack_u64(const std::vector<std::uint64_t>& vals) {
  std::string out(vals.size() * 8, '\0');
  std::memcpy(out.data(), vals.data(), out.size());
  return out;
}

std::vector<std::uint64_t> unpack_u64(const std::string& bytes) {
  std::vector<std::uint64_t> out(bytes.size() / 8);
  std::memcpy(out.data(), bytes.data(), out.size() * 8);
  return out;
}

void put_moments(io::Container& c, const std::string& prefix, const AdamW& opt) {
  c.put_bytes(prefix + "/steps", pack_u64({opt.steps}));
  for (std::size_t i = 0; i < opt.m.size(); ++i) {
    c.put_f32(prefix + "/m" + std::to_string(i), {opt.m[i].size()}, opt.m[i]);
    c.put_f32(prefix + "/v" + std::to_string(i), {opt.v[i].size()}, opt.v[i]);
  }
}

void get_moments(const io::Container& c, const std::string& prefix, AdamW& opt) {
  opt.steps = unpack_u64(c.bytes(prefix + "/steps"))[0];
  for (std::size_t i = 0; i < opt.m.size(); ++i) {
    opt.m[i] = c.f32(prefix + "/m" + std::to_string(i));
    opt.v[i] = c.f32(prefix + "/v" + std::to_string(i));
  }
}

}  // namespace

void Trainer::save_checkpoint(const std::string& path) const {
  io::Container c;
  c.put_bytes("config", config_to_json(cfg_));
  c.put_bytes("state", pack_u64({std::uint64_t(epoch_), std::uint64_t(step_in_epoch_)}));
  auto& self = const_cast<Trainer&>(*this);
  model::visit_all_params<float>(self.params_,
                                 [&](const std::string& name, ag::Tensor<float>& t) {
                                   std::vector<std::uint64_t> dims(t.shape().begin(),
                                                                   t.shape().end());
                                   c.put_f32("param/" + name, std::move(dims), t.data());
                                 });
  put_moments(c, "opt_main", opt_main_);
  put_moments(c, "opt_decoder", opt_decoder_);
  c.save(path);
}

Trainer Trainer::load_checkpoint(const std::string& path) {
  const io::Container c = io::Container::load(path);
  Trainer t(config_from_json(c.bytes("config")));
  const auto state = unpack_u64(c.bytes("state"));
  t.epoch_ = state[0];
  t.step_in_epoch_ = state[1];
  model::visit_all_params<float>(t.params_,
                                 [&](const std::string& name, ag::Tensor<float>& tens) {
                                   const auto& data = c.f32("param/" + name);
                                   if (data.size() != tens.size())
                                     throw std::runtime_error("checkpoint tensor size mismatch: " +
                                                              name);
                                   tens.data() = data;
                                 });
  get_moments(c, "opt_main", t.opt_main_);
  get_moments(c, "opt_decoder", t.opt_decoder_);
  return t;
}

// ---------------------------------------------------------------------------
// Config JSON.

namespace {

json range_to_json(const prior::Range& r) { return json::array({r.lo, r.hi}); }

prior::Range range_from_json(const json& j) {
  if (!j.is_array() || j.size() != 2) throw std::invalid_argument("range must be a [lo, hi] pair");
  return {j[0].get<double>(), j[1].get<double>()};
}

}  // namespace

std::string config_to_json(const TrainConfig& cfg) {
  json j;
  auto& m = j["model"];
  m["d"] = cfg.model.d;
  m["embedder_layers"] = cfg.model.embedder_layers;
  m["predictor_layers"] = cfg.model.predictor_layers;
  m["decoder_layers"] = cfg.model.decoder_layers;
  m["si_layers"] = cfg.model.si_layers;
  m["heads"] = cfg.model.heads;
  m["dilations"] = cfg.model.dilations;
  m["bins"] = json::array({cfg.model.bins.count, cfg.model.bins.lo, cfg.model.bins.hi});
  m["label_smoothing"] = cfg.model.label_smoothing;
  m["lambda_latent"] = cfg.model.lambda_latent;
  m["lambda_si"] = cfg.model.lambda_si;
  m["si_targets"] = cfg.model.si_targets;
  m["si_include_noise_shape"] = cfg.model.si_include_noise_shape;
  m["conv_kernel"] = cfg.model.conv_kernel;

  auto& p = j["prior"];
  p["annual_scale"] = range_to_json(cfg.prior.annual_scale);
  p["monthly_scale"] = range_to_json(cfg.prior.monthly_scale);
  p["weekly_scale"] = range_to_json(cfg.prior.weekly_scale);
  p["seasonality_sigma"] = cfg.prior.seasonality_sigma;
  p["linear_trend"] = range_to_json(cfg.prior.linear_trend);
  p["linear_trend_sigma"] = cfg.prior.linear_trend_sigma;
  p["exp_trend"] = range_to_json(cfg.prior.exp_trend);
  p["exp_trend_sigma"] = cfg.prior.exp_trend_sigma;
  p["kappa_exp"] = cfg.prior.kappa_exp;
  p["noise_shape"] = range_to_json(cfg.prior.noise_shape);
  p["noise_scale_ranges"] =
      json::array({range_to_json(cfg.prior.noise_scale_ranges[0]),
                   range_to_json(cfg.prior.noise_scale_ranges[1]),
                   range_to_json(cfg.prior.noise_scale_ranges[2])});
  p["kappa_noise"] = cfg.prior.kappa_noise;
  p["resolution"] = range_to_json(cfg.prior.resolution);
  p["kappa_rho"] = cfg.prior.kappa_rho;
  p["linear_offset"] = range_to_json(cfg.prior.linear_offset);
  p["exp_offset"] = range_to_json(cfg.prior.exp_offset);
  p["harmonics_min"] = cfg.prior.harmonics_min;
  p["harmonics_max"] = cfg.prior.harmonics_max;
  p["p_week"] = cfg.prior.p_week;
  p["p_month"] = cfg.prior.p_month;
  p["p_year"] = cfg.prior.p_year;
  p["trend_cap"] = cfg.prior.trend_cap;

  auto& s = j["shape"];
  s["n_ctx"] = cfg.shape.n_ctx;
  s["n_held"] = cfg.shape.n_held;
  s["seq_len"] = cfg.shape.seq_len;
  s["horizon"] = cfg.shape.horizon;

  auto& t = j["train"];
  t["base_lr"] = cfg.base_lr;
  t["cycle_epochs"] = cfg.cycle_epochs;
  t["restart_decay"] = cfg.restart_decay;
  t["warmup_epochs"] = cfg.warmup_epochs;
  t["ema_start"] = cfg.ema_start;
  t["ema_end"] = cfg.ema_end;
  t["wd_start"] = cfg.wd_start;
  t["wd_end"] = cfg.wd_end;
  t["batch_size"] = cfg.batch_size;
  t["batches_per_epoch"] = cfg.batches_per_epoch;
  t["epochs"] = cfg.epochs;
  t["seed"] = cfg.seed;
  t["val_batches"] = cfg.val_batches;

  return j.dump(2) + "\n";
}

void set_config_key(TrainConfig& cfg, const std::string& key, const json& v) {
  auto u = [&] { return v.get<std::uint64_t>(); };
  auto d = [&] { return v.get<double>(); };
  if (key == "model.d") cfg.model.d = u();
  else if (key == "model.embedder_layers") cfg.model.embedder_layers = u();
  else if (key == "model.predictor_layers") cfg.model.predictor_layers = u();
  else if (key == "model.decoder_layers") cfg.model.decoder_layers = u();
  else if (key == "model.si_layers") cfg.model.si_layers = u();
  else if (key == "model.heads") cfg.model.heads = u();
  else if (key == "model.dilations") cfg.model.dilations = v.get<std::vector<std::size_t>>();
  else if (key == "model.bins") {
    if (!v.is_array() || v.size() != 3) throw std::invalid_argument("model.bins must be [count, lo, hi]");
    cfg.model.bins.count = v[0].get<std::size_t>();
    cfg.model.bins.lo = v[1].get<double>();
    cfg.model.bins.hi = v[2].get<double>();
  }
  else if (key == "model.label_smoothing") cfg.model.label_smoothing = d();
  else if (key == "model.lambda_latent") cfg.model.lambda_latent = d();
  else if (key == "model.lambda_si") cfg.model.lambda_si = d();
  else if (key == "model.si_targets") cfg.model.si_targets = u();
  else if (key == "model.si_include_noise_shape") cfg.model.si_include_noise_shape = v.get<bool>();
  else if (key == "model.conv_kernel") cfg.model.conv_kernel = u();
  else if (key == "prior.annual_scale") cfg.prior.annual_scale = range_from_json(v);
  else if (key == "prior.monthly_scale") cfg.prior.monthly_scale = range_from_json(v);
  else if (key == "prior.weekly_scale") cfg.prior.weekly_scale = range_from_json(v);
  else if (key == "prior.seasonality_sigma") cfg.prior.seasonality_sigma = d();
  else if (key == "prior.linear_trend") cfg.prior.linear_trend = range_from_json(v);
  else if (key == "prior.linear_trend_sigma") cfg.prior.linear_trend_sigma = d();
  else if (key == "prior.exp_trend") cfg.prior.exp_trend = range_from_json(v);
  else if (key == "prior.exp_trend_sigma") cfg.prior.exp_trend_sigma = d();
  else if (key == "prior.kappa_exp") cfg.prior.kappa_exp = d();
  else if (key == "prior.noise_shape") cfg.prior.noise_shape = range_from_json(v);
  else if (key == "prior.noise_scale_ranges") {
    if (!v.is_array() || v.size() != 3)
      throw std::invalid_argument("prior.noise_scale_ranges must list three ranges");
    for (std::size_t i = 0; i < 3; ++i) cfg.prior.noise_scale_ranges[i] = range_from_json(v[i]);
  }
  else if (key == "prior.kappa_noise") cfg.prior.kappa_noise = d();
  else if (key == "prior.resolution") cfg.prior.resolution = range_from_json(v);
  else if (key == "prior.kappa_rho") cfg.prior.kappa_rho = d();
  else if (key == "prior.linear_offset") cfg.prior.linear_offset = range_from_json(v);
  else if (key == "prior.exp_offset") cfg.prior.exp_offset = range_from_json(v);
  else if (key == "prior.harmonics_min") cfg.prior.harmonics_min = v.get<int>();
  else if (key == "prior.harmonics_max") cfg.prior.harmonics_max = v.get<int>();
  else if (key == "prior.p_week") cfg.prior.p_week = d();
  else if (key == "prior.p_month") cfg.prior.p_month = d();
  else if (key == "prior.p_year") cfg.prior.p_year = d();
  else if (key == "prior.trend_cap") cfg.prior.trend_cap = d();
  else if (key == "shape.n_ctx") cfg.shape.n_ctx = u();
  else if (key == "shape.n_held") cfg.shape.n_held = u();
  else if (key == "shape.seq_len") cfg.shape.seq_len = u();
  else if (key == "shape.horizon") cfg.shape.horizon = u();
  else if (key == "train.base_lr") cfg.base_lr = d();
  else if (key == "train.cycle_epochs") cfg.cycle_epochs = u();
  else if (key == "train.restart_decay") cfg.restart_decay = d();
  else if (key == "train.warmup_epochs") cfg.warmup_epochs = u();
  else if (key == "train.ema_start") cfg.ema_start = d();
  else if (key == "train.ema_end") cfg.ema_end = d();
  else if (key == "train.wd_start") cfg.wd_start = d();
  else if (key == "train.wd_end") cfg.wd_end = d();
  else if (key == "train.batch_size") cfg.batch_size = u();
  else if (key == "train.batches_per_epoch") cfg.batches_per_epoch = u();
  else if (key == "train.epochs") cfg.epochs = u();
  else if (key == "train.seed") cfg.seed = u();
  else if (key == "train.val_batches") cfg.val_batches = u();
  else throw std::invalid_argument("unknown config key: " + key);
}

void apply_config_override(TrainConfig& cfg, const std::string& key, const std::string& value) {
  json v = json::parse(value, nullptr, /*allow_exceptions=*/false);
  if (v.is_discarded()) v = json(value);  // bare strings pass through as-is
  set_config_key(cfg, key, v);
}

TrainConfig config_from_json(const std::string& text) {
  const json j = json::parse(text);
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  TrainConfig cfg;
  for (const auto& [group, body] : j.items()) {
    if (!body.is_object()) throw std::invalid_argument("config group must be an object: " + group);
    for (const auto& [key, value] : body.items())
      set_config_key(cfg, group + "." + key, value);
  }
  return cfg;
}

}  // namespace latcast::train
