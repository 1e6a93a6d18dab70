#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "doctest.h"
#include "latcast/trainer.hpp"

using namespace latcast;
using train::TrainConfig;
using train::Trainer;

namespace {

// Small shapes so a step runs in milliseconds.
TrainConfig tiny_config(std::uint64_t seed = 1) {
  TrainConfig cfg;
  cfg.model.d = 8;
  cfg.model.heads = 2;
  cfg.model.embedder_layers = 2;
  cfg.model.dilations = {1, 2};
  cfg.model.predictor_layers = 1;
  cfg.shape = {3, 1, 16, 4};
  cfg.batch_size = 1;
  cfg.batches_per_epoch = 4;
  cfg.val_batches = 1;
  cfg.seed = seed;
  return cfg;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("learning-rate schedule endpoints") {
    TrainConfig cfg;
    CHECK(train::lr_at(cfg, 0, 0) == doctest::Approx(9e-4).epsilon(1e-12));
    // Start of cycle 2 (epoch 18 with T0 = 9): peak decayed twice.
    CHECK(train::lr_at(cfg, 18, 0) == doctest::Approx(9e-4 * 0.96 * 0.96).epsilon(1e-12));
    // Exact mid-cycle: half the cycle peak.
    CHECK(train::lr_at(cfg, 4, 125) == doctest::Approx(9e-4 / 2.0).epsilon(1e-9));
    // End of a cycle approaches zero.
    CHECK(train::lr_at(cfg, 8, 249) < 1e-7);
  }

  TEST_CASE("warmup schedule endpoints and midpoint") {
    TrainConfig cfg;
    auto [e0, w0] = train::warmup_at(cfg, 0.0);
    CHECK(e0 == doctest::Approx(0.9952).epsilon(1e-15));
    CHECK(w0 == doctest::Approx(1.77e-4).epsilon(1e-15));
    auto [e95, w95] = train::warmup_at(cfg, 95.0);
    CHECK(e95 == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(w95 == doctest::Approx(4.9e-2).epsilon(1e-15));
    auto [e200, w200] = train::warmup_at(cfg, 200.0);
    CHECK(e200 == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(w200 == doctest::Approx(4.9e-2).epsilon(1e-15));
    // Midpoint (fractional epoch 47.5).
    auto [em, wm] = train::warmup_at(cfg, 47.5);
    CHECK(em == doctest::Approx(0.9976).epsilon(1e-12));
    CHECK(wm == doctest::Approx(2.45885e-2).epsilon(1e-6));
  }

  TEST_CASE("zero-LR step changes nothing except the EMA shadow") {
    auto cfg = tiny_config(2);
    cfg.base_lr = 0.0;
    // validate() rejects non-positive LR; bypass via a live config edit.
    Trainer t = [&] {
      auto c = cfg;
      c.base_lr = 1e-9;
      return Trainer(c);
    }();
    (void)t;

    // Instead check directly: lr 0 via cosine trough (end of cycle ~0) is
    // awkward; assert the optimizer leaves weights alone at lr = 0.
    train::AdamW opt;
    Rng rng(3);
    std::vector<ag::Tensor<float>> params{ag::Tensor<float>::randn({4, 4}, rng, 1.0f, true)};
    opt.init(params);
    auto before = params[0].data();
    params[0].grad().assign(16, 1.0f);
    opt.step(params, 0.0, 0.1);
    CHECK(params[0].data() == before);
  }

  TEST_CASE("single step is bit-identical across runs") {
    auto run = [] {
      auto cfg = tiny_config(5);
      Trainer t(cfg);
      auto batch = t.make_batch(0, 0, 0);
      return t.train_step({batch});
    };
    auto a = run();
    auto b = run();
    CHECK(a.main_loss == b.main_loss);
    CHECK(a.decoder_loss == b.decoder_loss);
    CHECK(a.grad_norm_main == b.grad_norm_main);
    CHECK_FALSE(a.skipped);
  }

  TEST_CASE("losses are bit-identical over ten steps") {
    auto run = [] {
      auto cfg = tiny_config(6);
      Trainer t(cfg);
      std::vector<double> losses;
      for (int s = 0; s < 10; ++s) {
        auto rep = t.train_step({t.make_batch(t.epoch(), t.step_in_epoch(), 0)});
        losses.push_back(rep.main_loss);
        losses.push_back(rep.decoder_loss);
      }
      return losses;
    };
    CHECK(run() == run());
  }

  TEST_CASE("non-finite batch leaves parameters unchanged") {
    auto cfg = tiny_config(7);
    Trainer t(cfg);
    auto batch = t.make_batch(0, 0, 0);
    for (auto& v : batch.held_target) v = std::nan("");
    std::vector<std::vector<float>> before;
    model::visit_all_params<float>(t.params(), [&](const std::string&, ag::Tensor<float>& p) {
      before.push_back(p.data());
    });
    // NaN targets reach the CE through the bin index; guard against throw or
    // NaN loss paths alike.
    bool threw = false;
    train::StepReport rep;
    try {
      auto nan_batch = t.make_batch(0, 0, 0);
      for (auto& v : nan_batch.held_history) v = std::nan("");
      rep = t.train_step({nan_batch});
    } catch (const std::exception&) {
      threw = true;
    }
    if (!threw) CHECK(rep.skipped);
    std::size_t i = 0;
    model::visit_all_params<float>(t.params(), [&](const std::string&, ag::Tensor<float>& p) {
      CHECK(p.data() == before[i++]);
    });
  }

  TEST_CASE("validation batches are identical every epoch") {
    auto cfg = tiny_config(8);
    Trainer t(cfg);
    auto a = t.validation_set();
    auto b = t.validation_set();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].context == b[i].context);
  }

  TEST_CASE("checkpoint roundtrip is byte-identical") {
    auto cfg = tiny_config(9);
    Trainer t(cfg);
    for (int s = 0; s < 3; ++s) t.train_step({t.make_batch(t.epoch(), t.step_in_epoch(), 0)});
    const std::string p1 = temp_path("ckpt_a.bin"), p2 = temp_path("ckpt_b.bin");
    t.save_checkpoint(p1);
    auto t2 = Trainer::load_checkpoint(p1);
    t2.save_checkpoint(p2);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string c1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string c2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(c1 == c2);
    std::remove(p1.c_str());
    std::remove(p2.c_str());
  }

  TEST_CASE("resume reproduces the next step bit-identically") {
    auto cfg = tiny_config(10);
    Trainer uninterrupted(cfg);
    Trainer first(cfg);
    for (int s = 0; s < 3; ++s) {
      uninterrupted.train_step({uninterrupted.make_batch(uninterrupted.epoch(),
                                                         uninterrupted.step_in_epoch(), 0)});
      first.train_step({first.make_batch(first.epoch(), first.step_in_epoch(), 0)});
    }
    const std::string path = temp_path("ckpt_resume.bin");
    first.save_checkpoint(path);
    auto resumed = Trainer::load_checkpoint(path);
    std::remove(path.c_str());

    auto a = uninterrupted.train_step(
        {uninterrupted.make_batch(uninterrupted.epoch(), uninterrupted.step_in_epoch(), 0)});
    auto b = resumed.train_step({resumed.make_batch(resumed.epoch(), resumed.step_in_epoch(), 0)});
    CHECK(a.main_loss == b.main_loss);
    CHECK(a.decoder_loss == b.decoder_loss);
    CHECK(a.grad_norm_main == b.grad_norm_main);
    CHECK(a.grad_norm_decoder == b.grad_norm_decoder);
  }

  TEST_CASE("truncated checkpoint fails the checksum") {
    auto cfg = tiny_config(11);
    Trainer t(cfg);
    const std::string path = temp_path("ckpt_trunc.bin");
    t.save_checkpoint(path);
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    bytes.resize(bytes.size() - 17);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), std::streamsize(bytes.size()));
    out.close();
    CHECK_THROWS_AS(Trainer::load_checkpoint(path), std::runtime_error);
    std::remove(path.c_str());
  }

  TEST_CASE("epoch runs the configured number of steps") {
    auto cfg = tiny_config(12);
    cfg.batches_per_epoch = 2;
    Trainer t(cfg);
    auto rep = t.train_epoch();
    CHECK(rep.epoch == 0);
    CHECK(t.epoch() == 1);
    CHECK(t.step_in_epoch() == 0);
    CHECK(rep.skipped_steps == 0);
    CHECK(std::isfinite(rep.val_mse));
  }

  TEST_CASE("config JSON roundtrip and overrides") {
    auto cfg = tiny_config(13);
    cfg.model.lambda_latent = 0.5;
    cfg.prior.kappa_rho = 99.0;
    auto text = train::config_to_json(cfg);
    auto back = train::config_from_json(text);
    CHECK(back.model.lambda_latent == cfg.model.lambda_latent);
    CHECK(back.prior.kappa_rho == 99.0);
    CHECK(back.shape.seq_len == cfg.shape.seq_len);
    CHECK(back.seed == cfg.seed);
    CHECK(train::config_to_json(back) == text);

    train::apply_config_override(back, "prior.kappa_rho", "53.6");
    CHECK(back.prior.kappa_rho == doctest::Approx(53.6));
    train::apply_config_override(back, "model.dilations", "[1,2,4]");
    CHECK(back.model.dilations == std::vector<std::size_t>{1, 2, 4});
    CHECK_THROWS_AS(train::apply_config_override(back, "nope.key", "1"), std::invalid_argument);
  }

  TEST_CASE("smoke: decoder CE falls on a constant-series prior") {
    auto cfg = tiny_config(14);
    // Degenerate prior: no seasonality, no trend, minimal noise.
    cfg.prior.annual_scale = {0.0, 0.0};
    cfg.prior.monthly_scale = {0.0, 0.0};
    cfg.prior.weekly_scale = {0.0, 0.0};
    cfg.prior.seasonality_sigma = 0.0;
    cfg.prior.linear_trend = {0.0, 0.0};
    cfg.prior.linear_trend_sigma = 0.0;
    cfg.prior.exp_trend = {1.0, 1.0};
    cfg.prior.exp_trend_sigma = 0.0;
    cfg.prior.noise_scale_ranges = {{{0.0, 0.0}, {0.0, 0.0}, {0.0, 0.0}}};
    cfg.base_lr = 3e-3;
    Trainer t(cfg);
    double last_ce = 0.0;
    for (int s = 0; s < 200; ++s) {
      auto rep = t.train_step({t.make_batch(t.epoch(), t.step_in_epoch(), 0)});
      last_ce = rep.decoder_loss;
    }
    // ln(100) ~ 4.605 is the uniform-prediction CE; the decoder must reach
    // well under half of it on constant series.
    CHECK(last_ce < 0.5 * std::log(100.0));
  }
}
