// latcast: synth/train/forecast/eval/embed/ablate/patches subcommands.
//
// Exit codes: 0 success, 1 runtime failure (structured JSON error on stderr),
// 2 usage error. Every run writes its fully resolved config beside the
// outputs; all artifacts are written atomically (temp file + rename).

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "latcast/container.hpp"
#include "latcast/eval.hpp"
#include "latcast/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace latcast;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

// Shared options: config file, seed, dotted-key overrides.
struct CommonOpts {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;  // key=value
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "JSON config file");
  cmd->add_option("--seed", [&opts](const std::vector<std::string>& vals) {
    opts.seed = std::stoull(vals.at(0));
    return true;
  }, "Random seed (overrides config)")->expected(1);
  cmd->add_option("--set", opts.overrides,
                  "Dotted-key config override, e.g. --set prior.kappa_rho=53.6");
}

// Precedence: built-in defaults < config file < --set overrides < --seed.
train::TrainConfig resolve_config(const CommonOpts& opts) {
  train::TrainConfig cfg;
  if (!opts.config_path.empty()) cfg = train::config_from_json(slurp(opts.config_path));
  for (const auto& kv : opts.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("override must be key=value: " + kv);
    train::apply_config_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (opts.seed) cfg.seed = *opts.seed;
  cfg.validate();
  return cfg;
}

void write_resolved_config(const std::string& out_dir, const train::TrainConfig& cfg) {
  fs::create_directories(out_dir);
  io::atomic_write_text((fs::path(out_dir) / "resolved_config.json").string(),
                        train::config_to_json(cfg));
}

std::vector<double> series_features(const ContextBatch& b, std::size_t series) {
  // Context series first, then held-out full windows; each (S, 3) row-major.
  const std::size_t stride = b.seq_len * ContextBatch::kFeatures;
  if (series < b.n_ctx) {
    return {b.context.begin() + std::ptrdiff_t(series * stride),
            b.context.begin() + std::ptrdiff_t((series + 1) * stride)};
  }
  const std::size_t i = series - b.n_ctx;
  return {b.held_full.begin() + std::ptrdiff_t(i * stride),
          b.held_full.begin() + std::ptrdiff_t((i + 1) * stride)};
}

// ---------------------------------------------------------------------------

int run_synth(const CommonOpts& common, const std::string& out_dir, std::size_t n_batches,
              bool csv) {
  auto cfg = resolve_config(common);
  std::vector<ContextBatch> batches;
  Rng rng(cfg.seed);
  for (std::size_t i = 0; i < n_batches; ++i)
    batches.push_back(prior::generate_context_batch(cfg.prior, cfg.shape, rng));

  fs::create_directories(out_dir);
  io::write_batches((fs::path(out_dir) / "batches.bin").string(), batches);
  if (csv) {
    std::ostringstream out;
    out << "batch,series,role,step,tau,value,observed\n";
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto& b = batches[bi];
      for (std::size_t s = 0; s < b.n_ctx + b.n_held; ++s) {
        const auto feat = series_features(b, s);
        const char* role = s < b.n_ctx ? "context" : "held_out";
        for (std::size_t t = 0; t < b.seq_len; ++t)
          out << bi << ',' << s << ',' << role << ',' << t << ',' << feat[t * 3] << ','
              << feat[t * 3 + 1] << ',' << feat[t * 3 + 2] << '\n';
      }
    }
    io::atomic_write_text((fs::path(out_dir) / "batches.csv").string(), out.str());
  }
  write_resolved_config(out_dir, cfg);
  return 0;
}

int run_train(const CommonOpts& common, const std::string& out_dir, std::optional<std::size_t> epochs,
              const std::string& resume) {
  std::optional<train::Trainer> trainer;
  if (!resume.empty()) {
    trainer.emplace(train::Trainer::load_checkpoint(resume));
  } else {
    trainer.emplace(resolve_config(common));
  }
  const auto& cfg = trainer->config();
  const std::size_t total_epochs = epochs.value_or(cfg.epochs);

  std::ostringstream metrics;
  while (trainer->epoch() < total_epochs) {
    const auto rep = trainer->train_epoch();
    json line{{"epoch", rep.epoch},
              {"main_loss", rep.mean_main_loss},
              {"decoder_loss", rep.mean_decoder_loss},
              {"latent_loss", rep.mean_latent_loss},
              {"val_mse", rep.val_mse},
              {"skipped_steps", rep.skipped_steps}};
    metrics << line.dump() << '\n';
    std::cerr << line.dump() << '\n';
  }

  fs::create_directories(out_dir);
  trainer->save_checkpoint((fs::path(out_dir) / "checkpoint.bin").string());
  io::atomic_write_text((fs::path(out_dir) / "metrics.jsonl").string(), metrics.str());
  write_resolved_config(out_dir, cfg);
  return 0;
}

int run_forecast(const std::string& checkpoint, const std::string& input,
                 const std::string& out_dir) {
  auto trainer = train::Trainer::load_checkpoint(checkpoint);
  const auto batches = io::read_batches(input);

  std::ostringstream out;
  out << "batch,series,step,point,variance,denorm,target\n";
  for (std::size_t bi = 0; bi < batches.size(); ++bi) {
    const auto fr = eval::forecast(trainer.config().model, trainer.params(), batches[bi]);
    for (std::size_t i = 0; i < fr.n_held; ++i)
      for (std::size_t t = 0; t < fr.horizon; ++t) {
        const std::size_t k = i * fr.horizon + t;
        out << bi << ',' << i << ',' << t << ',' << fr.point[k] << ',' << fr.variance[k] << ','
            << fr.denorm[k] << ',' << fr.target[k] << '\n';
      }
  }
  fs::create_directories(out_dir);
  io::atomic_write_text((fs::path(out_dir) / "forecast.csv").string(), out.str());
  write_resolved_config(out_dir, trainer.config());
  return 0;
}

int run_eval(const std::string& checkpoint, const std::string& input, const std::string& out_dir) {
  auto trainer = train::Trainer::load_checkpoint(checkpoint);
  const auto batches = io::read_batches(input);
  const auto& mcfg = trainer.config().model;
  pipeline::BinSpec bins{mcfg.bins};

  std::ostringstream rows;
  rows << "batch,series,mse,crrmse,bin_accuracy\n";
  std::vector<double> mses, crs, accs;
  for (std::size_t bi = 0; bi < batches.size(); ++bi) {
    const auto& b = batches[bi];
    const auto fr = eval::forecast(mcfg, trainer.params(), b);
    for (std::size_t i = 0; i < fr.n_held; ++i) {
      const std::vector<double> f(fr.point.begin() + std::ptrdiff_t(i * fr.horizon),
                                  fr.point.begin() + std::ptrdiff_t((i + 1) * fr.horizon));
      const std::vector<double> y(fr.target.begin() + std::ptrdiff_t(i * fr.horizon),
                                  fr.target.begin() + std::ptrdiff_t((i + 1) * fr.horizon));
      const std::vector<double> p(fr.probs.begin() + std::ptrdiff_t(i * fr.horizon * fr.bins),
                                  fr.probs.begin() + std::ptrdiff_t((i + 1) * fr.horizon * fr.bins));
      const double m = eval::mse(f, y);
      const double c = eval::crrmse(f, y);
      const double a = eval::bin_accuracy(p, fr.bins, y, bins);
      mses.push_back(m);
      crs.push_back(c);
      accs.push_back(a);
      rows << bi << ',' << i << ',' << m << ',' << c << ',' << a << '\n';
    }
  }
  auto stats = [](const std::vector<double>& v) {
    double mean = 0;
    for (double x : v) mean += x;
    mean /= v.empty() ? 1.0 : double(v.size());
    double var = 0;
    for (double x : v) var += (x - mean) * (x - mean);
    return std::pair<double, double>(mean, v.empty() ? 0.0 : std::sqrt(var / double(v.size())));
  };
  const auto [mm, ms] = stats(mses);
  const auto [cm, cs] = stats(crs);
  const auto [am, as] = stats(accs);
  json report{{"windows", mses.size()},
              {"mse", {{"mean", mm}, {"std", ms}}},
              {"crrmse", {{"mean", cm}, {"std", cs}}},
              {"bin_accuracy", {{"mean", am}, {"std", as}}}};

  fs::create_directories(out_dir);
  io::atomic_write_text((fs::path(out_dir) / "metrics.json").string(), report.dump(2) + "\n");
  io::atomic_write_text((fs::path(out_dir) / "per_window.csv").string(), rows.str());
  write_resolved_config(out_dir, trainer.config());
  return 0;
}

int run_embed(const std::string& checkpoint, const std::string& input, const std::string& out_dir,
              std::size_t pca_dims) {
  auto trainer = train::Trainer::load_checkpoint(checkpoint);
  const auto batches = io::read_batches(input);
  const auto& mcfg = trainer.config().model;

  io::Container cont;
  std::vector<std::vector<double>> all;
  std::vector<std::pair<std::size_t, std::size_t>> refs;
  for (std::size_t bi = 0; bi < batches.size(); ++bi) {
    const auto& b = batches[bi];
    for (std::size_t s = 0; s < b.n_ctx + b.n_held; ++s) {
      const auto emb = eval::summary_embed(mcfg, trainer.params(), series_features(b, s));
      std::vector<float> f32(emb.begin(), emb.end());
      cont.put_f32("emb/" + std::to_string(bi) + "/" + std::to_string(s),
                   {std::uint64_t(emb.size())}, f32);
      all.push_back(emb);
      refs.emplace_back(bi, s);
    }
  }
  fs::create_directories(out_dir);
  cont.save((fs::path(out_dir) / "embeddings.bin").string());

  if (pca_dims > 0) {
    bool degenerate = false;
    const auto proj = eval::pca_project(all, pca_dims, &degenerate);
    std::ostringstream out;
    out << "batch,series";
    for (std::size_t d = 0; d < pca_dims; ++d) out << ",pc" << d + 1;
    out << '\n';
    for (std::size_t i = 0; i < all.size(); ++i) {
      out << refs[i].first << ',' << refs[i].second;
      for (std::size_t d = 0; d < pca_dims; ++d) out << ',' << proj[i * pca_dims + d];
      out << '\n';
    }
    if (degenerate) out << "# degenerate: all embeddings equal\n";
    io::atomic_write_text((fs::path(out_dir) / "projection.csv").string(), out.str());
  }
  write_resolved_config(out_dir, trainer.config());
  return 0;
}

int run_ablate(const std::string& checkpoint, const std::string& out_dir,
               const std::vector<std::size_t>& sizes, std::size_t trials, std::size_t pool_batches,
               std::optional<std::uint64_t> seed) {
  if (sizes.empty()) throw std::invalid_argument("at least one context size is required");
  auto trainer = train::Trainer::load_checkpoint(checkpoint);
  auto cfg = trainer.config();
  const std::uint64_t s = seed.value_or(cfg.seed);

  std::size_t max_n = 0;
  for (auto n : sizes) max_n = std::max(max_n, n);
  auto shape = cfg.shape;
  shape.n_ctx = std::max(shape.n_ctx, max_n);

  std::vector<ContextBatch> pool;
  for (std::size_t i = 0; i < pool_batches; ++i) {
    Rng rng = Rng(s).split(0x41424c0000000000ULL + i);
    pool.push_back(prior::generate_context_batch(cfg.prior, shape, rng));
  }
  Rng rng(s);
  const auto curve = eval::ablate_context_size(cfg.model, trainer.params(), pool, sizes, trials, rng);

  fs::create_directories(out_dir);
  io::atomic_write_text((fs::path(out_dir) / "ablation.csv").string(), eval::ablation_csv(curve));
  write_resolved_config(out_dir, cfg);
  return 0;
}

int run_patches(const std::string& checkpoint, const std::string& input, const std::string& out_dir,
                double threshold) {
  auto trainer = train::Trainer::load_checkpoint(checkpoint);
  const auto batches = io::read_batches(input);
  const auto& mcfg = trainer.config().model;

  std::ostringstream out;
  out << "batch,series,patch,start,end\n";
  io::Container cont;
  std::size_t window = 0;
  for (std::size_t bi = 0; bi < batches.size(); ++bi) {
    const auto& b = batches[bi];
    for (std::size_t s = 0; s < b.n_ctx + b.n_held; ++s, ++window) {
      const auto emb = eval::step_embed(mcfg, trainer.params(), series_features(b, s));
      const auto idx = eval::patch_segment(emb, mcfg.d, threshold, window);
      for (std::size_t p = 0; p < idx.boundaries.size(); ++p) {
        const std::size_t start = idx.boundaries[p];
        const std::size_t end = p + 1 < idx.boundaries.size() ? idx.boundaries[p + 1] : b.seq_len;
        out << bi << ',' << s << ',' << p << ',' << start << ',' << end << '\n';
        std::vector<float> f32(idx.means[p].begin(), idx.means[p].end());
        cont.put_f32("patch/" + std::to_string(bi) + "/" + std::to_string(s) + "/" +
                         std::to_string(p),
                     {std::uint64_t(f32.size())}, f32);
      }
    }
  }
  fs::create_directories(out_dir);
  io::atomic_write_text((fs::path(out_dir) / "patches.csv").string(), out.str());
  cont.save((fs::path(out_dir) / "patch_vectors.bin").string());
  write_resolved_config(out_dir, trainer.config());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"latcast: latent in-context time-series forecasting"};
  app.require_subcommand(1);

  CommonOpts synth_common;
  std::string synth_out;
  std::size_t synth_batches = 1;
  bool synth_csv = false;
  auto* synth = app.add_subcommand("synth", "Generate synthetic context batches");
  add_common(synth, synth_common);
  synth->add_option("-o,--out", synth_out, "Output directory")->required();
  synth->add_option("--batches", synth_batches, "Number of context batches");
  synth->add_flag("--csv", synth_csv, "Also emit a CSV dump of the batches");

  CommonOpts train_common;
  std::string train_out = ".", train_resume;
  std::optional<std::size_t> train_epochs;
  auto* tr = app.add_subcommand("train", "Train a model on the synthetic prior");
  add_common(tr, train_common);
  tr->add_option("-o,--out", train_out, "Checkpoint/metrics directory");
  tr->add_option("--epochs", [&train_epochs](const std::vector<std::string>& vals) {
    train_epochs = std::stoull(vals.at(0));
    return true;
  }, "Total epochs to reach (overrides config)")->expected(1);
  tr->add_option("--resume", train_resume, "Resume from an existing checkpoint");

  std::string fc_ckpt, fc_in, fc_out = ".";
  auto* fc = app.add_subcommand("forecast", "Forecast held-out series from a batch file");
  fc->add_option("--checkpoint", fc_ckpt, "Trained checkpoint")->required();
  fc->add_option("-i,--input", fc_in, "Batch container from synth")->required();
  fc->add_option("-o,--out", fc_out, "Output directory");

  std::string ev_ckpt, ev_in, ev_out = ".";
  auto* ev = app.add_subcommand("eval", "Compute forecasting metrics");
  ev->add_option("--checkpoint", ev_ckpt, "Trained checkpoint")->required();
  ev->add_option("-i,--input", ev_in, "Batch container from synth")->required();
  ev->add_option("-o,--out", ev_out, "Output directory");

  std::string em_ckpt, em_in, em_out = ".";
  std::size_t em_pca = 0;
  auto* em = app.add_subcommand("embed", "Extract fixed-length series summaries");
  em->add_option("--checkpoint", em_ckpt, "Trained checkpoint")->required();
  em->add_option("-i,--input", em_in, "Batch container from synth")->required();
  em->add_option("-o,--out", em_out, "Output directory");
  em->add_option("--pca", em_pca, "Also project embeddings to this many PCA components");

  std::string ab_ckpt, ab_out = ".";
  std::vector<std::size_t> ab_sizes{1, 2, 4, 8};
  std::size_t ab_trials = 8, ab_pool = 4;
  std::optional<std::uint64_t> ab_seed;
  auto* ab = app.add_subcommand("ablate", "Context-size ablation curve");
  ab->add_option("--checkpoint", ab_ckpt, "Trained checkpoint")->required();
  ab->add_option("-o,--out", ab_out, "Output directory");
  ab->add_option("--sizes", ab_sizes, "Context sizes to evaluate");
  ab->add_option("--trials", ab_trials, "Subsampling trials per size");
  ab->add_option("--pool-batches", ab_pool, "Synthetic pool batches");
  ab->add_option("--seed", [&ab_seed](const std::vector<std::string>& vals) {
    ab_seed = std::stoull(vals.at(0));
    return true;
  }, "Pool/subsampling seed (defaults to checkpoint seed)")->expected(1);

  std::string pa_ckpt, pa_in, pa_out = ".";
  double pa_threshold = 2.0;
  auto* pa = app.add_subcommand("patches", "Segment per-step embeddings into patches");
  pa->add_option("--checkpoint", pa_ckpt, "Trained checkpoint")->required();
  pa->add_option("-i,--input", pa_in, "Batch container from synth")->required();
  pa->add_option("-o,--out", pa_out, "Output directory");
  pa->add_option("-c,--threshold", pa_threshold, "Boundary threshold multiplier");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (synth->parsed()) return run_synth(synth_common, synth_out, synth_batches, synth_csv);
    if (tr->parsed()) return run_train(train_common, train_out, train_epochs, train_resume);
    if (fc->parsed()) return run_forecast(fc_ckpt, fc_in, fc_out);
    if (ev->parsed()) return run_eval(ev_ckpt, ev_in, ev_out);
    if (em->parsed()) return run_embed(em_ckpt, em_in, em_out, em_pca);
    if (ab->parsed()) return run_ablate(ab_ckpt, ab_out, ab_sizes, ab_trials, ab_pool, ab_seed);
    if (pa->parsed()) return run_patches(pa_ckpt, pa_in, pa_out, pa_threshold);
  } catch (const std::exception& e) {
    std::cerr << json{{"error", e.what()}}.dump() << '\n';
    return 1;
  }
  return 0;
}
