#pragma once

// Latent in-context forecaster: causal dilated depthwise-separable conv
// embedder, EMA target embedder, learned-query context pooling, a predictor
// with diagonal-only self-attention on the prompt tokens, a binned decoder
// MLP behind a stop-gradient, and a system-identification head.

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "latcast/autodiff.hpp"
#include "latcast/batch.hpp"
#include "latcast/pipeline.hpp"
#include "latcast/rng.hpp"

namespace latcast::model {

struct ModelConfig {
  std::size_t d = 64;
  std::size_t embedder_layers = 8;
  std::size_t predictor_layers = 3;
  std::size_t decoder_layers = 3;
  std::size_t si_layers = 2;
  std::size_t heads = 4;
  std::vector<std::size_t> dilations = {1, 2, 4, 8, 16, 32, 64, 128};
  pipeline::BinSpec bins;  // 100 bins on [-3.5, 3.5]
  double label_smoothing = 0.01;
  double lambda_latent = 3.77e-3;
  double lambda_si = 1e-7;
  std::size_t si_targets = 9;
  bool si_include_noise_shape = false;  // enables the extra (10th) target slot

  std::size_t conv_kernel = 3;

  void validate() const {
    if (d == 0 || d % heads != 0)
      throw std::invalid_argument("model width must be a positive multiple of the head count");
    if (embedder_layers < 1 || predictor_layers < 1 || decoder_layers < 1 || si_layers < 1)
      throw std::invalid_argument("all layer counts must be >= 1");
    if (dilations.size() != embedder_layers)
      throw std::invalid_argument("dilation schedule length must equal embedder layer count");
    if (lambda_latent < 0.0 || lambda_si < 0.0)
      throw std::invalid_argument("loss weights must be non-negative");
    if (label_smoothing < 0.0 || label_smoothing >= 1.0)
      throw std::invalid_argument("label smoothing must lie in [0, 1)");
  }

  std::size_t si_outputs() const { return si_targets + (si_include_noise_shape ? 1 : 0); }
};

template <typename T>
struct LinearP {
  ag::Tensor<T> w, b;
};

template <typename T>
struct LayerNormP {
  ag::Tensor<T> gamma, beta;
};

// One depthwise-separable conv block: causal dilated depthwise conv,
// pointwise projection, GELU, residual, layer norm.
template <typename T>
struct ConvBlock {
  ag::Tensor<T> dw;  // (d, K)
  LinearP<T> pw;     // (d, d)
  LayerNormP<T> ln;
};

template <typename T>
struct EmbedderP {
  LinearP<T> input;  // (3, d)
  std::vector<ConvBlock<T>> blocks;
};

template <typename T>
struct AttentionP {
  LinearP<T> q, k, v, o;
};

template <typename T>
struct EncoderLayerP {
  AttentionP<T> attn;
  LayerNormP<T> ln1;
  LinearP<T> ff1, ff2;
  LayerNormP<T> ln2;
};

// Decoder layer: diagonal-only self-attention (each token attends to itself,
// which reduces to a per-token value+output projection), full cross-attention
// to the pooled context, feedforward.
template <typename T>
struct DecoderLayerP {
  LinearP<T> self_v, self_o;
  LayerNormP<T> ln1;
  AttentionP<T> cross;
  LayerNormP<T> ln2;
  LinearP<T> ff1, ff2;
  LayerNormP<T> ln3;
};

template <typename T>
struct ModelParamsT {
  EmbedderP<T> embedder;
  EmbedderP<T> ema;  // shadow of `embedder`; never receives gradients
  ag::Tensor<T> query;  // (1, d) learned pooling query
  std::vector<EncoderLayerP<T>> encoder;
  std::vector<DecoderLayerP<T>> decoder;
  std::vector<LinearP<T>> decoder_mlp;  // 3 layers, last maps to bins
  std::vector<LinearP<T>> si_head;      // 2 layers, first from 2d
};

using ModelParams = ModelParamsT<float>;

// ---------------------------------------------------------------------------
// Initialization.

template <typename T>
LinearP<T> init_linear(std::size_t in, std::size_t out, Rng& rng) {
  LinearP<T> p;
  p.w = ag::Tensor<T>::randn({in, out}, rng, static_cast<T>(1.0 / std::sqrt(double(in))), true);
  p.b = ag::Tensor<T>({out}, T(0), true);
  return p;
}

template <typename T>
LayerNormP<T> init_layer_norm(std::size_t d) {
  LayerNormP<T> p;
  p.gamma = ag::Tensor<T>({d}, T(1), true);
  p.beta = ag::Tensor<T>({d}, T(0), true);
  return p;
}

template <typename T>
EmbedderP<T> init_embedder(const ModelConfig& cfg, Rng& rng) {
  EmbedderP<T> e;
  e.input = init_linear<T>(ContextBatch::kFeatures, cfg.d, rng);
  for (std::size_t l = 0; l < cfg.embedder_layers; ++l) {
    ConvBlock<T> b;
    b.dw = ag::Tensor<T>::randn({cfg.d, cfg.conv_kernel}, rng,
                                static_cast<T>(1.0 / std::sqrt(double(cfg.conv_kernel))), true);
    b.pw = init_linear<T>(cfg.d, cfg.d, rng);
    b.ln = init_layer_norm<T>(cfg.d);
    e.blocks.push_back(std::move(b));
  }
  return e;
}

template <typename T>
ag::Tensor<T> clone_detached(const ag::Tensor<T>& t, bool requires_grad) {
  return ag::Tensor<T>::from(t.shape(), t.data(), requires_grad);
}

// EMA shadow starts as an exact copy of the online embedder.
template <typename T>
EmbedderP<T> shadow_of(const EmbedderP<T>& e) {
  EmbedderP<T> s;
  s.input.w = clone_detached(e.input.w, false);
  s.input.b = clone_detached(e.input.b, false);
  for (const auto& b : e.blocks) {
    ConvBlock<T> sb;
    sb.dw = clone_detached(b.dw, false);
    sb.pw.w = clone_detached(b.pw.w, false);
    sb.pw.b = clone_detached(b.pw.b, false);
    sb.ln.gamma = clone_detached(b.ln.gamma, false);
    sb.ln.beta = clone_detached(b.ln.beta, false);
    s.blocks.push_back(std::move(sb));
  }
  return s;
}

template <typename T>
ModelParamsT<T> init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ModelParamsT<T> p;
  p.embedder = init_embedder<T>(cfg, rng);
  p.ema = shadow_of(p.embedder);
  p.query = ag::Tensor<T>::randn({std::size_t(1), cfg.d}, rng,
                                 static_cast<T>(1.0 / std::sqrt(double(cfg.d))), true);
  for (std::size_t l = 0; l < cfg.predictor_layers; ++l) {
    EncoderLayerP<T> e;
    e.attn = {init_linear<T>(cfg.d, cfg.d, rng), init_linear<T>(cfg.d, cfg.d, rng),
              init_linear<T>(cfg.d, cfg.d, rng), init_linear<T>(cfg.d, cfg.d, rng)};
    e.ln1 = init_layer_norm<T>(cfg.d);
    e.ff1 = init_linear<T>(cfg.d, 4 * cfg.d, rng);
    e.ff2 = init_linear<T>(4 * cfg.d, cfg.d, rng);
    e.ln2 = init_layer_norm<T>(cfg.d);
    p.encoder.push_back(std::move(e));
  }
  for (std::size_t l = 0; l < cfg.predictor_layers; ++l) {
    DecoderLayerP<T> dlayer;
    dlayer.self_v = init_linear<T>(cfg.d, cfg.d, rng);
    dlayer.self_o = init_linear<T>(cfg.d, cfg.d, rng);
    dlayer.ln1 = init_layer_norm<T>(cfg.d);
    dlayer.cross = {init_linear<T>(cfg.d, cfg.d, rng), init_linear<T>(cfg.d, cfg.d, rng),
                    init_linear<T>(cfg.d, cfg.d, rng), init_linear<T>(cfg.d, cfg.d, rng)};
    dlayer.ln2 = init_layer_norm<T>(cfg.d);
    dlayer.ff1 = init_linear<T>(cfg.d, 4 * cfg.d, rng);
    dlayer.ff2 = init_linear<T>(4 * cfg.d, cfg.d, rng);
    dlayer.ln3 = init_layer_norm<T>(cfg.d);
    p.decoder.push_back(std::move(dlayer));
  }
  for (std::size_t l = 0; l < cfg.decoder_layers; ++l) {
    const std::size_t out = (l + 1 == cfg.decoder_layers) ? cfg.bins.count : cfg.d;
    p.decoder_mlp.push_back(init_linear<T>(cfg.d, out, rng));
  }
  for (std::size_t l = 0; l < cfg.si_layers; ++l) {
    const std::size_t in = (l == 0) ? 2 * cfg.d : cfg.d;
    const std::size_t out = (l + 1 == cfg.si_layers) ? cfg.si_outputs() : cfg.d;
    p.si_head.push_back(init_linear<T>(in, out, rng));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Parameter enumeration. Names are stable and used by the checkpoint format.

template <typename T>
using ParamVisitor = std::function<void(const std::string&, ag::Tensor<T>&)>;

template <typename T>
void visit_embedder(EmbedderP<T>& e, const std::string& prefix, const ParamVisitor<T>& fn) {
  fn(prefix + "/input.w", e.input.w);
  fn(prefix + "/input.b", e.input.b);
  for (std::size_t l = 0; l < e.blocks.size(); ++l) {
    const std::string b = prefix + "/block" + std::to_string(l);
    fn(b + "/dw", e.blocks[l].dw);
    fn(b + "/pw.w", e.blocks[l].pw.w);
    fn(b + "/pw.b", e.blocks[l].pw.b);
    fn(b + "/ln.g", e.blocks[l].ln.gamma);
    fn(b + "/ln.b", e.blocks[l].ln.beta);
  }
}

template <typename T>
void visit_attention(AttentionP<T>& a, const std::string& prefix, const ParamVisitor<T>& fn) {
  fn(prefix + "/q.w", a.q.w);
  fn(prefix + "/q.b", a.q.b);
  fn(prefix + "/k.w", a.k.w);
  fn(prefix + "/k.b", a.k.b);
  fn(prefix + "/v.w", a.v.w);
  fn(prefix + "/v.b", a.v.b);
  fn(prefix + "/o.w", a.o.w);
  fn(prefix + "/o.b", a.o.b);
}

// Main-stream parameters: embedder, pooling query, predictor, SI head.
template <typename T>
void visit_main_params(ModelParamsT<T>& p, const ParamVisitor<T>& fn) {
  visit_embedder(p.embedder, "embedder", fn);
  fn("pool/query", p.query);
  for (std::size_t l = 0; l < p.encoder.size(); ++l) {
    const std::string pre = "encoder" + std::to_string(l);
    auto& e = p.encoder[l];
    visit_attention(e.attn, pre + "/attn", fn);
    fn(pre + "/ln1.g", e.ln1.gamma);
    fn(pre + "/ln1.b", e.ln1.beta);
    fn(pre + "/ff1.w", e.ff1.w);
    fn(pre + "/ff1.b", e.ff1.b);
    fn(pre + "/ff2.w", e.ff2.w);
    fn(pre + "/ff2.b", e.ff2.b);
    fn(pre + "/ln2.g", e.ln2.gamma);
    fn(pre + "/ln2.b", e.ln2.beta);
  }
  for (std::size_t l = 0; l < p.decoder.size(); ++l) {
    const std::string pre = "decoder" + std::to_string(l);
    auto& dlayer = p.decoder[l];
    fn(pre + "/self_v.w", dlayer.self_v.w);
    fn(pre + "/self_v.b", dlayer.self_v.b);
    fn(pre + "/self_o.w", dlayer.self_o.w);
    fn(pre + "/self_o.b", dlayer.self_o.b);
    fn(pre + "/ln1.g", dlayer.ln1.gamma);
    fn(pre + "/ln1.b", dlayer.ln1.beta);
    visit_attention(dlayer.cross, pre + "/cross", fn);
    fn(pre + "/ln2.g", dlayer.ln2.gamma);
    fn(pre + "/ln2.b", dlayer.ln2.beta);
    fn(pre + "/ff1.w", dlayer.ff1.w);
    fn(pre + "/ff1.b", dlayer.ff1.b);
    fn(pre + "/ff2.w", dlayer.ff2.w);
    fn(pre + "/ff2.b", dlayer.ff2.b);
    fn(pre + "/ln3.g", dlayer.ln3.gamma);
    fn(pre + "/ln3.b", dlayer.ln3.beta);
  }
  for (std::size_t l = 0; l < p.si_head.size(); ++l) {
    const std::string pre = "si" + std::to_string(l);
    fn(pre + ".w", p.si_head[l].w);
    fn(pre + ".b", p.si_head[l].b);
  }
}

// Decoder-stream parameters: the binned decoder MLP only.
template <typename T>
void visit_decoder_params(ModelParamsT<T>& p, const ParamVisitor<T>& fn) {
  for (std::size_t l = 0; l < p.decoder_mlp.size(); ++l) {
    const std::string pre = "decoder_mlp" + std::to_string(l);
    fn(pre + ".w", p.decoder_mlp[l].w);
    fn(pre + ".b", p.decoder_mlp[l].b);
  }
}

template <typename T>
void visit_all_params(ModelParamsT<T>& p, const ParamVisitor<T>& fn) {
  visit_main_params(p, fn);
  visit_decoder_params(p, fn);
  visit_embedder(p.ema, "ema", fn);
}

template <typename T>
std::vector<ag::Tensor<T>> main_params(ModelParamsT<T>& p) {
  std::vector<ag::Tensor<T>> out;
  visit_main_params<T>(p, [&](const std::string&, ag::Tensor<T>& t) { out.push_back(t); });
  return out;
}

template <typename T>
std::vector<ag::Tensor<T>> decoder_params(ModelParamsT<T>& p) {
  std::vector<ag::Tensor<T>> out;
  visit_decoder_params<T>(p, [&](const std::string&, ag::Tensor<T>& t) { out.push_back(t); });
  return out;
}

// Online/shadow tensor pairs for the EMA update, in matching order.
template <typename T>
std::vector<std::pair<ag::Tensor<T>, ag::Tensor<T>>> ema_pairs(ModelParamsT<T>& p) {
  std::vector<ag::Tensor<T>> online, shadow;
  visit_embedder<T>(p.embedder, "e", [&](const std::string&, ag::Tensor<T>& t) { online.push_back(t); });
  visit_embedder<T>(p.ema, "e", [&](const std::string&, ag::Tensor<T>& t) { shadow.push_back(t); });
  std::vector<std::pair<ag::Tensor<T>, ag::Tensor<T>>> out;
  for (std::size_t i = 0; i < online.size(); ++i) out.emplace_back(online[i], shadow[i]);
  return out;
}

// shadow <- m * shadow + (1 - m) * online, elementwise.
template <typename T>
void ema_update(ModelParamsT<T>& p, double m) {
  if (m < 0.0 || m > 1.0) throw std::invalid_argument("EMA decay must lie in [0, 1]");
  for (auto& [online, shadow] : ema_pairs(p)) {
    auto& s = shadow.data();
    const auto& o = online.data();
    for (std::size_t i = 0; i < s.size(); ++i)
      s[i] = static_cast<T>(m * double(s[i]) + (1.0 - m) * double(o[i]));
  }
}

// ---------------------------------------------------------------------------
// Feature construction (plain data, no gradients).

template <typename T>
ag::Tensor<T> features_tensor(const std::vector<double>& v, std::size_t n, std::size_t s) {
  std::vector<T> data(v.begin(), v.end());
  return ag::Tensor<T>::from({n, s, ContextBatch::kFeatures}, std::move(data));
}

template <typename T>
ag::Tensor<T> context_features(const ContextBatch& b) {
  return features_tensor<T>(b.context, b.n_ctx, b.seq_len);
}

// Prompt features for the held-out series: full time axis, history values
// observed, horizon steps masked (value 0, observed-flag 0).
template <typename T>
ag::Tensor<T> prompt_features(const ContextBatch& b) {
  const std::size_t S = b.seq_len, H = b.horizon, hist = S - H, F = ContextBatch::kFeatures;
  std::vector<T> data(b.n_held * S * F, T(0));
  for (std::size_t i = 0; i < b.n_held; ++i) {
    for (std::size_t s = 0; s < S; ++s) {
      T* f = data.data() + (i * S + s) * F;
      f[0] = static_cast<T>(b.tau[s]);
      if (s < hist) {
        f[1] = static_cast<T>(b.held_history[(i * hist + s) * F + 1]);
        f[2] = T(1);
      }  // horizon: value 0, observed 0
    }
  }
  return ag::Tensor<T>::from({b.n_held, S, F}, std::move(data));
}

template <typename T>
ag::Tensor<T> full_features(const ContextBatch& b) {
  return features_tensor<T>(b.held_full, b.n_held, b.seq_len);
}

// ---------------------------------------------------------------------------
// Forward blocks.

template <typename T>
ag::Tensor<T> embed(const ModelConfig& cfg, const EmbedderP<T>& e, const ag::Tensor<T>& feats) {
  ag::check(feats.ndim() == 3 && feats.dim(2) == ContextBatch::kFeatures,
            "embed expects (B, S, 3) features, got " + ag::shape_str(feats.shape()));
  ag::Tensor<T> h = ag::linear(feats, e.input.w, e.input.b);
  for (std::size_t l = 0; l < e.blocks.size(); ++l) {
    const auto& blk = e.blocks[l];
    ag::Tensor<T> u = ag::causal_dconv1d(h, blk.dw, cfg.dilations[l]);
    u = ag::gelu(ag::linear(u, blk.pw.w, blk.pw.b));
    h = ag::layer_norm(h + u, blk.ln.gamma, blk.ln.beta);
  }
  return h;
}

// Single-query attention over the sequence axis; (N, S, d) -> (N, d).
template <typename T>
ag::Tensor<T> pool_context(const ModelConfig& cfg, const ag::Tensor<T>& D,
                           const ag::Tensor<T>& query) {
  const std::size_t N = D.dim(0), S = D.dim(1), d = D.dim(2);
  const T inv_sqrt_d = static_cast<T>(1.0 / std::sqrt(double(d)));
  ag::Tensor<T> qcol = ag::reshape(query, {d, std::size_t(1)});
  ag::Tensor<T> scores = ag::scale(ag::reshape(ag::matmul(D, qcol), {N, S}), inv_sqrt_d);
  ag::Tensor<T> w = ag::reshape(ag::softmax(scores), {N, S, std::size_t(1)});
  (void)cfg;
  return ag::reshape(ag::sum_axis(w * D, 1), {N, d});
}

// Multi-head attention: queries from x_q (Tq, d), keys/values from x_kv (Tk, d).
template <typename T>
ag::Tensor<T> mha(const ag::Tensor<T>& x_q, const ag::Tensor<T>& x_kv, const AttentionP<T>& p,
                  std::size_t heads) {
  const std::size_t Tq = x_q.dim(0), Tk = x_kv.dim(0), d = x_q.dim(1);
  const std::size_t dh = d / heads;
  auto split = [&](const ag::Tensor<T>& x, std::size_t rows) {
    return ag::permute(ag::reshape(x, {rows, heads, dh}), {1, 0, 2});  // (h, rows, dh)
  };
  ag::Tensor<T> Q = split(ag::linear(x_q, p.q.w, p.q.b), Tq);
  ag::Tensor<T> K = split(ag::linear(x_kv, p.k.w, p.k.b), Tk);
  ag::Tensor<T> V = split(ag::linear(x_kv, p.v.w, p.v.b), Tk);
  ag::Tensor<T> scores =
      ag::scale(ag::matmul(Q, ag::transpose_last2(K)), static_cast<T>(1.0 / std::sqrt(double(dh))));
  ag::Tensor<T> ctx = ag::matmul(ag::softmax(scores), V);  // (h, Tq, dh)
  ag::Tensor<T> merged = ag::reshape(ag::permute(ctx, {1, 0, 2}), {Tq, d});
  return ag::linear(merged, p.o.w, p.o.b);
}

// Predictor: encoder self-attention over the N pooled context vectors (no
// example-position encoding), decoder with diagonal-only self-attention and
// full cross-attention; returns the H horizon latents per held-out series.
template <typename T>
ag::Tensor<T> predict(const ModelConfig& cfg, const ModelParamsT<T>& p, const ag::Tensor<T>& zbar,
                      const ag::Tensor<T>& eta, std::size_t horizon) {
  const std::size_t Nh = zbar.dim(0), S = zbar.dim(1), d = zbar.dim(2);
  ag::check(horizon <= S, "horizon exceeds sequence length in predict");

  ag::Tensor<T> enc = eta;  // (N, d)
  for (const auto& layer : p.encoder) {
    enc = ag::layer_norm(enc + mha(enc, enc, layer.attn, cfg.heads), layer.ln1.gamma,
                         layer.ln1.beta);
    ag::Tensor<T> ff = ag::linear(ag::gelu(ag::linear(enc, layer.ff1.w, layer.ff1.b)), layer.ff2.w,
                                  layer.ff2.b);
    enc = ag::layer_norm(enc + ff, layer.ln2.gamma, layer.ln2.beta);
  }

  ag::Tensor<T> tok = ag::reshape(zbar, {Nh * S, d});
  for (const auto& layer : p.decoder) {
    // Diagonal-only self-attention: each token attends only to itself, so the
    // softmax weight is 1 and the block is a per-token value+output map.
    ag::Tensor<T> self = ag::linear(ag::linear(tok, layer.self_v.w, layer.self_v.b),
                                    layer.self_o.w, layer.self_o.b);
    tok = ag::layer_norm(tok + self, layer.ln1.gamma, layer.ln1.beta);
    tok = ag::layer_norm(tok + mha(tok, enc, layer.cross, cfg.heads), layer.ln2.gamma,
                         layer.ln2.beta);
    ag::Tensor<T> ff = ag::linear(ag::gelu(ag::linear(tok, layer.ff1.w, layer.ff1.b)), layer.ff2.w,
                                  layer.ff2.b);
    tok = ag::layer_norm(tok + ff, layer.ln3.gamma, layer.ln3.beta);
  }
  return ag::slice(ag::reshape(tok, {Nh, S, d}), 1, S - horizon, horizon);
}

// EMA embedder on the fully observed series, last H steps, stop-gradient.
template <typename T>
ag::Tensor<T> embed_target(const ModelConfig& cfg, const ModelParamsT<T>& p,
                           const ag::Tensor<T>& full_feats, std::size_t horizon) {
  const std::size_t S = full_feats.dim(1);
  ag::Tensor<T> y = embed(cfg, p.ema, full_feats);
  return ag::stop_gradient(ag::slice(y, 1, S - horizon, horizon));
}

// Binned decoder on StopGrad(latents): 3-layer MLP to bin logits.
template <typename T>
ag::Tensor<T> decode(const ModelConfig& cfg, const ModelParamsT<T>& p,
                     const ag::Tensor<T>& latents) {
  ag::Tensor<T> h = ag::stop_gradient(latents);
  for (std::size_t l = 0; l < p.decoder_mlp.size(); ++l) {
    h = ag::linear(h, p.decoder_mlp[l].w, p.decoder_mlp[l].b);
    if (l + 1 < p.decoder_mlp.size()) h = ag::gelu(h);
  }
  (void)cfg;
  return h;  // (Nh, H, bins)
}

// SI head: pool the concatenated (history embedding ‖ predicted latents)
// with the learned query, append the example-mean of the pooled context, and
// regress through the head layers.
template <typename T>
ag::Tensor<T> si_forward(const ModelConfig& cfg, const ModelParamsT<T>& p,
                         const ag::Tensor<T>& yhat, const ag::Tensor<T>& xbar,
                         const ag::Tensor<T>& eta) {
  const std::size_t Nh = yhat.dim(0), d = yhat.dim(2), N = eta.dim(0);
  ag::Tensor<T> joined = ag::concat<T>({xbar, yhat}, 1);  // (Nh, hist + H, d)
  ag::Tensor<T> pooled = pool_context(cfg, joined, p.query);  // (Nh, d)
  ag::Tensor<T> eta_mean = ag::reshape(ag::mean_axis(eta, 0), {std::size_t(1), d});
  (void)N;
  // Broadcast the context mean to every held-out row before concatenation.
  ag::Tensor<T> eta_rows = ag::Tensor<T>({Nh, d}, T(0)) + eta_mean;
  ag::Tensor<T> h = ag::concat<T>({pooled, eta_rows}, 1);  // (Nh, 2d)
  for (std::size_t l = 0; l < p.si_head.size(); ++l) {
    h = ag::linear(h, p.si_head[l].w, p.si_head[l].b);
    if (l + 1 < p.si_head.size()) h = ag::gelu(h);
  }
  return h;  // (Nh, si_outputs)
}

// ---------------------------------------------------------------------------
// Full forward pass and losses.

template <typename T>
struct ForwardOutputs {
  ag::Tensor<T> context_emb;  // D̄  (N, S, d)
  ag::Tensor<T> eta;          // η̄  (N, d)
  ag::Tensor<T> prompt;       // z̄  (Nh, S, d)
  ag::Tensor<T> history_emb;  // x̄  (Nh, S - H, d)
  ag::Tensor<T> yhat;         // ŷ̄ (Nh, H, d)
  ag::Tensor<T> ytarget;      // ȳ  (Nh, H, d), stop-gradient
  ag::Tensor<T> logits;       // (Nh, H, bins)
  ag::Tensor<T> si_pred;      // (Nh, si_outputs); empty for real-data batches
};

template <typename T>
ForwardOutputs<T> forward(const ModelConfig& cfg, const ModelParamsT<T>& p,
                          const ContextBatch& batch, bool with_target = true) {
  ForwardOutputs<T> out;
  out.context_emb = embed(cfg, p.embedder, context_features<T>(batch));
  out.eta = pool_context(cfg, out.context_emb, p.query);
  out.prompt = embed(cfg, p.embedder, prompt_features<T>(batch));
  out.history_emb = ag::slice(out.prompt, 1, 0, batch.history_len());
  out.yhat = predict(cfg, p, out.prompt, out.eta, batch.horizon);
  if (with_target) out.ytarget = embed_target(cfg, p, full_features<T>(batch), batch.horizon);
  out.logits = decode(cfg, p, out.yhat);
  if (!batch.psi_targets.empty())
    out.si_pred = si_forward(cfg, p, out.yhat, out.history_emb, out.eta);
  return out;
}

// Cross-entropy with label smoothing against integer bin targets.
// logits: (rows, bins) after flattening; targets: one bin index per row.
template <typename T>
ag::Tensor<T> smoothed_cross_entropy(const ag::Tensor<T>& logits,
                                     const std::vector<std::size_t>& targets, double smoothing) {
  const std::size_t bins = logits.dim(logits.ndim() - 1);
  const std::size_t rows = logits.size() / bins;
  ag::check(targets.size() == rows, "cross-entropy target count does not match logit rows");
  std::vector<T> q(rows * bins, static_cast<T>(smoothing / double(bins)));
  for (std::size_t r = 0; r < rows; ++r) {
    ag::check(targets[r] < bins, "cross-entropy target bin out of range");
    q[r * bins + targets[r]] += static_cast<T>(1.0 - smoothing);
  }
  ag::Tensor<T> weights = ag::Tensor<T>::from({rows, bins}, std::move(q));
  ag::Tensor<T> logp = ag::log_softmax(ag::reshape(logits, {rows, bins}));
  return ag::scale(ag::mean_all(ag::sum_axis(weights * logp, 1)), T(-1));
}

template <typename T>
std::vector<std::size_t> target_bins(const ContextBatch& batch, const pipeline::BinSpec& bins) {
  std::vector<std::size_t> out(batch.held_target.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = bins.index(batch.held_target[i]);
  return out;
}

// Returns (main loss, decoder loss). The two scalars reach disjoint
// parameter sets through the decoder's stop-gradient.
template <typename T>
std::pair<ag::Tensor<T>, ag::Tensor<T>> total_loss(const ModelConfig& cfg,
                                                   const ForwardOutputs<T>& out,
                                                   const ContextBatch& batch) {
  ag::check(out.yhat.shape() == out.ytarget.shape(),
            "latent prediction and target shapes differ");
  ag::Tensor<T> diff = out.yhat - out.ytarget;
  ag::Tensor<T> main = ag::scale(ag::mean_all(diff * diff), static_cast<T>(cfg.lambda_latent));
  if (!batch.psi_targets.empty() && cfg.lambda_si > 0.0) {
    const std::size_t n_si = out.si_pred.dim(1);
    std::vector<T> psi(batch.psi_targets.begin(), batch.psi_targets.end());
    ag::Tensor<T> psi_t = ag::Tensor<T>::from({batch.n_held, n_si}, std::move(psi));
    ag::Tensor<T> sdiff = out.si_pred - psi_t;
    main = main + ag::scale(ag::mean_all(sdiff * sdiff), static_cast<T>(cfg.lambda_si));
  }
  ag::Tensor<T> dec =
      smoothed_cross_entropy(out.logits, target_bins<T>(batch, cfg.bins), cfg.label_smoothing);
  return {main, dec};
}

}  // namespace latcast::model
