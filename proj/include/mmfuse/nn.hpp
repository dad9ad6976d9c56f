#pragma once

// Small trainable encoders (dense stacks for feature inputs, an embedding
// table with masked mean pooling for token sequences), a shared trunk feeding
// four task heads, reverse-mode gradients computed layer by layer, and Adam
// with global-norm clipping plus exponential learning-rate decay.
//
// A model instance is mutated only by its owning trainer; forward evaluation
// of a const model is thread-safe. All arithmetic is sequential 64-bit, so a
// fixed seed reproduces parameters bit-for-bit on a given platform.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mmfuse/errors.hpp"
#include "mmfuse/fusion.hpp"
#include "mmfuse/losses.hpp"
#include "mmfuse/numerics.hpp"

namespace mmfuse {

// Row-major dense tensor (rank 1 or 2 here).
struct Tensor {
  std::vector<std::size_t> dims;
  std::vector<double> data;

  static Tensor zeros(std::vector<std::size_t> d) {
    Tensor t;
    std::size_t n = 1;
    for (auto x : d) n *= x;
    t.dims = std::move(d);
    t.data.assign(n, 0.0);
    return t;
  }
  std::size_t size() const { return data.size(); }
  std::size_t rows() const { return dims.empty() ? 0 : dims[0]; }
  std::size_t cols() const { return dims.size() < 2 ? 1 : dims[1]; }
  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
};

enum class Activation { relu, tanh };

inline std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }
inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation: " + s);
}

struct EncoderSpec {
  enum class Kind { dense, embedding };
  Kind kind = Kind::dense;
  std::size_t input_dim = 0;  // dense: feature dim; embedding: vocabulary size
  std::vector<std::size_t> hidden_dims;
  std::size_t output_dim = 0;
  Activation activation = Activation::relu;
  std::size_t max_seq_len = 64;  // embedding kind only
};

inline void validate_encoder_spec(const EncoderSpec& spec) {
  if (spec.output_dim == 0) throw ConfigError("encoder: output_dim must be >= 1");
  if (spec.input_dim == 0) throw ConfigError("encoder: input_dim/vocab_size must be >= 1");
  if (spec.kind == EncoderSpec::Kind::embedding && spec.max_seq_len == 0)
    throw ConfigError("encoder: embedding kind requires max_seq_len >= 1");
}

// Dense affine layer; hidden layers apply the configured activation, the
// final layer of every stack is linear.
struct DenseLayer {
  Tensor W;  // out x in
  Tensor b;  // out
};

struct Encoder {
  EncoderSpec spec;
  Tensor embedding;               // embedding kind: vocab x emb width
  std::vector<DenseLayer> layers; // dense stack (embedding kind: one layer)

  std::size_t embed_width() const {
    return spec.hidden_dims.empty() ? spec.output_dim : spec.hidden_dims[0];
  }
};

// Fixed-length token sequence plus its validity mask.
struct TokenSeq {
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> mask;  // 1 = real token, 0 = padding
};

// Raw per-sample inputs as fed to the encoders.
struct SampleInput {
  std::optional<RealVec> slide;
  std::optional<std::array<RealVec, 3>> patches;
  std::optional<TokenSeq> text;
  std::optional<RealVec> structured;
};

struct TaskSpec {
  std::string name;
  std::size_t n_classes = 2;
};

struct ModelConfig {
  bool use_slide = true;
  bool use_patch = true;
  bool use_text = true;
  bool use_structured = true;
  EncoderSpec slide_encoder;
  EncoderSpec patch_encoder;       // one encoder shared by the three patches
  EncoderSpec text_encoder;
  EncoderSpec structured_encoder;
  FusionConfig fusion;
  std::vector<TaskSpec> tasks;
  std::uint64_t init_seed = 0;
};

struct SharedModel {
  ModelConfig config;
  std::optional<Encoder> slide_enc;
  std::optional<Encoder> patch_enc;
  std::optional<Encoder> text_enc;
  std::optional<Encoder> structured_enc;
  SketchSet sketches;
  std::vector<DenseLayer> heads;  // one linear head per task

  FusionDims fusion_dims() const {
    FusionDims d;
    if (slide_enc) d.slide = slide_enc->spec.output_dim;
    if (patch_enc) d.patch = patch_enc->spec.output_dim;
    if (text_enc) d.text = text_enc->spec.output_dim;
    if (structured_enc) d.structured = structured_enc->spec.output_dim;
    return d;
  }
  std::size_t shared_dim() const { return fusion_dims().shared_dim(config.fusion); }
};

// ---------------------------------------------------------------------------
// Parameter enumeration. Checkpoints, Adam state and gradients all rely on
// this fixed walk order: slide encoder, patch encoder, text encoder,
// structured encoder (embedding table first, then dense layers), then one
// (W, b) pair per task head.
// ---------------------------------------------------------------------------
struct TensorRef {
  std::string name;
  Tensor* tensor;
};

inline void collect_encoder_refs(const std::string& prefix, Encoder& e,
                                 std::vector<TensorRef>& out) {
  if (e.spec.kind == EncoderSpec::Kind::embedding)
    out.push_back({prefix + ".embedding", &e.embedding});
  for (std::size_t i = 0; i < e.layers.size(); ++i) {
    out.push_back({prefix + ".W" + std::to_string(i), &e.layers[i].W});
    out.push_back({prefix + ".b" + std::to_string(i), &e.layers[i].b});
  }
}

inline std::vector<TensorRef> param_refs(SharedModel& m) {
  std::vector<TensorRef> out;
  if (m.slide_enc) collect_encoder_refs("slide", *m.slide_enc, out);
  if (m.patch_enc) collect_encoder_refs("patch", *m.patch_enc, out);
  if (m.text_enc) collect_encoder_refs("text", *m.text_enc, out);
  if (m.structured_enc) collect_encoder_refs("structured", *m.structured_enc, out);
  for (std::size_t t = 0; t < m.heads.size(); ++t) {
    out.push_back({"head." + m.config.tasks[t].name + ".W", &m.heads[t].W});
    out.push_back({"head." + m.config.tasks[t].name + ".b", &m.heads[t].b});
  }
  return out;
}

inline std::size_t param_count(SharedModel& m) {
  std::size_t n = 0;
  for (auto& r : param_refs(m)) n += r.tensor->size();
  return n;
}

// Gradient tree: one tensor per parameter tensor, in walk order.
struct Gradients {
  std::vector<Tensor> tensors;

  static Gradients zeros_like(SharedModel& m) {
    Gradients g;
    for (auto& r : param_refs(m)) g.tensors.push_back(Tensor::zeros(r.tensor->dims));
    return g;
  }
};

// ---------------------------------------------------------------------------
// Initialization: dense weights ~ U(-a, a) with a = sqrt(6 / (fan_in +
// fan_out)), biases zero, embedding table ~ N(0, 0.02^2). Draw order is the
// parameter walk order.
// ---------------------------------------------------------------------------
namespace detail {

inline DenseLayer make_dense_layer(std::size_t in, std::size_t out, RngStream& rng) {
  DenseLayer l;
  l.W = Tensor::zeros({out, in});
  l.b = Tensor::zeros({out});
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  for (auto& w : l.W.data) w = a * (2.0 * rng.next_unit() - 1.0);
  return l;
}

inline Encoder make_encoder(const EncoderSpec& spec, RngStream& rng) {
  validate_encoder_spec(spec);
  Encoder e;
  e.spec = spec;
  if (spec.kind == EncoderSpec::Kind::embedding) {
    const std::size_t width = e.embed_width();
    e.embedding = Tensor::zeros({spec.input_dim, width});
    for (auto& w : e.embedding.data) w = 0.02 * rng.next_gaussian();
    e.layers.push_back(make_dense_layer(width, spec.output_dim, rng));
    return e;
  }
  std::size_t in = spec.input_dim;
  for (std::size_t h : spec.hidden_dims) {
    e.layers.push_back(make_dense_layer(in, h, rng));
    in = h;
  }
  e.layers.push_back(make_dense_layer(in, spec.output_dim, rng));
  return e;
}

}  // namespace detail

inline SharedModel make_model(const ModelConfig& cfg) {
  if (cfg.tasks.empty()) throw ConfigError("model: no tasks configured");
  if (!cfg.use_slide && !cfg.use_text && !cfg.use_structured)
    throw ConfigError("model: no modality configured");
  if (cfg.use_patch && !cfg.use_slide)
    throw ConfigError("model: patch input requires the slide input");
  validate_fusion_config(cfg.fusion);

  SharedModel m;
  m.config = cfg;
  RngStream rng(cfg.init_seed, 101);
  if (cfg.use_slide) m.slide_enc = detail::make_encoder(cfg.slide_encoder, rng);
  if (cfg.use_patch) m.patch_enc = detail::make_encoder(cfg.patch_encoder, rng);
  if (cfg.use_text) m.text_enc = detail::make_encoder(cfg.text_encoder, rng);
  if (cfg.use_structured) m.structured_enc = detail::make_encoder(cfg.structured_encoder, rng);
  m.sketches = make_sketch_set(cfg.fusion, m.fusion_dims());

  const std::size_t shared = m.shared_dim();
  if (shared == 0) throw ConfigError("model: shared representation has zero width");
  for (const auto& task : cfg.tasks) {
    if (task.n_classes < 2) throw ConfigError("model: task " + task.name + " needs >= 2 classes");
    m.heads.push_back(detail::make_dense_layer(shared, task.n_classes, rng));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------
namespace detail {

inline double activate(double z, Activation a) {
  return a == Activation::relu ? (z > 0.0 ? z : 0.0) : std::tanh(z);
}
inline double activate_grad(double z, double h, Activation a) {
  return a == Activation::relu ? (z > 0.0 ? 1.0 : 0.0) : 1.0 - h * h;
}

struct DenseCache {
  std::vector<RealVec> inputs;       // input to each layer
  std::vector<std::vector<double>> pre;  // pre-activation per layer
};

inline RealVec dense_forward(const Encoder& e, const RealVec& x, DenseCache* cache) {
  if (x.size() != e.layers.front().W.cols())
    throw DimensionError("encoder: input dim " + std::to_string(x.size()) + " != expected " +
                         std::to_string(e.layers.front().W.cols()));
  RealVec h = x;
  for (std::size_t li = 0; li < e.layers.size(); ++li) {
    const DenseLayer& l = e.layers[li];
    const bool last = li + 1 == e.layers.size();
    std::vector<double> z(l.W.rows());
    for (std::size_t r = 0; r < l.W.rows(); ++r) {
      double acc = l.b.data[r];
      for (std::size_t c = 0; c < l.W.cols(); ++c) acc += l.W.at(r, c) * h[c];
      z[r] = acc;
    }
    if (cache) {
      cache->inputs.push_back(h);
      cache->pre.push_back(z);
    }
    std::vector<double> out(z.size());
    for (std::size_t r = 0; r < z.size(); ++r)
      out[r] = last ? z[r] : activate(z[r], e.spec.activation);
    h = RealVec(std::move(out));
  }
  return h;
}

struct EmbedCache {
  RealVec pooled;
  std::size_t n_real = 0;
  DenseCache dense;
};

inline RealVec embed_forward(const Encoder& e, const TokenSeq& seq, EmbedCache* cache) {
  if (seq.ids.size() != seq.mask.size())
    throw DimensionError("text encoder: ids/mask length mismatch");
  const std::size_t width = e.embed_width();
  std::vector<double> pooled(width, 0.0);
  std::size_t n_real = 0;
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    if (!seq.mask[i]) continue;
    const auto id = seq.ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= e.embedding.rows())
      throw DataError("text encoder: token id out of range: " + std::to_string(id));
    ++n_real;
    for (std::size_t c = 0; c < width; ++c)
      pooled[c] += e.embedding.at(static_cast<std::size_t>(id), c);
  }
  if (n_real > 0)
    for (auto& v : pooled) v /= static_cast<double>(n_real);
  RealVec pooled_vec(std::move(pooled));
  if (cache) {
    cache->pooled = pooled_vec;
    cache->n_real = n_real;
  }
  return dense_forward(e, pooled_vec, cache ? &cache->dense : nullptr);
}

struct SampleCache {
  DenseCache slide;
  std::array<DenseCache, 3> patches;
  EmbedCache text;
  DenseCache structured;
  ModalityBundle encoded;
  std::vector<RealVec> probs;  // per task
};

inline ModalityBundle encode_sample(const SharedModel& m, const SampleInput& in,
                                    SampleCache* cache) {
  ModalityBundle b;
  if (m.slide_enc) {
    if (!in.slide) throw DimensionError("forward: sample lacks the slide modality");
    b.slide = dense_forward(*m.slide_enc, *in.slide, cache ? &cache->slide : nullptr);
  }
  if (m.patch_enc) {
    if (!in.patches) throw DimensionError("forward: sample lacks the patch modality");
    std::array<RealVec, 3> enc;
    for (int k = 0; k < 3; ++k)
      enc[k] = dense_forward(*m.patch_enc, (*in.patches)[k],
                             cache ? &cache->patches[k] : nullptr);
    b.patches = std::move(enc);
  }
  if (m.text_enc) {
    if (!in.text) throw DimensionError("forward: sample lacks the text modality");
    b.text = embed_forward(*m.text_enc, *in.text, cache ? &cache->text : nullptr);
  }
  if (m.structured_enc) {
    if (!in.structured) throw DimensionError("forward: sample lacks the structured modality");
    b.structured =
        dense_forward(*m.structured_enc, *in.structured, cache ? &cache->structured : nullptr);
  }
  return b;
}

inline std::vector<RealVec> head_forward(const SharedModel& m, const RealVec& shared) {
  std::vector<RealVec> probs;
  probs.reserve(m.heads.size());
  for (const auto& head : m.heads) {
    std::vector<double> z(head.W.rows());
    for (std::size_t r = 0; r < head.W.rows(); ++r) {
      double acc = head.b.data[r];
      for (std::size_t c = 0; c < head.W.cols(); ++c) acc += head.W.at(r, c) * shared[c];
      z[r] = acc;
    }
    probs.push_back(softmax(RealVec(std::move(z))));
  }
  return probs;
}

}  // namespace detail

// Class-probability matrices, one per task: result[t][i] is the probability
// vector of sample i under task t.
inline std::vector<std::vector<RealVec>> forward(const SharedModel& m,
                                                 const std::vector<SampleInput>& batch) {
  if (batch.empty()) throw DimensionError("forward: empty batch");
  std::vector<std::vector<RealVec>> out(m.heads.size());
  for (const auto& sample : batch) {
    auto bundle = detail::encode_sample(m, sample, nullptr);
    auto shared = fuse_all(bundle, m.config.fusion, m.sketches);
    auto probs = detail::head_forward(m, shared);
    for (std::size_t t = 0; t < probs.size(); ++t) out[t].push_back(std::move(probs[t]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Backward: gradients of the combined objective with respect to every
// parameter. Two passes over the batch: the first collects probabilities
// (the multi-objective weights need batch residual sums), the second
// accumulates gradients sample by sample.
// ---------------------------------------------------------------------------
namespace detail {

inline void dense_backward(const Encoder& e, const DenseCache& cache, const RealVec& g_out,
                           Tensor* grads_begin) {
  // grads_begin points at this encoder's W0 gradient; layout is W,b per layer
  RealVec g = g_out;
  for (std::size_t li = e.layers.size(); li-- > 0;) {
    const DenseLayer& l = e.layers[li];
    const bool last = li + 1 == e.layers.size();
    std::vector<double> dz(l.W.rows());
    for (std::size_t r = 0; r < l.W.rows(); ++r) {
      const double z = cache.pre[li][r];
      dz[r] = last ? g[r] : g[r] * activate_grad(z, activate(z, e.spec.activation),
                                                 e.spec.activation);
    }
    Tensor& gW = grads_begin[2 * li];
    Tensor& gb = grads_begin[2 * li + 1];
    const RealVec& in = cache.inputs[li];
    for (std::size_t r = 0; r < l.W.rows(); ++r) {
      gb.data[r] += dz[r];
      for (std::size_t c = 0; c < l.W.cols(); ++c) gW.at(r, c) += dz[r] * in[c];
    }
    std::vector<double> g_prev(l.W.cols(), 0.0);
    for (std::size_t r = 0; r < l.W.rows(); ++r)
      for (std::size_t c = 0; c < l.W.cols(); ++c) g_prev[c] += l.W.at(r, c) * dz[r];
    g = RealVec(std::move(g_prev));
  }
}

inline void embed_backward(const Encoder& e, const EmbedCache& cache, const TokenSeq& seq,
                           const RealVec& g_out, Tensor* grads_begin) {
  // layout: embedding table gradient first, then the dense layer pair
  RealVec g = g_out;
  {
    const DenseLayer& l = e.layers[0];
    std::vector<double> dz(g.begin(), g.end());  // final layer is linear
    Tensor& gW = grads_begin[1];
    Tensor& gb = grads_begin[2];
    for (std::size_t r = 0; r < l.W.rows(); ++r) {
      gb.data[r] += dz[r];
      for (std::size_t c = 0; c < l.W.cols(); ++c) gW.at(r, c) += dz[r] * cache.pooled[c];
    }
    std::vector<double> g_pooled(l.W.cols(), 0.0);
    for (std::size_t r = 0; r < l.W.rows(); ++r)
      for (std::size_t c = 0; c < l.W.cols(); ++c) g_pooled[c] += l.W.at(r, c) * dz[r];
    g = RealVec(std::move(g_pooled));
  }
  if (cache.n_real == 0) return;
  Tensor& gEmb = grads_begin[0];
  const double inv = 1.0 / static_cast<double>(cache.n_real);
  const std::size_t width = e.embed_width();
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    if (!seq.mask[i]) continue;
    const auto id = static_cast<std::size_t>(seq.ids[i]);
    for (std::size_t c = 0; c < width; ++c) gEmb.data[id * width + c] += g[c] * inv;
  }
}

}  // namespace detail

inline std::pair<LossBreakdown, Gradients> backward(
    SharedModel& m, const std::vector<SampleInput>& batch,
    const std::vector<std::vector<std::size_t>>& labels, const LossConfig& loss_cfg) {
  if (batch.empty()) throw DimensionError("backward: empty batch");
  if (labels.size() != m.heads.size())
    throw DimensionError("backward: labels must cover every task");
  const std::size_t n_tasks = m.heads.size();
  const std::size_t n = batch.size();

  // pass 1: forward with caches
  std::vector<detail::SampleCache> caches(n);
  std::vector<RealVec> shared_vecs(n);
  std::vector<std::vector<RealVec>> probs(n_tasks);
  for (std::size_t i = 0; i < n; ++i) {
    caches[i].encoded = detail::encode_sample(m, batch[i], &caches[i]);
    shared_vecs[i] = fuse_all(caches[i].encoded, m.config.fusion, m.sketches);
    caches[i].probs = detail::head_forward(m, shared_vecs[i]);
    for (std::size_t t = 0; t < n_tasks; ++t) probs[t].push_back(caches[i].probs[t]);
  }

  const LossBreakdown breakdown = combined_loss(probs, labels, loss_cfg);
  Gradients grads = Gradients::zeros_like(m);

  // locate gradient offsets per component in walk order
  std::size_t off = 0;
  std::size_t slide_off = 0, patch_off = 0, text_off = 0, structured_off = 0, head_off = 0;
  auto encoder_span = [](const Encoder& e) {
    return (e.spec.kind == EncoderSpec::Kind::embedding ? 1u : 0u) + 2 * e.layers.size();
  };
  if (m.slide_enc) { slide_off = off; off += encoder_span(*m.slide_enc); }
  if (m.patch_enc) { patch_off = off; off += encoder_span(*m.patch_enc); }
  if (m.text_enc) { text_off = off; off += encoder_span(*m.text_enc); }
  if (m.structured_enc) { structured_off = off; off += encoder_span(*m.structured_enc); }
  head_off = off;

  // pass 2: per-sample gradient accumulation
  for (std::size_t i = 0; i < n; ++i) {
    const RealVec& shared = shared_vecs[i];
    std::vector<double> g_shared(shared.size(), 0.0);
    for (std::size_t t = 0; t < n_tasks; ++t) {
      const RealVec& p = caches[i].probs[t];
      const std::size_t y = labels[t][i];
      const FocalConfig fc = loss_cfg.task_focal(t);
      const double alpha_i = per_sample_alpha(p, y, fc.alpha);
      const double dfocal_dp = focal_dloss_dp(p[y], fc.gamma, alpha_i);

      std::vector<double> dz(p.size(), 0.0);
      // focal term through the softmax jacobian at the true class
      for (std::size_t j = 0; j < p.size(); ++j)
        dz[j] += dfocal_dp * p[y] * ((j == y ? 1.0 : 0.0) - p[j]);
      // multi-objective term
      if (loss_cfg.include_multi) {
        const double denom = breakdown.residual_sq_sums[t] + loss_cfg.multi_epsilon;
        std::vector<double> w(p.size());
        double w_dot_p = 0.0;
        for (std::size_t c = 0; c < p.size(); ++c) {
          w[c] = 2.0 * (p[c] - (c == y ? 1.0 : 0.0)) / denom;
          w_dot_p += w[c] * p[c];
        }
        for (std::size_t j = 0; j < p.size(); ++j) dz[j] += p[j] * (w[j] - w_dot_p);
      }

      Tensor& gW = grads.tensors[head_off + 2 * t];
      Tensor& gb = grads.tensors[head_off + 2 * t + 1];
      const DenseLayer& head = m.heads[t];
      for (std::size_t r = 0; r < head.W.rows(); ++r) {
        gb.data[r] += dz[r];
        for (std::size_t c = 0; c < head.W.cols(); ++c) {
          gW.at(r, c) += dz[r] * shared[c];
          // accumulate into the shared-representation gradient
        }
      }
      for (std::size_t c = 0; c < head.W.cols(); ++c) {
        double acc = 0.0;
        for (std::size_t r = 0; r < head.W.rows(); ++r) acc += head.W.at(r, c) * dz[r];
        g_shared[c] += acc;
      }
    }

    auto bundle_grads = fuse_all_backward(caches[i].encoded, m.config.fusion, m.sketches,
                                          RealVec(std::move(g_shared)));
    if (m.slide_enc)
      detail::dense_backward(*m.slide_enc, caches[i].slide, *bundle_grads.slide,
                             &grads.tensors[slide_off]);
    if (m.patch_enc)
      for (int k = 0; k < 3; ++k)
        detail::dense_backward(*m.patch_enc, caches[i].patches[k], (*bundle_grads.patches)[k],
                               &grads.tensors[patch_off]);
    if (m.text_enc)
      detail::embed_backward(*m.text_enc, caches[i].text, *batch[i].text, *bundle_grads.text,
                             &grads.tensors[text_off]);
    if (m.structured_enc)
      detail::dense_backward(*m.structured_enc, caches[i].structured, *bundle_grads.structured,
                             &grads.tensors[structured_off]);
  }
  return {breakdown, std::move(grads)};
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------
struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 0.5;
  double lr0 = 1e-3;
  double decay = 0.9;
  double decay_every = 200.0;
};

// lr = lr0 * decay^(step / decay_every), continuous in the step.
inline double scheduled_lr(const OptimizerConfig& cfg, std::uint64_t step) {
  return cfg.lr0 * std::pow(cfg.decay, static_cast<double>(step) / cfg.decay_every);
}
inline double scheduled_lr(std::uint64_t step) { return scheduled_lr(OptimizerConfig{}, step); }

struct OptimizerState {
  OptimizerConfig config;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;

  static OptimizerState init(SharedModel& model, OptimizerConfig cfg = {}) {
    OptimizerState s;
    s.config = cfg;
    for (auto& r : param_refs(model)) {
      s.m.push_back(Tensor::zeros(r.tensor->dims));
      s.v.push_back(Tensor::zeros(r.tensor->dims));
    }
    return s;
  }
};

// One Adam update: global-norm clip first, then bias-corrected moments at
// the learning rate scheduled for the pre-update step counter.
inline void adam_step(OptimizerState& state, SharedModel& model, const Gradients& grads) {
  auto refs = param_refs(model);
  if (grads.tensors.size() != refs.size() || state.m.size() != refs.size())
    throw DimensionError("adam_step: gradient/state shape mismatch");
  for (std::size_t k = 0; k < refs.size(); ++k)
    if (grads.tensors[k].size() != refs[k].tensor->size())
      throw DimensionError("adam_step: tensor " + refs[k].name + " shape mismatch");

  double sq = 0.0;
  for (const auto& g : grads.tensors)
    for (double x : g.data) sq += x * x;
  const double norm = std::sqrt(sq);
  const double scale =
      (norm > state.config.clip_norm && norm > 0.0) ? state.config.clip_norm / norm : 1.0;

  const double lr = scheduled_lr(state.config, state.step);
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.config.beta1, t);
  const double bc2 = 1.0 - std::pow(state.config.beta2, t);

  for (std::size_t k = 0; k < refs.size(); ++k) {
    Tensor& theta = *refs[k].tensor;
    Tensor& mk = state.m[k];
    Tensor& vk = state.v[k];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double g = grads.tensors[k].data[j] * scale;
      mk.data[j] = state.config.beta1 * mk.data[j] + (1.0 - state.config.beta1) * g;
      vk.data[j] = state.config.beta2 * vk.data[j] + (1.0 - state.config.beta2) * g * g;
      const double mhat = mk.data[j] / bc1;
      const double vhat = vk.data[j] / bc2;
      theta.data[j] -= lr * mhat / (std::sqrt(vhat) + state.config.epsilon);
    }
  }
}

}  // namespace mmfuse
