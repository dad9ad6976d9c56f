#pragma once

// Representation merging: count-sketch projection, FFT-based compact bilinear
// pooling (CBP), plain concatenation, and the two-scale image fusion. All
// operations are pure; sketch parameters are immutable once created and may
// be shared read-only across threads.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mmfuse/errors.hpp"
#include "mmfuse/numerics.hpp"

namespace mmfuse {

// Count-sketch parameters: sign flips s in {-1,+1}^n and bucket indices
// h in {0..d-1}^n (stored 0-based). d must be a power of two so the
// convolution step of CBP can run on the radix-2 FFT.
struct SketchParams {
  std::size_t n = 0;
  std::size_t d = 0;
  RealVec s;
  std::vector<std::uint32_t> h;
};

inline void validate_sketch(const SketchParams& p) {
  if (!is_power_of_two(p.d))
    throw ConfigError("sketch: output dimension must be a power of two, got " +
                      std::to_string(p.d));
  if (p.s.size() != p.n || p.h.size() != p.n)
    throw DimensionError("sketch: s/h length must equal n");
  for (auto b : p.h)
    if (b >= p.d) throw DataError("sketch: bucket index out of range");
  for (std::size_t i = 0; i < p.s.size(); ++i)
    if (p.s[i] != 1.0 && p.s[i] != -1.0) throw DataError("sketch: signs must be +-1");
}

inline SketchParams make_sketch(RngStream rng, std::size_t n, std::size_t d) {
  if (n == 0) throw DimensionError("make_sketch: n must be >= 1");
  if (!is_power_of_two(d))
    throw ConfigError("make_sketch: d must be a power of two, got " + std::to_string(d));
  SketchParams p;
  p.n = n;
  p.d = d;
  p.s = uniform_signs(rng, n);
  p.h.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    p.h[i] = static_cast<std::uint32_t>(rng.next_below(d));
  return p;
}

// out[j] = sum over {i : h_i = j} of s_i * v_i. Linear in v.
inline RealVec sketch_apply(const SketchParams& p, const RealVec& v) {
  if (v.size() != p.n)
    throw DimensionError("sketch_apply: input length " + std::to_string(v.size()) +
                         " != sketch n " + std::to_string(p.n));
  std::vector<double> out(p.d, 0.0);
  for (std::size_t i = 0; i < p.n; ++i) out[p.h[i]] += p.s[i] * v[i];
  return RealVec(std::move(out));
}

// Adjoint of sketch_apply: g_in[i] = s_i * g_out[h_i].
inline RealVec sketch_adjoint(const SketchParams& p, const RealVec& g_out) {
  if (g_out.size() != p.d) throw DimensionError("sketch_adjoint: gradient length != d");
  std::vector<double> g(p.n);
  for (std::size_t i = 0; i < p.n; ++i) g[i] = p.s[i] * g_out[p.h[i]];
  return RealVec(std::move(g));
}

// Compact bilinear pooling: the count sketch of the outer product x (x) y,
// computed as the circular convolution of the two per-side sketches.
inline RealVec cbp_fuse(const RealVec& x, const RealVec& y, const SketchParams& px,
                        const SketchParams& py) {
  if (px.d != py.d)
    throw ConfigError("cbp_fuse: sketch output dims differ (" + std::to_string(px.d) + " vs " +
                      std::to_string(py.d) + ")");
  return circular_convolve(sketch_apply(px, x), sketch_apply(py, y));
}

// Gradients of cbp_fuse with respect to both inputs given the upstream
// gradient g: each side is the circular correlation with the other side's
// sketch, pulled back through the sketch adjoint.
inline std::pair<RealVec, RealVec> cbp_backward(const RealVec& x, const RealVec& y,
                                                const SketchParams& px, const SketchParams& py,
                                                const RealVec& g) {
  const RealVec sx = sketch_apply(px, x);
  const RealVec sy = sketch_apply(py, y);
  RealVec gx = sketch_adjoint(px, circular_convolve(g, circular_reverse(sy)));
  RealVec gy = sketch_adjoint(py, circular_convolve(g, circular_reverse(sx)));
  return {std::move(gx), std::move(gy)};
}

inline RealVec concat_fuse(const std::vector<RealVec>& parts) {
  if (parts.empty()) throw DimensionError("concat_fuse: no parts");
  std::vector<double> out;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.empty()) throw DimensionError("concat_fuse: empty part");
    total += p.size();
  }
  out.reserve(total);
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return RealVec(std::move(out));
}

// One sample's per-modality representation vectors. "patches" holds exactly
// three vectors when present; absent optionals model modality ablation.
struct ModalityBundle {
  std::optional<RealVec> slide;
  std::optional<std::array<RealVec, 3>> patches;
  std::optional<RealVec> text;
  std::optional<RealVec> structured;

  bool any_present() const {
    return slide.has_value() || patches.has_value() || text.has_value() ||
           structured.has_value();
  }
};

enum class FusionStrategy { concat, cbp };

inline std::string to_string(FusionStrategy s) {
  return s == FusionStrategy::concat ? "concat" : "cbp";
}
inline FusionStrategy fusion_strategy_from_string(const std::string& s) {
  if (s == "concat") return FusionStrategy::concat;
  if (s == "cbp") return FusionStrategy::cbp;
  throw ConfigError("unknown fusion strategy: " + s);
}

struct FusionConfig {
  FusionStrategy strategy = FusionStrategy::concat;        // cross-modality merge
  FusionStrategy image_scale_strategy = FusionStrategy::concat;  // slide vs patches
  std::size_t cbp_output_dim = 256;
  std::uint64_t sketch_seed = 0;
  // Reuse one (s, h) pair on both CBP sides. This mirrors the textbook
  // formula literally but biases the diagonal, so it is off by default;
  // it also requires both sides to have equal length.
  bool shared_sketch = false;
};

inline void validate_fusion_config(const FusionConfig& cfg) {
  if (!is_power_of_two(cfg.cbp_output_dim))
    throw ConfigError("fusion: cbp_output_dim must be a power of two, got " +
                      std::to_string(cfg.cbp_output_dim));
}

// Materialized sketches for the two possible CBP sites. Members are only
// populated for sites the configured strategies actually use; the set is
// persisted with model checkpoints so fused representations survive
// save/load byte-for-byte.
struct SketchSet {
  std::optional<SketchParams> image_slide;   // slide side of the two-scale merge
  std::optional<SketchParams> image_patches; // concatenated-patches side
  std::optional<SketchParams> cross_image;   // image side of the cross-modal merge
  std::optional<SketchParams> cross_lang;    // [text; structured] side
};

// Per-modality representation dimensions as seen by the fusion stage.
// Zero means the modality is absent from the model.
struct FusionDims {
  std::size_t slide = 0;
  std::size_t patch = 0;  // one patch vector; three are concatenated
  std::size_t text = 0;
  std::size_t structured = 0;

  std::size_t image_dim(const FusionConfig& cfg) const {
    if (slide == 0) return 0;
    if (patch == 0) return slide;
    return cfg.image_scale_strategy == FusionStrategy::cbp ? cfg.cbp_output_dim
                                                           : slide + 3 * patch;
  }
  std::size_t lang_dim() const { return text + structured; }
  std::size_t shared_dim(const FusionConfig& cfg) const {
    const std::size_t img = image_dim(cfg);
    const std::size_t lang = lang_dim();
    if (cfg.strategy == FusionStrategy::cbp && img > 0 && lang > 0) return cfg.cbp_output_dim;
    return img + lang;
  }
};

inline SketchSet make_sketch_set(const FusionConfig& cfg, const FusionDims& dims) {
  validate_fusion_config(cfg);
  SketchSet set;
  RngStream root(cfg.sketch_seed, 0);
  const std::size_t d = cfg.cbp_output_dim;
  if (cfg.image_scale_strategy == FusionStrategy::cbp && dims.slide > 0 && dims.patch > 0) {
    set.image_slide = make_sketch(root.substream(1), dims.slide, d);
    if (cfg.shared_sketch) {
      if (dims.slide != 3 * dims.patch)
        throw ConfigError("shared_sketch requires equal side dims at the image site");
      set.image_patches = set.image_slide;
    } else {
      set.image_patches = make_sketch(root.substream(2), 3 * dims.patch, d);
    }
  }
  if (cfg.strategy == FusionStrategy::cbp && dims.slide > 0 && dims.lang_dim() > 0) {
    const std::size_t img = dims.image_dim(cfg);
    set.cross_image = make_sketch(root.substream(3), img, d);
    if (cfg.shared_sketch) {
      if (img != dims.lang_dim())
        throw ConfigError("shared_sketch requires equal side dims at the cross-modal site");
      set.cross_lang = set.cross_image;
    } else {
      set.cross_lang = make_sketch(root.substream(4), dims.lang_dim(), d);
    }
  }
  return set;
}

// Two-scale image fusion. With patches absent the slide vector passes
// through unchanged (patch-ablation mode).
inline RealVec fuse_image(const ModalityBundle& bundle, const FusionConfig& cfg,
                          const SketchSet& sketches) {
  if (!bundle.slide.has_value()) throw DimensionError("fuse_image: slide vector required");
  if (!bundle.patches.has_value()) return *bundle.slide;
  const auto& p = *bundle.patches;
  if (cfg.image_scale_strategy == FusionStrategy::cbp) {
    if (!sketches.image_slide || !sketches.image_patches)
      throw ConfigError("fuse_image: cbp strategy needs image-site sketches");
    return cbp_fuse(*bundle.slide, concat_fuse({p[0], p[1], p[2]}), *sketches.image_slide,
                    *sketches.image_patches);
  }
  return concat_fuse({*bundle.slide, p[0], p[1], p[2]});
}

// Cross-modal fusion into the shared representation. Order is fixed:
// image, text, structured. The cbp strategy pairs the image against
// [text; structured] and degrades to plain concatenation of whichever
// side is present alone.
inline RealVec fuse_all(const ModalityBundle& bundle, const FusionConfig& cfg,
                        const SketchSet& sketches) {
  if (!bundle.any_present()) throw ConfigError("fuse_all: no modalities present");
  std::optional<RealVec> image;
  if (bundle.slide.has_value()) image = fuse_image(bundle, cfg, sketches);

  std::vector<RealVec> lang_parts;
  if (bundle.text.has_value()) lang_parts.push_back(*bundle.text);
  if (bundle.structured.has_value()) lang_parts.push_back(*bundle.structured);

  if (cfg.strategy == FusionStrategy::cbp && image.has_value() && !lang_parts.empty()) {
    if (!sketches.cross_image || !sketches.cross_lang)
      throw ConfigError("fuse_all: cbp strategy needs cross-modal sketches");
    return cbp_fuse(*image, concat_fuse(lang_parts), *sketches.cross_image,
                    *sketches.cross_lang);
  }
  std::vector<RealVec> parts;
  if (image.has_value()) parts.push_back(std::move(*image));
  for (auto& lp : lang_parts) parts.push_back(std::move(lp));
  return concat_fuse(parts);
}

// Gradients of fuse_all with respect to every present modality vector.
struct BundleGrads {
  std::optional<RealVec> slide;
  std::optional<std::array<RealVec, 3>> patches;
  std::optional<RealVec> text;
  std::optional<RealVec> structured;
};

namespace detail {

inline std::vector<RealVec> split_concat(const RealVec& g, const std::vector<std::size_t>& lens) {
  std::vector<RealVec> out;
  std::size_t off = 0;
  for (std::size_t len : lens) {
    std::vector<double> part(len);
    for (std::size_t i = 0; i < len; ++i) part[i] = g[off + i];
    off += len;
    out.emplace_back(std::move(part));
  }
  return out;
}

}  // namespace detail

inline BundleGrads fuse_all_backward(const ModalityBundle& bundle, const FusionConfig& cfg,
                                     const SketchSet& sketches, const RealVec& g_shared) {
  BundleGrads grads;
  std::optional<RealVec> image;
  if (bundle.slide.has_value()) image = fuse_image(bundle, cfg, sketches);

  std::vector<RealVec> lang_parts;
  std::vector<std::size_t> lang_lens;
  if (bundle.text.has_value()) {
    lang_parts.push_back(*bundle.text);
    lang_lens.push_back(bundle.text->size());
  }
  if (bundle.structured.has_value()) {
    lang_parts.push_back(*bundle.structured);
    lang_lens.push_back(bundle.structured->size());
  }

  RealVec g_image;
  std::vector<RealVec> g_lang;
  const bool cross_cbp =
      cfg.strategy == FusionStrategy::cbp && image.has_value() && !lang_parts.empty();
  if (cross_cbp) {
    auto [gi, gl] = cbp_backward(*image, concat_fuse(lang_parts), *sketches.cross_image,
                                 *sketches.cross_lang, g_shared);
    g_image = std::move(gi);
    g_lang = detail::split_concat(gl, lang_lens);
  } else {
    std::vector<std::size_t> lens;
    if (image.has_value()) lens.push_back(image->size());
    for (std::size_t l : lang_lens) lens.push_back(l);
    auto pieces = detail::split_concat(g_shared, lens);
    std::size_t at = 0;
    if (image.has_value()) g_image = std::move(pieces[at++]);
    for (std::size_t i = 0; i < lang_lens.size(); ++i) g_lang.push_back(std::move(pieces[at++]));
  }

  std::size_t lang_at = 0;
  if (bundle.text.has_value()) grads.text = std::move(g_lang[lang_at++]);
  if (bundle.structured.has_value()) grads.structured = std::move(g_lang[lang_at++]);

  if (!bundle.slide.has_value()) return grads;

  // back through the two-scale image merge
  if (!bundle.patches.has_value()) {
    grads.slide = std::move(g_image);
    return grads;
  }
  const auto& p = *bundle.patches;
  if (cfg.image_scale_strategy == FusionStrategy::cbp) {
    auto [gs, gp] = cbp_backward(*bundle.slide, concat_fuse({p[0], p[1], p[2]}),
                                 *sketches.image_slide, *sketches.image_patches, g_image);
    grads.slide = std::move(gs);
    auto parts = detail::split_concat(gp, {p[0].size(), p[1].size(), p[2].size()});
    grads.patches = std::array<RealVec, 3>{std::move(parts[0]), std::move(parts[1]),
                                           std::move(parts[2])};
  } else {
    auto parts = detail::split_concat(
        g_image, {bundle.slide->size(), p[0].size(), p[1].size(), p[2].size()});
    grads.slide = std::move(parts[0]);
    grads.patches =
        std::array<RealVec, 3>{std::move(parts[1]), std::move(parts[2]), std::move(parts[3])};
  }
  return grads;
}

}  // namespace mmfuse
