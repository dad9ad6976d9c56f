#pragma once

// Checkpoint container: model config, every parameter tensor (dims plus
// row-major 64-bit floats), the materialized sketch parameters and the
// optimizer state. JSON with deterministic field order; doubles are emitted
// with round-trip-exact formatting, so identical state produces identical
// bytes.

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmfuse/errors.hpp"
#include "mmfuse/nn.hpp"

namespace mmfuse {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

// ---- config (de)serialization ----------------------------------------------

inline ojson to_json(const EncoderSpec& e) {
  ojson j;
  j["kind"] = e.kind == EncoderSpec::Kind::embedding ? "embedding" : "dense";
  j["input_dim"] = e.input_dim;
  j["hidden_dims"] = e.hidden_dims;
  j["output_dim"] = e.output_dim;
  j["activation"] = to_string(e.activation);
  j["max_seq_len"] = e.max_seq_len;
  return j;
}

inline EncoderSpec encoder_spec_from_json(const json& j) {
  EncoderSpec e;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "dense")
    e.kind = EncoderSpec::Kind::dense;
  else if (kind == "embedding")
    e.kind = EncoderSpec::Kind::embedding;
  else
    throw ParseError("encoder spec: unknown kind '" + kind + "'");
  e.input_dim = j.at("input_dim").get<std::size_t>();
  e.hidden_dims = j.at("hidden_dims").get<std::vector<std::size_t>>();
  e.output_dim = j.at("output_dim").get<std::size_t>();
  e.activation = activation_from_string(j.at("activation").get<std::string>());
  e.max_seq_len = j.value("max_seq_len", std::size_t{64});
  return e;
}

inline ojson to_json(const FusionConfig& f) {
  ojson j;
  j["strategy"] = to_string(f.strategy);
  j["image_scale_strategy"] = to_string(f.image_scale_strategy);
  j["cbp_output_dim"] = f.cbp_output_dim;
  j["sketch_seed"] = f.sketch_seed;
  j["shared_sketch"] = f.shared_sketch;
  return j;
}

inline FusionConfig fusion_config_from_json(const json& j) {
  FusionConfig f;
  f.strategy = fusion_strategy_from_string(j.at("strategy").get<std::string>());
  f.image_scale_strategy =
      fusion_strategy_from_string(j.at("image_scale_strategy").get<std::string>());
  f.cbp_output_dim = j.at("cbp_output_dim").get<std::size_t>();
  f.sketch_seed = j.at("sketch_seed").get<std::uint64_t>();
  f.shared_sketch = j.value("shared_sketch", false);
  return f;
}

inline ojson to_json(const ModelConfig& m) {
  ojson j;
  j["use_slide"] = m.use_slide;
  j["use_patch"] = m.use_patch;
  j["use_text"] = m.use_text;
  j["use_structured"] = m.use_structured;
  j["slide_encoder"] = to_json(m.slide_encoder);
  j["patch_encoder"] = to_json(m.patch_encoder);
  j["text_encoder"] = to_json(m.text_encoder);
  j["structured_encoder"] = to_json(m.structured_encoder);
  j["fusion"] = to_json(m.fusion);
  ojson tasks = ojson::array();
  for (const auto& t : m.tasks) tasks.push_back({{"name", t.name}, {"n_classes", t.n_classes}});
  j["tasks"] = tasks;
  j["init_seed"] = m.init_seed;
  return j;
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig m;
  m.use_slide = j.at("use_slide").get<bool>();
  m.use_patch = j.at("use_patch").get<bool>();
  m.use_text = j.at("use_text").get<bool>();
  m.use_structured = j.at("use_structured").get<bool>();
  m.slide_encoder = encoder_spec_from_json(j.at("slide_encoder"));
  m.patch_encoder = encoder_spec_from_json(j.at("patch_encoder"));
  m.text_encoder = encoder_spec_from_json(j.at("text_encoder"));
  m.structured_encoder = encoder_spec_from_json(j.at("structured_encoder"));
  m.fusion = fusion_config_from_json(j.at("fusion"));
  m.tasks.clear();
  for (const auto& t : j.at("tasks"))
    m.tasks.push_back({t.at("name").get<std::string>(), t.at("n_classes").get<std::size_t>()});
  m.init_seed = j.at("init_seed").get<std::uint64_t>();
  return m;
}

// ---- sketch and tensor payloads ---------------------------------------------

namespace detail {

inline ojson sketch_to_json(const SketchParams& p) {
  ojson j;
  j["n"] = p.n;
  j["d"] = p.d;
  std::vector<int> signs(p.n);
  for (std::size_t i = 0; i < p.n; ++i) signs[i] = p.s[i] > 0 ? 1 : -1;
  j["s"] = signs;
  j["h"] = p.h;
  return j;
}

inline SketchParams sketch_from_json(const json& j) {
  SketchParams p;
  p.n = j.at("n").get<std::size_t>();
  p.d = j.at("d").get<std::size_t>();
  const auto signs = j.at("s").get<std::vector<int>>();
  std::vector<double> s(signs.size());
  for (std::size_t i = 0; i < signs.size(); ++i) s[i] = signs[i] >= 0 ? 1.0 : -1.0;
  p.s = RealVec(std::move(s));
  p.h = j.at("h").get<std::vector<std::uint32_t>>();
  validate_sketch(p);
  return p;
}

inline void put_optional_sketch(ojson& j, const char* key,
                                const std::optional<SketchParams>& p) {
  if (p)
    j[key] = sketch_to_json(*p);
  else
    j[key] = nullptr;
}

inline std::optional<SketchParams> get_optional_sketch(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return sketch_from_json(j.at(key));
}

}  // namespace detail

// ---- checkpoint --------------------------------------------------------------

inline constexpr const char* CHECKPOINT_FORMAT = "mmfuse-checkpoint";

inline void save_checkpoint(SharedModel& model, const OptimizerState& opt,
                            const std::string& path) {
  ojson j;
  j["format"] = CHECKPOINT_FORMAT;
  j["version"] = 1;
  j["model_config"] = to_json(model.config);

  ojson sketches;
  detail::put_optional_sketch(sketches, "image_slide", model.sketches.image_slide);
  detail::put_optional_sketch(sketches, "image_patches", model.sketches.image_patches);
  detail::put_optional_sketch(sketches, "cross_image", model.sketches.cross_image);
  detail::put_optional_sketch(sketches, "cross_lang", model.sketches.cross_lang);
  j["sketches"] = sketches;

  ojson tensors = ojson::array();
  for (auto& r : param_refs(model)) {
    ojson t;
    t["name"] = r.name;
    t["dims"] = r.tensor->dims;
    t["data"] = r.tensor->data;
    tensors.push_back(std::move(t));
  }
  j["tensors"] = tensors;

  ojson optimizer;
  optimizer["beta1"] = opt.config.beta1;
  optimizer["beta2"] = opt.config.beta2;
  optimizer["epsilon"] = opt.config.epsilon;
  optimizer["clip_norm"] = opt.config.clip_norm;
  optimizer["lr0"] = opt.config.lr0;
  optimizer["decay"] = opt.config.decay;
  optimizer["decay_every"] = opt.config.decay_every;
  optimizer["step"] = opt.step;
  ojson m = ojson::array(), v = ojson::array();
  for (const auto& t : opt.m) m.push_back(t.data);
  for (const auto& t : opt.v) v.push_back(t.data);
  optimizer["m"] = m;
  optimizer["v"] = v;
  j["optimizer"] = optimizer;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path);
  out << j.dump() << '\n';
}

struct LoadedCheckpoint {
  SharedModel model;
  OptimizerState optimizer;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(std::string("checkpoint: ") + e.what());
  }
  if (j.value("format", std::string{}) != CHECKPOINT_FORMAT)
    throw ParseError("checkpoint: bad format marker");

  LoadedCheckpoint out{make_model(model_config_from_json(j.at("model_config"))),
                       OptimizerState{}};

  // stored sketches are authoritative over the seed-derived reconstruction
  auto& sk = out.model.sketches;
  const auto& js = j.at("sketches");
  sk.image_slide = detail::get_optional_sketch(js, "image_slide");
  sk.image_patches = detail::get_optional_sketch(js, "image_patches");
  sk.cross_image = detail::get_optional_sketch(js, "cross_image");
  sk.cross_lang = detail::get_optional_sketch(js, "cross_lang");

  auto refs = param_refs(out.model);
  const auto& tensors = j.at("tensors");
  if (tensors.size() != refs.size())
    throw ParseError("checkpoint: tensor count mismatch (" + std::to_string(tensors.size()) +
                     " vs " + std::to_string(refs.size()) + ")");
  for (std::size_t k = 0; k < refs.size(); ++k) {
    const auto& t = tensors[k];
    if (t.at("name").get<std::string>() != refs[k].name)
      throw ParseError("checkpoint: tensor order mismatch at '" + refs[k].name + "'");
    const auto dims = t.at("dims").get<std::vector<std::size_t>>();
    if (dims != refs[k].tensor->dims)
      throw ParseError("checkpoint: dims mismatch for '" + refs[k].name + "'");
    auto data = t.at("data").get<std::vector<double>>();
    if (data.size() != refs[k].tensor->data.size())
      throw ParseError("checkpoint: data size mismatch for '" + refs[k].name + "'");
    refs[k].tensor->data = std::move(data);
  }

  const auto& jo = j.at("optimizer");
  OptimizerConfig oc;
  oc.beta1 = jo.at("beta1").get<double>();
  oc.beta2 = jo.at("beta2").get<double>();
  oc.epsilon = jo.at("epsilon").get<double>();
  oc.clip_norm = jo.at("clip_norm").get<double>();
  oc.lr0 = jo.at("lr0").get<double>();
  oc.decay = jo.at("decay").get<double>();
  oc.decay_every = jo.at("decay_every").get<double>();
  out.optimizer = OptimizerState::init(out.model, oc);
  out.optimizer.step = jo.at("step").get<std::uint64_t>();
  const auto& jm = jo.at("m");
  const auto& jv = jo.at("v");
  if (jm.size() != refs.size() || jv.size() != refs.size())
    throw ParseError("checkpoint: optimizer moment count mismatch");
  for (std::size_t k = 0; k < refs.size(); ++k) {
    out.optimizer.m[k].data = jm[k].get<std::vector<double>>();
    out.optimizer.v[k].data = jv[k].get<std::vector<double>>();
    if (out.optimizer.m[k].data.size() != refs[k].tensor->size() ||
        out.optimizer.v[k].data.size() != refs[k].tensor->size())
      throw ParseError("checkpoint: moment size mismatch for '" + refs[k].name + "'");
  }
  return out;
}

}  // namespace mmfuse
