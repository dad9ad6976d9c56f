#pragma once

// Synthetic multimodal dataset generation, manifest ingestion, case-level
// iterative stratified splitting and label-combination resampling.
//
// A record models one stained slide: four categorical labels, a slide-level
// feature vector, three patch-level feature vectors, case-level report tokens
// and a case-level primary site. Slides of one case share tokens and site.

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmfuse/errors.hpp"
#include "mmfuse/nn.hpp"
#include "mmfuse/numerics.hpp"

namespace mmfuse {

// ---------------------------------------------------------------------------
// Label vocabulary
// ---------------------------------------------------------------------------
inline constexpr std::size_t N_TISSUE = 14;
inline constexpr std::size_t N_COMBINATIONS = 2 * N_TISSUE * 2 * 2;  // 112
inline constexpr std::int32_t PAD_TOKEN_ID = 0;

inline const std::array<std::string, 2>& fixation_names() {
  static const std::array<std::string, 2> names = {"FFPE", "Frozen"};
  return names;
}
inline const std::array<std::string, N_TISSUE>& tissue_names() {
  static const std::array<std::string, N_TISSUE> names = {
      "LN",  "Uterus/cervix", "Breast", "Other",  "Skin",  "Prostate", "Colorectal",
      "H&N", "Thyroid",       "UGI",    "Ovary",  "Kidney", "Liver",   "Lung"};
  return names;
}
inline const std::array<std::string, 2>& procedure_names() {
  static const std::array<std::string, 2> names = {"Surgical", "Biopsy"};
  return names;
}
inline const std::array<std::string, 2>& staining_names() {
  static const std::array<std::string, 2> names = {"H&E", "IHC"};
  return names;
}

enum class Task : std::size_t { fixation = 0, tissue = 1, procedure = 2, staining = 3 };
inline constexpr std::size_t N_TASKS = 4;
inline const std::array<std::string, N_TASKS>& task_names() {
  static const std::array<std::string, N_TASKS> names = {"fixation", "tissue", "procedure",
                                                         "staining"};
  return names;
}
inline std::size_t task_class_count(Task t) {
  return t == Task::tissue ? N_TISSUE : 2;
}

// The four labels of one slide, stored as class indices.
struct LabelSet {
  std::size_t fixation = 0;
  std::size_t tissue = 0;
  std::size_t procedure = 0;
  std::size_t staining = 0;

  std::size_t value(Task t) const {
    switch (t) {
      case Task::fixation: return fixation;
      case Task::tissue: return tissue;
      case Task::procedure: return procedure;
      case Task::staining: return staining;
    }
    return 0;
  }
  friend bool operator==(const LabelSet&, const LabelSet&) = default;
  friend auto operator<=>(const LabelSet&, const LabelSet&) = default;
};

inline void validate_labels(const LabelSet& l) {
  if (l.fixation >= 2 || l.tissue >= N_TISSUE || l.procedure >= 2 || l.staining >= 2)
    throw DataError("label index out of range");
}

// Joint label combination in [0, 112).
inline std::size_t combination_index(const LabelSet& l) {
  return ((l.fixation * N_TISSUE + l.tissue) * 2 + l.procedure) * 2 + l.staining;
}
inline LabelSet combination_labels(std::size_t index) {
  LabelSet l;
  l.staining = index % 2;
  index /= 2;
  l.procedure = index % 2;
  index /= 2;
  l.tissue = index % N_TISSUE;
  l.fixation = index / N_TISSUE;
  return l;
}

struct SlideRecord {
  std::string case_id;
  std::string slide_id;
  LabelSet labels;
  RealVec slide_features;
  std::array<RealVec, 3> patch_features;
  std::vector<std::int32_t> text_tokens;  // raw case-level tokens, unpadded
  std::size_t primary_site = 0;           // case-level, < N_TISSUE
};

// ---------------------------------------------------------------------------
// Text and structured preprocessing
// ---------------------------------------------------------------------------

// Length-14 one-hot encoding of the primary site.
inline RealVec encode_structured(std::size_t primary_site) {
  if (primary_site >= N_TISSUE)
    throw DataError("encode_structured: site index " + std::to_string(primary_site) +
                    " out of range");
  std::vector<double> v(N_TISSUE, 0.0);
  v[primary_site] = 1.0;
  return RealVec(std::move(v));
}

// Fixed-length token window: keeps the head of longer sequences (reports put
// the salient findings first), pads shorter ones with the reserved pad id.
inline TokenSeq truncate_pad_text(const std::vector<std::int32_t>& tokens,
                                  std::size_t max_len = 64) {
  TokenSeq out;
  out.ids.assign(max_len, PAD_TOKEN_ID);
  out.mask.assign(max_len, 0);
  const std::size_t keep = std::min(tokens.size(), max_len);
  for (std::size_t i = 0; i < keep; ++i) {
    out.ids[i] = tokens[i];
    out.mask[i] = 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

// Per-(modality, task) informativeness weights: how strongly each feature
// modality encodes each label. Text weights are token-category rates; the
// structured channel is controlled by site_corruption below.
struct SynthConfig {
  std::size_t n_cases = 2000;
  std::vector<double> slides_per_case_probs = {0.65, 0.25, 0.10};  // P(1), P(2), P(3)
  double imbalance_exponent = 1.1;  // power law over the 112 combinations; 0 = uniform

  std::size_t slide_dim = 24;
  std::size_t patch_dim = 12;
  std::size_t vocab_size = 96;
  std::size_t text_len_min = 10;
  std::size_t text_len_max = 72;

  double w_slide_fixation = 1.0;
  double w_slide_tissue = 0.15;
  double w_slide_procedure = 0.12;
  double w_slide_staining = 1.0;

  double w_patch_fixation = 0.45;
  double w_patch_tissue = 0.55;
  double w_patch_procedure = 0.08;
  double w_patch_staining = 0.45;

  double w_text_tissue = 0.10;     // fraction of tokens drawn from tissue bands
  double w_text_procedure = 0.02;  // fraction drawn from procedure bands

  double noise_slide = 1.3;
  double noise_patch = 1.3;
  double patch_confounder_prob = 0.40;  // patch replaced by a background vector
  double site_corruption = 0.45;        // P(primary site != slide tissue)

  std::uint64_t seed = 0;
};

inline void validate_synth_config(const SynthConfig& c) {
  if (c.n_cases == 0) throw ConfigError("synth: n_cases must be >= 1");
  if (c.slides_per_case_probs.empty()) throw ConfigError("synth: slides_per_case_probs empty");
  double sum = 0.0;
  for (double p : c.slides_per_case_probs) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("synth: slides_per_case_probs entry not in [0,1]");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("synth: slides_per_case_probs must sum to 1");
  if (!(c.imbalance_exponent >= 0.0)) throw ConfigError("synth: imbalance_exponent must be >= 0");
  for (double p : {c.patch_confounder_prob, c.site_corruption})
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("synth: probability not in [0,1]");
  if (!(c.w_text_tissue >= 0.0 && c.w_text_procedure >= 0.0 &&
        c.w_text_tissue + c.w_text_procedure <= 1.0))
    throw ConfigError("synth: text token rates must be nonnegative and sum to <= 1");
  for (double w : {c.w_slide_fixation, c.w_slide_tissue, c.w_slide_procedure, c.w_slide_staining,
                   c.w_patch_fixation, c.w_patch_tissue, c.w_patch_procedure, c.w_patch_staining,
                   c.noise_slide, c.noise_patch})
    if (!std::isfinite(w)) throw ConfigError("synth: non-finite weight");
  if (c.slide_dim == 0 || c.patch_dim == 0) throw ConfigError("synth: feature dims must be >= 1");
  if (c.vocab_size < 80) throw ConfigError("synth: vocab_size must be >= 80");
  if (c.text_len_min == 0 || c.text_len_min > c.text_len_max)
    throw ConfigError("synth: bad text length range");
}

inline nlohmann::ordered_json synth_config_to_json(const SynthConfig& c) {
  nlohmann::ordered_json j;
  j["n_cases"] = c.n_cases;
  j["slides_per_case_probs"] = c.slides_per_case_probs;
  j["imbalance_exponent"] = c.imbalance_exponent;
  j["slide_dim"] = c.slide_dim;
  j["patch_dim"] = c.patch_dim;
  j["vocab_size"] = c.vocab_size;
  j["text_len_min"] = c.text_len_min;
  j["text_len_max"] = c.text_len_max;
  j["w_slide_fixation"] = c.w_slide_fixation;
  j["w_slide_tissue"] = c.w_slide_tissue;
  j["w_slide_procedure"] = c.w_slide_procedure;
  j["w_slide_staining"] = c.w_slide_staining;
  j["w_patch_fixation"] = c.w_patch_fixation;
  j["w_patch_tissue"] = c.w_patch_tissue;
  j["w_patch_procedure"] = c.w_patch_procedure;
  j["w_patch_staining"] = c.w_patch_staining;
  j["w_text_tissue"] = c.w_text_tissue;
  j["w_text_procedure"] = c.w_text_procedure;
  j["noise_slide"] = c.noise_slide;
  j["noise_patch"] = c.noise_patch;
  j["patch_confounder_prob"] = c.patch_confounder_prob;
  j["site_corruption"] = c.site_corruption;
  j["seed"] = c.seed;
  return j;
}

inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
  SynthConfig c;
  c.n_cases = j.value("n_cases", c.n_cases);
  c.slides_per_case_probs = j.value("slides_per_case_probs", c.slides_per_case_probs);
  c.imbalance_exponent = j.value("imbalance_exponent", c.imbalance_exponent);
  c.slide_dim = j.value("slide_dim", c.slide_dim);
  c.patch_dim = j.value("patch_dim", c.patch_dim);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.text_len_min = j.value("text_len_min", c.text_len_min);
  c.text_len_max = j.value("text_len_max", c.text_len_max);
  c.w_slide_fixation = j.value("w_slide_fixation", c.w_slide_fixation);
  c.w_slide_tissue = j.value("w_slide_tissue", c.w_slide_tissue);
  c.w_slide_procedure = j.value("w_slide_procedure", c.w_slide_procedure);
  c.w_slide_staining = j.value("w_slide_staining", c.w_slide_staining);
  c.w_patch_fixation = j.value("w_patch_fixation", c.w_patch_fixation);
  c.w_patch_tissue = j.value("w_patch_tissue", c.w_patch_tissue);
  c.w_patch_procedure = j.value("w_patch_procedure", c.w_patch_procedure);
  c.w_patch_staining = j.value("w_patch_staining", c.w_patch_staining);
  c.w_text_tissue = j.value("w_text_tissue", c.w_text_tissue);
  c.w_text_procedure = j.value("w_text_procedure", c.w_text_procedure);
  c.noise_slide = j.value("noise_slide", c.noise_slide);
  c.noise_patch = j.value("noise_patch", c.noise_patch);
  c.patch_confounder_prob = j.value("patch_confounder_prob", c.patch_confounder_prob);
  c.site_corruption = j.value("site_corruption", c.site_corruption);
  c.seed = j.value("seed", c.seed);
  return c;
}

namespace detail {

// Vocabulary bands: id 0 is padding; each tissue class owns 4 ids, each
// procedure class owns 4 ids, the rest is uninformative filler.
struct VocabLayout {
  std::size_t tissue_base = 1;
  std::size_t band = 4;
  std::size_t procedure_base = 1 + N_TISSUE * 4;
  std::size_t common_base = 1 + N_TISSUE * 4 + 2 * 4;
  std::size_t vocab_size;

  explicit VocabLayout(std::size_t vocab) : vocab_size(vocab) {}
  std::int32_t tissue_token(std::size_t cls, std::uint64_t r) const {
    return static_cast<std::int32_t>(tissue_base + cls * band + r % band);
  }
  std::int32_t procedure_token(std::size_t cls, std::uint64_t r) const {
    return static_cast<std::int32_t>(procedure_base + cls * band + r % band);
  }
  std::int32_t common_token(std::uint64_t r) const {
    return static_cast<std::int32_t>(common_base + r % (vocab_size - common_base));
  }
};

inline RealVec gaussian_vec(RngStream& rng, std::size_t dim, double scale) {
  std::vector<double> v(dim);
  for (auto& x : v) x = scale * rng.next_gaussian();
  return RealVec(std::move(v));
}

// Class prototype vectors, fixed per generator seed.
struct Prototypes {
  std::vector<RealVec> slide_fixation, slide_tissue, slide_procedure, slide_staining;
  std::vector<RealVec> patch_fixation, patch_tissue, patch_procedure, patch_staining;
  RealVec patch_background;

  Prototypes(const SynthConfig& cfg, RngStream proto_rng) {
    auto fill = [&](std::vector<RealVec>& dst, std::size_t n_classes, std::size_t dim,
                    std::uint64_t salt) {
      auto rng = proto_rng.substream(salt);
      for (std::size_t c = 0; c < n_classes; ++c) dst.push_back(gaussian_vec(rng, dim, 1.0));
    };
    fill(slide_fixation, 2, cfg.slide_dim, 1);
    fill(slide_tissue, N_TISSUE, cfg.slide_dim, 2);
    fill(slide_procedure, 2, cfg.slide_dim, 3);
    fill(slide_staining, 2, cfg.slide_dim, 4);
    fill(patch_fixation, 2, cfg.patch_dim, 5);
    fill(patch_tissue, N_TISSUE, cfg.patch_dim, 6);
    fill(patch_procedure, 2, cfg.patch_dim, 7);
    fill(patch_staining, 2, cfg.patch_dim, 8);
    auto rng = proto_rng.substream(9);
    patch_background = gaussian_vec(rng, cfg.patch_dim, 1.0);
  }
};

inline std::vector<double> combination_cdf(double exponent) {
  std::vector<double> w(N_COMBINATIONS);
  double sum = 0.0;
  for (std::size_t c = 0; c < N_COMBINATIONS; ++c) {
    w[c] = std::pow(static_cast<double>(c + 1), -exponent);
    sum += w[c];
  }
  double acc = 0.0;
  for (auto& x : w) {
    acc += x / sum;
    x = acc;
  }
  w.back() = 1.0;
  return w;
}

inline std::size_t draw_from_cdf(const std::vector<double>& cdf, double u) {
  return static_cast<std::size_t>(
      std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
}

inline RealVec draw_patch(const SynthConfig& cfg, const Prototypes& protos, const LabelSet& labels,
                          RngStream& rng) {
  std::vector<double> patch(cfg.patch_dim, 0.0);
  const bool confounded = rng.next_unit() < cfg.patch_confounder_prob;
  for (std::size_t k = 0; k < cfg.patch_dim; ++k) {
    double base;
    if (confounded) {
      base = protos.patch_background[k];
    } else {
      base = cfg.w_patch_fixation * protos.patch_fixation[labels.fixation][k] +
             cfg.w_patch_tissue * protos.patch_tissue[labels.tissue][k] +
             cfg.w_patch_procedure * protos.patch_procedure[labels.procedure][k] +
             cfg.w_patch_staining * protos.patch_staining[labels.staining][k];
    }
    patch[k] = base + cfg.noise_patch * rng.next_gaussian();
  }
  return RealVec(std::move(patch));
}

}  // namespace detail

// Deterministic synthetic dataset. Label combinations follow a power law over
// the 112 joint combinations (most frequent first in combination-index
// order). Slide features carry strong fixation/staining signal and weak
// tissue signal; patches carry tissue signal but collapse to a generic
// background vector with the configured confounder probability; report tokens
// are drawn from tissue- and procedure-conditioned vocabulary bands; the
// primary site equals the tissue up to the configured corruption rate.
inline std::vector<SlideRecord> generate_synthetic(const SynthConfig& cfg) {
  validate_synth_config(cfg);
  RngStream root(cfg.seed, 1);
  detail::Prototypes protos(cfg, root.substream(0xA11CE));
  detail::VocabLayout vocab(cfg.vocab_size);
  const auto cdf = detail::combination_cdf(cfg.imbalance_exponent);

  std::vector<double> slide_count_cdf;
  {
    double acc = 0.0;
    for (double p : cfg.slides_per_case_probs) {
      acc += p;
      slide_count_cdf.push_back(acc);
    }
    slide_count_cdf.back() = 1.0;
  }

  std::vector<SlideRecord> out;
  for (std::size_t ci = 0; ci < cfg.n_cases; ++ci) {
    auto case_rng = root.substream(1000 + ci);
    const LabelSet labels = combination_labels(detail::draw_from_cdf(cdf, case_rng.next_unit()));
    const std::size_t n_slides =
        1 + detail::draw_from_cdf(slide_count_cdf, case_rng.next_unit());

    std::size_t site = labels.tissue;
    if (case_rng.next_unit() < cfg.site_corruption) {
      const std::size_t shift = 1 + case_rng.next_below(N_TISSUE - 1);
      site = (labels.tissue + shift) % N_TISSUE;
    }

    // case-level tokens, conditioned on tissue and procedure
    const std::size_t len =
        cfg.text_len_min + case_rng.next_below(cfg.text_len_max - cfg.text_len_min + 1);
    std::vector<std::int32_t> tokens(len);
    for (auto& tok : tokens) {
      const double u = case_rng.next_unit();
      if (u < cfg.w_text_tissue)
        tok = vocab.tissue_token(labels.tissue, case_rng.next_u64());
      else if (u < cfg.w_text_tissue + cfg.w_text_procedure)
        tok = vocab.procedure_token(labels.procedure, case_rng.next_u64());
      else
        tok = vocab.common_token(case_rng.next_u64());
    }

    char case_id[32];
    std::snprintf(case_id, sizeof(case_id), "case-%05zu", ci);
    for (std::size_t si = 0; si < n_slides; ++si) {
      auto slide_rng = case_rng.substream(100 + si);
      SlideRecord rec;
      rec.case_id = case_id;
      rec.slide_id = std::string(case_id) + "-s" + std::to_string(si);
      rec.labels = labels;
      rec.primary_site = site;
      rec.text_tokens = tokens;

      std::vector<double> slide(cfg.slide_dim, 0.0);
      for (std::size_t k = 0; k < cfg.slide_dim; ++k) {
        slide[k] = cfg.w_slide_fixation * protos.slide_fixation[labels.fixation][k] +
                   cfg.w_slide_tissue * protos.slide_tissue[labels.tissue][k] +
                   cfg.w_slide_procedure * protos.slide_procedure[labels.procedure][k] +
                   cfg.w_slide_staining * protos.slide_staining[labels.staining][k] +
                   cfg.noise_slide * slide_rng.next_gaussian();
      }
      rec.slide_features = RealVec(std::move(slide));

      for (int pk = 0; pk < 3; ++pk)
        rec.patch_features[pk] = detail::draw_patch(cfg, protos, labels, slide_rng);
      out.push_back(std::move(rec));
    }
  }
  return out;
}

// Fresh patch draws from the same distribution the generator used; labels,
// slide features, text and site stay fixed. Supports per-epoch patch
// re-sampling during training on generated data (salt by epoch).
inline void regenerate_patch_features(std::vector<SlideRecord>& records, const SynthConfig& cfg,
                                      std::uint64_t salt) {
  validate_synth_config(cfg);
  RngStream root(cfg.seed, 1);
  detail::Prototypes protos(cfg, root.substream(0xA11CE));
  RngStream repatch_root = root.substream(0x9E9A7C4ULL ^ salt);
  for (auto& rec : records) {
    if (rec.patch_features[0].size() != cfg.patch_dim)
      throw ConfigError("regenerate_patch_features: patch_dim mismatch with the dataset");
    auto rng = repatch_root.substream(fnv1a(rec.slide_id));
    for (int pk = 0; pk < 3; ++pk)
      rec.patch_features[pk] = detail::draw_patch(cfg, protos, rec.labels, rng);
  }
}

// ---------------------------------------------------------------------------
// Case-level iterative stratified split
// ---------------------------------------------------------------------------
enum class Split : std::size_t { train = 0, val = 1, test = 2 };
inline const std::array<std::string, 3>& split_names() {
  static const std::array<std::string, 3> names = {"train", "val", "test"};
  return names;
}

struct SplitAssignment {
  std::map<std::string, Split> by_case;

  Split of(const std::string& case_id) const {
    auto it = by_case.find(case_id);
    if (it == by_case.end()) throw DataError("split: unknown case_id " + case_id);
    return it->second;
  }
};

namespace detail {

// Largest-remainder apportionment of total into parts ~ fractions.
inline std::array<long, 3> apportion(std::size_t total, const std::array<double, 3>& fractions) {
  std::array<long, 3> out{};
  std::array<double, 3> rem{};
  long assigned = 0;
  for (int s = 0; s < 3; ++s) {
    const double want = fractions[s] * static_cast<double>(total);
    out[s] = static_cast<long>(std::floor(want));
    rem[s] = want - std::floor(want);
    assigned += out[s];
  }
  while (assigned < static_cast<long>(total)) {
    int best = 0;
    for (int s = 1; s < 3; ++s)
      if (rem[s] > rem[best]) best = s;
    out[best] += 1;
    rem[best] = -1.0;
    ++assigned;
  }
  return out;
}

}  // namespace detail

// Greedy iterative stratification over the union of each case's label flags
// (2 fixation + 14 tissue + 2 procedure + 2 staining one-vs-rest classes):
// repeatedly take the label with the fewest unassigned cases and send each of
// its cases to the split with the greatest remaining demand for that label,
// breaking ties by overall remaining capacity and then by a seeded draw.
inline SplitAssignment iterative_stratified_split(const std::vector<SlideRecord>& records,
                                                  const std::array<double, 3>& fractions,
                                                  std::uint64_t seed) {
  if (records.empty()) throw DataError("split: no records");
  double fsum = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("split: fraction outside [0,1]");
    fsum += f;
  }
  if (std::abs(fsum - 1.0) > 1e-9) throw ConfigError("split: fractions must sum to 1");

  constexpr std::size_t N_FLAGS = 2 + N_TISSUE + 2 + 2;
  // collect cases in first-appearance order
  std::vector<std::string> case_ids;
  std::map<std::string, std::size_t> case_index;
  std::vector<std::set<std::size_t>> case_flags;
  for (const auto& rec : records) {
    validate_labels(rec.labels);
    auto [it, fresh] = case_index.try_emplace(rec.case_id, case_ids.size());
    if (fresh) {
      case_ids.push_back(rec.case_id);
      case_flags.emplace_back();
    }
    auto& flags = case_flags[it->second];
    flags.insert(rec.labels.fixation);
    flags.insert(2 + rec.labels.tissue);
    flags.insert(2 + N_TISSUE + rec.labels.procedure);
    flags.insert(2 + N_TISSUE + 2 + rec.labels.staining);
  }
  const std::size_t n_cases = case_ids.size();

  std::array<long, 3> capacity = detail::apportion(n_cases, fractions);
  std::vector<std::vector<std::size_t>> label_cases(N_FLAGS);
  for (std::size_t c = 0; c < n_cases; ++c)
    for (auto f : case_flags[c]) label_cases[f].push_back(c);
  std::vector<std::array<long, 3>> demand(N_FLAGS);
  for (std::size_t f = 0; f < N_FLAGS; ++f)
    demand[f] = detail::apportion(label_cases[f].size(), fractions);

  std::vector<int> assigned(n_cases, -1);
  std::vector<std::size_t> unassigned_per_label(N_FLAGS);
  for (std::size_t f = 0; f < N_FLAGS; ++f) unassigned_per_label[f] = label_cases[f].size();

  RngStream rng(seed, 71);
  std::size_t left = n_cases;
  while (left > 0) {
    // rarest label that still has unassigned cases
    std::size_t pick = N_FLAGS;
    for (std::size_t f = 0; f < N_FLAGS; ++f) {
      if (unassigned_per_label[f] == 0) continue;
      if (pick == N_FLAGS || unassigned_per_label[f] < unassigned_per_label[pick]) pick = f;
    }
    if (pick == N_FLAGS) break;  // unreachable: every case carries four flags

    for (std::size_t c : label_cases[pick]) {
      if (assigned[c] != -1) continue;
      int best = -1;
      int n_tied = 0;
      for (int s = 0; s < 3; ++s) {
        if (best == -1 || demand[pick][s] > demand[pick][best] ||
            (demand[pick][s] == demand[pick][best] && capacity[s] > capacity[best])) {
          best = s;
          n_tied = 1;
        } else if (demand[pick][s] == demand[pick][best] && capacity[s] == capacity[best]) {
          // reservoir pick among exact ties
          ++n_tied;
          if (rng.next_below(static_cast<std::uint64_t>(n_tied)) == 0) best = s;
        }
      }
      assigned[c] = best;
      capacity[best] -= 1;
      for (auto f : case_flags[c]) {
        demand[f][best] -= 1;
        unassigned_per_label[f] -= 1;
      }
      --left;
    }
  }

  SplitAssignment out;
  for (std::size_t c = 0; c < n_cases; ++c)
    out.by_case[case_ids[c]] = static_cast<Split>(assigned[c]);
  return out;
}

inline std::vector<SlideRecord> records_in_split(const std::vector<SlideRecord>& records,
                                                 const SplitAssignment& split, Split which) {
  std::vector<SlideRecord> out;
  for (const auto& rec : records)
    if (split.of(rec.case_id) == which) out.push_back(rec);
  return out;
}

// ---------------------------------------------------------------------------
// Combination resampling (training split only)
// ---------------------------------------------------------------------------

// Rare combinations are upsampled with replacement to up_target records,
// abundant ones downsampled without replacement to down_cap; in-band counts
// pass through untouched and absent combinations stay absent. Output is
// ordered by combination index.
inline std::vector<SlideRecord> resample_combinations(const std::vector<SlideRecord>& records,
                                                      std::size_t up_target,
                                                      std::size_t down_cap, std::uint64_t seed) {
  if (up_target > down_cap)
    throw ConfigError("resample: up_target " + std::to_string(up_target) + " exceeds down_cap " +
                      std::to_string(down_cap));
  std::vector<std::vector<std::size_t>> by_combo(N_COMBINATIONS);
  for (std::size_t i = 0; i < records.size(); ++i)
    by_combo[combination_index(records[i].labels)].push_back(i);

  RngStream root(seed, 91);
  std::vector<SlideRecord> out;
  for (std::size_t combo = 0; combo < N_COMBINATIONS; ++combo) {
    auto& idx = by_combo[combo];
    if (idx.empty()) continue;
    auto rng = root.substream(combo);
    if (idx.size() < up_target) {
      for (auto i : idx) out.push_back(records[i]);
      for (std::size_t k = idx.size(); k < up_target; ++k)
        out.push_back(records[idx[rng.next_below(idx.size())]]);
    } else if (idx.size() > down_cap) {
      // partial Fisher-Yates, then restore original relative order
      std::vector<std::size_t> pool = idx;
      for (std::size_t k = 0; k < down_cap; ++k) {
        const std::size_t j = k + rng.next_below(pool.size() - k);
        std::swap(pool[k], pool[j]);
      }
      pool.resize(down_cap);
      std::sort(pool.begin(), pool.end());
      for (auto i : pool) out.push_back(records[i]);
    } else {
      for (auto i : idx) out.push_back(records[i]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest I/O (JSON lines, one record per line)
// ---------------------------------------------------------------------------
namespace detail {

template <std::size_t N>
std::size_t enum_index(const std::array<std::string, N>& names, const std::string& value,
                       const char* field, std::size_t line_no) {
  for (std::size_t i = 0; i < N; ++i)
    if (names[i] == value) return i;
  throw ParseError("manifest line " + std::to_string(line_no) + ": unknown " +
                   std::string(field) + " value '" + value + "'");
}

inline nlohmann::ordered_json record_to_json(const SlideRecord& rec) {
  nlohmann::ordered_json j;
  j["case_id"] = rec.case_id;
  j["slide_id"] = rec.slide_id;
  j["fixation"] = fixation_names()[rec.labels.fixation];
  j["tissue"] = tissue_names()[rec.labels.tissue];
  j["procedure"] = procedure_names()[rec.labels.procedure];
  j["staining"] = staining_names()[rec.labels.staining];
  j["slide_features"] = rec.slide_features.values();
  j["patch_features"] = {rec.patch_features[0].values(), rec.patch_features[1].values(),
                         rec.patch_features[2].values()};
  j["text_tokens"] = rec.text_tokens;
  j["primary_site"] = tissue_names()[rec.primary_site];
  return j;
}

}  // namespace detail

inline void save_manifest(const std::vector<SlideRecord>& records, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open manifest for writing: " + path);
  for (const auto& rec : records) out << detail::record_to_json(rec).dump() << '\n';
}

inline std::vector<SlideRecord> load_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open manifest: " + path);
  std::vector<SlideRecord> out;
  std::set<std::string> seen_slides;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    auto field = [&](const char* name) -> const nlohmann::json& {
      auto it = j.find(name);
      if (it == j.end())
        throw ParseError("manifest line " + std::to_string(line_no) + ": missing field '" +
                         name + "'");
      return *it;
    };
    try {
      SlideRecord rec;
      rec.case_id = field("case_id").get<std::string>();
      rec.slide_id = field("slide_id").get<std::string>();
      rec.labels.fixation = detail::enum_index(fixation_names(),
                                               field("fixation").get<std::string>(), "fixation",
                                               line_no);
      rec.labels.tissue = detail::enum_index(tissue_names(), field("tissue").get<std::string>(),
                                             "tissue", line_no);
      rec.labels.procedure = detail::enum_index(
          procedure_names(), field("procedure").get<std::string>(), "procedure", line_no);
      rec.labels.staining = detail::enum_index(
          staining_names(), field("staining").get<std::string>(), "staining", line_no);
      rec.slide_features = RealVec(field("slide_features").get<std::vector<double>>());
      const auto& patches = field("patch_features");
      if (!patches.is_array() || patches.size() != 3)
        throw ParseError("manifest line " + std::to_string(line_no) +
                         ": patch_features must hold exactly 3 arrays");
      for (int k = 0; k < 3; ++k)
        rec.patch_features[k] = RealVec(patches[k].get<std::vector<double>>());
      rec.text_tokens = field("text_tokens").get<std::vector<std::int32_t>>();
      for (auto t : rec.text_tokens)
        if (t < 0)
          throw ParseError("manifest line " + std::to_string(line_no) + ": negative token id");
      rec.primary_site = detail::enum_index(
          tissue_names(), field("primary_site").get<std::string>(), "primary_site", line_no);
      if (!seen_slides.insert(rec.slide_id).second)
        throw DataError("manifest line " + std::to_string(line_no) + ": duplicate slide_id '" +
                        rec.slide_id + "'");
      out.push_back(std::move(rec));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

// Order-insensitive fingerprint of a record multiset; used to audit that
// evaluation splits are never mutated.
inline std::uint64_t dataset_fingerprint(const std::vector<SlideRecord>& records) {
  std::vector<std::string> lines;
  lines.reserve(records.size());
  for (const auto& rec : records) lines.push_back(detail::record_to_json(rec).dump());
  std::sort(lines.begin(), lines.end());
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a over the sorted dump
  for (const auto& line : lines) {
    for (unsigned char ch : line) {
      h ^= ch;
      h *= 1099511628211ULL;
    }
    h ^= 0x0A;
    h *= 1099511628211ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Split persistence
// ---------------------------------------------------------------------------
inline void save_split(const SplitAssignment& split, const std::string& path) {
  nlohmann::json assign;  // std::map-backed object: keys serialize sorted
  for (const auto& [case_id, s] : split.by_case)
    assign[case_id] = split_names()[static_cast<std::size_t>(s)];
  nlohmann::ordered_json j;
  j["format"] = "mmfuse-split";
  j["assign"] = assign;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open split file for writing: " + path);
  out << j.dump(2) << '\n';
}

inline SplitAssignment load_split(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open split file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("split file: ") + e.what());
  }
  if (!j.contains("assign") || !j["assign"].is_object())
    throw ParseError("split file: missing 'assign' object");
  SplitAssignment out;
  for (const auto& [case_id, name] : j["assign"].items()) {
    const std::string s = name.get<std::string>();
    bool found = false;
    for (std::size_t k = 0; k < 3; ++k)
      if (split_names()[k] == s) {
        out.by_case[case_id] = static_cast<Split>(k);
        found = true;
      }
    if (!found) throw ParseError("split file: unknown split name '" + s + "'");
  }
  return out;
}

}  // namespace mmfuse
