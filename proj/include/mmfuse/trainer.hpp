#pragma once

// Experiment orchestration: builds a model for a modality/task cell, runs the
// training loop (resampling the training split only), evaluates on the three
// splits' held-out portions and persists run artifacts. Matrix runs share
// dataset splits and evaluation seeds so every comparison is paired.

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mmfuse/checkpoint.hpp"
#include "mmfuse/data.hpp"
#include "mmfuse/errors.hpp"
#include "mmfuse/metrics.hpp"
#include "mmfuse/nn.hpp"

namespace mmfuse {

// Encoder width knobs, sized for desk-scale feature vectors.
struct ModelSizes {
  std::size_t slide_hidden = 32;
  std::size_t slide_out = 16;
  std::size_t patch_hidden = 16;
  std::size_t patch_out = 8;
  std::size_t text_embed = 16;
  std::size_t text_out = 16;
  std::size_t structured_out = 8;
  std::size_t vocab_size = 96;
  std::size_t max_seq_len = 64;
  Activation activation = Activation::relu;
};

struct ExperimentConfig {
  std::string name = "MM";
  bool use_slide = true;
  bool use_patch = true;
  bool use_text = true;
  bool use_structured = true;
  std::vector<Task> tasks = {Task::fixation, Task::tissue, Task::procedure, Task::staining};

  FusionStrategy fusion = FusionStrategy::concat;
  FusionStrategy image_fusion = FusionStrategy::concat;
  std::size_t cbp_output_dim = 256;
  bool shared_sketch = false;

  double focal_gamma = 2.0;
  double focal_alpha = 0.5;
  bool ss_includes_lmulti = false;  // keep the multi-objective term in single-task runs

  OptimizerConfig optimizer;
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  bool resample_train = true;
  std::size_t resample_up = 50;
  std::size_t resample_down = 100;
  // Draw fresh patch vectors every epoch instead of keeping the generated
  // ones fixed; needs the generator config of the dataset (see run_experiment).
  bool repatch_per_epoch = false;

  std::size_t eval_resamples = 1000;
  double eval_level = 0.95;

  ModelSizes sizes;
  std::uint64_t seed = 0;

  bool multitask() const { return tasks.size() > 1; }
  bool include_multi() const { return multitask() || ss_includes_lmulti; }
};

inline void validate_experiment_config(const ExperimentConfig& cfg) {
  if (cfg.tasks.empty()) throw ConfigError("experiment: empty task set");
  std::set<std::size_t> seen;
  for (auto t : cfg.tasks)
    if (!seen.insert(static_cast<std::size_t>(t)).second)
      throw ConfigError("experiment: duplicate task");
  if (!cfg.use_slide && !cfg.use_text && !cfg.use_structured)
    throw ConfigError("experiment: empty modality set");
  if (cfg.use_patch && !cfg.use_slide) throw ConfigError("experiment: patch requires slide");
  if (cfg.batch_size == 0) throw ConfigError("experiment: batch_size must be >= 1");
  if (cfg.resample_up > cfg.resample_down)
    throw ConfigError("experiment: resample_up exceeds resample_down");
  if (!is_power_of_two(cfg.cbp_output_dim))
    throw ConfigError("experiment: cbp_output_dim must be a power of two");
  if (!(cfg.focal_gamma >= 0.0)) throw ConfigError("experiment: focal_gamma must be >= 0");
  if (!(cfg.focal_alpha >= 0.0 && cfg.focal_alpha <= 1.0))
    throw ConfigError("experiment: focal_alpha must be in [0,1]");
  if (cfg.eval_resamples < 100) throw ConfigError("experiment: eval_resamples must be >= 100");
}

// ---- config (de)serialization ------------------------------------------------

inline ojson to_json(const ExperimentConfig& c) {
  ojson j;
  j["name"] = c.name;
  j["modalities"] = ojson::array();
  if (c.use_slide) j["modalities"].push_back("slide");
  if (c.use_patch) j["modalities"].push_back("patch");
  if (c.use_text) j["modalities"].push_back("text");
  if (c.use_structured) j["modalities"].push_back("structured");
  j["tasks"] = ojson::array();
  for (auto t : c.tasks) j["tasks"].push_back(task_names()[static_cast<std::size_t>(t)]);
  j["fusion"] = to_string(c.fusion);
  j["image_fusion"] = to_string(c.image_fusion);
  j["cbp_output_dim"] = c.cbp_output_dim;
  j["shared_sketch"] = c.shared_sketch;
  j["focal_gamma"] = c.focal_gamma;
  j["focal_alpha"] = c.focal_alpha;
  j["ss_includes_lmulti"] = c.ss_includes_lmulti;
  j["optimizer"] = {{"beta1", c.optimizer.beta1},       {"beta2", c.optimizer.beta2},
                    {"epsilon", c.optimizer.epsilon},   {"clip_norm", c.optimizer.clip_norm},
                    {"lr0", c.optimizer.lr0},           {"decay", c.optimizer.decay},
                    {"decay_every", c.optimizer.decay_every}};
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["resample_train"] = c.resample_train;
  j["resample_up"] = c.resample_up;
  j["resample_down"] = c.resample_down;
  j["repatch_per_epoch"] = c.repatch_per_epoch;
  j["eval_resamples"] = c.eval_resamples;
  j["eval_level"] = c.eval_level;
  j["sizes"] = {{"slide_hidden", c.sizes.slide_hidden},
                {"slide_out", c.sizes.slide_out},
                {"patch_hidden", c.sizes.patch_hidden},
                {"patch_out", c.sizes.patch_out},
                {"text_embed", c.sizes.text_embed},
                {"text_out", c.sizes.text_out},
                {"structured_out", c.sizes.structured_out},
                {"vocab_size", c.sizes.vocab_size},
                {"max_seq_len", c.sizes.max_seq_len},
                {"activation", to_string(c.sizes.activation)}};
  j["seed"] = c.seed;
  return j;
}

inline ExperimentConfig experiment_config_from_json(const json& j) {
  ExperimentConfig c;
  c.name = j.value("name", std::string("MM"));
  if (j.contains("modalities")) {
    c.use_slide = c.use_patch = c.use_text = c.use_structured = false;
    for (const auto& m : j.at("modalities")) {
      const std::string s = m.get<std::string>();
      if (s == "slide")
        c.use_slide = true;
      else if (s == "patch")
        c.use_patch = true;
      else if (s == "text")
        c.use_text = true;
      else if (s == "structured")
        c.use_structured = true;
      else
        throw ConfigError("experiment config: unknown modality '" + s + "'");
    }
  }
  if (j.contains("tasks")) {
    c.tasks.clear();
    for (const auto& t : j.at("tasks")) {
      const std::string s = t.get<std::string>();
      bool found = false;
      for (std::size_t k = 0; k < N_TASKS; ++k)
        if (task_names()[k] == s) {
          c.tasks.push_back(static_cast<Task>(k));
          found = true;
        }
      if (!found) throw ConfigError("experiment config: unknown task '" + s + "'");
    }
  }
  if (j.contains("fusion")) c.fusion = fusion_strategy_from_string(j.at("fusion").get<std::string>());
  if (j.contains("image_fusion"))
    c.image_fusion = fusion_strategy_from_string(j.at("image_fusion").get<std::string>());
  c.cbp_output_dim = j.value("cbp_output_dim", c.cbp_output_dim);
  c.shared_sketch = j.value("shared_sketch", c.shared_sketch);
  c.focal_gamma = j.value("focal_gamma", c.focal_gamma);
  c.focal_alpha = j.value("focal_alpha", c.focal_alpha);
  c.ss_includes_lmulti = j.value("ss_includes_lmulti", c.ss_includes_lmulti);
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
    c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
    c.optimizer.epsilon = o.value("epsilon", c.optimizer.epsilon);
    c.optimizer.clip_norm = o.value("clip_norm", c.optimizer.clip_norm);
    c.optimizer.lr0 = o.value("lr0", c.optimizer.lr0);
    c.optimizer.decay = o.value("decay", c.optimizer.decay);
    c.optimizer.decay_every = o.value("decay_every", c.optimizer.decay_every);
  }
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.resample_train = j.value("resample_train", c.resample_train);
  c.resample_up = j.value("resample_up", c.resample_up);
  c.resample_down = j.value("resample_down", c.resample_down);
  c.repatch_per_epoch = j.value("repatch_per_epoch", c.repatch_per_epoch);
  c.eval_resamples = j.value("eval_resamples", c.eval_resamples);
  c.eval_level = j.value("eval_level", c.eval_level);
  if (j.contains("sizes")) {
    const auto& s = j.at("sizes");
    c.sizes.slide_hidden = s.value("slide_hidden", c.sizes.slide_hidden);
    c.sizes.slide_out = s.value("slide_out", c.sizes.slide_out);
    c.sizes.patch_hidden = s.value("patch_hidden", c.sizes.patch_hidden);
    c.sizes.patch_out = s.value("patch_out", c.sizes.patch_out);
    c.sizes.text_embed = s.value("text_embed", c.sizes.text_embed);
    c.sizes.text_out = s.value("text_out", c.sizes.text_out);
    c.sizes.structured_out = s.value("structured_out", c.sizes.structured_out);
    c.sizes.vocab_size = s.value("vocab_size", c.sizes.vocab_size);
    c.sizes.max_seq_len = s.value("max_seq_len", c.sizes.max_seq_len);
    if (s.contains("activation"))
      c.sizes.activation = activation_from_string(s.at("activation").get<std::string>());
  }
  c.seed = j.value("seed", c.seed);
  return c;
}

inline std::string config_hash(const ExperimentConfig& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a(to_json(cfg).dump())));
  return buf;
}

// ---- dataset adapters ---------------------------------------------------------

struct DataDims {
  std::size_t slide_dim = 0;
  std::size_t patch_dim = 0;
};

inline DataDims infer_data_dims(const std::vector<SlideRecord>& records) {
  if (records.empty()) throw DataError("cannot infer feature dims from an empty dataset");
  return {records.front().slide_features.size(), records.front().patch_features[0].size()};
}

inline ModelConfig build_model_config(const ExperimentConfig& cfg, const DataDims& dims,
                                      std::uint64_t init_seed) {
  ModelConfig m;
  m.use_slide = cfg.use_slide;
  m.use_patch = cfg.use_patch;
  m.use_text = cfg.use_text;
  m.use_structured = cfg.use_structured;
  const Activation act = cfg.sizes.activation;
  m.slide_encoder = {EncoderSpec::Kind::dense, dims.slide_dim,
                     {cfg.sizes.slide_hidden},   cfg.sizes.slide_out,
                     act,                        64};
  m.patch_encoder = {EncoderSpec::Kind::dense, dims.patch_dim,
                     {cfg.sizes.patch_hidden},   cfg.sizes.patch_out,
                     act,                        64};
  m.text_encoder = {EncoderSpec::Kind::embedding, cfg.sizes.vocab_size,
                    {cfg.sizes.text_embed},       cfg.sizes.text_out,
                    act,                          cfg.sizes.max_seq_len};
  m.structured_encoder = {EncoderSpec::Kind::dense, N_TISSUE, {}, cfg.sizes.structured_out, act,
                          64};
  m.fusion.strategy = cfg.fusion;
  m.fusion.image_scale_strategy = cfg.image_fusion;
  m.fusion.cbp_output_dim = cfg.cbp_output_dim;
  m.fusion.shared_sketch = cfg.shared_sketch;
  m.fusion.sketch_seed = RngStream::fmix64(init_seed ^ 0x5ce7cbULL);
  for (auto t : cfg.tasks)
    m.tasks.push_back({task_names()[static_cast<std::size_t>(t)], task_class_count(t)});
  m.init_seed = init_seed;
  return m;
}

inline SampleInput to_input(const SlideRecord& rec, const ModelConfig& m) {
  SampleInput in;
  if (m.use_slide) in.slide = rec.slide_features;
  if (m.use_patch) in.patches = rec.patch_features;
  if (m.use_text) in.text = truncate_pad_text(rec.text_tokens, m.text_encoder.max_seq_len);
  if (m.use_structured) in.structured = encode_structured(rec.primary_site);
  return in;
}

inline std::vector<std::vector<std::size_t>> to_labels(const std::vector<SlideRecord>& records,
                                                       const std::vector<Task>& tasks) {
  std::vector<std::vector<std::size_t>> labels(tasks.size());
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    labels[t].reserve(records.size());
    for (const auto& rec : records) labels[t].push_back(rec.labels.value(tasks[t]));
  }
  return labels;
}

// ---- evaluation ----------------------------------------------------------------

struct EvalRow {
  std::string dataset;  // val | test
  std::string config;   // cell name
  std::string task;
  std::string metric;  // auc_roc | auc_pr
  double point = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  std::size_t n_resamples = 0;
  std::string skipped_classes;  // '|'-joined class names excluded from the macro
};

using EvalReport = std::vector<EvalRow>;

inline EvalReport evaluate_model(const SharedModel& model, const ExperimentConfig& cfg,
                                 const std::vector<SlideRecord>& records,
                                 const std::string& dataset_name) {
  if (records.empty()) throw DataError("evaluate: empty dataset '" + dataset_name + "'");
  std::vector<SampleInput> inputs;
  inputs.reserve(records.size());
  for (const auto& rec : records) inputs.push_back(to_input(rec, model.config));
  auto probs = forward(model, inputs);
  auto labels = to_labels(records, cfg.tasks);

  EvalReport rows;
  for (std::size_t t = 0; t < cfg.tasks.size(); ++t) {
    ScoredLabels scored;
    scored.scores = probs[t];
    scored.labels = labels[t];
    for (const auto& rec : records) scored.case_ids.push_back(rec.case_id);

    const auto task = cfg.tasks[t];
    const auto& names = task == Task::tissue
                            ? std::vector<std::string>(tissue_names().begin(), tissue_names().end())
                            : std::vector<std::string>{};
    for (auto kind : {MetricKind::roc, MetricKind::pr}) {
      EvalRow row;
      row.dataset = dataset_name;
      row.config = cfg.name;
      row.task = task_names()[static_cast<std::size_t>(task)];
      row.metric = to_string(kind);
      auto detailed = macro_auc_detailed(scored, kind);
      auto ci = bootstrap_ci(scored, kind, cfg.eval_resamples, cfg.eval_level, cfg.seed);
      row.point = ci.point;
      row.ci_lo = ci.lo;
      row.ci_hi = ci.hi;
      row.n_resamples = cfg.eval_resamples;
      std::string skipped;
      for (auto c : detailed.skipped_classes) {
        if (!skipped.empty()) skipped += '|';
        skipped += names.empty() ? std::to_string(c) : names[c];
      }
      row.skipped_classes = skipped;
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

// ---- CSV helpers -----------------------------------------------------------------

namespace detail {
inline std::string fmt6(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", x);
  return buf;
}
inline std::string fmt9(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", x);
  return buf;
}
}  // namespace detail

inline void write_eval_csv(const EvalReport& rows, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open eval csv for writing: " + path);
  out << "dataset,config,task,metric,point,ci_lo,ci_hi,n_resamples,skipped_classes\n";
  for (const auto& r : rows)
    out << r.dataset << ',' << r.config << ',' << r.task << ',' << r.metric << ','
        << detail::fmt6(r.point) << ',' << detail::fmt6(r.ci_lo) << ',' << detail::fmt6(r.ci_hi)
        << ',' << r.n_resamples << ',' << r.skipped_classes << '\n';
}

inline EvalReport read_eval_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open eval csv: " + path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("eval csv: empty file: " + path);
  if (line.rfind("dataset,config,task,metric,point", 0) != 0)
    throw ParseError("eval csv: unexpected header in " + path);
  EvalReport rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> parts;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) parts.push_back(field);
    while (parts.size() < 9) parts.emplace_back();
    if (parts.size() != 9)
      throw ParseError("eval csv line " + std::to_string(line_no) + ": expected 9 fields");
    EvalRow r;
    r.dataset = parts[0];
    r.config = parts[1];
    r.task = parts[2];
    r.metric = parts[3];
    try {
      r.point = std::stod(parts[4]);
      r.ci_lo = std::stod(parts[5]);
      r.ci_hi = std::stod(parts[6]);
      r.n_resamples = static_cast<std::size_t>(std::stoull(parts[7]));
    } catch (const std::exception&) {
      throw ParseError("eval csv line " + std::to_string(line_no) + ": bad numeric field");
    }
    r.skipped_classes = parts[8];
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---- the experiment runner ----------------------------------------------------------

struct EpochStats {
  double mean_total = 0.0;
  double mean_multi = 0.0;
};

struct RunRecord {
  std::string cell;
  std::string config_hash;
  EvalReport eval_rows;  // val and test rows for every task of the cell
  std::vector<EpochStats> epochs;
  std::uint64_t train_fingerprint = 0;
  std::uint64_t val_fingerprint = 0;
  std::uint64_t test_fingerprint = 0;
  std::vector<std::string> run_dirs;
};

namespace detail {

inline LossConfig make_loss_config(const ExperimentConfig& cfg) {
  LossConfig lc;
  lc.focal.assign(cfg.tasks.size(), FocalConfig{cfg.focal_gamma, cfg.focal_alpha});
  lc.include_multi = cfg.include_multi();
  return lc;
}

struct TrainedRun {
  SharedModel model;
  OptimizerState optimizer;
  std::vector<EpochStats> epochs;
  std::vector<std::string> log_lines;  // training-log CSV body
};

inline TrainedRun train_model(const ExperimentConfig& cfg, const std::vector<SlideRecord>& train,
                              const DataDims& dims, std::uint64_t run_seed,
                              const SynthConfig* repatch_source) {
  TrainedRun run{make_model(build_model_config(cfg, dims, run_seed)), OptimizerState{}, {}, {}};
  run.optimizer = OptimizerState::init(run.model, cfg.optimizer);
  const LossConfig loss_cfg = make_loss_config(cfg);

  std::vector<SlideRecord> repatched;
  auto build_inputs = [&](const std::vector<SlideRecord>& recs) {
    std::vector<SampleInput> out;
    out.reserve(recs.size());
    for (const auto& rec : recs) out.push_back(to_input(rec, run.model.config));
    return out;
  };
  std::vector<SampleInput> inputs = build_inputs(train);
  auto labels = to_labels(train, cfg.tasks);

  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  RngStream shuffle_root(run_seed, 303);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (repatch_source != nullptr && cfg.use_patch) {
      repatched = train;
      regenerate_patch_features(repatched, *repatch_source, epoch);
      inputs = build_inputs(repatched);
    }
    auto rng = shuffle_root.substream(epoch);
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.next_below(i)]);

    EpochStats stats;
    std::size_t n_steps = 0;
    for (std::size_t at = 0; at < order.size(); at += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), at + cfg.batch_size);
      std::vector<SampleInput> batch;
      std::vector<std::vector<std::size_t>> batch_labels(cfg.tasks.size());
      for (std::size_t k = at; k < end; ++k) {
        batch.push_back(inputs[order[k]]);
        for (std::size_t t = 0; t < cfg.tasks.size(); ++t)
          batch_labels[t].push_back(labels[t][order[k]]);
      }
      const double lr = scheduled_lr(run.optimizer.config, run.optimizer.step);
      auto [breakdown, grads] = backward(run.model, batch, batch_labels, loss_cfg);
      adam_step(run.optimizer, run.model, grads);

      std::string line = std::to_string(run.optimizer.step - 1) + ',' + std::to_string(epoch) +
                         ',' + fmt9(lr) + ',' + fmt9(breakdown.total) + ',' +
                         fmt9(breakdown.multi);
      for (std::size_t t = 0; t < cfg.tasks.size(); ++t)
        line += ',' + fmt9(breakdown.focal_per_task[t]);
      for (std::size_t t = 0; t < cfg.tasks.size(); ++t)
        line += ',' + fmt9(breakdown.sigma_sq[t]);
      run.log_lines.push_back(std::move(line));

      stats.mean_total += breakdown.total;
      stats.mean_multi += breakdown.multi;
      ++n_steps;
    }
    if (n_steps > 0) {
      stats.mean_total /= static_cast<double>(n_steps);
      stats.mean_multi /= static_cast<double>(n_steps);
    }
    run.epochs.push_back(stats);
  }
  return run;
}

inline std::string train_log_header(const ExperimentConfig& cfg) {
  std::string header = "step,epoch,lr,total,multi";
  for (auto t : cfg.tasks)
    header += ",focal_" + task_names()[static_cast<std::size_t>(t)];
  for (auto t : cfg.tasks)
    header += ",sigma_sq_" + task_names()[static_cast<std::size_t>(t)];
  return header;
}

}  // namespace detail

// Trains one configuration on the train split, evaluates the val and test
// splits, and (when out_dir is non-empty) persists config copy, training-log
// CSV, EvalReport CSV and checkpoint under out_dir. repatch_source supplies
// the generator config when repatch_per_epoch is on; evaluation always uses
// the stored patch vectors.
inline RunRecord run_experiment(const ExperimentConfig& cfg,
                                const std::vector<SlideRecord>& records,
                                const SplitAssignment& split, const std::string& out_dir = {},
                                const SynthConfig* repatch_source = nullptr) {
  validate_experiment_config(cfg);
  if (cfg.repatch_per_epoch && repatch_source == nullptr)
    throw ConfigError("experiment: repatch_per_epoch needs the dataset's generator config");

  auto train = records_in_split(records, split, Split::train);
  auto val = records_in_split(records, split, Split::val);
  auto test = records_in_split(records, split, Split::test);
  if (train.empty() || val.empty() || test.empty())
    throw DataError("experiment: every split must be non-empty");

  // leakage audit: no evaluation case may appear in a training batch
  {
    std::set<std::string> train_cases;
    for (const auto& r : train) train_cases.insert(r.case_id);
    for (const auto& r : val)
      if (train_cases.count(r.case_id))
        throw DataError("experiment: case " + r.case_id + " leaks between train and val");
    for (const auto& r : test)
      if (train_cases.count(r.case_id))
        throw DataError("experiment: case " + r.case_id + " leaks between train and test");
  }

  RunRecord record;
  record.cell = cfg.name;
  record.config_hash = config_hash(cfg);
  record.val_fingerprint = dataset_fingerprint(val);
  record.test_fingerprint = dataset_fingerprint(test);

  if (cfg.resample_train)
    train = resample_combinations(train, cfg.resample_up, cfg.resample_down,
                                  RngStream::fmix64(cfg.seed ^ 0x7e5a3fULL));
  record.train_fingerprint = dataset_fingerprint(train);

  const DataDims dims = infer_data_dims(records);
  const std::uint64_t run_seed = RngStream::fmix64(cfg.seed ^ fnv1a(cfg.name));
  auto run = detail::train_model(cfg, train, dims, run_seed,
                                 cfg.repatch_per_epoch ? repatch_source : nullptr);
  record.epochs = run.epochs;

  auto val_rows = evaluate_model(run.model, cfg, val, "val");
  auto test_rows = evaluate_model(run.model, cfg, test, "test");
  record.eval_rows = val_rows;
  record.eval_rows.insert(record.eval_rows.end(), test_rows.begin(), test_rows.end());

  if (!out_dir.empty()) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    {
      std::ofstream out(out_dir + "/config.json", std::ios::binary);
      out << to_json(cfg).dump(2) << '\n';
    }
    {
      std::ofstream out(out_dir + "/train_log.csv", std::ios::binary);
      out << detail::train_log_header(cfg) << '\n';
      for (const auto& line : run.log_lines) out << line << '\n';
    }
    write_eval_csv(record.eval_rows, out_dir + "/eval.csv");
    save_checkpoint(run.model, run.optimizer, out_dir + "/checkpoint.json");
    {
      ojson meta;
      meta["cell"] = cfg.name;
      meta["config_hash"] = record.config_hash;
      meta["seed"] = cfg.seed;
      meta["train_fingerprint"] = record.train_fingerprint;
      meta["val_fingerprint"] = record.val_fingerprint;
      meta["test_fingerprint"] = record.test_fingerprint;
      meta["param_count"] = param_count(run.model);
      std::ofstream out(out_dir + "/meta.json", std::ios::binary);
      out << meta.dump(2) << '\n';
    }
    record.run_dirs.push_back(out_dir);
  }
  return record;
}

// ---- the experiment matrix ------------------------------------------------------

struct MatrixCell {
  std::string name;
  bool multimodal = false;
  bool multitask = false;
  std::vector<std::string> ablate;  // subset of {text, structured, patch}
};

inline MatrixCell standard_cell(const std::string& name) {
  if (name == "SS") return {"SS", false, false, {}};
  if (name == "SM") return {"SM", false, true, {}};
  if (name == "MS") return {"MS", true, false, {}};
  if (name == "MM") return {"MM", true, true, {}};
  throw ConfigError("unknown matrix cell '" + name + "' (expected SS, SM, MS or MM)");
}

inline MatrixCell ablation_cell(const std::string& modality) {
  if (modality != "text" && modality != "structured" && modality != "patch")
    throw ConfigError("unknown ablation '" + modality + "' (expected text, structured or patch)");
  return {"MM_wo_" + modality, true, true, {modality}};
}

// Experiment configuration of one cell; single-task cells pass the task they
// are instantiated for.
inline ExperimentConfig cell_config(const ExperimentConfig& base, const MatrixCell& cell,
                                    std::optional<Task> task = std::nullopt) {
  ExperimentConfig cfg = base;
  cfg.name = cell.name;
  cfg.use_slide = true;
  cfg.use_patch = true;
  cfg.use_text = cell.multimodal;
  cfg.use_structured = cell.multimodal;
  for (const auto& a : cell.ablate) {
    if (a == "text") cfg.use_text = false;
    if (a == "structured") cfg.use_structured = false;
    if (a == "patch") cfg.use_patch = false;
  }
  if (cell.multitask) {
    cfg.tasks = base.tasks;
  } else {
    if (!task) throw ConfigError("single-task cell '" + cell.name + "' needs a task");
    cfg.tasks = {*task};
  }
  return cfg;
}

// Runs every cell on the same records and split. Single-task cells train one
// model per task; their per-task rows merge into the cell's record. All cells
// inherit the base seed, so bootstrap draws are paired.
inline std::vector<RunRecord> run_matrix(const ExperimentConfig& base,
                                         const std::vector<MatrixCell>& cells,
                                         const std::vector<SlideRecord>& records,
                                         const SplitAssignment& split,
                                         const std::string& out_root = {},
                                         const SynthConfig* repatch_source = nullptr) {
  if (cells.empty()) throw ConfigError("matrix: no cells");
  std::set<std::string> names;
  for (const auto& c : cells)
    if (!names.insert(c.name).second) throw ConfigError("matrix: duplicate cell " + c.name);

  std::vector<RunRecord> out;
  for (const auto& cell : cells) {
    RunRecord merged;
    merged.cell = cell.name;
    if (cell.multitask) {
      const std::string dir = out_root.empty() ? "" : out_root + "/" + cell.name + "/all";
      merged = run_experiment(cell_config(base, cell), records, split, dir, repatch_source);
    } else {
      for (auto task : base.tasks) {
        auto cfg = cell_config(base, cell, task);
        const std::string dir =
            out_root.empty() ? ""
                             : out_root + "/" + cell.name + "/" +
                                   task_names()[static_cast<std::size_t>(task)];
        auto rec = run_experiment(cfg, records, split, dir, repatch_source);
        merged.config_hash = merged.config_hash.empty()
                                 ? rec.config_hash
                                 : merged.config_hash + "+" + rec.config_hash;
        merged.eval_rows.insert(merged.eval_rows.end(), rec.eval_rows.begin(),
                                rec.eval_rows.end());
        merged.epochs = rec.epochs;
        merged.train_fingerprint = rec.train_fingerprint;
        merged.val_fingerprint = rec.val_fingerprint;
        merged.test_fingerprint = rec.test_fingerprint;
        for (const auto& d : rec.run_dirs) merged.run_dirs.push_back(d);
      }
    }
    out.push_back(std::move(merged));
  }

  // paired evaluation audit
  for (const auto& rec : out)
    if (rec.test_fingerprint != out.front().test_fingerprint)
      throw DataError("matrix: cells evaluated on different test sets");
  return out;
}

inline double eval_point(const EvalReport& rows, const std::string& dataset,
                         const std::string& task, const std::string& metric) {
  for (const auto& r : rows)
    if (r.dataset == dataset && r.task == task && r.metric == metric) return r.point;
  throw DataError("eval report: no row for " + dataset + "/" + task + "/" + metric);
}

}  // namespace mmfuse
