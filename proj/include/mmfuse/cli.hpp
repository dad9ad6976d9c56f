#pragma once

// Command implementations behind the mmfuse tool. Each command reads its
// prerequisites from --out, writes all artifacts under --out, and returns a
// process exit code: 0 success, 2 configuration error, 3 missing or invalid
// artifact, 4 pairing violation. The binary in tools/ only parses arguments
// and dispatches here, which keeps the whole surface testable in-process.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mmfuse/data.hpp"
#include "mmfuse/trainer.hpp"

namespace mmfuse::cli {

inline constexpr int EXIT_OK = 0;
inline constexpr int EXIT_CONFIG = 2;
inline constexpr int EXIT_ARTIFACT = 3;
inline constexpr int EXIT_PAIRING = 4;

struct Options {
  std::string config_path;                // --config
  std::string out;                        // --out
  std::optional<std::uint64_t> seed;      // --seed (else config, else MMFUSE_SEED)
  std::string cells;                      // --cells, comma list
  std::string ablate;                     // --ablate, comma list
  std::string fusion;                     // --fusion override
  bool quiet = false;                     // --quiet
  std::string run;                        // eval: run directory
  std::vector<std::string> run_dirs;      // report: run directories
};

// One config file drives every subcommand.
struct FullConfig {
  SynthConfig synth;
  std::array<double, 3> split_fractions = {0.8, 0.1, 0.1};
  std::uint64_t split_seed = 0;
  ExperimentConfig experiment;
  std::vector<std::string> matrix_cells = {"SS", "SM", "MS", "MM"};
  std::vector<std::string> matrix_ablate;
  bool plots = true;
};

inline ojson to_json(const FullConfig& c) {
  ojson j;
  j["synth"] = synth_config_to_json(c.synth);
  j["split"] = {{"fractions", c.split_fractions}, {"seed", c.split_seed}};
  j["experiment"] = to_json(c.experiment);
  j["matrix"] = {{"cells", c.matrix_cells}, {"ablate", c.matrix_ablate}, {"plots", c.plots}};
  return j;
}

inline FullConfig full_config_from_json(const json& j) {
  FullConfig c;
  if (j.contains("synth")) c.synth = synth_config_from_json(j.at("synth"));
  if (j.contains("split")) {
    const auto& s = j.at("split");
    if (s.contains("fractions")) {
      const auto f = s.at("fractions").get<std::vector<double>>();
      if (f.size() != 3) throw ConfigError("config field split.fractions must hold 3 values");
      c.split_fractions = {f[0], f[1], f[2]};
    }
    c.split_seed = s.value("seed", c.split_seed);
  }
  if (j.contains("experiment")) c.experiment = experiment_config_from_json(j.at("experiment"));
  if (j.contains("matrix")) {
    const auto& m = j.at("matrix");
    c.matrix_cells = m.value("cells", c.matrix_cells);
    c.matrix_ablate = m.value("ablate", c.matrix_ablate);
    c.plots = m.value("plots", c.plots);
  }
  return c;
}

namespace detail {

using mmfuse::detail::fmt6;

inline std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

inline std::optional<std::uint64_t> env_seed() {
  const char* v = std::getenv("MMFUSE_SEED");
  if (v == nullptr || *v == '\0') return std::nullopt;
  char* end = nullptr;
  const unsigned long long parsed = std::strtoull(v, &end, 10);
  if (end == nullptr || *end != '\0')
    throw ConfigError(std::string("MMFUSE_SEED is not an integer: ") + v);
  return static_cast<std::uint64_t>(parsed);
}

}  // namespace detail

// Resolves the config file plus seed precedence: --seed beats the config
// file's seeds, which beat MMFUSE_SEED, which beats the default of 0. A seed
// override (flag or env) applies to generator, split and experiment alike.
inline FullConfig resolve_config(const Options& opt) {
  FullConfig cfg;
  bool config_has_seed = false;
  if (!opt.config_path.empty()) {
    std::ifstream in(opt.config_path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file: " + opt.config_path);
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw ConfigError("config file " + opt.config_path + ": " + e.what());
    }
    try {
      cfg = full_config_from_json(j);
    } catch (const json::exception& e) {
      throw ConfigError("config file " + opt.config_path + ": " + e.what());
    }
    config_has_seed = (j.contains("synth") && j.at("synth").contains("seed")) ||
                      (j.contains("experiment") && j.at("experiment").contains("seed")) ||
                      (j.contains("split") && j.at("split").contains("seed"));
  }
  std::optional<std::uint64_t> override = opt.seed;
  if (!override && !config_has_seed) override = detail::env_seed();
  if (override) {
    cfg.synth.seed = *override;
    cfg.split_seed = *override;
    cfg.experiment.seed = *override;
  }
  if (!opt.fusion.empty())
    cfg.experiment.fusion = fusion_strategy_from_string(opt.fusion);
  return cfg;
}

namespace detail {

inline void require_out(const Options& opt) {
  if (opt.out.empty()) throw ConfigError("--out is required");
  std::filesystem::create_directories(opt.out);
}

inline std::string manifest_path(const Options& opt) { return opt.out + "/manifest.jsonl"; }
inline std::string split_path(const Options& opt) { return opt.out + "/split.json"; }

inline std::vector<SlideRecord> require_manifest(const Options& opt) {
  const auto path = manifest_path(opt);
  if (!std::filesystem::exists(path))
    throw DataError("missing manifest: " + path + " (run `mmfuse synth` first)");
  return load_manifest(path);
}

inline SplitAssignment require_split(const Options& opt) {
  const auto path = split_path(opt);
  if (!std::filesystem::exists(path))
    throw DataError("missing split: " + path + " (run `mmfuse split` first)");
  return load_split(path);
}

// Combination summary in the layout of a per-task label-distribution table.
inline void print_label_table(const std::vector<SlideRecord>& records, std::ostream& os) {
  const double n = static_cast<double>(records.size());
  os << "slides: " << records.size() << "\n";
  std::set<std::string> cases;
  for (const auto& r : records) cases.insert(r.case_id);
  os << "cases:  " << cases.size() << "\n";
  std::set<std::size_t> combos;
  for (const auto& r : records) combos.insert(combination_index(r.labels));
  os << "label combinations present: " << combos.size() << " / " << N_COMBINATIONS << "\n";
  for (std::size_t t = 0; t < N_TASKS; ++t) {
    const auto task = static_cast<Task>(t);
    os << task_names()[t] << ":\n";
    const std::size_t k = task_class_count(task);
    for (std::size_t c = 0; c < k; ++c) {
      std::size_t count = 0;
      for (const auto& r : records) count += r.labels.value(task) == c;
      std::string name;
      switch (task) {
        case Task::fixation: name = fixation_names()[c]; break;
        case Task::tissue: name = tissue_names()[c]; break;
        case Task::procedure: name = procedure_names()[c]; break;
        case Task::staining: name = staining_names()[c]; break;
      }
      char line[96];
      std::snprintf(line, sizeof(line), "  %-14s %6zu  %5.1f%%", name.c_str(), count,
                    100.0 * static_cast<double>(count) / n);
      os << line << "\n";
    }
  }
}

// Deterministic grouped bar chart; values indexed [group][series].
inline void write_bar_chart_svg(const std::string& path, const std::string& title,
                                const std::vector<std::string>& groups,
                                const std::vector<std::string>& series,
                                const std::vector<std::vector<double>>& values) {
  static const char* palette[] = {"#4c78a8", "#f58518", "#54a24b", "#e45756",
                                  "#72b7b2", "#eeca3b", "#b279a2", "#9d755d"};
  const double W = 760.0, H = 320.0, left = 56.0, bottom = 44.0, top = 34.0;
  const double plot_w = W - left - 16.0, plot_h = H - top - bottom;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open svg for writing: " + path);
  char buf[512];
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"760\" height=\"320\">\n";
  out << "<rect width=\"760\" height=\"320\" fill=\"white\"/>\n";
  out << "<text x=\"10\" y=\"20\" font-family=\"monospace\" font-size=\"14\">" << title
      << "</text>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const double v = 0.25 * tick;
    const double y = top + plot_h * (1.0 - v);
    std::snprintf(buf, sizeof(buf),
                  "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"#ddd\"/>"
                  "<text x=\"%.1f\" y=\"%.1f\" font-family=\"monospace\" font-size=\"11\">"
                  "%.2f</text>\n",
                  left, y, left + plot_w, y, 12.0, y + 4.0, v);
    out << buf;
  }
  const std::size_t n_groups = groups.size(), n_series = series.size();
  const double group_w = plot_w / static_cast<double>(n_groups);
  const double bar_w = group_w * 0.8 / static_cast<double>(n_series);
  for (std::size_t g = 0; g < n_groups; ++g) {
    for (std::size_t s = 0; s < n_series; ++s) {
      const double v = std::min(1.0, std::max(0.0, values[g][s]));
      const double x = left + group_w * static_cast<double>(g) + group_w * 0.1 +
                       bar_w * static_cast<double>(s);
      const double h = plot_h * v;
      std::snprintf(buf, sizeof(buf),
                    "<rect x=\"%.2f\" y=\"%.2f\" width=\"%.2f\" height=\"%.2f\" fill=\"%s\"/>\n",
                    x, top + plot_h - h, bar_w, h, palette[s % 8]);
      out << buf;
    }
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%.1f\" y=\"%.1f\" font-family=\"monospace\" font-size=\"12\" "
                  "text-anchor=\"middle\">%s</text>\n",
                  left + group_w * (static_cast<double>(g) + 0.5), H - bottom + 18.0,
                  groups[g].c_str());
    out << buf;
  }
  for (std::size_t s = 0; s < n_series; ++s) {
    const double x = left + 110.0 * static_cast<double>(s);
    std::snprintf(buf, sizeof(buf),
                  "<rect x=\"%.1f\" y=\"%.1f\" width=\"10\" height=\"10\" fill=\"%s\"/>"
                  "<text x=\"%.1f\" y=\"%.1f\" font-family=\"monospace\" font-size=\"12\">"
                  "%s</text>\n",
                  x, H - 16.0, palette[s % 8], x + 14.0, H - 7.0, series[s].c_str());
    out << buf;
  }
  out << "</svg>\n";
}

inline void write_matrix_plots(const std::string& out_dir, const std::vector<RunRecord>& records,
                               const std::vector<Task>& tasks) {
  for (auto kind : {MetricKind::roc, MetricKind::pr}) {
    std::vector<std::string> groups, series;
    for (auto t : tasks) groups.push_back(task_names()[static_cast<std::size_t>(t)]);
    for (const auto& r : records) series.push_back(r.cell);
    std::vector<std::vector<double>> values(groups.size(),
                                            std::vector<double>(series.size(), 0.0));
    for (std::size_t g = 0; g < groups.size(); ++g)
      for (std::size_t s = 0; s < series.size(); ++s)
        values[g][s] = eval_point(records[s].eval_rows, "test", groups[g], to_string(kind));
    write_bar_chart_svg(out_dir + "/matrix_" + to_string(kind) + ".svg",
                        "test macro " + to_string(kind) + " by task and cell", groups, series,
                        values);
  }
}

// Relative-change rows of every non-baseline cell against the first cell.
inline void write_comparison_csv(const std::string& path, const std::vector<RunRecord>& records,
                                 const std::vector<Task>& tasks) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open comparison csv for writing: " + path);
  out << "task,metric,cell,baseline,value,baseline_value,delta_rel\n";
  if (records.empty()) return;
  const auto& base = records.front();
  for (std::size_t r = 1; r < records.size(); ++r) {
    for (auto t : tasks) {
      const std::string task = task_names()[static_cast<std::size_t>(t)];
      for (auto kind : {MetricKind::roc, MetricKind::pr}) {
        const std::string metric = to_string(kind);
        const double a = eval_point(records[r].eval_rows, "test", task, metric);
        const double b = eval_point(base.eval_rows, "test", task, metric);
        out << task << ',' << metric << ',' << records[r].cell << ',' << base.cell << ','
            << fmt6(a) << ',' << fmt6(b) << ',' << fmt6(b != 0.0 ? (a - b) / b : 0.0) << '\n';
      }
    }
  }
}

}  // namespace detail

inline int print_default_config(std::ostream& os) {
  os << to_json(FullConfig{}).dump(2) << '\n';
  return EXIT_OK;
}

inline int cmd_synth(const Options& opt) {
  FullConfig cfg = resolve_config(opt);
  validate_synth_config(cfg.synth);
  detail::require_out(opt);
  auto records = generate_synthetic(cfg.synth);
  save_manifest(records, detail::manifest_path(opt));
  if (!opt.quiet) {
    std::cout << "wrote " << detail::manifest_path(opt) << "\n";
    detail::print_label_table(records, std::cout);
  }
  return EXIT_OK;
}

inline int cmd_split(const Options& opt) {
  FullConfig cfg = resolve_config(opt);
  detail::require_out(opt);
  auto records = detail::require_manifest(opt);
  auto split = iterative_stratified_split(records, cfg.split_fractions, cfg.split_seed);
  save_split(split, detail::split_path(opt));
  if (!opt.quiet) {
    std::array<std::size_t, 3> counts{};
    for (const auto& [id, s] : split.by_case) counts[static_cast<std::size_t>(s)]++;
    std::cout << "wrote " << detail::split_path(opt) << " (train/val/test cases: " << counts[0]
              << "/" << counts[1] << "/" << counts[2] << ")\n";
  }
  return EXIT_OK;
}

inline int cmd_train(const Options& opt) {
  FullConfig cfg = resolve_config(opt);
  validate_experiment_config(cfg.experiment);
  detail::require_out(opt);
  auto records = detail::require_manifest(opt);
  auto split = detail::require_split(opt);
  const std::string run_dir = opt.out + "/runs/" + cfg.experiment.name;
  auto record = run_experiment(cfg.experiment, records, split, run_dir,
                               cfg.experiment.repatch_per_epoch ? &cfg.synth : nullptr);
  if (!opt.quiet) {
    std::cout << "run " << record.cell << " (config " << record.config_hash << ") -> " << run_dir
              << "\n";
    for (const auto& row : record.eval_rows)
      if (row.dataset == "test" && row.metric == "auc_roc")
        std::cout << "  test " << row.task << " auc_roc " << detail::fmt6(row.point) << " ("
                  << detail::fmt6(row.ci_lo) << ", " << detail::fmt6(row.ci_hi) << ")\n";
  }
  return EXIT_OK;
}

inline int cmd_eval(const Options& opt) {
  detail::require_out(opt);
  if (opt.run.empty()) throw ConfigError("eval: --run <run-dir> is required");
  const std::string ckpt = opt.run + "/checkpoint.json";
  const std::string cfg_path = opt.run + "/config.json";
  if (!std::filesystem::exists(ckpt) || !std::filesystem::exists(cfg_path))
    throw DataError("eval: " + opt.run + " is not a run directory");
  auto loaded = load_checkpoint(ckpt);
  std::ifstream cin_(cfg_path, std::ios::binary);
  json cj;
  try {
    cin_ >> cj;
  } catch (const json::exception& e) {
    throw ParseError("eval: bad config.json in " + opt.run + ": " + e.what());
  }
  auto cfg = experiment_config_from_json(cj);
  if (opt.seed) cfg.seed = *opt.seed;

  auto records = detail::require_manifest(opt);
  auto split = detail::require_split(opt);
  auto val = records_in_split(records, split, Split::val);
  auto test = records_in_split(records, split, Split::test);
  auto rows = evaluate_model(loaded.model, cfg, val, "val");
  auto test_rows = evaluate_model(loaded.model, cfg, test, "test");
  rows.insert(rows.end(), test_rows.begin(), test_rows.end());
  write_eval_csv(rows, opt.run + "/eval.csv");
  if (!opt.quiet) {
    for (const auto& row : rows)
      if (row.dataset == "test" && row.metric == "auc_roc")
        std::cout << "test " << row.task << " auc_roc " << detail::fmt6(row.point) << "\n";
  }
  return EXIT_OK;
}

inline int cmd_matrix(const Options& opt) {
  FullConfig cfg = resolve_config(opt);
  detail::require_out(opt);

  std::vector<std::string> cell_names =
      opt.cells.empty() ? cfg.matrix_cells : detail::split_csv(opt.cells);
  std::vector<std::string> ablate =
      opt.ablate.empty() ? cfg.matrix_ablate : detail::split_csv(opt.ablate);
  std::vector<MatrixCell> cells;
  for (const auto& name : cell_names) cells.push_back(standard_cell(name));
  for (const auto& a : ablate) cells.push_back(ablation_cell(a));
  if (cells.empty()) throw ConfigError("matrix: no cells selected");

  validate_experiment_config(cfg.experiment);
  auto records = detail::require_manifest(opt);
  auto split = detail::require_split(opt);

  auto results = run_matrix(cfg.experiment, cells, records, split, opt.out + "/runs",
                            cfg.experiment.repatch_per_epoch ? &cfg.synth : nullptr);

  EvalReport all;
  for (const auto& r : results)
    all.insert(all.end(), r.eval_rows.begin(), r.eval_rows.end());
  write_eval_csv(all, opt.out + "/matrix_eval.csv");
  detail::write_comparison_csv(opt.out + "/comparison.csv", results, cfg.experiment.tasks);
  if (cfg.plots) detail::write_matrix_plots(opt.out, results, cfg.experiment.tasks);

  if (!opt.quiet) {
    std::cout << "matrix cells:";
    for (const auto& r : results) std::cout << ' ' << r.cell;
    std::cout << "\ntest macro auc_roc:\n";
    for (auto t : cfg.experiment.tasks) {
      const std::string task = task_names()[static_cast<std::size_t>(t)];
      std::cout << "  " << task << ":";
      for (const auto& r : results)
        std::cout << ' ' << r.cell << '=' << detail::fmt6(eval_point(r.eval_rows, "test", task,
                                                                     "auc_roc"));
      std::cout << "\n";
    }
  }
  return EXIT_OK;
}

inline int cmd_report(const Options& opt) {
  detail::require_out(opt);
  if (opt.run_dirs.empty()) throw ConfigError("report: at least one run directory is required");

  EvalReport merged;
  std::optional<std::uint64_t> test_fp;
  std::vector<std::string> cells;
  std::set<std::string> tasks_seen;
  for (const auto& dir : opt.run_dirs) {
    const std::string eval_path = dir + "/eval.csv";
    const std::string meta_path = dir + "/meta.json";
    if (!std::filesystem::exists(eval_path) || !std::filesystem::exists(meta_path))
      throw DataError("report: malformed run directory " + dir);
    json meta;
    try {
      std::ifstream in(meta_path, std::ios::binary);
      in >> meta;
    } catch (const json::exception& e) {
      throw ParseError("report: bad meta.json in " + dir + ": " + e.what());
    }
    const auto fp = meta.at("test_fingerprint").get<std::uint64_t>();
    if (test_fp && *test_fp != fp) {
      std::cerr << "report: " << dir << " was evaluated on a different test set\n";
      return EXIT_PAIRING;
    }
    test_fp = fp;
    auto rows = read_eval_csv(eval_path);
    merged.insert(merged.end(), rows.begin(), rows.end());
    for (const auto& r : rows) {
      if (cells.empty() || cells.back() != r.config) cells.push_back(r.config);
      tasks_seen.insert(r.task);
    }
  }
  write_eval_csv(merged, opt.out + "/report.csv");

  // one bar chart per metric over whatever tasks the runs report
  std::vector<std::string> uniq_cells;
  for (const auto& c : cells)
    if (std::find(uniq_cells.begin(), uniq_cells.end(), c) == uniq_cells.end())
      uniq_cells.push_back(c);
  for (auto kind : {MetricKind::roc, MetricKind::pr}) {
    std::vector<std::string> groups(tasks_seen.begin(), tasks_seen.end());
    std::vector<std::vector<double>> values;
    std::vector<std::string> groups_present;
    for (const auto& task : groups) {
      std::vector<double> row;
      bool complete = true;
      for (const auto& cell : uniq_cells) {
        bool found = false;
        for (const auto& r : merged)
          if (r.dataset == "test" && r.task == task && r.metric == to_string(kind) &&
              r.config == cell) {
            row.push_back(r.point);
            found = true;
            break;
          }
        if (!found) complete = false;
      }
      if (complete) {
        groups_present.push_back(task);
        values.push_back(row);
      }
    }
    if (!groups_present.empty())
      detail::write_bar_chart_svg(opt.out + "/report_" + to_string(kind) + ".svg",
                                  "test macro " + to_string(kind), groups_present, uniq_cells,
                                  values);
  }
  if (!opt.quiet)
    std::cout << "merged " << opt.run_dirs.size() << " runs into " << opt.out << "/report.csv\n";
  return EXIT_OK;
}

// Maps exceptions onto the documented exit codes.
template <typename Fn>
int dispatch(Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return EXIT_CONFIG;
  } catch (const ParseError& e) {
    std::cerr << "artifact error: " << e.what() << "\n";
    return EXIT_ARTIFACT;
  } catch (const DataError& e) {
    std::cerr << "artifact error: " << e.what() << "\n";
    return EXIT_ARTIFACT;
  } catch (const DimensionError& e) {
    std::cerr << "artifact error: " << e.what() << "\n";
    return EXIT_ARTIFACT;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace mmfuse::cli
