// mmfuse command line: synthesize a benchmark dataset, split it, train and
// evaluate modality/task configurations, run the full experiment matrix and
// merge reports. All heavy lifting lives in the headers; this file only
// parses arguments.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "mmfuse/cli.hpp"

int main(int argc, char** argv) {
  using namespace mmfuse;

  CLI::App app{"multimodal multitask metadata-prediction experiments"};
  app.require_subcommand(1);

  cli::Options opt;

  auto add_common = [&](CLI::App* cmd, bool needs_out = true) {
    cmd->add_option("--config", opt.config_path, "config file (JSON)");
    auto* out = cmd->add_option("--out", opt.out, "output directory");
    if (needs_out) out->required();
    cmd->add_option_function<std::uint64_t>(
        "--seed", [&](const std::uint64_t& v) { opt.seed = v; },
        "seed override (also: MMFUSE_SEED)");
    cmd->add_flag("--quiet", opt.quiet, "suppress progress output");
  };

  auto* synth = app.add_subcommand("synth", "generate a synthetic manifest");
  add_common(synth);

  auto* split = app.add_subcommand("split", "stratified case-level train/val/test split");
  add_common(split);

  auto* train = app.add_subcommand("train", "train one experiment configuration");
  add_common(train);
  train->add_option("--fusion", opt.fusion, "fusion strategy override (concat|cbp)");

  auto* eval = app.add_subcommand("eval", "re-evaluate a stored run directory");
  add_common(eval);
  eval->add_option("--run", opt.run, "run directory holding checkpoint.json")->required();

  auto* matrix = app.add_subcommand("matrix", "run the experiment matrix");
  add_common(matrix);
  matrix->add_option("--cells", opt.cells, "comma list of SS,SM,MS,MM");
  matrix->add_option("--ablate", opt.ablate, "comma list of text,structured,patch");
  matrix->add_option("--fusion", opt.fusion, "fusion strategy override (concat|cbp)");

  auto* report = app.add_subcommand("report", "merge stored run directories into one report");
  add_common(report);
  report->add_option("runs", opt.run_dirs, "run directories")->required();

  auto* config = app.add_subcommand("config", "configuration helpers");
  auto* defaults = config->add_subcommand("print-defaults", "print the default config JSON");
  config->require_subcommand(1);

  CLI11_PARSE(app, argc, argv);

  if (synth->parsed()) return cli::dispatch([&] { return cli::cmd_synth(opt); });
  if (split->parsed()) return cli::dispatch([&] { return cli::cmd_split(opt); });
  if (train->parsed()) return cli::dispatch([&] { return cli::cmd_train(opt); });
  if (eval->parsed()) return cli::dispatch([&] { return cli::cmd_eval(opt); });
  if (matrix->parsed()) return cli::dispatch([&] { return cli::cmd_matrix(opt); });
  if (report->parsed()) return cli::dispatch([&] { return cli::cmd_report(opt); });
  if (config->parsed() && defaults->parsed())
    return cli::dispatch([&] { return cli::print_default_config(std::cout); });
  std::cerr << "no subcommand selected\n";
  return 2;
}
