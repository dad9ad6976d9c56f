// Acceptance suite: property checks plus the directional benchmark, one
// pass/fail line per criterion. Exits nonzero if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mmfuse/cli.hpp"
#include "mmfuse/trainer.hpp"
#include "oracles.hpp"

using namespace mmfuse;

namespace {

int g_failures = 0;

void criterion(int n, const std::string& what, bool pass, const std::string& detail) {
  std::printf("[%s] criterion %2d: %s (%s)\n", pass ? "PASS" : "FAIL", n, what.c_str(),
              detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

double now_seconds() {
  using clock = std::chrono::steady_clock;
  static const auto t0 = clock::now();
  return std::chrono::duration<double>(clock::now() - t0).count();
}

std::string fmt(const char* f, ...) {
  char buf[256];
  va_list args;
  va_start(args, f);
  std::vsnprintf(buf, sizeof(buf), f, args);
  va_end(args);
  return buf;
}

RealVec random_vec(RngStream& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = 2.0 * rng.next_unit() - 1.0;
  return RealVec(std::move(v));
}

std::string read_all(const std::string& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// --- criterion 1: CBP equals the direct outer-product sketch ------------------

void check_cbp_oracle() {
  const double t0 = now_seconds();
  RngStream rng(1001, 0);
  double max_err = 0.0;
  const std::size_t dims[] = {8, 16, 32, 64};
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t nx = 4 + rng.next_below(13);  // 4..16
    const std::size_t ny = 4 + rng.next_below(13);
    const std::size_t d = dims[rng.next_below(4)];
    auto px = make_sketch(rng.substream(2 * trial), nx, d);
    auto py = make_sketch(rng.substream(2 * trial + 1), ny, d);
    auto x = random_vec(rng, nx);
    auto y = random_vec(rng, ny);
    auto got = cbp_fuse(x, y, px, py);
    auto want = oracles::outer_product_sketch(
        x.values(), y.values(), px.s.values(),
        std::vector<std::size_t>(px.h.begin(), px.h.end()), py.s.values(),
        std::vector<std::size_t>(py.h.begin(), py.h.end()), d);
    for (std::size_t k = 0; k < d; ++k) max_err = std::max(max_err, std::abs(got[k] - want[k]));
  }
  const double elapsed = now_seconds() - t0;
  criterion(1, "CBP convolution-theorem oracle, 200 random pairs", max_err < 1e-9 && elapsed < 5.0,
            fmt("max_abs_err=%.2e, %.2fs", max_err, elapsed));
}

// --- criterion 2: count-sketch inner products are unbiased --------------------

void check_sketch_unbiasedness() {
  const std::size_t n = 64, d = 256;
  std::vector<double> xv(n, 0.0), yv(n, 0.0);
  xv[0] = 1.0;
  yv[0] = 0.7;
  yv[1] = std::sqrt(1.0 - 0.49);
  RealVec x(xv), y(yv);
  double mean = 0.0;
  for (int t = 0; t < 2000; ++t) {
    auto p = make_sketch(RngStream(42000 + t, 0), n, d);
    mean += dot(sketch_apply(p, x), sketch_apply(p, y));
  }
  mean /= 2000.0;
  criterion(2, "sketch inner-product unbiasedness over 2000 seeds", std::abs(mean - 0.7) < 0.05,
            fmt("mean=%.4f, target 0.7 +- 0.05", mean));
}

// --- criterion 3: analytic gradients match central finite differences ---------

ModelConfig grad_check_config(FusionStrategy strategy, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.slide_encoder = {EncoderSpec::Kind::dense, 3, {4}, 3, Activation::tanh, 64};
  cfg.patch_encoder = {EncoderSpec::Kind::dense, 2, {}, 2, Activation::tanh, 64};
  cfg.text_encoder = {EncoderSpec::Kind::embedding, 10, {2}, 2, Activation::tanh, 6};
  cfg.structured_encoder = {EncoderSpec::Kind::dense, 4, {}, 2, Activation::tanh, 64};
  cfg.fusion.strategy = strategy;
  cfg.fusion.image_scale_strategy = FusionStrategy::concat;
  cfg.fusion.cbp_output_dim = 8;
  cfg.fusion.sketch_seed = seed + 1;
  cfg.tasks = {{"a", 2}, {"b", 3}};
  cfg.init_seed = seed;
  return cfg;
}

void check_gradient_fidelity() {
  std::size_t total = 0, ok = 0;
  std::size_t max_params = 0;
  for (int model_i = 0; model_i < 10; ++model_i) {
    const auto strategy = (model_i % 2 == 0) ? FusionStrategy::concat : FusionStrategy::cbp;
    const bool include_multi = (model_i / 2) % 2 == 0;
    auto model = make_model(grad_check_config(strategy, 7000 + model_i));
    max_params = std::max(max_params, param_count(model));

    RngStream rng(8000 + model_i, 0);
    std::vector<SampleInput> batch;
    std::vector<std::vector<std::size_t>> labels(2);
    for (int i = 0; i < 2; ++i) {
      SampleInput in;
      in.slide = random_vec(rng, 3);
      in.patches = std::array<RealVec, 3>{random_vec(rng, 2), random_vec(rng, 2),
                                          random_vec(rng, 2)};
      TokenSeq seq;
      for (int k = 0; k < 6; ++k) seq.ids.push_back(static_cast<std::int32_t>(1 + rng.next_below(9)));
      seq.mask = {1, 1, 1, 1, 0, 0};
      in.text = seq;
      in.structured = random_vec(rng, 4);
      batch.push_back(std::move(in));
      labels[0].push_back(rng.next_below(2));
      labels[1].push_back(rng.next_below(3));
    }
    LossConfig loss_cfg;
    loss_cfg.focal = {FocalConfig{2.0, 0.5}, FocalConfig{1.0, 0.3}};
    loss_cfg.include_multi = include_multi;

    auto scalar = [&]() { return combined_loss(forward(model, batch), labels, loss_cfg).total; };
    auto [bd, grads] = backward(model, batch, labels, loss_cfg);
    auto refs = param_refs(model);
    const double h = 1e-5;
    for (std::size_t k = 0; k < refs.size(); ++k) {
      for (std::size_t j = 0; j < refs[k].tensor->size(); ++j) {
        const double saved = refs[k].tensor->data[j];
        refs[k].tensor->data[j] = saved + h;
        const double up = scalar();
        refs[k].tensor->data[j] = saved - h;
        const double dn = scalar();
        refs[k].tensor->data[j] = saved;
        const double fd = (up - dn) / (2 * h);
        const double g = grads.tensors[k].data[j];
        const double denom = std::max({std::abs(fd), std::abs(g), 1e-8});
        ++total;
        if (std::abs(fd - g) / denom < 1e-4) ++ok;
      }
    }
  }
  const double frac = static_cast<double>(ok) / static_cast<double>(total);
  criterion(3, "gradient fidelity vs central differences on 10 models",
            frac >= 0.99 && max_params <= 200,
            fmt("%.3f%% of %zu coords ok, largest model %zu params", 100.0 * frac, total,
                max_params));
}

// --- criterion 4: variance closed form and geometric-average identity ---------

void check_variance_and_geometric_average() {
  RngStream rng(9001, 0);
  const double grid_step = (std::log(1e3) - std::log(1e-3)) / 1999.0;
  bool grid_ok = true, geo_ok = true;
  double worst_cells = 0.0, worst_geo = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> residuals(5 + rng.next_below(20));
    for (auto& r : residuals) r = 3.0 * (2.0 * rng.next_unit() - 1.0);
    const double closed = noise_variance_mle(residuals);
    const double grid = oracles::nll_grid_argmin(residuals, 1e-3, 1e3, 2000);
    const double cells = std::abs(std::log(grid) - std::log(closed)) / grid_step;
    worst_cells = std::max(worst_cells, cells);
    if (cells > 1.0) grid_ok = false;

    // geometric-average identity on a random task tuple
    std::vector<double> sums(2 + rng.next_below(3));
    double prod = 1.0;
    for (auto& s : sums) {
      s = 0.1 + 10.0 * rng.next_unit();
      prod *= s;
    }
    const double rel = std::abs(std::exp(multi_objective_loss(sums)) - prod) / prod;
    worst_geo = std::max(worst_geo, rel);
    if (rel > 1e-9) geo_ok = false;
  }
  criterion(4, "variance stationary point + geometric-average identity", grid_ok && geo_ok,
            fmt("worst grid offset %.2f cells, worst exp(L)-product rel err %.1e", worst_cells,
                worst_geo));
}

// --- criterion 5: focal-loss reductions ---------------------------------------

void check_loss_reductions() {
  RngStream rng(1101, 0);
  bool exact = true;
  for (int batch_i = 0; batch_i < 100; ++batch_i) {
    const std::size_t n = 1 + rng.next_below(32);
    std::vector<double> ps(n);
    for (auto& p : ps) p = 0.001 + 0.998 * rng.next_unit();
    RealVec probs(ps);
    RealVec ones(std::vector<double>(n, 1.0));
    if (focal_loss(probs, FocalConfig{0.0, 1.0}, ones) != ce_loss(probs)) exact = false;
  }
  const double hand = 0.5 * std::pow(1.0 - 0.9, 2.0) * (-std::log(0.9));  // = 5.268e-4
  const double got = focal_loss(RealVec({0.9}), FocalConfig{2.0, 0.5}, RealVec({0.5}));
  const bool hand_ok = std::abs(got - hand) < 1e-9;
  criterion(5, "focal(0,1) == CE exactly; focal(2,.5)@p=.9 hits the hand value",
            exact && hand_ok, fmt("hand value %.6e, computed %.6e", hand, got));
}

// --- criterion 6: ranking metrics against brute-force oracles ------------------

void check_metric_oracles() {
  RngStream rng(1301, 0);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 8 + rng.next_below(43);  // 8..50
    const std::size_t k = 2 + rng.next_below(4);   // 2..5 classes
    ScoredLabels s;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> logits(k);
      for (auto& x : logits) x = 4.0 * (2.0 * rng.next_unit() - 1.0);
      s.scores.push_back(softmax(RealVec(logits)));
      s.labels.push_back(rng.next_below(k));
    }
    for (auto kind : {MetricKind::roc, MetricKind::pr}) {
      double oracle_sum = 0.0;
      std::size_t defined = 0;
      for (std::size_t c = 0; c < k; ++c) {
        std::vector<double> sc(n);
        std::vector<int> y(n);
        std::size_t pos = 0;
        for (std::size_t i = 0; i < n; ++i) {
          sc[i] = s.scores[i][c];
          y[i] = s.labels[i] == c ? 1 : 0;
          pos += y[i];
        }
        if (pos == 0 || (kind == MetricKind::roc && pos == n)) continue;
        oracle_sum += kind == MetricKind::roc ? oracles::pairwise_roc_auc(sc, y)
                                              : oracles::prefix_average_precision(sc, y);
        ++defined;
      }
      if (defined == 0) continue;
      const double want = oracle_sum / static_cast<double>(defined);
      const double got = macro_auc(s, kind);
      worst = std::max(worst, std::abs(got - want));
    }
  }
  const bool hand_roc = roc_auc_binary({0.9, 0.4, 0.35, 0.2}, {1, 0, 1, 0}) == 0.75;
  const double ap = pr_auc_binary({0.9, 0.4, 0.35, 0.2}, {1, 0, 1, 0});
  const bool hand_pr = std::abs(ap - (1.0 + 2.0 / 3.0) / 2.0) < 1e-15;
  criterion(6, "macro AUC vs pairwise/AP oracles on 100 instances",
            worst < 1e-12 && hand_roc && hand_pr,
            fmt("worst |diff|=%.1e, hand ROC 0.75 %s, hand AP %.4f", worst,
                hand_roc ? "exact" : "WRONG", ap));
}

// --- shared benchmark state for criteria 7-9 -----------------------------------

struct Benchmark {
  std::vector<SlideRecord> records;
  SplitAssignment split;
};

Benchmark golden_benchmark() {
  SynthConfig synth;  // defaults: 2000 cases, seed 0
  Benchmark b;
  b.records = generate_synthetic(synth);
  b.split = iterative_stratified_split(b.records, {0.8, 0.1, 0.1}, 0);
  return b;
}

void check_resampling_contract(const Benchmark& bench) {
  auto train = records_in_split(bench.records, bench.split, Split::train);
  auto val = records_in_split(bench.records, bench.split, Split::val);
  auto test = records_in_split(bench.records, bench.split, Split::test);

  auto serialize = [](const std::vector<SlideRecord>& recs) {
    std::string out;
    for (const auto& r : recs) out += detail::record_to_json(r).dump() + "\n";
    return out;
  };
  const std::string val_before = serialize(val);
  const std::string test_before = serialize(test);

  std::map<std::size_t, std::size_t> before;
  for (const auto& r : train) before[combination_index(r.labels)]++;
  auto resampled = resample_combinations(train, 50, 100, 0);
  std::map<std::size_t, std::size_t> after;
  for (const auto& r : resampled) after[combination_index(r.labels)]++;

  bool band_ok = before.size() == after.size();
  for (const auto& [combo, count] : after) {
    const std::size_t original = before.count(combo) ? before.at(combo) : 0;
    const bool in_band = count >= 50 && count <= 100;
    const bool untouched = (original >= 50 && original <= 100 && count == original);
    if (!(untouched || (original < 50 && count == 50) || (original > 100 && count == 100) ||
          (in_band && count == original)))
      band_ok = false;
  }

  const std::string val_after = serialize(records_in_split(bench.records, bench.split, Split::val));
  const std::string test_after =
      serialize(records_in_split(bench.records, bench.split, Split::test));
  const bool untouched_ok = val_before == val_after && test_before == test_after;

  criterion(7, "resampling clamps combinations to [50,100], eval splits untouched",
            band_ok && untouched_ok,
            fmt("%zu combinations present, train %zu -> %zu records", after.size(), train.size(),
                resampled.size()));
}

void check_directional_benchmark(const Benchmark& bench) {
  ExperimentConfig base;  // defaults: 5 epochs, batch 32, resample 50/100, 1000 resamples
  base.seed = 0;
  std::vector<MatrixCell> cells = {standard_cell("SS"), standard_cell("MM"),
                                   ablation_cell("text"), ablation_cell("structured")};
  const double t0 = now_seconds();
  auto results = run_matrix(base, cells, bench.records, bench.split);
  const double elapsed = now_seconds() - t0;

  const double ss = eval_point(results[0].eval_rows, "test", "tissue", "auc_roc");
  const double mm = eval_point(results[1].eval_rows, "test", "tissue", "auc_roc");
  criterion(8, "multimodal multitask beats the single-modal baseline on tissue",
            mm - ss >= 0.05 && elapsed < 300.0,
            fmt("MM=%.4f SS=%.4f delta=%.4f (>=0.05), %.1fs (<300s)", mm, ss, mm - ss, elapsed));

  const double wo_text = eval_point(results[2].eval_rows, "test", "tissue", "auc_roc");
  const double wo_structured = eval_point(results[3].eval_rows, "test", "tissue", "auc_roc");
  const double drop_text = mm - wo_text;
  const double drop_structured = mm - wo_structured;
  criterion(9, "removing text hurts tissue more than removing structured data",
            drop_text >= drop_structured + 0.01,
            fmt("drop(text)=%.4f drop(structured)=%.4f margin=%.4f (>=0.01)", drop_text,
                drop_structured, drop_text - drop_structured));
}

void check_matrix_determinism() {
  namespace fs = std::filesystem;
  const auto root = fs::temp_directory_path() / "mmfuse_acceptance";
  fs::remove_all(root);
  fs::create_directories(root);
  const auto cfg_path = root / "cfg.json";
  {
    ojson j;
    j["synth"] = {{"n_cases", 600}, {"seed", 4}};
    j["split"] = {{"fractions", {0.8, 0.1, 0.1}}, {"seed", 4}};
    j["experiment"] = {{"epochs", 2}, {"eval_resamples", 300}, {"seed", 4}};
    std::ofstream out(cfg_path);
    out << j.dump(2) << "\n";
  }
  bool ok = true;
  std::string detail = "matrix_eval.csv and per-run eval.csv byte-identical";
  std::array<fs::path, 2> dirs = {root / "a", root / "b"};
  for (const auto& dir : dirs) {
    cli::Options opt;
    opt.config_path = cfg_path.string();
    opt.out = dir.string();
    opt.cells = "SM,MM";
    opt.quiet = true;
    if (cli::cmd_synth(opt) != 0 || cli::cmd_split(opt) != 0 || cli::cmd_matrix(opt) != 0) {
      ok = false;
      detail = "pipeline command failed";
    }
  }
  if (ok) {
    ok = read_all((dirs[0] / "matrix_eval.csv").string()) ==
             read_all((dirs[1] / "matrix_eval.csv").string()) &&
         read_all((dirs[0] / "runs/MM/all/eval.csv").string()) ==
             read_all((dirs[1] / "runs/MM/all/eval.csv").string()) &&
         read_all((dirs[0] / "runs/SM/all/eval.csv").string()) ==
             read_all((dirs[1] / "runs/SM/all/eval.csv").string());
    if (!ok) detail = "outputs differ between identical runs";
  }
  criterion(10, "matrix runs twice with one seed produce identical eval CSVs", ok, detail);
}

}  // namespace

int main() {
  std::printf("mmfuse acceptance suite\n");
  check_cbp_oracle();
  check_sketch_unbiasedness();
  check_gradient_fidelity();
  check_variance_and_geometric_average();
  check_loss_reductions();
  check_metric_oracles();

  auto bench = golden_benchmark();
  check_resampling_contract(bench);
  check_directional_benchmark(bench);
  check_matrix_determinism();

  if (g_failures == 0)
    std::printf("all criteria passed\n");
  else
    std::printf("%d criterion(s) FAILED\n", g_failures);
  return g_failures == 0 ? 0 : 1;
}
