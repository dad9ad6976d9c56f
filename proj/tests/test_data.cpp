#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "mmfuse/data.hpp"

using namespace mmfuse;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "mmfuse_data_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::string read_all(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::map<std::size_t, std::size_t> combo_counts(const std::vector<SlideRecord>& recs) {
  std::map<std::size_t, std::size_t> counts;
  for (const auto& r : recs) counts[combination_index(r.labels)]++;
  return counts;
}

}  // namespace

TEST_CASE("combination index round trip") {
  for (std::size_t c = 0; c < N_COMBINATIONS; ++c)
    CHECK(combination_index(combination_labels(c)) == c);
  CHECK(N_COMBINATIONS == 112);
  // most frequent corner of the index ordering
  CHECK(combination_index(LabelSet{0, 0, 0, 0}) == 0);
  // least frequent: Frozen / Lung / Biopsy / IHC
  LabelSet last{1, N_TISSUE - 1, 1, 1};
  CHECK(tissue_names()[last.tissue] == "Lung");
  CHECK(combination_index(last) == N_COMBINATIONS - 1);
}

TEST_CASE("encode_structured is a one-hot") {
  auto v0 = encode_structured(0);
  CHECK(v0.size() == 14);
  CHECK(v0[0] == 1.0);
  double sum = 0.0;
  for (std::size_t i = 0; i < v0.size(); ++i) sum += v0[i];
  CHECK(sum == 1.0);

  auto v13 = encode_structured(13);
  CHECK(v13[13] == 1.0);
  CHECK(v13[0] == 0.0);

  CHECK_THROWS_AS(encode_structured(14), DataError);
}

TEST_CASE("truncate_pad_text windows and masks") {
  std::vector<std::int32_t> long_tokens(100);
  for (int i = 0; i < 100; ++i) long_tokens[i] = i + 1;
  auto t = truncate_pad_text(long_tokens);
  CHECK(t.ids.size() == 64);
  CHECK(t.ids[0] == 1);
  CHECK(t.ids[63] == 64);  // head kept, tail dropped
  for (auto m : t.mask) CHECK(m == 1);

  std::vector<std::int32_t> short_tokens(10, 5);
  auto s = truncate_pad_text(short_tokens);
  CHECK(s.ids.size() == 64);
  std::size_t real = 0;
  for (auto m : s.mask) real += m;
  CHECK(real == 10);
  for (std::size_t i = 10; i < 64; ++i) CHECK(s.ids[i] == PAD_TOKEN_ID);

  std::vector<std::int32_t> exact(64, 3);
  auto e = truncate_pad_text(exact);
  CHECK(e.ids == exact);
}

TEST_CASE("generator is deterministic and case-consistent") {
  SynthConfig cfg;
  cfg.n_cases = 150;
  cfg.seed = 4;
  auto a = generate_synthetic(cfg);
  auto b = generate_synthetic(cfg);
  CHECK(dataset_fingerprint(a) == dataset_fingerprint(b));
  CHECK(a.size() >= cfg.n_cases);

  std::map<std::string, const SlideRecord*> first_of_case;
  std::set<std::string> slide_ids;
  for (const auto& rec : a) {
    CHECK(slide_ids.insert(rec.slide_id).second);
    CHECK(rec.primary_site < N_TISSUE);
    for (auto tok : rec.text_tokens) {
      CHECK(tok > 0);
      CHECK(static_cast<std::size_t>(tok) < cfg.vocab_size);
    }
    auto [it, fresh] = first_of_case.try_emplace(rec.case_id, &rec);
    if (!fresh) {
      CHECK(rec.text_tokens == it->second->text_tokens);
      CHECK(rec.primary_site == it->second->primary_site);
      CHECK(rec.labels == it->second->labels);
    }
  }
  CHECK(first_of_case.size() == cfg.n_cases);

  SynthConfig other = cfg;
  other.seed = 5;
  CHECK(dataset_fingerprint(generate_synthetic(other)) != dataset_fingerprint(a));
}

TEST_CASE("zero imbalance exponent yields near-uniform combinations") {
  SynthConfig cfg;
  cfg.n_cases = 5000;
  cfg.imbalance_exponent = 0.0;
  cfg.seed = 8;
  auto recs = generate_synthetic(cfg);
  // count at case level
  std::map<std::string, std::size_t> case_combo;
  for (const auto& r : recs) case_combo[r.case_id] = combination_index(r.labels);
  std::vector<std::size_t> counts(N_COMBINATIONS, 0);
  for (const auto& [id, c] : case_combo) counts[c]++;
  std::size_t mn = counts[0], mx = counts[0];
  for (auto c : counts) {
    mn = std::min(mn, c);
    mx = std::max(mx, c);
  }
  CHECK(mn > 0);
  CHECK(static_cast<double>(mx) / static_cast<double>(mn) < 3.0);
}

TEST_CASE("generator marginals track the configured power law") {
  SynthConfig cfg;
  cfg.n_cases = 10000;
  cfg.seed = 12;
  auto recs = generate_synthetic(cfg);
  std::map<std::string, LabelSet> case_labels;
  for (const auto& r : recs) case_labels[r.case_id] = r.labels;

  // expected marginals from the combination weights
  std::vector<double> w(N_COMBINATIONS);
  double sum = 0.0;
  for (std::size_t c = 0; c < N_COMBINATIONS; ++c) {
    w[c] = std::pow(static_cast<double>(c + 1), -cfg.imbalance_exponent);
    sum += w[c];
  }
  for (auto& x : w) x /= sum;

  // chi-square per task at significance 0.001 (df=1: 10.828, df=13: 34.528);
  // seeded draws make this statistical test reproducible
  const double n = static_cast<double>(case_labels.size());
  for (std::size_t t = 0; t < N_TASKS; ++t) {
    const auto task = static_cast<Task>(t);
    const std::size_t k = task_class_count(task);
    std::vector<double> expected(k, 0.0), observed(k, 0.0);
    for (std::size_t c = 0; c < N_COMBINATIONS; ++c)
      expected[combination_labels(c).value(task)] += w[c] * n;
    for (const auto& [id, l] : case_labels) observed[l.value(task)] += 1.0;
    double chi2 = 0.0;
    for (std::size_t v = 0; v < k; ++v)
      chi2 += (observed[v] - expected[v]) * (observed[v] - expected[v]) / expected[v];
    const double crit = k == 2 ? 10.828 : 34.528;
    CHECK(chi2 < crit);
  }
}

TEST_CASE("stratified split forces proportions on degenerate inputs") {
  auto make_case = [](std::size_t i) {
    SlideRecord r;
    r.case_id = "c" + std::to_string(i);
    r.slide_id = r.case_id + "-s0";
    r.labels = LabelSet{0, 2, 1, 0};
    r.slide_features = RealVec({0.0});
    r.patch_features = {RealVec({0.0}), RealVec({0.0}), RealVec({0.0})};
    r.text_tokens = {1};
    r.primary_site = 2;
    return r;
  };
  std::vector<SlideRecord> ten;
  for (std::size_t i = 0; i < 10; ++i) ten.push_back(make_case(i));
  auto split10 = iterative_stratified_split(ten, {0.8, 0.1, 0.1}, 3);
  std::array<std::size_t, 3> counts{};
  for (const auto& [id, s] : split10.by_case) counts[static_cast<std::size_t>(s)]++;
  CHECK(counts[0] == 8);
  CHECK(counts[1] == 1);
  CHECK(counts[2] == 1);

  std::vector<SlideRecord> thousand;
  for (std::size_t i = 0; i < 1000; ++i) thousand.push_back(make_case(i));
  auto split1k = iterative_stratified_split(thousand, {0.8, 0.1, 0.1}, 3);
  counts = {0, 0, 0};
  for (const auto& [id, s] : split1k.by_case) counts[static_cast<std::size_t>(s)]++;
  CHECK(counts[0] == 800);
  CHECK(counts[1] == 100);
  CHECK(counts[2] == 100);

  CHECK_THROWS_AS(iterative_stratified_split({}, {0.8, 0.1, 0.1}, 0), DataError);
  CHECK_THROWS_AS(iterative_stratified_split(ten, {0.8, 0.3, 0.1}, 0), ConfigError);
}

TEST_CASE("stratified split is a case partition with balanced class shares") {
  SynthConfig cfg;
  cfg.n_cases = 1200;
  cfg.seed = 0;
  auto recs = generate_synthetic(cfg);
  auto split = iterative_stratified_split(recs, {0.8, 0.1, 0.1}, 0);

  // every case assigned exactly once; slides follow their case
  std::set<std::string> cases;
  for (const auto& r : recs) cases.insert(r.case_id);
  CHECK(split.by_case.size() == cases.size());
  for (const auto& r : recs) CHECK_NOTHROW(split.of(r.case_id));

  // per-class case proportions within 5 points of global for classes with
  // >= 20 cases
  constexpr std::size_t N_FLAGS = 2 + N_TISSUE + 2 + 2;
  auto flags_of = [](const LabelSet& l) {
    return std::array<std::size_t, 4>{l.fixation, 2 + l.tissue, 2 + N_TISSUE + l.procedure,
                                      2 + N_TISSUE + 2 + l.staining};
  };
  std::map<std::string, LabelSet> case_labels;
  for (const auto& r : recs) case_labels[r.case_id] = r.labels;
  std::array<std::array<double, 3>, N_FLAGS> per_split{};
  std::array<double, N_FLAGS> total{};
  std::array<double, 3> split_sizes{};
  for (const auto& [id, l] : case_labels) {
    const auto s = static_cast<std::size_t>(split.of(id));
    split_sizes[s] += 1.0;
    for (auto f : flags_of(l)) {
      per_split[f][s] += 1.0;
      total[f] += 1.0;
    }
  }
  const double n_cases = static_cast<double>(case_labels.size());
  for (std::size_t f = 0; f < N_FLAGS; ++f) {
    if (total[f] < 20.0) continue;
    const double global = total[f] / n_cases;
    for (int s = 0; s < 3; ++s) {
      const double local = per_split[f][s] / split_sizes[s];
      CHECK(std::abs(local - global) <= 0.05);
    }
  }
}

TEST_CASE("resample_combinations enforces the band") {
  SynthConfig cfg;
  cfg.n_cases = 400;
  cfg.seed = 21;
  auto recs = generate_synthetic(cfg);
  auto before = combo_counts(recs);
  auto resampled = resample_combinations(recs, 20, 40, 9);
  auto after = combo_counts(resampled);

  CHECK(before.size() == after.size());  // no fabricated combinations
  for (const auto& [combo, count] : after) {
    const auto original = before.at(combo);
    if (original < 20) {
      CHECK(count == 20);
    } else if (original > 40) {
      CHECK(count == 40);
    } else {
      CHECK(count == original);
    }
  }

  // upsampled combos consist solely of copies of the originals
  std::map<std::size_t, std::set<std::string>> orig_ids;
  for (const auto& r : recs) orig_ids[combination_index(r.labels)].insert(r.slide_id);
  for (const auto& r : resampled)
    CHECK(orig_ids.at(combination_index(r.labels)).count(r.slide_id) == 1);

  // downsampled combos keep distinct records
  for (const auto& [combo, count] : after) {
    if (before.at(combo) > 40) {
      std::set<std::string> ids;
      for (const auto& r : resampled)
        if (combination_index(r.labels) == combo) ids.insert(r.slide_id);
      CHECK(ids.size() == 40);
    }
  }

  // determinism
  auto again = resample_combinations(recs, 20, 40, 9);
  CHECK(dataset_fingerprint(again) == dataset_fingerprint(resampled));

  CHECK_THROWS_AS(resample_combinations(recs, 50, 40, 0), ConfigError);
}

TEST_CASE("tiny combination is upsampled with replacement") {
  std::vector<SlideRecord> recs;
  for (int i = 0; i < 3; ++i) {
    SlideRecord r;
    r.case_id = "c" + std::to_string(i);
    r.slide_id = r.case_id + "-s0";
    r.labels = LabelSet{1, 5, 0, 1};
    r.slide_features = RealVec({1.0 * i});
    r.patch_features = {RealVec({0.0}), RealVec({0.0}), RealVec({0.0})};
    r.text_tokens = {2};
    r.primary_site = 5;
    recs.push_back(r);
  }
  auto out = resample_combinations(recs, 50, 100, 0);
  CHECK(out.size() == 50);
  std::set<std::string> ids;
  for (const auto& r : out) ids.insert(r.slide_id);
  CHECK(ids.size() == 3);
}

TEST_CASE("manifest round trip and validation") {
  SynthConfig cfg;
  cfg.n_cases = 25;
  cfg.seed = 31;
  auto recs = generate_synthetic(cfg);
  auto path = temp_file("manifest.jsonl");
  save_manifest(recs, path.string());
  auto loaded = load_manifest(path.string());
  REQUIRE(loaded.size() == recs.size());
  CHECK(dataset_fingerprint(loaded) == dataset_fingerprint(recs));

  // canonicalized input round-trips byte-identically
  auto path2 = temp_file("manifest2.jsonl");
  save_manifest(loaded, path2.string());
  CHECK(read_all(path) == read_all(path2));

  // empty file loads to an empty list
  auto empty_path = temp_file("empty.jsonl");
  std::ofstream(empty_path.string()).close();
  CHECK(load_manifest(empty_path.string()).empty());

  // a record missing one of the four labels names the field
  auto bad_path = temp_file("bad.jsonl");
  {
    auto j = detail::record_to_json(recs[0]);
    j.erase("staining");
    std::ofstream out(bad_path.string());
    out << j.dump() << '\n';
  }
  try {
    load_manifest(bad_path.string());
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("staining") != std::string::npos);
    CHECK(std::string(e.what()).find("line 1") != std::string::npos);
  }

  // duplicate slide ids are rejected
  auto dup_path = temp_file("dup.jsonl");
  {
    std::ofstream out(dup_path.string());
    out << detail::record_to_json(recs[0]).dump() << '\n';
    out << detail::record_to_json(recs[0]).dump() << '\n';
  }
  CHECK_THROWS_AS(load_manifest(dup_path.string()), DataError);

  // unknown enum spelling is rejected
  auto enum_path = temp_file("enum.jsonl");
  {
    auto j = detail::record_to_json(recs[0]);
    j["tissue"] = "Spleen";
    std::ofstream out(enum_path.string());
    out << j.dump() << '\n';
  }
  CHECK_THROWS_AS(load_manifest(enum_path.string()), ParseError);
}

TEST_CASE("split persistence round trip") {
  SynthConfig cfg;
  cfg.n_cases = 40;
  cfg.seed = 37;
  auto recs = generate_synthetic(cfg);
  auto split = iterative_stratified_split(recs, {0.8, 0.1, 0.1}, 1);
  auto path = temp_file("split.json");
  save_split(split, path.string());
  auto loaded = load_split(path.string());
  CHECK(loaded.by_case == split.by_case);

  CHECK_THROWS_AS(load_split(temp_file("nonexistent.json").string()), DataError);
}
