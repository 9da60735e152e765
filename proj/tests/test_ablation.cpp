#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "rejepa/ablation.hpp"
#include "rejepa/errors.hpp"

using namespace rejepa;
namespace fs = std::filesystem;

namespace {

Archive small_archive() {
  SyntheticConfig s;
  s.n_images = 32;
  s.side = 16;
  return generate_synthetic_archive(s);
}

// F1 is a deterministic function of the config, so rows are predictable.
TrialResult fake_result(const RunConfig& c) {
  TrialResult r;
  r.ok = true;
  r.seed = c.train.seed;
  r.mean_f1 = (c.train.vicreg.enabled() ? 0.9 : 0.5) + 0.01 * double(c.train.seed);
  return r;
}

nlohmann::json spec_json() {
  return {{"schema_version", 1}, {"axis", "vicreg"}, {"values", {"on", "off"}}, {"trials", 3},
          {"base", {{"schema_version", 1}}}};
}

}  // namespace

TEST_CASE("vicreg on and off with three trials gives six runs and two ranked rows") {
  const AblationSpec spec = parse_ablation_spec(spec_json());
  std::vector<RunConfig> seen;
  const TrialRunner runner = [&](const RunConfig& c, const ArchiveSplit& split, const fs::path&) {
    CHECK(split.train.size() == 24);
    CHECK(split.held_out.size() == 8);
    seen.push_back(c);
    return fake_result(c);
  };
  const AblationTable t = run_ablation(spec, small_archive(), {}, runner);
  CHECK(seen.size() == 6);
  REQUIRE(t.rows.size() == 2);
  CHECK(t.rows[0].setting == "on");
  CHECK(t.rows[1].setting == "off");
  CHECK(std::abs(t.row("on").mean_f1 - 0.91) < 1e-12);
  CHECK(std::abs(t.row("off").mean_f1 - 0.51) < 1e-12);
  CHECK(std::abs(t.row("on").std - 0.01) < 1e-12);
  CHECK(t.row("on").n_trials == 3);
  CHECK(t.trials.size() == 6);
  CHECK(t.warnings.empty());
  CHECK_THROWS_AS(t.row("maybe"), ContractViolation);

  std::ostringstream csv;
  t.write_csv(csv);
  std::istringstream lines(csv.str());
  std::string header;
  std::getline(lines, header);
  CHECK(header == "setting,mean_f1,std,n_trials");
  int n = 0;
  for (std::string l; std::getline(lines, l);) ++n;
  CHECK(n == 2);
  const auto j = t.to_json();
  CHECK(j["axis"] == "vicreg");
  CHECK(j["trials"].size() == 6);
}

TEST_CASE("trials differ only in seed and settings share seeds") {
  const AblationSpec spec = parse_ablation_spec(spec_json());
  std::vector<RunConfig> seen;
  const TrialRunner runner = [&](const RunConfig& c, const ArchiveSplit&, const fs::path&) {
    seen.push_back(c);
    return fake_result(c);
  };
  run_ablation(spec, small_archive(), {}, runner);
  REQUIRE(seen.size() == 6);
  for (int s = 0; s < 2; ++s) {
    for (int t = 0; t < 3; ++t) {
      RunConfig c = seen[std::size_t(s * 3 + t)];
      CHECK(c.train.seed == spec.base.train.seed + std::uint64_t(t));
      c.train.seed = seen[std::size_t(s * 3)].train.seed;
      CHECK(c == seen[std::size_t(s * 3)]);
    }
  }
  RunConfig off = seen[3];
  off.train.vicreg = seen[0].train.vicreg;
  CHECK(off == seen[0]);
}

TEST_CASE("a failing trial is recorded, excluded and warned about") {
  const AblationSpec spec = parse_ablation_spec(spec_json());
  const TrialRunner runner = [&](const RunConfig& c, const ArchiveSplit&, const fs::path&) -> TrialResult {
    if (!c.train.vicreg.enabled() && c.train.seed == 1) throw TrainingDivergence("loss became non-finite");
    return fake_result(c);
  };
  const AblationTable t = run_ablation(spec, small_archive(), {}, runner);
  CHECK(t.trials.size() == 6);
  CHECK(t.row("off").n_trials == 2);
  CHECK(t.row("off").n_failed == 1);
  CHECK(std::abs(t.row("off").mean_f1 - 0.51) < 1e-12);
  REQUIRE(t.warnings.size() == 1);
  CHECK(t.warnings[0].find("vicreg=off") != std::string::npos);
  CHECK(t.warnings[0].find("non-finite") != std::string::npos);
  int failed = 0;
  for (const auto& tr : t.trials) failed += tr.ok ? 0 : 1;
  CHECK(failed == 1);
}

TEST_CASE("memoization trains identical configs once") {
  int calls = 0;
  MemoizingTrialRunner memo([&](const RunConfig& c, const ArchiveSplit&, const fs::path&) {
    ++calls;
    return fake_result(c);
  });
  const TrialRunner runner = [&](const RunConfig& c, const ArchiveSplit& s, const fs::path& d) {
    return memo(c, s, d);
  };
  const Archive a = small_archive();
  const AblationSpec spec = parse_ablation_spec(spec_json());
  run_ablation(spec, a, {}, runner);
  nlohmann::json j = spec_json();
  j["values"] = {"on"};
  run_ablation(parse_ablation_spec(j), a, {}, runner);
  CHECK(calls == 6);
  CHECK(memo.runs() == 6);
}

TEST_CASE("settings change only their axis") {
  const RunConfig base;
  RunConfig c = apply_setting(base, AblationAxis::predictor_depth, "2");
  CHECK(c.predictor.depth == 2);
  c.predictor.depth = base.predictor.depth;
  CHECK(c == base);

  c = apply_setting(base, AblationAxis::masking_ratio, "0.85");
  CHECK(c.train.mask.target_ratio == 0.85);

  c = apply_setting(base, AblationAxis::masking_strategy, "multi_block");
  CHECK(c.train.mask.strategy == MaskStrategy::multi_block);
  CHECK(c.train.mask.n_target_groups == 4);
  c = apply_setting(c, AblationAxis::masking_strategy, "random_disjoint");
  CHECK(c == base);

  c = apply_setting(base, AblationAxis::vicreg, "off");
  CHECK(!c.train.vicreg.enabled());
  CHECK(c.train.vicreg.gamma == base.train.vicreg.gamma);
  CHECK(apply_setting(c, AblationAxis::vicreg, "on") == base);
  CHECK(apply_setting(base, AblationAxis::vicreg, "on") == base);

  CHECK_THROWS_AS(apply_setting(base, AblationAxis::vicreg, "maybe"), ConfigError);
  CHECK_THROWS_AS(apply_setting(base, AblationAxis::masking_ratio, "1.5"), ConfigError);
  CHECK_THROWS_AS(apply_setting(base, AblationAxis::masking_ratio, "abc"), ConfigError);
  CHECK_THROWS_AS(apply_setting(base, AblationAxis::predictor_depth, "0"), ConfigError);
  CHECK_THROWS_AS(apply_setting(base, AblationAxis::masking_strategy, "grid"), ConfigError);
}

TEST_CASE("spec parsing collects every error") {
  nlohmann::json j = {{"axis", "colour"}, {"values", nlohmann::json::array()}, {"extra", 1}, {"trials", 0}};
  try {
    parse_ablation_spec(j);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string m = e.what();
    for (const char* f : {"schema_version", "axis", "values", "extra", "trials", "base"}) {
      CHECK_MESSAGE(m.find(std::string(f) + ":") != std::string::npos, f);
    }
  }
  nlohmann::json dup = spec_json();
  dup["values"] = {"on", "on"};
  CHECK_THROWS_AS(parse_ablation_spec(dup), ConfigError);
  nlohmann::json numeric = spec_json();
  numeric["axis"] = "masking_ratio";
  numeric["values"] = {0.25, 0.85};
  const AblationSpec s = parse_ablation_spec(numeric);
  CHECK(s.values == std::vector<std::string>{"0.25", "0.85"});
}

TEST_CASE("spec base may be a path relative to the spec file") {
  const fs::path dir = fs::temp_directory_path() / "rejepa_test_ablation_spec";
  fs::create_directories(dir);
  std::ofstream(dir / "base.json") << nlohmann::json{{"schema_version", 1}, {"train", {{"seed", 5}}}}.dump();
  nlohmann::json j = spec_json();
  j["base"] = "base.json";
  std::ofstream(dir / "spec.json") << j.dump();
  const AblationSpec s = load_ablation_spec(dir / "spec.json");
  CHECK(s.base.train.seed == 5);
  CHECK(s.trials == 3);
}

TEST_CASE("a real trial trains and scores the held-out split") {
  RunConfig c;
  c.data.synthetic.n_images = 32;
  c.data.synthetic.side = 16;
  c.encoder = {16, 1, 2, 8, 2.0, 0, true};
  c.predictor = {8, 1, 2, 2.0};
  c.train.epochs = 2;
  c.train.warmup_epochs = 1;
  c.train.batch_size = 8;
  c.retrieval.k = 3;
  const ArchiveSplit split = split_archive(load_run_archive(c), c.data.holdout_fraction);
  const fs::path dir = fs::temp_directory_path() / "rejepa_test_trial";
  fs::remove_all(dir);
  const TrialResult r = run_trial(c, split, dir);
  CHECK(r.ok);
  CHECK(r.mean_f1 >= 0.0);
  CHECK(r.mean_f1 <= 1.0);
  CHECK(r.embed_std > 0.0);
  CHECK(fs::exists(r.checkpoint_path));
  CHECK(fs::exists(dir / "metrics.jsonl"));
}
