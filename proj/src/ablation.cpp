#include "rejepa/ablation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "rejepa/errors.hpp"
#include "rejepa/retrieval.hpp"
#include "rejepa/training.hpp"

namespace rejepa {

std::string to_string(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::predictor_depth: return "predictor_depth";
    case AblationAxis::masking_strategy: return "masking_strategy";
    case AblationAxis::masking_ratio: return "masking_ratio";
    case AblationAxis::vicreg: return "vicreg";
  }
  return "?";
}

AblationAxis ablation_axis_from_string(const std::string& s) {
  for (auto a : {AblationAxis::predictor_depth, AblationAxis::masking_strategy, AblationAxis::masking_ratio,
                 AblationAxis::vicreg}) {
    if (to_string(a) == s) return a;
  }
  throw ConfigError("unknown ablation axis \"" + s +
                    "\" (expected predictor_depth, masking_strategy, masking_ratio or vicreg)");
}

namespace {

double parse_number(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) throw ConfigError(what + ": \"" + s + "\" is not a number");
  return v;
}

}  // namespace

RunConfig apply_setting(const RunConfig& base, AblationAxis axis, const std::string& value) {
  RunConfig c = base;
  switch (axis) {
    case AblationAxis::predictor_depth: {
      const double d = parse_number(value, "predictor_depth");
      if (d != std::floor(d) || d < 1) throw ConfigError("predictor_depth: must be a positive integer, got " + value);
      c.predictor.depth = int(d);
      break;
    }
    case AblationAxis::masking_strategy:
      c.train.mask.strategy = mask_strategy_from_string(value);
      c.train.mask.n_target_groups = c.train.mask.strategy == MaskStrategy::multi_block ? 4 : 1;
      break;
    case AblationAxis::masking_ratio: {
      const double r = parse_number(value, "masking_ratio");
      if (!(r > 0.0 && r < 1.0)) throw ConfigError("masking_ratio: must lie in (0, 1), got " + value);
      c.train.mask.target_ratio = r;
      break;
    }
    case AblationAxis::vicreg:
      if (value == "off") {
        c.train.vicreg.lambda_v = c.train.vicreg.lambda_c = c.train.vicreg.lambda_i = 0.0;
      } else if (value == "on") {
        if (!c.train.vicreg.enabled()) {
          const VicregConfig defaults;
          c.train.vicreg.lambda_v = defaults.lambda_v;
          c.train.vicreg.lambda_c = defaults.lambda_c;
          c.train.vicreg.lambda_i = defaults.lambda_i;
        }
      } else {
        throw ConfigError("vicreg: setting must be \"on\" or \"off\", got \"" + value + "\"");
      }
      break;
  }
  return c;
}

RunConfig trial_config(const RunConfig& setting_config, int trial) {
  RunConfig c = setting_config;
  c.train.seed = setting_config.train.seed + std::uint64_t(trial);
  return c;
}

void AblationSpec::validate() const {
  if (values.empty()) throw ConfigError("ablation values must be non-empty");
  if (trials < 1) throw ConfigError("ablation trials must be >= 1");
  std::vector<std::string> seen;
  for (const auto& v : values) {
    if (std::find(seen.begin(), seen.end(), v) != seen.end()) {
      throw ConfigError("ablation value \"" + v + "\" is listed twice");
    }
    seen.push_back(v);
    const RunConfig c = apply_setting(base, axis, v);
    c.train.validate();
  }
}

AblationSpec parse_ablation_spec(const nlohmann::json& j, const std::filesystem::path& relative_to) {
  if (!j.is_object()) throw ConfigError("ablation spec must be a JSON object");
  std::vector<std::string> errors;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& k = it.key();
    if (k != "schema_version" && k != "axis" && k != "values" && k != "trials" && k != "base") {
      errors.push_back(k + ": unknown key");
    }
  }
  if (!j.contains("schema_version") || j["schema_version"] != kRunConfigSchemaVersion) {
    errors.push_back("schema_version: must be " + std::to_string(kRunConfigSchemaVersion));
  }
  AblationSpec spec;
  if (!j.contains("axis") || !j["axis"].is_string()) {
    errors.push_back("axis: is required and must be a string");
  } else {
    try {
      spec.axis = ablation_axis_from_string(j["axis"].get<std::string>());
    } catch (const ConfigError& e) {
      errors.push_back(std::string("axis: ") + e.what());
    }
  }
  if (!j.contains("values") || !j["values"].is_array() || j["values"].empty()) {
    errors.push_back("values: is required and must be a non-empty array");
  } else {
    for (const auto& v : j["values"]) {
      if (v.is_string()) {
        spec.values.push_back(v.get<std::string>());
      } else if (v.is_number()) {
        std::ostringstream os;
        os << v.get<double>();
        spec.values.push_back(os.str());
      } else {
        errors.push_back("values: entries must be strings or numbers");
      }
    }
  }
  if (j.contains("trials")) {
    if (!j["trials"].is_number_integer() || j["trials"].get<int>() < 1) {
      errors.push_back("trials: must be an integer >= 1");
    } else {
      spec.trials = j["trials"].get<int>();
    }
  }
  if (!j.contains("base")) {
    errors.push_back("base: is required");
  } else if (j["base"].is_string()) {
    try {
      std::filesystem::path p = j["base"].get<std::string>();
      if (p.is_relative() && !relative_to.empty()) p = relative_to / p;
      spec.base = load_run_config(p);
    } catch (const Error& e) {
      errors.push_back(std::string("base: ") + e.what());
    }
  } else {
    try {
      spec.base = parse_run_config(j["base"]);
    } catch (const ConfigError& e) {
      errors.push_back(std::string("base: ") + e.what());
    }
  }
  if (!errors.empty()) {
    std::ostringstream os;
    os << "invalid ablation spec (" << errors.size() << (errors.size() == 1 ? " error" : " errors") << "):";
    for (const auto& e : errors) os << "\n  " << e;
    throw ConfigError(os.str());
  }
  spec.validate();
  return spec;
}

AblationSpec load_ablation_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open ablation spec " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("ablation spec " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_ablation_spec(j, path.parent_path());
}

TrialResult run_trial(const RunConfig& config, const ArchiveSplit& split, const std::filesystem::path& out_dir) {
  const ModelConfig mc = resolve_model_config(config, split.train);
  FitOptions options;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    options.checkpoint_dir = out_dir;
    options.metrics_path = out_dir / "metrics.jsonl";
  }
  FitResult fitted = fit(mc, config.train, split.train, options);
  const FeatureIndex index = build_index(fitted.state.model, split.held_out, config.retrieval.metric);
  const EvaluationReport report = evaluate_archive(index, split.held_out, config.retrieval.k);

  TrialResult r;
  r.seed = config.train.seed;
  r.ok = true;
  r.mean_f1 = report.mean_f1;
  r.embed_std = collapse_monitor(index.matrix).mean_std;
  r.metrics_path = options.metrics_path;
  r.checkpoint_path = fitted.final_checkpoint;
  return r;
}

TrialResult MemoizingTrialRunner::operator()(const RunConfig& config, const ArchiveSplit& split,
                                             const std::filesystem::path& out_dir) {
  const std::string key = to_json(config).dump();
  if (auto it = cache_.find(key); it != cache_.end()) return it->second;
  ++runs_;
  TrialResult r = inner_(config, split, out_dir);
  cache_.emplace(key, r);
  return r;
}

const AblationRow& AblationTable::row(const std::string& setting) const {
  for (const auto& r : rows) {
    if (r.setting == setting) return r;
  }
  throw ContractViolation("ablation table has no row for setting \"" + setting + "\"");
}

void AblationTable::write_csv(std::ostream& out) const {
  out << "setting,mean_f1,std,n_trials\n";
  out << std::setprecision(17);
  for (const auto& r : rows) out << r.setting << ',' << r.mean_f1 << ',' << r.std << ',' << r.n_trials << '\n';
}

nlohmann::json AblationTable::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    rows_json.push_back({{"setting", r.setting},
                         {"mean_f1", r.mean_f1},
                         {"std", r.std},
                         {"n_trials", r.n_trials},
                         {"n_failed", r.n_failed}});
  }
  nlohmann::json trials_json = nlohmann::json::array();
  for (const auto& t : trials) {
    nlohmann::json tj = {{"setting", t.setting}, {"trial", t.trial}, {"seed", t.seed}, {"ok", t.ok}};
    if (t.ok) {
      tj["mean_f1"] = t.mean_f1;
      tj["embed_std"] = t.embed_std;
      tj["metrics_path"] = t.metrics_path.string();
      tj["checkpoint_path"] = t.checkpoint_path.string();
    } else {
      tj["error"] = t.error;
    }
    trials_json.push_back(tj);
  }
  return {{"axis", to_string(axis)}, {"rows", rows_json}, {"trials", trials_json}, {"warnings", warnings}};
}

AblationTable run_ablation(const AblationSpec& spec, const Archive& archive, const std::filesystem::path& out_dir,
                           const TrialRunner& runner) {
  spec.validate();
  const ArchiveSplit split = split_archive(archive, spec.base.data.holdout_fraction);
  AblationTable table;
  table.axis = spec.axis;

  for (const auto& value : spec.values) {
    const RunConfig setting = apply_setting(spec.base, spec.axis, value);
    AblationRow row;
    row.setting = value;
    std::vector<double> f1s;
    for (int t = 0; t < spec.trials; ++t) {
      const RunConfig cfg = trial_config(setting, t);
      std::filesystem::path dir;
      if (!out_dir.empty()) dir = out_dir / (to_string(spec.axis) + "=" + value) / ("trial_" + std::to_string(t));
      TrialResult result;
      try {
        result = runner(cfg, split, dir);
      } catch (const std::exception& e) {
        result = TrialResult{};
        result.ok = false;
        result.error = e.what();
      }
      result.setting = value;
      result.trial = t;
      result.seed = cfg.train.seed;
      if (result.ok) {
        f1s.push_back(result.mean_f1);
      } else {
        ++row.n_failed;
        table.warnings.push_back("trial " + std::to_string(t) + " of " + to_string(spec.axis) + "=" + value +
                                 " failed and is excluded: " + result.error);
      }
      table.trials.push_back(std::move(result));
    }
    row.n_trials = int(f1s.size());
    if (!f1s.empty()) {
      double sum = 0.0;
      for (double f : f1s) sum += f;
      row.mean_f1 = sum / double(f1s.size());
      if (f1s.size() > 1) {
        double ss = 0.0;
        for (double f : f1s) ss += (f - row.mean_f1) * (f - row.mean_f1);
        row.std = std::sqrt(ss / double(f1s.size() - 1));
      }
    } else {
      row.mean_f1 = std::numeric_limits<double>::quiet_NaN();
    }
    table.rows.push_back(row);
  }
  std::stable_sort(table.rows.begin(), table.rows.end(), [](const AblationRow& a, const AblationRow& b) {
    if (a.n_trials == 0 || b.n_trials == 0) return a.n_trials > b.n_trials;
    return a.mean_f1 > b.mean_f1;
  });
  return table;
}

}  // namespace rejepa
