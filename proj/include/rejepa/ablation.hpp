#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rejepa/config.hpp"
#include "rejepa/data.hpp"

namespace rejepa {

enum class AblationAxis { predictor_depth, masking_strategy, masking_ratio, vicreg };

std::string to_string(AblationAxis axis);
AblationAxis ablation_axis_from_string(const std::string& s);

struct AblationSpec {
  AblationAxis axis = AblationAxis::vicreg;
  std::vector<std::string> values;  // "3", "multi_block", "0.4", "off", ...
  RunConfig base;
  int trials = 3;

  /// Throws ConfigError unless every value yields a valid config.
  void validate() const;
};

/// Ablation spec file: {"schema_version": 1, "axis": ..., "values": [...],
/// "trials": n, "base": <run config>}. "base" may also be a path to a run
/// config file, resolved relative to the spec file.
AblationSpec parse_ablation_spec(const nlohmann::json& j, const std::filesystem::path& relative_to = {});
AblationSpec load_ablation_spec(const std::filesystem::path& path);

/// `base` with the swept field replaced by `value`. Switching the masking
/// strategy also switches the target-group count to that strategy's default
/// (1 for random_disjoint, 4 for multi_block); "vicreg=off" zeroes all three
/// coefficients and "on" restores the defaults where the base had them off.
RunConfig apply_setting(const RunConfig& base, AblationAxis axis, const std::string& value);

/// Trial t of a setting differs from trial 0 only in train.seed (base + t).
RunConfig trial_config(const RunConfig& setting_config, int trial);

struct TrialResult {
  std::string setting;
  int trial = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double mean_f1 = 0.0;
  double embed_std = 0.0;  // mean per-dimension std of held-out pooled embeddings
  std::filesystem::path metrics_path;
  std::filesystem::path checkpoint_path;
};

/// Trains on the train split, indexes the held-out split with the target
/// encoder and reports mean F1@k there. Artifacts go under `out_dir` when it
/// is non-empty. Errors propagate.
TrialResult run_trial(const RunConfig& config, const ArchiveSplit& split, const std::filesystem::path& out_dir = {});

using TrialRunner = std::function<TrialResult(const RunConfig& config, const ArchiveSplit& split,
                                              const std::filesystem::path& out_dir)>;

/// Caches results by the full serialized config, so identical runs requested
/// by different experiments train once.
class MemoizingTrialRunner {
 public:
  explicit MemoizingTrialRunner(TrialRunner inner = run_trial) : inner_(std::move(inner)) {}
  TrialResult operator()(const RunConfig& config, const ArchiveSplit& split, const std::filesystem::path& out_dir);
  std::size_t runs() const { return runs_; }

 private:
  TrialRunner inner_;
  std::map<std::string, TrialResult> cache_;
  std::size_t runs_ = 0;
};

struct AblationRow {
  std::string setting;
  double mean_f1 = 0.0;
  double std = 0.0;  // sample std over successful trials, 0 for a single trial
  int n_trials = 0;  // successful trials
  int n_failed = 0;
};

struct AblationTable {
  AblationAxis axis = AblationAxis::vicreg;
  std::vector<AblationRow> rows;     // ranked by mean_f1, descending; ties keep spec order
  std::vector<TrialResult> trials;   // every attempted run, failures included
  std::vector<std::string> warnings;

  /// Row for `setting`; throws ContractViolation when absent.
  const AblationRow& row(const std::string& setting) const;
  void write_csv(std::ostream& out) const;
  nlohmann::json to_json() const;
};

/// Runs |values| x trials trainings. A failing trial is kept in `trials` with
/// its error, excluded from the row statistics and reported in `warnings`.
AblationTable run_ablation(const AblationSpec& spec, const Archive& archive,
                           const std::filesystem::path& out_dir = {}, const TrialRunner& runner = run_trial);

}  // namespace rejepa
