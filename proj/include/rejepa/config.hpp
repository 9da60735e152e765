#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "rejepa/data.hpp"
#include "rejepa/model.hpp"
#include "rejepa/retrieval.hpp"
#include "rejepa/training.hpp"

namespace rejepa {

inline constexpr int kRunConfigSchemaVersion = 1;

struct DataSource {
  enum class Kind { synthetic, manifest };
  Kind kind = Kind::synthetic;
  SyntheticConfig synthetic;
  std::filesystem::path path;  // manifest directory
  double holdout_fraction = 0.25;

  bool operator==(const DataSource&) const = default;
};

struct RetrievalSpec {
  int k = 10;
  Metric metric = Metric::euclidean;

  bool operator==(const RetrievalSpec&) const = default;
};

/// Everything one run needs. Encoder input bands and the image size are taken
/// from the data at run time (see resolve_model_config).
struct RunConfig {
  int schema_version = kRunConfigSchemaVersion;
  DataSource data;
  EncoderConfig encoder;
  PredictorConfig predictor;
  TrainConfig train;
  RetrievalSpec retrieval;
  std::filesystem::path output_dir = "runs/default";

  bool operator==(const RunConfig&) const = default;
};

/// Validates against the schema: unknown keys, wrong types and out-of-range
/// values are all collected and reported together in one ConfigError, one
/// "field: message" line each. Missing keys take defaults; schema_version is
/// required.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& config);

/// Model config for an archive: copies the encoder/predictor sections and
/// fills input bands and image size from the first record.
ModelConfig resolve_model_config(const RunConfig& config, const Archive& archive);

/// Loads (manifest) or generates (synthetic) the run's archive.
Archive load_run_archive(const RunConfig& config);

nlohmann::json to_json(const ModelConfig& config);
nlohmann::json to_json(const TrainConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);

}  // namespace rejepa
