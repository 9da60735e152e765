#include "rejepa/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <CLI11.hpp>

#include "rejepa/ablation.hpp"
#include "rejepa/checkpoint.hpp"
#include "rejepa/errors.hpp"
#include "rejepa/retrieval.hpp"
#include "rejepa/training.hpp"

namespace rejepa {

namespace fs = std::filesystem;

fs::path metrics_directory(const fs::path& output_dir) {
  if (const char* env = std::getenv(kMetricsDirEnv); env != nullptr && *env != '\0') return env;
  return output_dir;
}

nlohmann::json error_json(const std::string& kind, const std::string& message) {
  return {{"error", kind}, {"message", message}};
}

namespace {

struct Options {
  bool quiet = false;
  std::string config;
  std::string out;
  std::string resume;
  long long stop_at = -1;
  std::string checkpoint;
  std::string archive;
  std::string index;
  std::string image;
  std::string metric;
  int k = -1;
  std::string spec;
};

void write_json_file(const fs::path& path, const nlohmann::json& j) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << j.dump(2) << '\n';
}

// Records to embed or evaluate: a manifest directory, or the held-out split of
// the config's data source.
Archive evaluation_records(const Options& o) {
  if (!o.archive.empty()) return load_archive(o.archive);
  if (o.config.empty()) throw ConfigError("one of --archive or --config is required");
  const RunConfig cfg = load_run_config(o.config);
  return split_archive(load_run_archive(cfg), cfg.data.holdout_fraction).held_out;
}

Metric resolve_metric(const Options& o) {
  if (!o.metric.empty()) return metric_from_string(o.metric);
  if (!o.config.empty()) return load_run_config(o.config).retrieval.metric;
  return Metric::euclidean;
}

int cmd_train(const Options& o, std::ostream& out) {
  const RunConfig cfg = load_run_config(o.config);
  const fs::path out_dir = o.out.empty() ? cfg.output_dir : fs::path(o.out);
  fs::create_directories(out_dir);
  const fs::path metrics_dir = metrics_directory(out_dir);
  fs::create_directories(metrics_dir);

  const ArchiveSplit split = split_archive(load_run_archive(cfg), cfg.data.holdout_fraction);
  const ModelConfig mc = resolve_model_config(cfg, split.train);
  write_json_file(out_dir / "config.json", to_json(cfg));

  FitOptions options;
  options.checkpoint_dir = out_dir;
  options.metrics_path = metrics_dir / "metrics.jsonl";
  if (!o.resume.empty()) options.resume_from = fs::path(o.resume);
  if (o.stop_at >= 0) options.stop_at_step = o.stop_at;
  if (!o.quiet) {
    options.on_step = [&out](const StepMetrics& m) {
      out << "step " << m.step << " epoch " << m.epoch << " total " << m.total << " L_pred " << m.l_pred
          << " embed_std " << m.embed_std << '\n';
    };
  }
  const FitResult result = fit(mc, cfg.train, split.train, options);
  if (!o.quiet) {
    out << "trained " << result.state.step << "/" << result.state.total_steps << " steps on " << split.train.size()
        << " images\ncheckpoint: " << result.final_checkpoint.string()
        << "\nmetrics: " << options.metrics_path.string() << '\n';
  }
  return 0;
}

int cmd_embed(const Options& o, std::ostream& out) {
  const TrainState state = load_checkpoint(o.checkpoint);
  const Archive records = evaluation_records(o);
  const FeatureIndex index = build_index(state.model, records, resolve_metric(o));
  save_index(o.out, index);
  if (!o.quiet) out << "indexed " << index.size() << " images (d=" << index.matrix.cols() << ") into " << o.out << '\n';
  return 0;
}

int cmd_query(const Options& o, std::ostream& out) {
  const FeatureIndex index = load_index(o.index);
  const TrainState state = load_checkpoint(o.checkpoint);
  ImageTensor image = read_image_file(o.image);
  standardize_bands(image);
  const Vector v = pooled_embedding(state.model, image, EncoderSide::target);
  const auto neighbors = query(index, v.transpose(), o.k < 0 ? 10 : o.k);
  nlohmann::json list = nlohmann::json::array();
  for (const auto& n : neighbors) list.push_back({{"id", n.id}, {"distance", n.distance}});
  out << nlohmann::json{{"k", neighbors.size()}, {"metric", to_string(index.metric)}, {"neighbors", list}}.dump()
      << '\n';
  return 0;
}

int cmd_eval(const Options& o, std::ostream& out) {
  const TrainState state = load_checkpoint(o.checkpoint);
  const Archive records = evaluation_records(o);
  int k = o.k;
  if (k < 0) k = o.config.empty() ? 10 : load_run_config(o.config).retrieval.k;
  const FeatureIndex index = build_index(state.model, records, resolve_metric(o));
  const EvaluationReport report = evaluate_archive(index, records, k);
  nlohmann::json j = report.to_json();
  j.erase("per_query");
  j["n_queries"] = report.per_query.size();
  out << j.dump() << '\n';
  return 0;
}

int cmd_ablate(const Options& o, std::ostream& out, std::ostream& err) {
  const AblationSpec spec = load_ablation_spec(o.spec);
  const fs::path out_dir = o.out.empty() ? spec.base.output_dir / ("ablation_" + to_string(spec.axis)) : fs::path(o.out);
  fs::create_directories(out_dir);
  const Archive archive = load_run_archive(spec.base);
  const AblationTable table = run_ablation(spec, archive, out_dir);
  {
    std::ofstream csv(out_dir / "table.csv");
    if (!csv) throw IoError("cannot write " + (out_dir / "table.csv").string());
    table.write_csv(csv);
  }
  write_json_file(out_dir / "runs.json", table.to_json());
  table.write_csv(out);
  for (const auto& w : table.warnings) err << "warning: " << w << '\n';
  return 0;
}

int cmd_synth(const Options& o, std::ostream& out) {
  RunConfig cfg;
  if (!o.config.empty()) cfg = load_run_config(o.config);
  if (cfg.data.kind != DataSource::Kind::synthetic) throw ConfigError("data.source: synth needs a synthetic source");
  SyntheticConfig s = cfg.data.synthetic;
  s.patch_size = cfg.encoder.patch_size;
  const Archive archive = generate_synthetic_archive(s);
  write_archive(archive, o.out);
  if (!o.quiet) out << "wrote " << archive.size() << " images to " << o.out << '\n';
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"ReJEPA: self-supervised JEPA pretraining and k-NN image retrieval"};
  app.require_subcommand(1);
  Options o;
  app.add_flag("-q,--quiet", o.quiet, "suppress the human-readable summary");

  auto* train = app.add_subcommand("train", "train a model from a run config");
  train->add_option("-c,--config", o.config, "run config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("-o,--out", o.out, "output directory (default: output.dir of the config)");
  train->add_option("--resume", o.resume, "checkpoint to resume from")->check(CLI::ExistingFile);
  train->add_option("--stop-at-step", o.stop_at, "stop after this many optimizer steps")->check(CLI::NonNegativeNumber);

  auto* embed = app.add_subcommand("embed", "build a feature index file");
  embed->add_option("--checkpoint", o.checkpoint)->required()->check(CLI::ExistingFile);
  embed->add_option("--archive", o.archive, "manifest directory to index")->check(CLI::ExistingDirectory);
  embed->add_option("-c,--config", o.config, "index the held-out split of this config's data")
      ->check(CLI::ExistingFile);
  embed->add_option("--metric", o.metric, "euclidean or cosine");
  embed->add_option("-o,--out", o.out, "index file to write")->required();

  auto* q = app.add_subcommand("query", "k nearest neighbours of an image file");
  q->add_option("--index", o.index)->required()->check(CLI::ExistingFile);
  q->add_option("--checkpoint", o.checkpoint, "model used to embed the query")->required()->check(CLI::ExistingFile);
  q->add_option("--image", o.image, "raw image file")->required()->check(CLI::ExistingFile);
  q->add_option("-k", o.k, "number of neighbours (default 10)");

  auto* ev = app.add_subcommand("eval", "mean F1@k of a checkpoint");
  ev->add_option("--checkpoint", o.checkpoint)->required()->check(CLI::ExistingFile);
  ev->add_option("--archive", o.archive, "manifest directory to evaluate")->check(CLI::ExistingDirectory);
  ev->add_option("-c,--config", o.config, "evaluate the held-out split of this config's data")
      ->check(CLI::ExistingFile);
  ev->add_option("--metric", o.metric, "euclidean or cosine");
  ev->add_option("-k", o.k, "neighbours per query (default: retrieval.k, else 10)");

  auto* ab = app.add_subcommand("ablate", "run an ablation spec and print the CSV table");
  ab->add_option("--spec", o.spec)->required()->check(CLI::ExistingFile);
  ab->add_option("-o,--out", o.out, "directory for per-run artifacts and table.csv");

  auto* synth = app.add_subcommand("synth", "write the synthetic archive as a manifest directory");
  synth->add_option("-c,--config", o.config, "run config supplying the synthetic parameters")
      ->check(CLI::ExistingFile);
  synth->add_option("-o,--out", o.out, "output directory")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << error_json("usage_error", e.what()).dump() << '\n';
    return 2;
  }

  try {
    if (*train) return cmd_train(o, out);
    if (*embed) return cmd_embed(o, out);
    if (*q) return cmd_query(o, out);
    if (*ev) return cmd_eval(o, out);
    if (*ab) return cmd_ablate(o, out, err);
    if (*synth) return cmd_synth(o, out);
  } catch (const Error& e) {
    err << error_json(e.kind(), e.what()).dump() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << error_json("internal_error", e.what()).dump() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace rejepa
