#include "rejepa/config.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "rejepa/errors.hpp"

namespace rejepa {

namespace {

using nlohmann::json;

// Walks one JSON object, recording every problem instead of stopping at the
// first; unknown keys are reported by finish().
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path, std::vector<std::string>& errors)
      : j_(j), path_(std::move(path)), errors_(errors) {
    if (!j_.is_object()) {
      error("", "must be an object");
      valid_ = false;
    }
  }

  bool has(const std::string& key) const { return valid_ && j_.contains(key); }

  template <class T>
  void number(const std::string& key, T& out, double lo, double hi, bool lo_open = false) {
    if (!claim(key)) return;
    const json& v = j_.at(key);
    if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) return error(key, "must be an integer");
    } else {
      if (!v.is_number()) return error(key, "must be a number");
    }
    const double d = v.get<double>();
    if (!std::isfinite(d) || d < lo || d > hi || (lo_open && d == lo)) {
      std::ostringstream os;
      os << "must lie in " << (lo_open ? "(" : "[") << lo << ", " << hi << "], got " << v.dump();
      return error(key, os.str());
    }
    out = v.get<T>();
  }

  void seed(const std::string& key, std::uint64_t& out) {
    if (!claim(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
      return error(key, "must be a non-negative integer");
    }
    out = v.get<std::uint64_t>();
  }

  void boolean(const std::string& key, bool& out) {
    if (!claim(key)) return;
    if (!j_.at(key).is_boolean()) return error(key, "must be true or false");
    out = j_.at(key).get<bool>();
  }

  void string(const std::string& key, std::string& out) {
    if (!claim(key)) return;
    if (!j_.at(key).is_string()) return error(key, "must be a string");
    out = j_.at(key).get<std::string>();
  }

  void range(const std::string& key, double& lo_out, double& hi_out, double lo, double hi) {
    if (!claim(key)) return;
    const json& v = j_.at(key);
    if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number()) {
      return error(key, "must be a [min, max] pair of numbers");
    }
    const double a = v[0].get<double>(), b = v[1].get<double>();
    if (!(a > lo && a <= b && b <= hi)) {
      std::ostringstream os;
      os << "must satisfy " << lo << " < min <= max <= " << hi;
      return error(key, os.str());
    }
    lo_out = a;
    hi_out = b;
  }

  const json* object(const std::string& key) {
    if (!claim(key)) return nullptr;
    return &j_.at(key);
  }

  void error(const std::string& key, const std::string& what) {
    errors_.push_back(field(key) + ": " + what);
  }

  std::string field(const std::string& key) const {
    if (key.empty()) return path_.empty() ? "<root>" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  void finish() {
    if (!valid_) return;
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) error(it.key(), "unknown key");
    }
  }

 private:
  bool claim(const std::string& key) {
    if (!valid_) return false;
    seen_.insert(key);
    return j_.contains(key);
  }

  const json& j_;
  std::string path_;
  std::vector<std::string>& errors_;
  std::set<std::string> seen_;
  bool valid_ = true;
};

constexpr double kMaxInt = 1e9;

void read_encoder(ObjectReader& r, EncoderConfig& e) {
  r.number("embed_dim", e.embed_dim, 4, kMaxInt);
  r.number("depth", e.depth, 1, 1000);
  r.number("n_heads", e.n_heads, 1, kMaxInt);
  r.number("patch_size", e.patch_size, 1, kMaxInt);
  r.number("mlp_ratio", e.mlp_ratio, 0, 1000, true);
  r.boolean("final_norm", e.final_norm);
  if (e.embed_dim % 4 != 0) r.error("embed_dim", "must be a multiple of 4");
  if (e.n_heads > 0 && e.embed_dim % e.n_heads != 0) r.error("n_heads", "must divide embed_dim");
}

void read_predictor(ObjectReader& r, PredictorConfig& p) {
  r.number("embed_dim", p.embed_dim, 4, kMaxInt);
  r.number("depth", p.depth, 1, 1000);
  r.number("n_heads", p.n_heads, 1, kMaxInt);
  r.number("mlp_ratio", p.mlp_ratio, 0, 1000, true);
  if (p.embed_dim % 4 != 0) r.error("embed_dim", "must be a multiple of 4");
  if (p.n_heads > 0 && p.embed_dim % p.n_heads != 0) r.error("n_heads", "must divide embed_dim");
}

void read_mask(ObjectReader& r, MaskConfig& m) {
  std::string strategy = to_string(m.strategy);
  r.string("strategy", strategy);
  try {
    m.strategy = mask_strategy_from_string(strategy);
  } catch (const ConfigError& e) {
    r.error("strategy", e.what());
  }
  r.number("target_ratio", m.target_ratio, 0, 1, true);
  if (m.target_ratio >= 1.0) r.error("target_ratio", "must be < 1");
  r.number("n_target_groups", m.n_target_groups, 1, kMaxInt);
  r.range("block_scale", m.block_scale_min, m.block_scale_max, 0.0, 1.0);
  r.range("block_aspect", m.aspect_min, m.aspect_max, 0.0, 1000.0);
  r.seed("seed", m.seed);
}

void read_vicreg(ObjectReader& r, VicregConfig& v) {
  const double inf = std::numeric_limits<double>::max();
  r.number("lambda_v", v.lambda_v, 0, inf);
  r.number("lambda_c", v.lambda_c, 0, inf);
  r.number("lambda_i", v.lambda_i, 0, inf);
  r.number("gamma", v.gamma, 0, inf);
  r.number("epsilon", v.epsilon, 0, inf, true);
}

void read_train(ObjectReader& r, TrainConfig& t) {
  r.number("epochs", t.epochs, 1, kMaxInt);
  r.number("batch_size", t.batch_size, 1, kMaxInt);
  r.number("lr_init", t.lr_init, 0, 10, true);
  r.number("lr_peak", t.lr_peak, 0, 10, true);
  r.number("lr_final", t.lr_final, 0, 10);
  r.number("warmup_epochs", t.warmup_epochs, 0, kMaxInt);
  r.number("wd_init", t.wd_init, 0, 10);
  r.number("wd_final", t.wd_final, 0, 10);
  r.number("ema_init", t.ema_init, 0, 1);
  r.seed("seed", t.seed);
  r.number("checkpoint_every", t.checkpoint_every, 0, kMaxInt);
  if (t.lr_peak < t.lr_init) r.error("lr_peak", "must be >= lr_init");
  if (t.lr_final > t.lr_peak) r.error("lr_final", "must be <= lr_peak");
  if (t.warmup_epochs > t.epochs) r.error("warmup_epochs", "must be <= epochs");
}

template <class F>
void section(ObjectReader& parent, const std::string& key, std::vector<std::string>& errors, F&& fn) {
  if (const json* j = parent.object(key)) {
    ObjectReader r(*j, parent.field(key), errors);
    fn(r);
    r.finish();
  }
}

void raise(const std::vector<std::string>& errors) {
  if (errors.empty()) return;
  std::ostringstream os;
  os << "invalid configuration (" << errors.size() << (errors.size() == 1 ? " error" : " errors") << "):";
  for (const auto& e : errors) os << "\n  " << e;
  throw ConfigError(os.str());
}

json encoder_json(const EncoderConfig& e) {
  return {{"embed_dim", e.embed_dim}, {"depth", e.depth}, {"n_heads", e.n_heads},
          {"patch_size", e.patch_size}, {"mlp_ratio", e.mlp_ratio}, {"final_norm", e.final_norm}};
}

json predictor_json(const PredictorConfig& p) {
  return {{"embed_dim", p.embed_dim}, {"depth", p.depth}, {"n_heads", p.n_heads}, {"mlp_ratio", p.mlp_ratio}};
}

json mask_json(const MaskConfig& m) {
  return {{"strategy", to_string(m.strategy)},
          {"target_ratio", m.target_ratio},
          {"n_target_groups", m.n_target_groups},
          {"block_scale", {m.block_scale_min, m.block_scale_max}},
          {"block_aspect", {m.aspect_min, m.aspect_max}},
          {"seed", m.seed}};
}

json vicreg_json(const VicregConfig& v) {
  return {{"lambda_v", v.lambda_v}, {"lambda_c", v.lambda_c}, {"lambda_i", v.lambda_i},
          {"gamma", v.gamma},       {"epsilon", v.epsilon}};
}

json train_json(const TrainConfig& t) {
  return {{"epochs", t.epochs},   {"batch_size", t.batch_size},       {"lr_init", t.lr_init},
          {"lr_peak", t.lr_peak}, {"lr_final", t.lr_final},           {"warmup_epochs", t.warmup_epochs},
          {"wd_init", t.wd_init}, {"wd_final", t.wd_final},           {"ema_init", t.ema_init},
          {"seed", t.seed},       {"checkpoint_every", t.checkpoint_every}};
}

}  // namespace

RunConfig parse_run_config(const json& j) {
  std::vector<std::string> errors;
  RunConfig cfg;
  ObjectReader root(j, "", errors);
  if (!root.has("schema_version")) {
    root.error("schema_version", "is required");
  } else {
    root.number("schema_version", cfg.schema_version, 0, kMaxInt);
    if (cfg.schema_version != kRunConfigSchemaVersion) {
      root.error("schema_version", "unsupported version " + std::to_string(cfg.schema_version) + " (expected " +
                                       std::to_string(kRunConfigSchemaVersion) + ")");
    }
  }
  section(root, "data", errors, [&](ObjectReader& r) {
    std::string source = "synthetic";
    r.string("source", source);
    r.number("holdout_fraction", cfg.data.holdout_fraction, 0, 1);
    if (cfg.data.holdout_fraction >= 1.0) r.error("holdout_fraction", "must be < 1");
    if (source == "synthetic") {
      cfg.data.kind = DataSource::Kind::synthetic;
      auto& s = cfg.data.synthetic;
      r.number("n_images", s.n_images, 2, kMaxInt);
      r.number("n_classes", s.n_classes, 2, kMaxInt);
      r.number("bands", s.bands, 1, kMaxInt);
      r.number("side", s.side, 1, kMaxInt);
      r.seed("seed", s.seed);
      r.number("noise", s.noise, 0, 1e6);
      if (s.n_images < s.n_classes) r.error("n_images", "must be >= n_classes");
    } else if (source == "manifest") {
      cfg.data.kind = DataSource::Kind::manifest;
      std::string path;
      r.string("path", path);
      if (path.empty()) r.error("path", "is required for a manifest source");
      cfg.data.path = path;
    } else {
      r.error("source", "must be \"synthetic\" or \"manifest\", got \"" + source + "\"");
    }
  });
  section(root, "encoder", errors, [&](ObjectReader& r) { read_encoder(r, cfg.encoder); });
  section(root, "predictor", errors, [&](ObjectReader& r) { read_predictor(r, cfg.predictor); });
  section(root, "mask", errors, [&](ObjectReader& r) { read_mask(r, cfg.train.mask); });
  section(root, "vicreg", errors, [&](ObjectReader& r) { read_vicreg(r, cfg.train.vicreg); });
  section(root, "train", errors, [&](ObjectReader& r) { read_train(r, cfg.train); });
  section(root, "retrieval", errors, [&](ObjectReader& r) {
    r.number("k", cfg.retrieval.k, 1, kMaxInt);
    std::string metric = to_string(cfg.retrieval.metric);
    r.string("metric", metric);
    try {
      cfg.retrieval.metric = metric_from_string(metric);
    } catch (const ConfigError& e) {
      r.error("metric", e.what());
    }
  });
  section(root, "output", errors, [&](ObjectReader& r) {
    std::string dir = cfg.output_dir.string();
    r.string("dir", dir);
    cfg.output_dir = dir;
  });
  if (cfg.data.kind == DataSource::Kind::synthetic && cfg.encoder.patch_size > 0 &&
      cfg.data.synthetic.side % cfg.encoder.patch_size != 0) {
    errors.push_back("data.side: must be divisible by encoder.patch_size");
  }
  if (cfg.data.kind == DataSource::Kind::synthetic) cfg.data.synthetic.patch_size = cfg.encoder.patch_size;
  root.finish();
  raise(errors);
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

json to_json(const RunConfig& c) {
  json data;
  if (c.data.kind == DataSource::Kind::synthetic) {
    const auto& s = c.data.synthetic;
    data = {{"source", "synthetic"}, {"n_images", s.n_images}, {"n_classes", s.n_classes}, {"bands", s.bands},
            {"side", s.side},        {"seed", s.seed},         {"noise", s.noise}};
  } else {
    data = {{"source", "manifest"}, {"path", c.data.path.string()}};
  }
  data["holdout_fraction"] = c.data.holdout_fraction;
  return {{"schema_version", c.schema_version},
          {"data", data},
          {"encoder", encoder_json(c.encoder)},
          {"predictor", predictor_json(c.predictor)},
          {"mask", mask_json(c.train.mask)},
          {"vicreg", vicreg_json(c.train.vicreg)},
          {"train", train_json(c.train)},
          {"retrieval", {{"k", c.retrieval.k}, {"metric", to_string(c.retrieval.metric)}}},
          {"output", {{"dir", c.output_dir.string()}}}};
}

ModelConfig resolve_model_config(const RunConfig& config, const Archive& archive) {
  if (archive.empty()) throw ConfigError("archive is empty");
  ModelConfig m;
  m.encoder = config.encoder;
  m.predictor = config.predictor;
  m.encoder.input_bands = archive.front().image.bands;
  m.image_height = archive.front().image.height;
  m.image_width = archive.front().image.width;
  m.validate();
  return m;
}

Archive load_run_archive(const RunConfig& config) {
  if (config.data.kind == DataSource::Kind::manifest) return load_archive(config.data.path);
  SyntheticConfig s = config.data.synthetic;
  s.patch_size = config.encoder.patch_size;
  return generate_synthetic_archive(s);
}

json to_json(const ModelConfig& c) {
  json e = encoder_json(c.encoder);
  e["input_bands"] = c.encoder.input_bands;
  return {{"encoder", e},
          {"predictor", predictor_json(c.predictor)},
          {"image_height", c.image_height},
          {"image_width", c.image_width}};
}

json to_json(const TrainConfig& c) {
  json j = train_json(c);
  j["mask"] = mask_json(c.mask);
  j["vicreg"] = vicreg_json(c.vicreg);
  return j;
}

ModelConfig model_config_from_json(const json& j) {
  std::vector<std::string> errors;
  ModelConfig m;
  ObjectReader root(j, "model", errors);
  section(root, "encoder", errors, [&](ObjectReader& r) {
    read_encoder(r, m.encoder);
    r.number("input_bands", m.encoder.input_bands, 1, kMaxInt);
  });
  section(root, "predictor", errors, [&](ObjectReader& r) { read_predictor(r, m.predictor); });
  root.number("image_height", m.image_height, 1, kMaxInt);
  root.number("image_width", m.image_width, 1, kMaxInt);
  root.finish();
  raise(errors);
  m.validate();
  return m;
}

TrainConfig train_config_from_json(const json& j) {
  std::vector<std::string> errors;
  TrainConfig t;
  ObjectReader root(j, "train", errors);
  read_train(root, t);
  section(root, "mask", errors, [&](ObjectReader& r) { read_mask(r, t.mask); });
  section(root, "vicreg", errors, [&](ObjectReader& r) { read_vicreg(r, t.vicreg); });
  root.finish();
  raise(errors);
  return t;
}

}  // namespace rejepa
