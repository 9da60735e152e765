#include "rejepa/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

#include <json.hpp>

#include "rejepa/config.hpp"
#include "rejepa/errors.hpp"

namespace rejepa {

namespace {

constexpr char kMagic[8] = {'R', 'J', 'P', 'A', 'C', 'K', 'P', 'T'};

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : path_(path), out_(path, std::ios::binary) {
    if (!out_) throw IoError("cannot write checkpoint " + path.string());
  }
  template <class T>
  void pod(const T& v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void string(const std::string& s, bool wide = false) {
    if (wide) pod<std::uint64_t>(s.size());
    else pod<std::uint32_t>(std::uint32_t(s.size()));
    out_.write(s.data(), std::streamsize(s.size()));
  }
  void tensor(const std::string& name, const Matrix& m) {
    string(name);
    pod<std::uint64_t>(std::uint64_t(m.rows()));
    pod<std::uint64_t>(std::uint64_t(m.cols()));
    out_.write(reinterpret_cast<const char*>(m.data()), std::streamsize(m.size() * sizeof(double)));
  }
  void finish() {
    out_.flush();
    if (!out_) throw IoError("short write to checkpoint " + path_.string());
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot open checkpoint " + path.string());
  }
  template <class T>
  T pod() {
    T v{};
    if (!in_.read(reinterpret_cast<char*>(&v), sizeof(T))) fail("truncated");
    return v;
  }
  std::string string(bool wide = false) {
    const std::uint64_t n = wide ? pod<std::uint64_t>() : pod<std::uint32_t>();
    if (n > (std::uint64_t(1) << 30)) fail("implausible string length");
    std::string s(n, '\0');
    if (n && !in_.read(s.data(), std::streamsize(n))) fail("truncated");
    return s;
  }
  std::pair<std::string, Matrix> tensor() {
    std::string name = string();
    const auto rows = pod<std::uint64_t>(), cols = pod<std::uint64_t>();
    if (rows * cols > (std::uint64_t(1) << 32)) fail("implausible tensor shape for " + name);
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    if (m.size() && !in_.read(reinterpret_cast<char*>(m.data()), std::streamsize(m.size() * sizeof(double)))) {
      fail("truncated tensor " + name);
    }
    return {std::move(name), std::move(m)};
  }
  void read_bytes(char* dst, std::size_t n) {
    if (!in_.read(dst, std::streamsize(n))) fail("truncated");
  }
  void expect_end() {
    in_.peek();
    if (!in_.eof()) fail("trailing bytes");
  }
  [[noreturn]] void fail(const std::string& what) const {
    throw IoError("checkpoint " + path_.string() + ": " + what);
  }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
};

std::vector<std::pair<std::string, const Matrix*>> state_tensors(TrainState& state) {
  std::vector<std::pair<std::string, const Matrix*>> out;
  ParamList params = state.model.trainable_params();
  for (Param* p : state.model.target_params()) params.push_back(p);
  for (Param* p : params) out.emplace_back(p->name, &p->value);
  out.emplace_back("pos_embed", &state.model.pos_embed);
  out.emplace_back("predictor_pos_embed", &state.model.predictor_pos_embed);
  return out;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const TrainState& cstate) {
  auto& state = const_cast<TrainState&>(cstate);  // parameter collection is non-const; nothing is modified
  const nlohmann::json echo = {{"model", to_json(state.model_config)}, {"train", to_json(state.config)}};
  Writer w(path);
  for (char c : kMagic) w.pod(c);
  w.pod<std::uint32_t>(kCheckpointVersion);
  w.string(echo.dump(), true);
  w.pod<std::int64_t>(state.step);
  w.pod<std::int64_t>(state.steps_per_epoch);
  w.pod<std::int64_t>(state.total_steps);
  const auto tensors = state_tensors(state);
  w.pod<std::uint32_t>(std::uint32_t(tensors.size()));
  for (const auto& [name, m] : tensors) w.tensor(name, *m);
  w.pod<std::int64_t>(state.optimizer.t);
  w.pod<std::uint32_t>(std::uint32_t(state.optimizer.names.size()));
  for (std::size_t i = 0; i < state.optimizer.names.size(); ++i) {
    w.string(state.optimizer.names[i]);
    w.tensor("m", state.optimizer.m[i]);
    w.tensor("v", state.optimizer.v[i]);
  }
  w.finish();
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  char magic[8];
  r.read_bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(magic)) != 0) r.fail("not a checkpoint file (bad magic)");
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) r.fail("unsupported version " + std::to_string(version));
  nlohmann::json echo;
  try {
    echo = nlohmann::json::parse(r.string(true));
  } catch (const nlohmann::json::exception& e) {
    r.fail(std::string("corrupt config echo: ") + e.what());
  }

  TrainState state;
  state.model_config = model_config_from_json(echo.at("model"));
  state.config = train_config_from_json(echo.at("train"));
  state.model = ModelState(state.model_config, state.config.seed);
  state.optimizer = AdamW(state.model.trainable_params());
  state.step = r.pod<std::int64_t>();
  state.steps_per_epoch = r.pod<std::int64_t>();
  state.total_steps = r.pod<std::int64_t>();

  std::map<std::string, Matrix*> slots;
  ParamList params = state.model.trainable_params();
  for (Param* p : state.model.target_params()) params.push_back(p);
  for (Param* p : params) slots[p->name] = &p->value;
  slots["pos_embed"] = &state.model.pos_embed;
  slots["predictor_pos_embed"] = &state.model.predictor_pos_embed;

  const auto count = r.pod<std::uint32_t>();
  if (count != slots.size()) r.fail("expected " + std::to_string(slots.size()) + " tensors, found " + std::to_string(count));
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, m] = r.tensor();
    auto it = slots.find(name);
    if (it == slots.end()) r.fail("unknown tensor " + name);
    if (it->second->rows() != m.rows() || it->second->cols() != m.cols()) r.fail("shape mismatch for " + name);
    *it->second = std::move(m);
    slots.erase(it);
  }
  state.optimizer.t = r.pod<std::int64_t>();
  const auto n_slots = r.pod<std::uint32_t>();
  if (n_slots != state.optimizer.names.size()) r.fail("optimizer registry size mismatch");
  for (std::uint32_t i = 0; i < n_slots; ++i) {
    const std::string name = r.string();
    if (name != state.optimizer.names[i]) r.fail("optimizer registry mismatch at " + name);
    auto m = r.tensor().second;
    auto v = r.tensor().second;
    if (m.rows() != state.optimizer.m[i].rows() || m.cols() != state.optimizer.m[i].cols() ||
        v.rows() != m.rows() || v.cols() != m.cols()) {
      r.fail("optimizer moment shape mismatch for " + name);
    }
    state.optimizer.m[i] = std::move(m);
    state.optimizer.v[i] = std::move(v);
  }
  r.expect_end();
  return state;
}

}  // namespace rejepa
