#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "rejepa/checkpoint.hpp"
#include "rejepa/errors.hpp"
#include "rejepa/training.hpp"

using namespace rejepa;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("rejepa_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ModelConfig small_model() {
  ModelConfig c;
  c.encoder = {16, 2, 2, 8, 2.0, 3};
  c.predictor = {8, 1, 2, 2.0};
  return c;
}

TrainConfig small_train(int epochs = 2) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 8;
  t.warmup_epochs = 1;
  return t;
}

Archive small_archive(int n = 32) {
  SyntheticConfig s;
  s.n_images = n;
  return generate_synthetic_archive(s);
}

bool same_params(TrainState& a, TrainState& b) {
  auto pa = a.model.trainable_params(), pb = b.model.trainable_params();
  auto ta = a.model.target_params(), tb = b.model.target_params();
  pa.insert(pa.end(), ta.begin(), ta.end());
  pb.insert(pb.end(), tb.begin(), tb.end());
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i]->name != pb[i]->name || pa[i]->value != pb[i]->value) return false;
  }
  if (a.optimizer.t != b.optimizer.t) return false;
  for (std::size_t i = 0; i < a.optimizer.m.size(); ++i) {
    if (a.optimizer.m[i] != b.optimizer.m[i] || a.optimizer.v[i] != b.optimizer.v[i]) return false;
  }
  return a.step == b.step;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

}  // namespace

TEST_CASE("config validation") {
  TrainConfig t;
  CHECK_NOTHROW(t.validate());
  t.lr_peak = 1e-5;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = {};
  t.warmup_epochs = 101;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = {};
  t.ema_init = 1.2;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = {};
  t.vicreg.epsilon = 0.0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = {};
  t.vicreg.lambda_c = -1.0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("steps per epoch drops the last partial batch") {
  TrainConfig t;
  t.batch_size = 32;
  CHECK(steps_per_epoch(384, t) == 12);
  CHECK(steps_per_epoch(390, t) == 12);
  CHECK_THROWS_AS(steps_per_epoch(31, t), ConfigError);
}

TEST_CASE("epoch order is a seeded permutation") {
  const auto a = epoch_order(3, 5, 50);
  CHECK(a == epoch_order(3, 5, 50));
  CHECK(a != epoch_order(3, 6, 50));
  CHECK(a != epoch_order(4, 5, 50));
  CHECK(std::set<std::size_t>(a.begin(), a.end()).size() == 50);
}

TEST_CASE("collapse monitor") {
  const Matrix same = Matrix::Constant(5, 4, 0.3);
  const CollapseDiagnostics d = collapse_monitor(same);
  CHECK(d.mean_std == 0.0);
  CHECK(d.offdiag_covariance == 0.0);
  CHECK(std::abs(d.effective_rank - 1.0) <= 1e-12);

  const Matrix eye = Matrix::Identity(6, 6);
  CHECK(std::abs(collapse_monitor(eye).effective_rank - 6.0) <= 1e-10);

  Matrix z(4, 3);
  z << 1, 2, 0, -1, 0.5, 3, 2, 2, 1, 0, -1, 4;
  Matrix perm(4, 3);
  perm << z.row(2), z.row(0), z.row(3), z.row(1);
  const auto a = collapse_monitor(z), b = collapse_monitor(perm);
  CHECK(a.mean_std == doctest::Approx(b.mean_std).epsilon(1e-14));
  CHECK(a.offdiag_covariance == doctest::Approx(b.offdiag_covariance).epsilon(1e-14));
  CHECK(a.effective_rank == doctest::Approx(b.effective_rank).epsilon(1e-12));
  CHECK(collapse_monitor(Matrix::Zero(3, 3)).effective_rank == 0.0);
  CHECK_THROWS_AS(collapse_monitor(Matrix::Zero(1, 3)), ContractViolation);
}

TEST_CASE("metrics lines carry every field") {
  StepMetrics m;
  m.step = 7;
  m.l_pred = 1.5;
  const auto j = nlohmann::json::parse(to_json_line(m));
  for (const char* k : {"step", "epoch", "lr", "wd", "ema_m", "L_pred", "v", "c", "L_inv", "total", "embed_std",
                        "eff_rank"}) {
    CHECK(j.contains(k));
  }
  CHECK(j["step"] == 7);
  CHECK(j["L_pred"] == 1.5);
}

TEST_CASE("the optimizer registry excludes the target encoder") {
  const Archive a = small_archive();
  TrainState s(small_model(), small_train(), a.size());
  for (Param* p : s.model.target_params()) CHECK_FALSE(s.optimizer.tracks(p->name));
  for (Param* p : s.model.trainable_params()) CHECK(s.optimizer.tracks(p->name));
}

TEST_CASE("a zero learning-rate step leaves every parameter unchanged") {
  const Archive a = small_archive();
  TrainState s(small_model(), small_train(), a.size());
  s.config.lr_init = s.config.lr_peak = s.config.lr_final = 0.0;
  s.config.wd_init = s.config.wd_final = 0.0;
  TrainState before = s;
  std::vector<const ArchiveRecord*> batch;
  for (int i = 0; i < 8; ++i) batch.push_back(&a[i]);
  train_step(s, batch);
  before.step = s.step;
  before.optimizer.t = s.optimizer.t;
  auto pa = s.model.trainable_params(), pb = before.model.trainable_params();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value == pb[i]->value);
  auto ta = s.model.target_params(), tb = before.model.target_params();
  for (std::size_t i = 0; i < ta.size(); ++i) CHECK(ta[i]->value == tb[i]->value);
}

TEST_CASE("loss decreases over the first 50 steps at the default configuration") {
  const Archive a = generate_synthetic_archive(SyntheticConfig{});
  const ArchiveSplit split = split_archive(a, 0.25);
  TrainConfig t;
  FitOptions opt;
  opt.stop_at_step = 50;
  const FitResult r = fit(ModelConfig{}, t, split.train, opt);
  REQUIRE(r.state.history.size() == 50);
  auto trailing = [&](int end) {
    double s = 0.0;
    for (int i = end - 10; i < end; ++i) s += r.state.history[std::size_t(i)].total;
    return s / 10.0;
  };
  CHECK(trailing(50) < trailing(10));
  for (const auto& m : r.state.history) CHECK(std::isfinite(m.total));
}

TEST_CASE("identical seeds give bit-identical checkpoints") {
  const Archive a = small_archive();
  const fs::path d1 = scratch_dir("det1"), d2 = scratch_dir("det2");
  FitOptions o1, o2;
  o1.checkpoint_dir = d1;
  o2.checkpoint_dir = d2;
  fit(small_model(), small_train(), a, o1);
  fit(small_model(), small_train(), a, o2);
  CHECK(file_bytes(d1 / "final.ckpt") == file_bytes(d2 / "final.ckpt"));

  TrainConfig other = small_train();
  other.seed = 1;
  const fs::path d3 = scratch_dir("det3");
  FitOptions o3;
  o3.checkpoint_dir = d3;
  fit(small_model(), other, a, o3);
  CHECK(file_bytes(d1 / "final.ckpt") != file_bytes(d3 / "final.ckpt"));
}

TEST_CASE("checkpoint round trip is bit exact") {
  const Archive a = small_archive();
  FitOptions o;
  o.stop_at_step = 3;
  FitResult r = fit(small_model(), small_train(), a, o);
  const fs::path dir = scratch_dir("ckpt");
  save_checkpoint(dir / "a.ckpt", r.state);
  TrainState loaded = load_checkpoint(dir / "a.ckpt");
  CHECK(same_params(r.state, loaded));
  CHECK(loaded.model.mask_token.value == r.state.model.mask_token.value);
  CHECK(loaded.model.pos_embed == r.state.model.pos_embed);
  CHECK(loaded.model_config == r.state.model_config);
  CHECK(loaded.config == r.state.config);
  save_checkpoint(dir / "b.ckpt", loaded);
  CHECK(file_bytes(dir / "a.ckpt") == file_bytes(dir / "b.ckpt"));
}

TEST_CASE("corrupt checkpoints are rejected") {
  const fs::path dir = scratch_dir("ckpt_bad");
  const Archive a = small_archive();
  TrainState s(small_model(), small_train(), a.size());
  save_checkpoint(dir / "a.ckpt", s);
  const std::string bytes = file_bytes(dir / "a.ckpt");
  {
    std::ofstream f(dir / "trunc.ckpt", std::ios::binary);
    f.write(bytes.data(), std::streamsize(bytes.size() / 2));
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "trunc.ckpt"), Error);
  {
    std::string bad = bytes;
    bad[0] = 'X';
    std::ofstream f(dir / "magic.ckpt", std::ios::binary);
    f.write(bad.data(), std::streamsize(bad.size()));
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "magic.ckpt"), Error);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), IoError);
}

TEST_CASE("resuming from a checkpoint continues bit-exactly") {
  const Archive a = small_archive();
  const TrainConfig t = small_train(3);
  const fs::path full = scratch_dir("resume_full"), part = scratch_dir("resume_part");
  FitOptions o;
  o.checkpoint_dir = full;
  FitResult uninterrupted = fit(small_model(), t, a, o);

  FitOptions first;
  first.checkpoint_dir = part;
  first.stop_at_step = 5;  // mid-epoch
  fit(small_model(), t, a, first);
  FitOptions second;
  second.checkpoint_dir = part;
  second.resume_from = part / "step_5.ckpt";
  FitResult resumed = fit(small_model(), t, a, second);
  CHECK(same_params(uninterrupted.state, resumed.state));
  CHECK(file_bytes(full / "final.ckpt") == file_bytes(part / "final.ckpt"));

  TrainConfig different = t;
  different.seed = 9;
  FitOptions bad;
  bad.resume_from = part / "step_5.ckpt";
  CHECK_THROWS_AS(fit(small_model(), different, a, bad), ConfigError);
}

TEST_CASE("metrics stream has one line per step") {
  const Archive a = small_archive();
  const fs::path dir = scratch_dir("metrics");
  FitOptions o;
  o.metrics_path = dir / "m.jsonl";
  const FitResult r = fit(small_model(), small_train(), a, o);
  std::ifstream f(dir / "m.jsonl");
  std::string line;
  int n = 0;
  while (std::getline(f, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j["step"] == n);
    ++n;
  }
  CHECK(n == r.state.total_steps);
}

TEST_CASE("non-finite losses halt with the last finite metrics") {
  Archive a = small_archive();
  TrainState s(small_model(), small_train(), a.size());
  std::vector<const ArchiveRecord*> batch;
  for (int i = 0; i < 8; ++i) batch.push_back(&a[i]);
  train_step(s, batch);
  Archive broken = a;
  broken[0].image.values[0] = std::numeric_limits<float>::infinity();
  std::vector<const ArchiveRecord*> bad;
  for (int i = 0; i < 8; ++i) bad.push_back(&broken[i]);
  try {
    train_step(s, bad);
    FAIL("expected divergence");
  } catch (const TrainingDivergence& e) {
    CHECK(std::string(e.what()).find("last finite metrics") != std::string::npos);
    CHECK(std::string(e.what()).find("\"step\":0") != std::string::npos);
  }
}
