#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "rejepa/data.hpp"
#include "rejepa/losses.hpp"
#include "rejepa/masking.hpp"
#include "rejepa/model.hpp"
#include "rejepa/optimizer.hpp"

namespace rejepa {

struct TrainConfig {
  int epochs = 100;
  int batch_size = 32;
  double lr_init = 1e-4;
  double lr_peak = 1e-3;
  double lr_final = 1e-6;
  int warmup_epochs = 15;
  double wd_init = 0.04;
  double wd_final = 0.4;
  double ema_init = 0.996;
  std::uint64_t seed = 0;
  int checkpoint_every = 1;  // epochs; 0 keeps only the final checkpoint
  MaskConfig mask;
  VicregConfig vicreg;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// One line of the metrics stream.
struct StepMetrics {
  std::int64_t step = 0;
  int epoch = 0;
  double lr = 0.0;
  double wd = 0.0;
  double ema_m = 0.0;
  double l_pred = 0.0;
  double variance = 0.0;
  double covariance = 0.0;
  double invariance = 0.0;
  double total = 0.0;
  double embed_std = 0.0;
  double eff_rank = 0.0;
};

std::string to_json_line(const StepMetrics& m);

struct CollapseDiagnostics {
  double mean_std = 0.0;          // mean over dimensions of the unbiased per-dimension std
  double offdiag_covariance = 0.0;  // covariance_term(z)
  double effective_rank = 0.0;      // exp(entropy of normalized singular values); 0 for a zero matrix
};

CollapseDiagnostics collapse_monitor(const EmbeddingMatrix& z);

struct LossBreakdown {
  double pred = 0.0;
  VicregBreakdown vicreg;
  double total = 0.0;
  Matrix context_pooled;
};

/// Full forward pass for a batch with fixed masks: context encoder on the
/// visible tokens, target encoder on the full sequence (no gradient), one
/// predictor pass per target group, L_pred + VICReg on pooled embeddings.
/// With `compute_grads`, all gradients of the trainable parameters are reset
/// and then filled; target-encoder gradients are never written.
LossBreakdown forward_backward(ModelState& model, const std::vector<PatchSequence>& patches,
                               const std::vector<MaskPair>& masks, const VicregConfig& vicreg, bool compute_grads);

struct TrainState {
  TrainState() = default;
  TrainState(const ModelConfig& model_config, const TrainConfig& train_config, std::size_t archive_size);

  ModelConfig model_config;
  TrainConfig config;
  ModelState model;
  AdamW optimizer;
  std::int64_t step = 0;
  std::int64_t steps_per_epoch = 0;
  std::int64_t total_steps = 0;
  std::vector<StepMetrics> history;

  int epoch() const { return steps_per_epoch > 0 ? int(step / steps_per_epoch) : 0; }
};

std::int64_t steps_per_epoch(std::size_t archive_size, const TrainConfig& config);

/// Masks for one batch at the state's current step; a pure function of
/// (config seeds, step, position in batch).
std::vector<MaskPair> sample_batch_masks(const TrainState& state, std::size_t batch_size);

/// One optimization step: masks, forward/backward, AdamW on the trainable
/// parameters with scheduled lr / wd, EMA of the target encoder with the
/// scheduled momentum. Throws TrainingDivergence (with the last finite
/// metrics) on a non-finite loss.
StepMetrics train_step(TrainState& state, const std::vector<const ArchiveRecord*>& batch);

/// Per-epoch sample order, a pure function of (seed, epoch).
std::vector<std::size_t> epoch_order(std::uint64_t seed, int epoch, std::size_t n);

struct FitOptions {
  std::filesystem::path checkpoint_dir;  // empty: no checkpoints written
  std::filesystem::path metrics_path;    // empty: no metrics stream
  std::optional<std::filesystem::path> resume_from;
  std::optional<std::int64_t> stop_at_step;  // stop early (writes step_<n>.ckpt when checkpoint_dir is set)
  std::function<void(const StepMetrics&)> on_step;
};

/// Epoch checkpoints go to <checkpoint_dir>/latest.ckpt (overwritten every
/// `checkpoint_every` epochs); the finished run writes final.ckpt.
struct FitResult {
  TrainState state;
  std::filesystem::path final_checkpoint;
};

FitResult fit(const ModelConfig& model_config, const TrainConfig& config, const Archive& archive,
              const FitOptions& options = {});

}  // namespace rejepa
