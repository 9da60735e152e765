#include "rejepa/training.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "rejepa/checkpoint.hpp"
#include "rejepa/errors.hpp"
#include "rejepa/schedules.hpp"

namespace rejepa {

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(lr_init > 0.0 && lr_peak >= lr_init)) throw ConfigError("train: need lr_peak >= lr_init > 0");
  if (!(lr_final >= 0.0 && lr_final <= lr_peak)) throw ConfigError("train: need 0 <= lr_final <= lr_peak");
  if (warmup_epochs < 0 || warmup_epochs > epochs) throw ConfigError("train.warmup_epochs must lie in [0, epochs]");
  if (!(wd_init >= 0.0 && wd_final >= 0.0)) throw ConfigError("train: weight decay must be >= 0");
  if (!(ema_init >= 0.0 && ema_init <= 1.0)) throw ConfigError("train.ema_init must lie in [0, 1]");
  if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be >= 0");
  vicreg.validate();
}

std::string to_json_line(const StepMetrics& m) {
  nlohmann::json j = {{"step", m.step},   {"epoch", m.epoch},
                      {"lr", m.lr},       {"wd", m.wd},
                      {"ema_m", m.ema_m}, {"L_pred", m.l_pred},
                      {"v", m.variance},  {"c", m.covariance},
                      {"L_inv", m.invariance}, {"total", m.total},
                      {"embed_std", m.embed_std}, {"eff_rank", m.eff_rank}};
  return j.dump();
}

CollapseDiagnostics collapse_monitor(const EmbeddingMatrix& z) {
  if (z.rows() < 2) throw ContractViolation("collapse_monitor needs at least 2 rows");
  CollapseDiagnostics out;
  const Matrix c = z.rowwise() - z.colwise().mean();
  double std_sum = 0.0;
  for (Eigen::Index j = 0; j < z.cols(); ++j) std_sum += std::sqrt(c.col(j).squaredNorm() / double(z.rows() - 1));
  out.mean_std = std_sum / double(z.cols());
  out.offdiag_covariance = covariance_term(z);
  const Eigen::MatrixXd dense = z;
  const Vector s = Eigen::JacobiSVD<Eigen::MatrixXd>(dense).singularValues();
  const double total = s.sum();
  if (total > 0.0) {
    double entropy = 0.0;
    for (Eigen::Index i = 0; i < s.size(); ++i) {
      const double p = s(i) / total;
      if (p > 0.0) entropy -= p * std::log(p);
    }
    out.effective_rank = std::exp(entropy);
  }
  return out;
}

LossBreakdown forward_backward(ModelState& model, const std::vector<PatchSequence>& patches,
                               const std::vector<MaskPair>& masks, const VicregConfig& vicreg, bool compute_grads) {
  const int batch = int(patches.size());
  if (batch == 0 || masks.size() != patches.size()) throw ContractViolation("batch needs one mask per image");
  const int n_tok = model.config.n_tokens();
  const int width = model.config.encoder.embed_dim;
  const int patch_dim = model.context_encoder.patch_embed.in_features();
  for (int b = 0; b < batch; ++b) {
    if (patches[b].size() != n_tok) throw ShapeError("image grid does not match the model's patch grid");
    if (masks[b].n_tokens != n_tok || !is_valid(masks[b])) throw ContractViolation("invalid mask for batch item");
  }

  // Context encoder over the visible tokens, one segment per image.
  std::vector<Segment> ctx_segments;
  int ctx_rows = 0;
  for (const auto& m : masks) {
    ctx_segments.push_back({ctx_rows, int(m.context_indices.size())});
    ctx_rows += int(m.context_indices.size());
  }
  Matrix ctx_in(ctx_rows, patch_dim), ctx_pos(ctx_rows, width);
  for (int b = 0; b < batch; ++b) {
    gather_rows(patches[b].tokens, masks[b].context_indices, ctx_in, ctx_segments[b].offset);
    gather_rows(model.pos_embed, masks[b].context_indices, ctx_pos, ctx_segments[b].offset);
  }
  VitEncoder::Cache ctx_cache;
  const Matrix ctx_out =
      model.context_encoder.forward(ctx_in, ctx_pos, ctx_segments, compute_grads ? &ctx_cache : nullptr);

  // Target encoder over the full sequences.
  std::vector<Segment> full_segments;
  Matrix full_in(batch * n_tok, patch_dim), full_pos(batch * n_tok, width);
  for (int b = 0; b < batch; ++b) {
    full_segments.push_back({b * n_tok, n_tok});
    full_in.middleRows(b * n_tok, n_tok) = patches[b].tokens;
    full_pos.middleRows(b * n_tok, n_tok) = model.pos_embed;
  }
  const Matrix tgt_out = model.target_encoder.forward(full_in, full_pos, full_segments, nullptr);

  // One predictor job per (image, target group).
  std::vector<PredictorJob> jobs;
  std::vector<int> job_image;
  int pred_rows = 0;
  for (int b = 0; b < batch; ++b) {
    for (const auto& group : masks[b].target_groups) {
      jobs.push_back({ctx_segments[b].offset, masks[b].context_indices, group});
      job_image.push_back(b);
      pred_rows += int(group.size());
    }
  }
  Predictor::Cache pred_cache;
  const Matrix pred = model.predictor.forward(ctx_out, jobs, model.mask_token, model.predictor_pos_embed,
                                              compute_grads ? &pred_cache : nullptr);

  Matrix targets(pred_rows, width);
  Matrix dpred = Matrix::Zero(pred_rows, width);
  Matrix context_pooled = Matrix::Zero(batch, width);
  Matrix predicted_pooled = Matrix::Zero(batch, width);
  Matrix target_pooled = Matrix::Zero(batch, width);
  std::vector<int> pred_count(batch, 0);
  double l_pred = 0.0;
  {
    int row = 0;
    for (std::size_t j = 0; j < jobs.size(); ++j) {
      const int b = job_image[j];
      const auto& idx = jobs[j].target_indices;
      const int len = int(idx.size());
      for (int i = 0; i < len; ++i) targets.row(row + i) = tgt_out.row(b * n_tok + idx[i]);
      const auto diff = pred.middleRows(row, len) - targets.middleRows(row, len);
      const double groups = double(masks[b].target_groups.size());
      l_pred += diff.squaredNorm() / (double(len) * groups * batch);
      dpred.middleRows(row, len) = diff * (2.0 / (double(len) * groups * batch));
      predicted_pooled.row(b) += pred.middleRows(row, len).colwise().sum();
      target_pooled.row(b) += targets.middleRows(row, len).colwise().sum();
      pred_count[b] += len;
      row += len;
    }
  }
  for (int b = 0; b < batch; ++b) {
    predicted_pooled.row(b) /= double(pred_count[b]);
    target_pooled.row(b) /= double(pred_count[b]);
    context_pooled.row(b) = ctx_out.middleRows(ctx_segments[b].offset, ctx_segments[b].length).colwise().mean();
  }

  LossBreakdown out;
  out.pred = l_pred;
  const bool regularize = batch >= 2;
  if (regularize) out.vicreg = vicreg_loss(context_pooled, predicted_pooled, target_pooled, vicreg);
  else if (vicreg.enabled()) throw ContractViolation("VICReg needs a batch of at least 2 images");
  out.total = total_loss(out.pred, out.vicreg.total);
  out.context_pooled = context_pooled;
  if (!compute_grads) return out;

  for (Param* p : model.trainable_params()) p->zero_grad();
  Matrix dctx = Matrix::Zero(ctx_rows, width);
  if (regularize && vicreg.enabled()) {
    const VicregGrads g = vicreg_loss_grad(context_pooled, predicted_pooled, target_pooled, vicreg);
    int row = 0;
    for (std::size_t j = 0; j < jobs.size(); ++j) {
      const int b = job_image[j];
      const int len = int(jobs[j].target_indices.size());
      dpred.middleRows(row, len).rowwise() += g.predicted.row(b) / double(pred_count[b]);
      row += len;
    }
    for (int b = 0; b < batch; ++b) {
      dctx.middleRows(ctx_segments[b].offset, ctx_segments[b].length).rowwise() +=
          g.context.row(b) / double(ctx_segments[b].length);
    }
  }
  dctx += model.predictor.backward(dpred, jobs, model.mask_token, pred_cache);
  model.context_encoder.backward(dctx, ctx_segments, ctx_cache);
  return out;
}

TrainState::TrainState(const ModelConfig& mc, const TrainConfig& tc, std::size_t archive_size)
    : model_config(mc), config(tc), model(mc, tc.seed) {
  tc.validate();
  tc.mask.validate(mc.n_tokens());
  optimizer = AdamW(model.trainable_params());
  steps_per_epoch = rejepa::steps_per_epoch(archive_size, tc);
  total_steps = steps_per_epoch * tc.epochs;
}

std::int64_t steps_per_epoch(std::size_t archive_size, const TrainConfig& config) {
  const std::int64_t steps = std::int64_t(archive_size) / std::max(1, config.batch_size);
  if (steps < 1) {
    throw ConfigError("train.batch_size " + std::to_string(config.batch_size) + " exceeds the training archive size " +
                      std::to_string(archive_size));
  }
  return steps;
}

std::vector<MaskPair> sample_batch_masks(const TrainState& state, std::size_t batch_size) {
  const std::uint64_t seed = derive_seed({state.config.seed, state.config.mask.seed});
  std::vector<MaskPair> masks;
  masks.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) {
    Rng rng = mask_stream(seed, std::uint64_t(state.step), i);
    masks.push_back(sample_mask(state.model_config.grid(), state.config.mask, rng));
  }
  return masks;
}

StepMetrics train_step(TrainState& state, const std::vector<const ArchiveRecord*>& batch) {
  if (batch.empty()) throw ContractViolation("train_step needs a non-empty batch");
  std::vector<PatchSequence> patches;
  patches.reserve(batch.size());
  for (const ArchiveRecord* r : batch) patches.push_back(patchify(r->image, state.model_config.encoder.patch_size));
  const std::vector<MaskPair> masks = sample_batch_masks(state, batch.size());

  LossBreakdown loss;
  try {
    loss = forward_backward(state.model, patches, masks, state.config.vicreg, true);
  } catch (const TrainingDivergence& e) {
    std::string last = state.history.empty() ? "none" : to_json_line(state.history.back());
    throw TrainingDivergence(std::string(e.what()) + " at step " + std::to_string(state.step) +
                             "; last finite metrics: " + last);
  }

  StepMetrics m;
  m.step = state.step;
  m.epoch = state.epoch();
  m.lr = lr_schedule(state.step, state.total_steps, state.config);
  m.wd = wd_schedule(state.step, state.total_steps, state.config);
  m.ema_m = ema_schedule(state.step, state.total_steps, state.config);
  m.l_pred = loss.pred;
  m.variance = loss.vicreg.variance;
  m.covariance = loss.vicreg.covariance;
  m.invariance = loss.vicreg.invariance;
  m.total = loss.total;
  if (loss.context_pooled.rows() >= 2) {
    const CollapseDiagnostics diag = collapse_monitor(loss.context_pooled);
    m.embed_std = diag.mean_std;
    m.eff_rank = diag.effective_rank;
  }

  state.optimizer.step(state.model.trainable_params(), m.lr, m.wd);
  ema_update(state.model.target_encoder, state.model.context_encoder, m.ema_m);
  ++state.step;
  state.history.push_back(m);
  return m;
}

std::vector<std::size_t> epoch_order(std::uint64_t seed, int epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t(0));
  Rng rng = derive_rng({seed, 0x73687566ULL, std::uint64_t(epoch)});
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

FitResult fit(const ModelConfig& model_config, const TrainConfig& config, const Archive& archive,
              const FitOptions& options) {
  FitResult result;
  if (archive.empty()) throw ConfigError("training archive is empty");
  if (options.resume_from) {
    result.state = load_checkpoint(*options.resume_from);
    if (!(result.state.model_config == model_config) || !(result.state.config == config)) {
      throw ConfigError("checkpoint " + options.resume_from->string() + " was written for a different configuration");
    }
    if (result.state.steps_per_epoch != steps_per_epoch(archive.size(), config)) {
      throw ConfigError("checkpoint " + options.resume_from->string() + " was written for a different archive size");
    }
  } else {
    result.state = TrainState(model_config, config, archive.size());
  }
  TrainState& state = result.state;

  std::ofstream metrics;
  if (!options.metrics_path.empty()) {
    if (options.metrics_path.has_parent_path()) std::filesystem::create_directories(options.metrics_path.parent_path());
    metrics.open(options.metrics_path, options.resume_from ? std::ios::app : std::ios::trunc);
    if (!metrics) throw IoError("cannot open metrics stream " + options.metrics_path.string());
  }
  if (!options.checkpoint_dir.empty()) std::filesystem::create_directories(options.checkpoint_dir);

  auto write_checkpoint = [&](const std::string& name) {
    if (options.checkpoint_dir.empty()) return;
    const auto path = options.checkpoint_dir / name;
    save_checkpoint(path, state);
    result.final_checkpoint = path;
  };

  int order_epoch = -1;
  std::vector<std::size_t> order;
  const std::int64_t stop = options.stop_at_step ? std::min(*options.stop_at_step, state.total_steps) : state.total_steps;
  const std::size_t batch_size = std::size_t(state.config.batch_size);
  while (state.step < stop) {
    const int epoch = state.epoch();
    if (epoch != order_epoch) {
      order = epoch_order(state.config.seed, epoch, archive.size());
      order_epoch = epoch;
    }
    const std::size_t offset = std::size_t(state.step % state.steps_per_epoch) * batch_size;
    std::vector<const ArchiveRecord*> batch;
    for (std::size_t i = 0; i < batch_size; ++i) batch.push_back(&archive[order[offset + i]]);
    const StepMetrics m = train_step(state, batch);
    if (metrics) metrics << to_json_line(m) << '\n';
    if (options.on_step) options.on_step(m);
    if (state.step % state.steps_per_epoch == 0 && state.step < state.total_steps && state.config.checkpoint_every > 0 &&
        state.epoch() % state.config.checkpoint_every == 0) {
      write_checkpoint("latest.ckpt");
    }
  }
  if (metrics) metrics.flush();
  if (state.step >= state.total_steps) {
    write_checkpoint("final.ckpt");
  } else {
    write_checkpoint("step_" + std::to_string(state.step) + ".ckpt");
  }
  return result;
}

}  // namespace rejepa
