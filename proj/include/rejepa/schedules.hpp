#pragma once

#include <cstdint>

namespace rejepa {

struct TrainConfig;

/// Warmup length in steps: the warmup_epochs / epochs share of total_steps.
std::int64_t warmup_steps(std::int64_t total_steps, const TrainConfig& config);

/// Linear warmup lr_init -> lr_peak, then cosine decay lr_peak -> lr_final.
/// Returns the configured endpoint values exactly at step 0, at the end of
/// warmup and at total_steps.
double lr_schedule(std::int64_t step, std::int64_t total_steps, const TrainConfig& config);

/// Linear ramp wd_init -> wd_final over all steps.
double wd_schedule(std::int64_t step, std::int64_t total_steps, const TrainConfig& config);

/// Linear ramp ema_init -> 1 over all steps.
double ema_schedule(std::int64_t step, std::int64_t total_steps, const TrainConfig& config);

}  // namespace rejepa
