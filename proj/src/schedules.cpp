#include "rejepa/schedules.hpp"

#include <cmath>
#include <numbers>

#include "rejepa/training.hpp"

namespace rejepa {

namespace {

double ramp(double from, double to, double t) {
  if (t <= 0.0) return from;
  if (t >= 1.0) return to;
  return from + (to - from) * t;
}

}  // namespace

std::int64_t warmup_steps(std::int64_t total_steps, const TrainConfig& config) {
  if (config.epochs <= 0) return 0;
  return std::llround(double(total_steps) * config.warmup_epochs / config.epochs);
}

double lr_schedule(std::int64_t step, std::int64_t total_steps, const TrainConfig& config) {
  const std::int64_t warmup = warmup_steps(total_steps, config);
  if (step < warmup) return ramp(config.lr_init, config.lr_peak, double(step) / double(warmup));
  if (step == warmup) return config.lr_peak;
  if (step >= total_steps) return config.lr_final;
  const std::int64_t span = total_steps - warmup;
  const double progress = double(step - warmup) / double(span);
  return config.lr_final + (config.lr_peak - config.lr_final) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double wd_schedule(std::int64_t step, std::int64_t total_steps, const TrainConfig& config) {
  if (total_steps <= 0) return config.wd_final;
  return ramp(config.wd_init, config.wd_final, double(step) / double(total_steps));
}

double ema_schedule(std::int64_t step, std::int64_t total_steps, const TrainConfig& config) {
  if (total_steps <= 0) return 1.0;
  return ramp(config.ema_init, 1.0, double(step) / double(total_steps));
}

}  // namespace rejepa
