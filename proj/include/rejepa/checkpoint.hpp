#pragma once

#include <filesystem>

#include "rejepa/training.hpp"

namespace rejepa {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary checkpoint, little-endian. Layout (see docs/checkpoint_format.md):
///   "RJPACKPT" | u32 version | u64 n + n bytes config JSON echo
///   | i64 step | i64 steps_per_epoch | i64 total_steps
///   | u32 n_tensors | n_tensors x tensor
///   | i64 adam_t | u32 n_slots | n_slots x (name, tensor m, tensor v)
/// tensor = u32 name_len | name | u64 rows | u64 cols | rows*cols f64 row-major.
/// Tensors cover every context, target and predictor parameter, the mask
/// token and both positional tables. Round trips are bit-exact.
void save_checkpoint(const std::filesystem::path& path, const TrainState& state);
TrainState load_checkpoint(const std::filesystem::path& path);

}  // namespace rejepa
