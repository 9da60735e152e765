#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rejepa/random.hpp"

namespace rejepa {

enum class MaskStrategy { random_disjoint, multi_block };

std::string to_string(MaskStrategy s);
MaskStrategy mask_strategy_from_string(const std::string& s);

struct GridShape {
  int rows = 0;
  int cols = 0;
  int size() const { return rows * cols; }
};

struct MaskConfig {
  MaskStrategy strategy = MaskStrategy::random_disjoint;
  double target_ratio = 0.25;
  int n_target_groups = 1;
  // Multi-block only: per-block area fraction and height/width aspect ranges.
  double block_scale_min = 0.05;
  double block_scale_max = 0.15;
  double aspect_min = 0.75;
  double aspect_max = 1.5;
  std::uint64_t seed = 0;

  /// Number of target tokens, round(target_ratio * n_tokens).
  int target_count(int n_tokens) const;
  /// Throws ConfigError when the configuration cannot produce a valid MaskPair.
  void validate(int n_tokens) const;
  bool operator==(const MaskConfig&) const = default;
};

/// Context indices are the tokens the context encoder sees. Target groups are
/// predicted one group per predictor pass. All index lists are ascending.
struct MaskPair {
  std::vector<int> context_indices;
  std::vector<std::vector<int>> target_groups;
  int n_tokens = 0;

  std::vector<int> all_targets() const;
  int target_count() const;
};

/// True when context and groups are in range, non-empty and pairwise disjoint.
bool is_valid(const MaskPair& mask);

/// Exactly round(ratio * n) targets drawn without replacement, split into M
/// groups as evenly as possible (earlier groups take the remainder); context is
/// every other token.
MaskPair sample_random_disjoint(int n_tokens, const MaskConfig& config, Rng& rng);

/// M rectangular blocks on the patch grid form the target groups; overlapping
/// cells stay with the earlier block. Block areas are drawn from the scale
/// range and rescaled so their sum equals target_ratio; the placement closest
/// to the target count over a few attempts is kept.
MaskPair sample_multi_block(GridShape grid, const MaskConfig& config, Rng& rng);

/// Dispatches on config.strategy.
MaskPair sample_mask(GridShape grid, const MaskConfig& config, Rng& rng);

struct Block {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;
};

/// Row-major token indices covered by a block.
std::vector<int> block_indices(GridShape grid, const Block& block);

/// Builds a MaskPair from explicit blocks: group i = block i minus the cells of
/// earlier blocks, context = complement of the union.
MaskPair mask_from_blocks(GridShape grid, const std::vector<Block>& blocks);

/// Generator for one sample's mask, a pure function of (seed, step, sample).
Rng mask_stream(std::uint64_t seed, std::uint64_t step, std::uint64_t sample_index);

}  // namespace rejepa
