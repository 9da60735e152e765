#include "rejepa/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rejepa/errors.hpp"

namespace rejepa {

std::string to_string(MaskStrategy s) {
  return s == MaskStrategy::random_disjoint ? "random_disjoint" : "multi_block";
}

MaskStrategy mask_strategy_from_string(const std::string& s) {
  if (s == "random_disjoint" || s == "random") return MaskStrategy::random_disjoint;
  if (s == "multi_block") return MaskStrategy::multi_block;
  throw ConfigError("unknown masking strategy '" + s + "' (expected random_disjoint or multi_block)");
}

int MaskConfig::target_count(int n_tokens) const {
  return static_cast<int>(std::lround(target_ratio * n_tokens));
}

void MaskConfig::validate(int n_tokens) const {
  if (n_tokens < 2) throw ConfigError("mask needs at least 2 tokens, got " + std::to_string(n_tokens));
  if (!(target_ratio > 0.0 && target_ratio < 1.0)) throw ConfigError("target_ratio must lie in (0, 1)");
  if (n_target_groups < 1) throw ConfigError("n_target_groups must be >= 1");
  const int t = target_count(n_tokens);
  if (t < n_target_groups) {
    throw ConfigError("target count " + std::to_string(t) + " is smaller than n_target_groups " +
                      std::to_string(n_target_groups));
  }
  if (t >= n_tokens) throw ConfigError("target count leaves no context tokens");
  if (strategy == MaskStrategy::multi_block) {
    if (!(block_scale_min > 0.0 && block_scale_min <= block_scale_max && block_scale_max <= 1.0)) {
      throw ConfigError("block scale range must satisfy 0 < min <= max <= 1");
    }
    if (!(aspect_min > 0.0 && aspect_min <= aspect_max)) {
      throw ConfigError("aspect range must satisfy 0 < min <= max");
    }
  }
}

std::vector<int> MaskPair::all_targets() const {
  std::vector<int> out;
  for (const auto& g : target_groups) out.insert(out.end(), g.begin(), g.end());
  std::sort(out.begin(), out.end());
  return out;
}

int MaskPair::target_count() const {
  int n = 0;
  for (const auto& g : target_groups) n += int(g.size());
  return n;
}

bool is_valid(const MaskPair& mask) {
  if (mask.context_indices.empty() || mask.target_groups.empty()) return false;
  std::vector<char> used(mask.n_tokens, 0);
  auto claim = [&](int i) {
    if (i < 0 || i >= mask.n_tokens || used[i]) return false;
    used[i] = 1;
    return true;
  };
  for (int i : mask.context_indices)
    if (!claim(i)) return false;
  for (const auto& g : mask.target_groups) {
    if (g.empty()) return false;
    for (int i : g)
      if (!claim(i)) return false;
  }
  return true;
}

MaskPair sample_random_disjoint(int n_tokens, const MaskConfig& config, Rng& rng) {
  config.validate(n_tokens);
  const int t = config.target_count(n_tokens);
  const int m = config.n_target_groups;

  // Partial Fisher-Yates: the first t entries are a uniform t-subset in
  // uniformly random order.
  std::vector<int> perm(n_tokens);
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = 0; i < t; ++i) {
    std::uniform_int_distribution<int> pick(i, n_tokens - 1);
    std::swap(perm[i], perm[pick(rng)]);
  }

  MaskPair mask;
  mask.n_tokens = n_tokens;
  mask.target_groups.resize(m);
  int pos = 0;
  for (int g = 0; g < m; ++g) {
    const int size = t / m + (g < t % m ? 1 : 0);
    auto& group = mask.target_groups[g];
    group.assign(perm.begin() + pos, perm.begin() + pos + size);
    std::sort(group.begin(), group.end());
    pos += size;
  }
  mask.context_indices.assign(perm.begin() + t, perm.end());
  std::sort(mask.context_indices.begin(), mask.context_indices.end());
  return mask;
}

std::vector<int> block_indices(GridShape grid, const Block& block) {
  if (block.height < 1 || block.width < 1 || block.top < 0 || block.left < 0 ||
      block.top + block.height > grid.rows || block.left + block.width > grid.cols) {
    throw ConfigError("block does not fit inside the " + std::to_string(grid.rows) + "x" +
                      std::to_string(grid.cols) + " patch grid");
  }
  std::vector<int> out;
  out.reserve(std::size_t(block.height) * block.width);
  for (int y = block.top; y < block.top + block.height; ++y)
    for (int x = block.left; x < block.left + block.width; ++x) out.push_back(y * grid.cols + x);
  return out;
}

MaskPair mask_from_blocks(GridShape grid, const std::vector<Block>& blocks) {
  MaskPair mask;
  mask.n_tokens = grid.size();
  std::vector<char> taken(grid.size(), 0);
  for (const auto& b : blocks) {
    std::vector<int> group;
    for (int i : block_indices(grid, b)) {
      if (!taken[i]) {
        taken[i] = 1;
        group.push_back(i);
      }
    }
    if (!group.empty()) mask.target_groups.push_back(std::move(group));
  }
  for (int i = 0; i < grid.size(); ++i)
    if (!taken[i]) mask.context_indices.push_back(i);
  if (mask.context_indices.empty()) throw ConfigError("blocks cover the whole patch grid, leaving no context");
  return mask;
}

MaskPair sample_multi_block(GridShape grid, const MaskConfig& config, Rng& rng) {
  const int n = grid.size();
  if (grid.rows < 1 || grid.cols < 1) throw ConfigError("patch grid must be non-empty");
  config.validate(n);
  const int t = config.target_count(n);
  const int m = config.n_target_groups;

  std::uniform_real_distribution<double> scale(config.block_scale_min, config.block_scale_max);
  std::uniform_real_distribution<double> log_aspect(std::log(config.aspect_min), std::log(config.aspect_max));

  constexpr int kAttempts = 16;
  MaskPair best;
  int best_gap = -1;
  for (int attempt = 0; attempt < kAttempts && best_gap != 0; ++attempt) {
    std::vector<double> area(m);
    double total = 0.0;
    for (auto& a : area) total += (a = scale(rng));
    std::vector<Block> blocks(m);
    for (int g = 0; g < m; ++g) {
      const double cells = std::max(1.0, area[g] / total * t);
      const double aspect = std::exp(log_aspect(rng));
      Block& b = blocks[g];
      b.height = std::clamp(int(std::lround(std::sqrt(cells * aspect))), 1, grid.rows);
      b.width = std::clamp(int(std::lround(cells / b.height)), 1, grid.cols);
      if (b.height * b.width >= n) {
        throw ConfigError("multi-block geometry infeasible: a block would cover the whole grid");
      }
      b.top = std::uniform_int_distribution<int>(0, grid.rows - b.height)(rng);
      b.left = std::uniform_int_distribution<int>(0, grid.cols - b.width)(rng);
    }
    MaskPair mask;
    try {
      mask = mask_from_blocks(grid, blocks);
    } catch (const ConfigError&) {
      continue;
    }
    if (int(mask.target_groups.size()) != m) continue;
    const int gap = std::abs(mask.target_count() - t);
    if (best_gap < 0 || gap < best_gap) {
      best = std::move(mask);
      best_gap = gap;
    }
  }
  if (best_gap < 0) {
    throw ConfigError("multi-block sampling failed to place " + std::to_string(m) +
                      " disjoint blocks on the patch grid");
  }
  return best;
}

MaskPair sample_mask(GridShape grid, const MaskConfig& config, Rng& rng) {
  if (config.strategy == MaskStrategy::multi_block) return sample_multi_block(grid, config, rng);
  return sample_random_disjoint(grid.size(), config, rng);
}

Rng mask_stream(std::uint64_t seed, std::uint64_t step, std::uint64_t sample_index) {
  return derive_rng({seed, 0x6d61736bULL, step, sample_index});
}

}  // namespace rejepa
