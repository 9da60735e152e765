#include <doctest.h>

#include <algorithm>
#include <set>

#include "oracles.hpp"
#include "rejepa/errors.hpp"
#include "rejepa/masking.hpp"

using namespace rejepa;

namespace {

bool independently_disjoint(const MaskPair& m) {
  std::set<int> seen;
  for (int i : m.context_indices) {
    if (i < 0 || i >= m.n_tokens || !seen.insert(i).second) return false;
  }
  for (const auto& g : m.target_groups) {
    if (g.empty()) return false;
    for (int i : g) {
      if (i < 0 || i >= m.n_tokens || !seen.insert(i).second) return false;
    }
  }
  return !m.context_indices.empty();
}

}  // namespace

TEST_CASE("random disjoint: 16 tokens at ratio 0.25 with one group") {
  MaskConfig cfg;
  Rng rng(1);
  const MaskPair m = sample_random_disjoint(16, cfg, rng);
  REQUIRE(m.target_groups.size() == 1);
  CHECK(m.target_groups[0].size() == 4);
  CHECK(m.context_indices.size() == 12);
  CHECK(independently_disjoint(m));
  CHECK(is_valid(m));
  CHECK(std::is_sorted(m.context_indices.begin(), m.context_indices.end()));
}

TEST_CASE("random disjoint: four groups of one") {
  MaskConfig cfg;
  cfg.n_target_groups = 4;
  Rng rng(2);
  const MaskPair m = sample_random_disjoint(16, cfg, rng);
  REQUIRE(m.target_groups.size() == 4);
  for (const auto& g : m.target_groups) CHECK(g.size() == 1);
  CHECK(independently_disjoint(m));
}

TEST_CASE("random disjoint: uneven partitions give earlier groups the extra index") {
  MaskConfig cfg;
  cfg.target_ratio = 0.5;
  cfg.n_target_groups = 3;
  Rng rng(3);
  const MaskPair m = sample_random_disjoint(14, cfg, rng);  // T = 7
  REQUIRE(m.target_groups.size() == 3);
  CHECK(m.target_groups[0].size() == 3);
  CHECK(m.target_groups[1].size() == 2);
  CHECK(m.target_groups[2].size() == 2);
  CHECK(m.context_indices.size() == 7);
}

TEST_CASE("random disjoint: context and targets cover every token") {
  MaskConfig cfg;
  for (std::uint64_t s = 0; s < 200; ++s) {
    Rng rng = mask_stream(5, s, 0);
    const MaskPair m = sample_random_disjoint(64, cfg, rng);
    CHECK(m.context_indices.size() + m.target_count() == 64);
    CHECK(independently_disjoint(m));
  }
}

TEST_CASE("random disjoint: per-token target frequency is 0.25 +- 0.02") {
  MaskConfig cfg;
  std::vector<int> hits(16, 0);
  const int draws = 10000;
  for (int s = 0; s < draws; ++s) {
    Rng rng = mask_stream(9, std::uint64_t(s), 0);
    for (int i : sample_random_disjoint(16, cfg, rng).all_targets()) ++hits[std::size_t(i)];
  }
  for (int h : hits) CHECK(std::abs(double(h) / draws - 0.25) <= 0.02);
}

TEST_CASE("random disjoint rejects infeasible configurations") {
  Rng rng(0);
  MaskConfig cfg;
  cfg.n_target_groups = 5;
  CHECK_THROWS_AS(sample_random_disjoint(16, cfg, rng), ConfigError);
  cfg = {};
  cfg.target_ratio = 0.99;
  CHECK_THROWS_AS(sample_random_disjoint(16, cfg, rng), ConfigError);
  cfg = {};
  cfg.target_ratio = 0.01;
  CHECK_THROWS_AS(sample_random_disjoint(16, cfg, rng), ConfigError);
}

TEST_CASE("mask streams are deterministic and independent per sample") {
  MaskConfig cfg;
  Rng a = mask_stream(1, 2, 3), b = mask_stream(1, 2, 3), c = mask_stream(1, 2, 4);
  const MaskPair ma = sample_random_disjoint(64, cfg, a);
  const MaskPair mb = sample_random_disjoint(64, cfg, b);
  const MaskPair mc = sample_random_disjoint(64, cfg, c);
  CHECK(ma.target_groups == mb.target_groups);
  CHECK(ma.context_indices == mb.context_indices);
  CHECK(ma.target_groups != mc.target_groups);
}

TEST_CASE("explicit blocks index the grid row-major") {
  const GridShape grid{4, 4};
  const MaskPair m = mask_from_blocks(grid, {Block{0, 0, 2, 2}});
  REQUIRE(m.target_groups.size() == 1);
  CHECK(m.target_groups[0] == std::vector<int>{0, 1, 4, 5});
  CHECK(m.context_indices.size() == 12);
  CHECK(std::find(m.context_indices.begin(), m.context_indices.end(), 5) == m.context_indices.end());
}

TEST_CASE("two 1x2 blocks give two disjoint groups of two") {
  const MaskPair m = mask_from_blocks({4, 4}, {Block{0, 0, 1, 2}, Block{2, 1, 1, 2}});
  REQUIRE(m.target_groups.size() == 2);
  CHECK(m.target_groups[0].size() == 2);
  CHECK(m.target_groups[1].size() == 2);
  CHECK(independently_disjoint(m));
}

TEST_CASE("overlapping blocks keep shared cells in the earlier group") {
  const MaskPair m = mask_from_blocks({4, 4}, {Block{0, 0, 2, 2}, Block{1, 1, 2, 2}});
  REQUIRE(m.target_groups.size() == 2);
  CHECK(m.target_groups[0] == std::vector<int>{0, 1, 4, 5});
  CHECK(m.target_groups[1] == std::vector<int>{6, 9, 10});
  CHECK(independently_disjoint(m));
}

TEST_CASE("blocks that do not fit are configuration errors") {
  CHECK_THROWS_AS(block_indices({4, 4}, Block{3, 3, 2, 2}), ConfigError);
  CHECK_THROWS_AS(mask_from_blocks({4, 4}, {Block{0, 0, 4, 4}}), ConfigError);
}

TEST_CASE("multi-block masks are valid and hit the target fraction on average") {
  MaskConfig cfg;
  cfg.strategy = MaskStrategy::multi_block;
  cfg.n_target_groups = 4;
  const GridShape grid{8, 8};
  double fraction = 0.0;
  const int draws = 10000;
  for (int s = 0; s < draws; ++s) {
    Rng rng = mask_stream(4, std::uint64_t(s), 0);
    const MaskPair m = sample_mask(grid, cfg, rng);
    REQUIRE(independently_disjoint(m));
    fraction += double(m.target_count()) / 64.0;
  }
  fraction /= draws;
  CHECK(fraction >= 0.20);
  CHECK(fraction <= 0.30);
}

TEST_CASE("multi-block on the toy 4x4 grid stays valid") {
  MaskConfig cfg;
  cfg.strategy = MaskStrategy::multi_block;
  cfg.n_target_groups = 4;
  for (int s = 0; s < 2000; ++s) {
    Rng rng = mask_stream(8, std::uint64_t(s), 1);
    const MaskPair m = sample_mask({4, 4}, cfg, rng);
    CHECK(independently_disjoint(m));
    CHECK(std::abs(m.target_count() - 4) <= 4);
  }
}

TEST_CASE("mask strategy names round trip") {
  for (auto s : {MaskStrategy::random_disjoint, MaskStrategy::multi_block}) {
    CHECK(mask_strategy_from_string(to_string(s)) == s);
  }
  CHECK_THROWS_AS(mask_strategy_from_string("checkerboard"), ConfigError);
}
