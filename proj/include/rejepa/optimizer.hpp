#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rejepa/nn.hpp"

namespace rejepa {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with decoupled weight decay. Moments are keyed by position in the
/// parameter list handed to the constructor; `names` records that registry so
/// a mismatched list is rejected instead of silently misaligned.
class AdamW {
 public:
  AdamW() = default;
  AdamW(const ParamList& params, AdamWConfig config = {});

  /// p <- p * (1 - lr * wd) for decaying tensors, then the bias-corrected
  /// adaptive step p <- p - lr * m_hat / (sqrt(v_hat) + eps).
  void step(const ParamList& params, double lr, double weight_decay);

  bool tracks(const std::string& name) const;

  AdamWConfig config;
  std::int64_t t = 0;
  std::vector<std::string> names;
  std::vector<Matrix> m;
  std::vector<Matrix> v;
};

}  // namespace rejepa
