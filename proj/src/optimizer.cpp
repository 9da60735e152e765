#include "rejepa/optimizer.hpp"

#include <algorithm>
#include <cmath>

#include "rejepa/errors.hpp"

namespace rejepa {

AdamW::AdamW(const ParamList& params, AdamWConfig cfg) : config(cfg) {
  for (const Param* p : params) {
    names.push_back(p->name);
    m.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    v.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

void AdamW::step(const ParamList& params, double lr, double weight_decay) {
  if (params.size() != names.size()) throw ContractViolation("optimizer parameter registry size mismatch");
  ++t;
  const double bc1 = 1.0 - std::pow(config.beta1, double(t));
  const double bc2 = 1.0 - std::pow(config.beta2, double(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    if (p.name != names[i]) throw ContractViolation("optimizer registry expected " + names[i] + ", got " + p.name);
    if (p.decay && weight_decay != 0.0) p.value *= (1.0 - lr * weight_decay);
    m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * p.grad;
    v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * p.grad.cwiseAbs2();
    const double b1 = bc1, b2 = bc2, eps = config.eps;
    p.value.array() -= lr * (m[i].array() / b1) / ((v[i].array() / b2).sqrt() + eps);
  }
}

bool AdamW::tracks(const std::string& name) const {
  return std::find(names.begin(), names.end(), name) != names.end();
}

}  // namespace rejepa
