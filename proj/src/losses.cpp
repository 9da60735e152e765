#include "rejepa/losses.hpp"

#include <cmath>
#include <sstream>

#include "rejepa/errors.hpp"

namespace rejepa {

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    std::ostringstream os;
    os << what << ": shape mismatch " << a.rows() << "x" << a.cols() << " vs " << b.rows() << "x" << b.cols();
    throw ContractViolation(os.str());
  }
}

void require_batch(const Matrix& z, const char* what) {
  if (z.rows() < 2) throw ContractViolation(std::string(what) + " needs at least 2 rows");
  if (z.cols() < 1) throw ContractViolation(std::string(what) + " needs at least 1 column");
}

Matrix centered(const Matrix& z) { return z.rowwise() - z.colwise().mean(); }

}  // namespace

void VicregConfig::validate() const {
  for (double l : {lambda_v, lambda_c, lambda_i}) {
    if (!std::isfinite(l) || l < 0.0) throw ConfigError("vicreg lambdas must be finite and >= 0");
  }
  if (!std::isfinite(gamma) || gamma < 0.0) throw ConfigError("vicreg.gamma must be finite and >= 0");
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw ConfigError("vicreg.epsilon must be > 0");
}

double prediction_loss(const std::vector<EmbeddingMatrix>& predicted, const std::vector<EmbeddingMatrix>& targets) {
  if (predicted.size() != targets.size() || predicted.empty()) {
    throw ContractViolation("prediction_loss needs equally many (>= 1) predicted and target groups");
  }
  double sum = 0.0;
  for (std::size_t g = 0; g < predicted.size(); ++g) {
    require_same_shape(predicted[g], targets[g], "prediction_loss");
    if (predicted[g].rows() == 0) throw ContractViolation("prediction_loss: empty group");
    sum += (predicted[g] - targets[g]).squaredNorm() / double(predicted[g].rows());
  }
  return sum / double(predicted.size());
}

std::vector<Matrix> prediction_loss_grad(const std::vector<EmbeddingMatrix>& predicted,
                                         const std::vector<EmbeddingMatrix>& targets) {
  prediction_loss(predicted, targets);  // shape checks
  std::vector<Matrix> out;
  const double m = double(predicted.size());
  for (std::size_t g = 0; g < predicted.size(); ++g) {
    out.push_back((predicted[g] - targets[g]) * (2.0 / (m * double(predicted[g].rows()))));
  }
  return out;
}

double variance_term(const EmbeddingMatrix& z, double gamma, double epsilon) {
  require_batch(z, "variance_term");
  const Matrix c = centered(z);
  const double n = double(z.rows());
  double sum = 0.0;
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    const double std_j = std::sqrt(c.col(j).squaredNorm() / (n - 1.0) + epsilon);
    sum += std::max(0.0, gamma - std_j);
  }
  return sum / double(z.cols());
}

Matrix variance_term_grad(const EmbeddingMatrix& z, double gamma, double epsilon) {
  require_batch(z, "variance_term");
  const Matrix c = centered(z);
  const double n = double(z.rows()), d = double(z.cols());
  Matrix grad = Matrix::Zero(z.rows(), z.cols());
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    const double std_j = std::sqrt(c.col(j).squaredNorm() / (n - 1.0) + epsilon);
    if (gamma - std_j > 0.0) {
      // d/dz_ij of -std_j / d = -(z_ij - mean_j) / ((n - 1) std_j d)
      grad.col(j) = c.col(j) * (-1.0 / ((n - 1.0) * std_j * d));
    }
  }
  return grad;
}

double covariance_term(const EmbeddingMatrix& z) {
  require_batch(z, "covariance_term");
  const Matrix c = centered(z);
  const Matrix cov = (c.transpose() * c) / double(z.rows() - 1);
  return (cov.squaredNorm() - cov.diagonal().squaredNorm()) / double(z.cols());
}

Matrix covariance_term_grad(const EmbeddingMatrix& z) {
  require_batch(z, "covariance_term");
  const Matrix c = centered(z);
  const double n1 = double(z.rows() - 1);
  Matrix cov = (c.transpose() * c) / n1;
  cov.diagonal().setZero();
  // dc/dCov = 2 Cov_off / d; Cov = C^T C / (n-1) gives dC = 2 C dCov / (n-1).
  // Columns of C have zero mean, so the centering projection is a no-op.
  return c * cov * (4.0 / (double(z.cols()) * n1));
}

double invariance_term(const EmbeddingMatrix& z, const EmbeddingMatrix& z_prime) {
  require_same_shape(z, z_prime, "invariance_term");
  if (z.rows() == 0) throw ContractViolation("invariance_term needs at least 1 row");
  return (z - z_prime).squaredNorm() / double(z.rows());
}

Matrix invariance_term_grad(const EmbeddingMatrix& z, const EmbeddingMatrix& z_prime) {
  require_same_shape(z, z_prime, "invariance_term");
  if (z.rows() == 0) throw ContractViolation("invariance_term needs at least 1 row");
  return (z - z_prime) * (2.0 / double(z.rows()));
}

VicregBreakdown vicreg_loss(const EmbeddingMatrix& context_pooled, const EmbeddingMatrix& predicted_pooled,
                            const EmbeddingMatrix& target_pooled, const VicregConfig& config) {
  require_same_shape(context_pooled, predicted_pooled, "vicreg_loss");
  require_same_shape(predicted_pooled, target_pooled, "vicreg_loss");
  VicregBreakdown out;
  if (!config.enabled() && context_pooled.rows() < 2) return out;
  out.variance = 0.5 * (variance_term(context_pooled, config.gamma, config.epsilon) +
                        variance_term(predicted_pooled, config.gamma, config.epsilon));
  out.covariance = 0.5 * (covariance_term(context_pooled) + covariance_term(predicted_pooled));
  out.invariance = invariance_term(predicted_pooled, target_pooled);
  out.total = config.lambda_v * out.variance + config.lambda_c * out.covariance + config.lambda_i * out.invariance;
  return out;
}

VicregGrads vicreg_loss_grad(const EmbeddingMatrix& context_pooled, const EmbeddingMatrix& predicted_pooled,
                             const EmbeddingMatrix& target_pooled, const VicregConfig& config) {
  require_same_shape(context_pooled, predicted_pooled, "vicreg_loss");
  require_same_shape(predicted_pooled, target_pooled, "vicreg_loss");
  VicregGrads g{Matrix::Zero(context_pooled.rows(), context_pooled.cols()),
                Matrix::Zero(predicted_pooled.rows(), predicted_pooled.cols())};
  if (config.lambda_v != 0.0) {
    g.context += 0.5 * config.lambda_v * variance_term_grad(context_pooled, config.gamma, config.epsilon);
    g.predicted += 0.5 * config.lambda_v * variance_term_grad(predicted_pooled, config.gamma, config.epsilon);
  }
  if (config.lambda_c != 0.0) {
    g.context += 0.5 * config.lambda_c * covariance_term_grad(context_pooled);
    g.predicted += 0.5 * config.lambda_c * covariance_term_grad(predicted_pooled);
  }
  if (config.lambda_i != 0.0) g.predicted += config.lambda_i * invariance_term_grad(predicted_pooled, target_pooled);
  return g;
}

double total_loss(double pred_loss, double vicreg) {
  if (!std::isfinite(pred_loss) || !std::isfinite(vicreg)) {
    std::ostringstream os;
    os << "non-finite loss: L_pred=" << pred_loss << " L_vicreg=" << vicreg;
    throw TrainingDivergence(os.str());
  }
  return pred_loss + vicreg;
}

}  // namespace rejepa
