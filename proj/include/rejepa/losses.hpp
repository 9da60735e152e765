#pragma once

#include <vector>

#include "rejepa/linalg.hpp"

namespace rejepa {

/// n x d batch of feature vectors, one row per sample.
using EmbeddingMatrix = Matrix;

struct VicregConfig {
  double lambda_v = 25.0;
  double lambda_c = 25.0;
  double lambda_i = 1.0;
  double gamma = 1.0;
  double epsilon = 1e-4;

  void validate() const;
  bool enabled() const { return lambda_v != 0.0 || lambda_c != 0.0 || lambda_i != 0.0; }
  bool operator==(const VicregConfig&) const = default;
};

/// Mean over groups of the per-group mean squared L2 row distance.
double prediction_loss(const std::vector<EmbeddingMatrix>& predicted, const std::vector<EmbeddingMatrix>& targets);
/// dL/dpredicted, one matrix per group.
std::vector<Matrix> prediction_loss_grad(const std::vector<EmbeddingMatrix>& predicted,
                                         const std::vector<EmbeddingMatrix>& targets);

/// (1/d) sum_j max(0, gamma - sqrt(Var(z_j) + epsilon)), unbiased variance.
/// At exactly sqrt(Var + eps) == gamma the hinge is treated as inactive.
double variance_term(const EmbeddingMatrix& z, double gamma, double epsilon);
Matrix variance_term_grad(const EmbeddingMatrix& z, double gamma, double epsilon);

/// (1/d) * sum of squared off-diagonal entries of the unbiased covariance.
double covariance_term(const EmbeddingMatrix& z);
Matrix covariance_term_grad(const EmbeddingMatrix& z);

/// (1/n) sum_i ||z_i - z'_i||^2.
double invariance_term(const EmbeddingMatrix& z, const EmbeddingMatrix& z_prime);
/// Gradient with respect to the first argument.
Matrix invariance_term_grad(const EmbeddingMatrix& z, const EmbeddingMatrix& z_prime);

/// Unweighted term values plus the weighted total.
struct VicregBreakdown {
  double variance = 0.0;
  double covariance = 0.0;
  double invariance = 0.0;
  double total = 0.0;
};

/// Variance and covariance are each averaged over the pooled context batch and
/// the pooled prediction batch; invariance pairs predictions with targets.
VicregBreakdown vicreg_loss(const EmbeddingMatrix& context_pooled, const EmbeddingMatrix& predicted_pooled,
                            const EmbeddingMatrix& target_pooled, const VicregConfig& config);

struct VicregGrads {
  Matrix context;
  Matrix predicted;
};

/// Gradients of vicreg_loss(...).total; the target side is a constant.
VicregGrads vicreg_loss_grad(const EmbeddingMatrix& context_pooled, const EmbeddingMatrix& predicted_pooled,
                             const EmbeddingMatrix& target_pooled, const VicregConfig& config);

/// pred_loss + vicreg. Throws TrainingDivergence on non-finite input.
double total_loss(double pred_loss, double vicreg);

}  // namespace rejepa
