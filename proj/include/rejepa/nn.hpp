#pragma once

#include <string>
#include <vector>

#include "rejepa/linalg.hpp"
#include "rejepa/masking.hpp"
#include "rejepa/random.hpp"

namespace rejepa {

/// A named trainable tensor with its gradient accumulator. `decay` marks
/// tensors that receive decoupled weight decay (projection matrices only).
struct Param {
  std::string name;
  Matrix value;
  Matrix grad;
  bool decay = true;

  Param() = default;
  Param(std::string n, Matrix v, bool decays)
      : name(std::move(n)), value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())), decay(decays) {}

  void zero_grad() { grad.setZero(); }
};

using ParamList = std::vector<Param*>;

/// A contiguous run of rows in a packed token matrix forming one sequence.
/// Row-wise layers ignore segments; attention never crosses them.
struct Segment {
  int offset = 0;
  int length = 0;
};

class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in, int out, Rng& rng);

  Matrix forward(const Matrix& x) const;
  /// Accumulates weight/bias gradients and returns dL/dx.
  Matrix backward(const Matrix& x, const Matrix& dy);
  void collect(ParamList& out);

  int in_features() const { return int(weight.value.rows()); }
  int out_features() const { return int(weight.value.cols()); }

  Param weight;  // in x out
  Param bias;    // 1 x out
};

class LayerNorm {
 public:
  struct Cache {
    Matrix xhat;
    Vector inv_std;
  };

  LayerNorm() = default;
  LayerNorm(const std::string& name, int dim);

  Matrix forward(const Matrix& x, Cache* cache) const;
  Matrix backward(const Matrix& dy, const Cache& cache);
  void collect(ParamList& out);

  static constexpr double kEps = 1e-6;
  Param gain;
  Param shift;
};

class MultiHeadAttention {
 public:
  struct Cache {
    Matrix input;
    Matrix qkv;
    std::vector<Matrix> probs;  // segment-major, then head
    Matrix mixed;
  };

  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& name, int dim, int heads, Rng& rng);

  Matrix forward(const Matrix& x, const std::vector<Segment>& segments, Cache* cache) const;
  Matrix backward(const Matrix& dy, const std::vector<Segment>& segments, const Cache& cache);
  void collect(ParamList& out);

  Linear qkv;
  Linear proj;
  int heads = 1;
};

double gelu(double x);
double gelu_grad(double x);

class Mlp {
 public:
  struct Cache {
    Matrix input;
    Matrix pre;
    Matrix act;
  };

  Mlp() = default;
  Mlp(const std::string& name, int dim, int hidden, Rng& rng);

  Matrix forward(const Matrix& x, Cache* cache) const;
  Matrix backward(const Matrix& dy, const Cache& cache);
  void collect(ParamList& out);

  Linear fc1;
  Linear fc2;
};

/// Pre-norm block: h = x + attn(ln1(x)); y = h + mlp(ln2(h)).
class TransformerBlock {
 public:
  struct Cache {
    LayerNorm::Cache ln1;
    MultiHeadAttention::Cache attn;
    LayerNorm::Cache ln2;
    Mlp::Cache mlp;
  };

  TransformerBlock() = default;
  TransformerBlock(const std::string& name, int dim, int heads, double mlp_ratio, Rng& rng);

  Matrix forward(const Matrix& x, const std::vector<Segment>& segments, Cache* cache) const;
  Matrix backward(const Matrix& dy, const std::vector<Segment>& segments, const Cache& cache);
  void collect(ParamList& out);

  LayerNorm ln1;
  MultiHeadAttention attn;
  LayerNorm ln2;
  Mlp mlp;
};

/// Fixed 2-D sine/cosine table, one row per grid cell (row-major). The first
/// half of the columns encodes the grid row, the second half the grid column.
/// `dim` must be divisible by 4.
Matrix sincos_2d_embedding(GridShape grid, int dim);

/// Copies rows `indices` of `src` into consecutive rows of `dst` at `offset`.
void gather_rows(const Matrix& src, const std::vector<int>& indices, Matrix& dst, int offset);

}  // namespace rejepa
