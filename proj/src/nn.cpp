#include "rejepa/nn.hpp"

#include <cmath>
#include <numbers>

#include "rejepa/errors.hpp"

namespace rejepa {

namespace {

constexpr double kInitStd = 0.02;

Matrix truncated_normal_matrix(int rows, int cols, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = truncated_normal(rng, kInitStd);
  return m;
}

}  // namespace

Linear::Linear(const std::string& name, int in, int out, Rng& rng)
    : weight(name + ".weight", truncated_normal_matrix(in, out, rng), true),
      bias(name + ".bias", Matrix::Zero(1, out), false) {}

Matrix Linear::forward(const Matrix& x) const {
  Matrix y = x * weight.value;
  y.rowwise() += bias.value.row(0);
  return y;
}

Matrix Linear::backward(const Matrix& x, const Matrix& dy) {
  weight.grad.noalias() += x.transpose() * dy;
  bias.grad += dy.colwise().sum();
  return dy * weight.value.transpose();
}

void Linear::collect(ParamList& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

LayerNorm::LayerNorm(const std::string& name, int dim)
    : gain(name + ".gain", Matrix::Ones(1, dim), false), shift(name + ".shift", Matrix::Zero(1, dim), false) {}

Matrix LayerNorm::forward(const Matrix& x, Cache* cache) const {
  const Eigen::Index n = x.rows(), d = x.cols();
  Matrix xhat(n, d);
  Vector inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = x.row(i).mean();
    const double var = (x.row(i).array() - mean).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + kEps);
    xhat.row(i) = (x.row(i).array() - mean) * inv_std(i);
  }
  Matrix y = xhat.array().rowwise() * gain.value.row(0).array();
  y.rowwise() += shift.value.row(0);
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

Matrix LayerNorm::backward(const Matrix& dy, const Cache& cache) {
  gain.grad += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  shift.grad += dy.colwise().sum();
  const Matrix dxhat = dy.array().rowwise() * gain.value.row(0).array();
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double mean_d = dxhat.row(i).mean();
    const double mean_dx = (dxhat.row(i).array() * cache.xhat.row(i).array()).mean();
    dx.row(i) = (dxhat.row(i).array() - mean_d - cache.xhat.row(i).array() * mean_dx) * cache.inv_std(i);
  }
  return dx;
}

void LayerNorm::collect(ParamList& out) {
  out.push_back(&gain);
  out.push_back(&shift);
}

MultiHeadAttention::MultiHeadAttention(const std::string& name, int dim, int n_heads, Rng& rng)
    : qkv(name + ".qkv", dim, 3 * dim, rng), proj(name + ".proj", dim, dim, rng), heads(n_heads) {
  if (n_heads < 1 || dim % n_heads != 0) {
    throw ConfigError("embedding width " + std::to_string(dim) + " is not divisible by " +
                      std::to_string(n_heads) + " heads");
  }
}

Matrix MultiHeadAttention::forward(const Matrix& x, const std::vector<Segment>& segments, Cache* cache) const {
  const int dim = proj.in_features();
  const int dh = dim / heads;
  const double scale = 1.0 / std::sqrt(double(dh));
  Matrix packed = qkv.forward(x);
  Matrix mixed(x.rows(), dim);
  std::vector<Matrix> probs;
  if (cache) probs.reserve(segments.size() * heads);
  for (const Segment& seg : segments) {
    for (int h = 0; h < heads; ++h) {
      const auto q = packed.block(seg.offset, h * dh, seg.length, dh);
      const auto k = packed.block(seg.offset, dim + h * dh, seg.length, dh);
      const auto v = packed.block(seg.offset, 2 * dim + h * dh, seg.length, dh);
      Matrix p = (q * k.transpose()) * scale;
      for (Eigen::Index i = 0; i < p.rows(); ++i) {
        const double m = p.row(i).maxCoeff();
        p.row(i) = (p.row(i).array() - m).exp();
        p.row(i) /= p.row(i).sum();
      }
      mixed.block(seg.offset, h * dh, seg.length, dh).noalias() = p * v;
      if (cache) probs.push_back(std::move(p));
    }
  }
  Matrix y = proj.forward(mixed);
  if (cache) {
    cache->input = x;
    cache->qkv = std::move(packed);
    cache->probs = std::move(probs);
    cache->mixed = std::move(mixed);
  }
  return y;
}

Matrix MultiHeadAttention::backward(const Matrix& dy, const std::vector<Segment>& segments, const Cache& cache) {
  const int dim = proj.in_features();
  const int dh = dim / heads;
  const double scale = 1.0 / std::sqrt(double(dh));
  const Matrix dmixed = proj.backward(cache.mixed, dy);
  Matrix dqkv = Matrix::Zero(dy.rows(), 3 * dim);
  std::size_t idx = 0;
  for (const Segment& seg : segments) {
    for (int h = 0; h < heads; ++h, ++idx) {
      const Matrix& p = cache.probs[idx];
      const auto q = cache.qkv.block(seg.offset, h * dh, seg.length, dh);
      const auto k = cache.qkv.block(seg.offset, dim + h * dh, seg.length, dh);
      const auto v = cache.qkv.block(seg.offset, 2 * dim + h * dh, seg.length, dh);
      const auto dout = dmixed.block(seg.offset, h * dh, seg.length, dh);
      dqkv.block(seg.offset, 2 * dim + h * dh, seg.length, dh).noalias() = p.transpose() * dout;
      Matrix dp = dout * v.transpose();
      const Vector row_dot = (dp.array() * p.array()).rowwise().sum();
      Matrix ds = p.array() * (dp.array().colwise() - row_dot.array());
      ds *= scale;
      dqkv.block(seg.offset, h * dh, seg.length, dh).noalias() = ds * k;
      dqkv.block(seg.offset, dim + h * dh, seg.length, dh).noalias() = ds.transpose() * q;
    }
  }
  return qkv.backward(cache.input, dqkv);
}

void MultiHeadAttention::collect(ParamList& out) {
  qkv.collect(out);
  proj.collect(out);
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

Mlp::Mlp(const std::string& name, int dim, int hidden, Rng& rng)
    : fc1(name + ".fc1", dim, hidden, rng), fc2(name + ".fc2", hidden, dim, rng) {}

Matrix Mlp::forward(const Matrix& x, Cache* cache) const {
  Matrix pre = fc1.forward(x);
  Matrix act = pre.unaryExpr([](double v) { return gelu(v); });
  Matrix y = fc2.forward(act);
  if (cache) {
    cache->input = x;
    cache->pre = std::move(pre);
    cache->act = std::move(act);
  }
  return y;
}

Matrix Mlp::backward(const Matrix& dy, const Cache& cache) {
  const Matrix dact = fc2.backward(cache.act, dy);
  const Matrix dpre = dact.array() * cache.pre.unaryExpr([](double v) { return gelu_grad(v); }).array();
  return fc1.backward(cache.input, dpre);
}

void Mlp::collect(ParamList& out) {
  fc1.collect(out);
  fc2.collect(out);
}

TransformerBlock::TransformerBlock(const std::string& name, int dim, int heads, double mlp_ratio, Rng& rng)
    : ln1(name + ".ln1", dim),
      attn(name + ".attn", dim, heads, rng),
      ln2(name + ".ln2", dim),
      mlp(name + ".mlp", dim, std::max(1, int(std::lround(dim * mlp_ratio))), rng) {}

Matrix TransformerBlock::forward(const Matrix& x, const std::vector<Segment>& segments, Cache* cache) const {
  Matrix h = x + attn.forward(ln1.forward(x, cache ? &cache->ln1 : nullptr), segments, cache ? &cache->attn : nullptr);
  return h + mlp.forward(ln2.forward(h, cache ? &cache->ln2 : nullptr), cache ? &cache->mlp : nullptr);
}

Matrix TransformerBlock::backward(const Matrix& dy, const std::vector<Segment>& segments, const Cache& cache) {
  Matrix dh = dy + ln2.backward(mlp.backward(dy, cache.mlp), cache.ln2);
  return dh + ln1.backward(attn.backward(dh, segments, cache.attn), cache.ln1);
}

void TransformerBlock::collect(ParamList& out) {
  ln1.collect(out);
  attn.collect(out);
  ln2.collect(out);
  mlp.collect(out);
}

Matrix sincos_2d_embedding(GridShape grid, int dim) {
  if (dim <= 0 || dim % 4 != 0) {
    throw ConfigError("positional embedding width must be a positive multiple of 4, got " + std::to_string(dim));
  }
  const int quarter = dim / 4;
  Matrix out(grid.size(), dim);
  for (int r = 0; r < grid.rows; ++r) {
    for (int c = 0; c < grid.cols; ++c) {
      const int t = r * grid.cols + c;
      for (int k = 0; k < quarter; ++k) {
        const double omega = 1.0 / std::pow(10000.0, double(k) / quarter);
        out(t, k) = std::sin(r * omega);
        out(t, quarter + k) = std::cos(r * omega);
        out(t, 2 * quarter + k) = std::sin(c * omega);
        out(t, 3 * quarter + k) = std::cos(c * omega);
      }
    }
  }
  return out;
}

void gather_rows(const Matrix& src, const std::vector<int>& indices, Matrix& dst, int offset) {
  for (std::size_t i = 0; i < indices.size(); ++i) dst.row(offset + Eigen::Index(i)) = src.row(indices[i]);
}

}  // namespace rejepa
