#include "rejepa/model.hpp"

#include <algorithm>
#include <unordered_map>

#include "rejepa/errors.hpp"

namespace rejepa {

void EncoderConfig::validate() const {
  if (embed_dim < 4 || embed_dim % 4 != 0) throw ConfigError("encoder.embed_dim must be a positive multiple of 4");
  if (n_heads < 1 || embed_dim % n_heads != 0) throw ConfigError("encoder.embed_dim must be divisible by n_heads");
  if (depth < 1) throw ConfigError("encoder.depth must be >= 1");
  if (patch_size < 1) throw ConfigError("encoder.patch_size must be >= 1");
  if (!(mlp_ratio > 0.0)) throw ConfigError("encoder.mlp_ratio must be > 0");
  if (input_bands < 1) throw ConfigError("encoder.input_bands must be >= 1");
}

void PredictorConfig::validate() const {
  if (embed_dim < 4 || embed_dim % 4 != 0) throw ConfigError("predictor.embed_dim must be a positive multiple of 4");
  if (n_heads < 1 || embed_dim % n_heads != 0) throw ConfigError("predictor.embed_dim must be divisible by n_heads");
  if (depth < 1) throw ConfigError("predictor.depth must be >= 1");
  if (!(mlp_ratio > 0.0)) throw ConfigError("predictor.mlp_ratio must be > 0");
}

void ModelConfig::validate() const {
  encoder.validate();
  predictor.validate();
  if (image_height < 1 || image_width < 1 || image_height % encoder.patch_size != 0 ||
      image_width % encoder.patch_size != 0) {
    throw ConfigError("image size must be a positive multiple of encoder.patch_size");
  }
  if (n_tokens() < 2) throw ConfigError("image must contain at least 2 patches");
}

VitEncoder::VitEncoder(const std::string& name, const EncoderConfig& cfg, Rng& rng)
    : config(cfg),
      patch_embed(name + ".patch_embed", cfg.input_bands * cfg.patch_size * cfg.patch_size, cfg.embed_dim, rng) {
  for (int i = 0; i < cfg.depth; ++i) {
    blocks.emplace_back(name + ".blocks." + std::to_string(i), cfg.embed_dim, cfg.n_heads, cfg.mlp_ratio, rng);
  }
  if (cfg.final_norm) norm = LayerNorm(name + ".norm", cfg.embed_dim);
}

Matrix VitEncoder::forward(const Matrix& patch_rows, const Matrix& pos_rows, const std::vector<Segment>& segments,
                           Cache* cache) const {
  if (patch_rows.cols() != patch_embed.in_features()) {
    throw ShapeError("patch width " + std::to_string(patch_rows.cols()) + " does not match encoder input " +
                     std::to_string(patch_embed.in_features()));
  }
  Matrix x = patch_embed.forward(patch_rows) + pos_rows;
  if (cache) {
    cache->input = patch_rows;
    cache->blocks.resize(blocks.size());
  }
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    x = blocks[i].forward(x, segments, cache ? &cache->blocks[i] : nullptr);
  }
  if (config.final_norm) x = norm.forward(x, cache ? &cache->norm : nullptr);
  return x;
}

void VitEncoder::backward(const Matrix& dout, const std::vector<Segment>& segments, const Cache& cache) {
  Matrix dx = config.final_norm ? norm.backward(dout, cache.norm) : dout;
  for (std::size_t i = blocks.size(); i-- > 0;) dx = blocks[i].backward(dx, segments, cache.blocks[i]);
  patch_embed.backward(cache.input, dx);
}

void VitEncoder::collect(ParamList& out) {
  patch_embed.collect(out);
  for (auto& b : blocks) b.collect(out);
  if (config.final_norm) norm.collect(out);
}

Predictor::Predictor(const std::string& name, int encoder_dim, const PredictorConfig& cfg, Rng& rng)
    : config(cfg),
      embed(name + ".embed", encoder_dim, cfg.embed_dim, rng),
      norm(name + ".norm", cfg.embed_dim),
      head(name + ".head", cfg.embed_dim, encoder_dim, rng) {
  for (int i = 0; i < cfg.depth; ++i) {
    blocks.emplace_back(name + ".blocks." + std::to_string(i), cfg.embed_dim, cfg.n_heads, cfg.mlp_ratio, rng);
  }
}

Matrix Predictor::forward(const Matrix& context, const std::vector<PredictorJob>& jobs, const Param& mask_token,
                          const Matrix& pos_embed, Cache* cache) const {
  const int width = config.embed_dim;
  const Matrix embedded = embed.forward(context);
  std::vector<Segment> segments;
  std::vector<int> target_rows;
  int total = 0;
  for (const auto& job : jobs) {
    if (job.context_indices.empty() || job.target_indices.empty()) {
      throw ContractViolation("predictor job needs non-empty context and targets");
    }
    if (job.context_offset < 0 || job.context_offset + int(job.context_indices.size()) > context.rows()) {
      throw ContractViolation("predictor job context rows out of range");
    }
    const int len = int(job.context_indices.size() + job.target_indices.size());
    segments.push_back({total, len});
    total += len;
  }
  Matrix x(total, width);
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    const auto& job = jobs[j];
    int row = segments[j].offset;
    for (std::size_t i = 0; i < job.context_indices.size(); ++i, ++row) {
      const int pos = job.context_indices[i];
      if (pos < 0 || pos >= pos_embed.rows()) throw ContractViolation("context index out of range");
      x.row(row) = embedded.row(job.context_offset + Eigen::Index(i)) + pos_embed.row(pos);
    }
    for (int pos : job.target_indices) {
      if (pos < 0 || pos >= pos_embed.rows()) throw ContractViolation("target index out of range");
      x.row(row) = mask_token.value.row(0) + pos_embed.row(pos);
      target_rows.push_back(row++);
    }
  }
  if (cache) cache->blocks.resize(blocks.size());
  for (std::size_t i = 0; i < blocks.size(); ++i) x = blocks[i].forward(x, segments, cache ? &cache->blocks[i] : nullptr);
  Matrix gathered(target_rows.size(), width);
  gather_rows(x, target_rows, gathered, 0);
  Matrix normed = norm.forward(gathered, cache ? &cache->norm : nullptr);
  Matrix out = head.forward(normed);
  if (cache) {
    cache->context = context;
    cache->segments = std::move(segments);
    cache->target_rows = std::move(target_rows);
    cache->normed = std::move(normed);
  }
  return out;
}

Matrix Predictor::backward(const Matrix& dpred, const std::vector<PredictorJob>& jobs, Param& mask_token,
                           const Cache& cache) {
  const Matrix dgathered = norm.backward(head.backward(cache.normed, dpred), cache.norm);
  const Eigen::Index total = cache.segments.empty() ? 0 : cache.segments.back().offset + cache.segments.back().length;
  Matrix dx = Matrix::Zero(total, config.embed_dim);
  for (std::size_t i = 0; i < cache.target_rows.size(); ++i) dx.row(cache.target_rows[i]) = dgathered.row(i);
  for (std::size_t i = blocks.size(); i-- > 0;) dx = blocks[i].backward(dx, cache.segments, cache.blocks[i]);

  Matrix dembedded = Matrix::Zero(cache.context.rows(), config.embed_dim);
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    const auto& job = jobs[j];
    int row = cache.segments[j].offset;
    for (std::size_t i = 0; i < job.context_indices.size(); ++i, ++row) {
      dembedded.row(job.context_offset + Eigen::Index(i)) += dx.row(row);
    }
    for (std::size_t i = 0; i < job.target_indices.size(); ++i, ++row) mask_token.grad.row(0) += dx.row(row);
  }
  return embed.backward(cache.context, dembedded);
}

void Predictor::collect(ParamList& out) {
  embed.collect(out);
  for (auto& b : blocks) b.collect(out);
  norm.collect(out);
  head.collect(out);
}

ModelState::ModelState(const ModelConfig& cfg, std::uint64_t seed) : config(cfg) {
  cfg.validate();
  Rng rng(derive_seed({seed, 0x696e6974ULL}));
  context_encoder = VitEncoder("context", cfg.encoder, rng);
  predictor = Predictor("predictor", cfg.encoder.embed_dim, cfg.predictor, rng);
  Matrix token(1, cfg.predictor.embed_dim);
  for (Eigen::Index i = 0; i < token.size(); ++i) token(0, i) = truncated_normal(rng, 0.02);
  mask_token = Param("mask_token", token, false);
  // The target encoder starts as an exact copy of the context encoder.
  target_encoder = context_encoder;
  ParamList target;
  target_encoder.collect(target);
  for (Param* p : target) p->name.replace(0, std::string("context").size(), "target");
  pos_embed = sincos_2d_embedding(cfg.grid(), cfg.encoder.embed_dim);
  predictor_pos_embed = sincos_2d_embedding(cfg.grid(), cfg.predictor.embed_dim);
}

ParamList ModelState::trainable_params() {
  ParamList out;
  context_encoder.collect(out);
  predictor.collect(out);
  out.push_back(&mask_token);
  return out;
}

ParamList ModelState::target_params() {
  ParamList out;
  target_encoder.collect(out);
  return out;
}

ParamList ModelState::context_params() {
  ParamList out;
  context_encoder.collect(out);
  return out;
}

void ModelState::zero_grad() {
  for (Param* p : trainable_params()) p->zero_grad();
  for (Param* p : target_params()) p->zero_grad();
}

namespace {

void check_indices(const std::vector<int>& indices, int n_tokens, const char* what) {
  for (int i : indices) {
    if (i < 0 || i >= n_tokens) {
      throw ContractViolation(std::string(what) + " index " + std::to_string(i) + " out of range [0, " +
                              std::to_string(n_tokens) + ")");
    }
  }
}

}  // namespace

TokenEmbeddings encode_context(const VitEncoder& encoder, const Matrix& pos_embed, const PatchSequence& patches,
                               const std::vector<int>& context_indices) {
  if (context_indices.empty()) throw ContractViolation("context must contain at least one token");
  check_indices(context_indices, patches.size(), "context");
  if (pos_embed.rows() != patches.size()) throw ShapeError("positional table does not match the patch grid");
  const int n = int(context_indices.size());
  Matrix rows(n, patches.tokens.cols());
  Matrix pos(n, pos_embed.cols());
  gather_rows(patches.tokens, context_indices, rows, 0);
  gather_rows(pos_embed, context_indices, pos, 0);
  return {encoder.forward(rows, pos, {{0, n}}, nullptr), context_indices};
}

TokenEmbeddings encode_target(const VitEncoder& encoder, const Matrix& pos_embed, const PatchSequence& patches) {
  if (pos_embed.rows() != patches.size()) throw ShapeError("positional table does not match the patch grid");
  TokenEmbeddings out;
  out.vectors = encoder.forward(patches.tokens, pos_embed, {{0, patches.size()}}, nullptr);
  out.index_map.resize(patches.size());
  for (int i = 0; i < patches.size(); ++i) out.index_map[i] = i;
  return out;
}

TokenEmbeddings select_tokens(const TokenEmbeddings& embeddings, const std::vector<int>& indices) {
  std::unordered_map<int, int> row_of;
  for (std::size_t r = 0; r < embeddings.index_map.size(); ++r) row_of[embeddings.index_map[r]] = int(r);
  TokenEmbeddings out;
  out.vectors.resize(indices.size(), embeddings.vectors.cols());
  out.index_map = indices;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    auto it = row_of.find(indices[i]);
    if (it == row_of.end()) throw ContractViolation("token " + std::to_string(indices[i]) + " was not embedded");
    out.vectors.row(i) = embeddings.vectors.row(it->second);
  }
  return out;
}

std::vector<TokenEmbeddings> predict_targets(const Predictor& predictor, const Param& mask_token,
                                             const Matrix& predictor_pos_embed, const TokenEmbeddings& context,
                                             const std::vector<std::vector<int>>& target_groups) {
  if (context.index_map.empty()) throw ContractViolation("context must contain at least one token");
  std::vector<PredictorJob> jobs;
  for (const auto& group : target_groups) {
    if (group.empty()) throw ContractViolation("target groups must be non-empty");
    check_indices(group, int(predictor_pos_embed.rows()), "target");
    jobs.push_back({0, context.index_map, group});
  }
  const Matrix packed = predictor.forward(context.vectors, jobs, mask_token, predictor_pos_embed, nullptr);
  std::vector<TokenEmbeddings> out;
  int row = 0;
  for (const auto& group : target_groups) {
    out.push_back({packed.middleRows(row, group.size()), group});
    row += int(group.size());
  }
  return out;
}

void ema_update(const ParamList& target, const ParamList& context, double momentum) {
  if (target.size() != context.size()) throw ContractViolation("EMA parameter lists differ in length");
  if (!(momentum >= 0.0 && momentum <= 1.0)) throw ContractViolation("EMA momentum must lie in [0, 1]");
  for (std::size_t i = 0; i < target.size(); ++i) {
    Matrix& t = target[i]->value;
    const Matrix& c = context[i]->value;
    if (t.rows() != c.rows() || t.cols() != c.cols()) {
      throw ContractViolation("EMA shape mismatch at " + target[i]->name);
    }
    t = momentum * t + (1.0 - momentum) * c;
  }
}

void ema_update(VitEncoder& target, VitEncoder& context, double momentum) {
  ParamList t, c;
  target.collect(t);
  context.collect(c);
  ema_update(t, c, momentum);
}

Vector mean_rows(const Matrix& m) { return m.colwise().mean().transpose(); }

Vector pooled_embedding(const ModelState& model, const ImageTensor& image, EncoderSide side) {
  const PatchSequence patches = patchify(image, model.config.encoder.patch_size);
  const VitEncoder& enc = side == EncoderSide::target ? model.target_encoder : model.context_encoder;
  return mean_rows(encode_target(enc, model.pos_embed, patches).vectors);
}

Matrix pooled_embeddings(const ModelState& model, const std::vector<const ImageTensor*>& images, EncoderSide side,
                         int batch_size) {
  const VitEncoder& enc = side == EncoderSide::target ? model.target_encoder : model.context_encoder;
  const int n_tok = model.config.n_tokens();
  const int width = model.config.encoder.embed_dim;
  Matrix out(images.size(), width);
  batch_size = std::max(1, batch_size);
  for (std::size_t start = 0; start < images.size(); start += batch_size) {
    const int count = int(std::min<std::size_t>(batch_size, images.size() - start));
    Matrix rows(count * n_tok, enc.patch_embed.in_features());
    Matrix pos(count * n_tok, width);
    std::vector<Segment> segments;
    for (int b = 0; b < count; ++b) {
      const PatchSequence patches = patchify(*images[start + b], model.config.encoder.patch_size);
      if (patches.size() != n_tok) throw ShapeError("image grid does not match the model's patch grid");
      rows.middleRows(b * n_tok, n_tok) = patches.tokens;
      pos.middleRows(b * n_tok, n_tok) = model.pos_embed;
      segments.push_back({b * n_tok, n_tok});
    }
    const Matrix z = enc.forward(rows, pos, segments, nullptr);
    for (int b = 0; b < count; ++b) out.row(start + b) = z.middleRows(b * n_tok, n_tok).colwise().mean();
  }
  return out;
}

Matrix pooled_embeddings(const ModelState& model, const Archive& archive, EncoderSide side, int batch_size) {
  std::vector<const ImageTensor*> images;
  images.reserve(archive.size());
  for (const auto& r : archive) images.push_back(&r.image);
  return pooled_embeddings(model, images, side, batch_size);
}

}  // namespace rejepa
