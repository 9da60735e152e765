#pragma once

#include <cstdint>
#include <vector>

#include "rejepa/data.hpp"
#include "rejepa/linalg.hpp"
#include "rejepa/masking.hpp"
#include "rejepa/nn.hpp"

namespace rejepa {

struct EncoderConfig {
  int embed_dim = 64;
  int depth = 4;
  int n_heads = 4;
  int patch_size = 8;
  double mlp_ratio = 4.0;
  int input_bands = 3;
  // LayerNorm after the last block.
  bool final_norm = true;

  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

struct PredictorConfig {
  int embed_dim = 32;
  int depth = 4;
  int n_heads = 4;
  double mlp_ratio = 4.0;

  void validate() const;
  bool operator==(const PredictorConfig&) const = default;
};

struct ModelConfig {
  EncoderConfig encoder;
  PredictorConfig predictor;
  int image_height = 32;
  int image_width = 32;

  GridShape grid() const { return {image_height / encoder.patch_size, image_width / encoder.patch_size}; }
  int n_tokens() const { return grid().size(); }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Patch projection + positional embedding followed by a pre-norm
/// transformer stack. Works on packed batches: every Segment is one image's
/// selected tokens.
class VitEncoder {
 public:
  struct Cache {
    Matrix input;
    std::vector<TransformerBlock::Cache> blocks;
    LayerNorm::Cache norm;
  };

  VitEncoder() = default;
  VitEncoder(const std::string& name, const EncoderConfig& config, Rng& rng);

  /// `patch_rows` and `pos_rows` are aligned row for row.
  Matrix forward(const Matrix& patch_rows, const Matrix& pos_rows, const std::vector<Segment>& segments,
                 Cache* cache) const;
  void backward(const Matrix& dout, const std::vector<Segment>& segments, const Cache& cache);
  void collect(ParamList& out);

  EncoderConfig config;
  Linear patch_embed;
  std::vector<TransformerBlock> blocks;
  LayerNorm norm;  // unused when config.final_norm is off
};

/// One predictor pass: the context rows [context_offset, +context_indices.size())
/// of the packed context embeddings, sitting at grid positions
/// `context_indices`, plus one mask token per entry of `target_indices`.
struct PredictorJob {
  int context_offset = 0;
  std::vector<int> context_indices;
  std::vector<int> target_indices;
};

/// Narrow transformer mapping context embeddings and positional mask tokens to
/// predicted target embeddings. Context rows enter through a d -> width
/// projection; predictions leave through a width -> d projection.
class Predictor {
 public:
  struct Cache {
    Matrix context;
    std::vector<Segment> segments;
    std::vector<int> target_rows;
    std::vector<TransformerBlock::Cache> blocks;
    LayerNorm::Cache norm;
    Matrix normed;
  };

  Predictor() = default;
  Predictor(const std::string& name, int encoder_dim, const PredictorConfig& config, Rng& rng);

  /// Returns predictions for every job's targets, concatenated job by job.
  Matrix forward(const Matrix& context, const std::vector<PredictorJob>& jobs, const Param& mask_token,
                 const Matrix& pos_embed, Cache* cache) const;
  /// Accumulates predictor and mask-token gradients; returns dL/dcontext.
  Matrix backward(const Matrix& dpred, const std::vector<PredictorJob>& jobs, Param& mask_token, const Cache& cache);
  void collect(ParamList& out);

  PredictorConfig config;
  Linear embed;
  std::vector<TransformerBlock> blocks;
  LayerNorm norm;
  Linear head;
};

/// Context encoder (trained), target encoder (EMA shadow, never receives
/// gradients), predictor, shared mask token and the fixed positional tables.
class ModelState {
 public:
  ModelState() = default;
  ModelState(const ModelConfig& config, std::uint64_t seed);

  /// Parameters updated by the optimizer: context encoder, predictor, mask token.
  ParamList trainable_params();
  ParamList target_params();
  ParamList context_params();
  void zero_grad();

  ModelConfig config;
  VitEncoder context_encoder;
  VitEncoder target_encoder;
  Predictor predictor;
  Param mask_token;
  Matrix pos_embed;            // n_tokens x encoder width
  Matrix predictor_pos_embed;  // n_tokens x predictor width
};

struct TokenEmbeddings {
  Matrix vectors;
  std::vector<int> index_map;
};

TokenEmbeddings encode_context(const VitEncoder& encoder, const Matrix& pos_embed, const PatchSequence& patches,
                               const std::vector<int>& context_indices);

/// Embeds the full token sequence; select groups with select_tokens.
TokenEmbeddings encode_target(const VitEncoder& encoder, const Matrix& pos_embed, const PatchSequence& patches);

TokenEmbeddings select_tokens(const TokenEmbeddings& embeddings, const std::vector<int>& indices);

/// One predictor pass per target group.
std::vector<TokenEmbeddings> predict_targets(const Predictor& predictor, const Param& mask_token,
                                             const Matrix& predictor_pos_embed, const TokenEmbeddings& context,
                                             const std::vector<std::vector<int>>& target_groups);

/// target <- m * target + (1 - m) * context, tensor by tensor.
void ema_update(const ParamList& target, const ParamList& context, double momentum);
void ema_update(VitEncoder& target, VitEncoder& context, double momentum);

enum class EncoderSide { context, target };

/// Mean of the full-sequence token embeddings of one image.
Vector pooled_embedding(const ModelState& model, const ImageTensor& image, EncoderSide side);

/// Pooled embeddings for many images, one row each, computed in packed batches.
Matrix pooled_embeddings(const ModelState& model, const std::vector<const ImageTensor*>& images, EncoderSide side,
                         int batch_size = 64);
Matrix pooled_embeddings(const ModelState& model, const Archive& archive, EncoderSide side, int batch_size = 64);

/// Mean over rows.
Vector mean_rows(const Matrix& m);

}  // namespace rejepa
