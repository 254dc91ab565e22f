#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "tfdecomp/tensor.hpp"

namespace tfdecomp {

struct ModelConfig {
  std::size_t layers = 1;
  std::size_t dim = 8;
  std::size_t heads = 1;
  std::size_t ff_dim = 16;
  std::size_t vocab = 32;
  std::size_t max_pos = 32;
  std::size_t segments = 2;
  double ln_eps = 1e-12;
  Activation activation = Activation::gelu;
  bool initial_ln = true;

  std::size_t head_dim() const { return dim / heads; }
  /// Number of MHA/FF sublayers, 2 * layers.
  std::size_t sublayers() const { return 2 * layers; }
  /// Lowest LayerNorm index present: 0 with the embedding LN, 1 otherwise.
  std::size_t first_ln() const { return initial_ln ? 0 : 1; }

  /// Throws ConfigError when the hyperparameters are inconsistent.
  void validate() const;
};

struct LayerNormParams {
  Vector gain;
  Vector bias;
};

/// One Transformer layer. Projection matrices are stored input-major
/// (d_in x d_out) so that a row vector x maps to x * W.
struct LayerParams {
  Matrix query_w, key_w, value_w;  // d x d, fused over heads
  Vector query_b, key_b, value_b;
  Matrix attn_out_w;  // d x d
  Vector attn_out_b;
  LayerNormParams attn_ln;  // sublayer 2l-1
  Matrix ff_in_w;  // d x ff_dim
  Vector ff_in_b;
  Matrix ff_out_w;  // ff_dim x d
  Vector ff_out_b;
  LayerNormParams ff_ln;  // sublayer 2l
};

struct ModelParams {
  Matrix word_emb;  // vocab x d
  Matrix pos_emb;   // max_pos x d
  Matrix seg_emb;   // segments x d
  std::optional<LayerNormParams> initial_ln;
  std::vector<LayerParams> layers;

  /// LayerNorm of sublayer lambda (0 is the embedding LN).
  const LayerNormParams& ln(std::size_t lambda) const;

  /// Throws ConfigError naming the first slot whose shape disagrees with config.
  void validate(const ModelConfig& config) const;

  /// Rounds every parameter to the nearest float (32-bit weight mode).
  void round_to_float32();
};

struct HeadWeights {
  Matrix query_w, key_w, value_w;  // d x d/H
  Vector query_b, key_b, value_b;  // d/H
};

/// Per-head view of layer `layer` (1-based): head h owns columns
/// [h*d/H, (h+1)*d/H) of each fused projection.
std::vector<HeadWeights> split_heads(const ModelParams& params, const ModelConfig& config,
                                     std::size_t layer);

}  // namespace tfdecomp
