#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "tfdecomp/model.hpp"
#include "tfdecomp/tensor.hpp"

namespace tfdecomp {

using TokenIds = std::vector<std::size_t>;

/// Everything a post-LN forward pass computed that the decomposition needs.
///
/// LayerNorm quantities are indexed by sublayer lambda in [0, 2L]; slot 0 is
/// only populated when the model has an embedding LayerNorm. Layer-indexed
/// fields use 0-based layer numbers (layer l of the math is entry l-1).
struct ForwardTrace {
  std::size_t tokens = 0;
  std::size_t first_ln = 1;

  Matrix input;  // x_0: word + position + segment embeddings, before any LN

  std::vector<std::vector<double>> ln_mean;  // [lambda][t]
  std::vector<std::vector<double>> ln_std;   // [lambda][t]
  std::vector<Matrix> ln_output;             // [lambda], n x d

  std::vector<std::vector<Matrix>> attention;  // [layer][head], n x n
  std::vector<Matrix> mha_input;               // [layer], n x d
  std::vector<Matrix> ff_input;                // [layer], n x d

  std::size_t last_ln() const { return ln_output.size() - 1; }
  /// Final embeddings e_t (output of the last LayerNorm).
  const Matrix& embeddings() const { return ln_output.back(); }
};

/// Row t = word_emb[token t] + pos_emb[t] + seg_emb[segment t].
Matrix embed_inputs(const ModelParams& params, const ModelConfig& config, std::span<const std::size_t> token_ids,
                    std::span<const std::size_t> segment_ids);

/// Runs the encoder on one sequence; an empty segment list means all zeros.
ForwardTrace forward(const ModelParams& params, const ModelConfig& config, std::span<const std::size_t> token_ids,
                     std::span<const std::size_t> segment_ids = {});

/// FF sublayer function applied row-wise. With `with_output_bias` false this is
/// the unbiased output used by the f term.
Matrix feed_forward(const LayerParams& layer, Activation kind, const Matrix& x, bool with_output_bias = true);

/// Unbiased per-head value projections x * W_V (fused, n x d).
Matrix value_projection(const LayerParams& layer, const Matrix& x);

}  // namespace tfdecomp
