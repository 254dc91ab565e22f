#include "tfdecomp/encoder.hpp"

#include <cmath>
#include <string>

#include "tfdecomp/error.hpp"
#include "tfdecomp/kernels.hpp"

namespace tfdecomp {

namespace {

void add_bias_rows(Matrix& m, const Vector& bias) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bias[c];
  }
}

void check_finite(const Matrix& m, std::size_t lambda, const char* what) {
  if (!m.all_finite()) {
    throw NumericError("non-finite value in " + std::string(what) + " of sublayer " + std::to_string(lambda));
  }
}

// Applies LN `lambda` to every row of u and records its statistics.
Matrix layer_norm(const Matrix& u, const LayerNormParams& ln, double eps, std::size_t lambda, ForwardTrace& trace) {
  check_finite(u, lambda, "LayerNorm input");
  Matrix out(u.rows(), u.cols());
  auto& means = trace.ln_mean[lambda];
  auto& stds = trace.ln_std[lambda];
  means.resize(u.rows());
  stds.resize(u.rows());
  for (std::size_t t = 0; t < u.rows(); ++t) {
    const auto stats = ln_stats(u.row(t), eps);
    means[t] = stats.mean;
    stds[t] = stats.std;
    auto src = u.row(t);
    auto dst = out.row(t);
    for (std::size_t c = 0; c < src.size(); ++c) dst[c] = ln.gain[c] * ((src[c] - stats.mean) / stats.std) + ln.bias[c];
  }
  check_finite(out, lambda, "LayerNorm output");
  return out;
}

Matrix linear(const Matrix& x, const Matrix& w, const Vector& b) {
  Matrix y = matmul(x, w);
  add_bias_rows(y, b);
  return y;
}

}  // namespace

Matrix embed_inputs(const ModelParams& params, const ModelConfig& config, std::span<const std::size_t> token_ids,
                    std::span<const std::size_t> segment_ids) {
  const std::size_t n = token_ids.size();
  if (!segment_ids.empty() && segment_ids.size() != n) {
    throw ShapeError("embed_inputs: " + std::to_string(n) + " tokens but " + std::to_string(segment_ids.size()) +
                     " segment ids");
  }
  if (n > config.max_pos) {
    throw IndexError("embed_inputs: sequence length " + std::to_string(n) + " exceeds max_pos " +
                     std::to_string(config.max_pos));
  }
  Matrix x(n, config.dim);
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t id = token_ids[t];
    const std::size_t seg = segment_ids.empty() ? 0 : segment_ids[t];
    if (id >= config.vocab) {
      throw IndexError("embed_inputs: token id " + std::to_string(id) + " at position " + std::to_string(t) +
                       " outside vocabulary of " + std::to_string(config.vocab));
    }
    if (seg >= config.segments) {
      throw IndexError("embed_inputs: segment id " + std::to_string(seg) + " at position " + std::to_string(t) +
                       " outside " + std::to_string(config.segments) + " segments");
    }
    auto dst = x.row(t);
    auto w = params.word_emb.row(id);
    auto p = params.pos_emb.row(t);
    auto s = params.seg_emb.row(seg);
    for (std::size_t c = 0; c < config.dim; ++c) dst[c] = w[c] + p[c] + s[c];
  }
  return x;
}

Matrix feed_forward(const LayerParams& layer, Activation kind, const Matrix& x, bool with_output_bias) {
  Matrix hidden = linear(x, layer.ff_in_w, layer.ff_in_b);
  for (double& v : hidden.data()) v = activate(v, kind);
  Matrix y = matmul(hidden, layer.ff_out_w);
  if (with_output_bias) add_bias_rows(y, layer.ff_out_b);
  return y;
}

Matrix value_projection(const LayerParams& layer, const Matrix& x) { return matmul(x, layer.value_w); }

ForwardTrace forward(const ModelParams& params, const ModelConfig& config, std::span<const std::size_t> token_ids,
                     std::span<const std::size_t> segment_ids) {
  if (params.layers.size() != config.layers) {
    throw ConfigError("forward: model has " + std::to_string(params.layers.size()) + " layers, config says " +
                      std::to_string(config.layers));
  }
  if (token_ids.empty()) throw ShapeError("forward: empty sequence");

  ForwardTrace trace;
  const std::size_t n = token_ids.size();
  const std::size_t d = config.dim;
  const std::size_t width = config.head_dim();
  const std::size_t last = config.sublayers();
  trace.tokens = n;
  trace.first_ln = config.first_ln();
  trace.ln_mean.resize(last + 1);
  trace.ln_std.resize(last + 1);
  trace.ln_output.resize(last + 1);
  trace.attention.resize(config.layers);
  trace.mha_input.resize(config.layers);
  trace.ff_input.resize(config.layers);

  trace.input = embed_inputs(params, config, token_ids, segment_ids);
  Matrix x = trace.input;
  if (config.initial_ln) {
    if (!params.initial_ln) throw ConfigError("forward: config enables initial_ln but the model has none");
    x = layer_norm(x, *params.initial_ln, config.ln_eps, 0, trace);
  }
  // Without an embedding LN the representation at cut 0 is x_0 itself.
  trace.ln_output[0] = x;

  const double scale = 1.0 / std::sqrt(static_cast<double>(width));
  for (std::size_t l = 0; l < config.layers; ++l) {
    const auto& p = params.layers[l];
    const std::size_t mha_lambda = 2 * l + 1;
    const std::size_t ff_lambda = 2 * l + 2;

    trace.mha_input[l] = x;
    const Matrix q = linear(x, p.query_w, p.query_b);
    const Matrix k = linear(x, p.key_w, p.key_b);
    const Matrix v = linear(x, p.value_w, p.value_b);
    Matrix heads_out(n, d);
    trace.attention[l].resize(config.heads);
    for (std::size_t h = 0; h < config.heads; ++h) {
      const std::size_t begin = h * width;
      Matrix scores(n, n);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          double acc = 0.0;
          for (std::size_t c = begin; c < begin + width; ++c) acc += q(i, c) * k(j, c);
          scores(i, j) = acc * scale;
        }
      }
      check_finite(scores, mha_lambda, "attention scores");
      Matrix alpha = softmax_rows(scores);
      Matrix head;
      kernels::weighted_rows(alpha, v.col_slice(begin, begin + width), head);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < width; ++c) heads_out(i, begin + c) = head(i, c);
      trace.attention[l][h] = std::move(alpha);
    }
    Matrix u = linear(heads_out, p.attn_out_w, p.attn_out_b);
    for (std::size_t i = 0; i < u.size(); ++i) u.data()[i] += x.data()[i];
    x = layer_norm(u, p.attn_ln, config.ln_eps, mha_lambda, trace);
    trace.ln_output[mha_lambda] = x;

    trace.ff_input[l] = x;
    u = feed_forward(p, config.activation, x);
    check_finite(u, ff_lambda, "feed-forward output");
    for (std::size_t i = 0; i < u.size(); ++i) u.data()[i] += x.data()[i];
    x = layer_norm(u, p.ff_ln, config.ln_eps, ff_lambda, trace);
    trace.ln_output[ff_lambda] = x;
  }
  return trace;
}

}  // namespace tfdecomp
