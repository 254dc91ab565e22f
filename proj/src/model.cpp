#include "tfdecomp/model.hpp"

#include <string>

#include "tfdecomp/error.hpp"

namespace tfdecomp {

namespace {

void expect_shape(const Matrix& m, std::size_t rows, std::size_t cols, const std::string& name) {
  if (m.rows() != rows || m.cols() != cols) {
    throw ConfigError("parameter " + name + " has shape " + m.shape_string() + ", expected " +
                      std::to_string(rows) + "x" + std::to_string(cols));
  }
  if (!m.all_finite()) throw ConfigError("parameter " + name + " contains non-finite values");
}

void expect_size(const Vector& v, std::size_t n, const std::string& name) {
  if (v.size() != n) {
    throw ConfigError("parameter " + name + " has " + std::to_string(v.size()) + " components, expected " +
                      std::to_string(n));
  }
  if (!all_finite(v)) throw ConfigError("parameter " + name + " contains non-finite values");
}

void round_all(std::vector<double>& values) {
  for (double& v : values) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace

void ModelConfig::validate() const {
  if (layers == 0) throw ConfigError("config: layers must be positive");
  if (dim < 2) throw ConfigError("config: dim must be at least 2");
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("config: dim " + std::to_string(dim) + " is not divisible by heads " + std::to_string(heads));
  }
  if (ff_dim == 0) throw ConfigError("config: ff_dim must be positive");
  if (vocab == 0 || max_pos == 0 || segments == 0) {
    throw ConfigError("config: vocab, max_pos and segments must be positive");
  }
  if (!(ln_eps > 0.0)) throw ConfigError("config: ln_eps must be positive");
}

const LayerNormParams& ModelParams::ln(std::size_t lambda) const {
  if (lambda == 0) {
    if (!initial_ln) throw IndexError("model has no embedding LayerNorm (sublayer 0)");
    return *initial_ln;
  }
  const std::size_t layer = (lambda - 1) / 2;
  if (layer >= layers.size()) {
    throw IndexError("sublayer " + std::to_string(lambda) + " beyond " + std::to_string(2 * layers.size()));
  }
  return lambda % 2 == 1 ? layers[layer].attn_ln : layers[layer].ff_ln;
}

void ModelParams::validate(const ModelConfig& config) const {
  config.validate();
  const std::size_t d = config.dim;
  expect_shape(word_emb, config.vocab, d, "word_emb");
  expect_shape(pos_emb, config.max_pos, d, "pos_emb");
  expect_shape(seg_emb, config.segments, d, "seg_emb");
  if (config.initial_ln != initial_ln.has_value()) {
    throw ConfigError(config.initial_ln ? "parameter initial_ln missing" : "parameter initial_ln present but disabled");
  }
  if (initial_ln) {
    expect_size(initial_ln->gain, d, "initial_ln.gain");
    expect_size(initial_ln->bias, d, "initial_ln.bias");
  }
  if (layers.size() != config.layers) {
    throw ConfigError("model has " + std::to_string(layers.size()) + " layers, config says " +
                      std::to_string(config.layers));
  }
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& p = layers[l];
    const std::string prefix = "layer" + std::to_string(l) + ".";
    expect_shape(p.query_w, d, d, prefix + "query_w");
    expect_shape(p.key_w, d, d, prefix + "key_w");
    expect_shape(p.value_w, d, d, prefix + "value_w");
    expect_size(p.query_b, d, prefix + "query_b");
    expect_size(p.key_b, d, prefix + "key_b");
    expect_size(p.value_b, d, prefix + "value_b");
    expect_shape(p.attn_out_w, d, d, prefix + "attn_out_w");
    expect_size(p.attn_out_b, d, prefix + "attn_out_b");
    expect_size(p.attn_ln.gain, d, prefix + "attn_ln.gain");
    expect_size(p.attn_ln.bias, d, prefix + "attn_ln.bias");
    expect_shape(p.ff_in_w, d, config.ff_dim, prefix + "ff_in_w");
    expect_size(p.ff_in_b, config.ff_dim, prefix + "ff_in_b");
    expect_shape(p.ff_out_w, config.ff_dim, d, prefix + "ff_out_w");
    expect_size(p.ff_out_b, d, prefix + "ff_out_b");
    expect_size(p.ff_ln.gain, d, prefix + "ff_ln.gain");
    expect_size(p.ff_ln.bias, d, prefix + "ff_ln.bias");
  }
}

void ModelParams::round_to_float32() {
  round_all(word_emb.data());
  round_all(pos_emb.data());
  round_all(seg_emb.data());
  if (initial_ln) {
    round_all(initial_ln->gain);
    round_all(initial_ln->bias);
  }
  for (auto& p : layers) {
    for (Matrix* m : {&p.query_w, &p.key_w, &p.value_w, &p.attn_out_w, &p.ff_in_w, &p.ff_out_w})
      round_all(m->data());
    for (Vector* v : {&p.query_b, &p.key_b, &p.value_b, &p.attn_out_b, &p.attn_ln.gain, &p.attn_ln.bias,
                      &p.ff_in_b, &p.ff_out_b, &p.ff_ln.gain, &p.ff_ln.bias})
      round_all(*v);
  }
}

std::vector<HeadWeights> split_heads(const ModelParams& params, const ModelConfig& config, std::size_t layer) {
  if (layer < 1 || layer > params.layers.size()) {
    throw IndexError("split_heads: layer " + std::to_string(layer) + " outside [1, " +
                     std::to_string(params.layers.size()) + "]");
  }
  const auto& p = params.layers[layer - 1];
  const std::size_t width = config.head_dim();
  std::vector<HeadWeights> heads(config.heads);
  for (std::size_t h = 0; h < config.heads; ++h) {
    const std::size_t begin = h * width;
    const std::size_t end = begin + width;
    auto& hw = heads[h];
    hw.query_w = p.query_w.col_slice(begin, end);
    hw.key_w = p.key_w.col_slice(begin, end);
    hw.value_w = p.value_w.col_slice(begin, end);
    hw.query_b.assign(p.query_b.begin() + begin, p.query_b.begin() + end);
    hw.key_b.assign(p.key_b.begin() + begin, p.key_b.begin() + end);
    hw.value_b.assign(p.value_b.begin() + begin, p.value_b.begin() + end);
  }
  return heads;
}

}  // namespace tfdecomp
