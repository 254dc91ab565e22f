#include "tfdecomp/toy.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "tfdecomp/error.hpp"

namespace tfdecomp {

namespace {

class Sampler {
 public:
  explicit Sampler(std::uint64_t seed) : rng_(seed) {}

  Matrix matrix(std::size_t rows, std::size_t cols, double stddev) {
    Matrix m(rows, cols);
    for (double& v : m.data()) v = stddev * normal_(rng_);
    return m;
  }

  Vector vector(std::size_t n, double stddev, double offset = 0.0) {
    Vector v(n);
    for (double& x : v) x = offset + stddev * normal_(rng_);
    return v;
  }

  std::size_t index(std::size_t bound) { return std::uniform_int_distribution<std::size_t>(0, bound - 1)(rng_); }

 private:
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

LayerNormParams random_ln(Sampler& s, std::size_t d, const ToyScales& scales) {
  return {s.vector(d, scales.gain_spread, 1.0), s.vector(d, scales.bias)};
}

}  // namespace

ModelParams random_model(const ModelConfig& config, std::uint64_t seed, const ToyScales& scales) {
  config.validate();
  Sampler s(seed);
  const std::size_t d = config.dim;
  const double proj = 1.0 / std::sqrt(static_cast<double>(d));
  const double ff_proj = 1.0 / std::sqrt(static_cast<double>(config.ff_dim));

  ModelParams params;
  params.word_emb = s.matrix(config.vocab, d, scales.embedding);
  params.pos_emb = s.matrix(config.max_pos, d, scales.embedding);
  params.seg_emb = s.matrix(config.segments, d, scales.embedding);
  if (config.initial_ln) params.initial_ln = random_ln(s, d, scales);
  params.layers.resize(config.layers);
  for (auto& layer : params.layers) {
    layer.query_w = s.matrix(d, d, proj);
    layer.key_w = s.matrix(d, d, proj);
    layer.value_w = s.matrix(d, d, proj);
    layer.query_b = s.vector(d, scales.bias);
    layer.key_b = s.vector(d, scales.bias);
    layer.value_b = s.vector(d, scales.bias);
    layer.attn_out_w = s.matrix(d, d, proj);
    layer.attn_out_b = s.vector(d, scales.bias);
    layer.attn_ln = random_ln(s, d, scales);
    layer.ff_in_w = s.matrix(d, config.ff_dim, proj);
    layer.ff_in_b = s.vector(config.ff_dim, scales.bias);
    layer.ff_out_w = s.matrix(config.ff_dim, d, ff_proj);
    layer.ff_out_b = s.vector(d, scales.bias);
    layer.ff_ln = random_ln(s, d, scales);
  }
  return params;
}

Corpus random_corpus(const ModelConfig& config, std::size_t sequences, std::size_t min_len, std::size_t max_len,
                     std::uint64_t seed) {
  if (min_len == 0 || min_len > max_len) throw ConfigError("random_corpus: need 1 <= min_len <= max_len");
  max_len = std::min(max_len, config.max_pos);
  min_len = std::min(min_len, max_len);
  Sampler s(seed);
  Corpus corpus(sequences);
  for (auto& seq : corpus) {
    const std::size_t n = min_len + s.index(max_len - min_len + 1);
    seq.tokens.resize(n);
    for (auto& id : seq.tokens) id = s.index(config.vocab);
    if (config.segments > 1 && n > 1) {
      const std::size_t split = 1 + s.index(n - 1);
      seq.segments.assign(n, 0);
      std::fill(seq.segments.begin() + static_cast<std::ptrdiff_t>(split), seq.segments.end(), 1);
    }
  }
  return corpus;
}

}  // namespace tfdecomp
