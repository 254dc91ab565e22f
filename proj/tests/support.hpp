#pragma once

// Shared fixtures for the unit tests, plus a deliberately plain forward pass
// used as an independent oracle for the engine.

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "tfdecomp/encoder.hpp"
#include "tfdecomp/model.hpp"
#include "tfdecomp/toy.hpp"

namespace tfdecomp::testing {

inline ModelConfig tiny_config(std::size_t layers, std::size_t dim, std::size_t heads, bool initial_ln = true,
                               Activation act = Activation::gelu) {
  ModelConfig c;
  c.layers = layers;
  c.dim = dim;
  c.heads = heads;
  c.ff_dim = 2 * dim;
  c.vocab = 40;
  c.max_pos = 24;
  c.segments = 2;
  c.initial_ln = initial_ln;
  c.activation = act;
  return c;
}

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (double& v : m.data()) v = n(rng);
  return m;
}

inline std::vector<std::size_t> random_tokens(std::size_t n, std::size_t vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> u(0, vocab - 1);
  std::vector<std::size_t> ids(n);
  for (auto& t : ids) t = u(rng);
  return ids;
}

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("tfdecomp_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

// ---------------------------------------------------------------------------
// Reference forward pass: scalar loops, explicit per-head attention, no
// shared code with the engine beyond the parameter structs.

namespace detail {

inline std::vector<double> ref_layer_norm(const std::vector<double>& u, const LayerNormParams& ln, double eps) {
  const double n = static_cast<double>(u.size());
  double mean = 0.0;
  for (double v : u) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : u) var += (v - mean) * (v - mean);
  var /= n;
  const double s = std::sqrt(var + eps);
  std::vector<double> out(u.size());
  for (std::size_t k = 0; k < u.size(); ++k) out[k] = ln.gain[k] * (u[k] - mean) / s + ln.bias[k];
  return out;
}

inline double ref_act(double x, Activation a) {
  switch (a) {
    case Activation::relu: return x > 0 ? x : 0.0;
    case Activation::gelu: return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
    case Activation::identity: return x;
  }
  return x;
}

}  // namespace detail

/// Embeddings after the last LayerNorm, one row per token.
inline std::vector<std::vector<double>> reference_forward(const ModelParams& p, const ModelConfig& c,
                                                          const std::vector<std::size_t>& tokens,
                                                          const std::vector<std::size_t>& segments = {}) {
  const std::size_t n = tokens.size(), d = c.dim, H = c.heads, dh = d / H;
  std::vector<std::vector<double>> x(n, std::vector<double>(d));
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t seg = segments.empty() ? 0 : segments[t];
    for (std::size_t k = 0; k < d; ++k) x[t][k] = p.word_emb(tokens[t], k) + p.pos_emb(t, k) + p.seg_emb(seg, k);
    if (p.initial_ln) x[t] = detail::ref_layer_norm(x[t], *p.initial_ln, c.ln_eps);
  }
  for (const auto& layer : p.layers) {
    // attention
    std::vector<std::vector<double>> concat(n, std::vector<double>(d, 0.0));
    for (std::size_t h = 0; h < H; ++h) {
      std::vector<std::vector<double>> q(n, std::vector<double>(dh)), kk(n, std::vector<double>(dh)),
          v(n, std::vector<double>(dh));
      for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t j = 0; j < dh; ++j) {
          const std::size_t col = h * dh + j;
          double sq = layer.query_b[col], sk = layer.key_b[col], sv = layer.value_b[col];
          for (std::size_t k = 0; k < d; ++k) {
            sq += x[t][k] * layer.query_w(k, col);
            sk += x[t][k] * layer.key_w(k, col);
            sv += x[t][k] * layer.value_w(k, col);
          }
          q[t][j] = sq;
          kk[t][j] = sk;
          v[t][j] = sv;
        }
      }
      for (std::size_t t = 0; t < n; ++t) {
        std::vector<double> score(n);
        double mx = -INFINITY;
        for (std::size_t u = 0; u < n; ++u) {
          double s = 0.0;
          for (std::size_t j = 0; j < dh; ++j) s += q[t][j] * kk[u][j];
          score[u] = s / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, score[u]);
        }
        double z = 0.0;
        for (double& s : score) z += (s = std::exp(s - mx));
        for (std::size_t u = 0; u < n; ++u) {
          for (std::size_t j = 0; j < dh; ++j) concat[t][h * dh + j] += score[u] / z * v[u][j];
        }
      }
    }
    for (std::size_t t = 0; t < n; ++t) {
      std::vector<double> u(d);
      for (std::size_t j = 0; j < d; ++j) {
        double s = layer.attn_out_b[j];
        for (std::size_t k = 0; k < d; ++k) s += concat[t][k] * layer.attn_out_w(k, j);
        u[j] = x[t][j] + s;
      }
      x[t] = detail::ref_layer_norm(u, layer.attn_ln, c.ln_eps);
    }
    // feed-forward
    for (std::size_t t = 0; t < n; ++t) {
      std::vector<double> hidden(c.ff_dim);
      for (std::size_t j = 0; j < c.ff_dim; ++j) {
        double s = layer.ff_in_b[j];
        for (std::size_t k = 0; k < d; ++k) s += x[t][k] * layer.ff_in_w(k, j);
        hidden[j] = detail::ref_act(s, c.activation);
      }
      std::vector<double> u(d);
      for (std::size_t j = 0; j < d; ++j) {
        double s = layer.ff_out_b[j];
        for (std::size_t k = 0; k < c.ff_dim; ++k) s += hidden[k] * layer.ff_out_w(k, j);
        u[j] = x[t][j] + s;
      }
      x[t] = detail::ref_layer_norm(u, layer.ff_ln, c.ln_eps);
    }
  }
  return x;
}

}  // namespace tfdecomp::testing
