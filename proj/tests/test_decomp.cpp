#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support.hpp"
#include "tfdecomp/decomp.hpp"
#include "tfdecomp/error.hpp"

namespace tfdecomp {
namespace {

using testing::random_matrix;
using testing::random_tokens;
using testing::tiny_config;

double max_abs(const Matrix& m) {
  double v = 0.0;
  for (double x : m.data()) v = std::max(v, std::fabs(x));
  return v;
}

struct Case {
  ModelConfig config;
  ModelParams params;
  ForwardTrace trace;
};

Case random_case(std::mt19937_64& rng, std::size_t layers, std::size_t dim, std::size_t heads, std::size_t n,
                 bool initial_ln = true) {
  Case c;
  c.config = tiny_config(layers, dim, heads, initial_ln);
  c.params = random_model(c.config, rng());
  const auto ids = random_tokens(n, c.config.vocab, rng);
  c.trace = forward(c.params, c.config, ids);
  return c;
}

TEST(Decompose, TermsSumToTracedRepresentationAtEveryCut) {
  std::mt19937_64 rng(1);
  for (std::size_t layers : {1u, 2u, 4u}) {
    for (std::size_t heads : {1u, 2u, 4u}) {
      for (bool initial : {true, false}) {
        const auto c = random_case(rng, layers, 16, heads, 7, initial);
        for (std::size_t cut = 0; cut <= 2 * layers; ++cut) {
          const auto report = verify(decompose_closed(c.trace, c.params, c.config, cut));
          EXPECT_TRUE(report.passed()) << "cut " << cut << " max " << report.max;
          EXPECT_LE(report.max, kTolerance64);
        }
      }
    }
  }
}

TEST(Decompose, ClosedFormMatchesRecurrence) {
  std::mt19937_64 rng(2);
  for (std::size_t layers : {1u, 2u, 3u, 4u}) {
    for (std::size_t dim : {8u, 16u}) {
      for (std::size_t heads : {2u, 4u}) {
        const auto c = random_case(rng, layers, dim, heads, 6);
        for (std::size_t cut = 0; cut <= 2 * layers; ++cut) {
          const auto a = decompose_closed(c.trace, c.params, c.config, cut);
          const auto b = decompose_recurrence(c.trace, c.params, c.config, cut);
          EXPECT_LE(max_term_difference(a, b), 1e-10) << "L=" << layers << " cut " << cut;
        }
      }
    }
  }
}

TEST(Decompose, LayerCutEqualsFullDepthOfTruncatedModel) {
  std::mt19937_64 rng(3);
  const auto c = random_case(rng, 3, 16, 2, 5);
  const std::vector<std::size_t> ids{1, 5, 9, 2, 30};
  const auto full = forward(c.params, c.config, ids);
  for (std::size_t l = 1; l <= 3; ++l) {
    auto cfg = c.config;
    cfg.layers = l;
    auto params = c.params;
    params.layers.resize(l);
    const auto truncated = forward(params, cfg, ids);
    const auto a = decompose_closed(full, c.params, c.config, layer_cut(l));
    const auto b = decompose_closed(truncated, params, cfg, 2 * l);
    EXPECT_LE(max_term_difference(a, b), 1e-12) << "layer " << l;
  }
}

TEST(Decompose, SingleLayerMatchesHandExpansion) {
  const auto cfg = tiny_config(1, 4, 1);
  const auto p = random_model(cfg, 4);
  const std::vector<std::size_t> ids{3, 8, 11};
  const auto tr = forward(p, cfg, ids);
  const auto ts = decompose_closed(tr, p, cfg, 2);
  const auto& L = p.layers[0];
  const std::size_t d = 4, n = 3;
  const auto& g0 = p.initial_ln->gain;
  const auto& b0 = p.initial_ln->bias;
  for (std::size_t t = 0; t < n; ++t) {
    const double s0 = tr.ln_std[0][t], s1 = tr.ln_std[1][t], s2 = tr.ln_std[2][t];
    const double m0 = tr.ln_mean[0][t], m1 = tr.ln_mean[1][t], m2 = tr.ln_mean[2][t];
    // Unbiased attention output and FF output, by hand.
    Vector mix(d, 0.0), vb_wo(d, 0.0), ff(d, 0.0);
    for (std::size_t u = 0; u < n; ++u) {
      for (std::size_t j = 0; j < d; ++j) {
        double v = 0.0;
        for (std::size_t k = 0; k < d; ++k) v += tr.ln_output[0](u, k) * L.value_w(k, j);
        for (std::size_t o = 0; o < d; ++o) mix[o] += tr.attention[0][0](t, u) * v * L.attn_out_w(j, o);
      }
    }
    for (std::size_t j = 0; j < d; ++j) {
      for (std::size_t o = 0; o < d; ++o) vb_wo[o] += L.value_b[j] * L.attn_out_w(j, o);
    }
    for (std::size_t h = 0; h < cfg.ff_dim; ++h) {
      double a = L.ff_in_b[h];
      for (std::size_t k = 0; k < d; ++k) a += tr.ln_output[1](t, k) * L.ff_in_w(k, h);
      const double act = 0.5 * a * (1.0 + std::erf(a / std::sqrt(2.0)));
      for (std::size_t o = 0; o < d; ++o) ff[o] += act * L.ff_out_w(h, o);
    }
    for (std::size_t k = 0; k < d; ++k) {
      const double r2 = L.ff_ln.gain[k] / s2;
      const double r1 = L.attn_ln.gain[k] / s1;
      const double r0 = g0[k] / s0;
      const double i = r2 * r1 * r0 * tr.input(t, k);
      const double h = r2 * r1 * mix[k];
      const double f = r2 * ff[k];
      const double c = r2 * r1 * (r0 * -m0 + b0[k]) + r2 * r1 * (vb_wo[k] + L.attn_out_b[k]) - r2 * r1 * m1 +
                       r2 * L.attn_ln.bias[k] + r2 * L.ff_out_b[k] - r2 * m2 + L.ff_ln.bias[k];
      EXPECT_NEAR(ts.input(t, k), i, 1e-12);
      EXPECT_NEAR(ts.attention(t, k), h, 1e-12);
      EXPECT_NEAR(ts.feedforward(t, k), f, 1e-12);
      EXPECT_NEAR(ts.bias(t, k), c, 1e-12);
    }
  }
}

TEST(Decompose, EmbeddingCutHasNoSublayerTerms) {
  std::mt19937_64 rng(5);
  const auto c = random_case(rng, 2, 8, 2, 4);
  for (const auto& ts : {decompose_closed(c.trace, c.params, c.config, 0),
                         decompose_recurrence(c.trace, c.params, c.config, 0)}) {
    EXPECT_EQ(max_abs(ts.attention), 0.0);
    EXPECT_EQ(max_abs(ts.feedforward), 0.0);
    EXPECT_TRUE(verify(ts).passed());
  }
}

TEST(Decompose, CutZeroWithoutEmbeddingNormIsRawInput) {
  std::mt19937_64 rng(6);
  const auto c = random_case(rng, 2, 8, 2, 4, false);
  const auto ts = decompose_closed(c.trace, c.params, c.config, 0);
  EXPECT_EQ(ts.input, c.trace.input);
  EXPECT_EQ(max_abs(ts.bias), 0.0);
  EXPECT_EQ(ts.reference, c.trace.input);
}

TEST(Decompose, CutBeyondDepthThrows) {
  std::mt19937_64 rng(7);
  const auto c = random_case(rng, 2, 8, 2, 3);
  EXPECT_THROW(decompose_closed(c.trace, c.params, c.config, 5), RangeError);
  EXPECT_THROW(decompose_recurrence(c.trace, c.params, c.config, 5), RangeError);
}

TEST(Decompose, ZeroFeedForwardWeightsRemoveF) {
  std::mt19937_64 rng(8);
  auto c = random_case(rng, 3, 16, 4, 6);
  for (auto& layer : c.params.layers) {
    layer.ff_in_w = Matrix(c.config.dim, c.config.ff_dim);
    layer.ff_out_w = Matrix(c.config.ff_dim, c.config.dim);
  }
  const auto trace = forward(c.params, c.config, std::vector<std::size_t>{4, 2, 7, 1, 0, 9});
  const auto ts = decompose_closed(trace, c.params, c.config, 6);
  EXPECT_EQ(max_abs(ts.feedforward), 0.0);
  EXPECT_TRUE(verify(ts).passed());
}

TEST(Decompose, ZeroValueAndOutputProjectionsRemoveH) {
  std::mt19937_64 rng(9);
  auto c = random_case(rng, 3, 16, 4, 6);
  for (auto& layer : c.params.layers) {
    layer.value_w = Matrix(c.config.dim, c.config.dim);
    layer.attn_out_w = Matrix(c.config.dim, c.config.dim);
  }
  const auto trace = forward(c.params, c.config, std::vector<std::size_t>{4, 2, 7, 1, 0, 9});
  const auto ts = decompose_closed(trace, c.params, c.config, 6);
  EXPECT_EQ(max_abs(ts.attention), 0.0);
  EXPECT_TRUE(verify(ts).passed());
}

void center_rows(Matrix& m) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(row.size());
    for (double& v : row) v -= mean;
  }
}

TEST(Decompose, BiasTermVanishesWithoutBiasesOrMeans) {
  // Centered embeddings, unit gains, zero biases and output projections whose
  // rows sum to zero keep every LayerNorm input centered.
  const auto cfg = tiny_config(2, 8, 2);
  auto p = random_model(cfg, 10);
  center_rows(p.word_emb);
  center_rows(p.pos_emb);
  center_rows(p.seg_emb);
  const Vector ones(cfg.dim, 1.0), zeros(cfg.dim, 0.0);
  p.initial_ln = LayerNormParams{ones, zeros};
  for (auto& layer : p.layers) {
    layer.query_b = layer.key_b = layer.value_b = layer.attn_out_b = layer.ff_out_b = zeros;
    layer.ff_in_b = Vector(cfg.ff_dim, 0.0);
    layer.attn_ln = layer.ff_ln = {ones, zeros};
    center_rows(layer.attn_out_w);
    center_rows(layer.ff_out_w);
  }
  const auto trace = forward(p, cfg, std::vector<std::size_t>{3, 1, 4, 1, 5});
  for (const auto& means : trace.ln_mean) {
    for (double m : means) EXPECT_LE(std::fabs(m), 1e-14);
  }
  for (std::size_t cut = 0; cut <= 4; ++cut) {
    EXPECT_LE(max_abs(decompose_closed(trace, p, cfg, cut).bias), 1e-12);
  }
}

TEST(Decompose, AttentionTermIsLinearInAttentionWeights) {
  std::mt19937_64 rng(11);
  const auto c = random_case(rng, 2, 8, 2, 5);
  auto with_alpha = [&](const std::vector<std::vector<Matrix>>& alpha) {
    auto tr = c.trace;
    tr.attention = alpha;
    return decompose_closed(tr, c.params, c.config, 4).attention;
  };
  auto random_alpha = [&] {
    auto a = c.trace.attention;
    for (auto& layer : a)
      for (auto& head : layer) head = random_matrix(5, 5, rng);
    return a;
  };
  const auto a1 = random_alpha(), a2 = random_alpha();
  const double x = 0.7, y = -1.3;
  auto mixed = a1;
  for (std::size_t l = 0; l < mixed.size(); ++l) {
    for (std::size_t h = 0; h < mixed[l].size(); ++h) {
      for (std::size_t k = 0; k < mixed[l][h].size(); ++k) {
        mixed[l][h].data()[k] = x * a1[l][h].data()[k] + y * a2[l][h].data()[k];
      }
    }
  }
  const Matrix h1 = with_alpha(a1), h2 = with_alpha(a2), h3 = with_alpha(mixed);
  for (std::size_t k = 0; k < h3.size(); ++k) {
    EXPECT_NEAR(h3.data()[k], x * h1.data()[k] + y * h2.data()[k], 1e-12);
  }
}

TEST(Decompose, WeightsRoundedToFloatStayWithinLooseTolerance) {
  std::mt19937_64 rng(12);
  auto c = random_case(rng, 2, 16, 2, 8);
  c.params.round_to_float32();
  const auto trace = forward(c.params, c.config, std::vector<std::size_t>{1, 2, 3, 4, 5, 6, 7, 8});
  const auto report = verify(decompose_closed(trace, c.params, c.config, 4), kTolerance32);
  EXPECT_TRUE(report.passed());
  EXPECT_LE(report.max, 1e-7);
}

TEST(Verify, ExactTermSetHasZeroResidual) {
  TermSet ts;
  ts.input = Matrix{{1, 2}};
  ts.attention = Matrix{{0.5, 0}};
  ts.feedforward = Matrix{{0, 0.25}};
  ts.bias = Matrix{{-1, 1}};
  ts.reference = Matrix{{0.5, 3.25}};
  const auto report = verify(ts);
  EXPECT_EQ(report.max, 0.0);
  EXPECT_TRUE(report.passed());
}

TEST(Verify, PerturbationShowsUpAtItsToken) {
  std::mt19937_64 rng(13);
  const auto c = random_case(rng, 1, 8, 2, 4);
  auto ts = decompose_closed(c.trace, c.params, c.config, 2);
  ts.feedforward(2, 3) += 1e-5;
  const auto report = verify(ts, 1e-7);
  EXPECT_NEAR(report.residuals[2], 1e-5, 1e-12);
  ASSERT_EQ(report.flagged.size(), 1u);
  EXPECT_EQ(report.flagged[0], 2u);
  EXPECT_FALSE(report.passed());
}

TEST(Verify, ZeroToleranceAlwaysFails) {
  TermSet ts;
  ts.input = ts.attention = ts.feedforward = ts.bias = ts.reference = Matrix(1, 2);
  EXPECT_FALSE(verify(ts, 0.0).passed());
}

TEST(ScaleChain, EndsInOnesAndStartsWithFullProduct) {
  std::mt19937_64 rng(14);
  const auto c = random_case(rng, 2, 8, 2, 3);
  const ScaleChain chain(c.params, c.trace, 4, 1);
  EXPECT_EQ(chain.factor(5), Vector(8, 1.0));
  const Vector f0 = chain.factor(0);
  for (std::size_t k = 0; k < 8; ++k) {
    double expected = 1.0;
    for (std::size_t lambda = 0; lambda <= 4; ++lambda) {
      expected *= c.params.ln(lambda).gain[k] / c.trace.ln_std[lambda][1];
    }
    EXPECT_NEAR(f0[k], expected, 1e-12 * std::fabs(expected));
  }
}

TEST(Hyperplane, ReconstructsBiasTerm) {
  std::mt19937_64 rng(15);
  for (bool initial : {true, false}) {
    const auto c = random_case(rng, 3, 16, 2, 9, initial);
    const auto basis = hyperplane_basis(c.params, c.config);
    const auto ts = decompose_closed(c.trace, c.params, c.config, 6);
    for (std::size_t t = 0; t < 9; ++t) {
      EXPECT_LE(max_abs_diff(reconstruct_c(basis, c.trace, t), ts.bias.row(t)), 1e-9);
    }
  }
}

TEST(Hyperplane, BiasTermsStayInsideBasisSpan) {
  std::mt19937_64 rng(16);
  for (bool initial : {true, false}) {
    const auto cfg = tiny_config(2, 32, 2, initial);
    const auto p = random_model(cfg, rng());
    const auto basis = hyperplane_basis(p, cfg);
    EXPECT_EQ(basis.size(), 2 * cfg.sublayers() + (initial ? 2u : 1u));
    Matrix cs(0, 0);
    std::vector<double> rows;
    std::size_t count = 0;
    for (int s = 0; s < 12; ++s) {
      const auto trace = forward(p, cfg, random_tokens(6, cfg.vocab, rng));
      const auto ts = decompose_closed(trace, p, cfg, cfg.sublayers());
      rows.insert(rows.end(), ts.bias.data().begin(), ts.bias.data().end());
      count += 6;
    }
    cs = Matrix(count, cfg.dim, rows);
    EXPECT_LE(numerical_rank(cs), basis.size());
    EXPECT_EQ(numerical_rank(basis.stacked()), basis.size());
    // Stacking the basis on top of the observed c vectors adds no direction.
    Matrix both(count + basis.size(), cfg.dim);
    for (std::size_t r = 0; r < count; ++r) both.set_row(r, cs.row(r));
    const Matrix b = basis.stacked();
    for (std::size_t r = 0; r < b.rows(); ++r) both.set_row(count + r, b.row(r));
    EXPECT_EQ(numerical_rank(both), numerical_rank(b));
  }
}

}  // namespace
}  // namespace tfdecomp
