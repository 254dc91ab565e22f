#include "tfdecomp/decomp.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "tfdecomp/error.hpp"
#include "tfdecomp/kernels.hpp"

namespace tfdecomp {

namespace {

void check_cut(const ForwardTrace& trace, std::size_t cut) {
  if (trace.ln_output.empty() || cut > trace.last_ln()) {
    throw RangeError("cut " + std::to_string(cut) + " beyond traced depth " +
                     std::to_string(trace.ln_output.empty() ? 0 : trace.last_ln()));
  }
}

TermSet empty_termset(const ForwardTrace& trace, std::size_t cut, std::size_t d) {
  TermSet ts;
  ts.cut = cut;
  ts.input = Matrix(trace.tokens, d);
  ts.attention = Matrix(trace.tokens, d);
  ts.feedforward = Matrix(trace.tokens, d);
  ts.bias = Matrix(trace.tokens, d);
  ts.reference = trace.ln_output[cut];
  return ts;
}

// b_O + (concat_h b_V,h) W_O: everything the MHA of `layer` adds regardless of its input.
Vector attention_bias(const LayerParams& layer) {
  Vector b = vecmat(layer.value_b, layer.attn_out_w);
  for (std::size_t c = 0; c < b.size(); ++c) b[c] += layer.attn_out_b[c];
  return b;
}

// Bias injected right before LN `lambda` by its sublayer function (zero for lambda 0).
Vector sublayer_bias(const ModelParams& params, std::size_t lambda, std::size_t d) {
  if (lambda == 0) return Vector(d, 0.0);
  const auto& layer = params.layers[(lambda - 1) / 2];
  return lambda % 2 == 1 ? attention_bias(layer) : layer.ff_out_b;
}

void add_to(std::span<double> dst, std::span<const double> src) {
  for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
}

}  // namespace

char term_letter(Term term) {
  switch (term) {
    case Term::input: return 'i';
    case Term::attention: return 'h';
    case Term::feedforward: return 'f';
    case Term::bias: return 'c';
  }
  return '?';
}

const Matrix& TermSet::term(Term t) const {
  switch (t) {
    case Term::input: return input;
    case Term::attention: return attention;
    case Term::feedforward: return feedforward;
    case Term::bias: return bias;
  }
  return bias;
}

Matrix& TermSet::term(Term t) { return const_cast<Matrix&>(std::as_const(*this).term(t)); }

Vector TermSet::sum(std::size_t token) const {
  Vector s = input.row_vector(token);
  add_to(s, attention.row(token));
  add_to(s, feedforward.row(token));
  add_to(s, bias.row(token));
  return s;
}

ScaleChain::ScaleChain(const ModelParams& params, const ForwardTrace& trace, std::size_t cut, std::size_t token)
    : first_(std::min(trace.first_ln, cut + 1)), cut_(cut) {
  check_cut(trace, cut);
  if (token >= trace.tokens) throw IndexError("ScaleChain: token " + std::to_string(token) + " out of range");
  const std::size_t d = trace.input.cols();
  const std::size_t count = cut + 2 - first_;
  gains_.assign(count, Vector(d, 1.0));
  stds_.assign(count, 1.0);
  // Top-down running products: entry k covers LNs (first + k) .. cut.
  for (std::size_t lambda = cut + 1; lambda-- > first_;) {
    const std::size_t k = lambda - first_;
    const auto& gain = params.ln(lambda).gain;
    for (std::size_t c = 0; c < d; ++c) gains_[k][c] = gains_[k + 1][c] * gain[c];
    stds_[k] = stds_[k + 1] * trace.ln_std[lambda][token];
  }
}

Vector ScaleChain::factor(std::size_t from) const {
  if (from < first_ || from > cut_ + 1) {
    throw RangeError("ScaleChain: start " + std::to_string(from) + " outside [" + std::to_string(first_) + ", " +
                     std::to_string(cut_ + 1) + "]");
  }
  Vector f = gains_[from - first_];
  for (double& v : f) v /= stds_[from - first_];
  return f;
}

void ScaleChain::accumulate(std::size_t from, std::span<const double> v, std::span<double> out) const {
  const auto& g = gains_.at(from - first_);
  const double s = stds_[from - first_];
  for (std::size_t c = 0; c < out.size(); ++c) out[c] += g[c] / s * v[c];
}

void ScaleChain::accumulate_constant(std::size_t from, double scalar, std::span<double> out) const {
  const auto& g = gains_.at(from - first_);
  const double s = stds_[from - first_];
  for (std::size_t c = 0; c < out.size(); ++c) out[c] -= g[c] / s * scalar;
}

TermSet decompose_closed(const ForwardTrace& trace, const ModelParams& params, const ModelConfig& config,
                         std::size_t cut) {
  check_cut(trace, cut);
  const std::size_t d = config.dim;
  const std::size_t width = config.head_dim();
  const std::size_t n = trace.tokens;
  // Layers whose MHA (resp. FF) sublayer lies at or below the cut.
  const std::size_t mha_layers = (cut + 1) / 2;
  const std::size_t ff_layers = cut / 2;

  std::vector<Matrix> values(mha_layers);
  std::vector<Vector> mha_bias(mha_layers);
  for (std::size_t l = 0; l < mha_layers; ++l) {
    values[l] = value_projection(params.layers[l], trace.mha_input[l]);
    mha_bias[l] = attention_bias(params.layers[l]);
  }
  std::vector<Matrix> ff_out(ff_layers);
  for (std::size_t l = 0; l < ff_layers; ++l) {
    ff_out[l] = feed_forward(params.layers[l], config.activation, trace.ff_input[l], false);
  }

  TermSet ts = empty_termset(trace, cut, d);

#pragma omp parallel for schedule(static) num_threads(thread_count())
  for (std::size_t t = 0; t < n; ++t) {
    const ScaleChain chain(params, trace, cut, t);
    chain.accumulate(chain.first(), trace.input.row(t), ts.input.row(t));

    Vector concat(d);
    for (std::size_t l = 0; l < mha_layers; ++l) {
      // Head h writes its weighted value sum into its own column slice; this is M_h.
      std::fill(concat.begin(), concat.end(), 0.0);
      for (std::size_t h = 0; h < config.heads; ++h) {
        const Matrix& alpha = trace.attention[l][h];
        for (std::size_t src = 0; src < n; ++src) {
          const double a = alpha(t, src);
          auto v = values[l].row(src);
          for (std::size_t c = h * width; c < (h + 1) * width; ++c) concat[c] += a * v[c];
        }
      }
      const Vector mixed = vecmat(concat, params.layers[l].attn_out_w);
      chain.accumulate(2 * l + 1, mixed, ts.attention.row(t));
      chain.accumulate(2 * l + 1, mha_bias[l], ts.bias.row(t));
    }
    for (std::size_t l = 0; l < ff_layers; ++l) {
      chain.accumulate(2 * l + 2, ff_out[l].row(t), ts.feedforward.row(t));
      chain.accumulate(2 * l + 2, params.layers[l].ff_out_b, ts.bias.row(t));
    }
    for (std::size_t lambda = trace.first_ln; lambda <= cut; ++lambda) {
      chain.accumulate(lambda + 1, params.ln(lambda).bias, ts.bias.row(t));
      chain.accumulate_constant(lambda, trace.ln_mean[lambda][t], ts.bias.row(t));
    }
  }
  return ts;
}

TermSet decompose_recurrence(const ForwardTrace& trace, const ModelParams& params, const ModelConfig& config,
                             std::size_t cut) {
  check_cut(trace, cut);
  const std::size_t d = config.dim;
  const std::size_t width = config.head_dim();
  const std::size_t n = trace.tokens;

  TermSet ts = empty_termset(trace, cut, d);
  ts.input = trace.input;

  for (std::size_t lambda = trace.first_ln; lambda <= cut; ++lambda) {
    if (lambda > 0) {
      const std::size_t l = (lambda - 1) / 2;
      const auto& layer = params.layers[l];
      if (lambda % 2 == 1) {
        // Z_{l,h} = W_V,h M_h W_O materialized as a d x d matrix per head.
        const auto heads = split_heads(params, config, l + 1);
        Vector bias = layer.attn_out_b;
        for (std::size_t h = 0; h < config.heads; ++h) {
          Matrix out_rows(width, d);
          for (std::size_t r = 0; r < width; ++r) out_rows.set_row(r, layer.attn_out_w.row(h * width + r));
          const Matrix z = matmul(heads[h].value_w, out_rows);
          const Matrix projected = matmul(trace.mha_input[l], z);
          Matrix mixed;
          reference::weighted_rows(trace.attention[l][h], projected, mixed);
          for (std::size_t i = 0; i < mixed.size(); ++i) ts.attention.data()[i] += mixed.data()[i];
          add_to(bias, vecmat(heads[h].value_b, out_rows));
        }
        for (std::size_t t = 0; t < n; ++t) add_to(ts.bias.row(t), bias);
      } else {
        const Matrix ff = feed_forward(layer, config.activation, trace.ff_input[l], false);
        for (std::size_t i = 0; i < ff.size(); ++i) ts.feedforward.data()[i] += ff.data()[i];
        for (std::size_t t = 0; t < n; ++t) add_to(ts.bias.row(t), layer.ff_out_b);
      }
    }
    // LayerNorm: shift by the mean (lands in c), rescale everything, add the LN bias.
    const auto& ln = params.ln(lambda);
    for (std::size_t t = 0; t < n; ++t) {
      const double m = trace.ln_mean[lambda][t];
      const double s = trace.ln_std[lambda][t];
      for (std::size_t c = 0; c < d; ++c) {
        const double scale = ln.gain[c] / s;
        ts.input(t, c) *= scale;
        ts.attention(t, c) *= scale;
        ts.feedforward(t, c) *= scale;
        ts.bias(t, c) = (ts.bias(t, c) - m) * scale + ln.bias[c];
      }
    }
  }
  return ts;
}

ResidualReport verify(const TermSet& terms, double tolerance) {
  ResidualReport report;
  report.tolerance = tolerance;
  const std::size_t n = terms.reference.rows();
  report.residuals.resize(n);
  double total = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    const double r = max_abs_diff(terms.sum(t), terms.reference.row(t));
    report.residuals[t] = r;
    report.max = std::max(report.max, r);
    total += r;
    if (!(r < tolerance)) report.flagged.push_back(t);
  }
  report.mean = n == 0 ? 0.0 : total / static_cast<double>(n);
  return report;
}

double max_term_difference(const TermSet& a, const TermSet& b) {
  double worst = 0.0;
  for (Term t : kAllTerms) worst = std::max(worst, max_abs_diff(a.term(t).data(), b.term(t).data()));
  return std::max(worst, max_abs_diff(a.reference.data(), b.reference.data()));
}

std::size_t HyperplaneBasis::size() const {
  std::size_t count = 0;
  for (const auto& v : p) count += v.empty() ? 0 : 1;
  for (const auto& v : q) count += v.empty() ? 0 : 1;
  return count;
}

Matrix HyperplaneBasis::stacked() const {
  const std::size_t d = p.empty() ? 0 : p.back().size();
  Matrix out(size(), d);
  std::size_t r = 0;
  for (const auto& v : p)
    if (!v.empty()) out.set_row(r++, v);
  for (const auto& v : q)
    if (!v.empty()) out.set_row(r++, v);
  return out;
}

std::vector<double> HyperplaneBasis::coefficients(const ForwardTrace& trace, std::size_t token) const {
  if (trace.last_ln() != last_ln || trace.first_ln != first_ln) {
    throw ShapeError("HyperplaneBasis: trace depth does not match the basis");
  }
  // inv_tail[k] = 1 / prod_{lambda >= k} s_lambda, for k in 0..last+1.
  std::vector<double> inv_tail(last_ln + 2, 1.0);
  for (std::size_t k = last_ln + 1; k-- > 0;) {
    const double s = k >= first_ln ? trace.ln_std[k][token] : 1.0;
    inv_tail[k] = inv_tail[k + 1] / s;
  }
  std::vector<double> coef;
  for (std::size_t lambda = 0; lambda < p.size(); ++lambda)
    if (!p[lambda].empty()) coef.push_back(inv_tail[lambda + 1]);
  for (std::size_t lambda = 0; lambda < q.size(); ++lambda)
    if (!q[lambda].empty()) coef.push_back(-trace.ln_mean[lambda][token] * inv_tail[lambda]);
  return coef;
}

HyperplaneBasis hyperplane_basis(const ModelParams& params, const ModelConfig& config) {
  HyperplaneBasis basis;
  const std::size_t d = config.dim;
  basis.first_ln = config.first_ln();
  basis.last_ln = config.sublayers();
  const std::size_t last = basis.last_ln;

  // gain_tail[k] = gain_k * ... * gain_last (ones for k = last + 1).
  std::vector<Vector> gain_tail(last + 2, Vector(d, 1.0));
  for (std::size_t k = last + 1; k-- > basis.first_ln;) {
    const auto& g = params.ln(k).gain;
    for (std::size_t c = 0; c < d; ++c) gain_tail[k][c] = gain_tail[k + 1][c] * g[c];
  }

  basis.p.resize(last + 1);
  basis.q.resize(last + 1);
  for (std::size_t lambda = 0; lambda <= last; ++lambda) {
    Vector offset = lambda >= basis.first_ln ? params.ln(lambda).bias : Vector(d, 0.0);
    if (lambda < last) add_to(offset, sublayer_bias(params, lambda + 1, d));
    Vector& pv = basis.p[lambda];
    pv.resize(d);
    for (std::size_t c = 0; c < d; ++c) pv[c] = gain_tail[lambda + 1][c] * offset[c];
    if (lambda >= basis.first_ln) basis.q[lambda] = gain_tail[lambda];
  }
  return basis;
}

Vector reconstruct_c(const HyperplaneBasis& basis, const ForwardTrace& trace, std::size_t token) {
  const Matrix rows = basis.stacked();
  const auto coef = basis.coefficients(trace, token);
  Vector c(rows.cols(), 0.0);
  for (std::size_t r = 0; r < rows.rows(); ++r) {
    auto v = rows.row(r);
    for (std::size_t k = 0; k < c.size(); ++k) c[k] += coef[r] * v[k];
  }
  return c;
}

}  // namespace tfdecomp
