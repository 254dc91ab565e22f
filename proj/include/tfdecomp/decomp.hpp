#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "tfdecomp/encoder.hpp"
#include "tfdecomp/model.hpp"
#include "tfdecomp/tensor.hpp"

namespace tfdecomp {

/// Residual tolerance for checkpoints stored with 32-bit weights.
inline constexpr double kTolerance32 = 1e-7;
/// Residual tolerance when weights are full 64-bit.
inline constexpr double kTolerance64 = 1e-10;

enum class Term { input, attention, feedforward, bias };

inline constexpr Term kAllTerms[] = {Term::input, Term::attention, Term::feedforward, Term::bias};

/// One-letter name used in exports: i, h, f, c.
char term_letter(Term term);

/// The four additive terms of every token representation at one sublayer cut.
///
/// Row t of each matrix belongs to token t. `reference` is what the encoder
/// actually produced at the cut (the LN output of sublayer `cut`).
struct TermSet {
  std::size_t cut = 0;
  Matrix input;
  Matrix attention;
  Matrix feedforward;
  Matrix bias;
  Matrix reference;

  const Matrix& term(Term t) const;
  Matrix& term(Term t);
  /// i + h + f + c for token t.
  Vector sum(std::size_t token) const;
};

/// Composed effect of LayerNorms from..cut on token t:
/// (gain_from * ... * gain_cut) / (s_from * ... * s_cut), elementwise.
class ScaleChain {
 public:
  ScaleChain(const ModelParams& params, const ForwardTrace& trace, std::size_t cut, std::size_t token);

  std::size_t first() const { return first_; }
  std::size_t cut() const { return cut_; }

  /// Diagonal of the chain starting at LN `from`; from = cut + 1 is all ones.
  Vector factor(std::size_t from) const;
  /// out += chain(from) * v
  void accumulate(std::size_t from, std::span<const double> v, std::span<double> out) const;
  /// out -= chain(from) * scalar (a constant vector pushed through the chain)
  void accumulate_constant(std::size_t from, double scalar, std::span<double> out) const;

 private:
  std::size_t first_;
  std::size_t cut_;
  std::vector<Vector> gains_;  // [from - first], running elementwise product of gains
  std::vector<double> stds_;   // [from - first], running product of std devs
};

/// Closed-form decomposition at LN `cut` (0 .. 2L).
TermSet decompose_closed(const ForwardTrace& trace, const ModelParams& params, const ModelConfig& config,
                         std::size_t cut);

/// Same decomposition obtained by pushing four accumulators through every
/// sublayer in turn. Attention contributions go through materialized per-head
/// W_V M_h W_O products, independently of the closed form's column slicing.
TermSet decompose_recurrence(const ForwardTrace& trace, const ModelParams& params, const ModelConfig& config,
                             std::size_t cut);

struct ResidualReport {
  double tolerance = kTolerance64;
  std::vector<double> residuals;   // per token, ||sum of terms - reference||_inf
  std::vector<std::size_t> flagged;  // tokens whose residual is not below tolerance
  double max = 0.0;
  double mean = 0.0;

  bool passed() const { return flagged.empty(); }
};

/// A token passes when its residual is strictly below `tolerance`.
ResidualReport verify(const TermSet& terms, double tolerance = kTolerance64);

/// Largest elementwise difference between matching terms of two term sets.
double max_term_difference(const TermSet& a, const TermSet& b);

/// Constant vectors spanning every bias term c_t of a model (full-depth cut).
///
/// c_t = sum_lambda coef_p(lambda, t) p_lambda + coef_q(lambda, t) q_lambda with
///   p_lambda = G(lambda+1) * (ln_bias_lambda + sublayer_bias_{lambda+1}),  coef_p = 1 / prod_{l > lambda} s_l
///   q_lambda = G(lambda),                                                  coef_q = -m_lambda / prod_{l >= lambda} s_l
/// where G(k) is the elementwise product of gains k..2L and sublayer_bias is the
/// MHA bias (b_O + b_V W_O) or FF output bias entering before LN k.
struct HyperplaneBasis {
  std::size_t first_ln = 1;
  std::size_t last_ln = 0;
  std::vector<Vector> p;  // [lambda], lambda in 0..last_ln
  std::vector<Vector> q;  // [lambda], empty below first_ln

  std::size_t size() const;
  /// All basis vectors as rows (p first, then q).
  Matrix stacked() const;
  /// Coefficients in the row order of stacked().
  std::vector<double> coefficients(const ForwardTrace& trace, std::size_t token) const;
};

HyperplaneBasis hyperplane_basis(const ModelParams& params, const ModelConfig& config);

Vector reconstruct_c(const HyperplaneBasis& basis, const ForwardTrace& trace, std::size_t token);

/// Cut index of the end of layer `layer` (0 .. L): layer 0 is the embedding LN.
inline std::size_t layer_cut(std::size_t layer) { return 2 * layer; }

}  // namespace tfdecomp
