#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "tfdecomp/decomp.hpp"
#include "tfdecomp/model.hpp"
#include "tfdecomp/toy.hpp"

namespace tfdecomp {

/// Signed share of `term` in `e`: dot(e, term) / dot(e, e).
double importance(std::span<const double> e, std::span<const double> term);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
};

/// Per-layer importance statistics. Layer 0 is the output of the embedding
/// stage, where h and f are identically zero.
struct ImportanceProfile {
  std::vector<std::size_t> layers;
  std::vector<std::array<MeanStd, 4>> stats;  // [row][term], rows follow `layers`
  std::size_t tokens = 0;
};

/// Per-token importance values, keyed by (sequence, token) in corpus order.
struct TokenImportance {
  std::vector<std::size_t> layers;
  std::vector<std::size_t> sequence_ids;
  std::vector<std::size_t> token_ids;
  std::vector<std::array<std::vector<double>, 4>> values;  // [row][term][token]
};

/// Decomposes every token at the end of each requested layer (all layers
/// 0..L when empty) and averages the four importances. Sequences are processed
/// in parallel and reduced in corpus order.
ImportanceProfile importance_profile(const ModelParams& params, const ModelConfig& config, const Corpus& corpus,
                                     std::vector<std::size_t> layers = {}, TokenImportance* per_token = nullptr);

/// FF input/output pairs of one layer, one row per token.
struct FFSamples {
  Matrix inputs;
  Matrix outputs;
};

/// Runs the corpus and records the input and (biased) output of every FF.
std::vector<FFSamples> collect_ff_samples(const ModelParams& params, const ModelConfig& config, const Corpus& corpus);

struct LinearFit {
  double r2 = 0.0;                    // pooled over every output coordinate
  std::vector<double> per_coordinate;  // r^2 of each output coordinate
};

/// Ordinary least squares with intercept from column-standardized inputs to
/// column-standardized outputs, solved via ridge-regularized normal equations.
/// When the outputs carry no variance, r^2 is reported as 0.
LinearFit ff_linear_fit(const Matrix& inputs, const Matrix& outputs, double ridge = 1e-8);

/// Ranks starting at 1, ties sharing their average rank.
std::vector<double> average_ranks(std::span<const double> values);

double pearson(std::span<const double> a, std::span<const double> b);
double spearman(std::span<const double> a, std::span<const double> b);

enum class AgreementMode { micro, macro };

AgreementMode parse_agreement_mode(const std::string& name);

struct AgreementResult {
  double percent = 0.0;
  std::vector<int> skipped_classes;  // requested classes with no gold item
};

/// Share of positions where the two prediction lists agree, in percent. Macro
/// mode averages the within-class agreement over gold classes (all classes in
/// `gold` unless `classes` is given).
AgreementResult agreement(std::span<const int> a, std::span<const int> b, AgreementMode mode,
                          std::span<const int> gold = {}, std::span<const int> classes = {});

struct AgreementMatrix {
  std::vector<std::string> names;
  AgreementMode mode = AgreementMode::micro;
  Matrix values;  // percent, symmetric
};

AgreementMatrix agreement_matrix(const std::vector<std::vector<int>>& predictions, std::vector<std::string> names,
                                 AgreementMode mode, std::span<const int> gold = {});

double accuracy(std::span<const int> gold, std::span<const int> predicted);

/// Unweighted mean of per-class f1 over every class seen in gold or predictions.
double macro_f1(std::span<const int> gold, std::span<const int> predicted);

}  // namespace tfdecomp
