#include "tfdecomp/analysis.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "tfdecomp/error.hpp"
#include "tfdecomp/kernels.hpp"

namespace tfdecomp {

namespace {

struct Moments {
  double sum = 0.0;
  double sum_sq = 0.0;
};

using EigenMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Column z-scoring; constant columns are centred and left unscaled.
EigenMatrix standardize(const Matrix& m) {
  EigenMatrix out = Eigen::Map<const EigenMatrix>(m.data().data(), static_cast<Eigen::Index>(m.rows()),
                                                  static_cast<Eigen::Index>(m.cols()));
  const double n = static_cast<double>(m.rows());
  for (Eigen::Index c = 0; c < out.cols(); ++c) {
    if (out.col(c).maxCoeff() == out.col(c).minCoeff()) {
      out.col(c).setZero();
      continue;
    }
    const double mean = out.col(c).sum() / n;
    out.col(c).array() -= mean;
    const double sd = std::sqrt(out.col(c).squaredNorm() / n);
    if (sd > 0.0) out.col(c) /= sd;
  }
  return out;
}

}  // namespace

double importance(std::span<const double> e, std::span<const double> term) {
  const double norm_sq = dot(e, e);
  if (norm_sq == 0.0) throw DegenerateInputError("importance: reference embedding has zero norm");
  return dot(e, term) / norm_sq;
}

ImportanceProfile importance_profile(const ModelParams& params, const ModelConfig& config, const Corpus& corpus,
                                     std::vector<std::size_t> layers, TokenImportance* per_token) {
  if (corpus.empty()) throw ShapeError("importance_profile: empty corpus");
  if (layers.empty()) {
    layers.resize(config.layers + 1);
    std::iota(layers.begin(), layers.end(), std::size_t{0});
  }
  for (std::size_t l : layers) {
    if (l > config.layers) {
      throw RangeError("importance_profile: layer " + std::to_string(l) + " beyond " + std::to_string(config.layers));
    }
  }

  // values[seq][row][term][token]
  std::vector<std::vector<std::array<std::vector<double>, 4>>> values(corpus.size());
  std::vector<std::string> errors(corpus.size());

#pragma omp parallel for schedule(dynamic) num_threads(thread_count())
  for (std::size_t s = 0; s < corpus.size(); ++s) {
    try {
      const auto trace = forward(params, config, corpus[s].tokens, corpus[s].segments);
      auto& rows = values[s];
      rows.resize(layers.size());
      for (std::size_t r = 0; r < layers.size(); ++r) {
        const TermSet ts = decompose_closed(trace, params, config, layer_cut(layers[r]));
        for (std::size_t k = 0; k < 4; ++k) {
          const Matrix& term = ts.term(kAllTerms[k]);
          rows[r][k].resize(trace.tokens);
          for (std::size_t t = 0; t < trace.tokens; ++t) rows[r][k][t] = importance(ts.reference.row(t), term.row(t));
        }
      }
    } catch (const std::exception& e) {
      errors[s] = "sequence " + std::to_string(s) + ": " + e.what();
    }
  }
  for (const auto& e : errors)
    if (!e.empty()) throw Error("importance_profile: " + e);

  ImportanceProfile profile;
  profile.layers = layers;
  profile.stats.resize(layers.size());
  if (per_token) {
    per_token->layers = layers;
    per_token->sequence_ids.clear();
    per_token->token_ids.clear();
    per_token->values.assign(layers.size(), {});
  }
  std::vector<std::array<Moments, 4>> moments(layers.size());
  for (std::size_t s = 0; s < corpus.size(); ++s) {
    const std::size_t n = values[s].front()[0].size();
    profile.tokens += n;
    if (per_token) {
      for (std::size_t t = 0; t < n; ++t) {
        per_token->sequence_ids.push_back(s);
        per_token->token_ids.push_back(t);
      }
    }
    for (std::size_t r = 0; r < layers.size(); ++r) {
      for (std::size_t k = 0; k < 4; ++k) {
        for (double v : values[s][r][k]) moments[r][k].sum += v;
        if (per_token) {
          auto& dst = per_token->values[r][k];
          dst.insert(dst.end(), values[s][r][k].begin(), values[s][r][k].end());
        }
      }
    }
  }
  const double count = static_cast<double>(profile.tokens);
  for (std::size_t r = 0; r < layers.size(); ++r) {
    for (std::size_t k = 0; k < 4; ++k) {
      const double mean = moments[r][k].sum / count;
      for (std::size_t s = 0; s < corpus.size(); ++s)
        for (double v : values[s][r][k]) moments[r][k].sum_sq += (v - mean) * (v - mean);
      profile.stats[r][k] = {mean, std::sqrt(moments[r][k].sum_sq / count)};
    }
  }
  return profile;
}

std::vector<FFSamples> collect_ff_samples(const ModelParams& params, const ModelConfig& config, const Corpus& corpus) {
  std::vector<std::vector<double>> inputs(config.layers), outputs(config.layers);
  std::size_t rows = 0;
  for (const auto& seq : corpus) {
    const auto trace = forward(params, config, seq.tokens, seq.segments);
    rows += trace.tokens;
    for (std::size_t l = 0; l < config.layers; ++l) {
      const Matrix y = feed_forward(params.layers[l], config.activation, trace.ff_input[l]);
      const auto& x = trace.ff_input[l].data();
      inputs[l].insert(inputs[l].end(), x.begin(), x.end());
      outputs[l].insert(outputs[l].end(), y.data().begin(), y.data().end());
    }
  }
  std::vector<FFSamples> samples(config.layers);
  for (std::size_t l = 0; l < config.layers; ++l) {
    samples[l].inputs = Matrix(rows, config.dim, std::move(inputs[l]));
    samples[l].outputs = Matrix(rows, config.dim, std::move(outputs[l]));
  }
  return samples;
}

LinearFit ff_linear_fit(const Matrix& inputs, const Matrix& outputs, double ridge) {
  if (inputs.rows() != outputs.rows()) {
    throw ShapeError("ff_linear_fit: " + inputs.shape_string() + " inputs vs " + outputs.shape_string() + " outputs");
  }
  const std::size_t n = inputs.rows();
  const std::size_t p = inputs.cols();
  if (n < p + 1) {
    throw InsufficientSamplesError("ff_linear_fit: " + std::to_string(n) + " samples for " + std::to_string(p) +
                                   " inputs (need at least " + std::to_string(p + 1) + ")");
  }
  const EigenMatrix x = standardize(inputs);
  const EigenMatrix y = standardize(outputs);

  // Design matrix with an intercept column; the intercept is not penalized.
  Eigen::MatrixXd design(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p + 1));
  design.leftCols(static_cast<Eigen::Index>(p)) = x;
  design.col(static_cast<Eigen::Index>(p)).setOnes();
  Eigen::MatrixXd gram = design.transpose() * design;
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(p); ++i) gram(i, i) += ridge;
  const Eigen::MatrixXd coef = gram.ldlt().solve(design.transpose() * y);
  const Eigen::MatrixXd residual = y - design * coef;

  LinearFit fit;
  fit.per_coordinate.resize(outputs.cols());
  double ss_res = 0.0, ss_tot = 0.0;
  for (Eigen::Index c = 0; c < y.cols(); ++c) {
    const double res = residual.col(c).squaredNorm();
    const double tot = (y.col(c).array() - y.col(c).mean()).square().sum();
    ss_res += res;
    ss_tot += tot;
    fit.per_coordinate[static_cast<std::size_t>(c)] = tot > 0.0 ? 1.0 - res / tot : 0.0;
  }
  fit.r2 = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 0.0;
  return fit;
}

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
    i = j + 1;
  }
  return ranks;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError("pearson: lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  if (a.size() < 2) throw DegenerateInputError("pearson: need at least two values");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw DegenerateInputError("correlation undefined: zero variance");
  return sab / std::sqrt(saa * sbb);
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError("spearman: lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  return pearson(ra, rb);
}

AgreementMode parse_agreement_mode(const std::string& name) {
  if (name == "micro") return AgreementMode::micro;
  if (name == "macro") return AgreementMode::macro;
  throw ConfigError("unknown agreement mode '" + name + "' (expected micro or macro)");
}

AgreementResult agreement(std::span<const int> a, std::span<const int> b, AgreementMode mode,
                          std::span<const int> gold, std::span<const int> classes) {
  if (a.size() != b.size()) {
    throw ShapeError("agreement: prediction lists of length " + std::to_string(a.size()) + " and " +
                     std::to_string(b.size()));
  }
  AgreementResult result;
  if (mode == AgreementMode::micro) {
    if (a.empty()) throw DegenerateInputError("agreement: empty prediction lists");
    std::size_t same = 0;
    for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == b[i] ? 1 : 0;
    result.percent = 100.0 * static_cast<double>(same) / static_cast<double>(a.size());
    return result;
  }
  if (gold.size() != a.size()) {
    throw ShapeError("agreement: macro mode needs " + std::to_string(a.size()) + " gold labels, got " +
                     std::to_string(gold.size()));
  }
  std::map<int, std::pair<std::size_t, std::size_t>> per_class;  // class -> (agree, total)
  for (int c : classes) per_class[c];
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!classes.empty() && !per_class.contains(gold[i])) continue;
    auto& [same, total] = per_class[gold[i]];
    same += a[i] == b[i] ? 1 : 0;
    ++total;
  }
  double sum = 0.0;
  std::size_t used = 0;
  for (const auto& [label, counts] : per_class) {
    if (counts.second == 0) {
      result.skipped_classes.push_back(label);
      continue;
    }
    sum += static_cast<double>(counts.first) / static_cast<double>(counts.second);
    ++used;
  }
  if (used == 0) throw DegenerateInputError("agreement: no class has gold items");
  result.percent = 100.0 * sum / static_cast<double>(used);
  return result;
}

AgreementMatrix agreement_matrix(const std::vector<std::vector<int>>& predictions, std::vector<std::string> names,
                                 AgreementMode mode, std::span<const int> gold) {
  if (names.size() != predictions.size()) throw ShapeError("agreement_matrix: one name per prediction list required");
  AgreementMatrix m;
  m.names = std::move(names);
  m.mode = mode;
  m.values = Matrix(predictions.size(), predictions.size());
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    for (std::size_t j = i; j < predictions.size(); ++j) {
      const double v = agreement(predictions[i], predictions[j], mode, gold).percent;
      m.values(i, j) = v;
      m.values(j, i) = v;
    }
  }
  return m;
}

double accuracy(std::span<const int> gold, std::span<const int> predicted) {
  if (gold.size() != predicted.size()) throw ShapeError("accuracy: gold and prediction lengths differ");
  if (gold.empty()) throw DegenerateInputError("accuracy: no items");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) hits += gold[i] == predicted[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(gold.size());
}

double macro_f1(std::span<const int> gold, std::span<const int> predicted) {
  if (gold.size() != predicted.size()) throw ShapeError("macro_f1: gold and prediction lengths differ");
  if (gold.empty()) throw DegenerateInputError("macro_f1: no items");
  std::map<int, std::array<std::size_t, 3>> counts;  // tp, fp, fn
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i] == predicted[i]) {
      ++counts[gold[i]][0];
    } else {
      ++counts[predicted[i]][1];
      ++counts[gold[i]][2];
    }
  }
  double sum = 0.0;
  for (const auto& [label, c] : counts) {
    sum += 2.0 * static_cast<double>(c[0]) / static_cast<double>(2 * c[0] + c[1] + c[2]);
  }
  return sum / static_cast<double>(counts.size());
}

}  // namespace tfdecomp
