#include "tfdecomp/probes.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <numeric>
#include <random>

#include "tfdecomp/analysis.hpp"
#include "tfdecomp/error.hpp"

namespace tfdecomp {

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val" || name == "validation" || name == "dev") return Split::val;
  if (name == "test") return Split::test;
  throw ConfigError("unknown split '" + name + "'");
}

std::vector<Split> assign_splits(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(n)));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n))));
  std::vector<Split> splits(n, Split::test);
  for (std::size_t k = 0; k < n; ++k) {
    splits[order[k]] = k < n_train ? Split::train : (k < n_train + n_val ? Split::val : Split::test);
  }
  return splits;
}

TermSelector TermSelector::parse(const std::string& spec) {
  TermSelector sel;
  if (spec == "e") {
    sel.embedding = true;
    return sel;
  }
  for (char ch : spec) {
    const auto it = std::find_if(std::begin(kAllTerms), std::end(kAllTerms), [ch](Term t) { return term_letter(t) == ch; });
    if (it == std::end(kAllTerms)) throw ConfigError("term selector '" + spec + "': unknown term '" + ch + "'");
    sel.use[static_cast<std::size_t>(it - std::begin(kAllTerms))] = true;
  }
  if (std::none_of(sel.use.begin(), sel.use.end(), [](bool b) { return b; })) {
    throw ConfigError("term selector is empty");
  }
  return sel;
}

std::vector<TermSelector> TermSelector::all_subsets() {
  std::vector<TermSelector> out;
  for (unsigned mask = 1; mask < 16; ++mask) {
    TermSelector sel;
    for (std::size_t k = 0; k < 4; ++k) sel.use[k] = (mask >> k) & 1u;
    out.push_back(sel);
  }
  return out;
}

std::string TermSelector::name() const {
  if (embedding) return "e";
  std::string s;
  for (std::size_t k = 0; k < 4; ++k)
    if (use[k]) s += term_letter(kAllTerms[k]);
  return s;
}

Vector ProbeItem::feature(const TermSelector& selector) const {
  if (selector.embedding) return embedding;
  Vector f(terms[0].size(), 0.0);
  for (std::size_t k = 0; k < 4; ++k) {
    if (!selector.use[k]) continue;
    for (std::size_t c = 0; c < f.size(); ++c) f[c] += terms[k][c];
  }
  return f;
}

std::vector<std::size_t> ProbeDataset::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < items.size(); ++i)
    if (items[i].split == split) out.push_back(i);
  return out;
}

Vector wordpiece_pool(std::span<const Vector> pieces) {
  if (pieces.empty()) throw ShapeError("wordpiece_pool: no pieces");
  Vector out(pieces.front().size(), 0.0);
  for (const auto& p : pieces) {
    if (p.size() != out.size()) throw ShapeError("wordpiece_pool: pieces of different widths");
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += p[c];
  }
  return out;
}

ProbeItem make_probe_item(const TermSet& terms, std::size_t begin, std::size_t end, int label, int group) {
  if (begin >= end || end > terms.reference.rows()) {
    throw IndexError("token span [" + std::to_string(begin) + ", " + std::to_string(end) + ") outside a sequence of " +
                     std::to_string(terms.reference.rows()) + " tokens");
  }
  auto pool = [&](const Matrix& m) {
    std::vector<Vector> pieces;
    for (std::size_t t = begin; t < end; ++t) pieces.push_back(m.row_vector(t));
    return wordpiece_pool(pieces);
  };
  ProbeItem item;
  for (std::size_t k = 0; k < 4; ++k) item.terms[k] = pool(terms.term(kAllTerms[k]));
  item.embedding = pool(terms.reference);
  item.label = label;
  item.group = group;
  return item;
}

CorruptedCorpus mlm_corrupt(const Corpus& corpus, const MlmOptions& options, std::uint64_t seed) {
  if (corpus.empty()) throw ShapeError("mlm_corrupt: empty corpus");
  if (options.vocab < 2) {
    throw ConfigError("mlm_corrupt: vocabulary of " + std::to_string(options.vocab) +
                      " cannot supply random replacements");
  }
  if (options.mask_id >= options.vocab) throw ConfigError("mlm_corrupt: mask id outside the vocabulary");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> other(0, options.vocab - 2);

  CorruptedCorpus out;
  out.corpus = corpus;
  for (std::size_t s = 0; s < corpus.size(); ++s) {
    auto& tokens = out.corpus[s].tokens;
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      if (!(unit(rng) < options.select_rate)) continue;
      MlmTarget target{s, t, tokens[t], Corruption::keep};
      const double u = unit(rng);
      if (u < options.mask_share) {
        target.kind = Corruption::mask;
        tokens[t] = options.mask_id;
      } else if (u < options.mask_share + options.random_share) {
        target.kind = Corruption::random;
        // Uniform over the vocabulary minus the original id.
        const std::size_t r = other(rng);
        tokens[t] = r >= target.original ? r + 1 : r;
      }
      out.targets.push_back(target);
    }
  }
  return out;
}

KnnBank::KnnBank(std::vector<BankEntry> entries) {
  for (auto& e : entries) {
    const double norm = std::sqrt(dot(e.vector, e.vector));
    if (norm == 0.0) {
      warnings_.push_back("knn bank: skipping zero-norm vector with label " + std::to_string(e.label) + " in group " +
                          std::to_string(e.group));
      continue;
    }
    norms_.push_back(norm);
    entries_.push_back(std::move(e));
  }
}

bool KnnBank::covers(int group) const {
  return std::any_of(entries_.begin(), entries_.end(), [group](const BankEntry& e) { return e.group == group; });
}

int KnnBank::predict(std::span<const double> query, std::size_t k, int group) const {
  const double qnorm = std::sqrt(dot(query, query));
  if (qnorm == 0.0) throw DegenerateInputError("knn: query vector has zero norm");
  if (k == 0) throw ConfigError("knn: k must be positive");

  std::vector<std::pair<double, std::size_t>> candidates;  // (distance, entry)
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].group != group) continue;
    const double cosine = dot(query, entries_[i].vector) / (qnorm * norms_[i]);
    candidates.emplace_back(1.0 - cosine, i);
  }
  if (candidates.empty()) throw CoverageError("knn: no bank entry for group " + std::to_string(group));

  const std::size_t take = std::min(k, candidates.size());
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take), candidates.end());

  std::map<int, std::pair<std::size_t, double>> votes;  // label -> (count, distance sum)
  for (std::size_t j = 0; j < take; ++j) {
    auto& v = votes[entries_[candidates[j].second].label];
    ++v.first;
    v.second += candidates[j].first;
  }
  int best = votes.begin()->first;
  std::size_t best_count = 0;
  double best_mean = 0.0;
  for (const auto& [label, v] : votes) {  // ascending label order
    const double mean = v.second / static_cast<double>(v.first);
    if (v.first > best_count || (v.first == best_count && mean < best_mean)) {
      best = label;
      best_count = v.first;
      best_mean = mean;
    }
  }
  return best;
}

int knn_predict(std::span<const double> query, const std::vector<BankEntry>& bank, std::size_t k, int group) {
  return KnnBank(bank).predict(query, k, group);
}

int LinearProbe::predict(std::span<const double> feature) const {
  const Vector scores = vecmat(feature, weights);
  std::size_t best = 0;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (scores[j] + bias[j] > scores[best] + bias[best]) best = j;
  }
  return classes[best];
}

LinearProbe LinearProbe::tied(const Matrix& word_emb) {
  LinearProbe probe;
  probe.weights = word_emb.transposed();
  probe.bias.assign(word_emb.rows(), 0.0);
  probe.classes.resize(word_emb.rows());
  std::iota(probe.classes.begin(), probe.classes.end(), 0);
  return probe;
}

Metric parse_metric(const std::string& name) {
  if (name == "accuracy" || name == "acc") return Metric::accuracy;
  if (name == "macro-f1" || name == "macro_f1" || name == "f1") return Metric::macro_f1;
  throw ConfigError("unknown metric '" + name + "' (expected accuracy or macro-f1)");
}

LinearProbe train_linear_probe(const ProbeDataset& dataset, const TermSelector& selector,
                               const ProbeOptions& options) {
  const auto train = dataset.indices(Split::train);
  if (train.empty()) throw ShapeError("train_linear_probe: empty train split");

  LinearProbe probe;
  probe.options = options;
  for (std::size_t i : train) probe.classes.push_back(dataset.items[i].label);
  std::sort(probe.classes.begin(), probe.classes.end());
  probe.classes.erase(std::unique(probe.classes.begin(), probe.classes.end()), probe.classes.end());
  if (probe.classes.size() < 2) throw DegenerateInputError("train_linear_probe: train split has a single label");

  std::map<int, std::size_t> column;
  for (std::size_t j = 0; j < probe.classes.size(); ++j) column[probe.classes[j]] = j;

  std::vector<Vector> features;
  features.reserve(train.size());
  for (std::size_t i : train) features.push_back(dataset.items[i].feature(selector));
  const std::size_t d = features.front().size();
  const std::size_t k = probe.classes.size();

  probe.weights = Matrix(d, k);
  probe.bias.assign(k, 0.0);
  // Adam moments for weights then bias, flattened.
  std::vector<double> m1(d * k + k, 0.0), m2(d * k + k, 0.0), grad(d * k + k);

  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t step = 0;
  Vector prob(k);

  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      const std::size_t stop = std::min(order.size(), start + options.batch_size);
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t b = start; b < stop; ++b) {
        const Vector& x = features[order[b]];
        const std::size_t y = column[dataset.items[train[order[b]]].label];
        const Vector scores = vecmat(x, probe.weights);
        double hi = -INFINITY;
        for (std::size_t j = 0; j < k; ++j) {
          prob[j] = scores[j] + probe.bias[j];
          hi = std::max(hi, prob[j]);
        }
        double total = 0.0;
        for (double& p : prob) total += (p = std::exp(p - hi));
        for (std::size_t j = 0; j < k; ++j) {
          const double g = prob[j] / total - (j == y ? 1.0 : 0.0);
          for (std::size_t c = 0; c < d; ++c) grad[c * k + j] += g * x[c];
          grad[d * k + j] += g;
        }
      }
      const double inv = 1.0 / static_cast<double>(stop - start);
      ++step;
      const double corr1 = 1.0 - std::pow(options.beta1, static_cast<double>(step));
      const double corr2 = 1.0 - std::pow(options.beta2, static_cast<double>(step));
      for (std::size_t p = 0; p < grad.size(); ++p) {
        const double g = grad[p] * inv;
        m1[p] = options.beta1 * m1[p] + (1.0 - options.beta1) * g;
        m2[p] = options.beta2 * m2[p] + (1.0 - options.beta2) * g * g;
        double& w = p < d * k ? probe.weights.data()[p] : probe.bias[p - d * k];
        w -= options.learning_rate * options.weight_decay * w;
        w -= options.learning_rate * (m1[p] / corr1) / (std::sqrt(m2[p] / corr2) + options.adam_eps);
      }
    }
  }
  if (!probe.weights.all_finite() || !all_finite(probe.bias)) {
    throw NumericError("train_linear_probe: weights diverged");
  }
  return probe;
}

double evaluate(const LinearProbe& probe, const ProbeDataset& dataset, const TermSelector& selector, Split split,
                Metric metric) {
  std::vector<int> gold, predicted;
  for (std::size_t i : dataset.indices(split)) {
    gold.push_back(dataset.items[i].label);
    predicted.push_back(probe.predict(dataset.items[i].feature(selector)));
  }
  if (gold.empty()) throw ShapeError("evaluate: split '" + to_string(split) + "' is empty");
  return metric == Metric::accuracy ? accuracy(gold, predicted) : macro_f1(gold, predicted);
}

namespace {

// Most frequent label; ties go to the lower label id.
int mode_of(const std::map<int, std::size_t>& counts) {
  int best = counts.begin()->first;
  std::size_t best_count = 0;
  for (const auto& [label, count] : counts) {
    if (count > best_count) {
      best = label;
      best_count = count;
    }
  }
  return best;
}

}  // namespace

std::vector<int> most_frequent_predictions(const ProbeDataset& dataset, Split split) {
  std::map<int, std::map<int, std::size_t>> per_group;
  std::map<int, std::size_t> global;
  for (std::size_t i : dataset.indices(Split::train)) {
    const auto& item = dataset.items[i];
    ++per_group[item.group][item.label];
    ++global[item.label];
  }
  if (global.empty()) throw ShapeError("most_frequent_baseline: empty train split");
  const int fallback = mode_of(global);

  std::vector<int> predicted;
  for (std::size_t i : dataset.indices(split)) {
    const auto it = per_group.find(dataset.items[i].group);
    predicted.push_back(it == per_group.end() ? fallback : mode_of(it->second));
  }
  return predicted;
}

double most_frequent_baseline(const ProbeDataset& dataset, Metric metric) {
  const auto predicted = most_frequent_predictions(dataset, Split::test);
  std::vector<int> gold;
  for (std::size_t i : dataset.indices(Split::test)) gold.push_back(dataset.items[i].label);
  if (gold.empty()) throw ShapeError("most_frequent_baseline: empty test split");
  return metric == Metric::accuracy ? accuracy(gold, predicted) : macro_f1(gold, predicted);
}

ProbeDataset drop_monosemous(const ProbeDataset& dataset) {
  std::map<int, std::set<int>> labels;
  for (const auto& item : dataset.items) labels[item.group].insert(item.label);
  ProbeDataset out;
  out.seed = dataset.seed;
  for (const auto& item : dataset.items) {
    if (labels[item.group].size() > 1) out.items.push_back(item);
  }
  return out;
}

}  // namespace tfdecomp
