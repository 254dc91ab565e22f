#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tfdecomp/decomp.hpp"
#include "tfdecomp/toy.hpp"

namespace tfdecomp {

// ---------------------------------------------------------------------------
// Datasets

enum class Split { train, val, test };

std::string to_string(Split split);
Split parse_split(const std::string& name);

/// Seeded 80/10/10 train/val/test assignment of n items.
std::vector<Split> assign_splits(std::size_t n, std::uint64_t seed);

/// Which terms are summed into a probe feature. `embedding` selects the
/// traced representation e itself instead of any term sum.
struct TermSelector {
  std::array<bool, 4> use{};  // indexed like kAllTerms: i, h, f, c
  bool embedding = false;

  /// Parses "ihfc"-style letter sets, or "e" for the embedding.
  static TermSelector parse(const std::string& spec);
  /// The 15 nonempty subsets of {i, h, f, c}.
  static std::vector<TermSelector> all_subsets();
  std::string name() const;
};

struct ProbeItem {
  std::array<Vector, 4> terms;  // i, h, f, c (already pooled over word-pieces)
  Vector embedding;
  int label = 0;
  int group = -1;  // lemma id; -1 when the task has no groups
  Split split = Split::train;

  Vector feature(const TermSelector& selector) const;
};

struct ProbeDataset {
  std::vector<ProbeItem> items;
  std::uint64_t seed = 0;

  std::vector<std::size_t> indices(Split split) const;
};

/// Item for the word covering tokens [begin, end) of a decomposed sequence.
ProbeItem make_probe_item(const TermSet& terms, std::size_t begin, std::size_t end, int label, int group = -1);

/// Elementwise sum of the vectors of a word's pieces.
Vector wordpiece_pool(std::span<const Vector> pieces);

// ---------------------------------------------------------------------------
// MLM corruption

enum class Corruption { mask, random, keep };

struct MlmOptions {
  std::size_t mask_id = 0;
  std::size_t vocab = 0;
  double select_rate = 0.15;
  double mask_share = 0.8;
  double random_share = 0.1;
};

struct MlmTarget {
  std::size_t sequence = 0;
  std::size_t position = 0;
  std::size_t original = 0;
  Corruption kind = Corruption::keep;
};

struct CorruptedCorpus {
  Corpus corpus;
  std::vector<MlmTarget> targets;
};

/// Selects tokens at `select_rate`; selected tokens are masked, replaced by a
/// different random id, or kept, with the configured shares.
CorruptedCorpus mlm_corrupt(const Corpus& corpus, const MlmOptions& options, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Nearest neighbours

struct BankEntry {
  Vector vector;
  int label = 0;
  int group = 0;
};

/// Labelled vectors searched by cosine distance within a group.
class KnnBank {
 public:
  explicit KnnBank(std::vector<BankEntry> entries);

  /// Plurality label of the min(k, available) nearest entries of `group`.
  /// Ties go to the label with the smaller mean distance, then the lower id.
  int predict(std::span<const double> query, std::size_t k, int group) const;

  bool covers(int group) const;
  /// Warnings raised while building the bank (zero-norm entries are skipped).
  const std::vector<std::string>& warnings() const { return warnings_; }

 private:
  std::vector<BankEntry> entries_;
  std::vector<double> norms_;
  std::vector<std::string> warnings_;
};

int knn_predict(std::span<const double> query, const std::vector<BankEntry>& bank, std::size_t k, int group);

// ---------------------------------------------------------------------------
// Linear probes

struct ProbeOptions {
  double learning_rate = 1e-3;
  std::size_t epochs = 20;
  double weight_decay = 1e-2;
  std::size_t batch_size = 64;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
};

/// Multinomial logistic regression: scores = x W + b, one column per class.
struct LinearProbe {
  Matrix weights;  // d x classes
  Vector bias;
  std::vector<int> classes;  // label id of each column
  ProbeOptions options;

  int predict(std::span<const double> feature) const;

  /// Fixed head scoring every vocabulary entry by dot product with its
  /// (tied) input embedding.
  static LinearProbe tied(const Matrix& word_emb);
};

enum class Metric { accuracy, macro_f1 };

Metric parse_metric(const std::string& name);

/// Trains on the train split with AdamW (decoupled weight decay).
LinearProbe train_linear_probe(const ProbeDataset& dataset, const TermSelector& selector,
                               const ProbeOptions& options = {});

double evaluate(const LinearProbe& probe, const ProbeDataset& dataset, const TermSelector& selector, Split split,
                Metric metric);

/// Predicts each group's most frequent train label (global mode for unseen
/// groups) and scores it on the test split.
double most_frequent_baseline(const ProbeDataset& dataset, Metric metric = Metric::accuracy);

/// The baseline's prediction for every item of `split`, in index order.
std::vector<int> most_frequent_predictions(const ProbeDataset& dataset, Split split);

/// Keeps only items whose group carries at least two distinct labels.
ProbeDataset drop_monosemous(const ProbeDataset& dataset);

}  // namespace tfdecomp
