#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tfdecomp/decomp.hpp"
#include "tfdecomp/probes.hpp"
#include "tfdecomp/toy.hpp"

namespace tfdecomp {

// ---------------------------------------------------------------------------
// Corpus files: one sequence per line, whitespace-separated integer ids. The
// optional segment file is parallel to it, line for line and token for token.

Corpus read_corpus(const std::filesystem::path& tokens, const std::filesystem::path& segments = {});
void write_corpus(const std::filesystem::path& tokens, const Corpus& corpus,
                  const std::filesystem::path& segments = {});

// ---------------------------------------------------------------------------
// Reports

/// Shortest decimal text that parses back to exactly `value`.
std::string format_double(double value);

/// RFC 4180 field quoting.
std::string csv_field(const std::string& text);

/// Splits one RFC 4180 record (no embedded newlines).
std::vector<std::string> parse_csv_line(const std::string& line);

class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header);

  void row(const std::vector<std::string>& fields);
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
  std::size_t columns_;
};

/// Rows of a CSV file keyed by its header.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const;
};

CsvTable read_csv(const std::filesystem::path& path);

enum class TermFormat { csv, jsonl };

TermFormat parse_term_format(const std::string& name);

/// Writes decomposition rows (sequence_id, token_index, layer_cut, term, x0..x{d-1})
/// with term in {i, h, f, c, e}; e is the traced representation.
class TermSetWriter {
 public:
  TermSetWriter(const std::filesystem::path& path, TermFormat format, std::size_t dim);

  void write(std::size_t sequence_id, const TermSet& terms);

 private:
  TermFormat format_;
  std::size_t dim_;
  std::filesystem::path path_;
  std::ofstream out_;
};

// ---------------------------------------------------------------------------
// Probe datasets as JSON lines:
//   {"sequence_id": 3, "token_span": [4, 6], "lemma": "bank", "label": "NOUN", "split": "train"}

struct ProbeRecord {
  std::size_t sequence_id = 0;
  std::array<std::size_t, 2> token_span{};  // [begin, end)
  std::string lemma;
  std::string label;
  std::string split;  // empty when the file does not assign one
};

std::vector<ProbeRecord> read_probe_records(const std::filesystem::path& path);
void write_probe_records(const std::filesystem::path& path, const std::vector<ProbeRecord>& records);

/// One integer label per line.
std::vector<int> read_labels(const std::filesystem::path& path);
void write_labels(const std::filesystem::path& path, const std::vector<int>& labels);

}  // namespace tfdecomp
