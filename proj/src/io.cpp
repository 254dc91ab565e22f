#include "tfdecomp/io.hpp"

#include <charconv>
#include <sstream>

#include <json.hpp>

#include "tfdecomp/error.hpp"

namespace tfdecomp {

namespace {

using json = nlohmann::json;

std::string at_line(const std::filesystem::path& path, std::size_t line) {
  return path.string() + ":" + std::to_string(line);
}

std::vector<std::size_t> parse_ids(const std::string& text, const std::filesystem::path& path, std::size_t line) {
  std::vector<std::size_t> ids;
  std::istringstream in(text);
  std::string word;
  while (in >> word) {
    std::size_t v = 0;
    const auto [ptr, ec] = std::from_chars(word.data(), word.data() + word.size(), v);
    if (ec != std::errc() || ptr != word.data() + word.size()) {
      throw LoadError(at_line(path, line) + ": '" + word + "' is not a non-negative integer id");
    }
    ids.push_back(v);
  }
  return ids;
}

std::ifstream open_input(const std::filesystem::path& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw LoadError(std::string("cannot open ") + what + " " + path.string());
  return in;
}

std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  return out;
}

std::string join_ids(const std::vector<std::size_t>& ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) s += (i ? " " : "") + std::to_string(ids[i]);
  return s;
}

}  // namespace

Corpus read_corpus(const std::filesystem::path& tokens, const std::filesystem::path& segments) {
  auto in = open_input(tokens, "corpus");
  Corpus corpus;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    auto ids = parse_ids(text, tokens, line);
    if (ids.empty()) continue;
    corpus.push_back({std::move(ids), {}});
  }
  if (corpus.empty()) throw LoadError(tokens.string() + ": corpus has no sequences");
  if (segments.empty()) return corpus;

  auto seg_in = open_input(segments, "segment file");
  line = 0;
  std::size_t seq = 0;
  while (std::getline(seg_in, text)) {
    ++line;
    auto ids = parse_ids(text, segments, line);
    if (ids.empty()) continue;
    if (seq >= corpus.size()) throw LoadError(at_line(segments, line) + ": more segment lines than corpus sequences");
    if (ids.size() != corpus[seq].tokens.size()) {
      throw LoadError(at_line(segments, line) + ": " + std::to_string(ids.size()) + " segment ids for a sequence of " +
                      std::to_string(corpus[seq].tokens.size()) + " tokens");
    }
    corpus[seq++].segments = std::move(ids);
  }
  if (seq != corpus.size()) {
    throw LoadError(segments.string() + ": " + std::to_string(seq) + " segment lines for " +
                    std::to_string(corpus.size()) + " sequences");
  }
  return corpus;
}

void write_corpus(const std::filesystem::path& tokens, const Corpus& corpus, const std::filesystem::path& segments) {
  auto out = open_output(tokens);
  for (const auto& s : corpus) out << join_ids(s.tokens) << "\n";
  if (segments.empty()) return;
  auto seg_out = open_output(segments);
  for (const auto& s : corpus) {
    seg_out << join_ids(s.segments.empty() ? std::vector<std::size_t>(s.tokens.size(), 0) : s.segments) << "\n";
  }
}

std::string format_double(double value) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, ptr);
}

std::string csv_field(const std::string& text) {
  if (text.find_first_of(",\"\r\n") == std::string::npos) return text;
  std::string out = "\"";
  for (char ch : text) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

std::vector<std::string> parse_csv_line(const std::string& line) {
  std::vector<std::string> fields(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        fields.back() += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        fields.back() += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      fields.emplace_back();
    } else if (ch != '\r') {
      fields.back() += ch;
    }
  }
  return fields;
}

CsvWriter::CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header)
    : path_(path), out_(open_output(path)), columns_(header.size()) {
  row(header);
}

void CsvWriter::row(const std::vector<std::string>& fields) {
  if (fields.size() != columns_) {
    throw ShapeError(path_.string() + ": row has " + std::to_string(fields.size()) + " fields, header has " +
                     std::to_string(columns_));
  }
  for (std::size_t i = 0; i < fields.size(); ++i) out_ << (i ? "," : "") << csv_field(fields[i]);
  out_ << "\r\n";
  if (!out_) throw LoadError("failed writing " + path_.string());
}

std::size_t CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw LoadError("CSV has no column '" + name + "'");
}

CsvTable read_csv(const std::filesystem::path& path) {
  auto in = open_input(path, "CSV file");
  CsvTable table;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty() || line == "\r") continue;
    auto fields = parse_csv_line(line);
    if (table.header.empty()) {
      table.header = std::move(fields);
      continue;
    }
    if (fields.size() != table.header.size()) {
      throw LoadError(at_line(path, n) + ": " + std::to_string(fields.size()) + " fields, header has " +
                      std::to_string(table.header.size()));
    }
    table.rows.push_back(std::move(fields));
  }
  if (table.header.empty()) throw LoadError(path.string() + ": empty CSV file");
  return table;
}

TermFormat parse_term_format(const std::string& name) {
  if (name == "csv") return TermFormat::csv;
  if (name == "jsonl" || name == "json") return TermFormat::jsonl;
  throw ConfigError("unknown export format '" + name + "' (expected csv or jsonl)");
}

TermSetWriter::TermSetWriter(const std::filesystem::path& path, TermFormat format, std::size_t dim)
    : format_(format), dim_(dim), path_(path), out_(open_output(path)) {
  if (format_ == TermFormat::csv) {
    out_ << "sequence_id,token_index,layer_cut,term";
    for (std::size_t k = 0; k < dim_; ++k) out_ << ",x" << k;
    out_ << "\r\n";
  }
}

void TermSetWriter::write(std::size_t sequence_id, const TermSet& terms) {
  if (terms.reference.cols() != dim_) {
    throw ShapeError(path_.string() + ": term width " + std::to_string(terms.reference.cols()) + " != " +
                     std::to_string(dim_));
  }
  const std::pair<char, const Matrix*> parts[] = {{'i', &terms.input},       {'h', &terms.attention},
                                                  {'f', &terms.feedforward}, {'c', &terms.bias},
                                                  {'e', &terms.reference}};
  for (std::size_t t = 0; t < terms.reference.rows(); ++t) {
    for (const auto& [letter, m] : parts) {
      const auto row = m->row(t);
      if (format_ == TermFormat::csv) {
        out_ << sequence_id << ',' << t << ',' << terms.cut << ',' << letter;
        for (double v : row) out_ << ',' << format_double(v);
        out_ << "\r\n";
      } else {
        out_ << "{\"sequence_id\":" << sequence_id << ",\"token_index\":" << t << ",\"layer_cut\":" << terms.cut
             << ",\"term\":\"" << letter << "\",\"values\":[";
        for (std::size_t k = 0; k < row.size(); ++k) out_ << (k ? "," : "") << format_double(row[k]);
        out_ << "]}\n";
      }
    }
  }
  if (!out_) throw LoadError("failed writing " + path_.string());
}

std::vector<ProbeRecord> read_probe_records(const std::filesystem::path& path) {
  auto in = open_input(path, "probe dataset");
  std::vector<ProbeRecord> records;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      ProbeRecord r;
      r.sequence_id = j.at("sequence_id").get<std::size_t>();
      const auto span = j.at("token_span").get<std::vector<std::size_t>>();
      if (span.size() != 2 || span[0] >= span[1]) throw LoadError("token_span must be [begin, end) with begin < end");
      r.token_span = {span[0], span[1]};
      if (j.contains("lemma")) r.lemma = j.at("lemma").get<std::string>();
      const auto& label = j.at("label");
      r.label = label.is_string() ? label.get<std::string>() : label.dump();
      if (j.contains("split")) r.split = j.at("split").get<std::string>();
      records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw LoadError(at_line(path, n) + ": " + e.what());
    } catch (const LoadError& e) {
      throw LoadError(at_line(path, n) + ": " + e.what());
    }
  }
  return records;
}

void write_probe_records(const std::filesystem::path& path, const std::vector<ProbeRecord>& records) {
  auto out = open_output(path);
  for (const auto& r : records) {
    json j = {{"sequence_id", r.sequence_id},
              {"token_span", {r.token_span[0], r.token_span[1]}},
              {"lemma", r.lemma},
              {"label", r.label}};
    if (!r.split.empty()) j["split"] = r.split;
    out << j.dump() << "\n";
  }
}

std::vector<int> read_labels(const std::filesystem::path& path) {
  auto in = open_input(path, "label file");
  std::vector<int> labels;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r") + 1;
    int v = 0;
    const auto [ptr, ec] = std::from_chars(line.data() + b, line.data() + e, v);
    if (ec != std::errc() || ptr != line.data() + e) throw LoadError(at_line(path, n) + ": not an integer label");
    labels.push_back(v);
  }
  return labels;
}

void write_labels(const std::filesystem::path& path, const std::vector<int>& labels) {
  auto out = open_output(path);
  for (int v : labels) out << v << "\n";
}

}  // namespace tfdecomp
