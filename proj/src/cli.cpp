#include "tfdecomp/cli.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include <CLI11.hpp>
#include <json.hpp>

#include "tfdecomp/analysis.hpp"
#include "tfdecomp/checkpoint.hpp"
#include "tfdecomp/decomp.hpp"
#include "tfdecomp/error.hpp"
#include "tfdecomp/io.hpp"
#include "tfdecomp/kernels.hpp"
#include "tfdecomp/probes.hpp"
#include "tfdecomp/toy.hpp"

namespace tfdecomp {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct CommonOptions {
  std::string model_dir = ".";
  std::string model;
  std::string config;
  std::string corpus;
  std::string segments;
  std::string mapping;
  std::string out = ".";
  std::string run_config;
  std::string precision = "auto";
};

struct Session {
  ModelConfig config;
  ModelParams params;
  int bits = 64;
  Corpus corpus;
  fs::path corpus_path;
};

fs::path in_dir(const CommonOptions& o, const std::string& explicit_path, const char* file) {
  return explicit_path.empty() ? fs::path(o.model_dir) / file : fs::path(explicit_path);
}

Session open_session(const CommonOptions& o, bool with_corpus = true) {
  Session s;
  const auto config = load_model_config(in_dir(o, o.config, "config.json"));
  const auto mapping = o.mapping.empty() ? NameMapping::bert() : NameMapping::from_json_file(o.mapping);
  auto loaded = load_checkpoint(in_dir(o, o.model, "model.safetensors"), config, mapping, parse_precision(o.precision));
  s.config = loaded.config;
  s.params = std::move(loaded.params);
  s.bits = loaded.precision_bits;
  if (with_corpus) {
    s.corpus_path = in_dir(o, o.corpus, "corpus.txt");
    fs::path segments = o.segments;
    if (segments.empty() && o.corpus.empty() && fs::exists(fs::path(o.model_dir) / "segments.txt")) {
      segments = fs::path(o.model_dir) / "segments.txt";
    }
    s.corpus = read_corpus(s.corpus_path, segments);
  }
  return s;
}

/// Forward pass with the corpus location prefixed to any error.
ForwardTrace run_sequence(const Session& s, std::size_t index) {
  const auto& seq = s.corpus[index];
  try {
    return forward(s.params, s.config, seq.tokens, seq.segments);
  } catch (const Error& e) {
    throw LoadError(s.corpus_path.string() + ":" + std::to_string(index + 1) + ": " + e.what());
  }
}

fs::path output_dir(const CommonOptions& o) {
  const fs::path dir(o.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw LoadError("--out: cannot create " + dir.string() + ": " + ec.message());
  return dir;
}

std::size_t parse_index(const std::string& text, const char* flag) {
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw ConfigError(std::string(flag) + ": '" + text + "' is not a non-negative integer");
  }
  return v;
}

/// Sublayer cuts for verify/decompose: all, layers, last, or explicit LN indices.
std::vector<std::size_t> parse_cuts(const std::vector<std::string>& spec, const ModelConfig& config) {
  const std::size_t last = config.sublayers();
  std::set<std::size_t> cuts;
  for (const auto& item : spec) {
    if (item == "all") {
      for (std::size_t c = 0; c <= last; ++c) cuts.insert(c);
    } else if (item == "layers") {
      for (std::size_t l = 0; l <= config.layers; ++l) cuts.insert(layer_cut(l));
    } else if (item == "last") {
      cuts.insert(last);
    } else {
      const std::size_t c = parse_index(item, "--cuts");
      if (c > last) {
        throw ConfigError("--cuts: cut " + item + " is beyond the last LayerNorm (" + std::to_string(last) + ")");
      }
      cuts.insert(c);
    }
  }
  if (cuts.empty()) throw ConfigError("--cuts: no cut selected");
  return {cuts.begin(), cuts.end()};
}

/// Layer list for importance: all, last, or explicit layers 0..L.
std::vector<std::size_t> parse_layers(const std::vector<std::string>& spec, const ModelConfig& config) {
  std::set<std::size_t> layers;
  for (const auto& item : spec) {
    if (item == "all") {
      for (std::size_t l = 0; l <= config.layers; ++l) layers.insert(l);
    } else if (item == "last") {
      layers.insert(config.layers);
    } else {
      const std::size_t l = parse_index(item, "--cuts");
      if (l > config.layers) {
        throw ConfigError("--cuts: layer " + item + " exceeds the model depth (" + std::to_string(config.layers) + ")");
      }
      layers.insert(l);
    }
  }
  if (layers.empty()) throw ConfigError("--cuts: no layer selected");
  return {layers.begin(), layers.end()};
}

std::string json_scalar_text(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  return v.dump();
}

/// Fills options left unset on the command line from a flat JSON object whose
/// keys are long option names. Keys of other commands are ignored.
void apply_run_config(CLI::App& app, CLI::App* command, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("--run-config: cannot open " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw LoadError("--run-config: " + path + ": " + e.what());
  }
  if (!j.is_object()) throw LoadError("--run-config: " + path + ": expected a JSON object");

  std::set<std::string> known;
  for (const auto* sub : app.get_subcommands({})) {
    for (const auto* opt : sub->get_options()) known.insert(opt->get_single_name());
  }
  for (const auto& [key, value] : j.items()) {
    if (key == "run-config") continue;
    CLI::Option* opt = command ? command->get_option_no_throw("--" + key) : nullptr;
    if (opt == nullptr) opt = app.get_option_no_throw("--" + key);
    if (opt == nullptr) {
      if (known.contains(key)) continue;
      throw ConfigError("--run-config: " + path + ": unknown key '" + key + "'");
    }
    if (opt->count() > 0) continue;
    try {
      if (value.is_array()) {
        for (const auto& v : value) opt->add_result(json_scalar_text(v));
      } else {
        opt->add_result(json_scalar_text(value));
      }
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw ConfigError("--run-config: " + path + ": key '" + key + "': " + e.what());
    }
  }
}

// ---------------------------------------------------------------------------
// verify / decompose

struct VerifyOptions {
  double tolerance = -1.0;  // negative: pick from precision
  std::vector<std::string> cuts{"last"};
  bool oracle = false;
};

int cmd_verify(const CommonOptions& o, const VerifyOptions& v, std::ostream& out, std::ostream& err) {
  const Session s = open_session(o);
  const auto cuts = parse_cuts(v.cuts, s.config);
  const double tol = v.tolerance >= 0.0 ? v.tolerance : (s.bits == 32 ? kTolerance32 : kTolerance64);
  const auto dir = output_dir(o);
  CsvWriter csv(dir / "verify.csv", {"sequence_id", "layer_cut", "tokens", "max_residual", "mean_residual", "flagged"});

  double worst = 0.0, worst_oracle = 0.0;
  std::size_t flagged = 0, tokens = 0;
  for (std::size_t q = 0; q < s.corpus.size(); ++q) {
    const auto trace = run_sequence(s, q);
    for (std::size_t cut : cuts) {
      const auto terms = decompose_closed(trace, s.params, s.config, cut);
      const auto report = verify(terms, tol);
      worst = std::max(worst, report.max);
      flagged += report.flagged.size();
      tokens += report.residuals.size();
      if (v.oracle) {
        worst_oracle =
            std::max(worst_oracle, max_term_difference(terms, decompose_recurrence(trace, s.params, s.config, cut)));
      }
      csv.row({std::to_string(q), std::to_string(cut), std::to_string(report.residuals.size()),
               format_double(report.max), format_double(report.mean), std::to_string(report.flagged.size())});
    }
  }
  out << "precision: " << s.bits << "-bit weights\n";
  out << "checked " << tokens << " token decompositions at " << cuts.size() << " cut(s)\n";
  out << "max residual: " << format_double(worst) << " (tolerance " << format_double(tol) << ")\n";
  if (v.oracle) out << "max closed/recurrence difference: " << format_double(worst_oracle) << "\n";
  if (flagged > 0 || (v.oracle && !(worst_oracle < tol))) {
    err << "verify: " << flagged << " token decomposition(s) at or above tolerance\n";
    return kExitViolation;
  }
  out << "verify: ok\n";
  return kExitOk;
}

struct DecomposeOptions {
  std::vector<std::string> cuts{"last"};
  std::string format = "csv";
  double tolerance = -1.0;
};

int cmd_decompose(const CommonOptions& o, const DecomposeOptions& d, std::ostream& out, std::ostream& err) {
  const Session s = open_session(o);
  const auto cuts = parse_cuts(d.cuts, s.config);
  const auto format = parse_term_format(d.format);
  const double tol = d.tolerance >= 0.0 ? d.tolerance : (s.bits == 32 ? kTolerance32 : kTolerance64);
  const auto path = output_dir(o) / (format == TermFormat::csv ? "terms.csv" : "terms.jsonl");
  TermSetWriter writer(path, format, s.config.dim);
  double worst = 0.0;
  std::size_t flagged = 0;
  for (std::size_t q = 0; q < s.corpus.size(); ++q) {
    const auto trace = run_sequence(s, q);
    for (std::size_t cut : cuts) {
      const auto terms = decompose_closed(trace, s.params, s.config, cut);
      const auto report = verify(terms, tol);
      worst = std::max(worst, report.max);
      flagged += report.flagged.size();
      writer.write(q, terms);
    }
  }
  out << "wrote " << path.string() << "\n";
  out << "max residual: " << format_double(worst) << "\n";
  if (flagged > 0) {
    err << "decompose: " << flagged << " token(s) with residual at or above " << format_double(tol) << "\n";
    return kExitViolation;
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// importance / ff-fit / correlate / agree

struct ImportanceOptions {
  std::vector<std::string> cuts{"all"};
  bool per_token = false;
};

int cmd_importance(const CommonOptions& o, const ImportanceOptions& im, std::ostream& out) {
  const Session s = open_session(o);
  const auto layers = parse_layers(im.cuts, s.config);
  TokenImportance tokens;
  ImportanceProfile profile;
  try {
    profile = importance_profile(s.params, s.config, s.corpus, layers, im.per_token ? &tokens : nullptr);
  } catch (const Error& e) {
    throw LoadError(s.corpus_path.string() + ": " + e.what());
  }
  const auto dir = output_dir(o);
  CsvWriter csv(dir / "importance.csv", {"layer", "term", "mean", "std"});
  for (std::size_t r = 0; r < profile.layers.size(); ++r) {
    for (std::size_t k = 0; k < 4; ++k) {
      csv.row({std::to_string(profile.layers[r]), std::string(1, term_letter(kAllTerms[k])),
               format_double(profile.stats[r][k].mean), format_double(profile.stats[r][k].std)});
    }
  }
  if (im.per_token) {
    CsvWriter tok(dir / "importance_tokens.csv", {"sequence_id", "token_index", "layer", "term", "value"});
    for (std::size_t r = 0; r < tokens.layers.size(); ++r) {
      for (std::size_t k = 0; k < 4; ++k) {
        const auto& vals = tokens.values[r][k];
        for (std::size_t t = 0; t < vals.size(); ++t) {
          tok.row({std::to_string(tokens.sequence_ids[t]), std::to_string(tokens.token_ids[t]),
                   std::to_string(tokens.layers[r]), std::string(1, term_letter(kAllTerms[k])),
                   format_double(vals[t])});
        }
      }
    }
  }
  out << "importance over " << profile.tokens << " tokens, " << profile.layers.size() << " layer(s)\n";
  return kExitOk;
}

int cmd_ff_fit(const CommonOptions& o, double ridge, bool per_coordinate, std::ostream& out) {
  const Session s = open_session(o);
  const auto samples = collect_ff_samples(s.params, s.config, s.corpus);
  CsvWriter csv(output_dir(o) / "ff_fit.csv", {"layer", "r2", "samples"});
  std::vector<LinearFit> fits;
  for (std::size_t l = 0; l < samples.size(); ++l) {
    const auto fit = ff_linear_fit(samples[l].inputs, samples[l].outputs, ridge);
    csv.row({std::to_string(l + 1), format_double(fit.r2), std::to_string(samples[l].inputs.rows())});
    out << "layer " << l + 1 << ": r2 = " << format_double(fit.r2) << "\n";
    fits.push_back(fit);
  }
  if (per_coordinate) {
    CsvWriter coords(output_dir(o) / "ff_fit_coordinates.csv", {"layer", "coordinate", "r2"});
    for (std::size_t l = 0; l < fits.size(); ++l) {
      for (std::size_t k = 0; k < fits[l].per_coordinate.size(); ++k) {
        coords.row({std::to_string(l + 1), std::to_string(k), format_double(fits[l].per_coordinate[k])});
      }
    }
  }
  return kExitOk;
}

using TokenKey = std::tuple<std::string, std::string, std::string, std::string>;  // sequence, token, layer, term

std::map<TokenKey, double> read_token_values(const std::string& path) {
  const auto table = read_csv(path);
  const std::size_t cs = table.column("sequence_id"), ct = table.column("token_index"), cl = table.column("layer"),
                    cm = table.column("term"), cv = table.column("value");
  std::map<TokenKey, double> values;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    double v = 0.0;
    const auto& text = row[cv];
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || ptr != text.data() + text.size()) {
      throw LoadError(path + ":" + std::to_string(r + 2) + ": value '" + text + "' is not a number");
    }
    values[{row[cs], row[ct], row[cl], row[cm]}] = v;
  }
  return values;
}

int cmd_correlate(const CommonOptions& o, const std::string& a_path, const std::string& b_path, std::ostream& out,
                  std::ostream& err) {
  const auto a = read_token_values(a_path);
  const auto b = read_token_values(b_path);
  // (layer, term) -> paired samples in key order
  std::map<std::pair<std::size_t, std::string>, std::pair<std::vector<double>, std::vector<double>>> groups;
  for (const auto& [key, va] : a) {
    const auto it = b.find(key);
    if (it == b.end()) continue;
    auto& g = groups[{parse_index(std::get<2>(key), "--a"), std::get<3>(key)}];
    g.first.push_back(va);
    g.second.push_back(it->second);
  }
  if (groups.empty()) throw LoadError("--b: " + b_path + " shares no (sequence_id, token_index, layer, term) with --a");
  CsvWriter csv(output_dir(o) / "correlation.csv", {"layer", "term", "rho", "tokens"});
  for (const auto& [key, g] : groups) {
    std::string rho;
    try {
      rho = format_double(spearman(g.first, g.second));
    } catch (const DegenerateInputError& e) {
      err << "correlate: layer " << key.first << " term " << key.second << ": " << e.what() << "\n";
      rho = "nan";
    }
    csv.row({std::to_string(key.first), key.second, rho, std::to_string(g.first.size())});
  }
  out << "correlated " << groups.size() << " (layer, term) pairs\n";
  return kExitOk;
}

int cmd_agree(const CommonOptions& o, const std::vector<std::string>& files, std::vector<std::string> names,
              const std::string& gold_path, const std::string& mode_name, std::ostream& out) {
  if (files.size() < 2) throw ConfigError("--predictions: need at least two prediction files");
  if (names.empty()) {
    for (const auto& f : files) names.push_back(fs::path(f).stem().string());
  }
  if (names.size() != files.size()) throw ConfigError("--names: one name per prediction file is required");
  std::vector<std::vector<int>> predictions;
  for (const auto& f : files) predictions.push_back(read_labels(f));
  for (std::size_t k = 1; k < predictions.size(); ++k) {
    if (predictions[k].size() != predictions[0].size()) {
      throw LoadError("--predictions: " + files[k] + " has " + std::to_string(predictions[k].size()) +
                      " labels, " + files[0] + " has " + std::to_string(predictions[0].size()));
    }
  }
  const auto mode = parse_agreement_mode(mode_name);
  std::vector<int> gold;
  if (!gold_path.empty()) {
    gold = read_labels(gold_path);
    if (gold.size() != predictions[0].size()) throw LoadError("--gold: " + gold_path + " length differs from predictions");
  } else if (mode == AgreementMode::macro) {
    throw ConfigError("--gold: macro agreement needs gold labels");
  }
  const auto matrix = agreement_matrix(predictions, names, mode, gold);
  std::vector<std::string> header{"name"};
  header.insert(header.end(), names.begin(), names.end());
  CsvWriter csv(output_dir(o) / "agreement.csv", header);
  for (std::size_t r = 0; r < names.size(); ++r) {
    std::vector<std::string> row{names[r]};
    for (std::size_t c = 0; c < names.size(); ++c) row.push_back(format_double(matrix.values(r, c)));
    csv.row(row);
  }
  out << "agreement matrix over " << predictions[0].size() << " items\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// probe

struct ProbeCliOptions {
  std::string dataset;
  std::string kind = "linear";
  std::string metric = "accuracy";
  std::string task = "words";
  std::string head = "learned";
  std::string split = "test";
  std::vector<std::string> terms{"all"};
  int layer = -1;
  std::size_t k = 5;
  std::uint64_t seed = 0;
  ProbeOptions train;
  std::size_t mask_id = 0;
};

std::vector<TermSelector> parse_selectors(const std::vector<std::string>& spec) {
  std::vector<TermSelector> out;
  for (const auto& s : spec) {
    if (s == "all") {
      auto subsets = TermSelector::all_subsets();
      out.insert(out.end(), subsets.begin(), subsets.end());
      out.push_back(TermSelector::parse("e"));
    } else {
      try {
        out.push_back(TermSelector::parse(s));
      } catch (const ConfigError& e) {
        throw ConfigError(std::string("--terms: ") + e.what());
      }
    }
  }
  if (out.empty()) throw ConfigError("--terms: no term subset selected");
  return out;
}

int intern(std::map<std::string, int>& table, const std::string& key) {
  const auto [it, inserted] = table.try_emplace(key, static_cast<int>(table.size()));
  return it->second;
}

ProbeDataset word_dataset(const Session& s, const ProbeCliOptions& p, const fs::path& path, std::size_t cut) {
  const auto records = read_probe_records(path);
  if (records.empty()) throw LoadError("--dataset: " + path.string() + " has no records");
  std::map<std::string, int> labels, lemmas;
  std::map<std::size_t, TermSet> terms;
  ProbeDataset data;
  data.seed = p.seed;
  const auto fallback = assign_splits(records.size(), p.seed);
  for (std::size_t r = 0; r < records.size(); ++r) {
    const auto& rec = records[r];
    const std::string where = path.string() + ":" + std::to_string(r + 1);
    if (rec.sequence_id >= s.corpus.size()) {
      throw LoadError(where + ": sequence_id " + std::to_string(rec.sequence_id) + " is not in the corpus");
    }
    if (rec.token_span[1] > s.corpus[rec.sequence_id].tokens.size()) {
      throw LoadError(where + ": token_span ends past the sequence");
    }
    auto it = terms.find(rec.sequence_id);
    if (it == terms.end()) {
      const auto trace = run_sequence(s, rec.sequence_id);
      it = terms.emplace(rec.sequence_id, decompose_closed(trace, s.params, s.config, cut)).first;
    }
    auto item = make_probe_item(it->second, rec.token_span[0], rec.token_span[1], intern(labels, rec.label),
                                intern(lemmas, rec.lemma));
    try {
      item.split = rec.split.empty() ? fallback[r] : parse_split(rec.split);
    } catch (const Error& e) {
      throw LoadError(where + ": " + e.what());
    }
    data.items.push_back(std::move(item));
  }
  return data;
}

ProbeDataset mlm_dataset(const Session& s, const ProbeCliOptions& p, std::size_t cut) {
  MlmOptions mlm;
  mlm.mask_id = p.mask_id;
  mlm.vocab = s.config.vocab;
  if (p.mask_id >= s.config.vocab) throw ConfigError("--mask-id: outside the vocabulary");
  const auto corrupted = mlm_corrupt(s.corpus, mlm, p.seed);
  if (corrupted.targets.empty()) throw LoadError("corpus produced no MLM targets");
  Session cs{s.config, s.params, s.bits, corrupted.corpus, s.corpus_path};
  std::map<std::size_t, TermSet> terms;
  ProbeDataset data;
  data.seed = p.seed;
  const auto splits = assign_splits(corrupted.targets.size(), p.seed);
  for (std::size_t r = 0; r < corrupted.targets.size(); ++r) {
    const auto& target = corrupted.targets[r];
    auto it = terms.find(target.sequence);
    if (it == terms.end()) {
      const auto trace = run_sequence(cs, target.sequence);
      it = terms.emplace(target.sequence, decompose_closed(trace, s.params, s.config, cut)).first;
    }
    auto item = make_probe_item(it->second, target.position, target.position + 1, static_cast<int>(target.original));
    item.split = splits[r];
    data.items.push_back(std::move(item));
  }
  return data;
}

int cmd_probe(const CommonOptions& o, ProbeCliOptions p, std::ostream& out, std::ostream& err) {
  const Session s = open_session(o);
  const std::size_t layer = p.layer < 0 ? s.config.layers : static_cast<std::size_t>(p.layer);
  if (layer > s.config.layers) throw ConfigError("--layer: exceeds the model depth");
  const auto metric = parse_metric(p.metric);
  const auto split = parse_split(p.split);
  const auto selectors = parse_selectors(p.terms);
  if (p.kind != "linear" && p.kind != "knn" && p.kind != "baseline") {
    throw ConfigError("--kind: expected linear, knn or baseline");
  }
  if (p.head != "learned" && p.head != "tied") throw ConfigError("--head: expected learned or tied");
  if (p.head == "tied" && (p.task != "mlm" || p.kind != "linear")) {
    throw ConfigError("--head: the tied head applies to linear MLM probes only");
  }
  p.train.seed = p.seed;

  ProbeDataset data;
  if (p.task == "words") {
    data = word_dataset(s, p, in_dir(o, p.dataset, "probe.jsonl"), layer_cut(layer));
  } else if (p.task == "mlm") {
    data = mlm_dataset(s, p, layer_cut(layer));
  } else {
    throw ConfigError("--task: expected words or mlm");
  }
  if (p.kind == "knn") {
    const std::size_t before = data.items.size();
    data = drop_monosemous(data);
    if (data.items.size() < before) {
      err << "probe: dropped " << before - data.items.size() << " item(s) with monosemous lemmas\n";
    }
  }
  const auto eval_idx = data.indices(split);
  if (eval_idx.empty()) throw LoadError("--split: no items in the " + to_string(split) + " split");
  std::vector<int> gold;
  for (std::size_t i : eval_idx) gold.push_back(data.items[i].label);

  const auto dir = output_dir(o);
  write_labels(dir / "gold.txt", gold);
  CsvWriter csv(dir / "probe.csv", {"task", "kind", "terms", "layer", "metric", "split", "score", "items"});
  auto score_of = [&](const std::vector<int>& predicted) {
    return metric == Metric::accuracy ? accuracy(gold, predicted) : macro_f1(gold, predicted);
  };
  auto emit = [&](const std::string& name, const std::vector<int>& predicted) {
    const double score = score_of(predicted);
    write_labels(dir / ("predictions_" + name + ".txt"), predicted);
    csv.row({p.task, p.kind, name, std::to_string(layer), p.metric, to_string(split), format_double(score),
             std::to_string(predicted.size())});
    out << p.kind << " " << name << ": " << p.metric << " = " << format_double(score) << "\n";
  };

  if (p.kind == "baseline") {
    emit("baseline", most_frequent_predictions(data, split));
    return kExitOk;
  }
  const auto fallback = most_frequent_predictions(data, split);
  for (const auto& sel : selectors) {
    std::vector<int> predicted;
    if (p.kind == "linear") {
      const LinearProbe probe = p.head == "tied" ? LinearProbe::tied(s.params.word_emb)
                                                 : train_linear_probe(data, sel, p.train);
      for (std::size_t i : eval_idx) predicted.push_back(probe.predict(data.items[i].feature(sel)));
    } else {
      std::vector<BankEntry> entries;
      for (std::size_t i : data.indices(Split::train)) {
        entries.push_back({data.items[i].feature(sel), data.items[i].label, data.items[i].group});
      }
      const KnnBank bank(std::move(entries));
      std::size_t fallbacks = 0;
      for (std::size_t n = 0; n < eval_idx.size(); ++n) {
        const auto& item = data.items[eval_idx[n]];
        try {
          predicted.push_back(bank.predict(item.feature(sel), p.k, item.group));
        } catch (const CoverageError&) {
          predicted.push_back(fallback[n]);
          ++fallbacks;
        } catch (const DegenerateInputError&) {
          predicted.push_back(fallback[n]);
          ++fallbacks;
        }
      }
      if (fallbacks > 0) {
        err << "probe: " << sel.name() << ": " << fallbacks << " item(s) fell back to the most frequent label\n";
      }
    }
    emit(sel.name(), predicted);
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// gen-toy

struct ToyOptions {
  ModelConfig config;
  std::uint64_t seed = 0;
  std::size_t sequences = 64;
  std::size_t min_len = 4;
  std::size_t max_len = 16;
  std::string activation = "gelu";
  std::string dtype = "F64";
  bool no_initial_ln = false;
  std::size_t lemmas = 8;
};

std::vector<ProbeRecord> toy_probe_records(const Corpus& corpus, std::size_t lemmas, std::uint64_t seed) {
  std::vector<ProbeRecord> records;
  for (std::size_t q = 0; q < corpus.size(); ++q) {
    const auto& tokens = corpus[q].tokens;
    for (std::size_t t = 0; t < tokens.size();) {
      // ids divisible by 5 start a two-piece word when a piece follows
      const std::size_t len = (tokens[t] % 5 == 0 && t + 1 < tokens.size()) ? 2 : 1;
      const std::size_t context = t > 0 ? tokens[t - 1] : 0;
      ProbeRecord r;
      r.sequence_id = q;
      r.token_span = {t, t + len};
      r.lemma = "w" + std::to_string(tokens[t] % lemmas);
      r.label = "s" + std::to_string((tokens[t] + context) % 2);
      records.push_back(std::move(r));
      t += len;
    }
  }
  const auto splits = assign_splits(records.size(), seed);
  for (std::size_t r = 0; r < records.size(); ++r) records[r].split = to_string(splits[r]);
  return records;
}

int cmd_gen_toy(const CommonOptions& o, ToyOptions t, std::ostream& out) {
  t.config.activation = parse_activation(t.activation);
  t.config.initial_ln = !t.no_initial_ln;
  if (t.config.ff_dim == 0) t.config.ff_dim = 4 * t.config.dim;
  if (t.max_len > t.config.max_pos) throw ConfigError("--max-len: exceeds --max-pos");
  if (t.min_len == 0 || t.min_len > t.max_len) throw ConfigError("--min-len: must be in 1..--max-len");
  try {
    t.config.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("gen-toy: ") + e.what());
  }
  const DType dtype = parse_dtype(t.dtype);
  const auto dir = output_dir(o);
  const auto params = random_model(t.config, t.seed);
  save_checkpoint(dir / "model.safetensors", params, t.config, dtype);
  save_model_config(dir / "config.json", t.config);
  const auto corpus = random_corpus(t.config, t.sequences, t.min_len, t.max_len, t.seed + 1);
  write_corpus(dir / "corpus.txt", corpus, dir / "segments.txt");
  write_probe_records(dir / "probe.jsonl", toy_probe_records(corpus, t.lemmas, t.seed));
  out << "wrote toy model (L=" << t.config.layers << ", d=" << t.config.dim << ", H=" << t.config.heads << ") to "
      << dir.string() << "\n";
  return kExitOk;
}

void add_common(CLI::App* cmd, CommonOptions& o, bool model = true) {
  if (model) {
    cmd->add_option("--model-dir", o.model_dir, "Directory holding model.safetensors, config.json, corpus.txt");
    cmd->add_option("--model", o.model, "Checkpoint file (overrides --model-dir)");
    cmd->add_option("--config", o.config, "Model config JSON (overrides --model-dir)");
    cmd->add_option("--corpus", o.corpus, "Token-id corpus (overrides --model-dir)");
    cmd->add_option("--segments", o.segments, "Segment-id file parallel to the corpus");
    cmd->add_option("--mapping", o.mapping, "Tensor name mapping JSON");
    cmd->add_option("--precision", o.precision, "Weight precision: auto, 32 or 64")
        ->check(CLI::IsMember({"auto", "32", "64"}));
  }
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_option("--run-config", o.run_config, "JSON file of option defaults; command-line flags win");
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Exact term decomposition of post-LN transformer encoder embeddings", "tfdecomp"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  CommonOptions common;
  VerifyOptions verify_opts;
  DecomposeOptions decompose_opts;
  ImportanceOptions importance_opts;
  ProbeCliOptions probe_opts;
  ToyOptions toy;
  double ridge = 1e-8;
  bool ff_per_coordinate = false;
  std::string corr_a, corr_b, gold, agree_mode = "micro";
  std::vector<std::string> pred_files, pred_names;

  auto* verify_cmd = app.add_subcommand("verify", "Check that the four terms sum to the traced embeddings");
  add_common(verify_cmd, common);
  verify_cmd->add_option("--tolerance", verify_opts.tolerance, "Residual tolerance (default by precision)")
      ->check(CLI::NonNegativeNumber);
  verify_cmd->add_option("--cuts", verify_opts.cuts, "LayerNorm cuts: all, layers, last or indices");
  verify_cmd->add_flag("--oracle", verify_opts.oracle, "Also compare against the recurrence oracle");

  auto* decompose_cmd = app.add_subcommand("decompose", "Export i, h, f, c and e for every token");
  add_common(decompose_cmd, common);
  decompose_cmd->add_option("--cuts", decompose_opts.cuts, "LayerNorm cuts: all, layers, last or indices");
  decompose_cmd->add_option("--format", decompose_opts.format, "csv or jsonl");
  decompose_cmd->add_option("--tolerance", decompose_opts.tolerance, "Residual tolerance (default by precision)")
      ->check(CLI::NonNegativeNumber);

  auto* importance_cmd = app.add_subcommand("importance", "Per-layer importance of each term");
  add_common(importance_cmd, common);
  importance_cmd->add_option("--cuts", importance_opts.cuts, "Layers: all, last or indices 0..L");
  importance_cmd->add_flag("--per-token", importance_opts.per_token, "Also write per-token values");

  auto* ff_cmd = app.add_subcommand("ff-fit", "r2 of a linear fit to each feed-forward sublayer");
  add_common(ff_cmd, common);
  ff_cmd->add_option("--ridge", ridge, "Ridge penalty on standardized inputs")->check(CLI::NonNegativeNumber);
  ff_cmd->add_flag("--per-coordinate", ff_per_coordinate, "Also write the r2 of every output coordinate");

  auto* corr_cmd = app.add_subcommand("correlate", "Spearman correlation of two per-token importance files");
  add_common(corr_cmd, common, false);
  corr_cmd->add_option("--a", corr_a, "First importance_tokens.csv")->required();
  corr_cmd->add_option("--b", corr_b, "Second importance_tokens.csv")->required();

  auto* agree_cmd = app.add_subcommand("agree", "Pairwise agreement between prediction files");
  add_common(agree_cmd, common, false);
  agree_cmd->add_option("--predictions", pred_files, "Label files, one integer per line")->required();
  agree_cmd->add_option("--names", pred_names, "Row/column names (default: file stems)");
  agree_cmd->add_option("--gold", gold, "Gold labels, required for macro mode");
  agree_cmd->add_option("--mode", agree_mode, "micro or macro");

  auto* probe_cmd = app.add_subcommand("probe", "Train and score probes on term subsets");
  add_common(probe_cmd, common);
  probe_cmd->add_option("--dataset", probe_opts.dataset, "Probe dataset JSONL (default probe.jsonl in --model-dir)");
  probe_cmd->add_option("--task", probe_opts.task, "words or mlm");
  probe_cmd->add_option("--kind", probe_opts.kind, "linear, knn or baseline");
  probe_cmd->add_option("--metric", probe_opts.metric, "accuracy or macro-f1");
  probe_cmd->add_option("--terms", probe_opts.terms, "Term subsets such as ihfc, h, e, or all");
  probe_cmd->add_option("--layer", probe_opts.layer, "Layer whose output is probed (default last)");
  probe_cmd->add_option("--split", probe_opts.split, "Evaluation split: val or test");
  probe_cmd->add_option("--k", probe_opts.k, "Neighbours for knn")->check(CLI::PositiveNumber);
  probe_cmd->add_option("--seed", probe_opts.seed, "Seed for splits, corruption and shuffling");
  probe_cmd->add_option("--head", probe_opts.head, "MLM head: learned or tied");
  probe_cmd->add_option("--mask-id", probe_opts.mask_id, "Mask token id for the mlm task");
  probe_cmd->add_option("--epochs", probe_opts.train.epochs, "Training epochs")->check(CLI::PositiveNumber);
  probe_cmd->add_option("--lr", probe_opts.train.learning_rate, "Learning rate")->check(CLI::PositiveNumber);
  probe_cmd->add_option("--weight-decay", probe_opts.train.weight_decay, "Decoupled weight decay")
      ->check(CLI::NonNegativeNumber);
  probe_cmd->add_option("--batch", probe_opts.train.batch_size, "Minibatch size")->check(CLI::PositiveNumber);

  auto* toy_cmd = app.add_subcommand("gen-toy", "Write a random model, corpus and probe dataset");
  add_common(toy_cmd, common, false);
  toy_cmd->add_option("--layers", toy.config.layers, "Encoder layers")->check(CLI::PositiveNumber);
  toy_cmd->add_option("--dim", toy.config.dim, "Model width")->check(CLI::PositiveNumber);
  toy_cmd->add_option("--heads", toy.config.heads, "Attention heads")->check(CLI::PositiveNumber);
  toy.config.ff_dim = 0;
  toy_cmd->add_option("--ff-dim", toy.config.ff_dim, "Feed-forward width (default 4 x dim)");
  toy.config.vocab = 64;
  toy_cmd->add_option("--vocab", toy.config.vocab, "Vocabulary size")->check(CLI::PositiveNumber);
  toy_cmd->add_option("--max-pos", toy.config.max_pos, "Position table size")->check(CLI::PositiveNumber);
  toy_cmd->add_option("--activation", toy.activation, "gelu, relu or identity");
  toy_cmd->add_flag("--no-initial-ln", toy.no_initial_ln, "Omit the embedding LayerNorm");
  toy_cmd->add_option("--dtype", toy.dtype, "Stored dtype: F16, BF16, F32 or F64");
  toy_cmd->add_option("--seed", toy.seed, "Random seed");
  toy_cmd->add_option("--sequences", toy.sequences, "Corpus sequences")->check(CLI::PositiveNumber);
  toy_cmd->add_option("--min-len", toy.min_len, "Shortest sequence");
  toy_cmd->add_option("--max-len", toy.max_len, "Longest sequence");
  toy_cmd->add_option("--lemmas", toy.lemmas, "Distinct lemmas in the probe dataset")->check(CLI::PositiveNumber);

  std::vector<std::string> argv_rest(args.begin() + (args.empty() ? 0 : 1), args.end());
  std::reverse(argv_rest.begin(), argv_rest.end());
  try {
    app.parse(argv_rest);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  CLI::App* command = app.get_subcommands().front();
  try {
    if (!common.run_config.empty()) {
      apply_run_config(app, command, common.run_config);
    }
    const std::string& name = command->get_name();
    if (name == "verify") return cmd_verify(common, verify_opts, out, err);
    if (name == "decompose") return cmd_decompose(common, decompose_opts, out, err);
    if (name == "importance") return cmd_importance(common, importance_opts, out);
    if (name == "ff-fit") return cmd_ff_fit(common, ridge, ff_per_coordinate, out);
    if (name == "correlate") return cmd_correlate(common, corr_a, corr_b, out, err);
    if (name == "agree") return cmd_agree(common, pred_files, pred_names, gold, agree_mode, out);
    if (name == "probe") return cmd_probe(common, probe_opts, out, err);
    if (name == "gen-toy") return cmd_gen_toy(common, toy, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace tfdecomp
