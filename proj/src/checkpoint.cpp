#include "tfdecomp/checkpoint.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "tfdecomp/error.hpp"

namespace tfdecomp {

namespace {

using json = nlohmann::json;

std::string shape_text(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? ", " : "") + std::to_string(shape[i]);
  return s + "]";
}

std::string expand(const std::string& pattern, std::size_t layer) {
  std::string out = pattern;
  const auto pos = out.find("{l}");
  if (pos != std::string::npos) out.replace(pos, 3, std::to_string(layer));
  return out;
}

class SlotReader {
 public:
  SlotReader(const SafeTensorsFile& file, const NameMapping& mapping, std::string label)
      : file_(file), mapping_(mapping), label_(std::move(label)) {}

  /// Tensor name backing `slot`, or empty when absent and `optional`.
  std::string resolve(const std::string& slot, std::size_t layer, bool optional = false) const {
    const auto it = mapping_.slots.find(slot);
    if (it == mapping_.slots.end()) {
      if (optional) return {};
      throw LoadError(label_ + ": name mapping has no entry for slot " + slot);
    }
    std::vector<std::string> found;
    for (const auto& prefix : mapping_.prefixes) {
      for (const auto& candidate : it->second) {
        const std::string name = prefix + expand(candidate, layer);
        if (file_.contains(name) && std::find(found.begin(), found.end(), name) == found.end()) found.push_back(name);
      }
    }
    if (found.size() > 1) {
      throw LoadError(label_ + ": slot " + slot + " matches several tensors (" + found[0] + ", " + found[1] + ")");
    }
    if (found.empty()) {
      if (optional) return {};
      throw LoadError(label_ + ": missing tensor " + mapping_.prefixes.front() + expand(it->second.front(), layer) +
                      " for slot " + slot);
    }
    return found.front();
  }

  Matrix matrix(const std::string& slot, std::size_t layer, std::size_t rows, std::size_t cols) const {
    return matrix_from(resolve(slot, layer), slot, rows, cols);
  }

  Matrix matrix_from(const std::string& name, const std::string& slot, std::size_t rows, std::size_t cols) const {
    const bool transposed = mapping_.is_transposed(slot);
    const std::vector<std::size_t> expected = transposed ? std::vector{cols, rows} : std::vector{rows, cols};
    check_shape(name, expected);
    Matrix m(expected[0], expected[1], file_.values(name));
    return transposed ? m.transposed() : m;
  }

  Vector vector(const std::string& slot, std::size_t layer, std::size_t n) const {
    const std::string name = resolve(slot, layer);
    check_shape(name, {n});
    return file_.values(name);
  }

  void check_shape(const std::string& name, const std::vector<std::size_t>& expected) const {
    const auto& info = file_.info(name);
    if (info.shape != expected) {
      throw LoadError(label_ + ": tensor " + name + " has shape " + shape_text(info.shape) + ", expected " +
                      shape_text(expected));
    }
  }

  const SafeTensorsFile& file() const { return file_; }

 private:
  const SafeTensorsFile& file_;
  const NameMapping& mapping_;
  std::string label_;
};

std::size_t get_size(const json& j, std::initializer_list<const char*> keys, std::size_t fallback, bool& found) {
  for (const char* k : keys) {
    if (j.contains(k)) {
      found = true;
      return j.at(k).get<std::size_t>();
    }
  }
  return fallback;
}

}  // namespace

NameMapping NameMapping::bert() {
  NameMapping m;
  m.prefixes = {"", "bert."};
  const std::string layer = "encoder.layer.{l}.";
  m.slots = {
      {"word_emb", {"embeddings.word_embeddings.weight"}},
      {"pos_emb", {"embeddings.position_embeddings.weight"}},
      {"seg_emb", {"embeddings.token_type_embeddings.weight"}},
      {"initial_ln.gain", {"embeddings.LayerNorm.weight", "embeddings.LayerNorm.gamma"}},
      {"initial_ln.bias", {"embeddings.LayerNorm.bias", "embeddings.LayerNorm.beta"}},
      {"layer.query_w", {layer + "attention.self.query.weight"}},
      {"layer.query_b", {layer + "attention.self.query.bias"}},
      {"layer.key_w", {layer + "attention.self.key.weight"}},
      {"layer.key_b", {layer + "attention.self.key.bias"}},
      {"layer.value_w", {layer + "attention.self.value.weight"}},
      {"layer.value_b", {layer + "attention.self.value.bias"}},
      {"layer.qkv_w", {layer + "attention.self.qkv.weight"}},
      {"layer.qkv_b", {layer + "attention.self.qkv.bias"}},
      {"layer.attn_out_w", {layer + "attention.output.dense.weight"}},
      {"layer.attn_out_b", {layer + "attention.output.dense.bias"}},
      {"layer.attn_ln.gain", {layer + "attention.output.LayerNorm.weight", layer + "attention.output.LayerNorm.gamma"}},
      {"layer.attn_ln.bias", {layer + "attention.output.LayerNorm.bias", layer + "attention.output.LayerNorm.beta"}},
      {"layer.ff_in_w", {layer + "intermediate.dense.weight"}},
      {"layer.ff_in_b", {layer + "intermediate.dense.bias"}},
      {"layer.ff_out_w", {layer + "output.dense.weight"}},
      {"layer.ff_out_b", {layer + "output.dense.bias"}},
      {"layer.ff_ln.gain", {layer + "output.LayerNorm.weight", layer + "output.LayerNorm.gamma"}},
      {"layer.ff_ln.bias", {layer + "output.LayerNorm.bias", layer + "output.LayerNorm.beta"}},
  };
  m.transposed = {"layer.query_w", "layer.key_w",     "layer.value_w", "layer.qkv_w",
                  "layer.attn_out_w", "layer.ff_in_w", "layer.ff_out_w"};
  return m;
}

NameMapping NameMapping::from_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open name mapping " + path.string());
  NameMapping m;
  try {
    const json j = json::parse(in);
    if (j.contains("prefixes")) m.prefixes = j.at("prefixes").get<std::vector<std::string>>();
    for (const auto& [slot, names] : j.at("slots").items()) {
      m.slots[slot] = names.is_string() ? std::vector{names.get<std::string>()} : names.get<std::vector<std::string>>();
    }
    if (j.contains("transposed")) m.transposed = j.at("transposed").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw LoadError(path.string() + ": invalid name mapping: " + e.what());
  }
  if (m.prefixes.empty()) m.prefixes = {""};
  return m;
}

bool NameMapping::is_transposed(const std::string& slot) const {
  return std::find(transposed.begin(), transposed.end(), slot) != transposed.end();
}

Precision parse_precision(const std::string& name) {
  if (name == "auto") return Precision::automatic;
  if (name == "32" || name == "f32") return Precision::f32;
  if (name == "64" || name == "f64") return Precision::f64;
  throw ConfigError("unknown precision '" + name + "' (expected auto, 32 or 64)");
}

LoadedModel load_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const NameMapping& mapping,
                            Precision precision) {
  config.validate();
  const auto file = SafeTensorsFile::read(path);
  const SlotReader reader(file, mapping, path.string());
  const std::size_t d = config.dim;

  LoadedModel model;
  model.config = config;
  auto& p = model.params;
  p.word_emb = reader.matrix("word_emb", 0, config.vocab, d);
  p.pos_emb = reader.matrix("pos_emb", 0, config.max_pos, d);
  p.seg_emb = reader.matrix("seg_emb", 0, config.segments, d);
  if (config.initial_ln) {
    p.initial_ln = LayerNormParams{reader.vector("initial_ln.gain", 0, d), reader.vector("initial_ln.bias", 0, d)};
  }
  p.layers.resize(config.layers);
  for (std::size_t l = 0; l < config.layers; ++l) {
    auto& layer = p.layers[l];
    const std::string separate = reader.resolve("layer.query_w", l, true);
    if (!separate.empty()) {
      layer.query_w = reader.matrix("layer.query_w", l, d, d);
      layer.key_w = reader.matrix("layer.key_w", l, d, d);
      layer.value_w = reader.matrix("layer.value_w", l, d, d);
      layer.query_b = reader.vector("layer.query_b", l, d);
      layer.key_b = reader.vector("layer.key_b", l, d);
      layer.value_b = reader.vector("layer.value_b", l, d);
    } else {
      const std::string fused = reader.resolve("layer.qkv_w", l, true);
      if (fused.empty()) reader.resolve("layer.query_w", l);  // throws the missing-tensor error
      const Matrix qkv = reader.matrix_from(fused, "layer.qkv_w", d, 3 * d);
      layer.query_w = qkv.col_slice(0, d);
      layer.key_w = qkv.col_slice(d, 2 * d);
      layer.value_w = qkv.col_slice(2 * d, 3 * d);
      const Vector b = reader.vector("layer.qkv_b", l, 3 * d);
      layer.query_b.assign(b.begin(), b.begin() + static_cast<std::ptrdiff_t>(d));
      layer.key_b.assign(b.begin() + static_cast<std::ptrdiff_t>(d), b.begin() + static_cast<std::ptrdiff_t>(2 * d));
      layer.value_b.assign(b.begin() + static_cast<std::ptrdiff_t>(2 * d), b.end());
    }
    layer.attn_out_w = reader.matrix("layer.attn_out_w", l, d, d);
    layer.attn_out_b = reader.vector("layer.attn_out_b", l, d);
    layer.attn_ln = {reader.vector("layer.attn_ln.gain", l, d), reader.vector("layer.attn_ln.bias", l, d)};
    layer.ff_in_w = reader.matrix("layer.ff_in_w", l, d, config.ff_dim);
    layer.ff_in_b = reader.vector("layer.ff_in_b", l, config.ff_dim);
    layer.ff_out_w = reader.matrix("layer.ff_out_w", l, config.ff_dim, d);
    layer.ff_out_b = reader.vector("layer.ff_out_b", l, d);
    layer.ff_ln = {reader.vector("layer.ff_ln.gain", l, d), reader.vector("layer.ff_ln.bias", l, d)};
  }

  int widest = 16;
  for (const auto& [name, info] : file.tensors()) widest = std::max(widest, dtype_bits(info.dtype));
  model.precision_bits = precision == Precision::f32 ? 32 : precision == Precision::f64 ? 64 : (widest == 64 ? 64 : 32);
  if (model.precision_bits == 32) p.round_to_float32();
  try {
    p.validate(config);
  } catch (const ConfigError& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
  return model;
}

std::vector<NamedTensor> checkpoint_tensors(const ModelParams& params, const ModelConfig& config, DType dtype) {
  const NameMapping names = NameMapping::bert();
  std::vector<NamedTensor> out;
  auto add_matrix = [&](const std::string& slot, std::size_t l, const Matrix& m) {
    const bool t = names.is_transposed(slot);
    const Matrix stored = t ? m.transposed() : m;
    out.push_back({expand(names.slots.at(slot).front(), l), dtype, {stored.rows(), stored.cols()}, stored.data()});
  };
  auto add_vector = [&](const std::string& slot, std::size_t l, const Vector& v) {
    out.push_back({expand(names.slots.at(slot).front(), l), dtype, {v.size()}, v});
  };
  add_matrix("word_emb", 0, params.word_emb);
  add_matrix("pos_emb", 0, params.pos_emb);
  add_matrix("seg_emb", 0, params.seg_emb);
  if (params.initial_ln) {
    add_vector("initial_ln.gain", 0, params.initial_ln->gain);
    add_vector("initial_ln.bias", 0, params.initial_ln->bias);
  }
  for (std::size_t l = 0; l < config.layers; ++l) {
    const auto& layer = params.layers[l];
    add_matrix("layer.query_w", l, layer.query_w);
    add_vector("layer.query_b", l, layer.query_b);
    add_matrix("layer.key_w", l, layer.key_w);
    add_vector("layer.key_b", l, layer.key_b);
    add_matrix("layer.value_w", l, layer.value_w);
    add_vector("layer.value_b", l, layer.value_b);
    add_matrix("layer.attn_out_w", l, layer.attn_out_w);
    add_vector("layer.attn_out_b", l, layer.attn_out_b);
    add_vector("layer.attn_ln.gain", l, layer.attn_ln.gain);
    add_vector("layer.attn_ln.bias", l, layer.attn_ln.bias);
    add_matrix("layer.ff_in_w", l, layer.ff_in_w);
    add_vector("layer.ff_in_b", l, layer.ff_in_b);
    add_matrix("layer.ff_out_w", l, layer.ff_out_w);
    add_vector("layer.ff_out_b", l, layer.ff_out_b);
    add_vector("layer.ff_ln.gain", l, layer.ff_ln.gain);
    add_vector("layer.ff_ln.bias", l, layer.ff_ln.bias);
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, const ModelConfig& config,
                     DType dtype) {
  params.validate(config);
  write_safetensors(path, checkpoint_tensors(params, config, dtype), {{"format", "pt"}});
}

ModelConfig load_model_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open model config " + path.string());
  ModelConfig c;
  try {
    const json j = json::parse(in);
    bool found = false;
    c.layers = get_size(j, {"layers", "num_hidden_layers"}, c.layers, found);
    c.dim = get_size(j, {"dim", "hidden_size"}, c.dim, found);
    c.heads = get_size(j, {"heads", "num_attention_heads"}, c.heads, found);
    c.ff_dim = get_size(j, {"ff_dim", "intermediate_size"}, c.ff_dim, found);
    c.vocab = get_size(j, {"vocab", "vocab_size"}, c.vocab, found);
    c.max_pos = get_size(j, {"max_pos", "max_position_embeddings"}, c.max_pos, found);
    c.segments = get_size(j, {"segments", "type_vocab_size"}, c.segments, found);
    if (!found) throw LoadError("no recognised model fields");
    if (j.contains("ln_eps")) c.ln_eps = j.at("ln_eps").get<double>();
    else if (j.contains("layer_norm_eps")) c.ln_eps = j.at("layer_norm_eps").get<double>();
    if (j.contains("activation")) c.activation = parse_activation(j.at("activation").get<std::string>());
    else if (j.contains("hidden_act")) c.activation = parse_activation(j.at("hidden_act").get<std::string>());
    if (j.contains("initial_ln")) c.initial_ln = j.at("initial_ln").get<bool>();
    else c.initial_ln = true;
  } catch (const json::exception& e) {
    throw LoadError(path.string() + ": invalid model config: " + e.what());
  } catch (const ConfigError& e) {
    throw LoadError(path.string() + ": " + e.what());
  } catch (const LoadError& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
  return c;
}

void save_model_config(const std::filesystem::path& path, const ModelConfig& config) {
  const json j = {{"layers", config.layers},   {"dim", config.dim},
                  {"heads", config.heads},     {"ff_dim", config.ff_dim},
                  {"vocab", config.vocab},     {"max_pos", config.max_pos},
                  {"segments", config.segments}, {"ln_eps", config.ln_eps},
                  {"activation", to_string(config.activation)}, {"initial_ln", config.initial_ln}};
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

}  // namespace tfdecomp
