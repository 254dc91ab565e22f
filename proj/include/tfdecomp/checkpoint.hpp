#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "tfdecomp/model.hpp"
#include "tfdecomp/safetensors.hpp"

namespace tfdecomp {

/// Where each ModelParams slot lives in a checkpoint.
///
/// Slot keys are fixed ("word_emb", "layer.query_w", ...); each maps to one or
/// more candidate tensor names, with "{l}" standing for the 0-based layer
/// index. Every candidate is also tried under each prefix. Slots listed in
/// `transposed` are stored output-major (PyTorch Linear layout).
struct NameMapping {
  std::vector<std::string> prefixes{""};
  std::map<std::string, std::vector<std::string>> slots;
  std::vector<std::string> transposed;

  /// Standard BERT naming, with and without a "bert." prefix.
  static NameMapping bert();
  /// Reads the same structure from JSON ({"prefixes": [...], "slots": {...}, "transposed": [...]}).
  static NameMapping from_json_file(const std::filesystem::path& path);

  bool is_transposed(const std::string& slot) const;
};

enum class Precision { automatic, f32, f64 };

Precision parse_precision(const std::string& name);

struct LoadedModel {
  ModelConfig config;
  ModelParams params;
  int precision_bits = 64;  // 32 when parameters were rounded to float
};

/// Loads and validates every slot; fused [3d, d] QKV tensors are accepted when
/// the separate projections are absent.
LoadedModel load_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                            const NameMapping& mapping = NameMapping::bert(),
                            Precision precision = Precision::automatic);

/// Writes params under the default BERT names.
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, const ModelConfig& config,
                     DType dtype = DType::f64);

/// Tensors save_checkpoint would write, in file order.
std::vector<NamedTensor> checkpoint_tensors(const ModelParams& params, const ModelConfig& config, DType dtype);

/// Accepts both this project's keys and Hugging Face BERT config keys.
ModelConfig load_model_config(const std::filesystem::path& path);
void save_model_config(const std::filesystem::path& path, const ModelConfig& config);

}  // namespace tfdecomp
