#pragma once

// Reader/writer for the safetensors container: an 8-byte little-endian header
// length N, N bytes of UTF-8 JSON mapping tensor names to
// {dtype, shape, data_offsets}, then the raw little-endian tensor bytes.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace tfdecomp {

enum class DType { f16, bf16, f32, f64 };

std::string to_string(DType dtype);
DType parse_dtype(const std::string& name);
std::size_t dtype_size(DType dtype);
/// 16 or 32 or 64.
int dtype_bits(DType dtype);

struct TensorInfo {
  DType dtype = DType::f32;
  std::vector<std::size_t> shape;
  std::size_t begin = 0;  // offsets into the data section
  std::size_t end = 0;

  std::size_t numel() const;
};

struct NamedTensor {
  std::string name;
  DType dtype = DType::f32;
  std::vector<std::size_t> shape;
  std::vector<double> values;  // converted to dtype on write
};

class SafeTensorsFile {
 public:
  static SafeTensorsFile read(const std::filesystem::path& path);
  /// Parses an in-memory image; `label` names it in error messages.
  static SafeTensorsFile parse(std::vector<std::uint8_t> bytes, const std::string& label);

  bool contains(const std::string& name) const { return tensors_.contains(name); }
  const TensorInfo& info(const std::string& name) const;
  const std::map<std::string, TensorInfo>& tensors() const { return tensors_; }
  const std::map<std::string, std::string>& metadata() const { return metadata_; }

  /// Tensor values widened to double (exact for every supported dtype).
  std::vector<double> values(const std::string& name) const;

 private:
  std::string label_;
  std::vector<std::uint8_t> bytes_;
  std::size_t data_start_ = 0;
  std::map<std::string, TensorInfo> tensors_;
  std::map<std::string, std::string> metadata_;
};

std::vector<std::uint8_t> encode_safetensors(const std::vector<NamedTensor>& tensors,
                                             const std::map<std::string, std::string>& metadata = {});
void write_safetensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors,
                       const std::map<std::string, std::string>& metadata = {});

float half_to_float(std::uint16_t bits);
std::uint16_t float_to_half(float value);

}  // namespace tfdecomp
