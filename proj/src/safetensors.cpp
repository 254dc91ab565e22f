#include "tfdecomp/safetensors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <json.hpp>

#include "tfdecomp/error.hpp"

namespace tfdecomp {

static_assert(std::endian::native == std::endian::little, "tensor byte layout assumes a little-endian host");

namespace {

using json = nlohmann::json;

template <typename T>
T load_le(const std::uint8_t* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

template <typename T>
void store_le(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

}  // namespace

std::string to_string(DType dtype) {
  switch (dtype) {
    case DType::f16: return "F16";
    case DType::bf16: return "BF16";
    case DType::f32: return "F32";
    case DType::f64: return "F64";
  }
  return "F32";
}

DType parse_dtype(const std::string& name) {
  if (name == "F16") return DType::f16;
  if (name == "BF16") return DType::bf16;
  if (name == "F32") return DType::f32;
  if (name == "F64") return DType::f64;
  throw LoadError("unsupported dtype " + name + " (expected F16, BF16, F32 or F64)");
}

std::size_t dtype_size(DType dtype) { return static_cast<std::size_t>(dtype_bits(dtype) / 8); }

int dtype_bits(DType dtype) {
  switch (dtype) {
    case DType::f16:
    case DType::bf16: return 16;
    case DType::f32: return 32;
    case DType::f64: return 64;
  }
  return 32;
}

std::size_t TensorInfo::numel() const {
  std::size_t n = 1;
  for (std::size_t s : shape) n *= s;
  return n;
}

float half_to_float(std::uint16_t bits) {
  const std::uint32_t sign = static_cast<std::uint32_t>(bits & 0x8000u) << 16;
  std::uint32_t exponent = (bits >> 10) & 0x1fu;
  std::uint32_t mantissa = bits & 0x3ffu;
  std::uint32_t out;
  if (exponent == 0x1f) {
    out = sign | 0x7f800000u | (mantissa << 13);
  } else if (exponent == 0) {
    if (mantissa == 0) {
      out = sign;
    } else {
      // subnormal: renormalize
      exponent = 127 - 15 + 1;
      while ((mantissa & 0x400u) == 0) {
        mantissa <<= 1;
        --exponent;
      }
      mantissa &= 0x3ffu;
      out = sign | (exponent << 23) | (mantissa << 13);
    }
  } else {
    out = sign | ((exponent + 127 - 15) << 23) | (mantissa << 13);
  }
  return std::bit_cast<float>(out);
}

std::uint16_t float_to_half(float value) {
  const std::uint32_t x = std::bit_cast<std::uint32_t>(value);
  const std::uint16_t sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
  const std::uint32_t exp32 = (x >> 23) & 0xffu;
  std::uint32_t mant = x & 0x7fffffu;
  if (exp32 == 0xff) return static_cast<std::uint16_t>(sign | 0x7c00u | (mant ? 0x200u : 0u));
  const int exp = static_cast<int>(exp32) - 127 + 15;
  if (exp >= 0x1f) return static_cast<std::uint16_t>(sign | 0x7c00u);
  if (exp <= 0) {
    if (exp < -10) return sign;
    mant |= 0x800000u;
    const int shift = 14 - exp;
    std::uint32_t half = mant >> shift;
    const std::uint32_t rem = mant & ((1u << shift) - 1);
    const std::uint32_t midpoint = 1u << (shift - 1);
    if (rem > midpoint || (rem == midpoint && (half & 1u))) ++half;
    return static_cast<std::uint16_t>(sign | half);
  }
  std::uint32_t half = (static_cast<std::uint32_t>(exp) << 10) | (mant >> 13);
  const std::uint32_t rem = mant & 0x1fffu;
  if (rem > 0x1000u || (rem == 0x1000u && (half & 1u))) ++half;  // may carry into the exponent, which is correct
  return static_cast<std::uint16_t>(sign | half);
}

SafeTensorsFile SafeTensorsFile::read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse(std::move(bytes), path.string());
}

SafeTensorsFile SafeTensorsFile::parse(std::vector<std::uint8_t> bytes, const std::string& label) {
  SafeTensorsFile file;
  file.label_ = label;
  file.bytes_ = std::move(bytes);
  const auto& b = file.bytes_;
  if (b.size() < 8) {
    throw LoadError(label + ": truncated at byte " + std::to_string(b.size()) + " (no 8-byte header length)");
  }
  const auto header_len = load_le<std::uint64_t>(b.data());
  if (header_len > b.size() - 8) {
    throw LoadError(label + ": invalid header at byte 8: header length " + std::to_string(header_len) +
                    " exceeds the " + std::to_string(b.size() - 8) + " bytes that follow");
  }
  json header;
  try {
    header = json::parse(b.begin() + 8, b.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::parse_error& e) {
    throw LoadError(label + ": invalid header at byte 8: " + e.what());
  }
  if (!header.is_object()) throw LoadError(label + ": invalid header at byte 8: not a JSON object");

  file.data_start_ = 8 + static_cast<std::size_t>(header_len);
  const std::size_t data_size = b.size() - file.data_start_;
  for (const auto& [name, entry] : header.items()) {
    if (name == "__metadata__") {
      for (const auto& [k, v] : entry.items()) file.metadata_[k] = v.is_string() ? v.get<std::string>() : v.dump();
      continue;
    }
    TensorInfo info;
    try {
      info.dtype = parse_dtype(entry.at("dtype").get<std::string>());
      info.shape = entry.at("shape").get<std::vector<std::size_t>>();
      const auto offsets = entry.at("data_offsets").get<std::vector<std::size_t>>();
      if (offsets.size() != 2) throw LoadError("data_offsets must hold two values");
      info.begin = offsets[0];
      info.end = offsets[1];
    } catch (const json::exception& e) {
      throw LoadError(label + ": tensor " + name + ": malformed header entry: " + e.what());
    } catch (const LoadError& e) {
      throw LoadError(label + ": tensor " + name + ": " + e.what());
    }
    if (info.begin > info.end || info.end > data_size) {
      throw LoadError(label + ": tensor " + name + " truncated: data ends at byte " +
                      std::to_string(file.data_start_ + info.end) + " but the file has " + std::to_string(b.size()) +
                      " bytes");
    }
    if (info.end - info.begin != info.numel() * dtype_size(info.dtype)) {
      throw LoadError(label + ": tensor " + name + " at byte " + std::to_string(file.data_start_ + info.begin) +
                      " spans " + std::to_string(info.end - info.begin) + " bytes, shape needs " +
                      std::to_string(info.numel() * dtype_size(info.dtype)));
    }
    file.tensors_[name] = std::move(info);
  }
  return file;
}

const TensorInfo& SafeTensorsFile::info(const std::string& name) const {
  const auto it = tensors_.find(name);
  if (it == tensors_.end()) throw LoadError(label_ + ": missing tensor " + name);
  return it->second;
}

std::vector<double> SafeTensorsFile::values(const std::string& name) const {
  const auto& t = info(name);
  const std::uint8_t* p = bytes_.data() + data_start_ + t.begin;
  const std::size_t n = t.numel();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    switch (t.dtype) {
      case DType::f16: out[i] = half_to_float(load_le<std::uint16_t>(p + 2 * i)); break;
      case DType::bf16:
        out[i] = std::bit_cast<float>(static_cast<std::uint32_t>(load_le<std::uint16_t>(p + 2 * i)) << 16);
        break;
      case DType::f32: out[i] = load_le<float>(p + 4 * i); break;
      case DType::f64: out[i] = load_le<double>(p + 8 * i); break;
    }
  }
  return out;
}

std::vector<std::uint8_t> encode_safetensors(const std::vector<NamedTensor>& tensors,
                                             const std::map<std::string, std::string>& metadata) {
  json header = json::object();
  if (!metadata.empty()) header["__metadata__"] = metadata;
  std::vector<std::uint8_t> data;
  for (const auto& t : tensors) {
    std::size_t numel = 1;
    for (std::size_t s : t.shape) numel *= s;
    if (numel != t.values.size()) {
      throw ShapeError("encode_safetensors: tensor " + t.name + " has " + std::to_string(t.values.size()) +
                       " values for its shape");
    }
    const std::size_t begin = data.size();
    for (double v : t.values) {
      switch (t.dtype) {
        case DType::f16: store_le(data, float_to_half(static_cast<float>(v))); break;
        case DType::bf16: {
          // round to nearest even on the upper half of the float
          const std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
          const std::uint32_t rounded = bits + 0x7fffu + ((bits >> 16) & 1u);
          store_le(data, static_cast<std::uint16_t>(rounded >> 16));
          break;
        }
        case DType::f32: store_le(data, static_cast<float>(v)); break;
        case DType::f64: store_le(data, v); break;
      }
    }
    header[t.name] = {{"dtype", to_string(t.dtype)}, {"shape", t.shape}, {"data_offsets", {begin, data.size()}}};
  }
  std::string text = header.dump();
  while ((8 + text.size()) % 8 != 0) text.push_back(' ');

  std::vector<std::uint8_t> out;
  out.reserve(8 + text.size() + data.size());
  store_le<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), data.begin(), data.end());
  return out;
}

void write_safetensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors,
                       const std::map<std::string, std::string>& metadata) {
  const auto bytes = encode_safetensors(tensors, metadata);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw LoadError("failed writing " + path.string());
}

}  // namespace tfdecomp
