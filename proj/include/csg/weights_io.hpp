#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "csg/tensor.hpp"

namespace csg {

// One named array in the weights container. Values live as doubles in
// memory and are serialized as f32.
struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<double> values;

  std::size_t element_count() const {
    std::size_t n = 1;
    for (std::uint32_t d : dims) n *= d;
    return dims.empty() ? 0 : n;
  }
};

namespace detail {

inline void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF),
                        static_cast<unsigned char>((v >> 8) & 0xFF),
                        static_cast<unsigned char>((v >> 16) & 0xFF),
                        static_cast<unsigned char>((v >> 24) & 0xFF)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& in, const char* what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4)
    throw std::runtime_error(std::string("weights file: truncated ") + what + ".");
  return static_cast<std::uint32_t>(b[0]) |
         (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_f32(std::ostream& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  write_u32(out, bits);
}

inline float read_f32(std::istream& in) {
  const std::uint32_t bits = read_u32(in, "payload");
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace detail

inline constexpr char kWeightsMagic[4] = {'C', 'S', 'G', 'W'};
inline constexpr std::uint32_t kWeightsVersion = 1;

inline void save_weights_file(const std::string& path,
                              const std::vector<NamedTensor>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw std::runtime_error("weights file: cannot open '" + path +
                             "' for writing.");
  out.write(kWeightsMagic, 4);
  detail::write_u32(out, kWeightsVersion);
  detail::write_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const NamedTensor& t : tensors) {
    if (t.values.size() != t.element_count())
      throw std::logic_error("weights file: tensor '" + t.name +
                             "' size does not match its dims.");
    detail::write_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    detail::write_u32(out, static_cast<std::uint32_t>(t.dims.size()));
    for (std::uint32_t d : t.dims) detail::write_u32(out, d);
    for (double v : t.values) detail::write_f32(out, static_cast<float>(v));
  }
  if (!out)
    throw std::runtime_error("weights file: short write to '" + path + "'.");
}

inline std::vector<NamedTensor> load_weights_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw std::runtime_error("weights file: cannot open '" + path + "'.");
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kWeightsMagic, 4) != 0)
    throw std::runtime_error("weights file: '" + path + "' has a bad magic.");
  const std::uint32_t version = detail::read_u32(in, "version");
  if (version != kWeightsVersion)
    throw std::runtime_error("weights file: version " + std::to_string(version) +
                             " unsupported.");
  const std::uint32_t count = detail::read_u32(in, "tensor count");
  std::vector<NamedTensor> tensors;
  tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const std::uint32_t name_len = detail::read_u32(in, "name length");
    if (name_len > 4096)
      throw std::runtime_error("weights file: implausible name length.");
    t.name.resize(name_len);
    in.read(t.name.data(), name_len);
    if (in.gcount() != static_cast<std::streamsize>(name_len))
      throw std::runtime_error("weights file: truncated name.");
    const std::uint32_t rank = detail::read_u32(in, "rank");
    if (rank > 8)
      throw std::runtime_error("weights file: implausible rank.");
    t.dims.resize(rank);
    for (std::uint32_t r = 0; r < rank; ++r)
      t.dims[r] = detail::read_u32(in, "dims");
    const std::size_t n = t.element_count();
    if (n > (1u << 26))
      throw std::runtime_error("weights file: implausible tensor size.");
    t.values.resize(n);
    for (std::size_t k = 0; k < n; ++k)
      t.values[k] = static_cast<double>(detail::read_f32(in));
    tensors.push_back(std::move(t));
  }
  return tensors;
}

// Single-latent container for inversion outputs; values pass through the
// 32-bit storage grid like every other tensor in this format.
inline void save_latent_file(const std::string& path, const LatentTensor& x) {
  NamedTensor t;
  t.name = "latent";
  t.dims = {static_cast<std::uint32_t>(x.height),
            static_cast<std::uint32_t>(x.width),
            static_cast<std::uint32_t>(x.channels)};
  t.values = x.data;
  save_weights_file(path, {t});
}

inline LatentTensor load_latent_file(const std::string& path) {
  const std::vector<NamedTensor> tensors = load_weights_file(path);
  if (tensors.size() != 1 || tensors[0].name != "latent" ||
      tensors[0].dims.size() != 3)
    throw std::runtime_error("latent file: '" + path +
                             "' does not hold a single latent tensor.");
  const NamedTensor& t = tensors[0];
  LatentTensor x(static_cast<int>(t.dims[0]), static_cast<int>(t.dims[1]),
                 static_cast<int>(t.dims[2]));
  x.data = t.values;
  return x;
}

}  // namespace csg
