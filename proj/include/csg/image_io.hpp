#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "csg/tensor.hpp"

namespace csg {

namespace detail {

inline std::uint8_t to_byte(double v) {
  // [-1, 1] -> [0, 255], clamped, round half away from zero.
  double scaled = (v + 1.0) * 0.5 * 255.0;
  if (scaled < 0.0) scaled = 0.0;
  if (scaled > 255.0) scaled = 255.0;
  return static_cast<std::uint8_t>(std::lround(scaled));
}

inline double from_byte(std::uint8_t b) {
  return static_cast<double>(b) / 255.0 * 2.0 - 1.0;
}

// Reads one whitespace-delimited header token, skipping '#' comments.
inline std::string next_token(std::istream& in) {
  std::string tok;
  int ch = in.get();
  while (ch != EOF) {
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = in.get();
    } else if (!std::isspace(ch)) {
      break;
    } else {
      ch = in.get();
    }
  }
  while (ch != EOF && !std::isspace(ch)) {
    tok.push_back(static_cast<char>(ch));
    ch = in.get();
  }
  if (tok.empty()) throw std::runtime_error("image: truncated header.");
  return tok;
}

inline int header_int(std::istream& in) {
  const std::string tok = next_token(in);
  try {
    return std::stoi(tok);
  } catch (const std::exception&) {
    throw std::runtime_error("image: bad header field '" + tok + "'.");
  }
}

}  // namespace detail

// Binary PPM (P6), values mapped from [-1, 1].
inline void write_ppm(const std::string& path, const LatentTensor& img) {
  if (img.channels != 3)
    throw std::invalid_argument("write_ppm: needs exactly 3 channels.");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_ppm: cannot open '" + path + "'.");
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<std::uint8_t> row(static_cast<std::size_t>(img.width) * 3);
  for (int h = 0; h < img.height; ++h) {
    for (int w = 0; w < img.width; ++w)
      for (int c = 0; c < 3; ++c)
        row[static_cast<std::size_t>(w) * 3 + c] = detail::to_byte(img.at(h, w, c));
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw std::runtime_error("write_ppm: short write to '" + path + "'.");
}

inline LatentTensor read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_ppm: cannot open '" + path + "'.");
  if (detail::next_token(in) != "P6")
    throw std::runtime_error("read_ppm: '" + path + "' is not binary PPM.");
  const int w = detail::header_int(in);
  const int h = detail::header_int(in);
  const int maxval = detail::header_int(in);
  if (maxval != 255)
    throw std::runtime_error("read_ppm: only maxval 255 is supported.");
  LatentTensor img(h, w, 3);
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size()))
    throw std::runtime_error("read_ppm: truncated pixel data in '" + path + "'.");
  for (std::size_t i = 0; i < buf.size(); ++i)
    img.data[i] = detail::from_byte(buf[i]);
  return img;
}

// Binary PGM (P5) for masks; values in [0, 1] map to 0..255.
inline void write_pgm(const std::string& path, const Grid& g) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_pgm: cannot open '" + path + "'.");
  out << "P5\n" << g.width << " " << g.height << "\n255\n";
  std::vector<std::uint8_t> row(static_cast<std::size_t>(g.width));
  for (int h = 0; h < g.height; ++h) {
    for (int w = 0; w < g.width; ++w) {
      double v = g.at(h, w) * 255.0;
      if (v < 0.0) v = 0.0;
      if (v > 255.0) v = 255.0;
      row[static_cast<std::size_t>(w)] = static_cast<std::uint8_t>(std::lround(v));
    }
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw std::runtime_error("write_pgm: short write to '" + path + "'.");
}

inline void write_pgm(const std::string& path, const BoolGrid& g) {
  Grid f(g.height, g.width);
  for (std::size_t i = 0; i < g.size(); ++i) f.v[i] = g.v[i] ? 1.0 : 0.0;
  write_pgm(path, f);
}

inline Grid read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_pgm: cannot open '" + path + "'.");
  if (detail::next_token(in) != "P5")
    throw std::runtime_error("read_pgm: '" + path + "' is not binary PGM.");
  const int w = detail::header_int(in);
  const int h = detail::header_int(in);
  const int maxval = detail::header_int(in);
  if (maxval != 255)
    throw std::runtime_error("read_pgm: only maxval 255 is supported.");
  Grid g(h, w);
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(w) * h);
  in.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size()))
    throw std::runtime_error("read_pgm: truncated pixel data in '" + path + "'.");
  for (std::size_t i = 0; i < buf.size(); ++i)
    g.v[i] = static_cast<double>(buf[i]) / 255.0;
  return g;
}

}  // namespace csg
