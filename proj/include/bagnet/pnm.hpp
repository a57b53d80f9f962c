#pragma once

// Binary PPM (P6) / PGM (P5) with maxval 255.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "bagnet/tensor.hpp"

namespace bagnet::pnm {

struct Image8 {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<std::uint8_t> pixels;  // interleaved rows, channels fastest
};

inline std::uint8_t quantize(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(v * 255.0));
}

inline void write(const std::filesystem::path& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw IoError(path.string() + ": PNM needs 1 or 3 channels");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << (img.channels == 3 ? "P6" : "P5") << '\n' << img.width << ' ' << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

inline Image8 read(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  const std::string bytes{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  std::size_t pos = 0;
  auto fail = [&](const std::string& why) {
    return IoError(path.string() + ": " + why + " at byte offset " + std::to_string(pos));
  };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&] {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos])))
      throw fail("expected a decimal header field");
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos++] - '0');
      if (v > (1u << 24)) throw fail("header field too large");
    }
    return v;
  };
  Image8 img;
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '6' && bytes[1] != '5'))
    throw fail("not a binary PPM/PGM (expected P6 or P5)");
  img.channels = bytes[1] == '6' ? 3 : 1;
  pos = 2;
  img.width = number();
  img.height = number();
  if (number() != 255) throw fail("only maxval 255 is supported");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw fail("expected whitespace after header");
  ++pos;
  const std::size_t n = img.channels * img.width * img.height;
  if (bytes.size() - pos != n)
    throw fail("expected " + std::to_string(n) + " pixel bytes, found " + std::to_string(bytes.size() - pos));
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  return img;
}

/// [C,H,W] tensor in [0,1] -> 8-bit image.
inline Image8 from_tensor(const Tensor<float>& t) {
  Image8 img{t.dim(0), t.dim(1), t.dim(2), {}};
  img.pixels.resize(t.size());
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t i = 0; i < img.height; ++i)
      for (std::size_t j = 0; j < img.width; ++j)
        img.pixels[(i * img.width + j) * img.channels + c] = quantize(t.at(c, i, j));
  return img;
}

inline Tensor<float> to_tensor(const Image8& img) {
  Tensor<float> t({img.channels, img.height, img.width});
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t i = 0; i < img.height; ++i)
      for (std::size_t j = 0; j < img.width; ++j)
        t.at(c, i, j) = static_cast<float>(img.pixels[(i * img.width + j) * img.channels + c]) / 255.0f;
  return t;
}

}  // namespace bagnet::pnm
