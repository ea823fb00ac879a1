#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace hiprobe {

/// 8-bit RGB raster, row-major, channels interleaved.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(std::size_t w, std::size_t h) : width(w), height(h), rgb(w * h * 3, 0) {}

  std::uint8_t* pixel(std::size_t x, std::size_t y) { return rgb.data() + (y * width + x) * 3; }
  const std::uint8_t* pixel(std::size_t x, std::size_t y) const {
    return rgb.data() + (y * width + x) * 3;
  }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Row-major binary raster; every entry is 0 or 1.
struct BinaryMask {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> bits;

  BinaryMask() = default;
  BinaryMask(std::size_t w, std::size_t h) : width(w), height(h), bits(w * h, 0) {}

  std::uint8_t& at(std::size_t x, std::size_t y) { return bits[y * width + x]; }
  std::uint8_t at(std::size_t x, std::size_t y) const { return bits[y * width + x]; }

  std::size_t popcount() const {
    std::size_t n = 0;
    for (auto b : bits) n += b;
    return n;
  }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

struct SampleObject {
  BinaryMask mask;
  std::string caption;

  friend bool operator==(const SampleObject&, const SampleObject&) = default;
};

/// One scene: image plus one mask and caption per key object.
struct Sample {
  std::string id;
  Image image;
  std::vector<SampleObject> objects;

  friend bool operator==(const Sample&, const Sample&) = default;
};

}  // namespace hiprobe
