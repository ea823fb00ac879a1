#pragma once

#include <cstddef>

#include "hiprobe/autodiff/tensor.hpp"
#include "hiprobe/data/sample.hpp"
#include "hiprobe/error.hpp"
#include "hiprobe/model/config.hpp"

namespace hiprobe {

struct Patches {
  Tensor vectors;  // (rows * cols, patch_size * patch_size * 3), values in [0, 1]
  std::size_t rows = 0;
  std::size_t cols = 0;
};

/// Splits an image into non-overlapping square patches in row-major patch
/// order. Each patch vector lists its pixels row-major with RGB interleaved.
inline Patches patchify(const Image& image, const ModelConfig& config) {
  const std::size_t size = config.image_size;
  const std::size_t p = config.patch_size;
  if (image.width != size || image.height != size || image.rgb.size() != size * size * 3) {
    throw ShapeError("patchify: expected " + std::to_string(size) + "x" + std::to_string(size) +
                     " RGB image, got " + std::to_string(image.width) + "x" +
                     std::to_string(image.height));
  }
  const std::size_t side = size / p;
  Patches out{Tensor({side * side, p * p * 3}), side, side};
  for (std::size_t pr = 0; pr < side; ++pr) {
    for (std::size_t pc = 0; pc < side; ++pc) {
      double* dst = out.vectors.data().data() + (pr * side + pc) * p * p * 3;
      for (std::size_t y = 0; y < p; ++y) {
        for (std::size_t x = 0; x < p; ++x) {
          const std::uint8_t* px = image.pixel(pc * p + x, pr * p + y);
          for (std::size_t ch = 0; ch < 3; ++ch) *dst++ = px[ch] / 255.0;
        }
      }
    }
  }
  return out;
}

}  // namespace hiprobe
