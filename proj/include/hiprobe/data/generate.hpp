#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "hiprobe/autodiff/rng.hpp"
#include "hiprobe/data/sample.hpp"
#include "hiprobe/error.hpp"
#include "hiprobe/model/vocab.hpp"

namespace hiprobe {

inline constexpr std::size_t kCanvasSide = 32;
inline constexpr std::size_t kMaxObjects = 3;
inline constexpr int kPlacementTries = 100;

enum class ShapeKind : std::uint8_t { square, circle, triangle, cross };
enum class ColorKind : std::uint8_t { red, green, blue, yellow };
enum class SizeKind : std::uint8_t { small, large };

inline constexpr std::array<std::uint8_t, 3> kBackground{64, 64, 64};

inline std::array<std::uint8_t, 3> color_rgb(ColorKind c) {
  switch (c) {
    case ColorKind::red: return {220, 40, 40};
    case ColorKind::green: return {40, 200, 60};
    case ColorKind::blue: return {50, 90, 230};
    case ColorKind::yellow: return {235, 215, 40};
  }
  return kBackground;
}

inline std::size_t side_pixels(SizeKind s) { return s == SizeKind::small ? 8 : 14; }

struct SceneObject {
  ShapeKind shape = ShapeKind::square;
  ColorKind color = ColorKind::red;
  SizeKind size = SizeKind::small;
  std::size_t x = 0;  // top-left corner of the bounding box
  std::size_t y = 0;

  std::size_t side() const { return side_pixels(size); }

  std::string caption() const {
    std::string out = "a ";
    out += Vocabulary::kSizes[static_cast<std::size_t>(size)];
    out += " ";
    out += Vocabulary::kColors[static_cast<std::size_t>(color)];
    out += " ";
    out += Vocabulary::kShapes[static_cast<std::size_t>(shape)];
    return out;
  }

  bool same_attributes(const SceneObject& o) const {
    return shape == o.shape && color == o.color && size == o.size;
  }

  bool overlaps(const SceneObject& o) const {
    return x < o.x + o.side() && o.x < x + side() && y < o.y + o.side() && o.y < y + side();
  }
};

struct SceneSpec {
  std::vector<SceneObject> objects;
  std::array<std::uint8_t, 3> background = kBackground;
};

/// Footprint test in box-local coordinates (col, row), s = box side.
inline bool shape_covers(ShapeKind shape, std::size_t s, std::size_t col, std::size_t row) {
  const double half = static_cast<double>(s) / 2.0;
  const double cx = static_cast<double>(col) + 0.5 - half;
  const double cy = static_cast<double>(row) + 0.5 - half;
  switch (shape) {
    case ShapeKind::square:
      return true;
    case ShapeKind::circle:
      return cx * cx + cy * cy <= half * half;
    case ShapeKind::triangle:
      // apex at the top, base on the bottom row
      return std::abs(cx) <= (static_cast<double>(row) + 1.0) / 2.0;
    case ShapeKind::cross: {
      const std::size_t band = s / 3;
      const std::size_t lo = (s - band) / 2;
      return (col >= lo && col < lo + band) || (row >= lo && row < lo + band);
    }
  }
  return false;
}

/// Hard-edged raster of a scene. Masks are exactly the painted pixels.
inline Sample render_scene(const SceneSpec& scene, std::string id) {
  Sample sample;
  sample.id = std::move(id);
  sample.image = Image(kCanvasSide, kCanvasSide);
  for (std::size_t i = 0; i < kCanvasSide * kCanvasSide; ++i) {
    for (std::size_t ch = 0; ch < 3; ++ch) sample.image.rgb[i * 3 + ch] = scene.background[ch];
  }
  for (const auto& obj : scene.objects) {
    const std::size_t s = obj.side();
    if (obj.x + s > kCanvasSide || obj.y + s > kCanvasSide) {
      throw InvalidArgument("render_scene: object box leaves the canvas");
    }
    SampleObject out{BinaryMask(kCanvasSide, kCanvasSide), obj.caption()};
    const auto rgb = color_rgb(obj.color);
    for (std::size_t r = 0; r < s; ++r) {
      for (std::size_t c = 0; c < s; ++c) {
        if (!shape_covers(obj.shape, s, c, r)) continue;
        auto* px = sample.image.pixel(obj.x + c, obj.y + r);
        px[0] = rgb[0];
        px[1] = rgb[1];
        px[2] = rgb[2];
        out.mask.at(obj.x + c, obj.y + r) = 1;
      }
    }
    sample.objects.push_back(std::move(out));
  }
  return sample;
}

/// One random scene. A placement that keeps failing restarts the whole scene.
inline SceneSpec random_scene(Rng& rng) {
  for (;;) {
    SceneSpec scene;
    const std::size_t count = 1 + rng.below(kMaxObjects);
    bool placed_all = true;
    while (scene.objects.size() < count && placed_all) {
      SceneObject obj;
      obj.shape = static_cast<ShapeKind>(rng.below(4));
      obj.color = static_cast<ColorKind>(rng.below(4));
      obj.size = static_cast<SizeKind>(rng.below(2));
      bool duplicate = false;
      for (const auto& o : scene.objects) duplicate = duplicate || o.same_attributes(obj);
      if (duplicate) continue;
      placed_all = false;
      for (int attempt = 0; attempt < kPlacementTries; ++attempt) {
        obj.x = rng.below(kCanvasSide - obj.side() + 1);
        obj.y = rng.below(kCanvasSide - obj.side() + 1);
        bool clear = true;
        for (const auto& o : scene.objects) clear = clear && !o.overlaps(obj);
        if (clear) {
          placed_all = true;
          break;
        }
      }
      if (placed_all) scene.objects.push_back(obj);
    }
    if (placed_all) return scene;
  }
}

inline std::string sample_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%04zu", index);
  return buf;
}

inline std::vector<Sample> generate_dataset(std::size_t n_samples, std::uint64_t seed) {
  if (n_samples < 10) throw InvalidArgument("generate_dataset: need at least 10 samples, got " + std::to_string(n_samples));
  Rng rng(seed);
  std::vector<Sample> out;
  out.reserve(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) out.push_back(render_scene(random_scene(rng), sample_id(i)));
  return out;
}

/// Sample ids per split.
struct DatasetSplits {
  std::vector<std::string> hi;
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;

  friend bool operator==(const DatasetSplits&, const DatasetSplits&) = default;
};

/// One third for head scoring; the rest 60/15/25 into train/val/test.
inline DatasetSplits make_splits(const std::vector<Sample>& samples, std::uint64_t seed) {
  if (samples.size() < 10) throw InvalidArgument("make_splits: need at least 10 samples");
  std::vector<std::string> ids;
  ids.reserve(samples.size());
  for (const auto& s : samples) ids.push_back(s.id);
  Rng rng(seed);
  rng.shuffle(ids);
  const std::size_t n_hi = ids.size() / 3;
  const std::size_t rest = ids.size() - n_hi;
  const std::size_t n_train = rest * 60 / 100;
  const std::size_t n_val = rest * 15 / 100;
  DatasetSplits splits;
  auto it = ids.begin();
  auto take = [&it](std::vector<std::string>& dst, std::size_t n) {
    dst.assign(it, it + static_cast<std::ptrdiff_t>(n));
    it += static_cast<std::ptrdiff_t>(n);
  };
  take(splits.hi, n_hi);
  take(splits.train, n_train);
  take(splits.val, n_val);
  splits.test.assign(it, ids.end());
  return splits;
}

}  // namespace hiprobe
