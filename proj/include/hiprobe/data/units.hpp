#pragma once

#include <algorithm>
#include <vector>

#include "hiprobe/data/sample.hpp"

namespace hiprobe {

/// One (sample, key object) pair: the unit of scoring, training and evaluation.
struct CaptionUnit {
  const Sample* sample = nullptr;
  std::size_t object = 0;
};

/// All units of the given samples, ordered by sample id then object index.
inline std::vector<CaptionUnit> caption_units(const std::vector<const Sample*>& samples) {
  std::vector<CaptionUnit> out;
  for (const auto* s : samples) {
    for (std::size_t k = 0; k < s->objects.size(); ++k) out.push_back({s, k});
  }
  std::stable_sort(out.begin(), out.end(), [](const CaptionUnit& a, const CaptionUnit& b) {
    return a.sample->id != b.sample->id ? a.sample->id < b.sample->id : a.object < b.object;
  });
  return out;
}

}  // namespace hiprobe
