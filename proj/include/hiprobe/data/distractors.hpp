#pragma once

#include <algorithm>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "hiprobe/autodiff/rng.hpp"
#include "hiprobe/data/sample.hpp"
#include "hiprobe/error.hpp"

namespace hiprobe {

/// Every caption in the samples, sorted and deduplicated.
inline std::vector<std::string> caption_pool(const std::vector<const Sample*>& samples) {
  std::set<std::string> seen;
  for (const auto* s : samples) {
    for (const auto& o : s->objects) seen.insert(o.caption);
  }
  return {seen.begin(), seen.end()};
}

/// k wrong captions for one object, uniform without replacement. Captions of
/// any object in the same image are excluded, so no wrong option describes
/// something that is actually visible.
inline std::vector<std::string> draw_distractors(const Sample& sample, std::size_t object_index,
                                                 const std::vector<std::string>& pool, std::uint64_t seed,
                                                 std::size_t k = 3) {
  if (object_index >= sample.objects.size()) {
    throw InvalidArgument("draw_distractors: object index out of range for sample " + sample.id);
  }
  std::set<std::string> excluded;
  for (const auto& o : sample.objects) excluded.insert(o.caption);
  std::set<std::string> unique(pool.begin(), pool.end());
  std::vector<std::string> eligible;
  for (const auto& c : unique) {
    if (!excluded.count(c)) eligible.push_back(c);
  }
  if (eligible.size() < k) {
    throw InvalidArgument("draw_distractors: pool has " + std::to_string(eligible.size()) +
                          " eligible captions for sample " + sample.id + ", need " + std::to_string(k));
  }
  Rng rng(seed);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + rng.below(eligible.size() - i);
    std::swap(eligible[i], eligible[j]);
  }
  eligible.resize(k);
  return eligible;
}

}  // namespace hiprobe
