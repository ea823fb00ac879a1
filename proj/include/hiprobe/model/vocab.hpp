#pragma once

#include <array>
#include <cstddef>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "hiprobe/error.hpp"

namespace hiprobe {

using TokenId = std::size_t;

/// Fixed word-level vocabulary. Ids follow the order of the word list and
/// never change between runs.
class Vocabulary {
 public:
  static constexpr std::string_view kPad = "<pad>";
  static constexpr std::string_view kBos = "<bos>";
  static constexpr std::string_view kEos = "<eos>";
  static constexpr std::string_view kImg = "<img>";
  static constexpr std::string_view kUser = "<user>";
  static constexpr std::string_view kAssistant = "<assistant>";
  static constexpr std::array<std::string_view, 4> kOptionLabels{"A", "B", "C", "D"};
  static constexpr std::array<std::string_view, 4> kColors{"red", "green", "blue", "yellow"};
  static constexpr std::array<std::string_view, 4> kShapes{"square", "circle", "triangle", "cross"};
  static constexpr std::array<std::string_view, 2> kSizes{"small", "large"};

  static const Vocabulary& standard() {
    static const Vocabulary vocab = build();
    return vocab;
  }

  std::size_t size() const { return words_.size(); }

  bool contains(std::string_view word) const { return ids_.count(std::string(word)) != 0; }

  TokenId id(std::string_view word) const {
    auto it = ids_.find(std::string(word));
    if (it == ids_.end()) throw InvalidArgument("unknown word '" + std::string(word) + "'");
    return it->second;
  }

  const std::string& word(TokenId id) const {
    if (id >= words_.size()) throw InvalidArgument("token id " + std::to_string(id) + " out of range");
    return words_[id];
  }

  /// One id per whitespace-separated word.
  std::vector<TokenId> tokenize(std::string_view text) const {
    std::vector<TokenId> ids;
    std::istringstream in{std::string(text)};
    std::string w;
    while (in >> w) ids.push_back(id(w));
    return ids;
  }

  std::string detokenize(const std::vector<TokenId>& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += word(ids[i]);
    }
    return out;
  }

  const std::vector<std::string>& words() const { return words_; }

 private:
  static Vocabulary build() {
    Vocabulary v;
    auto add = [&v](std::string_view w) {
      v.ids_.emplace(std::string(w), v.words_.size());
      v.words_.emplace_back(w);
    };
    for (auto w : {kPad, kBos, kEos, kImg, kUser, kAssistant}) add(w);
    for (auto w : kOptionLabels) add(w);
    for (auto w : kColors) add(w);
    for (auto w : kShapes) add(w);
    for (auto w : kSizes) add(w);
    for (auto w : {"a", "this", "is", "photo", "of", "what", "describe", "shown", "in", "choose",
                   "one", "the", "options"}) {
      add(w);
    }
    return v;
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> ids_;
};

}  // namespace hiprobe
