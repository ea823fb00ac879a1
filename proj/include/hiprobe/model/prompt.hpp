#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "hiprobe/data/sample.hpp"
#include "hiprobe/error.hpp"
#include "hiprobe/model/config.hpp"
#include "hiprobe/model/vocab.hpp"

namespace hiprobe {

/// Half-open index range [begin, end).
struct TokenRange {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool empty() const { return end <= begin; }
  bool contains(std::size_t i) const { return i >= begin && i < end; }

  friend bool operator==(const TokenRange&, const TokenRange&) = default;
};

enum class PromptMode { caption, vqa };

// Template words. The assistant caption reads "this is a photo of {object}",
// where {object} is the object description "a <size> <color> <shape>".
inline constexpr const char* kCaptionUserText = "what is this photo";
inline constexpr const char* kCaptionAssistantPrefix = "this is a photo of";
inline constexpr const char* kVqaUserText = "what is shown in this photo choose one of the options";

/// Token sequence plus the index ranges the analysis needs.
struct PromptLayout {
  PromptMode mode = PromptMode::caption;
  std::vector<TokenId> tokens;
  TokenRange visual;   // image placeholder tokens
  TokenRange user;     // user instruction text (including options in VQA mode)
  TokenRange caption;  // object description inside the assistant reply (caption mode)
  std::optional<std::size_t> label_position;  // answer letter (VQA mode)
  std::optional<std::size_t> correct_option;  // 0..3 (VQA mode)
  std::size_t grid_rows = 0;
  std::size_t grid_cols = 0;

  std::size_t size() const { return tokens.size(); }

  /// Throws if the layout breaks an ordering or bounds invariant.
  void validate(const ModelConfig& config) const {
    auto fail = [](const std::string& what) { throw InvalidArgument("PromptLayout: " + what); };
    if (tokens.size() > config.max_seq_len) {
      fail("sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_seq_len " +
           std::to_string(config.max_seq_len));
    }
    if (visual.size() != config.visual_tokens() || grid_rows * grid_cols != visual.size()) {
      fail("visual range does not match the visual token grid");
    }
    if (visual.begin == 0 || visual.end > user.begin || user.end > tokens.size()) {
      fail("ranges out of order or out of bounds");
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (tokens[i] >= config.vocab_size) fail("token id outside vocabulary");
    }
    if (mode == PromptMode::caption) {
      if (caption.empty()) fail("caption range is empty");
      if (caption.begin < user.end || caption.end > tokens.size()) fail("caption range misplaced");
    } else {
      if (!label_position || *label_position <= user.end || *label_position >= tokens.size()) {
        fail("answer label position missing or out of range");
      }
    }
  }
};

struct VqaOptions {
  std::array<std::string, 4> captions;
  std::size_t correct = 0;
};

namespace detail {

inline PromptLayout prompt_head(const ModelConfig& config) {
  const auto& vocab = Vocabulary::standard();
  PromptLayout layout;
  layout.grid_rows = layout.grid_cols = config.grid_side();
  layout.tokens.push_back(vocab.id(Vocabulary::kBos));
  layout.visual.begin = layout.tokens.size();
  layout.tokens.insert(layout.tokens.end(), config.visual_tokens(), vocab.id(Vocabulary::kImg));
  layout.visual.end = layout.tokens.size();
  layout.tokens.push_back(vocab.id(Vocabulary::kUser));
  return layout;
}

inline void append(PromptLayout& layout, const std::vector<TokenId>& ids) {
  layout.tokens.insert(layout.tokens.end(), ids.begin(), ids.end());
}

}  // namespace detail

/// [BOS, IMG x N, USER, what is this photo, ASSISTANT, this is a photo of, <description>, EOS]
inline PromptLayout caption_prompt(const std::string& description, const ModelConfig& config) {
  const auto& vocab = Vocabulary::standard();
  const auto desc = vocab.tokenize(description);
  if (desc.empty()) throw InvalidArgument("caption_prompt: empty object description");
  PromptLayout layout = detail::prompt_head(config);
  layout.mode = PromptMode::caption;
  layout.user.begin = layout.tokens.size();
  detail::append(layout, vocab.tokenize(kCaptionUserText));
  layout.user.end = layout.tokens.size();
  layout.tokens.push_back(vocab.id(Vocabulary::kAssistant));
  detail::append(layout, vocab.tokenize(kCaptionAssistantPrefix));
  layout.caption.begin = layout.tokens.size();
  detail::append(layout, desc);
  layout.caption.end = layout.tokens.size();
  layout.tokens.push_back(vocab.id(Vocabulary::kEos));
  layout.validate(config);
  return layout;
}

/// [BOS, IMG x N, USER, <question>, A <opt> B <opt> C <opt> D <opt>, ASSISTANT, <label>, EOS]
inline PromptLayout vqa_prompt(const VqaOptions& options, const ModelConfig& config) {
  const auto& vocab = Vocabulary::standard();
  if (options.correct >= options.captions.size()) {
    throw InvalidArgument("vqa_prompt: correct option index out of range");
  }
  PromptLayout layout = detail::prompt_head(config);
  layout.mode = PromptMode::vqa;
  layout.user.begin = layout.tokens.size();
  detail::append(layout, vocab.tokenize(kVqaUserText));
  for (std::size_t i = 0; i < options.captions.size(); ++i) {
    const auto ids = vocab.tokenize(options.captions[i]);
    if (ids.empty()) throw InvalidArgument("vqa_prompt: empty option text");
    layout.tokens.push_back(vocab.id(Vocabulary::kOptionLabels[i]));
    detail::append(layout, ids);
  }
  layout.user.end = layout.tokens.size();
  layout.tokens.push_back(vocab.id(Vocabulary::kAssistant));
  layout.label_position = layout.tokens.size();
  layout.correct_option = options.correct;
  layout.tokens.push_back(vocab.id(Vocabulary::kOptionLabels[options.correct]));
  layout.tokens.push_back(vocab.id(Vocabulary::kEos));
  layout.validate(config);
  return layout;
}

/// Prompt for one key object of a sample. VQA mode needs the four options,
/// exactly one of which (the correct one) is the object's own caption.
inline PromptLayout assemble_prompt(const Sample& sample, std::size_t object_index, PromptMode mode,
                                    const ModelConfig& config,
                                    const std::optional<VqaOptions>& options = std::nullopt) {
  if (object_index >= sample.objects.size()) {
    throw InvalidArgument("assemble_prompt: object index " + std::to_string(object_index) +
                          " out of range for sample " + sample.id);
  }
  const std::string& caption = sample.objects[object_index].caption;
  if (mode == PromptMode::caption) return caption_prompt(caption, config);
  if (!options) throw InvalidArgument("assemble_prompt: VQA mode requires four answer options");
  for (std::size_t i = 0; i < options->captions.size(); ++i) {
    const bool is_correct = options->captions[i] == caption;
    if (is_correct != (i == options->correct)) {
      throw InvalidArgument("assemble_prompt: options must contain the object's caption exactly once, at the correct index");
    }
  }
  return vqa_prompt(*options, config);
}

}  // namespace hiprobe
