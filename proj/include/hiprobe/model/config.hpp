#pragma once

#include <cstddef>
#include <string>

#include <json.hpp>

#include "hiprobe/error.hpp"
#include "hiprobe/model/vocab.hpp"

namespace hiprobe {

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t head_dim = 16;
  std::size_t ffn_dim = 128;
  std::size_t vocab_size = Vocabulary::standard().size();
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t max_seq_len = 64;

  std::size_t grid_side() const { return image_size / patch_size; }
  std::size_t visual_tokens() const { return grid_side() * grid_side(); }
  std::size_t patch_dim() const { return patch_size * patch_size * 3; }

  void validate() const {
    auto fail = [](const std::string& what) { throw InvalidArgument("ModelConfig: " + what); };
    if (!d_model || !n_layers || !n_heads || !head_dim || !ffn_dim || !vocab_size || !image_size ||
        !patch_size || !max_seq_len) {
      fail("all sizes must be positive");
    }
    if (n_heads * head_dim != d_model) fail("n_heads * head_dim must equal d_model");
    if (image_size % patch_size != 0) fail("image_size must be divisible by patch_size");
    if (visual_tokens() + 2 > max_seq_len) fail("max_seq_len too small for the visual tokens");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"d_model", c.d_model},       {"n_layers", c.n_layers},
                     {"n_heads", c.n_heads},       {"head_dim", c.head_dim},
                     {"ffn_dim", c.ffn_dim},       {"vocab_size", c.vocab_size},
                     {"image_size", c.image_size}, {"patch_size", c.patch_size},
                     {"max_seq_len", c.max_seq_len}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("d_model").get_to(c.d_model);
  j.at("n_layers").get_to(c.n_layers);
  j.at("n_heads").get_to(c.n_heads);
  j.at("head_dim").get_to(c.head_dim);
  j.at("ffn_dim").get_to(c.ffn_dim);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("image_size").get_to(c.image_size);
  j.at("patch_size").get_to(c.patch_size);
  j.at("max_seq_len").get_to(c.max_seq_len);
}

}  // namespace hiprobe
