#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <span>
#include <sstream>
#include <string>
#include <string_view>

#include "hiprobe/autodiff/tensor.hpp"
#include "hiprobe/error.hpp"

namespace hiprobe {

/// 64-bit FNV-1a. Not cryptographic; used for change detection only.
class Fnv1a {
 public:
  Fnv1a& update(std::span<const std::uint8_t> bytes) {
    for (auto b : bytes) {
      state_ ^= b;
      state_ *= 0x100000001b3ULL;
    }
    return *this;
  }
  Fnv1a& update(std::string_view text) {
    return update(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }
  Fnv1a& update(std::uint64_t word) {
    std::uint8_t bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<std::uint8_t>(word >> (8 * i));
    return update(std::span<const std::uint8_t>(bytes, 8));
  }
  Fnv1a& update(const Tensor& t) {
    for (auto extent : t.shape()) update(static_cast<std::uint64_t>(extent));
    for (double v : t.data()) update(std::bit_cast<std::uint64_t>(v));
    return *this;
  }

  std::uint64_t digest() const { return state_; }

  std::string hex() const {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << state_;
    return os.str();
  }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return Fnv1a().update(buf.str()).hex();
}

}  // namespace hiprobe
