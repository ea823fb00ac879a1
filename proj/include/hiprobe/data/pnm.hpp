#pragma once

// Binary netpbm: P6 (RGB) and P5 (gray), maxval 255 only.

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "hiprobe/data/sample.hpp"
#include "hiprobe/error.hpp"

namespace hiprobe {

namespace detail {

struct PnmRaster {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> payload;
};

inline std::string pnm_header(const char* magic, std::size_t w, std::size_t h) {
  return std::string(magic) + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
}

inline void write_file(const std::filesystem::path& path, const std::string& header,
                       const std::vector<std::uint8_t>& payload) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!out) throw FormatError("short write to " + path.string());
}

// Header fields are separated by whitespace; '#' starts a comment running to end of line.
inline PnmRaster read_pnm(const std::filesystem::path& path, const char* magic, std::size_t channels) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 2 || bytes.compare(0, 2, magic) != 0) {
    throw FormatError(path.string() + ": bad magic, expected " + magic);
  }
  std::size_t pos = 2;
  auto next_number = [&]() -> std::size_t {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      throw FormatError(path.string() + ": malformed header");
    }
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos++] - '0');
      if (v > (1u << 20)) throw FormatError(path.string() + ": header value too large");
    }
    return v;
  };
  PnmRaster r;
  r.width = next_number();
  r.height = next_number();
  const std::size_t maxval = next_number();
  if (r.width == 0 || r.height == 0) throw FormatError(path.string() + ": zero image extent");
  if (maxval != 255) throw FormatError(path.string() + ": maxval " + std::to_string(maxval) + " unsupported");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw FormatError(path.string() + ": malformed header");
  }
  ++pos;
  const std::size_t expected = r.width * r.height * channels;
  if (bytes.size() - pos != expected) {
    throw FormatError(path.string() + ": payload is " + std::to_string(bytes.size() - pos) +
                      " bytes, expected " + std::to_string(expected));
  }
  r.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  return r;
}

}  // namespace detail

inline void write_ppm(const Image& image, const std::filesystem::path& path) {
  detail::write_file(path, detail::pnm_header("P6", image.width, image.height), image.rgb);
}

inline Image read_ppm(const std::filesystem::path& path) {
  auto r = detail::read_pnm(path, "P6", 3);
  Image image(r.width, r.height);
  image.rgb = std::move(r.payload);
  return image;
}

/// Mask bits are stored as 0/255.
inline void write_pgm(const BinaryMask& mask, const std::filesystem::path& path) {
  std::vector<std::uint8_t> gray(mask.bits.size());
  for (std::size_t i = 0; i < gray.size(); ++i) gray[i] = mask.bits[i] ? 255 : 0;
  detail::write_file(path, detail::pnm_header("P5", mask.width, mask.height), gray);
}

inline BinaryMask read_pgm_mask(const std::filesystem::path& path) {
  const auto r = detail::read_pnm(path, "P5", 1);
  BinaryMask mask(r.width, r.height);
  for (std::size_t i = 0; i < r.payload.size(); ++i) {
    if (r.payload[i] != 0 && r.payload[i] != 255) {
      throw FormatError(path.string() + ": mask value " + std::to_string(r.payload[i]) + " is not 0 or 255");
    }
    mask.bits[i] = r.payload[i] ? 1 : 0;
  }
  return mask;
}

/// Gray image from raw bytes, used for heatmaps.
inline void write_pgm(std::size_t width, std::size_t height, const std::vector<std::uint8_t>& gray,
                      const std::filesystem::path& path) {
  if (gray.size() != width * height) throw InvalidArgument("write_pgm: size mismatch");
  detail::write_file(path, detail::pnm_header("P5", width, height), gray);
}

}  // namespace hiprobe
