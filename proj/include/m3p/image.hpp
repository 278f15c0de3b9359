#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace m3p {

/// H x W x C image, channel-interleaved row-major, values in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c, float fill = 0.f)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

  float& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }
  bool operator==(const Image&) const = default;
};

/// Flattened non-overlapping P x P patches of an image.
/// Patch v = (row-major grid position); inside a patch values run (y, x, c).
struct PatchGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::size_t patch = 0;
  std::vector<float> patches;  // V x patch_dim

  std::size_t grid_rows() const { return height / patch; }
  std::size_t grid_cols() const { return width / patch; }
  std::size_t num_patches() const { return grid_rows() * grid_cols(); }
  std::size_t patch_dim() const { return patch * patch * channels; }
  bool operator==(const PatchGrid&) const = default;
};

inline PatchGrid patchify(const Image& img, std::size_t P) {
  if (P == 0 || img.height % P != 0 || img.width % P != 0)
    throw std::invalid_argument("patchify: patch size " + std::to_string(P) + " does not divide " +
                                std::to_string(img.height) + "x" + std::to_string(img.width));
  PatchGrid g{img.height, img.width, img.channels, P, {}};
  g.patches.reserve(img.pixels.size());
  for (std::size_t gr = 0; gr < g.grid_rows(); ++gr)
    for (std::size_t gc = 0; gc < g.grid_cols(); ++gc)
      for (std::size_t y = 0; y < P; ++y) {
        const float* row = &img.pixels[((gr * P + y) * img.width + gc * P) * img.channels];
        g.patches.insert(g.patches.end(), row, row + P * img.channels);
      }
  return g;
}

inline Image unpatchify(const PatchGrid& g) {
  Image img(g.height, g.width, g.channels);
  const std::size_t P = g.patch;
  std::size_t i = 0;
  for (std::size_t gr = 0; gr < g.grid_rows(); ++gr)
    for (std::size_t gc = 0; gc < g.grid_cols(); ++gc)
      for (std::size_t y = 0; y < P; ++y) {
        float* row = &img.pixels[((gr * P + y) * img.width + gc * P) * img.channels];
        std::copy_n(g.patches.begin() + i, P * g.channels, row);
        i += P * g.channels;
      }
  return img;
}

// ---------------------------------------------------------------- PPM / base64

inline std::string encode_ppm(const Image& img) {
  if (img.channels != 3 && img.channels != 1) throw std::invalid_argument("PPM needs 1 or 3 channels");
  std::ostringstream os;
  os << (img.channels == 3 ? "P6" : "P5") << '\n' << img.width << ' ' << img.height << "\n255\n";
  std::string body(img.pixels.size(), '\0');
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    float v = std::clamp(img.pixels[i], 0.f, 1.f);
    body[i] = static_cast<char>(static_cast<std::uint8_t>(v * 255.f + 0.5f));
  }
  os << body;
  return os.str();
}

inline Image decode_ppm(std::string_view bytes) {
  std::size_t pos = 0;
  auto next_token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return std::string(bytes.substr(start, pos - start));
  };
  const std::string magic = next_token();
  if (magic != "P6" && magic != "P5") throw std::runtime_error("not a binary PPM/PGM image");
  const std::size_t w = std::stoul(next_token());
  const std::size_t h = std::stoul(next_token());
  const unsigned long maxval = std::stoul(next_token());
  if (maxval == 0 || maxval > 255) throw std::runtime_error("only 8-bit PPM is supported");
  ++pos;  // single whitespace after maxval
  const std::size_t c = magic == "P6" ? 3 : 1;
  if (bytes.size() < pos + w * h * c) throw std::runtime_error("truncated PPM data");
  Image img(h, w, c);
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    img.pixels[i] = static_cast<float>(static_cast<std::uint8_t>(bytes[pos + i])) /
                    static_cast<float>(maxval);
  return img;
}

inline Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open image " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_ppm(bytes);
}

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write image " + path);
  out << encode_ppm(img);
}

inline std::string base64_encode(std::string_view in) {
  static constexpr char tbl[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < in.size(); i += 3) {
    const std::uint32_t v = (std::uint8_t(in[i]) << 16) | (std::uint8_t(in[i + 1]) << 8) | std::uint8_t(in[i + 2]);
    out += {tbl[v >> 18], tbl[(v >> 12) & 63], tbl[(v >> 6) & 63], tbl[v & 63]};
  }
  if (i + 1 == in.size()) {
    const std::uint32_t v = std::uint8_t(in[i]) << 16;
    out += {tbl[v >> 18], tbl[(v >> 12) & 63], '=', '='};
  } else if (i + 2 == in.size()) {
    const std::uint32_t v = (std::uint8_t(in[i]) << 16) | (std::uint8_t(in[i + 1]) << 8);
    out += {tbl[v >> 18], tbl[(v >> 12) & 63], tbl[(v >> 6) & 63], '='};
  }
  return out;
}

inline std::string base64_decode(std::string_view in) {
  auto val = [](char ch) -> int {
    if (ch >= 'A' && ch <= 'Z') return ch - 'A';
    if (ch >= 'a' && ch <= 'z') return ch - 'a' + 26;
    if (ch >= '0' && ch <= '9') return ch - '0' + 52;
    if (ch == '+') return 62;
    if (ch == '/') return 63;
    return -1;
  };
  std::string out;
  std::uint32_t buf = 0;
  int bits = 0;
  for (char ch : in) {
    if (ch == '=' || std::isspace(static_cast<unsigned char>(ch))) continue;
    const int v = val(ch);
    if (v < 0) throw std::runtime_error("invalid base64 character");
    buf = (buf << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<char>((buf >> bits) & 0xff));
    }
  }
  return out;
}

}  // namespace m3p
