#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "m3p/data.hpp"
#include "m3p/image.hpp"
#include "m3p/rng.hpp"

namespace m3p {

enum class ImageTransform { Crop, Resize, Rotate90, Cutout, ColorDistort, GaussianBlur, Sobel };

inline const std::array<std::pair<const char*, ImageTransform>, 7>& transform_names() {
  static const std::array<std::pair<const char*, ImageTransform>, 7> names{{
      {"crop", ImageTransform::Crop},
      {"resize", ImageTransform::Resize},
      {"rotate90", ImageTransform::Rotate90},
      {"cutout", ImageTransform::Cutout},
      {"color_distort", ImageTransform::ColorDistort},
      {"gaussian_blur", ImageTransform::GaussianBlur},
      {"sobel", ImageTransform::Sobel},
  }};
  return names;
}

inline ImageTransform parse_transform(const std::string& name) {
  for (const auto& [n, t] : transform_names())
    if (name == n) return t;
  throw std::invalid_argument("unknown image transform '" + name + "'");
}

inline const char* transform_name(ImageTransform t) {
  for (const auto& [n, v] : transform_names())
    if (v == t) return n;
  return "?";
}

struct AugmentConfig {
  double text_mask_fraction = 0.15;
  double mean_span_length = 3.0;
  double patch_mask_fraction = 0.25;
  std::vector<ImageTransform> transforms;

  void validate() const {
    auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!in01(text_mask_fraction) || !in01(patch_mask_fraction))
      throw std::invalid_argument("augment fractions must lie in [0, 1]");
    if (!(mean_span_length >= 1.0)) throw std::invalid_argument("mean_span_length must be >= 1");
  }
};

/// Positions eligible for masking: not the leading tag/bos, not eos, not pad.
inline std::vector<std::size_t> maskable_positions(const std::vector<TokenId>& tokens) {
  std::vector<std::size_t> pos;
  for (std::size_t i = 1; i < tokens.size(); ++i)
    if (tokens[i] != kPad && tokens[i] != kEos && tokens[i] != kBos) pos.push_back(i);
  return pos;
}

/// Replaces random contiguous spans with the mask id. Span lengths are
/// 1 + Geometric, mean `mean_span_length`; the number of masked tokens is
/// fraction * n with stochastic rounding, so its expectation is exact.
inline std::vector<TokenId> mask_text_spans(const std::vector<TokenId>& tokens,
                                            const AugmentConfig& cfg, CounterRng& rng) {
  std::vector<TokenId> out = tokens;
  const auto pos = maskable_positions(tokens);
  const std::size_t n = pos.size();
  if (n == 0 || cfg.text_mask_fraction <= 0.0) return out;
  const double want = cfg.text_mask_fraction * static_cast<double>(n);
  std::size_t target = static_cast<std::size_t>(std::floor(want));
  if (rng.uniform() < want - std::floor(want)) ++target;
  target = std::min(target, n);
  if (target == n) {
    for (auto p : pos) out[p] = kMask;
    return out;
  }
  std::vector<std::uint8_t> masked(n, 0);
  std::size_t count = 0;
  const double p_stop = 1.0 / cfg.mean_span_length;
  while (count < target) {
    std::size_t start = rng.uniform_int(n);
    std::size_t len = 1 + rng.geometric(p_stop);
    for (std::size_t k = start; k < n && len > 0 && count < target; ++k, --len) {
      if (!masked[k]) {
        masked[k] = 1;
        ++count;
      }
    }
  }
  for (std::size_t k = 0; k < n; ++k)
    if (masked[k]) out[pos[k]] = kMask;
  return out;
}

/// Zeroes floor(fraction * V) patches chosen uniformly without replacement.
inline PatchGrid mask_image_patches(const PatchGrid& grid, const AugmentConfig& cfg, CounterRng& rng) {
  PatchGrid out = grid;
  const std::size_t V = grid.num_patches();
  const std::size_t k = static_cast<std::size_t>(std::floor(cfg.patch_mask_fraction * static_cast<double>(V) + 1e-9));
  if (k == 0) return out;
  std::vector<std::size_t> order(V);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) std::swap(order[i], order[i + rng.uniform_int(V - i)]);
  const std::size_t pd = grid.patch_dim();
  for (std::size_t i = 0; i < k; ++i)
    std::fill_n(out.patches.begin() + order[i] * pd, pd, 0.f);
  return out;
}

// ------------------------------------------------------------ pixel transforms

/// Rotates counter-clockwise by 90 degrees `quarter_turns` times.
inline Image rotate90(const Image& img, int quarter_turns) {
  Image cur = img;
  const int turns = ((quarter_turns % 4) + 4) % 4;
  for (int t = 0; t < turns; ++t) {
    Image next(cur.width, cur.height, cur.channels);
    for (std::size_t y = 0; y < cur.height; ++y)
      for (std::size_t x = 0; x < cur.width; ++x)
        for (std::size_t c = 0; c < cur.channels; ++c)
          next.at(cur.width - 1 - x, y, c) = cur.at(y, x, c);
    cur = std::move(next);
  }
  return cur;
}

/// Zeroes the window [y0, y0+h) x [x0, x0+w), clipped to the image.
inline Image cutout(const Image& img, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  Image out = img;
  for (std::size_t y = y0; y < std::min(img.height, y0 + h); ++y)
    for (std::size_t x = x0; x < std::min(img.width, x0 + w); ++x)
      for (std::size_t c = 0; c < img.channels; ++c) out.at(y, x, c) = 0.f;
  return out;
}

/// Nearest-neighbour resample of the window back to full size.
inline Image crop_resize(const Image& img, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  Image out(img.height, img.width, img.channels);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const std::size_t sy = std::min(img.height - 1, y0 + y * h / img.height);
      const std::size_t sx = std::min(img.width - 1, x0 + x * w / img.width);
      for (std::size_t c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(sy, sx, c);
    }
  return out;
}

/// 3x3 convolution per channel with clamped borders.
inline Image convolve3x3(const Image& img, const std::array<float, 9>& k) {
  Image out(img.height, img.width, img.channels);
  const long H = static_cast<long>(img.height), W = static_cast<long>(img.width);
  for (long y = 0; y < H; ++y)
    for (long x = 0; x < W; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) {
        float acc = 0.f;
        for (long dy = -1; dy <= 1; ++dy)
          for (long dx = -1; dx <= 1; ++dx) {
            const long sy = std::clamp(y + dy, 0L, H - 1), sx = std::clamp(x + dx, 0L, W - 1);
            acc += k[static_cast<std::size_t>((dy + 1) * 3 + (dx + 1))] *
                   img.at(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx), c);
          }
        out.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c) = acc;
      }
  return out;
}

inline Image gaussian_blur(const Image& img) {
  // sigma = 1, normalised
  const float a = std::exp(-1.f), b = std::exp(-0.5f), z = 1.f + 4.f * b + 4.f * a;
  return convolve3x3(img, {a / z, b / z, a / z, b / z, 1.f / z, b / z, a / z, b / z, a / z});
}

/// Per-channel Sobel gradient magnitude, clamped to [0, 1].
inline Image sobel(const Image& img) {
  const Image gx = convolve3x3(img, {-1, 0, 1, -2, 0, 2, -1, 0, 1});
  const Image gy = convolve3x3(img, {-1, -2, -1, 0, 0, 0, 1, 2, 1});
  Image out(img.height, img.width, img.channels);
  for (std::size_t i = 0; i < out.pixels.size(); ++i)
    out.pixels[i] = std::min(1.f, std::sqrt(gx.pixels[i] * gx.pixels[i] + gy.pixels[i] * gy.pixels[i]));
  return out;
}

inline Image color_distort(const Image& img, float brightness, float contrast) {
  Image out = img;
  double m = 0;
  for (float v : img.pixels) m += v;
  m /= static_cast<double>(std::max<std::size_t>(1, img.pixels.size()));
  for (auto& v : out.pixels)
    v = std::clamp(static_cast<float>((v - m) * contrast + m) * brightness, 0.f, 1.f);
  return out;
}

/// Random instance of `t`; output keeps the input dimensions.
inline Image transform_image(const Image& img, ImageTransform t, CounterRng& rng) {
  switch (t) {
    case ImageTransform::Crop: {
      const std::size_t h = std::max<std::size_t>(1, img.height / 2 + rng.uniform_int(img.height / 2 + 1));
      const std::size_t w = std::max<std::size_t>(1, img.width / 2 + rng.uniform_int(img.width / 2 + 1));
      const std::size_t hh = std::min(h, img.height), ww = std::min(w, img.width);
      return crop_resize(img, rng.uniform_int(img.height - hh + 1), rng.uniform_int(img.width - ww + 1), hh, ww);
    }
    case ImageTransform::Resize: {
      // downsample by 2 then back up
      const std::size_t f = 2;
      Image out(img.height, img.width, img.channels);
      for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x)
          for (std::size_t c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y / f * f, x / f * f, c);
      return out;
    }
    case ImageTransform::Rotate90: {
      const int turns = img.height == img.width ? 1 + static_cast<int>(rng.uniform_int(3)) : 2;
      return rotate90(img, turns);
    }
    case ImageTransform::Cutout: {
      const std::size_t h = 1 + rng.uniform_int(std::max<std::size_t>(1, img.height / 2));
      const std::size_t w = 1 + rng.uniform_int(std::max<std::size_t>(1, img.width / 2));
      return cutout(img, rng.uniform_int(img.height), rng.uniform_int(img.width), h, w);
    }
    case ImageTransform::ColorDistort: {
      const float br = static_cast<float>(0.6 + 0.8 * rng.uniform());
      const float ct = static_cast<float>(0.6 + 0.8 * rng.uniform());
      return color_distort(img, br, ct);
    }
    case ImageTransform::GaussianBlur: return gaussian_blur(img);
    case ImageTransform::Sobel: return sobel(img);
  }
  throw std::invalid_argument("unknown image transform");
}

/// Transform id given as an integer (e.g. from a config file).
inline Image transform_image(const Image& img, int transform_id, CounterRng& rng) {
  if (transform_id < 0 || transform_id > static_cast<int>(ImageTransform::Sobel))
    throw std::invalid_argument("unknown image transform id " + std::to_string(transform_id));
  return transform_image(img, static_cast<ImageTransform>(transform_id), rng);
}

}  // namespace m3p
