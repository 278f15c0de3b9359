#include <gtest/gtest.h>

#include "m3p/m3p.hpp"

using namespace m3p;

namespace {

Image random_image(std::size_t h, std::size_t w, std::size_t c, CounterRng& rng) {
  Image img(h, w, c);
  for (auto& p : img.pixels) p = static_cast<float>(rng.uniform());
  return img;
}

}  // namespace

TEST(Patchify, RoundTripIsExact) {
  CounterRng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const std::size_t P = 1 + rng.uniform_int(6);
    const Image img = random_image(P * (1 + rng.uniform_int(5)), P * (1 + rng.uniform_int(5)), 1 + rng.uniform_int(3), rng);
    EXPECT_EQ(unpatchify(patchify(img, P)), img);
  }
}

TEST(Patchify, PatchCountIsAreaOverPatchArea) {
  for (std::size_t P : {1u, 2u, 4u, 8u})
    for (std::size_t H = P; H <= 32; H += P)
      for (std::size_t W = P; W <= 32; W += P) {
        const auto g = patchify(Image(H, W, 3), P);
        EXPECT_EQ(g.num_patches(), H * W / (P * P));
        EXPECT_EQ(g.patches.size(), g.num_patches() * g.patch_dim());
      }
}

TEST(Patchify, PatchLayoutIsRowMajorGrid) {
  Image img(4, 4, 1);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) img.at(y, x, 0) = static_cast<float>(y * 4 + x);
  const auto g = patchify(img, 2);
  // patch 1 is the top-right 2x2 block
  EXPECT_EQ(std::vector<float>(g.patches.begin() + 4, g.patches.begin() + 8), (std::vector<float>{2, 3, 6, 7}));
}

TEST(Patchify, RejectsNonDividingPatch) {
  EXPECT_THROW(patchify(Image(10, 8, 3), 4), std::invalid_argument);
  EXPECT_THROW(patchify(Image(8, 8, 3), 0), std::invalid_argument);
}

TEST(Ppm, EncodeDecodeQuantisesTo8Bits) {
  CounterRng rng(2);
  Image img = random_image(5, 7, 3, rng);
  for (auto& p : img.pixels) p = std::round(p * 255.f) / 255.f;
  const Image back = decode_ppm(encode_ppm(img));
  ASSERT_EQ(back.pixels.size(), img.pixels.size());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) EXPECT_FLOAT_EQ(back.pixels[i], img.pixels[i]);
  EXPECT_THROW(decode_ppm("P3\n1 1\n255\n0 0 0"), std::runtime_error);
}

TEST(Base64, RoundTripAllLengths) {
  std::string s;
  for (int n = 0; n < 20; ++n) {
    EXPECT_EQ(base64_decode(base64_encode(s)), s);
    s.push_back(static_cast<char>(n * 37));
  }
  EXPECT_EQ(base64_encode("Man"), "TWFu");
  EXPECT_EQ(base64_encode("Ma"), "TWE=");
}

TEST(Transforms, KeepDimensionsAndRange) {
  CounterRng rng(3);
  const Image img = random_image(16, 16, 3, rng);
  for (const auto& [name, t] : transform_names()) {
    const Image out = transform_image(img, t, rng);
    EXPECT_EQ(out.height, 16u) << name;
    EXPECT_EQ(out.width, 16u) << name;
    for (float p : out.pixels) {
      EXPECT_GE(p, 0.f) << name;
      EXPECT_LE(p, 1.f + 1e-6f) << name;
    }
  }
  EXPECT_THROW(transform_image(img, 99, rng), std::invalid_argument);
}

TEST(Transforms, FourQuarterTurnsAreIdentity) {
  CounterRng rng(4);
  const Image img = random_image(6, 9, 2, rng);
  EXPECT_EQ(rotate90(rotate90(rotate90(rotate90(img, 1), 1), 1), 1), img);
  EXPECT_EQ(rotate90(img, 1).height, 9u);
}

TEST(Transforms, BlurPreservesConstantImages) {
  const Image flat(8, 8, 3, 0.4f);
  for (float p : gaussian_blur(flat).pixels) EXPECT_NEAR(p, 0.4f, 1e-6f);
  for (float p : sobel(flat).pixels) EXPECT_NEAR(p, 0.f, 1e-6f);
}

TEST(Masking, TextSpansHitTheExpectedFraction) {
  AugmentConfig cfg;
  std::vector<TokenId> toks{4};
  for (int i = 0; i < 40; ++i) toks.push_back(10 + i);
  toks.push_back(kEos);
  CounterRng rng(5);
  double masked = 0;
  const int trials = 4000;
  for (int t = 0; t < trials; ++t) {
    const auto out = mask_text_spans(toks, cfg, rng);
    EXPECT_EQ(out.front(), 4);
    EXPECT_EQ(out.back(), kEos);
    for (auto id : out) masked += id == kMask;
  }
  EXPECT_NEAR(masked / (trials * 40.0), cfg.text_mask_fraction, 0.005);
}

TEST(Masking, PatchCountIsFloorOfFraction) {
  AugmentConfig cfg;
  cfg.patch_mask_fraction = 0.3;
  CounterRng rng(6);
  Image img(16, 16, 3, 1.f);
  const auto g = patchify(img, 4);
  const auto out = mask_image_patches(g, cfg, rng);
  std::size_t zero = 0;
  for (std::size_t p = 0; p < 16; ++p) zero += out.patches[p * g.patch_dim()] == 0.f;
  EXPECT_EQ(zero, 4u);
}

TEST(Masking, TextFractionOverManySequences) {
  AugmentConfig cfg;
  cfg.text_mask_fraction = 0.3;
  CounterRng rng(7);
  std::vector<TokenId> toks{4};
  for (int i = 0; i < 20; ++i) toks.push_back(10 + i);
  toks.push_back(kEos);
  double masked = 0;
  for (int t = 0; t < 10000; ++t)
    for (auto id : mask_text_spans(toks, cfg, rng)) masked += id == kMask;
  EXPECT_NEAR(masked / (10000 * 20.0), 0.3, 0.02);
}

TEST(Masking, TextExtremesAndTagProtection) {
  AugmentConfig cfg;
  CounterRng rng(8);
  const std::vector<TokenId> toks{4, 10, 11, 12, kEos};
  cfg.text_mask_fraction = 0.0;
  EXPECT_EQ(mask_text_spans(toks, cfg, rng), toks);
  cfg.text_mask_fraction = 1.0;
  EXPECT_EQ(mask_text_spans(toks, cfg, rng), (std::vector<TokenId>{4, kMask, kMask, kMask, kEos}));
  cfg.text_mask_fraction = 0.9;
  for (int t = 0; t < 2000; ++t) EXPECT_EQ(mask_text_spans(toks, cfg, rng).front(), 4);
}

TEST(Masking, SameSeedSameViews) {
  AugmentConfig cfg;
  const std::vector<TokenId> toks{4, 10, 11, 12, 13, 14, 15, kEos};
  CounterRng a(9), b(9);
  EXPECT_EQ(mask_text_spans(toks, cfg, a), mask_text_spans(toks, cfg, b));
  const auto g = patchify(Image(16, 16, 3, 1.f), 4);
  EXPECT_EQ(mask_image_patches(g, cfg, a), mask_image_patches(g, cfg, b));
}

TEST(Masking, PatchPositionsAreUniform) {
  AugmentConfig cfg;  // 0.25 of 16 patches
  CounterRng rng(10);
  const auto g = patchify(Image(16, 16, 3, 1.f), 4);
  std::vector<double> hits(16, 0);
  const int trials = 10000;
  for (int t = 0; t < trials; ++t) {
    const auto out = mask_image_patches(g, cfg, rng);
    std::size_t zero = 0;
    for (std::size_t p = 0; p < 16; ++p)
      if (out.patches[p * g.patch_dim()] == 0.f) {
        hits[p] += 1;
        ++zero;
      }
    ASSERT_EQ(zero, 4u);
  }
  for (double h : hits) EXPECT_NEAR(h / trials, 0.25, 0.02);
}

TEST(Masking, PatchExtremes) {
  AugmentConfig cfg;
  CounterRng rng(11);
  const auto g = patchify(Image(8, 8, 3, 0.5f), 4);
  cfg.patch_mask_fraction = 0.0;
  EXPECT_EQ(mask_image_patches(g, cfg, rng), g);
  cfg.patch_mask_fraction = 1.0;
  for (float v : mask_image_patches(g, cfg, rng).patches) EXPECT_EQ(v, 0.f);
}

TEST(Transforms, ZeroAreaCutoutIsIdentity) {
  CounterRng rng(12);
  const Image img = random_image(8, 8, 3, rng);
  EXPECT_EQ(cutout(img, 3, 3, 0, 5), img);
}

TEST(Patchify, ConstantImageGivesIdenticalPatches) {
  const auto g = patchify(Image(4, 4, 1, 0.25f), 2);
  ASSERT_EQ(g.num_patches(), 4u);
  for (float v : g.patches) EXPECT_EQ(v, 0.25f);
}
