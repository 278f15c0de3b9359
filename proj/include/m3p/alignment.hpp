#pragma once

#include <stdexcept>
#include <utility>
#include <vector>

#include "m3p/augment.hpp"
#include "m3p/data.hpp"
#include "m3p/encoders.hpp"
#include "m3p/nn.hpp"

namespace m3p {

/// Masked mean over positions, linear projection, L2 normalisation -> [B, d].
template <class T>
Tensor<T> pool(const EncoderStates<T>& states, const Linear<T>& projection,
               const std::vector<std::uint8_t>& keep) {
  return l2_normalize(projection(masked_mean(states.hidden, keep)));
}

template <class T>
Tensor<T> pool(const EncoderStates<T>& states, const Linear<T>& projection) {
  return pool(states, projection, states.valid);
}

/// Symmetric InfoNCE with in-batch negatives:
///   (1/B) sum_k [ -log softmax_j(z_k . x_j / tau)[k] - log softmax_j(x_k . z_j / tau)[k] ]
template <class T>
Tensor<T> info_nce(const Tensor<T>& text_emb, const Tensor<T>& image_emb, double tau) {
  if (text_emb.rank() != 2 || text_emb.shape() != image_emb.shape())
    throw ShapeError("info_nce: embeddings must both be [B, d], got " + shape_str(text_emb.shape()) +
                     " and " + shape_str(image_emb.shape()));
  if (!(tau > 0.0)) throw std::invalid_argument("info_nce: temperature must be positive");
  const std::size_t B = text_emb.dim(0);
  std::vector<TokenId> diag(B);
  std::iota(diag.begin(), diag.end(), TokenId{0});
  // logits[k][j] = x_k . z_j / tau
  const Tensor<T> logits = scale(matmul(text_emb, transpose(image_emb)), static_cast<T>(1.0 / tau));
  const Tensor<T> text_to_image = cross_entropy_label_smoothed(logits, diag, 0.0, -1);
  const Tensor<T> image_to_text = cross_entropy_label_smoothed(transpose(logits), diag, 0.0, -1);
  return add(image_to_text, text_to_image);
}

/// Augmented (text, image) views of one sample for the contrastive branch.
struct AugmentedViews {
  std::vector<TokenId> text;
  PatchGrid image;
};

inline AugmentedViews augmented_views(const Sample& s, const AugmentConfig& cfg, CounterRng& rng) {
  AugmentedViews v;
  v.text = mask_text_spans(s.src_tokens, cfg, rng);
  if (cfg.transforms.empty()) {
    v.image = mask_image_patches(*s.image, cfg, rng);
  } else {
    const auto t = cfg.transforms[rng.uniform_int(cfg.transforms.size())];
    const Image img = transform_image(unpatchify(*s.image), t, rng);
    v.image = mask_image_patches(patchify(img, s.image->patch), cfg, rng);
  }
  return v;
}

}  // namespace m3p
