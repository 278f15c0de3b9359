#pragma once

#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "m3p/data.hpp"
#include "m3p/nn.hpp"

namespace m3p {

struct EncoderConfig {
  std::size_t layers = 2;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t ffn = 128;
  double dropout = 0.1;
  std::size_t max_positions = 64;

  void validate(const std::string& what) const {
    if (layers < 1) throw std::invalid_argument(what + ": layers must be >= 1");
    if (heads == 0 || d_model % heads != 0)
      throw std::invalid_argument(what + ": d_model must be divisible by heads");
    if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument(what + ": dropout outside [0, 1)");
    if (max_positions < 1) throw std::invalid_argument(what + ": max_positions must be >= 1");
  }
};

/// Per-position hidden vectors [B, L, d] plus validity (B*L, 1 = real token).
template <class T>
struct EncoderStates {
  Tensor<T> hidden;
  std::vector<std::uint8_t> valid;

  std::size_t batch() const { return hidden.dim(0); }
  std::size_t length() const { return hidden.dim(1); }
};

/// Rows [0, n) of a position table as an [n, d] tensor.
template <class T>
Tensor<T> leading_positions(const Tensor<T>& table, std::size_t n) {
  if (n > table.dim(0))
    throw std::length_error("sequence length " + std::to_string(n) + " exceeds max positions " +
                            std::to_string(table.dim(0)));
  std::vector<TokenId> idx(n);
  std::iota(idx.begin(), idx.end(), TokenId{0});
  return embedding(table, idx, {n});
}

/// Stack of pre-norm Transformer layers with a final layer norm.
template <class T>
struct TransformerStack {
  std::vector<EncoderLayer<T>> layers;
  LayerNorm<T> ln_final;

  TransformerStack() = default;
  TransformerStack(ParamStore<T>& ps, const std::string& name, const EncoderConfig& cfg) {
    for (std::size_t i = 0; i < cfg.layers; ++i)
      layers.emplace_back(ps, name + ".layer" + std::to_string(i), cfg.d_model, cfg.heads, cfg.ffn,
                          cfg.dropout);
    ln_final = LayerNorm<T>(ps, name + ".ln_final", cfg.d_model);
  }

  Tensor<T> operator()(Tensor<T> x, const std::vector<std::uint8_t>& valid, ForwardContext& ctx) const {
    for (const auto& l : layers) x = l(x, valid, ctx);
    return ln_final(x);
  }
};

/// Token embedding (shared matrix) + learned positions + Transformer stack.
template <class T>
struct TextEncoder {
  EncoderConfig cfg;
  Tensor<T> embed;  // shared [vocab, d]
  Tensor<T> positions;
  TransformerStack<T> stack;

  TextEncoder() = default;
  TextEncoder(ParamStore<T>& ps, const EncoderConfig& c, Tensor<T> shared_embedding)
      : cfg(c),
        embed(std::move(shared_embedding)),
        positions(ps.normal("text.pos", {c.max_positions, c.d_model}, kInitStd)),
        stack(ps, "text", c) {}

  /// ids is B x L row-major (padded), valid marks real tokens.
  EncoderStates<T> operator()(const std::vector<TokenId>& ids, std::size_t B, std::size_t L,
                              const std::vector<std::uint8_t>& valid, ForwardContext& ctx) const {
    if (ids.size() != B * L || valid.size() != B * L) throw ShapeError("encode_text: id/mask size mismatch");
    if (L > cfg.max_positions)
      throw std::length_error("source length " + std::to_string(L) + " exceeds max positions " +
                              std::to_string(cfg.max_positions));
    Tensor<T> x = add(embedding(embed, ids, {B, L}), leading_positions(positions, L));
    if (ctx.training && cfg.dropout > 0.0) x = dropout(x, cfg.dropout, *ctx.rng, true);
    return {stack(x, valid, ctx), valid};
  }
};

/// Linear patch projection + learned positions + Transformer stack.
template <class T>
struct VisionEncoder {
  EncoderConfig cfg;
  std::size_t patch_dim = 0;
  Linear<T> patch_proj;
  Tensor<T> positions;
  TransformerStack<T> stack;

  VisionEncoder() = default;
  VisionEncoder(ParamStore<T>& ps, const EncoderConfig& c, std::size_t pdim)
      : cfg(c),
        patch_dim(pdim),
        patch_proj(ps, "vision.patch", pdim, c.d_model),
        positions(ps.normal("vision.pos", {c.max_positions, c.d_model}, kInitStd)),
        stack(ps, "vision", c) {}

  /// Projected patches before position embeddings, [B, V, d].
  Tensor<T> embed_patches(const Tensor<T>& patches) const {
    if (patches.rank() != 3 || patches.dim(2) != patch_dim)
      throw ShapeError("encode_image: patches " + shape_str(patches.shape()) + " vs patch dim " +
                       std::to_string(patch_dim));
    return patch_proj(patches);
  }

  EncoderStates<T> operator()(const Tensor<T>& patches, ForwardContext& ctx) const {
    const std::size_t B = patches.dim(0), V = patches.dim(1);
    if (V > cfg.max_positions)
      throw std::length_error("patch count " + std::to_string(V) + " exceeds max positions " +
                              std::to_string(cfg.max_positions));
    Tensor<T> x = add(embed_patches(patches), leading_positions(positions, V));
    if (ctx.training && cfg.dropout > 0.0) x = dropout(x, cfg.dropout, *ctx.rng, true);
    std::vector<std::uint8_t> valid(B * V, 1);
    return {stack(x, valid, ctx), valid};
  }
};

template <class T>
Tensor<T> patches_tensor(const std::vector<float>& flat, std::size_t B, std::size_t V, std::size_t pd) {
  return Tensor<T>({B, V, pd}, std::vector<T>(flat.begin(), flat.end()));
}

}  // namespace m3p
