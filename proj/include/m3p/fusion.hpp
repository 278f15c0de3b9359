#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "m3p/data.hpp"
#include "m3p/encoders.hpp"
#include "m3p/nn.hpp"

namespace m3p {

/// Conditional vision-language memory: text states query the vision states.
///   e = s + W_O concat_a softmax((W_Q^a LN(s)) (W_K^a h)^T / sqrt(d/A)) (W_V^a h)
/// The output has one vector per text position.
template <class T>
struct ConditionalMemory {
  LayerNorm<T> ln_query;
  MultiHeadAttention<T> attn;

  ConditionalMemory() = default;
  ConditionalMemory(ParamStore<T>& ps, std::size_t d, std::size_t heads)
      : ln_query(ps, "cvlm.ln_query", d), attn(ps, "cvlm.attn", d, heads) {}

  /// Cross-attention output before the residual is added.
  Tensor<T> attend(const EncoderStates<T>& text, const EncoderStates<T>& vision,
                   Tensor<T>* probs = nullptr) const {
    if (text.hidden.rank() != 3 || vision.hidden.rank() != 3 || text.hidden.dim(2) != vision.hidden.dim(2))
      throw ShapeError("cvlm: hidden sizes differ: " + shape_str(text.hidden.shape()) + " vs " +
                       shape_str(vision.hidden.shape()));
    if (text.hidden.dim(0) != vision.hidden.dim(0)) throw ShapeError("cvlm: batch sizes differ");
    return attn(ln_query(text.hidden), vision.hidden, vision.valid, false, probs);
  }

  EncoderStates<T> operator()(const EncoderStates<T>& text, const EncoderStates<T>& vision,
                              Tensor<T>* probs = nullptr) const {
    return {add(text.hidden, attend(text, vision, probs)), text.valid};
  }
};

/// Pre-norm decoder block: causal self-attention, cross-attention over the
/// memory, feed-forward.
template <class T>
struct DecoderLayer {
  LayerNorm<T> ln_self, ln_cross, ln_ffn;
  MultiHeadAttention<T> self_attn, cross_attn;
  FeedForward<T> ffn;
  double dropout = 0.0;

  DecoderLayer() = default;
  DecoderLayer(ParamStore<T>& ps, const std::string& name, const EncoderConfig& c)
      : ln_self(ps, name + ".ln_self", c.d_model),
        ln_cross(ps, name + ".ln_cross", c.d_model),
        ln_ffn(ps, name + ".ln_ffn", c.d_model),
        self_attn(ps, name + ".self", c.d_model, c.heads),
        cross_attn(ps, name + ".cross", c.d_model, c.heads),
        ffn(ps, name + ".ffn", c.d_model, c.ffn),
        dropout(c.dropout) {}

  Tensor<T> operator()(const Tensor<T>& x, const std::vector<std::uint8_t>& valid,
                       const EncoderStates<T>& memory, ForwardContext& ctx) const {
    const Tensor<T> h = ln_self(x);
    Tensor<T> y = add(x, drop(self_attn(h, h, valid, true), ctx));
    y = add(y, drop(cross_attn(ln_cross(y), memory.hidden, memory.valid, false), ctx));
    return add(y, drop(ffn(ln_ffn(y)), ctx));
  }

  Tensor<T> drop(const Tensor<T>& x, ForwardContext& ctx) const {
    if (!ctx.training || dropout <= 0.0) return x;
    return m3p::dropout(x, dropout, *ctx.rng, true);
  }
};

/// Autoregressive decoder. Inputs are token + position + target-language tag
/// embeddings; output logits use the shared embedding matrix.
template <class T>
struct Decoder {
  EncoderConfig cfg;
  Tensor<T> embed;
  Tensor<T> positions;
  std::vector<DecoderLayer<T>> layers;
  LayerNorm<T> ln_final;

  Decoder() = default;
  Decoder(ParamStore<T>& ps, const EncoderConfig& c, Tensor<T> shared_embedding)
      : cfg(c), embed(std::move(shared_embedding)),
        positions(ps.normal("decoder.pos", {c.max_positions, c.d_model}, kInitStd)) {
    for (std::size_t i = 0; i < c.layers; ++i)
      layers.emplace_back(ps, "decoder.layer" + std::to_string(i), c);
    ln_final = LayerNorm<T>(ps, "decoder.ln_final", c.d_model);
  }

  /// tgt_in is B x L (bos-prefixed, padded); tags holds one language tag per row.
  Tensor<T> operator()(const std::vector<TokenId>& tgt_in, std::size_t B, std::size_t L,
                       const std::vector<std::uint8_t>& valid, const std::vector<TokenId>& tags,
                       const EncoderStates<T>& memory, ForwardContext& ctx) const {
    if (tgt_in.size() != B * L || tags.size() != B) throw ShapeError("decoder: input size mismatch");
    if (L > cfg.max_positions)
      throw std::length_error("target prefix length " + std::to_string(L) + " exceeds max positions " +
                              std::to_string(cfg.max_positions));
    if (memory.hidden.dim(0) != B) throw ShapeError("decoder: memory batch mismatch");
    std::vector<TokenId> tag_rep(B * L);
    for (std::size_t b = 0; b < B; ++b) std::fill_n(tag_rep.begin() + b * L, L, tags[b]);
    Tensor<T> x = add(add(embedding(embed, tgt_in, {B, L}), embedding(embed, tag_rep, {B, L})),
                      leading_positions(positions, L));
    if (ctx.training && cfg.dropout > 0.0) x = dropout(x, cfg.dropout, *ctx.rng, true);
    for (const auto& l : layers) x = l(x, valid, memory, ctx);
    return matmul(ln_final(x), transpose(embed));
  }
};

enum class Branch { Text = 0, Image = 1, Fused = 2 };

inline const char* branch_name(Branch b) {
  switch (b) {
    case Branch::Text: return "text";
    case Branch::Image: return "image";
    case Branch::Fused: return "fused";
  }
  return "?";
}

/// Multimodal DropNet: per-step i.i.d. choice of text-only, image-only or fused training.
struct BranchSchedule {
  std::array<double, 3> probs{0.25, 0.25, 0.50};

  void validate() const {
    double s = 0;
    for (double p : probs) {
      if (p < 0.0) throw std::invalid_argument("branch probabilities must be non-negative");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("branch probabilities must sum to 1");
  }
};

inline Branch pick_branch(const BranchSchedule& schedule, CounterRng& rng) {
  const std::vector<double> q(schedule.probs.begin(), schedule.probs.end());
  return static_cast<Branch>(draw_categorical(q, rng));
}

}  // namespace m3p
