#pragma once

#include <algorithm>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "m3p/alignment.hpp"
#include "m3p/data.hpp"
#include "m3p/encoders.hpp"
#include "m3p/fusion.hpp"
#include "m3p/nn.hpp"

namespace m3p {

/// How the fused branch builds the decoder memory.
enum class Fusion { Cvlm, Concat, Gated, None };

inline Fusion parse_fusion(const std::string& s) {
  if (s == "cvlm") return Fusion::Cvlm;
  if (s == "concat") return Fusion::Concat;
  if (s == "gated") return Fusion::Gated;
  if (s == "none") return Fusion::None;
  throw std::invalid_argument("unknown fusion '" + s + "' (cvlm|concat|gated|none)");
}

inline const char* fusion_name(Fusion f) {
  switch (f) {
    case Fusion::Cvlm: return "cvlm";
    case Fusion::Concat: return "concat";
    case Fusion::Gated: return "gated";
    case Fusion::None: return "none";
  }
  return "?";
}

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t patch_dim = 0;
  EncoderConfig text;
  EncoderConfig vision;
  EncoderConfig decoder;
  std::size_t cvlm_heads = 4;
  Fusion fusion = Fusion::Cvlm;
  std::uint64_t init_seed = 1;

  void validate() const {
    text.validate("text encoder");
    vision.validate("vision encoder");
    decoder.validate("decoder");
    if (vocab_size < 5) throw std::invalid_argument("vocab too small");
    if (patch_dim == 0) throw std::invalid_argument("patch_dim must be positive");
    if (text.d_model != vision.d_model || text.d_model != decoder.d_model)
      throw std::invalid_argument("text, vision and decoder must share one hidden size");
    if (cvlm_heads == 0 || text.d_model % cvlm_heads != 0)
      throw std::invalid_argument("cvlm heads must divide the hidden size");
  }
};

/// Text encoder, vision encoder, fusion, contrastive heads and decoder over
/// one shared parameter store. Text embeddings are tied everywhere.
template <class T>
class Model {
 public:
  explicit Model(const ModelConfig& cfg) : cfg_(cfg), params_(cfg.init_seed) {
    cfg_.validate();
    const std::size_t d = cfg.text.d_model;
    embed_ = params_.normal("shared.embed", {cfg.vocab_size, d}, kInitStd);
    text_ = TextEncoder<T>(params_, cfg.text, embed_);
    vision_ = VisionEncoder<T>(params_, cfg.vision, cfg.patch_dim);
    if (cfg.fusion == Fusion::Cvlm) cvlm_ = ConditionalMemory<T>(params_, d, cfg.cvlm_heads);
    if (cfg.fusion == Fusion::Gated) {
      gate_proj_ = Linear<T>(params_, "gated.proj", d, d);
      gate_ = params_.constant("gated.gate", {d}, T(0));  // per-channel, starts closed
    }
    text_proj_ = Linear<T>(params_, "align.text_proj", d, d);
    image_proj_ = Linear<T>(params_, "align.image_proj", d, d);
    decoder_ = Decoder<T>(params_, cfg.decoder, embed_);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const ConditionalMemory<T>& cvlm() const { return cvlm_; }
  const TextEncoder<T>& text_encoder() const { return text_; }
  const VisionEncoder<T>& vision_encoder() const { return vision_; }
  const Decoder<T>& decoder() const { return decoder_; }

  EncoderStates<T> encode_text(const std::vector<TokenId>& ids, std::size_t B, std::size_t L,
                               const std::vector<std::uint8_t>& valid, ForwardContext& ctx) const {
    return text_(ids, B, L, valid, ctx);
  }
  EncoderStates<T> encode_text(const Batch& b, ForwardContext& ctx) const {
    return text_(b.src, b.size, b.src_len, b.src_valid, ctx);
  }

  EncoderStates<T> encode_image(const Tensor<T>& patches, ForwardContext& ctx) const {
    return vision_(patches, ctx);
  }
  EncoderStates<T> encode_image(const Batch& b, ForwardContext& ctx) const {
    return vision_(patches_tensor<T>(b.patches, b.size, b.num_patches, b.patch_dim), ctx);
  }

  /// Decoder memory for the fused branch; `attn` receives CVLM weights when non-null.
  EncoderStates<T> fuse(const EncoderStates<T>& text, const EncoderStates<T>& vision,
                        Tensor<T>* attn = nullptr) const {
    switch (cfg_.fusion) {
      case Fusion::Cvlm: return cvlm_(text, vision, attn);
      case Fusion::Concat: {
        const std::size_t B = text.batch(), U = text.length(), V = vision.length();
        std::vector<std::uint8_t> valid;
        valid.reserve(B * (U + V));
        for (std::size_t b = 0; b < B; ++b) {
          valid.insert(valid.end(), text.valid.begin() + b * U, text.valid.begin() + (b + 1) * U);
          valid.insert(valid.end(), vision.valid.begin() + b * V, vision.valid.begin() + (b + 1) * V);
        }
        return {concat<T>({text.hidden, vision.hidden}, 1), valid};
      }
      case Fusion::Gated: {
        const std::size_t B = text.batch(), U = text.length(), d = text.hidden.dim(2);
        const Tensor<T> summary = reshape(gate_proj_(masked_mean(vision.hidden, vision.valid)), {B, 1, d});
        const Tensor<T> spread = concat(std::vector<Tensor<T>>(U, summary), 1);
        return {add(text.hidden, mul(spread, gate_)), text.valid};
      }
      case Fusion::None: return text;
    }
    throw std::logic_error("unhandled fusion mode");
  }

  Tensor<T> decode(const Batch& b, const EncoderStates<T>& memory, ForwardContext& ctx) const {
    return decoder_(b.tgt_in, b.size, b.tgt_len, b.tgt_valid, b.tgt_tags, memory, ctx);
  }
  Tensor<T> decode(const std::vector<TokenId>& prefix, std::size_t B, std::size_t L,
                   const std::vector<TokenId>& tags, const EncoderStates<T>& memory,
                   ForwardContext& ctx) const {
    std::vector<std::uint8_t> valid(B * L, 1);
    return decoder_(prefix, B, L, valid, tags, memory, ctx);
  }

  struct BranchOutput {
    Tensor<T> loss;
    Tensor<T> logits;
    std::optional<EncoderStates<T>> text;
    std::optional<EncoderStates<T>> vision;
  };

  /// Memory per branch: text -> s, image -> h, fused -> fuse(s, h).
  BranchOutput branch_forward(const Batch& b, Branch branch, double smoothing, ForwardContext& ctx) const {
    BranchOutput out;
    EncoderStates<T> memory;
    const bool need_text = branch != Branch::Image;
    const bool need_vision = branch == Branch::Image || (branch == Branch::Fused && cfg_.fusion != Fusion::None);
    if (need_text) out.text = encode_text(b, ctx);
    if (need_vision) out.vision = encode_image(b, ctx);
    switch (branch) {
      case Branch::Text: memory = *out.text; break;
      case Branch::Image: memory = *out.vision; break;
      case Branch::Fused: memory = out.vision ? fuse(*out.text, *out.vision) : *out.text; break;
    }
    out.logits = decode(b, memory, ctx);
    out.loss = cross_entropy_label_smoothed(out.logits, b.tgt_out, smoothing, kPad);
    return out;
  }

  Tensor<T> branch_loss(const Batch& b, Branch branch, double smoothing, ForwardContext& ctx) const {
    return branch_forward(b, branch, smoothing, ctx).loss;
  }

  Tensor<T> pool_text(const EncoderStates<T>& s, const std::vector<std::uint8_t>& keep) const {
    return pool(s, text_proj_, keep);
  }
  Tensor<T> pool_image(const EncoderStates<T>& s) const { return pool(s, image_proj_, s.valid); }

  /// Translation memory used at inference: fused unless this is a text-only model.
  EncoderStates<T> translation_memory(const Batch& b, ForwardContext& ctx, Tensor<T>* attn = nullptr) const {
    const auto text = encode_text(b, ctx);
    if (cfg_.fusion == Fusion::None) return text;
    return fuse(text, encode_image(b, ctx), attn);
  }

  /// Greedy decode from bos until eos or max_len new tokens, batched.
  /// Each row of the result starts with bos.
  std::vector<std::vector<TokenId>> greedy(const Batch& b, const EncoderStates<T>& memory,
                                           std::size_t max_len) const {
    NoGradGuard guard;
    ForwardContext ctx;
    const std::size_t B = b.size;
    std::vector<std::vector<TokenId>> out(B, std::vector<TokenId>{kBos});
    std::vector<bool> done(B, false);
    for (std::size_t step = 0; step < max_len; ++step) {
      const std::size_t L = step + 1;
      if (L > cfg_.decoder.max_positions) break;
      std::vector<TokenId> prefix(B * L);
      for (std::size_t r = 0; r < B; ++r)
        for (std::size_t t = 0; t < L; ++t) prefix[r * L + t] = t < out[r].size() ? out[r][t] : kPad;
      const Tensor<T> logits = decode(prefix, B, L, b.tgt_tags, memory, ctx);
      const std::size_t Vsz = logits.dim(2);
      const auto data = logits.data();
      bool all_done = true;
      for (std::size_t r = 0; r < B; ++r) {
        if (done[r]) continue;
        const T* row = data.data() + (r * L + L - 1) * Vsz;
        const auto best = static_cast<TokenId>(std::max_element(row, row + Vsz) - row);
        out[r].push_back(best);
        if (best == kEos) done[r] = true;
        all_done = all_done && done[r];
      }
      if (all_done) break;
    }
    return out;
  }

  /// Next-token logits after `prefix` (which starts with bos) for one sample.
  std::vector<T> decode_step(const std::vector<TokenId>& prefix, TokenId tag, const EncoderStates<T>& memory) const {
    if (prefix.empty() || prefix.front() != kBos) throw std::invalid_argument("decode_step: prefix must start with bos");
    NoGradGuard guard;
    ForwardContext ctx;
    const Tensor<T> logits = decode(prefix, 1, prefix.size(), {tag}, memory, ctx);
    const std::size_t V = logits.dim(2);
    const auto d = logits.data();
    return std::vector<T>(d.end() - static_cast<long>(V), d.end());
  }

 private:
  ModelConfig cfg_;
  ParamStore<T> params_;
  Tensor<T> embed_;
  TextEncoder<T> text_;
  VisionEncoder<T> vision_;
  ConditionalMemory<T> cvlm_;
  Linear<T> gate_proj_;
  Tensor<T> gate_;
  Linear<T> text_proj_;
  Linear<T> image_proj_;
  Decoder<T> decoder_;
};

/// Pool mask for contrastive text embeddings: valid positions minus a leading language tag.
inline std::vector<std::uint8_t> content_mask(const std::vector<TokenId>& ids,
                                              const std::vector<std::uint8_t>& valid, std::size_t L,
                                              const Vocab& vocab) {
  std::vector<std::uint8_t> keep = valid;
  for (std::size_t r = 0; r < keep.size() / L; ++r)
    if (vocab.is_tag(ids[r * L])) keep[r * L] = 0;
  return keep;
}

}  // namespace m3p
