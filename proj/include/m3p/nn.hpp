#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "m3p/ops.hpp"
#include "m3p/rng.hpp"
#include "m3p/tensor.hpp"

namespace m3p {

/// Ordered, named set of trainable leaves.
template <class T>
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : rng_(seed) {}

  Tensor<T> normal(const std::string& name, Shape shape, double stddev) {
    std::vector<T> v(numel_of(shape));
    for (auto& x : v) x = static_cast<T>(rng_.normal() * stddev);
    return add(name, Tensor<T>(std::move(shape), std::move(v), true));
  }
  Tensor<T> constant(const std::string& name, Shape shape, T value) {
    return add(name, Tensor<T>::full(std::move(shape), value, true));
  }

  Tensor<T> add(const std::string& name, Tensor<T> t) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    index_.emplace(name, params_.size());
    params_.emplace_back(name, t);
    return t;
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& items() const { return params_; }
  std::vector<std::pair<std::string, Tensor<T>>>& items() { return params_; }

  Tensor<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter '" + name + "'");
    return params_[it->second].second;
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
  }

 private:
  CounterRng rng_;
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  std::map<std::string, std::size_t> index_;
};

/// Per-forward settings: dropout on/off and the stream that draws masks.
struct ForwardContext {
  bool training = false;
  CounterRng* rng = nullptr;

  static ForwardContext eval() { return {}; }
};

inline constexpr double kInitStd = 0.02;

template <class T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]

  Linear() = default;
  Linear(ParamStore<T>& ps, const std::string& name, std::size_t in, std::size_t out, double stddev = kInitStd)
      : weight(ps.normal(name + ".w", {in, out}, stddev)), bias(ps.constant(name + ".b", {out}, T(0))) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return add(matmul(x, weight), bias); }
};

template <class T>
struct LayerNorm {
  Tensor<T> gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParamStore<T>& ps, const std::string& name, std::size_t d)
      : gamma(ps.constant(name + ".g", {d}, T(1))), beta(ps.constant(name + ".b", {d}, T(0))) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }
};

/// Multi-head scaled dot-product attention, scores scaled by 1/sqrt(d/heads).
template <class T>
struct MultiHeadAttention {
  std::size_t d_model = 0;
  std::size_t heads = 1;
  Linear<T> q, k, v, o;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore<T>& ps, const std::string& name, std::size_t d, std::size_t h)
      : d_model(d), heads(h) {
    if (h == 0 || d % h != 0)
      throw std::invalid_argument(name + ": hidden size " + std::to_string(d) +
                                  " not divisible by heads " + std::to_string(h));
    q = Linear<T>(ps, name + ".q", d, d);
    k = Linear<T>(ps, name + ".k", d, d);
    v = Linear<T>(ps, name + ".v", d, d);
    o = Linear<T>(ps, name + ".o", d, d);
  }

  /// query [B, Tq, d], keys [B, Tk, d]; key_valid is B*Tk (empty = all valid).
  /// When `probs` is non-null the attention weights [B, H, Tq, Tk] are stored there.
  Tensor<T> operator()(const Tensor<T>& query, const Tensor<T>& keys,
                       const std::vector<std::uint8_t>& key_valid, bool causal,
                       Tensor<T>* probs = nullptr) const {
    if (query.rank() != 3 || keys.rank() != 3 || query.dim(2) != d_model || keys.dim(2) != d_model ||
        query.dim(0) != keys.dim(0))
      throw ShapeError("attention: query " + shape_str(query.shape()) + " / keys " +
                       shape_str(keys.shape()) + " incompatible with d=" + std::to_string(d_model));
    const std::size_t B = query.dim(0), Tq = query.dim(1), Tk = keys.dim(1);
    const std::size_t dh = d_model / heads;
    auto split = [&](const Tensor<T>& x, std::size_t len) {
      return permute(reshape(x, {B, len, heads, dh}), {0, 2, 1, 3});
    };
    const Tensor<T> qh = split(q(query), Tq);
    const Tensor<T> kh = split(k(keys), Tk);
    const Tensor<T> vh = split(v(keys), Tk);
    Tensor<T> scores = scale(matmul(qh, transpose(kh)), T(1) / std::sqrt(static_cast<T>(dh)));
    if (causal || !key_valid.empty()) scores = mask_attention(scores, key_valid, causal);
    const Tensor<T> attn = softmax(scores, -1);
    if (probs) *probs = attn;
    const Tensor<T> ctx = reshape(permute(matmul(attn, vh), {0, 2, 1, 3}), {B, Tq, d_model});
    return o(ctx);
  }
};

template <class T>
struct FeedForward {
  Linear<T> in, out;

  FeedForward() = default;
  FeedForward(ParamStore<T>& ps, const std::string& name, std::size_t d, std::size_t hidden)
      : in(ps, name + ".in", d, hidden), out(ps, name + ".out", hidden, d) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return out(gelu(in(x))); }
};

/// Pre-norm encoder block: x + Attn(LN x), then x + FFN(LN x).
template <class T>
struct EncoderLayer {
  LayerNorm<T> ln_attn, ln_ffn;
  MultiHeadAttention<T> attn;
  FeedForward<T> ffn;
  double dropout = 0.0;

  EncoderLayer() = default;
  EncoderLayer(ParamStore<T>& ps, const std::string& name, std::size_t d, std::size_t heads,
               std::size_t ffn_dim, double p)
      : ln_attn(ps, name + ".ln_attn", d),
        ln_ffn(ps, name + ".ln_ffn", d),
        attn(ps, name + ".attn", d, heads),
        ffn(ps, name + ".ffn", d, ffn_dim),
        dropout(p) {}

  Tensor<T> operator()(const Tensor<T>& x, const std::vector<std::uint8_t>& valid,
                       ForwardContext& ctx) const {
    const Tensor<T> h = ln_attn(x);
    Tensor<T> y = add(x, drop(attn(h, h, valid, false), ctx));
    return add(y, drop(ffn(ln_ffn(y)), ctx));
  }

  Tensor<T> drop(const Tensor<T>& x, ForwardContext& ctx) const {
    if (!ctx.training || dropout <= 0.0) return x;
    if (!ctx.rng) throw std::logic_error("training forward without an rng");
    return m3p::dropout(x, dropout, *ctx.rng, true);
  }
};

}  // namespace m3p
