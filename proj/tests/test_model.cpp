#include <gtest/gtest.h>

#include "support/grad_cases.hpp"

using namespace m3p;
using namespace m3p::testing;

namespace {

// y = x W + b for row vector x, W stored [in, out].
Vec affine(const Vec& x, const Tensor<double>& w, const Tensor<double>& b) {
  const std::size_t in = w.dim(0), out = w.dim(1);
  Vec y(out);
  for (std::size_t j = 0; j < out; ++j) {
    double s = b[j];
    for (std::size_t i = 0; i < in; ++i) s += x[i] * w[i * out + j];
    y[j] = s;
  }
  return y;
}

}  // namespace

TEST(Cvlm, OutputHasOneRowPerTextPosition) {
  ParamStore<double> ps(1);
  ConditionalMemory<double> cvlm(ps, 8, 2);
  CounterRng rng(2);
  for (std::size_t U = 1; U <= 8; ++U)
    for (std::size_t V = 1; V <= 8; ++V) {
      const EncoderStates<double> s{random_tensor({2, U, 8}, rng, false), std::vector<std::uint8_t>(2 * U, 1)};
      const EncoderStates<double> h{random_tensor({2, V, 8}, rng, false), std::vector<std::uint8_t>(2 * V, 1)};
      Tensor<double> attn;
      const auto e = cvlm(s, h, &attn);
      EXPECT_EQ(e.hidden.shape(), (Shape{2, U, 8}));
      EXPECT_EQ(e.valid, s.valid);
      EXPECT_EQ(attn.shape(), (Shape{2, 2, U, V}));
      for (std::size_t r = 0; r < 2 * 2 * U; ++r) {
        double sum = 0;
        for (std::size_t v = 0; v < V; ++v) sum += attn[r * V + v];
        EXPECT_NEAR(sum, 1.0, 1e-6);
      }
    }
}

TEST(Cvlm, SinglePatchReducesToValueProjection) {
  ParamStore<double> ps(3);
  ConditionalMemory<double> cvlm(ps, 8, 4);
  CounterRng rng(4);
  const std::size_t U = 5;
  const EncoderStates<double> s{random_tensor({1, U, 8}, rng, false), std::vector<std::uint8_t>(U, 1)};
  const EncoderStates<double> h{random_tensor({1, 1, 8}, rng, false), {1}};
  const auto e = cvlm(s, h);
  // with one key every head attends with weight 1: e_u = s_u + W_O (W_V h)
  const Vec h0(h.hidden.data().begin(), h.hidden.data().end());
  const Vec ctx = affine(h0, cvlm.attn.v.weight, cvlm.attn.v.bias);
  const Vec delta = affine(ctx, cvlm.attn.o.weight, cvlm.attn.o.bias);
  for (std::size_t u = 0; u < U; ++u)
    for (std::size_t d = 0; d < 8; ++d) EXPECT_NEAR(e.hidden[u * 8 + d], s.hidden[u * 8 + d] + delta[d], 1e-6);
}

TEST(Cvlm, IgnoresPaddedPatches) {
  ParamStore<double> ps(5);
  ConditionalMemory<double> cvlm(ps, 8, 2);
  CounterRng rng(6);
  const EncoderStates<double> s{random_tensor({1, 3, 8}, rng, false), {1, 1, 1}};
  auto hv = random_tensor({1, 4, 8}, rng, false);
  const auto a = cvlm(s, {hv, {1, 1, 0, 0}});
  for (std::size_t i = 16; i < 32; ++i) hv.mutable_data()[i] = 50.0;
  const auto b = cvlm(s, {hv, {1, 1, 0, 0}});
  for (std::size_t i = 0; i < a.hidden.numel(); ++i) EXPECT_NEAR(a.hidden[i], b.hidden[i], 1e-12);
}

TEST(Decoder, TeacherForcingMatchesStepwiseDecoding) {
  const TinyWorld w(7, 1);
  Model<double> model(w.model_config(8));
  const Batch b = w.batch();
  ForwardContext ctx;
  const auto memory = model.translation_memory(b, ctx);
  const auto logits = model.decode(b, memory, ctx);
  const std::size_t Vsz = logits.dim(2);
  const auto& tgt = w.samples[0].tgt_tokens;
  for (std::size_t t = 1; t < tgt.size(); ++t) {
    const std::vector<TokenId> prefix(tgt.begin(), tgt.begin() + static_cast<long>(t));
    const auto step = model.decode_step(prefix, b.tgt_tags[0], memory);
    for (std::size_t v = 0; v < Vsz; ++v) EXPECT_NEAR(step[v], logits[(t - 1) * Vsz + v], 1e-10);
  }
}

TEST(Decoder, FuturePositionsDoNotLeak) {
  const TinyWorld w(9, 1);
  Model<double> model(w.model_config(10));
  const Batch b = w.batch();
  ForwardContext ctx;
  const auto memory = model.encode_text(b, ctx);
  std::vector<TokenId> p1{kBos, 5, 6, 7}, p2{kBos, 5, 8, 9};
  const auto l1 = model.decode(p1, 1, 4, b.tgt_tags, memory, ctx);
  const auto l2 = model.decode(p2, 1, 4, b.tgt_tags, memory, ctx);
  const std::size_t V = l1.dim(2);
  for (std::size_t i = 0; i < 2 * V; ++i) EXPECT_DOUBLE_EQ(l1[i], l2[i]);
}

TEST(Encoder, PaddingDoesNotChangeValidStates) {
  const TinyWorld w(11, 2);
  Model<double> model(w.model_config(12));
  ForwardContext ctx;
  const auto& s = w.samples[0];
  const std::size_t L = s.src_tokens.size();
  const auto alone = model.encode_text(s.src_tokens, 1, L, std::vector<std::uint8_t>(L, 1), ctx);
  std::vector<TokenId> padded = s.src_tokens;
  std::vector<std::uint8_t> valid(L, 1);
  padded.insert(padded.end(), 3, kPad);
  valid.insert(valid.end(), 3, 0);
  const auto with_pad = model.encode_text(padded, 1, L + 3, valid, ctx);
  for (std::size_t i = 0; i < L * 8; ++i) EXPECT_NEAR(alone.hidden[i], with_pad.hidden[i], 1e-12);
}

TEST(Model, FusionModesProduceDecodableMemory) {
  const TinyWorld w(13, 3);
  const Batch b = w.batch();
  for (Fusion f : {Fusion::Cvlm, Fusion::Concat, Fusion::Gated, Fusion::None}) {
    Model<double> model(w.model_config(14, f));
    ForwardContext ctx;
    const auto mem = model.translation_memory(b, ctx);
    const std::size_t expect_len = f == Fusion::Concat ? b.src_len + b.num_patches : b.src_len;
    EXPECT_EQ(mem.hidden.dim(1), expect_len) << fusion_name(f);
    for (Branch br : {Branch::Text, Branch::Image, Branch::Fused}) {
      const double loss = model.branch_loss(b, br, 0.1, ctx).item();
      EXPECT_TRUE(std::isfinite(loss));
      EXPECT_GT(loss, 0.0);
    }
  }
}

TEST(Model, EmbeddingIsTiedAcrossEncoderAndDecoder) {
  const TinyWorld w(15, 1);
  Model<double> model(w.model_config(16));
  EXPECT_EQ(model.text_encoder().embed.node(), model.decoder().embed.node());
  EXPECT_TRUE(model.params().contains("shared.embed"));
}

TEST(Model, GreedyStopsAtEosAndRespectsMaxLen) {
  const TinyWorld w(17, 3);
  Model<double> model(w.model_config(18));
  const Batch b = w.batch();
  ForwardContext ctx;
  const auto out = model.greedy(b, model.translation_memory(b, ctx), 5);
  ASSERT_EQ(out.size(), 3u);
  for (const auto& row : out) {
    EXPECT_EQ(row.front(), kBos);
    EXPECT_LE(row.size(), 6u);
    for (std::size_t i = 1; i + 1 < row.size(); ++i) EXPECT_NE(row[i], kEos);
  }
}

TEST(Model, RejectsInconsistentConfig) {
  const TinyWorld w(19, 1);
  auto cfg = w.model_config(1);
  cfg.vision.d_model = 16;
  EXPECT_THROW(Model<double>{cfg}, std::invalid_argument);
  cfg = w.model_config(1);
  cfg.cvlm_heads = 3;
  EXPECT_THROW(Model<double>{cfg}, std::invalid_argument);
}

namespace {

void fill(Tensor<double> t, double v) {
  for (auto& x : t.mutable_data()) x = v;
}

}  // namespace

TEST(Cvlm, IdenticalVisionTokensMatchSingleToken) {
  ParamStore<double> ps(21);
  ConditionalMemory<double> cvlm(ps, 8, 2);
  CounterRng rng(22);
  const EncoderStates<double> s{random_tensor({1, 3, 8}, rng, false), {1, 1, 1}};
  const auto h1 = random_tensor({1, 1, 8}, rng, false);
  const auto h5 = concat<double>(std::vector<Tensor<double>>(5, h1), 1);
  const auto a = cvlm(s, {h1, {1}}), b = cvlm(s, {h5, {1, 1, 1, 1, 1}});
  for (std::size_t i = 0; i < a.hidden.numel(); ++i) EXPECT_NEAR(a.hidden[i], b.hidden[i], 1e-12);
}

TEST(Model, ZeroCvlmOutputMakesFusedEqualText) {
  const TinyWorld w(23, 3);
  Model<double> model(w.model_config(24));
  fill(model.params().get("cvlm.attn.o.w"), 0.0);
  fill(model.params().get("cvlm.attn.o.b"), 0.0);
  const Batch b = w.batch();
  ForwardContext ctx;
  const auto text = model.encode_text(b, ctx);
  const EncoderStates<double> zero_vision{Tensor<double>::zeros({b.size, b.num_patches, 8}),
                                          std::vector<std::uint8_t>(b.size * b.num_patches, 1)};
  const double fused = cross_entropy_label_smoothed(model.decode(b, model.fuse(text, zero_vision), ctx), b.tgt_out, 0.1, kPad).item();
  EXPECT_NEAR(fused, model.branch_loss(b, Branch::Text, 0.1, ctx).item(), 1e-12);
}

TEST(Decoder, ZeroCrossAttentionIgnoresMemory) {
  const TinyWorld w(25, 2);
  Model<double> model(w.model_config(26));
  for (const auto& [name, t] : model.params().items())
    if (name.find(".cross.o.") != std::string::npos) fill(t, 0.0);
  const Batch b = w.batch();
  ForwardContext ctx;
  const auto a = model.decode(b, model.encode_text(b, ctx), ctx);
  const auto c = model.decode(b, model.encode_image(b, ctx), ctx);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], c[i], 1e-12);
}

TEST(Model, ImageBranchIgnoresSourceTokens) {
  const TinyWorld w(27, 3);
  Model<double> model(w.model_config(28));
  Batch b = w.batch();
  ForwardContext ctx;
  const double before = model.branch_loss(b, Branch::Image, 0.1, ctx).item();
  std::reverse(b.src.begin(), b.src.end());
  EXPECT_EQ(model.branch_loss(b, Branch::Image, 0.1, ctx).item(), before);
}

TEST(Model, RandomInitLossIsNearUniform) {
  const TinyWorld w(29, 3);
  Model<double> model(w.model_config(30));
  const Batch b = w.batch();
  ForwardContext ctx;
  for (Branch br : {Branch::Text, Branch::Image, Branch::Fused})
    EXPECT_NEAR(model.branch_loss(b, br, 0.1, ctx).item(), std::log(double(w.vocab.size())), 0.1);
}

TEST(Model, FusedBranchReachesEveryComponent) {
  const TinyWorld w(31, 3);
  Model<double> model(w.model_config(32));
  const Batch b = w.batch();
  ForwardContext ctx;
  backward(model.branch_loss(b, Branch::Fused, 0.1, ctx));
  for (const auto& [name, t] : model.params().items()) {
    if (name.rfind("align.", 0) == 0) continue;  // contrastive heads only see L_c
    double mx = 0;
    if (t.has_grad())
      for (double g : t.grad()) mx = std::max(mx, std::abs(g));
    EXPECT_GT(mx, 0.0) << name;
  }
}

TEST(Model, PaddingDoesNotChangeLoss) {
  const TinyWorld w(33, 3);
  Model<double> model(w.model_config(34));
  ForwardContext ctx;
  double weighted = 0, tokens = 0;
  for (const auto& s : w.samples) {
    const Batch one = collate({&s}, w.vocab);
    const double n = static_cast<double>(s.tgt_tokens.size() - 1);
    weighted += n * model.branch_loss(one, Branch::Fused, 0.1, ctx).item();
    tokens += n;
  }
  EXPECT_NEAR(model.branch_loss(w.batch(), Branch::Fused, 0.1, ctx).item(), weighted / tokens, 1e-12);
}

TEST(Encoder, ZeroSublayersLeaveNormalisedInput) {
  const TinyWorld w(35, 1);
  Model<double> model(w.model_config(36));
  for (const auto& [name, t] : model.params().items())
    if (name.rfind("text.layer", 0) == 0 && (name.find(".attn.o.") != std::string::npos || name.find(".ffn.out.") != std::string::npos))
      fill(t, 0.0);
  const auto& s = w.samples[0];
  const std::size_t L = s.src_tokens.size();
  ForwardContext ctx;
  const auto out = model.encode_text(s.src_tokens, 1, L, std::vector<std::uint8_t>(L, 1), ctx);
  const auto& E = model.params().get("shared.embed");
  const auto& P = model.params().get("text.pos");
  for (std::size_t t = 0; t < L; ++t) {
    Vec x(8);
    for (std::size_t d = 0; d < 8; ++d) x[d] = E[static_cast<std::size_t>(s.src_tokens[t]) * 8 + d] + P[t * 8 + d];
    double mu = 0, var = 0;
    for (double v : x) mu += v / 8;
    for (double v : x) var += (v - mu) * (v - mu) / 8;
    for (std::size_t d = 0; d < 8; ++d) EXPECT_NEAR(out.hidden[t * 8 + d], (x[d] - mu) / std::sqrt(var + 1e-5), 1e-9);
  }
}

TEST(Encoder, PatchPermutationEquivariantWithoutPositions) {
  const TinyWorld w(37, 1);
  Model<double> model(w.model_config(38));
  fill(model.params().get("vision.pos"), 0.0);
  const auto& g = *w.samples[0].image;
  const std::size_t V = g.num_patches(), pd = g.patch_dim();
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  std::vector<float> shuffled(g.patches.size());
  for (std::size_t v = 0; v < V; ++v)
    std::copy_n(g.patches.begin() + perm[v] * pd, pd, shuffled.begin() + v * pd);
  ForwardContext ctx;
  const auto a = model.encode_image(patches_tensor<double>(g.patches, 1, V, pd), ctx);
  const auto b = model.encode_image(patches_tensor<double>(shuffled, 1, V, pd), ctx);
  for (std::size_t v = 0; v < V; ++v)
    for (std::size_t d = 0; d < 8; ++d) EXPECT_NEAR(b.hidden[v * 8 + d], a.hidden[perm[v] * 8 + d], 1e-12);
}

TEST(Encoder, ConstantImageEmbedsPatchesIdentically) {
  const TinyWorld w(39, 1);
  Model<double> model(w.model_config(40));
  const auto g = patchify(Image(8, 8, 3, 0.3f), 4);
  const auto e = model.vision_encoder().embed_patches(patches_tensor<double>(g.patches, 1, 4, 48));
  for (std::size_t v = 1; v < 4; ++v)
    for (std::size_t d = 0; d < 8; ++d) EXPECT_EQ(e[v * 8 + d], e[d]);
}

TEST(Pooling, DuplicatedTokensKeepTheMean) {
  CounterRng rng(41);
  ParamStore<double> ps(1);
  Linear<double> proj(ps, "p", 4, 4);
  const auto h = random_tensor({1, 2, 4}, rng, false);
  const auto hh = concat<double>({h, h}, 1);
  const auto a = pool(EncoderStates<double>{h, {1, 1}}, proj), b = pool(EncoderStates<double>{hh, {1, 1, 1, 1}}, proj);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Decoder, MaxLenOneGivesBosAndArgmax) {
  const TinyWorld w(43, 1);
  Model<double> model(w.model_config(44));
  const Batch b = w.batch();
  ForwardContext ctx;
  const auto mem = model.translation_memory(b, ctx);
  const auto out = model.greedy(b, mem, 1);
  ASSERT_EQ(out[0].size(), 2u);
  const auto logits = model.decode_step({kBos}, b.tgt_tags[0], mem);
  EXPECT_EQ(out[0][1], static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin()));
  EXPECT_EQ(model.greedy(b, mem, 1), out);
}
