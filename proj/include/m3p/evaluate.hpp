#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "m3p/augment.hpp"
#include "m3p/bleu.hpp"
#include "m3p/data.hpp"
#include "m3p/model.hpp"

namespace m3p {

enum class DecodeMode { Translate, Caption };

inline DecodeMode parse_decode_mode(const std::string& s) {
  if (s == "translate") return DecodeMode::Translate;
  if (s == "caption") return DecodeMode::Caption;
  throw std::invalid_argument("unknown mode '" + s + "' (translate|caption)");
}

/// Replaces round(ratio * n) of the n content tokens with the mask id.
/// The leading tag, bos, eos and padding are never touched.
inline std::vector<TokenId> mask_source(const std::vector<TokenId>& src, double ratio, CounterRng& rng) {
  if (ratio < 0.0 || ratio > 1.0) throw std::invalid_argument("mask ratio outside [0, 1]");
  std::vector<TokenId> out = src;
  auto pos = maskable_positions(src);
  const auto k = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(pos.size())));
  for (std::size_t i = 0; i < k; ++i) {
    std::swap(pos[i], pos[i + rng.uniform_int(pos.size() - i)]);
    out[pos[i]] = kMask;
  }
  return out;
}

struct DecodeOptions {
  DecodeMode mode = DecodeMode::Translate;
  double mask_ratio = 0.0;
  std::size_t batch_size = 64;
  std::size_t max_len = 40;
  std::uint64_t seed = 0;  // drives source masking
};

/// Greedy hypotheses for every sample, in order.
template <class T>
std::vector<std::string> decode_samples(const Model<T>& model, const Vocab& vocab,
                                        const std::vector<const Sample*>& samples, const DecodeOptions& opt) {
  NoGradGuard guard;
  ForwardContext ctx;
  CounterRng rng(opt.seed);
  std::vector<std::string> hyps;
  hyps.reserve(samples.size());
  for (std::size_t start = 0; start < samples.size(); start += opt.batch_size) {
    const std::size_t end = std::min(samples.size(), start + opt.batch_size);
    std::vector<Sample> masked;
    std::vector<const Sample*> rows(samples.begin() + static_cast<long>(start), samples.begin() + static_cast<long>(end));
    if (opt.mask_ratio > 0.0 && opt.mode == DecodeMode::Translate) {
      masked.reserve(rows.size());
      for (const Sample* s : rows) {
        masked.push_back(*s);
        masked.back().src_tokens = mask_source(s->src_tokens, opt.mask_ratio, rng);
      }
      for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = &masked[i];
    }
    const Batch b = collate(rows, vocab);
    const EncoderStates<T> memory =
        opt.mode == DecodeMode::Caption ? model.encode_image(b, ctx) : model.translation_memory(b, ctx);
    for (const auto& ids : model.greedy(b, memory, opt.max_len)) hyps.push_back(vocab.detokenize(ids));
  }
  return hyps;
}

inline std::vector<const Sample*> all_samples(const CorpusSet& set) {
  std::vector<const Sample*> out;
  for (const auto& c : set.corpora)
    for (const auto& s : c.samples) out.push_back(&s);
  return out;
}

struct EvalResult {
  double bleu = 0.0;
  std::vector<std::string> hyps;
  std::vector<std::string> refs;
};

template <class T>
EvalResult evaluate_bleu(const Model<T>& model, const Vocab& vocab, const CorpusSet& set, const DecodeOptions& opt) {
  const auto samples = all_samples(set);
  if (samples.empty()) throw std::invalid_argument("evaluate_bleu: empty corpus");
  EvalResult r;
  r.hyps = decode_samples(model, vocab, samples, opt);
  for (const Sample* s : samples) r.refs.push_back(s->tgt_text);
  r.bleu = corpus_bleu(r.hyps, r.refs);
  return r;
}

/// BLEU of translate-mode decoding at each source mask ratio.
template <class T>
std::vector<std::pair<double, double>> masked_source_eval(const Model<T>& model, const Vocab& vocab,
                                                          const CorpusSet& set, const std::vector<double>& ratios,
                                                          DecodeOptions opt) {
  opt.mode = DecodeMode::Translate;
  std::vector<std::pair<double, double>> out;
  for (double r : ratios) {
    opt.mask_ratio = r;
    out.emplace_back(r, evaluate_bleu(model, vocab, set, opt).bleu);
  }
  return out;
}

struct EmbeddingRow {
  std::string language;
  std::int64_t scene = -1;
  std::vector<float> values;
};

/// Pooled contrastive embedding of every source sentence (dropout off, no augmentation).
template <class T>
std::vector<EmbeddingRow> sentence_embeddings(const Model<T>& model, const Vocab& vocab, const CorpusSet& set,
                                              std::size_t batch_size = 64) {
  NoGradGuard guard;
  ForwardContext ctx;
  const auto samples = all_samples(set);
  std::vector<EmbeddingRow> rows;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const std::size_t end = std::min(samples.size(), start + batch_size);
    const std::vector<const Sample*> chunk(samples.begin() + static_cast<long>(start),
                                           samples.begin() + static_cast<long>(end));
    const Batch b = collate(chunk, vocab);
    const auto states = model.encode_text(b, ctx);
    const Tensor<T> emb = model.pool_text(states, content_mask(b.src, b.src_valid, b.src_len, vocab));
    const std::size_t d = emb.dim(1);
    const auto data = emb.data();
    for (std::size_t i = 0; i < chunk.size(); ++i)
      rows.push_back({chunk[i]->src_lang, chunk[i]->scene,
                      std::vector<float>(data.begin() + static_cast<long>(i * d),
                                         data.begin() + static_cast<long>((i + 1) * d))});
  }
  return rows;
}

/// CSV: header `language,scene,e0,...`, one row per sentence.
inline void write_embeddings_csv(const std::string& path, const std::vector<EmbeddingRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  const std::size_t d = rows.empty() ? 0 : rows.front().values.size();
  out << "language,scene";
  for (std::size_t i = 0; i < d; ++i) out << ",e" << i;
  out << "\n";
  char buf[32];
  for (const auto& r : rows) {
    out << r.language << "," << r.scene;
    for (float v : r.values) {
      std::snprintf(buf, sizeof buf, ",%.9g", static_cast<double>(v));
      out << buf;
    }
    out << "\n";
  }
}

/// Mean cosine over all row pairs that share a scene but differ in language.
inline double mean_parallel_cosine(const std::vector<EmbeddingRow>& rows) {
  std::map<std::int64_t, std::vector<const EmbeddingRow*>> by_scene;
  for (const auto& r : rows)
    if (r.scene >= 0) by_scene[r.scene].push_back(&r);
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& [_, group] : by_scene)
    for (std::size_t i = 0; i < group.size(); ++i)
      for (std::size_t j = i + 1; j < group.size(); ++j) {
        if (group[i]->language == group[j]->language) continue;
        double dot = 0, na = 0, nb = 0;
        for (std::size_t k = 0; k < group[i]->values.size(); ++k) {
          const double a = group[i]->values[k], b = group[j]->values[k];
          dot += a * b;
          na += a * a;
          nb += b * b;
        }
        sum += dot / std::sqrt(na * nb);
        ++n;
      }
  if (n == 0) throw std::invalid_argument("mean_parallel_cosine: no parallel pairs");
  return sum / static_cast<double>(n);
}

}  // namespace m3p
