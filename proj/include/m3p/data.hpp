#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "m3p/image.hpp"
#include "m3p/rng.hpp"

namespace m3p {

using TokenId = std::int32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kMask = 3;

inline std::string lang_tag(const std::string& lang) { return "[" + lang + "]"; }

/// Closed word-level vocabulary. Ids: pad, bos, eos, mask, language tags, words.
class Vocab {
 public:
  Vocab() = default;

  Vocab(const std::vector<std::string>& languages, const std::vector<std::string>& words) {
    for (const char* r : {"<pad>", "<bos>", "<eos>", "<mask>"}) push(r);
    for (const auto& l : languages) push(lang_tag(l));
    for (const auto& w : words) push(w);
  }

  static Vocab from_tokens(const std::vector<std::string>& tokens) {
    if (tokens.size() < 4 || tokens[0] != "<pad>" || tokens[1] != "<bos>" || tokens[2] != "<eos>" ||
        tokens[3] != "<mask>")
      throw std::runtime_error("vocab must start with <pad> <bos> <eos> <mask>");
    Vocab v;
    for (const auto& t : tokens) v.push(t);
    return v;
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open vocab " + path);
    std::vector<std::string> tokens;
    for (std::string line; std::getline(in, line);) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      tokens.push_back(line);
    }
    return from_tokens(tokens);
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write vocab " + path);
    for (const auto& t : tokens_) out << t << '\n';
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  bool contains(const std::string& tok) const { return index_.count(tok) > 0; }

  TokenId id(const std::string& tok) const {
    auto it = index_.find(tok);
    if (it == index_.end()) throw std::out_of_range("out-of-vocabulary token '" + tok + "'");
    return it->second;
  }

  bool is_tag(TokenId id) const {
    const auto& t = token(id);
    return t.size() > 2 && t.front() == '[' && t.back() == ']';
  }
  TokenId tag_id(const std::string& lang) const { return id(lang_tag(lang)); }
  std::string tag_language(TokenId id) const {
    if (!is_tag(id)) throw std::invalid_argument("token " + token(id) + " is not a language tag");
    const auto& t = token(id);
    return t.substr(1, t.size() - 2);
  }

  /// Whitespace split; [bos] w1 .. wn [eos]. A leading language tag takes the bos slot.
  std::vector<TokenId> tokenize(const std::string& text) const {
    std::vector<TokenId> ids{kBos};
    std::istringstream is(text);
    bool first = true;
    for (std::string w; is >> w; first = false) {
      const TokenId t = id(w);
      if (first && is_tag(t))
        ids[0] = t;
      else
        ids.push_back(t);
    }
    ids.push_back(kEos);
    return ids;
  }

  /// Drops pad/bos/eos framing; stops at the first eos after position 0.
  std::string detokenize(const std::vector<TokenId>& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const TokenId t = ids[i];
      if (t == kEos && i > 0) break;
      if (t == kPad || t == kBos || t == kEos || is_tag(t)) continue;
      if (!out.empty()) out += ' ';
      out += token(t);
    }
    return out;
  }

 private:
  void push(const std::string& tok) {
    if (!index_.emplace(tok, static_cast<TokenId>(tokens_.size())).second)
      throw std::runtime_error("duplicate vocab token '" + tok + "'");
    tokens_.push_back(tok);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Source tokens are [tag(tgt_lang)] src words [eos]; target tokens [bos] words [eos].
struct Sample {
  std::string src_lang;
  std::string tgt_lang;
  std::int64_t scene = -1;
  std::string src_text;
  std::string tgt_text;
  std::vector<TokenId> src_tokens;
  std::vector<TokenId> tgt_tokens;
  std::shared_ptr<const PatchGrid> image;
};

inline Sample make_sample(const Vocab& vocab, std::string src_lang, std::string tgt_lang,
                          std::string src_text, std::string tgt_text,
                          std::shared_ptr<const PatchGrid> image, std::int64_t scene = -1) {
  Sample s;
  s.src_tokens = vocab.tokenize(lang_tag(tgt_lang) + " " + src_text);
  s.tgt_tokens = vocab.tokenize(tgt_text);
  s.src_lang = std::move(src_lang);
  s.tgt_lang = std::move(tgt_lang);
  s.src_text = std::move(src_text);
  s.tgt_text = std::move(tgt_text);
  s.image = std::move(image);
  s.scene = scene;
  return s;
}

struct Corpus {
  std::string name;
  std::vector<Sample> samples;
};

struct CorpusSet {
  std::vector<Corpus> corpora;

  std::vector<std::size_t> sizes() const {
    std::vector<std::size_t> s;
    for (const auto& c : corpora) s.push_back(c.samples.size());
    return s;
  }
  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& c : corpora) n += c.samples.size();
    return n;
  }
  void validate() const {
    if (corpora.empty()) throw std::invalid_argument("corpus set is empty");
    for (const auto& c : corpora)
      if (c.samples.empty()) throw std::invalid_argument("corpus '" + c.name + "' is empty");
  }
};

// ------------------------------------------------------------------ JSONL IO

/// Loads every *.jsonl file of `dir` (sorted by name) as one corpus. The
/// `image` field is a PPM path relative to the file, or "base64:<ppm bytes>".
inline CorpusSet load_corpus_dir(const std::string& dir, const Vocab& vocab, std::size_t patch) {
  namespace fs = std::filesystem;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".jsonl") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("no .jsonl corpora in " + dir);

  std::map<std::string, std::shared_ptr<const PatchGrid>> cache;
  auto load_image = [&](const std::string& ref, const fs::path& base) {
    const bool inline_data = ref.rfind("base64:", 0) == 0;
    const std::string key = inline_data ? ref : (base / ref).lexically_normal().string();
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    const Image img =
        inline_data ? decode_ppm(base64_decode(std::string_view(ref).substr(7))) : read_ppm(key);
    auto grid = std::make_shared<const PatchGrid>(patchify(img, patch));
    cache.emplace(key, grid);
    return grid;
  };

  CorpusSet set;
  for (const auto& f : files) {
    std::ifstream in(f);
    Corpus c{f.stem().string(), {}};
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
      ++line_no;
      if (line.empty()) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        c.samples.push_back(make_sample(vocab, j.at("src_lang"), j.at("tgt_lang"), j.at("src_text"),
                                        j.at("tgt_text"),
                                        load_image(j.at("image").get<std::string>(), f.parent_path()),
                                        j.value("scene", std::int64_t{-1})));
      } catch (const std::exception& e) {
        throw std::runtime_error(f.string() + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
    set.corpora.push_back(std::move(c));
  }
  set.validate();
  return set;
}

// ------------------------------------------------------------------ batches

/// Collated, padded batch. Decoder input is tgt_tokens[:-1], output tgt_tokens[1:].
struct Batch {
  std::size_t size = 0;
  std::size_t src_len = 0;
  std::size_t tgt_len = 0;
  std::size_t num_patches = 0;
  std::size_t patch_dim = 0;
  std::vector<TokenId> src;              // size x src_len
  std::vector<std::uint8_t> src_valid;   // size x src_len
  std::vector<TokenId> tgt_in;           // size x tgt_len
  std::vector<TokenId> tgt_out;          // size x tgt_len, pad where invalid
  std::vector<std::uint8_t> tgt_valid;   // size x tgt_len
  std::vector<TokenId> tgt_tags;         // target-language tag per row
  std::vector<float> patches;            // size x num_patches x patch_dim
  std::vector<const Sample*> samples;
};

inline Batch collate(const std::vector<const Sample*>& samples, const Vocab& vocab) {
  if (samples.empty()) throw std::invalid_argument("collate: empty batch");
  Batch b;
  b.size = samples.size();
  b.samples = samples;
  b.num_patches = samples[0]->image->num_patches();
  b.patch_dim = samples[0]->image->patch_dim();
  for (const auto* s : samples) {
    if (s->src_tokens.empty() || s->tgt_tokens.size() < 2)
      throw std::invalid_argument("collate: sample with empty token sequence");
    if (s->image->num_patches() != b.num_patches || s->image->patch_dim() != b.patch_dim)
      throw std::invalid_argument("collate: images of different patch geometry in one batch");
    b.src_len = std::max(b.src_len, s->src_tokens.size());
    b.tgt_len = std::max(b.tgt_len, s->tgt_tokens.size() - 1);
  }
  b.src.assign(b.size * b.src_len, kPad);
  b.src_valid.assign(b.size * b.src_len, 0);
  b.tgt_in.assign(b.size * b.tgt_len, kPad);
  b.tgt_out.assign(b.size * b.tgt_len, kPad);
  b.tgt_valid.assign(b.size * b.tgt_len, 0);
  b.patches.reserve(b.size * b.num_patches * b.patch_dim);
  for (std::size_t i = 0; i < b.size; ++i) {
    const auto& s = *samples[i];
    for (std::size_t t = 0; t < s.src_tokens.size(); ++t) {
      b.src[i * b.src_len + t] = s.src_tokens[t];
      b.src_valid[i * b.src_len + t] = 1;
    }
    for (std::size_t t = 0; t + 1 < s.tgt_tokens.size(); ++t) {
      b.tgt_in[i * b.tgt_len + t] = s.tgt_tokens[t];
      b.tgt_out[i * b.tgt_len + t] = s.tgt_tokens[t + 1];
      b.tgt_valid[i * b.tgt_len + t] = 1;
    }
    b.tgt_tags.push_back(vocab.tag_id(s.tgt_lang));
    b.patches.insert(b.patches.end(), s.image->patches.begin(), s.image->patches.end());
  }
  return b;
}

// ---------------------------------------------------------- temperature sampling

struct SamplerConfig {
  double peak_temperature = 5.0;
  double initial_temperature = 1.0;
  std::size_t warmup_epochs = 5;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(initial_temperature > 0.0) || peak_temperature < initial_temperature)
      throw std::invalid_argument("sampler temperatures need peak >= initial > 0");
    if (warmup_epochs < 1) throw std::invalid_argument("sampler warmup_epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  }
};

/// q_m proportional to (|D_m| / |D_all|)^(1/tau).
inline std::vector<double> sampling_probs(const std::vector<std::size_t>& sizes, double tau) {
  if (sizes.empty()) throw std::invalid_argument("sampling_probs: no corpora");
  if (!(tau > 0.0)) throw std::invalid_argument("sampling_probs: temperature must be positive");
  double largest = 0;
  for (auto s : sizes) {
    if (s == 0) throw std::invalid_argument("sampling_probs: empty corpus");
    largest = std::max(largest, static_cast<double>(s));
  }
  // Weights n^(1/tau), scaled by the largest corpus to stay finite. At tau = 1
  // the raw counts are used so q is exactly n / sum(n).
  std::vector<double> q(sizes.size());
  double z = 0;
  for (std::size_t m = 0; m < sizes.size(); ++m) {
    const double n = static_cast<double>(sizes[m]);
    q[m] = tau == 1.0 ? n : std::exp(std::log(n / largest) / tau);
    z += q[m];
  }
  for (auto& v : q) v /= z;
  return q;
}

/// tau_i = min(tau, tau0 + (i / W) (tau - tau0)).
inline double epoch_temperature(std::size_t epoch, const SamplerConfig& cfg) {
  if (epoch >= cfg.warmup_epochs) return cfg.peak_temperature;
  const double ramp = cfg.initial_temperature +
                      static_cast<double>(epoch) / static_cast<double>(cfg.warmup_epochs) *
                          (cfg.peak_temperature - cfg.initial_temperature);
  return std::min(cfg.peak_temperature, ramp);
}

/// Index drawn from a discrete distribution.
inline std::size_t draw_categorical(const std::vector<double>& probs, CounterRng& rng) {
  const double u = rng.uniform();
  double acc = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  // rounding slack: last index with positive mass
  for (std::size_t i = probs.size(); i-- > 0;)
    if (probs[i] > 0) return i;
  throw std::invalid_argument("draw_categorical: distribution has no mass");
}

/// Corpus drawn i.i.d. from q for every row, sample uniform (with replacement) inside it.
inline std::vector<const Sample*> sample_indices(const CorpusSet& set, const std::vector<double>& q,
                                                 std::size_t batch_size, CounterRng& rng) {
  if (q.size() != set.corpora.size()) throw std::invalid_argument("sample_batch: q size mismatch");
  std::vector<const Sample*> rows;
  rows.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) {
    const auto& c = set.corpora[draw_categorical(q, rng)];
    rows.push_back(&c.samples[rng.uniform_int(c.samples.size())]);
  }
  return rows;
}

inline Batch sample_batch(const CorpusSet& set, const std::vector<double>& q, std::size_t batch_size,
                          CounterRng& rng, const Vocab& vocab) {
  return collate(sample_indices(set, q, batch_size, rng), vocab);
}

}  // namespace m3p
