#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "m3p/config.hpp"
#include "m3p/data.hpp"
#include "m3p/model.hpp"
#include "m3p/optim.hpp"

namespace m3p {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

/// Layout (all integers little-endian):
///   "M3P1" | u32 version | u64 config hash | u64 step | u64 epoch
///   | u64 rng seed | u64 rng counter | str config | u32 n + n*str vocab
///   | u32 n + n*(str name, u32 rank, rank*u64 dim, u64 offset) | u64 count | count*f32
/// where str is u32 length + bytes and offsets count floats into the data block.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::uint64_t config_hash = 0;
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  std::uint64_t rng_seed = 0;
  std::uint64_t rng_counter = 0;
  std::string config_text;
  std::vector<std::string> vocab;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

namespace detail {

class LeWriter {
 public:
  explicit LeWriter(std::ostream& out) : out_(out) {}
  void u32(std::uint32_t v) { bytes(v, 4); }
  void u64(std::uint64_t v) { bytes(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void raw(const char* p, std::size_t n) { out_.write(p, static_cast<std::streamsize>(n)); }

 private:
  void bytes(std::uint64_t v, int n) {
    char b[8];
    for (int i = 0; i < n; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out_.write(b, n);
  }
  std::ostream& out_;
};

class LeReader {
 public:
  explicit LeReader(std::istream& in) : in_(in) {}
  std::uint32_t u32() { return static_cast<std::uint32_t>(bytes(4)); }
  std::uint64_t u64() { return bytes(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    const auto n = u32();
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  void read(char* p, std::size_t n) {
    if (!in_.read(p, static_cast<std::streamsize>(n))) throw CheckpointError("checkpoint truncated");
  }

 private:
  std::uint64_t bytes(int n) {
    unsigned char b[8];
    read(reinterpret_cast<char*>(b), static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = n - 1; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  std::istream& in_;
};

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const Checkpoint& c) {
  detail::LeWriter w(out);
  w.raw("M3P1", 4);
  w.u32(Checkpoint::kVersion);
  w.u64(c.config_hash);
  w.u64(c.step);
  w.u64(c.epoch);
  w.u64(c.rng_seed);
  w.u64(c.rng_counter);
  w.str(c.config_text);
  w.u32(static_cast<std::uint32_t>(c.vocab.size()));
  for (const auto& tok : c.vocab) w.str(tok);
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& t : c.tensors) {
    if (numel_of(t.shape) != t.data.size()) throw CheckpointError("tensor '" + t.name + "' size mismatch");
    w.str(t.name);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.u64(d);
    w.u64(offset);
    offset += t.data.size();
  }
  w.u64(offset);
  if constexpr (std::endian::native == std::endian::little) {
    for (const auto& t : c.tensors) w.raw(reinterpret_cast<const char*>(t.data.data()), t.data.size() * 4);
  } else {
    for (const auto& t : c.tensors)
      for (float v : t.data) w.f32(v);
  }
}

inline Checkpoint read_checkpoint(std::istream& in) {
  detail::LeReader r(in);
  char magic[4];
  r.read(magic, 4);
  if (std::memcmp(magic, "M3P1", 4) != 0) throw CheckpointError("not a checkpoint (bad magic)");
  const auto version = r.u32();
  if (version != Checkpoint::kVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  c.config_hash = r.u64();
  c.step = r.u64();
  c.epoch = r.u64();
  c.rng_seed = r.u64();
  c.rng_counter = r.u64();
  c.config_text = r.str();
  c.vocab.resize(r.u32());
  for (auto& tok : c.vocab) tok = r.str();
  c.tensors.resize(r.u32());
  std::vector<std::uint64_t> offsets;
  for (auto& t : c.tensors) {
    t.name = r.str();
    t.shape.resize(r.u32());
    for (auto& d : t.shape) d = r.u64();
    offsets.push_back(r.u64());
  }
  const auto count = r.u64();
  std::vector<float> block(count);
  if constexpr (std::endian::native == std::endian::little) {
    r.read(reinterpret_cast<char*>(block.data()), count * 4);
  } else {
    for (auto& v : block) v = r.f32();
  }
  for (std::size_t i = 0; i < c.tensors.size(); ++i) {
    auto& t = c.tensors[i];
    const auto n = numel_of(t.shape);
    if (offsets[i] + n > count) throw CheckpointError("tensor '" + t.name + "' outside the data block");
    t.data.assign(block.begin() + static_cast<long>(offsets[i]), block.begin() + static_cast<long>(offsets[i] + n));
  }
  return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint " + path);
  write_checkpoint(out, c);
  if (!out) throw CheckpointError("write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  return read_checkpoint(in);
}

/// Parameters (and Adam moments when given) as named fp32 tensors.
template <class T>
std::vector<NamedTensor> capture_tensors(const ParamStore<T>& params, const Adam<T>* adam = nullptr) {
  std::vector<NamedTensor> out;
  for (const auto& [name, p] : params.items()) {
    const auto d = p.data();
    out.push_back({name, p.shape(), std::vector<float>(d.begin(), d.end())});
  }
  if (adam) {
    const auto& items = params.items();
    for (std::size_t i = 0; i < items.size(); ++i) {
      const auto& m = adam->first_moments()[i];
      out.push_back({"adam.m/" + items[i].first, items[i].second.shape(), std::vector<float>(m.begin(), m.end())});
    }
    for (std::size_t i = 0; i < items.size(); ++i) {
      const auto& v = adam->second_moments()[i];
      out.push_back({"adam.v/" + items[i].first, items[i].second.shape(), std::vector<float>(v.begin(), v.end())});
    }
  }
  return out;
}

/// Copies named tensors into the store (and Adam moments when both are present).
template <class T>
void restore_tensors(const Checkpoint& c, ParamStore<T>& params, Adam<T>* adam = nullptr) {
  auto& items = params.items();
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto& [name, p] = items[i];
    const NamedTensor* t = c.find(name);
    if (!t) throw CheckpointError("checkpoint lacks parameter '" + name + "'");
    if (t->shape != p.shape())
      throw CheckpointError("parameter '" + name + "' has shape " + shape_str(t->shape) + ", model expects " +
                            shape_str(p.shape()));
    auto dst = p.mutable_data();
    std::copy(t->data.begin(), t->data.end(), dst.begin());
    if (adam) {
      const NamedTensor* m = c.find("adam.m/" + name);
      const NamedTensor* v = c.find("adam.v/" + name);
      if (!m || !v) throw CheckpointError("checkpoint lacks optimizer state for '" + name + "'");
      adam->first_moments()[i].assign(m->data.begin(), m->data.end());
      adam->second_moments()[i].assign(v->data.begin(), v->data.end());
    }
  }
  if (adam) adam->set_steps(c.step);
}

/// A model rebuilt from a checkpoint: its config, vocab and trained weights.
struct LoadedModel {
  RunConfig config;
  Vocab vocab;
  Model<float> model;
  Checkpoint checkpoint;
};

/// Rebuilds the model a checkpoint was saved from. Fails when the stored
/// config hash does not match the architecture the stored config describes.
inline LoadedModel load_model(const std::string& path) {
  Checkpoint c = load_checkpoint(path);
  RunConfig cfg = parse_run_config(c.config_text, "/");
  Vocab vocab = Vocab::from_tokens(c.vocab);
  if (cfg.model_hash(vocab) != c.config_hash) throw CheckpointError("config hash mismatch in " + path);
  Model<float> model(cfg.model(vocab.size()));
  restore_tensors(c, model.params());
  return {std::move(cfg), std::move(vocab), std::move(model), std::move(c)};
}

/// Loads weights into an existing model after checking the config hash.
inline Checkpoint load_into(const std::string& path, const RunConfig& cfg, const Vocab& vocab, Model<float>& model,
                            Adam<float>* adam = nullptr) {
  Checkpoint c = load_checkpoint(path);
  const auto expected = cfg.model_hash(vocab);
  if (c.config_hash != expected) {
    std::ostringstream msg;
    msg << "config hash mismatch: checkpoint " << std::hex << c.config_hash << ", config " << expected;
    throw CheckpointError(msg.str());
  }
  restore_tensors(c, model.params(), adam);
  return c;
}

}  // namespace m3p
