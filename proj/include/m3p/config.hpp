#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "m3p/augment.hpp"
#include "m3p/data.hpp"
#include "m3p/encoders.hpp"
#include "m3p/fusion.hpp"
#include "m3p/model.hpp"

namespace m3p {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// FNV-1a, 64 bit.
inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

struct DataConfig {
  std::string dir;    // corpus root
  std::string vocab;  // default <dir>/vocab.txt
  std::string train;  // default <dir>/train
  std::string dev;    // default <dir>/dev; empty string disables dev eval
  std::size_t patch = 8;
};

struct AlignConfig {
  double tau = 0.1;
  bool text_text = false;  // extra InfoNCE between the two sides of each parallel pair
};

struct LossConfig {
  double lambda = 1.0;
  double lambda_ramp = 0.1;  // fraction of total steps over which lambda ramps from 0
  double label_smoothing = 0.1;
};

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double lr = 3e-4;
  std::size_t warmup_steps = 200;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double clip_norm = 1.0;  // 0 disables clipping
  std::uint64_t seed = 1;
  BranchSchedule mdropnet;
  std::size_t max_steps = 0;  // 0: run all epochs
  std::size_t eval_every = 1;  // epochs; 0 disables periodic dev eval
  std::size_t max_decode_len = 40;
  std::string log;         // metrics JSONL; empty disables
  std::string checkpoint;  // final checkpoint; empty disables
  std::string best_checkpoint;  // best-by-dev-BLEU checkpoint; empty disables
  std::string precision = "fp32";
};

struct RunConfig {
  DataConfig data;
  EncoderConfig text, vision, decoder;
  Fusion fusion = Fusion::Cvlm;
  std::size_t cvlm_heads = 4;
  std::uint64_t init_seed = 1;
  AugmentConfig augment;
  AlignConfig align;
  LossConfig loss;
  TrainConfig train;
  SamplerConfig sampler;

  void validate() const {
    text.validate("model.text_encoder");
    vision.validate("model.vision_encoder");
    decoder.validate("model.decoder");
    augment.validate();
    sampler.validate();
    train.mdropnet.validate();
    if (!(loss.lambda >= 0.0)) throw ConfigError("loss.lambda must be >= 0");
    if (loss.lambda_ramp < 0.0 || loss.lambda_ramp > 1.0) throw ConfigError("loss.lambda_ramp outside [0, 1]");
    if (loss.label_smoothing < 0.0 || loss.label_smoothing >= 1.0)
      throw ConfigError("loss.label_smoothing outside [0, 1)");
    if (!(train.lr >= 0.0)) throw ConfigError("train.lr must be >= 0");
    if (!(align.tau > 0.0)) throw ConfigError("align.tau must be positive");
    if (train.batch_size == 0) throw ConfigError("train.batch_size must be positive");
    if (train.epochs == 0 && train.max_steps == 0) throw ConfigError("train.epochs or train.max_steps must be set");
    if (train.precision != "fp32") throw ConfigError("train.precision: only fp32 is supported");
    if (data.patch == 0) throw ConfigError("data.patch must be positive");
  }

  ModelConfig model(std::size_t vocab_size) const {
    ModelConfig m;
    m.vocab_size = vocab_size;
    m.patch_dim = data.patch * data.patch * 3;
    m.text = text;
    m.vision = vision;
    m.decoder = decoder;
    m.cvlm_heads = cvlm_heads;
    m.fusion = fusion;
    m.init_seed = init_seed;
    return m;
  }

  /// Every field as TOML-style text, fixed order, %.17g numbers.
  std::string canonical() const {
    std::ostringstream o;
    o << model_section();
    o << "[data]\n";
    kv(o, "dir", quote(data.dir));
    kv(o, "vocab", quote(data.vocab));
    kv(o, "train", quote(data.train));
    kv(o, "dev", quote(data.dev));
    kv(o, "patch", std::to_string(data.patch));
    o << "\n[augment]\n";
    kv(o, "text_mask_fraction", num(augment.text_mask_fraction));
    kv(o, "mean_span_length", num(augment.mean_span_length));
    kv(o, "patch_mask_fraction", num(augment.patch_mask_fraction));
    std::string tr;
    for (auto t : augment.transforms) tr += (tr.empty() ? "" : ",") + std::string(transform_name(t));
    kv(o, "transforms", quote(tr));
    o << "\n[align]\n";
    kv(o, "tau", num(align.tau));
    kv(o, "text_text", align.text_text ? "on" : "off");
    o << "\n[loss]\n";
    kv(o, "lambda", num(loss.lambda));
    kv(o, "lambda_ramp", num(loss.lambda_ramp));
    kv(o, "label_smoothing", num(loss.label_smoothing));
    o << "\n[train]\n";
    kv(o, "epochs", std::to_string(train.epochs));
    kv(o, "batch_size", std::to_string(train.batch_size));
    kv(o, "lr", num(train.lr));
    kv(o, "warmup_steps", std::to_string(train.warmup_steps));
    kv(o, "beta1", num(train.beta1));
    kv(o, "beta2", num(train.beta2));
    kv(o, "eps", num(train.eps));
    kv(o, "clip_norm", num(train.clip_norm));
    kv(o, "seed", std::to_string(train.seed));
    const auto& p = train.mdropnet.probs;
    kv(o, "mdropnet", quote(num(p[0]) + "," + num(p[1]) + "," + num(p[2])));
    kv(o, "max_steps", std::to_string(train.max_steps));
    kv(o, "eval_every", std::to_string(train.eval_every));
    kv(o, "max_decode_len", std::to_string(train.max_decode_len));
    kv(o, "log", quote(train.log));
    kv(o, "checkpoint", quote(train.checkpoint));
    kv(o, "best_checkpoint", quote(train.best_checkpoint));
    kv(o, "precision", quote(train.precision));
    o << "\n[sampler]\n";
    kv(o, "initial_temperature", num(sampler.initial_temperature));
    kv(o, "peak_temperature", num(sampler.peak_temperature));
    kv(o, "warmup_epochs", std::to_string(sampler.warmup_epochs));
    return o.str();
  }

  /// Architecture-only text; with the patch size its hash keys checkpoints.
  std::string model_section() const {
    std::ostringstream o;
    o << "[model]\n";
    kv(o, "fusion", quote(fusion_name(fusion)));
    kv(o, "cvlm_heads", std::to_string(cvlm_heads));
    kv(o, "init_seed", std::to_string(init_seed));
    for (const auto& [name, e] : {std::pair<const char*, const EncoderConfig*>{"text_encoder", &text},
                                  {"vision_encoder", &vision},
                                  {"decoder", &decoder}}) {
      o << "\n[model." << name << "]\n";
      kv(o, "layers", std::to_string(e->layers));
      kv(o, "d_model", std::to_string(e->d_model));
      kv(o, "heads", std::to_string(e->heads));
      kv(o, "ffn", std::to_string(e->ffn));
      kv(o, "dropout", num(e->dropout));
      kv(o, "max_positions", std::to_string(e->max_positions));
    }
    o << "\n";
    return o.str();
  }

  std::uint64_t model_hash(const Vocab& vocab) const {
    std::uint64_t h = fnv1a(model_section() + "patch = " + std::to_string(data.patch) + "\n");
    for (std::size_t i = 0; i < vocab.size(); ++i) h = fnv1a(vocab.token(static_cast<TokenId>(i)) + "\n", h);
    return h;
  }

 private:
  static std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  }
  static std::string quote(const std::string& s) { return "\"" + s + "\""; }
  static void kv(std::ostringstream& o, const char* k, const std::string& v) { o << k << " = " << v << "\n"; }
};

namespace detail {

inline std::string unquote(std::string v) {
  if (v.size() >= 2 && ((v.front() == '"' && v.back() == '"') || (v.front() == '\'' && v.back() == '\'')))
    v = v.substr(1, v.size() - 2);
  return v;
}

class ConfigReader {
 public:
  explicit ConfigReader(std::map<std::string, std::string> kv) : kv_(std::move(kv)) {}

  bool has(const std::string& key) const { return kv_.count(key) > 0; }

  std::string str(const std::string& key, const std::string& def) {
    auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    used_.insert(key);
    return it->second;
  }
  double real(const std::string& key, double def) {
    if (!has(key)) return def;
    const std::string v = str(key, "");
    try {
      std::size_t n = 0;
      const double d = std::stod(v, &n);
      if (n != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
  }
  std::uint64_t integer(const std::string& key, std::uint64_t def) {
    if (!has(key)) return def;
    const std::string v = str(key, "");
    try {
      std::size_t n = 0;
      if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
      const auto d = std::stoull(v, &n);
      if (n != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    }
  }
  std::vector<std::string> list(const std::string& key) {
    std::vector<std::string> out;
    std::stringstream ss(str(key, ""));
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
      if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
    }
    return out;
  }

  void reject_unknown() const {
    for (const auto& [k, _] : kv_)
      if (!used_.count(k)) throw ConfigError("unknown config key '" + k + "'");
  }

 private:
  std::map<std::string, std::string> kv_;
  std::set<std::string> used_;
};

inline void read_encoder(ConfigReader& r, const std::string& sec, EncoderConfig& e) {
  e.layers = r.integer(sec + ".layers", e.layers);
  e.d_model = r.integer(sec + ".d_model", e.d_model);
  e.heads = r.integer(sec + ".heads", e.heads);
  e.ffn = r.integer(sec + ".ffn", e.ffn);
  e.dropout = r.real(sec + ".dropout", e.dropout);
  e.max_positions = r.integer(sec + ".max_positions", e.max_positions);
}

}  // namespace detail

/// Parses TOML-style text. Relative paths resolve against `base_dir`.
/// [model] keys are shared defaults; [model.text_encoder], [model.vision_encoder]
/// and [model.decoder] override them per stack.
inline RunConfig parse_run_config(const std::string& text, const std::string& base_dir = ".") {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  std::map<std::string, std::string> kv;
  for (const auto& [section, sub] : tree) {
    if (sub.empty()) throw ConfigError("config key '" + section + "' outside a section");
    for (const auto& [key, val] : sub) kv[section + "." + key] = detail::unquote(val.data());
  }
  detail::ConfigReader r(std::move(kv));
  RunConfig c;

  auto resolve = [&](const std::string& p) {
    if (p.empty()) return p;
    const std::filesystem::path path(p);
    return path.is_absolute() ? p : (std::filesystem::path(base_dir) / path).lexically_normal().string();
  };

  c.data.dir = resolve(r.str("data.dir", ""));
  if (c.data.dir.empty()) throw ConfigError("data.dir is required");
  const std::filesystem::path root(c.data.dir);
  c.data.vocab = r.has("data.vocab") ? resolve(r.str("data.vocab", "")) : (root / "vocab.txt").string();
  c.data.train = r.has("data.train") ? resolve(r.str("data.train", "")) : (root / "train").string();
  c.data.dev = r.has("data.dev") ? resolve(r.str("data.dev", "")) : (root / "dev").string();
  c.data.patch = r.integer("data.patch", c.data.patch);

  EncoderConfig shared;
  detail::read_encoder(r, "model", shared);
  c.text = c.vision = c.decoder = shared;
  detail::read_encoder(r, "model.text_encoder", c.text);
  detail::read_encoder(r, "model.vision_encoder", c.vision);
  detail::read_encoder(r, "model.decoder", c.decoder);
  try {
    c.fusion = parse_fusion(r.str("model.fusion", "cvlm"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model.fusion: ") + e.what());
  }
  c.cvlm_heads = r.integer("model.cvlm_heads", shared.heads);
  c.init_seed = r.integer("model.init_seed", c.init_seed);

  c.augment.text_mask_fraction = r.real("augment.text_mask_fraction", c.augment.text_mask_fraction);
  c.augment.mean_span_length = r.real("augment.mean_span_length", c.augment.mean_span_length);
  c.augment.patch_mask_fraction = r.real("augment.patch_mask_fraction", c.augment.patch_mask_fraction);
  if (r.has("augment.transforms")) {
    c.augment.transforms.clear();
    try {
      for (const auto& name : r.list("augment.transforms")) c.augment.transforms.push_back(parse_transform(name));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("augment.transforms: ") + e.what());
    }
  }

  c.align.tau = r.real("align.tau", c.align.tau);
  const std::string tt = r.str("align.text_text", "off");
  if (tt != "on" && tt != "off") throw ConfigError("align.text_text: expected on|off, got '" + tt + "'");
  c.align.text_text = tt == "on";
  c.loss.lambda = r.real("loss.lambda", c.loss.lambda);
  c.loss.lambda_ramp = r.real("loss.lambda_ramp", c.loss.lambda_ramp);
  c.loss.label_smoothing = r.real("loss.label_smoothing", c.loss.label_smoothing);

  auto& t = c.train;
  t.epochs = r.integer("train.epochs", t.epochs);
  t.batch_size = r.integer("train.batch_size", t.batch_size);
  t.lr = r.real("train.lr", t.lr);
  t.warmup_steps = r.integer("train.warmup_steps", t.warmup_steps);
  t.beta1 = r.real("train.beta1", t.beta1);
  t.beta2 = r.real("train.beta2", t.beta2);
  t.eps = r.real("train.eps", t.eps);
  t.clip_norm = r.real("train.clip_norm", t.clip_norm);
  t.seed = r.integer("train.seed", t.seed);
  if (r.has("train.mdropnet")) {
    const auto parts = r.list("train.mdropnet");
    if (parts.size() != 3) throw ConfigError("train.mdropnet: expected three probabilities (text, image, fused)");
    for (std::size_t i = 0; i < 3; ++i) {
      try {
        t.mdropnet.probs[i] = std::stod(parts[i]);
      } catch (const std::exception&) {
        throw ConfigError("train.mdropnet: bad probability '" + parts[i] + "'");
      }
    }
  }
  t.max_steps = r.integer("train.max_steps", t.max_steps);
  t.eval_every = r.integer("train.eval_every", t.eval_every);
  t.max_decode_len = r.integer("train.max_decode_len", t.max_decode_len);
  t.log = resolve(r.str("train.log", ""));
  t.checkpoint = resolve(r.str("train.checkpoint", ""));
  t.best_checkpoint = resolve(r.str("train.best_checkpoint", ""));
  t.precision = r.str("train.precision", t.precision);

  c.sampler.initial_temperature = r.real("sampler.initial_temperature", c.sampler.initial_temperature);
  c.sampler.peak_temperature = r.real("sampler.peak_temperature", c.sampler.peak_temperature);
  c.sampler.warmup_epochs = r.integer("sampler.warmup_epochs", c.sampler.warmup_epochs);
  c.sampler.seed = t.seed;
  c.sampler.batch_size = t.batch_size;

  r.reject_unknown();
  try {
    c.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), std::filesystem::absolute(path).parent_path().string());
}

/// Checks that the files a run needs exist.
inline void check_run_files(const RunConfig& c) {
  if (!std::filesystem::exists(c.data.vocab)) throw ConfigError("vocab file not found: " + c.data.vocab);
  if (!std::filesystem::is_directory(c.data.train))
    throw ConfigError("training corpus directory not found: " + c.data.train);
}

}  // namespace m3p
