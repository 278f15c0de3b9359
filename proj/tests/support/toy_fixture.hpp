#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <unistd.h>

#include "m3p/m3p.hpp"

namespace m3p::testing {

/// Fresh scratch directory under the system temp dir, unique per process.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() /
                   ("m3p-" + name + "-" + std::to_string(static_cast<long>(::getpid())));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// Writes a toy corpus to `dir` and returns a run config text for it.
/// `extra` is appended and may override any section key.
inline std::string toy_config_text(const std::filesystem::path& dir, const std::string& extra = "") {
  return "[data]\ndir = \"" + dir.string() + "\"\npatch = 8\n\n" + extra;
}

struct ToyWorkspace {
  std::filesystem::path dir;
  toy::ToyCorpus corpus;

  ToyWorkspace(const std::string& name, const toy::ToySpec& spec) : dir(scratch_dir(name)) {
    corpus = toy::generate_toy_corpus(spec);
    toy::write_toy_corpus(corpus, dir.string());
  }

  RunConfig config(const std::string& sections) const {
    return parse_run_config(toy_config_text(dir, sections), dir.string());
  }
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace m3p::testing

namespace m3p::testing {

/// A few-second model for trainer tests.
inline const char* kSmallModel = R"(
[model]
layers = 1
d_model = 16
heads = 2
ffn = 32
dropout = 0.1

[train]
batch_size = 8
warmup_steps = 10
eval_every = 0
)";

inline toy::ToySpec small_spec() {
  toy::ToySpec s;
  s.languages = 3;
  s.scenes = 12;
  return s;
}

}  // namespace m3p::testing
