// Command-line front end: toy data generation, training, decoding, evaluation.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "m3p/m3p.hpp"

using namespace m3p;

namespace {

std::shared_ptr<const PatchGrid> load_grid(const std::string& path, std::size_t patch) {
  return std::make_shared<const PatchGrid>(patchify(read_ppm(path), patch));
}

int gen_toy_data(const toy::ToySpec& spec, const std::string& out) {
  const auto tc = toy::generate_toy_corpus(spec);
  toy::write_toy_corpus(tc, out);
  std::printf("wrote %zu languages, %zu scenes, vocab %zu to %s\n", spec.languages, tc.scenes.size(),
              tc.vocab.size(), out.c_str());
  return 0;
}

int train(const std::string& config_path, const std::string& resume, bool quiet) {
  const RunConfig cfg = load_run_config(config_path);
  Trainer trainer = Trainer::from_config(cfg);
  if (!resume.empty()) trainer.resume(load_checkpoint(resume));
  std::fprintf(stderr, "training %zu steps (%zu per epoch), %zu parameters\n", trainer.total_steps(),
               trainer.steps_per_epoch(), trainer.model().params().count());
  double sum = 0;
  std::size_t n = 0;
  const auto result = trainer.run([&](const StepRecord& r) {
    sum += r.l_all;
    ++n;
    if (!quiet && r.step % trainer.steps_per_epoch() == 0) {
      std::fprintf(stderr, "epoch %zu step %zu mean l_all %.4f lr %.3g\n", r.step / trainer.steps_per_epoch(),
                   r.step, sum / static_cast<double>(n), r.lr);
      sum = 0;
      n = 0;
    }
  });
  for (const auto& [epoch, bleu] : result.dev_bleu) std::fprintf(stderr, "dev BLEU after epoch %zu: %.2f\n", epoch, bleu);
  if (!cfg.train.checkpoint.empty()) std::fprintf(stderr, "checkpoint: %s\n", cfg.train.checkpoint.c_str());
  return 0;
}

void dump_attention(const std::string& path, const Tensor<float>& attn, const Batch& b, const Vocab& vocab) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "head,query_pos,query_token,patch,weight\n";
  const std::size_t H = attn.dim(1), U = attn.dim(2), V = attn.dim(3);
  const auto w = attn.data();
  char buf[32];
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t u = 0; u < U; ++u)
      for (std::size_t v = 0; v < V; ++v) {
        std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(w[(h * U + u) * V + v]));
        out << h << "," << u << "," << vocab.token(b.src[u]) << "," << v << "," << buf << "\n";
      }
}

int translate(const std::string& ckpt, const std::string& src, const std::string& image, const std::string& src_lang,
              const std::string& tgt_lang, const std::string& attn_path, std::size_t max_len) {
  const LoadedModel lm = load_model(ckpt);
  if (lm.model.config().fusion == Fusion::None && !attn_path.empty())
    throw std::invalid_argument("--dump-attn needs a model with cvlm fusion");
  const Sample s = make_sample(lm.vocab, src_lang, tgt_lang, src, "", load_grid(image, lm.config.data.patch));
  const Batch b = collate({&s}, lm.vocab);
  NoGradGuard guard;
  ForwardContext ctx;
  Tensor<float> attn;
  const bool want_attn = !attn_path.empty() && lm.model.config().fusion == Fusion::Cvlm;
  const auto memory = lm.model.translation_memory(b, ctx, want_attn ? &attn : nullptr);
  std::cout << lm.vocab.detokenize(lm.model.greedy(b, memory, max_len).front()) << "\n";
  if (want_attn) dump_attention(attn_path, attn, b, lm.vocab);
  return 0;
}

int caption(const std::string& ckpt, const std::string& image, const std::string& tgt_lang, std::size_t max_len) {
  const LoadedModel lm = load_model(ckpt);
  const Sample s = make_sample(lm.vocab, tgt_lang, tgt_lang, "", "", load_grid(image, lm.config.data.patch));
  const Batch b = collate({&s}, lm.vocab);
  NoGradGuard guard;
  ForwardContext ctx;
  const auto memory = lm.model.encode_image(b, ctx);
  std::cout << lm.vocab.detokenize(lm.model.greedy(b, memory, max_len).front()) << "\n";
  return 0;
}

int eval(const std::string& ckpt, const std::string& test, double mask_ratio, const std::string& mode,
         std::uint64_t seed, const std::string& hyp_path) {
  const LoadedModel lm = load_model(ckpt);
  const CorpusSet set = load_corpus_dir(test, lm.vocab, lm.config.data.patch);
  DecodeOptions opt;
  opt.mode = parse_decode_mode(mode);
  opt.mask_ratio = mask_ratio;
  opt.seed = seed;
  opt.max_len = lm.config.train.max_decode_len;
  const EvalResult r = evaluate_bleu(lm.model, lm.vocab, set, opt);
  if (!hyp_path.empty()) {
    std::ofstream out(hyp_path);
    for (const auto& h : r.hyps) out << h << "\n";
  }
  std::printf("{\"mode\":\"%s\",\"mask_ratio\":%g,\"sentences\":%zu,\"bleu\":%.4f}\n", mode.c_str(), mask_ratio,
              r.hyps.size(), r.bleu);
  return 0;
}

int export_embeddings(const std::string& ckpt, const std::string& corpus, const std::string& out) {
  const LoadedModel lm = load_model(ckpt);
  const std::string dir = corpus.empty() ? lm.config.data.train : corpus;
  const CorpusSet set = load_corpus_dir(dir, lm.vocab, lm.config.data.patch);
  const auto rows = sentence_embeddings(lm.model, lm.vocab, set);
  write_embeddings_csv(out, rows);
  std::printf("wrote %zu rows to %s (mean parallel cosine %.4f)\n", rows.size(), out.c_str(),
              mean_parallel_cosine(rows));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multilingual multimodal translation: toy data, training, decoding"};
  app.require_subcommand(1);

  toy::ToySpec spec;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-toy-data", "Write a synthetic parallel image-text corpus");
  gen->add_option("--langs", spec.languages, "Number of languages (>= 2)")->check(CLI::Range(2, 64));
  gen->add_option("--size", spec.scenes, "Training scenes")->check(CLI::PositiveNumber);
  gen->add_option("--img", spec.image_size, "Image side in pixels");
  gen->add_option("--patch", spec.patch, "Patch side in pixels");
  gen->add_option("--seed", spec.seed, "Generator seed");
  gen->add_flag("--balanced", spec.balanced, "Equal corpus sizes for every direction");
  gen->add_option("--out", gen_out, "Output directory")->required();

  std::string config, resume;
  bool quiet = false;
  auto* tr = app.add_subcommand("train", "Train from a run config");
  tr->add_option("--config", config, "Run config (TOML-style)")->required()->check(CLI::ExistingFile);
  tr->add_option("--resume", resume, "Continue from a checkpoint")->check(CLI::ExistingFile);
  tr->add_flag("--quiet", quiet, "No per-epoch progress");

  std::string ckpt, src, image, src_lang, tgt_lang, attn_path;
  std::size_t max_len = 40;
  auto* tl = app.add_subcommand("translate", "Translate one sentence with its image");
  tl->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingFile);
  tl->add_option("--src", src, "Source sentence")->required();
  tl->add_option("--image", image, "PPM image")->required()->check(CLI::ExistingFile);
  tl->add_option("--src-lang", src_lang)->required();
  tl->add_option("--tgt-lang", tgt_lang)->required();
  tl->add_option("--dump-attn", attn_path, "Write CVLM attention weights as CSV");
  tl->add_option("--max-len", max_len);

  auto* cap = app.add_subcommand("caption", "Describe an image in the target language");
  cap->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingFile);
  cap->add_option("--image", image, "PPM image")->required()->check(CLI::ExistingFile);
  cap->add_option("--tgt-lang", tgt_lang)->required();
  cap->add_option("--max-len", max_len);

  std::string test, mode = "translate", hyp_path;
  double mask_ratio = 0.0;
  std::uint64_t seed = 0;
  auto* ev = app.add_subcommand("eval", "Corpus BLEU on a test directory");
  ev->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingFile);
  ev->add_option("--test", test, "Directory of JSONL corpora")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--mask-ratio", mask_ratio, "Fraction of source words replaced by the mask token")
      ->check(CLI::Range(0.0, 1.0));
  ev->add_option("--mode", mode, "translate|caption")->check(CLI::IsMember({"translate", "caption"}));
  ev->add_option("--seed", seed, "Seed for source masking");
  ev->add_option("--hyps", hyp_path, "Write hypotheses, one per line");

  std::string emb_out, corpus;
  auto* ex = app.add_subcommand("export-embeddings", "Pooled sentence embeddings as CSV");
  ex->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingFile);
  ex->add_option("--out", emb_out)->required();
  ex->add_option("--corpus", corpus, "Corpus directory (default: the training corpus)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return gen_toy_data(spec, gen_out);
    if (*tr) return train(config, resume, quiet);
    if (*tl) return translate(ckpt, src, image, src_lang, tgt_lang, attn_path, max_len);
    if (*cap) return caption(ckpt, image, tgt_lang, max_len);
    if (*ev) return eval(ckpt, test, mask_ratio, mode, seed, hyp_path);
    if (*ex) return export_embeddings(ckpt, corpus, emb_out);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
