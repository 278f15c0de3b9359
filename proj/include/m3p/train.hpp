#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "m3p/alignment.hpp"
#include "m3p/checkpoint.hpp"
#include "m3p/config.hpp"
#include "m3p/data.hpp"
#include "m3p/evaluate.hpp"
#include "m3p/model.hpp"
#include "m3p/optim.hpp"

namespace m3p {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepRecord {
  std::size_t step = 0;  // 1-based
  std::size_t epoch = 0;
  Branch branch = Branch::Fused;
  double l_m = 0.0;
  double l_c = 0.0;
  double l_all = 0.0;
  double lambda = 0.0;  // effective weight after the ramp
  double lr = 0.0;
};

inline std::string to_json(const StepRecord& r) {
  char buf[320];
  std::snprintf(buf, sizeof buf,
                "{\"step\":%zu,\"epoch\":%zu,\"branch\":\"%s\",\"l_m\":%.17g,\"l_c\":%.17g,\"l_all\":%.17g,"
                "\"lambda\":%.17g,\"lr\":%.17g}",
                r.step, r.epoch, branch_name(r.branch), r.l_m, r.l_c, r.l_all, r.lambda, r.lr);
  return buf;
}

struct TrainResult {
  std::vector<StepRecord> steps;
  std::vector<std::pair<std::size_t, double>> dev_bleu;  // (epoch, BLEU)
  double best_dev_bleu = -1.0;
};

/// Optimisation loop: epoch temperature -> batch -> branch -> L_m (+ lambda L_c) -> Adam.
class Trainer {
 public:
  Trainer(RunConfig cfg, Vocab vocab, CorpusSet train, std::optional<CorpusSet> dev = std::nullopt)
      : cfg_(std::move(cfg)),
        vocab_(std::move(vocab)),
        train_(std::move(train)),
        dev_(std::move(dev)),
        model_(cfg_.model(vocab_.size())),
        adam_(model_.params(), {cfg_.train.beta1, cfg_.train.beta2, cfg_.train.eps}),
        rng_(cfg_.train.seed) {
    cfg_.validate();
    train_.validate();
    steps_per_epoch_ = (train_.total() + cfg_.train.batch_size - 1) / cfg_.train.batch_size;
    total_steps_ = cfg_.train.max_steps > 0 ? cfg_.train.max_steps : cfg_.train.epochs * steps_per_epoch_;
  }

  // The optimizer points into the model's parameter store.
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  /// Loads vocab and corpora named by the config.
  static Trainer from_config(const RunConfig& cfg) {
    check_run_files(cfg);
    Vocab vocab = Vocab::load(cfg.data.vocab);
    CorpusSet train = load_corpus_dir(cfg.data.train, vocab, cfg.data.patch);
    std::optional<CorpusSet> dev;
    if (!cfg.data.dev.empty() && std::filesystem::is_directory(cfg.data.dev))
      dev = load_corpus_dir(cfg.data.dev, vocab, cfg.data.patch);
    return Trainer(cfg, std::move(vocab), std::move(train), std::move(dev));
  }

  const RunConfig& config() const { return cfg_; }
  const Vocab& vocab() const { return vocab_; }
  const CorpusSet& train_set() const { return train_; }
  const std::optional<CorpusSet>& dev_set() const { return dev_; }
  Model<float>& model() { return model_; }
  const Model<float>& model() const { return model_; }
  std::size_t steps_done() const { return step_; }
  std::size_t steps_per_epoch() const { return steps_per_epoch_; }
  std::size_t total_steps() const { return total_steps_; }

  double lambda_at(std::size_t step) const {
    const double ramp = cfg_.loss.lambda_ramp * static_cast<double>(total_steps_);
    if (ramp <= 0.0) return cfg_.loss.lambda;
    return cfg_.loss.lambda * std::min(1.0, static_cast<double>(step) / ramp);
  }

  /// One optimisation step.
  StepRecord step() {
    const std::size_t s = ++step_;
    const std::size_t epoch = (s - 1) / steps_per_epoch_;
    CounterRng step_rng = rng_.derive(s);
    CounterRng batch_rng = step_rng.derive(0), branch_rng = step_rng.derive(1), aug_rng = step_rng.derive(2),
               drop_rng = step_rng.derive(3);

    const auto q = sampling_probs(train_.sizes(), epoch_temperature(epoch, cfg_.sampler));
    const Batch batch = sample_batch(train_, q, cfg_.train.batch_size, batch_rng, vocab_);
    const Branch branch = pick_branch(cfg_.train.mdropnet, branch_rng);

    model_.params().zero_grad();
    ForwardContext ctx{true, &drop_rng};
    auto out = model_.branch_forward(batch, branch, cfg_.loss.label_smoothing, ctx);

    StepRecord rec;
    rec.step = s;
    rec.epoch = epoch;
    rec.branch = branch;
    rec.lambda = lambda_at(s);
    rec.lr = inverse_sqrt_lr(cfg_.train.lr, s, cfg_.train.warmup_steps);
    rec.l_m = out.loss.item();

    Tensor<float> total = out.loss;
    if (branch != Branch::Image && rec.lambda > 0.0) {
      const Tensor<float> lc = contrastive_loss(batch, out, s, aug_rng, ctx);
      rec.l_c = lc.item();
      total = add(total, scale(lc, static_cast<float>(rec.lambda)));
    }
    rec.l_all = rec.l_m + rec.lambda * rec.l_c;
    if (!std::isfinite(rec.l_all)) dump_and_abort(rec, batch);

    backward(total);
    if (cfg_.train.clip_norm > 0.0) clip_grad_norm(model_.params(), cfg_.train.clip_norm);
    adam_.step(rec.lr);
    return rec;
  }

  /// Runs to the configured step budget. `on_step` sees every record.
  TrainResult run(const std::function<void(const StepRecord&)>& on_step = {}) {
    TrainResult result;
    std::unique_ptr<std::ofstream> log;
    if (!cfg_.train.log.empty()) {
      const auto parent = std::filesystem::path(cfg_.train.log).parent_path();
      if (!parent.empty()) std::filesystem::create_directories(parent);
      log = std::make_unique<std::ofstream>(cfg_.train.log, step_ == 0 ? std::ios::trunc : std::ios::app);
      if (!*log) throw TrainingError("cannot open metrics log " + cfg_.train.log);
    }
    while (step_ < total_steps_) {
      const StepRecord rec = step();
      if (log) *log << to_json(rec) << "\n";
      if (on_step) on_step(rec);
      result.steps.push_back(rec);
      const bool epoch_end = rec.step % steps_per_epoch_ == 0 || rec.step == total_steps_;
      const std::size_t epochs_done = (rec.step + steps_per_epoch_ - 1) / steps_per_epoch_;
      if (epoch_end && dev_ && cfg_.train.eval_every > 0 &&
          (epochs_done % cfg_.train.eval_every == 0 || rec.step == total_steps_)) {
        const double bleu = dev_bleu();
        result.dev_bleu.emplace_back(epochs_done, bleu);
        if (bleu > result.best_dev_bleu) {
          result.best_dev_bleu = bleu;
          if (!cfg_.train.best_checkpoint.empty()) save_checkpoint(cfg_.train.best_checkpoint, checkpoint());
        }
      }
    }
    if (log) log->flush();
    if (!cfg_.train.checkpoint.empty()) save_checkpoint(cfg_.train.checkpoint, checkpoint());
    return result;
  }

  double dev_bleu() const {
    if (!dev_) throw TrainingError("no dev corpus configured");
    DecodeOptions opt;
    opt.max_len = cfg_.train.max_decode_len;
    return evaluate_bleu(model_, vocab_, *dev_, opt).bleu;
  }

  Checkpoint checkpoint() const {
    Checkpoint c;
    c.config_hash = cfg_.model_hash(vocab_);
    c.step = step_;
    c.epoch = step_ / steps_per_epoch_;
    c.rng_seed = rng_.seed();
    c.rng_counter = rng_.counter();
    c.config_text = cfg_.canonical();
    for (std::size_t i = 0; i < vocab_.size(); ++i) c.vocab.push_back(vocab_.token(static_cast<TokenId>(i)));
    c.tensors = capture_tensors(model_.params(), &adam_);
    return c;
  }

  /// Continues from a checkpoint written by a trainer with the same architecture.
  void resume(const Checkpoint& c) {
    if (c.config_hash != cfg_.model_hash(vocab_)) throw CheckpointError("config hash mismatch on resume");
    restore_tensors(c, model_.params(), &adam_);
    step_ = c.step;
    rng_ = CounterRng(c.rng_seed, c.rng_counter);
  }

 private:
  /// InfoNCE over one view pair per scene in the batch. Even steps pair an
  /// augmented text with the clean image, odd steps the clean text with an
  /// augmented image. Repeated scenes keep only their first row.
  Tensor<float> contrastive_loss(const Batch& batch, const Model<float>::BranchOutput& out, std::size_t s,
                                 CounterRng& rng, ForwardContext& ctx) const {
    std::vector<std::size_t> rows;
    std::set<const PatchGrid*> seen;
    for (std::size_t i = 0; i < batch.size; ++i)
      if (seen.insert(batch.samples[i]->image.get()).second) rows.push_back(i);

    std::vector<Sample> views;
    views.reserve(rows.size());
    std::vector<const Sample*> ptrs;
    for (std::size_t r : rows) {
      const Sample& src = *batch.samples[r];
      Sample v = src;
      const auto aug = augmented_views(src, cfg_.augment, rng);
      if (s % 2 == 0)
        v.src_tokens = aug.text;
      else
        v.image = std::make_shared<const PatchGrid>(aug.image);
      views.push_back(std::move(v));
    }
    for (const auto& v : views) ptrs.push_back(&v);
    const Batch vb = collate(ptrs, vocab_);

    Tensor<float> text_emb, image_emb;
    if (s % 2 == 0) {
      text_emb = model_.pool_text(model_.encode_text(vb, ctx), content_mask(vb.src, vb.src_valid, vb.src_len, vocab_));
      image_emb = out.vision ? index_rows(model_.pool_image(*out.vision), rows)
                             : model_.pool_image(model_.encode_image(vb, ctx));
    } else {
      text_emb = index_rows(
          model_.pool_text(*out.text, content_mask(batch.src, batch.src_valid, batch.src_len, vocab_)), rows);
      image_emb = model_.pool_image(model_.encode_image(vb, ctx));
    }
    Tensor<float> loss = info_nce(text_emb, image_emb, cfg_.align.tau);

    if (cfg_.align.text_text) {
      std::vector<Sample> other;
      other.reserve(rows.size());
      std::vector<const Sample*> optrs;
      for (std::size_t r : rows) {
        Sample o = *batch.samples[r];
        o.src_tokens = vocab_.tokenize(lang_tag(o.src_lang) + " " + o.tgt_text);
        other.push_back(std::move(o));
      }
      for (const auto& o : other) optrs.push_back(&o);
      const Batch ob = collate(optrs, vocab_);
      const Tensor<float> other_emb =
          model_.pool_text(model_.encode_text(ob, ctx), content_mask(ob.src, ob.src_valid, ob.src_len, vocab_));
      loss = add(loss, info_nce(text_emb, other_emb, cfg_.align.tau));
    }
    return loss;
  }

  [[noreturn]] void dump_and_abort(const StepRecord& rec, const Batch& batch) const {
    std::ostringstream msg;
    msg << "non-finite loss at step " << rec.step << " (" << to_json(rec) << ")\n";
    msg << "parameter norms:\n";
    for (const auto& [name, p] : model_.params().items()) {
      double n = 0;
      for (float v : p.data()) n += static_cast<double>(v) * v;
      msg << "  " << name << " " << std::sqrt(n) << "\n";
    }
    msg << "batch:\n";
    for (const Sample* smp : batch.samples)
      msg << "  " << smp->src_lang << "-" << smp->tgt_lang << " | " << smp->src_text << " | " << smp->tgt_text << "\n";
    if (!cfg_.train.log.empty()) {
      std::ofstream dump(cfg_.train.log + ".nan-dump.txt");
      dump << msg.str();
    }
    throw TrainingError(msg.str());
  }

  RunConfig cfg_;
  Vocab vocab_;
  CorpusSet train_;
  std::optional<CorpusSet> dev_;
  Model<float> model_;
  Adam<float> adam_;
  CounterRng rng_;
  std::size_t step_ = 0;
  std::size_t steps_per_epoch_ = 1;
  std::size_t total_steps_ = 0;
};

}  // namespace m3p
