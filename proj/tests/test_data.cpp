#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "support/toy_fixture.hpp"

using namespace m3p;
using namespace m3p::testing;

TEST(Vocab, TokenizeDetokenizeRoundTrip) {
  const Vocab v({"En", "De"}, {"red", "square", "top"});
  const auto ids = v.tokenize("[De] red square top");
  ASSERT_EQ(ids.size(), 5u);
  EXPECT_EQ(ids.front(), v.tag_id("De"));
  EXPECT_EQ(ids.back(), kEos);
  EXPECT_EQ(v.detokenize(ids), "red square top");
  EXPECT_EQ(v.tokenize("red").front(), kBos);
  EXPECT_THROW(v.tokenize("purple"), std::out_of_range);
  EXPECT_EQ(v.tag_language(v.tag_id("En")), "En");
}

TEST(Vocab, FileRoundTrip) {
  const auto dir = scratch_dir("vocab");
  const Vocab v({"En"}, {"a", "b"});
  v.save((dir / "v.txt").string());
  EXPECT_EQ(Vocab::load((dir / "v.txt").string()).tokens(), v.tokens());
  std::ofstream((dir / "bad.txt").string()) << "a\nb\n";
  EXPECT_THROW(Vocab::load((dir / "bad.txt").string()), std::runtime_error);
}

TEST(Collate, PadsAndShiftsTargets) {
  const Vocab v({"En", "De"}, {"a", "b", "c"});
  auto img = std::make_shared<const PatchGrid>(patchify(Image(8, 8, 3), 4));
  const auto s1 = make_sample(v, "En", "De", "a b c", "b", img);
  const auto s2 = make_sample(v, "En", "De", "a", "a b c", img);
  const Batch b = collate({&s1, &s2}, v);
  EXPECT_EQ(b.src_len, 5u);  // [De] a b c eos
  EXPECT_EQ(b.tgt_len, 4u);  // bos a b c
  EXPECT_EQ(b.tgt_in[0], kBos);
  EXPECT_EQ(b.tgt_out[0], v.id("b"));
  EXPECT_EQ(b.tgt_out[1], kEos);
  EXPECT_EQ(b.tgt_out[2], kPad);
  EXPECT_EQ(b.src_valid[5 + 3], 0);
  EXPECT_EQ(b.tgt_tags[1], v.tag_id("De"));
  EXPECT_EQ(b.patches.size(), 2 * 4 * 48u);
}

TEST(Sampler, ProbabilitiesSumToOne) {
  for (double tau : {1.0, 1.7, 5.0, 100.0}) {
    const auto q = sampling_probs({1000, 300, 20, 7}, tau);
    EXPECT_NEAR(std::accumulate(q.begin(), q.end(), 0.0), 1.0, 1e-12);
  }
}

TEST(Sampler, UnitTemperatureIsProportional) {
  const std::vector<std::size_t> sizes{1000, 300, 20, 7};
  const auto q = sampling_probs(sizes, 1.0);
  for (std::size_t m = 0; m < sizes.size(); ++m) EXPECT_NEAR(q[m], sizes[m] / 1327.0, 1e-15);
}

TEST(Sampler, HighTemperatureFlattens) {
  const auto q1 = sampling_probs({1000, 10}, 1.0), q5 = sampling_probs({1000, 10}, 5.0);
  EXPECT_GT(q5[1], q1[1]);
  EXPECT_NEAR(sampling_probs({1000, 10}, 1e9)[1], 0.5, 1e-6);
}

TEST(Sampler, TemperatureRampEndpoints) {
  SamplerConfig c;
  c.initial_temperature = 1.3;
  c.peak_temperature = 4.1;
  c.warmup_epochs = 7;
  EXPECT_EQ(epoch_temperature(0, c), 1.3);
  EXPECT_EQ(epoch_temperature(7, c), 4.1);
  EXPECT_EQ(epoch_temperature(50, c), 4.1);
  EXPECT_GT(epoch_temperature(3, c), 1.3);
  EXPECT_LT(epoch_temperature(3, c), 4.1);
}

TEST(Sampler, DrawFrequenciesMatchDistribution) {
  const Vocab v({"En", "De"}, {"a"});
  auto img = std::make_shared<const PatchGrid>(patchify(Image(4, 4, 3), 4));
  CorpusSet set;
  const std::size_t sizes[] = {50, 20, 5};
  for (std::size_t m = 0; m < 3; ++m) {
    Corpus c{"c" + std::to_string(m), {}};
    for (std::size_t i = 0; i < sizes[m]; ++i) c.samples.push_back(make_sample(v, "En", "De", "a", "a", img));
    set.corpora.push_back(std::move(c));
  }
  const auto q = sampling_probs(set.sizes(), 3.0);
  CounterRng rng(11);
  std::vector<double> counts(3, 0);
  const auto rows = sample_indices(set, q, 100000, rng);
  for (const Sample* s : rows)
    for (std::size_t m = 0; m < 3; ++m)
      if (s >= set.corpora[m].samples.data() && s < set.corpora[m].samples.data() + sizes[m]) counts[m] += 1;
  for (std::size_t m = 0; m < 3; ++m) EXPECT_NEAR(counts[m] / 1e5, q[m], 0.01);
}

TEST(Sampler, RejectsEmptyCorpora) {
  EXPECT_THROW(sampling_probs({}, 1.0), std::invalid_argument);
  EXPECT_THROW(sampling_probs({3, 0}, 1.0), std::invalid_argument);
  EXPECT_THROW(sampling_probs({3}, 0.0), std::invalid_argument);
}

TEST(Branches, FrequenciesMatchSchedule) {
  BranchSchedule sched;
  CounterRng rng(21);
  std::array<double, 3> counts{};
  for (int i = 0; i < 100000; ++i) counts[static_cast<std::size_t>(pick_branch(sched, rng))] += 1;
  for (std::size_t b = 0; b < 3; ++b) EXPECT_NEAR(counts[b] / 1e5, sched.probs[b], 0.01);
}

TEST(ToyCorpus, ParallelScenesAndDistinctInventories) {
  const auto tc = toy::generate_toy_corpus({});
  ASSERT_EQ(tc.lexicons.size(), 4u);
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = a + 1; b < 4; ++b)
      for (const auto& w : tc.lexicons[a].words())
        for (const auto& u : tc.lexicons[b].words()) EXPECT_NE(w, u);
  // every record of a scene describes the same objects, so the image determines the words
  for (const auto& [name, recs] : tc.train.corpora)
    for (const auto& r : recs) {
      const auto& sc = tc.scenes.at(r.scene);
      const auto src = std::find_if(tc.lexicons.begin(), tc.lexicons.end(),
                                    [&](const toy::Lexicon& l) { return l.language == r.src_lang; });
      EXPECT_EQ(r.src_text, toy::describe(sc, *src));
    }
  // decaying corpus sizes: hub pairs with later languages are smaller
  EXPECT_GT(tc.train.corpora.at("En-De").size(), tc.train.corpora.at("En-Cs").size());
}

TEST(ToyCorpus, WrittenCorpusLoadsBack) {
  toy::ToySpec spec;
  spec.scenes = 20;
  ToyWorkspace ws("toyio", spec);
  const Vocab v = Vocab::load((ws.dir / "vocab.txt").string());
  EXPECT_EQ(v.tokens(), ws.corpus.vocab.tokens());
  const CorpusSet loaded = load_corpus_dir((ws.dir / "train").string(), v, 8);
  const CorpusSet direct = ws.corpus.materialize(ws.corpus.train);
  ASSERT_EQ(loaded.sizes(), direct.sizes());
  for (std::size_t c = 0; c < loaded.corpora.size(); ++c)
    for (std::size_t i = 0; i < loaded.corpora[c].samples.size(); ++i) {
      const auto& a = loaded.corpora[c].samples[i];
      const auto& b = direct.corpora[c].samples[i];
      EXPECT_EQ(a.src_tokens, b.src_tokens);
      EXPECT_EQ(a.tgt_tokens, b.tgt_tokens);
      EXPECT_EQ(a.image->patches, b.image->patches);  // 8-bit palette survives PPM exactly
    }
}

TEST(ToyCorpus, JsonlErrorsNameTheLine) {
  const auto dir = scratch_dir("badjsonl");
  std::ofstream(dir / "a-b.jsonl") << "{\"src_lang\":\"En\"}\n";
  const Vocab v({"En"}, {"a"});
  try {
    load_corpus_dir(dir.string(), v, 8);
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("a-b.jsonl:1"), std::string::npos);
  }
}

TEST(Sampler, FormulaOracle) {
  const double a = std::sqrt(0.1), b = std::sqrt(0.4), c = std::sqrt(0.5), z = a + b + c;
  const auto q = sampling_probs({1, 4, 5}, 2.0);
  EXPECT_NEAR(q[0], a / z, 1e-12);
  EXPECT_NEAR(q[1], b / z, 1e-12);
  EXPECT_NEAR(q[2], c / z, 1e-12);
  SamplerConfig cfg;
  cfg.initial_temperature = 1.0;
  cfg.peak_temperature = 5.0;
  cfg.warmup_epochs = 4;
  EXPECT_DOUBLE_EQ(epoch_temperature(2, cfg), 3.0);
  double prev = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_GE(epoch_temperature(i, cfg), prev);
    prev = epoch_temperature(i, cfg);
  }
}

TEST(Sampler, LargerCorpusNeverGetsLessMass) {
  CounterRng rng(3);
  for (int t = 0; t < 200; ++t) {
    std::vector<std::size_t> sizes(2 + rng.uniform_int(5));
    for (auto& s : sizes) s = 1 + rng.uniform_int(1000);
    const auto q = sampling_probs(sizes, 0.5 + 5 * rng.uniform());
    for (std::size_t i = 0; i < sizes.size(); ++i)
      for (std::size_t j = 0; j < sizes.size(); ++j)
        if (sizes[i] > sizes[j]) EXPECT_GE(q[i], q[j]);
  }
}

TEST(Sampler, DegenerateDistributionAndSingletonBatch) {
  const Vocab v({"En", "De"}, {"a", "b"});
  auto img = std::make_shared<const PatchGrid>(patchify(Image(4, 4, 3), 4));
  CorpusSet set;
  set.corpora.push_back({"x", {make_sample(v, "En", "De", "a b", "b", img)}});
  set.corpora.push_back({"y", {make_sample(v, "En", "De", "a", "a b a", img)}});
  CounterRng rng(4);
  for (const Sample* s : sample_indices(set, {1.0, 0.0}, 500, rng)) EXPECT_EQ(s, &set.corpora[0].samples[0]);
  const Batch b = sample_batch(set, {0.0, 1.0}, 1, rng, v);
  for (auto m : b.src_valid) EXPECT_EQ(m, 1);
  for (auto m : b.tgt_valid) EXPECT_EQ(m, 1);
}

TEST(Vocab, EmptyTextIsBosEos) {
  const Vocab v({"En"}, {"a"});
  EXPECT_EQ(v.tokenize(""), (std::vector<TokenId>{kBos, kEos}));
}

TEST(ToyCorpus, SameSeedIsByteIdentical) {
  toy::ToySpec spec;
  spec.scenes = 30;
  ToyWorkspace a("toy-a", spec), b("toy-b", spec);
  for (const auto& e : std::filesystem::recursive_directory_iterator(a.dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(e.path(), a.dir);
    EXPECT_EQ(read_file(e.path()), read_file(b.dir / rel)) << rel;
  }
}

// Reads each cell's centre pixel back to a colour index and checks it against the scene.
TEST(ToyCorpus, ImagesDecodeBackToScenes) {
  const auto tc = toy::generate_toy_corpus({});
  const std::size_t P = tc.spec.patch, G = tc.spec.image_size / P;
  for (const auto& [id, scene] : tc.scenes) {
    const Image img = toy::render_scene(scene, tc.spec.image_size, P);
    for (std::size_t cell = 0; cell < G * G; ++cell) {
      const std::size_t y = (cell / G) * P + P / 2, x = (cell % G) * P + P / 2;
      const std::array<float, 3> px{img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2)};
      int decoded = -1;
      for (std::size_t c = 0; c < toy::kNumColors; ++c)
        if (toy::kPalette[c] == px) decoded = static_cast<int>(c);
      const auto it = std::find_if(scene.objects.begin(), scene.objects.end(),
                                   [&](const toy::Object& o) { return o.cell == cell; });
      if (it == scene.objects.end())
        EXPECT_EQ(decoded, -1) << "scene " << id << " cell " << cell;
      else
        EXPECT_EQ(decoded, static_cast<int>(it->color)) << "scene " << id << " cell " << cell;
    }
  }
}

TEST(ToyCorpus, SplitsUseDisjointScenes) {
  const auto tc = toy::generate_toy_corpus({});
  std::set<std::int64_t> train, test;
  for (const auto& [_, recs] : tc.train.corpora)
    for (const auto& r : recs) train.insert(r.scene);
  for (const auto& [_, recs] : tc.test.corpora)
    for (const auto& r : recs) test.insert(r.scene);
  for (auto s : test) EXPECT_EQ(train.count(s), 0u);
}
