#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "m3p/data.hpp"
#include "m3p/image.hpp"
#include "m3p/rng.hpp"

namespace m3p::toy {

inline constexpr std::size_t kNumColors = 8;
inline constexpr std::size_t kNumShapes = 4;

// Every channel is a multiple of 1/255 so images survive PPM exactly.
inline constexpr std::array<std::array<float, 3>, kNumColors> kPalette{{
    {1.f, 0.f, 0.f}, {0.f, 1.f, 0.f}, {0.f, 0.f, 1.f}, {1.f, 1.f, 0.f},
    {1.f, 0.f, 1.f}, {0.f, 1.f, 1.f}, {1.f, 1.f, 1.f}, {1.f, 128.f / 255.f, 0.f},
}};

enum class Shape { Square = 0, Circle = 1, Triangle = 2, Cross = 3 };

struct Object {
  std::size_t cell;  // row-major grid index
  std::size_t color;
  std::size_t shape;
  auto operator<=>(const Object&) const = default;
};

struct Scene {
  std::int64_t id = 0;
  std::vector<Object> objects;  // one per row, sorted top to bottom
};

/// True when pixel (y, x) of a P x P cell belongs to the shape.
inline bool shape_covers(std::size_t shape, std::size_t y, std::size_t x, std::size_t P) {
  const double c = static_cast<double>(P) / 2.0;
  const double dy = static_cast<double>(y) + 0.5 - c;
  const double dx = static_cast<double>(x) + 0.5 - c;
  switch (static_cast<Shape>(shape)) {
    case Shape::Square: return true;
    case Shape::Circle: return dy * dy + dx * dx <= c * c;
    case Shape::Triangle: return x <= y;
    case Shape::Cross: return std::abs(dy) < c / 2.0 || std::abs(dx) < c / 2.0;
  }
  return false;
}

/// Flat-colour cells on a black background, one object per P x P cell.
inline Image render_scene(const Scene& s, std::size_t img_size, std::size_t P) {
  Image img(img_size, img_size, 3, 0.f);
  const std::size_t G = img_size / P;
  for (const auto& o : s.objects) {
    const std::size_t gr = o.cell / G, gc = o.cell % G;
    for (std::size_t y = 0; y < P; ++y)
      for (std::size_t x = 0; x < P; ++x) {
        if (!shape_covers(o.shape, y, x, P)) continue;
        for (std::size_t c = 0; c < 3; ++c) img.at(gr * P + y, gc * P + x, c) = kPalette[o.color][c];
      }
  }
  return img;
}

/// Per-language lexicon: one word per color, shape and grid cell, and a
/// language-specific slot order. Objects are described back to back.
struct Lexicon {
  std::string language;
  std::vector<std::string> colors, shapes, cells;
  std::array<int, 3> order;  // permutation of {0 color, 1 shape, 2 cell}

  std::vector<std::string> words() const {
    std::vector<std::string> w;
    for (const auto* list : {&colors, &shapes, &cells}) w.insert(w.end(), list->begin(), list->end());
    return w;
  }
};

inline Lexicon make_lexicon(std::size_t lang_index, std::size_t grid) {
  static const std::array<const char*, 8> names{"En", "De", "Fr", "Cs", "Es", "It", "Nl", "Pt"};
  Lexicon lx;
  lx.language = lang_index < names.size() ? names[lang_index] : "L" + std::to_string(lang_index);
  static const std::array<std::array<int, 3>, 4> orders{{{0, 1, 2}, {2, 0, 1}, {1, 0, 2}, {1, 2, 0}}};
  lx.order = orders[lang_index % orders.size()];
  std::vector<std::string> rows, cols;
  if (lang_index < 4 && grid == 4) {
    switch (lang_index) {
      case 0:
        lx.colors = {"red", "green", "blue", "yellow", "pink", "cyan", "white", "orange"};
        lx.shapes = {"square", "circle", "triangle", "cross"};
        rows = {"top", "upper", "lower", "bottom"};
        cols = {"left", "midleft", "midright", "right"};
        break;
      case 1:
        lx.colors = {"rot", "gruen", "blau", "gelb", "rosa", "tuerkis", "weiss", "orangefarben"};
        lx.shapes = {"quadrat", "kreis", "dreieck", "kreuz"};
        rows = {"oben", "hoch", "tief", "unten"};
        cols = {"links", "mittellinks", "mittelrechts", "rechts"};
        break;
      case 2:
        lx.colors = {"rouge", "vert", "bleu", "jaune", "rose", "turquoise", "blanc", "orangee"};
        lx.shapes = {"carre", "cercle", "trigone", "croix"};
        rows = {"haut", "hautmilieu", "basmilieu", "bas"};
        cols = {"gauche", "centregauche", "centredroite", "droite"};
        break;
      default:
        lx.colors = {"cervena", "zelena", "modra", "zluta", "ruzova", "tyrkysova", "bila", "oranzova"};
        lx.shapes = {"ctverec", "kruh", "trojuhelnik", "krizek"};
        rows = {"nahore", "vyse", "nize", "dole"};
        cols = {"vlevo", "stredvlevo", "stredvpravo", "vpravo"};
        break;
    }
    for (const auto& r : rows)
      for (const auto& c : cols) lx.cells.push_back(r + "-" + c);
    return lx;
  }
  // synthetic inventory: unique per language by prefix
  std::string p = lx.language;
  for (auto& ch : p) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  for (std::size_t i = 0; i < kNumColors; ++i) lx.colors.push_back(p + "_c" + std::to_string(i));
  for (std::size_t i = 0; i < kNumShapes; ++i) lx.shapes.push_back(p + "_s" + std::to_string(i));
  for (std::size_t i = 0; i < grid * grid; ++i) lx.cells.push_back(p + "_p" + std::to_string(i));
  return lx;
}

inline std::string describe(const Scene& s, const Lexicon& lx) {
  std::string out;
  for (const auto& o : s.objects) {
    const std::array<const std::string*, 3> slot{&lx.colors[o.color], &lx.shapes[o.shape], &lx.cells[o.cell]};
    for (int k : lx.order) out += (out.empty() ? "" : " ") + *slot[static_cast<std::size_t>(k)];
  }
  return out;
}

struct ToySpec {
  std::size_t languages = 4;
  std::size_t scenes = 200;  // training scenes
  std::size_t image_size = 32;
  std::size_t patch = 8;
  std::uint64_t seed = 17;
  bool balanced = false;  // equal corpus sizes instead of a decaying profile
};

struct Record {
  std::string src_lang, tgt_lang, src_text, tgt_text;
  std::int64_t scene;
};

struct Split {
  std::map<std::string, std::vector<Record>> corpora;  // corpus name -> records
};

struct ToyCorpus {
  ToySpec spec;
  std::vector<Lexicon> lexicons;
  Vocab vocab;
  std::map<std::int64_t, Scene> scenes;
  Split train, dev, test;

  CorpusSet materialize(const Split& split) const {
    std::map<std::int64_t, std::shared_ptr<const PatchGrid>> grids;
    CorpusSet set;
    for (const auto& [name, recs] : split.corpora) {
      Corpus c{name, {}};
      for (const auto& r : recs) {
        auto& g = grids[r.scene];
        if (!g)
          g = std::make_shared<const PatchGrid>(
              patchify(render_scene(scenes.at(r.scene), spec.image_size, spec.patch), spec.patch));
        c.samples.push_back(make_sample(vocab, r.src_lang, r.tgt_lang, r.src_text, r.tgt_text, g, r.scene));
      }
      set.corpora.push_back(std::move(c));
    }
    set.validate();
    return set;
  }
};

/// Deterministic synthetic parallel corpus. Language 0 is the hub: corpora
/// are hub->X and X->hub for every other language X. Training corpus j covers
/// the first ceil(K (N-j)/(N-1)) scenes unless balanced.
inline ToyCorpus generate_toy_corpus(const ToySpec& spec) {
  if (spec.languages < 2) throw std::invalid_argument("toy corpus needs at least 2 languages");
  if (spec.patch == 0 || spec.image_size % spec.patch != 0)
    throw std::invalid_argument("image size must be a multiple of the patch size");
  const std::size_t G = spec.image_size / spec.patch;
  if (G < 2) throw std::invalid_argument("grid needs at least two rows");

  ToyCorpus tc;
  tc.spec = spec;
  std::vector<std::string> langs, words;
  for (std::size_t l = 0; l < spec.languages; ++l) {
    tc.lexicons.push_back(make_lexicon(l, G));
    langs.push_back(tc.lexicons.back().language);
    for (auto& w : tc.lexicons.back().words()) words.push_back(w);
  }
  tc.vocab = Vocab(langs, words);

  CounterRng rng(spec.seed);
  const std::size_t n_dev = std::max<std::size_t>(1, spec.scenes / 10);
  const std::size_t n_test = std::max<std::size_t>(1, spec.scenes / 4);
  const std::size_t total = spec.scenes + n_dev + n_test;
  std::set<std::vector<Object>> seen;
  const std::size_t max_objects = std::min<std::size_t>(3, G);
  while (tc.scenes.size() < total) {
    Scene s;
    s.id = static_cast<std::int64_t>(tc.scenes.size());
    const std::size_t count = 2 + rng.uniform_int(max_objects - 1);
    std::vector<std::size_t> row_pool(G);
    std::iota(row_pool.begin(), row_pool.end(), std::size_t{0});
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t cell = row_pool[i] * G + rng.uniform_int(G);
      s.objects.push_back({cell, rng.uniform_int(kNumColors), rng.uniform_int(kNumShapes)});
    }
    std::sort(s.objects.begin(), s.objects.end());
    if (!seen.insert(s.objects).second) continue;
    tc.scenes.emplace(s.id, std::move(s));
  }

  const auto& hub = tc.lexicons[0];
  auto add_pairs = [&](Split& split, std::int64_t first, std::size_t count, std::size_t j) {
    const auto& other = tc.lexicons[j];
    auto& fwd = split.corpora[hub.language + "-" + other.language];
    auto& bwd = split.corpora[other.language + "-" + hub.language];
    for (std::size_t k = 0; k < count; ++k) {
      const auto& sc = tc.scenes.at(first + static_cast<std::int64_t>(k));
      const std::string h = describe(sc, hub), o = describe(sc, other);
      fwd.push_back({hub.language, other.language, h, o, sc.id});
      bwd.push_back({other.language, hub.language, o, h, sc.id});
    }
  };
  const std::size_t N = spec.languages;
  for (std::size_t j = 1; j < N; ++j) {
    const std::size_t n_train =
        spec.balanced ? spec.scenes
                      : std::max<std::size_t>(1, (spec.scenes * (N - j) + (N - 2)) / (N - 1));
    add_pairs(tc.train, 0, n_train, j);
    add_pairs(tc.dev, static_cast<std::int64_t>(spec.scenes), n_dev, j);
    add_pairs(tc.test, static_cast<std::int64_t>(spec.scenes + n_dev), n_test, j);
  }
  return tc;
}

/// Writes vocab.txt, images/*.ppm and {train,dev,test}/<src>-<tgt>.jsonl under `dir`.
inline void write_toy_corpus(const ToyCorpus& tc, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  tc.vocab.save((fs::path(dir) / "vocab.txt").string());
  for (const auto& [id, scene] : tc.scenes) {
    char name[32];
    std::snprintf(name, sizeof name, "scene_%05lld.ppm", static_cast<long long>(id));
    write_ppm((fs::path(dir) / "images" / name).string(),
              render_scene(scene, tc.spec.image_size, tc.spec.patch));
  }
  for (const auto& [split_name, split] :
       {std::pair<const char*, const Split*>{"train", &tc.train}, {"dev", &tc.dev}, {"test", &tc.test}}) {
    const fs::path sub = fs::path(dir) / split_name;
    fs::create_directories(sub);
    for (const auto& [name, recs] : split->corpora) {
      std::ofstream out(sub / (name + ".jsonl"));
      if (!out) throw std::runtime_error("cannot write corpus " + (sub / name).string());
      for (const auto& r : recs) {
        char img[48];
        std::snprintf(img, sizeof img, "../images/scene_%05lld.ppm", static_cast<long long>(r.scene));
        nlohmann::ordered_json j;
        j["src_lang"] = r.src_lang;
        j["tgt_lang"] = r.tgt_lang;
        j["src_text"] = r.src_text;
        j["tgt_text"] = r.tgt_text;
        j["image"] = img;
        j["scene"] = r.scene;
        out << j.dump() << '\n';
      }
    }
  }
}

}  // namespace m3p::toy
