#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace m3p {

inline std::vector<std::string> split_words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

/// Sufficient statistics for corpus BLEU-4.
struct BleuStats {
  std::array<std::size_t, 4> matches{};
  std::array<std::size_t, 4> totals{};
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;

  BleuStats& operator+=(const BleuStats& o) {
    for (std::size_t n = 0; n < 4; ++n) {
      matches[n] += o.matches[n];
      totals[n] += o.totals[n];
    }
    hyp_len += o.hyp_len;
    ref_len += o.ref_len;
    return *this;
  }
};

/// Clipped n-gram matches of one hypothesis against one reference.
inline BleuStats sentence_stats(const std::vector<std::string>& hyp, const std::vector<std::string>& ref) {
  BleuStats s;
  s.hyp_len = hyp.size();
  s.ref_len = ref.size();
  for (std::size_t n = 1; n <= 4; ++n) {
    std::map<std::vector<std::string>, std::size_t> ref_counts;
    for (std::size_t i = 0; i + n <= ref.size(); ++i) ++ref_counts[{ref.begin() + i, ref.begin() + i + n}];
    std::map<std::vector<std::string>, std::size_t> hyp_counts;
    for (std::size_t i = 0; i + n <= hyp.size(); ++i) ++hyp_counts[{hyp.begin() + i, hyp.begin() + i + n}];
    for (const auto& [gram, c] : hyp_counts) {
      auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) s.matches[n - 1] += std::min(c, it->second);
    }
    s.totals[n - 1] = hyp.size() >= n ? hyp.size() - n + 1 : 0;
  }
  return s;
}

inline BleuStats sentence_stats(const std::string& hyp, const std::string& ref) {
  return sentence_stats(split_words(hyp), split_words(ref));
}

/// BLEU-4 in [0, 100]: brevity penalty times the geometric mean of the
/// n-gram precisions. Precisions for n > 1 use add-one smoothing; a unigram
/// precision with no matches is floored at 0.1 / count.
inline double bleu_score(const BleuStats& s) {
  if (s.hyp_len == 0 || s.totals[0] == 0) return 0.0;
  double log_p = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    double p;
    if (n == 0)
      p = s.matches[0] > 0 ? static_cast<double>(s.matches[0]) / s.totals[0] : 0.1 / s.totals[0];
    else
      p = (s.matches[n] + 1.0) / (s.totals[n] + 1.0);
    log_p += std::log(p) / 4.0;
  }
  const double c = static_cast<double>(s.hyp_len), r = static_cast<double>(s.ref_len);
  const double bp = c >= r ? 1.0 : std::exp(1.0 - r / c);
  return 100.0 * bp * std::exp(log_p);
}

inline double corpus_bleu(const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
  if (hyps.size() != refs.size()) throw std::invalid_argument("corpus_bleu: hypothesis/reference count mismatch");
  BleuStats total;
  for (std::size_t i = 0; i < hyps.size(); ++i) total += sentence_stats(hyps[i], refs[i]);
  return bleu_score(total);
}

}  // namespace m3p
