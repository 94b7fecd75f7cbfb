#include "mantis/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <stdexcept>

#include "mantis/porter_stemmer.hpp"

namespace mantis {

namespace {

using NGram = std::vector<std::string>;
using NGramCounts = std::map<NGram, double>;

NGramCounts ngram_counts(const Tokens& t, std::size_t n) {
  NGramCounts out;
  if (t.size() < n) return out;
  for (std::size_t i = 0; i + n <= t.size(); ++i) out[NGram(t.begin() + i, t.begin() + i + n)] += 1.0;
  return out;
}

// Item scores are summed in sorted order so the mean does not depend on
// corpus order, not even in the last bit.
double order_free_mean(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

Tokens metric_tokenize(std::string_view text) {
  Tokens out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c) || (c < 128 && std::ispunct(c))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(c < 128 ? std::tolower(c) : c));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

void EvalCorpus::add(std::string_view candidate, const std::vector<std::string>& references) {
  EvalItem item;
  item.candidate = metric_tokenize(candidate);
  for (const auto& r : references) item.references.push_back(metric_tokenize(r));
  items.push_back(std::move(item));
}

void EvalCorpus::validate() const {
  if (items.empty()) throw std::invalid_argument("metrics: empty corpus");
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].references.empty()) {
      throw std::invalid_argument("metrics: item " + std::to_string(i) + " has no reference");
    }
  }
}

double bleu4(const EvalCorpus& corpus, const BleuOptions& opts) {
  corpus.validate();
  double matched[4] = {0, 0, 0, 0};
  double total[4] = {0, 0, 0, 0};
  double cand_len = 0.0;
  double ref_len = 0.0;
  for (const auto& item : corpus.items) {
    const double c = static_cast<double>(item.candidate.size());
    cand_len += c;
    double best = -1.0;
    for (const auto& r : item.references) {
      const double rl = static_cast<double>(r.size());
      if (best < 0.0 || std::abs(rl - c) < std::abs(best - c) || (std::abs(rl - c) == std::abs(best - c) && rl < best))
        best = rl;
    }
    ref_len += best;
    for (std::size_t n = 1; n <= 4; ++n) {
      const NGramCounts cand = ngram_counts(item.candidate, n);
      NGramCounts max_ref;
      for (const auto& r : item.references)
        for (const auto& [g, k] : ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], k);
      for (const auto& [g, k] : cand) {
        total[n - 1] += k;
        const auto it = max_ref.find(g);
        if (it != max_ref.end()) matched[n - 1] += std::min(k, it->second);
      }
    }
  }
  if (cand_len == 0.0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    double num = matched[n];
    double den = total[n];
    if (opts.smoothing && n > 0) {
      num += 1.0;
      den += 1.0;
    }
    if (num == 0.0 || den == 0.0) return 0.0;
    log_sum += std::log(num / den);
  }
  const double bp = cand_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  return bp * std::exp(log_sum / 4.0);
}

double rouge_l_item(const Tokens& c, const Tokens& r, double beta) {
  if (c.empty() || r.empty()) return 0.0;
  std::vector<std::size_t> prev(r.size() + 1, 0), cur(r.size() + 1, 0);
  for (std::size_t i = 1; i <= c.size(); ++i) {
    for (std::size_t j = 1; j <= r.size(); ++j)
      cur[j] = c[i - 1] == r[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  const double lcs = static_cast<double>(prev[r.size()]);
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(c.size());
  const double rec = lcs / static_cast<double>(r.size());
  const double b2 = beta * beta;
  return (1.0 + b2) * p * rec / (rec + b2 * p);
}

double rouge_l(const EvalCorpus& corpus, double beta) {
  corpus.validate();
  std::vector<double> scores;
  for (const auto& item : corpus.items) {
    double best = 0.0;
    for (const auto& r : item.references) best = std::max(best, rouge_l_item(item.candidate, r, beta));
    scores.push_back(best);
  }
  return order_free_mean(std::move(scores));
}

namespace {

struct TfIdf {
  NGramCounts vec[4];
  double norm[4] = {0, 0, 0, 0};
  double length = 0.0;
};

TfIdf tfidf(const Tokens& t, const std::map<NGram, double>& df, double log_n) {
  TfIdf out;
  out.length = static_cast<double>(t.size());
  for (std::size_t n = 1; n <= 4; ++n) {
    for (const auto& [g, tf] : ngram_counts(t, n)) {
      const auto it = df.find(g);
      const double d = it == df.end() ? 0.0 : it->second;
      const double w = tf * (log_n - std::log(std::max(1.0, d)));
      out.vec[n - 1][g] = w;
      out.norm[n - 1] += w * w;
    }
    out.norm[n - 1] = std::sqrt(out.norm[n - 1]);
  }
  return out;
}

double cider_sim(const TfIdf& hyp, const TfIdf& ref, double sigma) {
  const double delta = hyp.length - ref.length;
  const double penalty = std::exp(-(delta * delta) / (2.0 * sigma * sigma));
  double total = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    double val = 0.0;
    for (const auto& [g, w] : hyp.vec[n]) {
      const auto it = ref.vec[n].find(g);
      if (it != ref.vec[n].end()) val += std::min(w, it->second) * it->second;
    }
    if (hyp.norm[n] != 0.0 && ref.norm[n] != 0.0) val /= hyp.norm[n] * ref.norm[n];
    total += val * penalty;
  }
  return total / 4.0;
}

}  // namespace

std::vector<double> cider_d_items(const EvalCorpus& corpus, const CiderOptions& opts) {
  corpus.validate();
  std::map<NGram, double> df;
  for (const auto& item : corpus.items) {
    std::map<NGram, bool> seen;
    for (const auto& r : item.references)
      for (std::size_t n = 1; n <= 4; ++n)
        for (const auto& [g, k] : ngram_counts(r, n)) seen[g] = true;
    for (const auto& [g, b] : seen) df[g] += 1.0;
  }
  if (corpus.items.size() == 1 && opts.warnings) {
    opts.warnings->push_back("cider_d: single-item corpus; every reference n-gram has zero IDF");
  }
  const double log_n = std::log(static_cast<double>(corpus.items.size()));
  std::vector<double> scores;
  for (const auto& item : corpus.items) {
    const TfIdf hyp = tfidf(item.candidate, df, log_n);
    double sum = 0.0;
    for (const auto& r : item.references) sum += cider_sim(hyp, tfidf(r, df, log_n), opts.sigma);
    scores.push_back(10.0 * sum / static_cast<double>(item.references.size()));
  }
  return scores;
}

double cider_d(const EvalCorpus& corpus, const CiderOptions& opts) {
  return order_free_mean(cider_d_items(corpus, opts));
}

namespace {

using Pair = std::pair<std::size_t, std::size_t>;  // (candidate index, reference index)

std::size_t count_chunks(std::vector<Pair> pairs) {
  if (pairs.empty()) return 0;
  std::sort(pairs.begin(), pairs.end());
  std::size_t chunks = 1;
  for (std::size_t i = 1; i < pairs.size(); ++i)
    if (pairs[i].first != pairs[i - 1].first + 1 || pairs[i].second != pairs[i - 1].second + 1) ++chunks;
  return chunks;
}

// Exhaustive search for the assignment that maximizes matches, then
// minimizes chunks, with a node budget after which the best assignment
// found so far is kept.
class StageSearch {
 public:
  StageSearch(const std::vector<std::vector<std::size_t>>& options, std::vector<Pair> fixed,
              std::size_t ref_size)
      : options_(options), fixed_(std::move(fixed)), used_(ref_size, false) {
    for (const auto& [c, r] : fixed_) used_[r] = true;
  }

  std::vector<Pair> run() {
    best_ = fixed_;
    best_matches_ = 0;
    best_chunks_ = count_chunks(fixed_);
    cur_ = fixed_;
    dfs(0, 0);
    return best_;
  }

 private:
  void dfs(std::size_t i, std::size_t matches) {
    if (++nodes_ > kBudget) return;
    std::size_t upper = matches;
    for (std::size_t k = i; k < options_.size(); ++k)
      if (!options_[k].empty()) ++upper;
    if (upper < best_matches_) return;
    if (i == options_.size()) {
      const std::size_t chunks = count_chunks(cur_);
      if (matches > best_matches_ || (matches == best_matches_ && chunks < best_chunks_)) {
        best_ = cur_;
        best_matches_ = matches;
        best_chunks_ = chunks;
      }
      return;
    }
    for (std::size_t r : options_[i]) {
      if (used_[r]) continue;
      used_[r] = true;
      cur_.emplace_back(i, r);
      dfs(i + 1, matches + 1);
      cur_.pop_back();
      used_[r] = false;
    }
    dfs(i + 1, matches);
  }

  static constexpr std::size_t kBudget = 200000;
  const std::vector<std::vector<std::size_t>>& options_;
  std::vector<Pair> fixed_;
  std::vector<bool> used_;
  std::vector<Pair> cur_, best_;
  std::size_t best_matches_ = 0, best_chunks_ = 0;
  std::size_t nodes_ = 0;
};

}  // namespace

MeteorAlignment meteor_align(const Tokens& c, const Tokens& r) {
  std::vector<std::vector<std::size_t>> exact(c.size());
  for (std::size_t i = 0; i < c.size(); ++i)
    for (std::size_t j = 0; j < r.size(); ++j)
      if (c[i] == r[j]) exact[i].push_back(j);
  std::vector<Pair> pairs = StageSearch(exact, {}, r.size()).run();

  std::vector<bool> c_used(c.size(), false), r_used(r.size(), false);
  for (const auto& [i, j] : pairs) {
    c_used[i] = true;
    r_used[j] = true;
  }
  std::vector<std::string> c_stem(c.size()), r_stem(r.size());
  for (std::size_t i = 0; i < c.size(); ++i) c_stem[i] = porter_stem(c[i]);
  for (std::size_t j = 0; j < r.size(); ++j) r_stem[j] = porter_stem(r[j]);
  std::vector<std::vector<std::size_t>> stem(c.size());
  bool any = false;
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (c_used[i]) continue;
    for (std::size_t j = 0; j < r.size(); ++j) {
      if (!r_used[j] && c_stem[i] == r_stem[j]) {
        stem[i].push_back(j);
        any = true;
      }
    }
  }
  if (any) pairs = StageSearch(stem, pairs, r.size()).run();
  return {pairs.size(), count_chunks(pairs)};
}

double meteor_lite_item(const Tokens& c, const Tokens& r) {
  if (c.empty() || r.empty()) return 0.0;
  const MeteorAlignment a = meteor_align(c, r);
  if (a.matches == 0) return 0.0;
  const double m = static_cast<double>(a.matches);
  const double p = m / static_cast<double>(c.size());
  const double rec = m / static_cast<double>(r.size());
  constexpr double kAlpha = 0.9;
  const double fmean = p * rec / (kAlpha * p + (1.0 - kAlpha) * rec);
  const double frag = static_cast<double>(a.chunks) / m;
  const double penalty = 0.5 * frag * frag * frag;
  return fmean * (1.0 - penalty);
}

double meteor_lite(const EvalCorpus& corpus) {
  corpus.validate();
  std::vector<double> scores;
  for (const auto& item : corpus.items) {
    double best = 0.0;
    for (const auto& r : item.references) best = std::max(best, meteor_lite_item(item.candidate, r));
    scores.push_back(best);
  }
  return order_free_mean(std::move(scores));
}

ScoreReport score_all(const EvalCorpus& corpus) {
  ScoreReport rep;
  rep.items = corpus.items.size();
  rep.bleu4 = bleu4(corpus);
  rep.cider_d = cider_d(corpus, CiderOptions{6.0, &rep.warnings});
  rep.meteor_lite = meteor_lite(corpus);
  rep.rouge_l = rouge_l(corpus);
  return rep;
}

}  // namespace mantis
