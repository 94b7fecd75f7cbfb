#pragma once

// Caption-style evaluation scores over a shared tokenization: lowercase,
// split on whitespace and ASCII punctuation, punctuation dropped.

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace mantis {

using Tokens = std::vector<std::string>;

inline constexpr std::string_view kMetricTokenization = "lower+punct-split/v1";

Tokens metric_tokenize(std::string_view text);

struct EvalItem {
  Tokens candidate;
  std::vector<Tokens> references;
};

struct EvalCorpus {
  std::vector<EvalItem> items;
  std::string tokenization = std::string(kMetricTokenization);

  void add(std::string_view candidate, const std::vector<std::string>& references);
  /// Throws std::invalid_argument on an empty corpus or an item without
  /// references.
  void validate() const;
};

struct BleuOptions {
  /// Add-one smoothing of the n >= 2 precisions. Off for reported numbers.
  bool smoothing = false;
};

/// Corpus BLEU-4: clipped n-gram precisions pooled over the corpus, uniform
/// geometric mean, brevity penalty against the closest reference length
/// (shorter on ties). Any zero precision gives 0 unless smoothing is on.
double bleu4(const EvalCorpus& corpus, const BleuOptions& opts = {});

/// LCS F-measure with recall weighted by beta, best reference per item,
/// averaged over items.
double rouge_l(const EvalCorpus& corpus, double beta = 1.2);
double rouge_l_item(const Tokens& candidate, const Tokens& reference, double beta = 1.2);

struct CiderOptions {
  double sigma = 6.0;
  /// Receives a message when the corpus makes IDF degenerate.
  std::vector<std::string>* warnings = nullptr;
};

/// CIDEr-D: per order n = 1..4, TF-IDF vectors (document frequency counted
/// over the items' reference sets), candidate weights clipped to the
/// reference's, cosine-normalized, times a Gaussian penalty on the token
/// length difference; orders averaged, references averaged, times 10, items
/// averaged.
double cider_d(const EvalCorpus& corpus, const CiderOptions& opts = {});
/// Per-item CIDEr-D scores in corpus order.
std::vector<double> cider_d_items(const EvalCorpus& corpus, const CiderOptions& opts = {});

struct MeteorAlignment {
  std::size_t matches = 0;
  std::size_t chunks = 0;
};

/// Two-stage unigram alignment: exact matches first, then Porter-stem
/// matches among the still unaligned words. Each stage maximizes its match
/// count, then minimizes the chunk count of the whole alignment.
MeteorAlignment meteor_align(const Tokens& candidate, const Tokens& reference);
double meteor_lite_item(const Tokens& candidate, const Tokens& reference);
/// Fmean = P*R / (alpha*P + (1-alpha)*R), alpha = 0.9; penalty =
/// 0.5*(chunks/matches)^3; best reference per item, averaged. No synonym or
/// paraphrase stages.
double meteor_lite(const EvalCorpus& corpus);

struct ScoreReport {
  double bleu4 = 0.0;
  double cider_d = 0.0;
  double meteor_lite = 0.0;
  double rouge_l = 0.0;
  std::size_t items = 0;
  std::vector<std::string> warnings;
};

ScoreReport score_all(const EvalCorpus& corpus);

}  // namespace mantis
