#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace mantis {

/// Byte-level BPE vocabulary.
///
/// Ids 0..255 are the raw bytes, merged symbols follow in merge-rank order,
/// and the four special tokens (BOS, SEP, EOS, PAD) are appended last. Text
/// is pre-split into chunks where a single leading space marks a word start;
/// merges never cross chunk boundaries.
class Vocab {
 public:
  static constexpr std::size_t kByteAlphabet = 256;
  static constexpr std::size_t kNumSpecials = 4;

  /// Empty vocabulary (no merges, specials at 256..259).
  Vocab() : Vocab(from_merges({})) {}

  /// Greedy BPE training: each round merges the most frequent adjacent
  /// pair; equal counts go to the lexicographically smallest pair.
  static Vocab train(std::span<const std::string> corpus, std::size_t target_vocab,
                     std::uint64_t seed = 0);

  std::vector<int> encode(std::string_view text) const;
  /// Special ids are dropped from the output text.
  std::string decode(std::span<const int> ids) const;

  std::size_t size() const { return tokens_.size(); }
  std::size_t num_merges() const { return merges_.size(); }
  const std::vector<std::pair<int, int>>& merges() const { return merges_; }
  /// Byte string of a token; specials render as "<bos>", "<sep>", ...
  const std::string& token(int id) const;

  int bos_id() const { return bos_; }
  int sep_id() const { return sep_; }
  int eos_id() const { return eos_; }
  int pad_id() const { return pad_; }
  bool is_special(int id) const { return id == bos_ || id == sep_ || id == eos_ || id == pad_; }

  /// Text form: header, one merge per line in rank order, special table.
  std::string serialize() const;
  static Vocab deserialize(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

  /// FNV-1a 64 over serialize(); identifies a vocabulary in checkpoints.
  std::uint64_t hash() const;

  friend bool operator==(const Vocab& a, const Vocab& b) {
    return a.merges_ == b.merges_ && a.tokens_ == b.tokens_;
  }

 private:
  struct Raw {};
  explicit Vocab(Raw) {}
  static Vocab from_merges(std::vector<std::pair<int, int>> merges);
  std::vector<int> encode_chunk(std::string_view chunk) const;

  std::vector<std::pair<int, int>> merges_;
  std::vector<std::string> tokens_;
  // (left, right) packed -> merge rank
  std::unordered_map<std::uint64_t, int> rank_index_;
  int bos_ = -1, sep_ = -1, eos_ = -1, pad_ = -1;

  int merge_rank(int left, int right) const;
};

/// Splits text into BPE chunks: an optional single leading space followed by
/// a run of word bytes or a run of punctuation bytes. Concatenating the
/// chunks reproduces the input.
std::vector<std::string_view> split_chunks(std::string_view text);

}  // namespace mantis
