#include "mantis/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "mantis/tensor.hpp"

namespace mantis {

namespace {

enum class ByteClass { kSpace, kWord, kOther };

ByteClass classify(unsigned char c) {
  if (c == ' ') return ByteClass::kSpace;
  if (c >= 128 || std::isalnum(c)) return ByteClass::kWord;
  return ByteClass::kOther;
}

std::uint64_t pack(int left, int right) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(left)) << 32) |
         static_cast<std::uint32_t>(right);
}

constexpr std::string_view kHeader = "mantis-bpe 1";

}  // namespace

std::vector<std::string_view> split_chunks(std::string_view text) {
  std::vector<std::string_view> chunks;
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    std::size_t j = i;
    if (text[j] == ' ' && j + 1 < n && text[j + 1] != ' ') ++j;
    const ByteClass cls = classify(static_cast<unsigned char>(text[j]));
    ++j;
    if (cls != ByteClass::kSpace) {
      while (j < n && classify(static_cast<unsigned char>(text[j])) == cls) ++j;
    }
    chunks.push_back(text.substr(i, j - i));
    i = j;
  }
  return chunks;
}

Vocab Vocab::from_merges(std::vector<std::pair<int, int>> merges) {
  Vocab v{Raw{}};
  v.tokens_.reserve(kByteAlphabet + merges.size() + kNumSpecials);
  for (std::size_t b = 0; b < kByteAlphabet; ++b) v.tokens_.emplace_back(1, static_cast<char>(b));
  for (std::size_t r = 0; r < merges.size(); ++r) {
    const auto [l, rt] = merges[r];
    const int next = static_cast<int>(v.tokens_.size());
    if (l < 0 || rt < 0 || l >= next || rt >= next) {
      throw std::invalid_argument("vocab: merge " + std::to_string(r) + " references unknown id");
    }
    v.tokens_.push_back(v.tokens_[static_cast<std::size_t>(l)] +
                        v.tokens_[static_cast<std::size_t>(rt)]);
    v.rank_index_.emplace(pack(l, rt), static_cast<int>(r));
  }
  v.merges_ = std::move(merges);
  const int base = static_cast<int>(v.tokens_.size());
  v.bos_ = base;
  v.sep_ = base + 1;
  v.eos_ = base + 2;
  v.pad_ = base + 3;
  for (const char* name : {"<bos>", "<sep>", "<eos>", "<pad>"}) v.tokens_.emplace_back(name);
  return v;
}

Vocab Vocab::train(std::span<const std::string> corpus, std::size_t target_vocab, std::uint64_t) {
  if (corpus.empty()) throw std::invalid_argument("train_bpe: empty corpus");
  if (target_vocab < kByteAlphabet + kNumSpecials) {
    throw std::invalid_argument("train_bpe: target vocab " + std::to_string(target_vocab) +
                                " below byte alphabet + specials (" +
                                std::to_string(kByteAlphabet + kNumSpecials) + ")");
  }
  // Distinct chunks with frequencies; std::map keeps iteration order fixed.
  std::map<std::string, std::size_t> chunk_freq;
  for (const auto& line : corpus)
    for (auto c : split_chunks(line)) ++chunk_freq[std::string(c)];

  std::vector<std::vector<int>> words;
  std::vector<std::size_t> freq;
  for (const auto& [chunk, count] : chunk_freq) {
    std::vector<int> syms;
    for (unsigned char c : chunk) syms.push_back(c);
    words.push_back(std::move(syms));
    freq.push_back(count);
  }

  std::vector<std::string> token_str;
  for (std::size_t b = 0; b < kByteAlphabet; ++b) token_str.emplace_back(1, static_cast<char>(b));

  std::vector<std::pair<int, int>> merges;
  const std::size_t max_merges = target_vocab - kByteAlphabet - kNumSpecials;
  while (merges.size() < max_merges) {
    std::map<std::pair<int, int>, std::size_t> counts;
    for (std::size_t w = 0; w < words.size(); ++w) {
      const auto& syms = words[w];
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) counts[{syms[i], syms[i + 1]}] += freq[w];
    }
    if (counts.empty()) break;
    auto best = counts.begin();
    for (auto it = counts.begin(); it != counts.end(); ++it) {
      if (it->second > best->second) {
        best = it;
      } else if (it->second == best->second) {
        const auto& a = token_str[static_cast<std::size_t>(it->first.first)];
        const auto& b = token_str[static_cast<std::size_t>(best->first.first)];
        if (a < b || (a == b && token_str[static_cast<std::size_t>(it->first.second)] <
                                    token_str[static_cast<std::size_t>(best->first.second)])) {
          best = it;
        }
      }
    }
    const auto [left, right] = best->first;
    const int merged = static_cast<int>(token_str.size());
    token_str.push_back(token_str[static_cast<std::size_t>(left)] +
                        token_str[static_cast<std::size_t>(right)]);
    merges.emplace_back(left, right);
    for (auto& syms : words) {
      std::vector<int> next;
      next.reserve(syms.size());
      for (std::size_t i = 0; i < syms.size(); ++i) {
        if (i + 1 < syms.size() && syms[i] == left && syms[i + 1] == right) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(syms[i]);
        }
      }
      syms = std::move(next);
    }
  }
  return from_merges(std::move(merges));
}

int Vocab::merge_rank(int left, int right) const {
  auto it = rank_index_.find(pack(left, right));
  return it == rank_index_.end() ? -1 : it->second;
}

std::vector<int> Vocab::encode_chunk(std::string_view chunk) const {
  std::vector<int> syms;
  syms.reserve(chunk.size());
  for (unsigned char c : chunk) syms.push_back(c);
  while (syms.size() > 1) {
    int best_rank = -1;
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
      const int r = merge_rank(syms[i], syms[i + 1]);
      if (r >= 0 && (best_rank < 0 || r < best_rank)) best_rank = r;
    }
    if (best_rank < 0) break;
    const auto [left, right] = merges_[static_cast<std::size_t>(best_rank)];
    const int merged = static_cast<int>(kByteAlphabet) + best_rank;
    std::vector<int> next;
    next.reserve(syms.size());
    for (std::size_t i = 0; i < syms.size(); ++i) {
      if (i + 1 < syms.size() && syms[i] == left && syms[i + 1] == right) {
        next.push_back(merged);
        ++i;
      } else {
        next.push_back(syms[i]);
      }
    }
    syms = std::move(next);
  }
  return syms;
}

std::vector<int> Vocab::encode(std::string_view text) const {
  std::vector<int> ids;
  for (auto chunk : split_chunks(text)) {
    auto part = encode_chunk(chunk);
    ids.insert(ids.end(), part.begin(), part.end());
  }
  return ids;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw IndexError("vocab: token id " + std::to_string(id) + " outside [0, " +
                     std::to_string(tokens_.size()) + ")");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::string Vocab::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    const auto& tok = token(id);
    if (!is_special(id)) out += tok;
  }
  return out;
}

std::string Vocab::serialize() const {
  std::ostringstream os;
  os << kHeader << '\n';
  os << "bytes " << kByteAlphabet << '\n';
  os << "merges " << merges_.size() << '\n';
  for (const auto& [l, r] : merges_) os << l << ' ' << r << '\n';
  os << "special bos " << bos_ << '\n';
  os << "special sep " << sep_ << '\n';
  os << "special eos " << eos_ << '\n';
  os << "special pad " << pad_ << '\n';
  return os.str();
}

Vocab Vocab::deserialize(std::string_view text) {
  std::istringstream is{std::string(text)};
  std::string line;
  auto fail = [](const std::string& why) { return std::runtime_error("vocab file: " + why); };
  if (!std::getline(is, line) || line != kHeader) throw fail("missing header '" + std::string(kHeader) + "'");
  std::string key;
  std::size_t value = 0;
  if (!std::getline(is, line)) throw fail("truncated before byte count");
  {
    std::istringstream ls(line);
    if (!(ls >> key >> value) || key != "bytes" || value != kByteAlphabet)
      throw fail("unsupported byte alphabet line '" + line + "'");
  }
  if (!std::getline(is, line)) throw fail("truncated before merge count");
  std::size_t count = 0;
  {
    std::istringstream ls(line);
    if (!(ls >> key >> count) || key != "merges") throw fail("bad merge count line '" + line + "'");
  }
  std::vector<std::pair<int, int>> merges;
  merges.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(is, line)) throw fail("truncated in merge table at rank " + std::to_string(i));
    std::istringstream ls(line);
    int l = 0, r = 0;
    if (!(ls >> l >> r)) throw fail("bad merge line '" + line + "'");
    merges.emplace_back(l, r);
  }
  Vocab v = from_merges(std::move(merges));
  const std::pair<const char*, int> expected[] = {
      {"bos", v.bos_}, {"sep", v.sep_}, {"eos", v.eos_}, {"pad", v.pad_}};
  for (const auto& [name, id] : expected) {
    if (!std::getline(is, line)) throw fail(std::string("missing special ") + name);
    std::istringstream ls(line);
    std::string tag, which;
    int got = -1;
    if (!(ls >> tag >> which >> got) || tag != "special" || which != name || got != id) {
      throw fail("special table mismatch at '" + line + "'");
    }
  }
  return v;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write vocab file " + path.string());
  out << serialize();
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read vocab file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

std::uint64_t Vocab::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : serialize()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace mantis
