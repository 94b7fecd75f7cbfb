#include "mantis/porter_stemmer.hpp"

#include <initializer_list>
#include <utility>

namespace mantis {

namespace {

class Stemmer {
 public:
  explicit Stemmer(std::string_view w) : b_(w) {}

  std::string run() {
    if (b_.size() <= 2) return b_;
    step1ab();
    step1c();
    step2();
    step3();
    step4();
    step5();
    return b_;
  }

 private:
  // True if b_[i] is a consonant.
  bool cons(std::size_t i) const {
    switch (b_[i]) {
      case 'a': case 'e': case 'i': case 'o': case 'u': return false;
      case 'y': return i == 0 ? true : !cons(i - 1);
      default: return true;
    }
  }

  // Number of VC sequences in b_[0, len).
  int measure(std::size_t len) const {
    int n = 0;
    std::size_t i = 0;
    while (i < len && cons(i)) ++i;
    while (i < len) {
      while (i < len && !cons(i)) ++i;
      if (i >= len) break;
      while (i < len && cons(i)) ++i;
      ++n;
    }
    return n;
  }

  bool has_vowel(std::size_t len) const {
    for (std::size_t i = 0; i < len; ++i)
      if (!cons(i)) return true;
    return false;
  }

  bool double_cons(std::size_t len) const {
    return len >= 2 && b_[len - 1] == b_[len - 2] && cons(len - 1);
  }

  // consonant-vowel-consonant ending at len-1, last not w, x, y.
  bool cvc(std::size_t len) const {
    if (len < 3 || !cons(len - 1) || cons(len - 2) || !cons(len - 3)) return false;
    const char c = b_[len - 1];
    return c != 'w' && c != 'x' && c != 'y';
  }

  bool ends(std::string_view s) const {
    return b_.size() >= s.size() && std::string_view(b_).substr(b_.size() - s.size()) == s;
  }

  std::size_t stem_len(std::string_view suffix) const { return b_.size() - suffix.size(); }

  void replace_suffix(std::string_view suffix, std::string_view with) {
    b_.resize(stem_len(suffix));
    b_ += with;
  }

  // Replaces suffix when the remaining stem has measure > min_m.
  bool rule(std::string_view suffix, std::string_view with, int min_m) {
    if (!ends(suffix)) return false;
    if (measure(stem_len(suffix)) > min_m) replace_suffix(suffix, with);
    return true;
  }

  void step1ab() {
    if (ends("sses")) {
      replace_suffix("sses", "ss");
    } else if (ends("ies")) {
      replace_suffix("ies", "i");
    } else if (ends("ss")) {
    } else if (ends("s")) {
      replace_suffix("s", "");
    }

    bool extra = false;
    if (ends("eed")) {
      if (measure(stem_len("eed")) > 0) replace_suffix("eed", "ee");
    } else if (ends("ed") && has_vowel(stem_len("ed"))) {
      replace_suffix("ed", "");
      extra = true;
    } else if (ends("ing") && has_vowel(stem_len("ing"))) {
      replace_suffix("ing", "");
      extra = true;
    }
    if (!extra) return;
    if (ends("at")) {
      replace_suffix("at", "ate");
    } else if (ends("bl")) {
      replace_suffix("bl", "ble");
    } else if (ends("iz")) {
      replace_suffix("iz", "ize");
    } else if (double_cons(b_.size())) {
      const char c = b_.back();
      if (c != 'l' && c != 's' && c != 'z') b_.pop_back();
    } else if (measure(b_.size()) == 1 && cvc(b_.size())) {
      b_ += 'e';
    }
  }

  void step1c() {
    if (ends("y") && has_vowel(b_.size() - 1)) b_.back() = 'i';
  }

  void step2() {
    static const std::pair<std::string_view, std::string_view> kRules[] = {
        {"ational", "ate"}, {"tional", "tion"}, {"enci", "ence"}, {"anci", "ance"}, {"izer", "ize"},
        {"abli", "able"},   {"alli", "al"},     {"entli", "ent"}, {"eli", "e"},     {"ousli", "ous"},
        {"ization", "ize"}, {"ation", "ate"},   {"ator", "ate"},  {"alism", "al"},  {"iveness", "ive"},
        {"fulness", "ful"}, {"ousness", "ous"}, {"aliti", "al"},  {"iviti", "ive"}, {"biliti", "ble"},
    };
    for (const auto& [s, r] : kRules)
      if (rule(s, r, 0)) return;
  }

  void step3() {
    static const std::pair<std::string_view, std::string_view> kRules[] = {
        {"icate", "ic"}, {"ative", ""}, {"alize", "al"}, {"iciti", "ic"},
        {"ical", "ic"},  {"ful", ""},   {"ness", ""},
    };
    for (const auto& [s, r] : kRules)
      if (rule(s, r, 0)) return;
  }

  void step4() {
    static const std::string_view kSuffixes[] = {
        "al", "ance", "ence", "er", "ic", "able", "ible", "ant", "ement", "ment",
        "ent", "ion", "ou", "ism", "ate", "iti", "ous", "ive", "ize",
    };
    // Longest matching suffix wins; "ion" additionally needs s or t before it.
    std::string_view best;
    for (auto s : kSuffixes)
      if (ends(s) && s.size() > best.size()) best = s;
    if (best.empty()) return;
    const std::size_t len = stem_len(best);
    if (best == "ion" && (len == 0 || (b_[len - 1] != 's' && b_[len - 1] != 't'))) return;
    if (measure(len) > 1) b_.resize(len);
  }

  void step5() {
    if (ends("e")) {
      const std::size_t len = b_.size() - 1;
      const int m = measure(len);
      if (m > 1 || (m == 1 && !cvc(len))) b_.pop_back();
    }
    if (ends("ll") && measure(b_.size()) > 1) b_.pop_back();
  }

  std::string b_;
};

}  // namespace

std::string porter_stem(std::string_view word) { return Stemmer(word).run(); }

}  // namespace mantis
