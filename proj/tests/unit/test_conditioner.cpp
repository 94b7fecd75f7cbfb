#include "doctest.h"

#include <algorithm>
#include <vector>

#include "mantis/conditioner.hpp"

using namespace mantis;

namespace {

const SpecialTokens kSp{300, 301, 302, 303};

ModelConfig config(CondMode mode = CondMode::kMantisPrefix) {
  ModelConfig c;
  c.vocab_size = 304;
  c.cond_mode = mode;
  return c;
}

Image blank() { return Image{24, 24, 1, std::vector<float>(24 * 24, 0.0f)}; }

ConditioningBundle bundle(std::size_t images, std::vector<int> name, std::vector<int> target) {
  ConditioningBundle b;
  for (std::size_t i = 0; i < images; ++i) b.images.push_back(blank());
  b.name_ids = std::move(name);
  b.target_ids = std::move(target);
  return b;
}

}  // namespace

TEST_CASE("prefix: two images, three name tokens, two targets") {
  const auto sb = build_prefix(bundle(2, {11, 12, 13}, {21, 22}), kSp, config());
  CHECK(sb.token_ids == std::vector<int>{300, -1, -1, 301, 11, 12, 13, 301, 21, 22, 302});
  CHECK(sb.image_rows == std::vector<int>{-1, 0, 1, -1, -1, -1, -1, -1, -1, -1, -1});
  CHECK(sb.position_ids == std::vector<int>{0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2});
  CHECK(sb.segments == std::vector<Segment>{Segment::kBos, Segment::kImg, Segment::kImg, Segment::kSep,
                                            Segment::kName, Segment::kName, Segment::kName, Segment::kSep,
                                            Segment::kTgt, Segment::kTgt, Segment::kEos});
  CHECK(sb.loss_mask == std::vector<std::uint8_t>{0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1});
  // Row i predicts position i + 1: only the rows ending at SEP, t1, t2 count.
  CHECK(sb.next_token_mask() == std::vector<std::uint8_t>{0, 0, 0, 0, 0, 0, 0, 1, 1, 1});
  CHECK(sb.next_token_targets() == std::vector<int>{-1, -1, 301, 11, 12, 13, 301, 21, 22, 302});
}

TEST_CASE("prefix: causal mask") {
  const auto sb = build_prefix(bundle(1, {5}, {6}), kSp, config());
  const std::size_t t = sb.length();
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < t; ++j) CHECK(sb.attends(i, j) == (j <= i));
}

TEST_CASE("prefix: a missing modality drops its segment") {
  SUBCASE("names only: BOS opens the name segment") {
    const auto sb = build_prefix(bundle(0, {11, 12}, {21}), kSp, config());
    CHECK(sb.token_ids == std::vector<int>{300, 11, 12, 301, 21, 302});
    CHECK(sb.position_ids == std::vector<int>{0, 1, 2, 3, 0, 1});
  }
  SUBCASE("images only") {
    const auto sb = build_prefix(bundle(3, {}, {21}), kSp, config());
    CHECK(sb.token_ids == std::vector<int>{300, -1, -1, -1, 301, 21, 302});
    CHECK(sb.position_ids == std::vector<int>{0, 1, 2, 3, 4, 0, 1});
  }
  SUBCASE("no conditioning: BOS opens the target segment") {
    const auto sb = build_prefix(bundle(0, {}, {21, 22}), kSp, config());
    CHECK(sb.token_ids == std::vector<int>{300, 21, 22, 302});
    CHECK(sb.position_ids == std::vector<int>{0, 1, 2, 3});
    CHECK(sb.loss_mask == std::vector<std::uint8_t>{0, 1, 1, 1});
  }
}

TEST_CASE("prefix: max_images keeps the first images") {
  auto cfg = config();
  cfg.max_images = 2;
  const auto sb = build_prefix(bundle(5, {7}, {8}), kSp, cfg);
  CHECK(sb.image_rows == std::vector<int>{-1, 0, 1, -1, -1, -1, -1, -1});
}

TEST_CASE("prefix: loss on name and generation prompts") {
  BuildOptions o;
  o.loss_on_name = true;
  auto sb = build_prefix(bundle(1, {11, 12}, {21}), kSp, config(), o);
  CHECK(sb.loss_mask == std::vector<std::uint8_t>{0, 0, 0, 1, 1, 0, 1, 1});
  BuildOptions prompt;
  prompt.append_eos = false;
  sb = build_prefix(bundle(1, {11}, {}), kSp, config(), prompt);
  CHECK(sb.token_ids == std::vector<int>{300, -1, 301, 11, 301});
}

TEST_CASE("prefix: overflow and invalid ids are errors, never truncation") {
  auto cfg = config();
  cfg.max_seq_len = 8;
  CHECK_THROWS_AS(build_prefix(bundle(2, {1, 2, 3}, {4, 5}), kSp, cfg), SequenceOverflowError);
  cfg = config();
  cfg.max_pos = 4;
  CHECK_THROWS_AS(build_prefix(bundle(1, {1}, {1, 2, 3, 4}), kSp, cfg), SequenceOverflowError);
  CHECK_THROWS_AS(build_prefix(bundle(1, {kSp.sep}, {1}), kSp, config()), std::invalid_argument);
  CHECK_THROWS_AS(build_prefix(bundle(1, {1}, {-4}), kSp, config()), std::invalid_argument);
}

TEST_CASE("conditioning layout for the baselines") {
  const auto b = bundle(2, {11, 12, 13}, {21, 22});
  const auto cl = build_conditioning_layout(b, kSp, config(CondMode::kPseudoSelf));
  CHECK(cl.token_ids == std::vector<int>{-1, -1, 301, 11, 12, 13});
  CHECK(cl.image_rows == std::vector<int>{0, 1, -1, -1, -1, -1});
  CHECK(cl.position_ids == std::vector<int>{0, 1, 2, 0, 1, 2});
  CHECK(cl.key_mask == std::vector<std::uint8_t>(6, 1));
  const auto in = prepare_input(b, kSp, config(CondMode::kPseudoSelf));
  REQUIRE(in.cond.has_value());
  CHECK(in.text.token_ids == std::vector<int>{300, 21, 22, 302});
  CHECK(in.text.position_ids == std::vector<int>{0, 1, 2, 3});
  CHECK(in.images_used == 2);

  const auto names_only = build_conditioning_layout(bundle(0, {11}, {1}), kSp, config(CondMode::kContextAttn));
  CHECK(names_only.token_ids == std::vector<int>{11});

  const auto uncond = prepare_input(b, kSp, config(CondMode::kUnconditional));
  CHECK_FALSE(uncond.cond.has_value());
  CHECK(uncond.text.token_ids == std::vector<int>{300, 21, 22, 302});
}

TEST_CASE("modality dropout on the prefix") {
  const auto sb = build_prefix(bundle(2, {11, 12, 13}, {21, 22}), kSp, config());
  SUBCASE("p = 1 hides name columns and their separator") {
    Rng rng(1);
    const auto d = apply_modality_dropout(sb, 1.0, rng);
    CHECK(d.text_dropped);
    CHECK(d.token_ids == sb.token_ids);
    CHECK(d.position_ids == sb.position_ids);
    CHECK(d.loss_mask == sb.loss_mask);
    for (std::size_t i = 0; i < d.length(); ++i) {
      for (std::size_t j = 0; j < d.length(); ++j) {
        const bool hidden = j >= 4 && j <= 7;
        CHECK(d.attends(i, j) == (sb.attends(i, j) && !hidden));
      }
    }
  }
  SUBCASE("p = 0 leaves the batch untouched") {
    Rng rng(1);
    const auto d = apply_modality_dropout(sb, 0.0, rng);
    CHECK_FALSE(d.text_dropped);
    CHECK(d.attention_mask == sb.attention_mask);
  }
  SUBCASE("text survives when there is no image") {
    const auto names_only = build_prefix(bundle(0, {11}, {21}), kSp, config());
    Rng rng(1);
    const auto d = apply_modality_dropout(names_only, 1.0, rng);
    CHECK_FALSE(d.text_dropped);
    CHECK(d.attention_mask == names_only.attention_mask);
  }
  SUBCASE("exactly one draw per call") {
    Rng a(9), b(9);
    (void)apply_modality_dropout(sb, 0.5, a);
    (void)b.uniform();
    CHECK(a.next_u64() == b.next_u64());
  }
}

TEST_CASE("modality dropout on the conditioning layout") {
  const auto in = prepare_input(bundle(1, {11, 12}, {21}), kSp, config(CondMode::kPseudoSelf));
  Rng rng(3);
  const auto d = apply_modality_dropout(in, 1.0, rng);
  REQUIRE(d.cond.has_value());
  CHECK(d.cond->key_mask == std::vector<std::uint8_t>{1, 0, 0, 0});
  CHECK(d.text.attention_mask == in.text.attention_mask);
}

TEST_CASE("layout invariants over random bundles") {
  Rng rng(21);
  auto cfg = config();
  cfg.max_images = 5;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = rng.below(6);
    std::size_t n = rng.below(5);
    if (m == 0 && n == 0) n = 1;
    std::vector<int> name(n), target(1 + rng.below(6));
    for (auto& x : name) x = static_cast<int>(rng.below(300));
    for (auto& x : target) x = static_cast<int>(rng.below(300));
    BuildOptions o;
    o.loss_on_name = rng.below(2) == 1;
    const auto sb = build_prefix(bundle(m, name, target), kSp, cfg, o);
    const std::size_t t = sb.length();
    CAPTURE(trial);
    for (std::size_t i = 1; i < t; ++i) {
      const Segment prev = sb.segments[i - 1], cur = sb.segments[i];
      // Each SEP is one past its predecessor; a new segment after a SEP restarts at 0.
      if (cur == Segment::kSep) CHECK(sb.position_ids[i] == sb.position_ids[i - 1] + 1);
      if (prev == Segment::kSep) CHECK(sb.position_ids[i] == 0);
      if (sb.loss_mask[i]) {
        const bool allowed = cur == Segment::kTgt || cur == Segment::kEos ||
                             (o.loss_on_name && (cur == Segment::kName || cur == Segment::kSep));
        CHECK(allowed);
      }
    }
    for (std::size_t i = 0; i < t; ++i) {
      const bool target_row = sb.segments[i] == Segment::kTgt || sb.segments[i] == Segment::kEos;
      for (std::size_t j = 0; j < t; ++j) {
        const bool target_col = sb.segments[j] == Segment::kTgt || sb.segments[j] == Segment::kEos;
        if (target_row && !target_col) CHECK(sb.attends(i, j));
        if (!target_row && target_col) CHECK_FALSE(sb.attends(i, j));
      }
    }
    for (std::size_t i = 0; i < t; ++i) {
      if (sb.segments[i] == Segment::kImg || sb.segments[i] == Segment::kBos || sb.segments[i] == Segment::kPad)
        CHECK(sb.loss_mask[i] == 0);
    }
    if (m > 0 && n > 0) {
      const auto cl = build_conditioning_layout(bundle(m, name, target), kSp, config(CondMode::kPseudoSelf));
      CHECK(cl.length() == std::min<std::size_t>(m, 5) + 1 + n);
    }
  }
}

TEST_CASE("image-only prefix has a single separator") {
  const auto sb = build_prefix(bundle(1, {}, {11, 12}), kSp, config());
  CHECK(sb.token_ids == std::vector<int>{300, -1, 301, 11, 12, 302});
  CHECK(sb.position_ids == std::vector<int>{0, 1, 2, 0, 1, 2});
}

TEST_CASE("modality dropout at p = 0.5 reproduces across runs") {
  const auto sb = build_prefix(bundle(2, {11, 12}, {21}), kSp, config());
  std::vector<bool> first, second;
  Rng a(77), b(77);
  for (int i = 0; i < 64; ++i) first.push_back(apply_modality_dropout(sb, 0.5, a).text_dropped);
  for (int i = 0; i < 64; ++i) second.push_back(apply_modality_dropout(sb, 0.5, b).text_dropped);
  CHECK(first == second);
  const auto dropped = std::count(first.begin(), first.end(), true);
  CHECK(dropped > 10);
  CHECK(dropped < 54);
}
