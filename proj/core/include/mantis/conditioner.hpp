#pragma once

// Sequence construction for the conditioning mechanisms.
//
// Prefix layout (both modalities present):
//
//   [BOS, IMG x m, SEP, NAME x n, SEP, TGT ..., EOS]
//    0    1..m     m+1  0..n-1   n    0 ...
//
// Each conditioning segment restarts positions at zero; BOS takes position
// 0 of the first segment and the separator closing a segment sits one past
// the segment's last position. The target segment restarts at zero too.
// Labels and the loss mask are aligned to token positions: the logits row
// at position i predicts labels[i + 1].

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "mantis/model_config.hpp"
#include "mantis/parameters.hpp"
#include "mantis/rng.hpp"
#include "mantis/tokenizer.hpp"
#include "mantis/vision.hpp"

namespace mantis {

class SequenceOverflowError : public std::length_error {
 public:
  using std::length_error::length_error;
};

enum class Segment : std::uint8_t { kBos, kImg, kSep, kName, kTgt, kEos, kPad };

const char* to_string(Segment s);

struct SpecialTokens {
  int bos = 0;
  int sep = 0;
  int eos = 0;
  int pad = 0;

  static SpecialTokens of(const Vocab& v) { return {v.bos_id(), v.sep_id(), v.eos_id(), v.pad_id()}; }
};

/// One sample's raw modalities.
struct ConditioningBundle {
  std::vector<Image> images;
  /// Precomputed N-dim features; used instead of `images` when non-empty.
  std::vector<std::vector<float>> image_features;
  std::vector<int> name_ids;
  std::vector<int> target_ids;

  std::size_t num_images() const {
    return image_features.empty() ? images.size() : image_features.size();
  }
};

struct SequenceBatch {
  /// Token id per slot; -1 for injected (image) slots.
  std::vector<int> token_ids;
  /// Row of the injected-embedding tensor per slot; -1 for token slots.
  std::vector<int> image_rows;
  std::vector<int> position_ids;
  /// T x T row-major; [i][j] == 1 iff position i may attend to position j.
  std::vector<std::uint8_t> attention_mask;
  /// Label per position (the token itself, -1 for injected slots).
  std::vector<int> labels;
  /// 1 where the prediction of labels[i] (made at row i-1) enters the loss.
  std::vector<std::uint8_t> loss_mask;
  std::vector<Segment> segments;
  bool text_dropped = false;

  std::size_t length() const { return token_ids.size(); }
  bool attends(std::size_t i, std::size_t j) const { return attention_mask[i * length() + j] != 0; }

  /// Per logits row (0..T-2): the next-token target and whether it counts.
  std::vector<int> next_token_targets() const;
  std::vector<std::uint8_t> next_token_mask() const;
};

/// Conditioning vectors consumed outside the decoded sequence (pseudo-self
/// and context attention). Rows are image tokens, then SEP (when both
/// modalities are present), then name tokens.
struct ConditioningLayout {
  std::vector<int> token_ids;
  std::vector<int> image_rows;
  std::vector<int> position_ids;
  std::vector<Segment> segments;
  /// 1 if the row may be attended to; modality dropout clears name rows.
  std::vector<std::uint8_t> key_mask;
  bool text_dropped = false;

  std::size_t length() const { return token_ids.size(); }
};

struct PreparedInput {
  SequenceBatch text;
  /// Present for pseudo-self and context attention.
  std::optional<ConditioningLayout> cond;
  /// Number of images consumed from the bundle (after max_images).
  std::size_t images_used = 0;
};

struct BuildOptions {
  /// Also train on predicting the name tokens.
  bool loss_on_name = false;
  /// Generation prompts omit EOS.
  bool append_eos = true;
};

/// MAnTiS prefix sequence. Either modality may be absent.
SequenceBatch build_prefix(const ConditioningBundle& b, const SpecialTokens& sp,
                           const ModelConfig& cfg, const BuildOptions& opts = {});
/// [BOS, TGT ..., EOS] with positions 0.. (no conditioning segments).
SequenceBatch build_text_only(std::span<const int> target_ids, const SpecialTokens& sp,
                              const ModelConfig& cfg, const BuildOptions& opts = {});
ConditioningLayout build_conditioning_layout(const ConditioningBundle& b, const SpecialTokens& sp,
                                             const ModelConfig& cfg);

/// Conditioning layout plus the text-only sequence, as consumed by the
/// pseudo-self and context-attention decoders.
PreparedInput make_pseudo_self_inputs(const ConditioningBundle& b, const SpecialTokens& sp,
                                      const ModelConfig& cfg, const BuildOptions& opts = {});

/// Dispatches on cfg.cond_mode.
PreparedInput prepare_input(const ConditioningBundle& b, const SpecialTokens& sp,
                            const ModelConfig& cfg, const BuildOptions& opts = {});

/// With probability p_text, makes every NAME position and the separator
/// that belongs to the name segment unattendable (mask columns cleared).
/// Shapes and positions are unchanged. Text is never dropped from a sample
/// that has no image, so at least one modality survives. Exactly one
/// uniform draw is consumed per call.
SequenceBatch apply_modality_dropout(const SequenceBatch& sb, double p_text, Rng& rng);
ConditioningLayout apply_modality_dropout(const ConditioningLayout& cl, double p_text, Rng& rng);
PreparedInput apply_modality_dropout(const PreparedInput& in, double p_text, Rng& rng);

/// Which mechanism-specific parameters start at zero.
enum class MechanismInit { kRandom, kZero };

/// Per-layer keys/values for the conditioning rows, prepended to that
/// layer's self-attention keys/values. The gate scales the softmax weight
/// of every conditioning key; at gate 1 this is plain pseudo
/// self-attention, at gate 0 the layer reduces to the unconditional one.
template <typename T>
struct PseudoSelfLayer {
  Tensor<T> key_w, key_b, value_w, value_b, gate;
  ParameterList<T> parameters() const;
};

/// Pre-norm cross-attention sublayer appended after a decoder block:
/// x + W_o * attn(LN(x) W_q, cond W_k, cond W_v). A zero output projection
/// makes the sublayer the identity.
template <typename T>
struct ContextAttnLayer {
  Tensor<T> norm_g, norm_b;
  Tensor<T> query_w, query_b, key_w, key_b, value_w, value_b, out_w, out_b;
  ParameterList<T> parameters() const;
};

template <typename T>
std::vector<PseudoSelfLayer<T>> make_pseudo_self_layers(const ModelConfig& cfg, Rng& rng,
                                                        MechanismInit init = MechanismInit::kRandom);

/// The output projection is always zero-initialized; `init` controls the
/// remaining projections.
template <typename T>
std::vector<ContextAttnLayer<T>> make_context_attn_layers(const ModelConfig& cfg, Rng& rng,
                                                          MechanismInit init = MechanismInit::kRandom);

}  // namespace mantis
