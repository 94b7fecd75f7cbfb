#pragma once

#include <cstddef>
#include <string>
#include <string_view>

#include "mantis/vision.hpp"

namespace mantis {

/// How conditioning reaches the decoder.
enum class CondMode {
  kMantisPrefix,   // projected image tokens + name tokens prepended to the input
  kPseudoSelf,     // conditioning keys/values prepended inside every self-attention
  kContextAttn,    // cross-attention sublayer after every block
  kUnconditional,  // no conditioning
};

std::string_view to_string(CondMode mode);
/// Accepts "mantis", "pseudo_self", "context_attn", "unconditional".
CondMode parse_cond_mode(std::string_view name);

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t embed_dim = 64;
  std::size_t vocab_size = 0;
  /// Bound on position ids. Positions restart per segment, so this bounds
  /// the longest segment rather than the whole sequence.
  std::size_t max_pos = 64;
  std::size_t max_seq_len = 160;
  std::size_t max_images = 5;
  double dropout = 0.1;
  bool tied_head = true;
  CondMode cond_mode = CondMode::kMantisPrefix;
  VisionConfig vision;

  bool uses_images() const { return cond_mode != CondMode::kUnconditional; }
  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
};

/// JSON object text with every field above (vision nested).
std::string model_config_to_json(const ModelConfig& cfg);
/// Missing keys keep their defaults; unknown keys are rejected.
ModelConfig model_config_from_json(std::string_view json);

}  // namespace mantis
