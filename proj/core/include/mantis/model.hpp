#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mantis/conditioner.hpp"
#include "mantis/model_config.hpp"
#include "mantis/ops.hpp"
#include "mantis/parameters.hpp"
#include "mantis/rng.hpp"
#include "mantis/tensor.hpp"
#include "mantis/vision.hpp"

namespace mantis {

template <typename T>
struct DecoderBlock {
  Tensor<T> ln1_g, ln1_b;
  Tensor<T> q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b;
  Tensor<T> ln2_g, ln2_b;
  Tensor<T> fc_w, fc_b, proj_w, proj_b;

  ParameterList<T> parameters() const;
};

struct ForwardOptions {
  /// Enables in-block dropout; requires `rng`.
  bool training = false;
  Rng* rng = nullptr;
  /// Only compute logits for the final position (generation).
  bool last_only = false;
};

struct GenerationConfig {
  enum class Strategy { kGreedy, kTopK };
  Strategy strategy = Strategy::kGreedy;
  std::size_t k = 1;
  double temperature = 1.0;
  std::size_t max_new_tokens = 48;
  std::uint64_t seed = 0;

  void validate() const;
};

/// GPT-2 style pre-norm decoder with learned absolute positions and a
/// weight-tied output head, plus the image projector and mechanism
/// parameters its conditioning mode needs.
///
/// Parameters are created in a fixed order (embeddings, blocks, final norm,
/// head, image projector, mechanism layers) from one seeded stream, so two
/// models built from the same seed share identical base weights regardless
/// of mode.
template <typename T>
class DecoderLM {
 public:
  DecoderLM() = default;
  DecoderLM(const ModelConfig& cfg, std::uint64_t seed, MechanismInit init = MechanismInit::kRandom);

  const ModelConfig& config() const { return cfg_; }
  ParameterList<T> parameters() const;

  /// Image tokens [m x D] for the first `count` images of the bundle.
  Tensor<T> encode_images(const ConditioningBundle& b, std::size_t count) const;

  /// Input rows: token embedding (or injected row) plus position embedding.
  Tensor<T> embed(const SequenceBatch& sb, const Tensor<T>& injected) const;
  Tensor<T> embed(const ConditioningLayout& cl, const Tensor<T>& injected) const;

  /// Logits [T x V] (or [1 x V] with last_only). `image_tokens` supplies the
  /// injected rows referenced by the sequence (prefix mode) or by the
  /// conditioning layout (pseudo-self / context attention).
  Tensor<T> forward(const PreparedInput& in, const Tensor<T>& image_tokens,
                    const ForwardOptions& opts = {}) const;
  /// Convenience: encodes the bundle's images then runs forward.
  Tensor<T> forward(const PreparedInput& in, const ConditioningBundle& b,
                    const ForwardOptions& opts = {}) const;
  /// Plain sequence (prefix or unconditional mode).
  Tensor<T> forward(const SequenceBatch& sb, const Tensor<T>& image_tokens = {},
                    const ForwardOptions& opts = {}) const;

  /// Masked next-token cross-entropy for one prepared sample.
  Tensor<T> loss(const PreparedInput& in, const ConditioningBundle& b, const ForwardOptions& opts = {}) const;

  std::vector<int> generate(const ConditioningBundle& b, const GenerationConfig& g,
                            const SpecialTokens& sp) const;

  // Public so tests and the checkpoint layer can reach individual tensors.
  Tensor<T> tok_emb, pos_emb;
  std::vector<DecoderBlock<T>> blocks;
  Tensor<T> lnf_g, lnf_b;
  Tensor<T> head_w;  // only when the head is untied
  std::optional<ImageProjector<T>> projector;
  std::vector<PseudoSelfLayer<T>> pseudo_self;
  std::vector<ContextAttnLayer<T>> context_attn;

 private:
  Tensor<T> cond_vectors(const PreparedInput& in, const Tensor<T>& image_tokens) const;
  Tensor<T> maybe_dropout(const Tensor<T>& x, const ForwardOptions& opts) const;

  ModelConfig cfg_;
};

extern template class DecoderLM<float>;
extern template class DecoderLM<double>;

/// Picks the next token from a logits row. Greedy breaks ties toward the
/// lowest id; top-k keeps the k largest (lowest id first on ties) and
/// samples from their temperature-scaled softmax. top-k with k == 1 is
/// greedy.
int select_token(std::span<const float> logits, const GenerationConfig& g, Rng& rng);
int select_token(std::span<const double> logits, const GenerationConfig& g, Rng& rng);

}  // namespace mantis
