#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "mantis/rng.hpp"
#include "mantis/tensor.hpp"

namespace mantis {

/// Raised when a masked loss has no contributing positions.
class EmptyLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kLayerNormEps = 1e-5;

// Matrix products on rank-2 tensors.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// a[r x k] * b[c x k]^T -> [r x c]; used by the tied output head.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);
/// x[r x k] * w[k x c] + bias[c]. `bias` may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

// Elementwise.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);
/// Tanh-approximated GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

// Reductions.
template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

/// Normalizes each row over the last dimension then applies gain/bias.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                    double eps = kLayerNormEps);

/// Max-subtracted softmax over the last dimension. NaN inputs propagate.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x);

/// Row gather; backward scatter-adds into the table gradient.
template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const int> ids);

/// Mean negative log-likelihood over rows whose mask entry is 1. Rows with
/// mask 0 are never read, so their targets may hold any value.
template <typename T>
Tensor<T> masked_cross_entropy(const Tensor<T>& logits, std::span<const int> targets,
                               std::span<const std::uint8_t> loss_mask);

// Row assembly.
template <typename T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts);
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end);
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// Inverted dropout. p == 0 returns `x` unchanged.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng);

/// Keys [0, length) of an attention call whose unnormalized softmax weights
/// are multiplied by `gate` (a one-element tensor, expected >= 0). With a gate
/// of exactly zero those keys are skipped, leaving the remaining keys'
/// arithmetic untouched.
template <typename T>
struct GatedPrefix {
  Tensor<T> gate;
  std::size_t length = 0;
};

/// Multi-head scaled dot-product attention.
///   q: [Tq x D], k, v: [Tk x D], allowed: Tq*Tk row-major 0/1.
/// Query rows without any allowed key produce zeros.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    std::span<const std::uint8_t> allowed, std::size_t heads,
                    const std::optional<GatedPrefix<T>>& prefix = std::nullopt);

/// 2-D convolution. x: [n x C x H x W], w: [O x C x K x K], bias: [O].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::size_t stride, std::size_t pad);

/// [n x C x H x W] -> [n x C], mean over spatial positions.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

}  // namespace mantis
