#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mantis/parameters.hpp"
#include "mantis/tensor.hpp"

namespace mantis {

/// Single-channel image with pixel intensities in [0, 1], row-major.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<float> pixels;

  bool valid() const { return pixels.size() == width * height * channels; }
};

struct VisionConfig {
  std::size_t image_size = 24;
  std::size_t conv_channels = 16;
  /// Pooled feature width (N).
  std::size_t feature_dim = 32;
  /// Output width; must equal the language model embedding width.
  std::size_t embed_dim = 64;
  bool projection_bias = true;
};

/// Two stride-2 3x3 conv layers with GELU, global average pooling to an
/// N-dim feature, then a linear map into the D-dim token embedding space.
/// One image becomes one dense token.
template <typename T>
class ImageProjector {
 public:
  ImageProjector() = default;
  ImageProjector(const VisionConfig& cfg, Rng& rng);

  const VisionConfig& config() const { return cfg_; }

  Tensor<T> encode_image(const Image& img) const;
  /// Row i is the token of image i. Requires at least one image.
  Tensor<T> encode_images(std::span<const Image> imgs) const;
  /// Precomputed-feature path: rows of `features` are N-dim vectors; only
  /// the projection is applied.
  Tensor<T> encode_features(const Tensor<T>& features) const;
  /// Conv feature stage only: [m x N].
  Tensor<T> features(std::span<const Image> imgs) const;

  ParameterList<T> parameters() const;

  Tensor<T> conv1_w, conv1_b, conv2_w, conv2_b;
  Tensor<T> proj_w, proj_b;

 private:
  VisionConfig cfg_;
};

extern template class ImageProjector<float>;
extern template class ImageProjector<double>;

}  // namespace mantis
