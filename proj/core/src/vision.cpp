#include "mantis/vision.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "mantis/ops.hpp"

namespace mantis {

template <typename T>
ImageProjector<T>::ImageProjector(const VisionConfig& cfg, Rng& rng) : cfg_(cfg) {
  const std::size_t c1 = cfg.conv_channels, n = cfg.feature_dim, d = cfg.embed_dim;
  conv1_w = uniform_parameter<T>({c1, 1, 3, 3}, 1.0 / std::sqrt(9.0), rng);
  conv1_b = zero_parameter<T>({c1});
  conv2_w = uniform_parameter<T>({n, c1, 3, 3}, 1.0 / std::sqrt(9.0 * static_cast<double>(c1)), rng);
  conv2_b = zero_parameter<T>({n});
  proj_w = uniform_parameter<T>({n, d}, 1.0 / std::sqrt(static_cast<double>(n)), rng);
  if (cfg.projection_bias) proj_b = zero_parameter<T>({d});
}

template <typename T>
Tensor<T> ImageProjector<T>::features(std::span<const Image> imgs) const {
  if (imgs.empty()) throw std::invalid_argument("encode_images: at least one image is required");
  const std::size_t side = cfg_.image_size;
  std::vector<T> pixels;
  pixels.reserve(imgs.size() * side * side);
  for (const auto& img : imgs) {
    if (img.width != side || img.height != side || img.channels != 1 || !img.valid()) {
      throw ShapeError("encode_image: expected " + std::to_string(side) + "x" + std::to_string(side) +
                       "x1 image, got " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                       "x" + std::to_string(img.channels) + " with " +
                       std::to_string(img.pixels.size()) + " pixels");
    }
    for (float p : img.pixels) pixels.push_back(static_cast<T>(p));
  }
  auto x = Tensor<T>::from({imgs.size(), 1, side, side}, std::move(pixels));
  auto h = gelu(conv2d(x, conv1_w, conv1_b, 2, 1));
  h = gelu(conv2d(h, conv2_w, conv2_b, 2, 1));
  return global_avg_pool(h);
}

template <typename T>
Tensor<T> ImageProjector<T>::encode_features(const Tensor<T>& feats) const {
  if (feats.rank() != 2 || feats.dim(1) != cfg_.feature_dim) {
    throw ShapeError("encode_features: expected [m x " + std::to_string(cfg_.feature_dim) + "], got " +
                     shape_str(feats.shape()));
  }
  return linear(feats, proj_w, proj_b);
}

template <typename T>
Tensor<T> ImageProjector<T>::encode_images(std::span<const Image> imgs) const {
  return encode_features(features(imgs));
}

template <typename T>
Tensor<T> ImageProjector<T>::encode_image(const Image& img) const {
  return encode_images(std::span<const Image>(&img, 1));
}

template <typename T>
ParameterList<T> ImageProjector<T>::parameters() const {
  ParameterList<T> p;
  p.add("conv1.w", conv1_w);
  p.add("conv1.b", conv1_b);
  p.add("conv2.w", conv2_w);
  p.add("conv2.b", conv2_b);
  p.add("proj.w", proj_w);
  if (proj_b.defined()) p.add("proj.b", proj_b);
  return p;
}

template class ImageProjector<float>;
template class ImageProjector<double>;

}  // namespace mantis
