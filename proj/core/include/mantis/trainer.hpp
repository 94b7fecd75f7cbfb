#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mantis/conditioner.hpp"
#include "mantis/model.hpp"
#include "mantis/parameters.hpp"

namespace mantis {

struct TrainConfig {
  double lr_peak = 3e-4;
  std::size_t warmup_steps = 100;
  std::size_t total_steps = 1000;
  std::size_t batch_size = 8;
  double p_text_dropout = 0.3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global gradient-norm bound; 0 disables clipping.
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  bool loss_on_name = false;
  /// Checkpoint interval in steps; 0 writes only the final checkpoint.
  std::size_t checkpoint_every = 0;

  void validate() const;
};

/// Linear warmup from 0 to lr_peak, then linear decay to 0 at total_steps.
double lr_at(std::size_t step, const TrainConfig& tc);

class NonFiniteGradientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// AdamW with bias-corrected moments and decoupled weight decay:
///   p <- p * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)
template <typename T>
class AdamW {
 public:
  /// Decides which parameters decay. The default decays matrices and
  /// convolution kernels, not biases, gains, or gates.
  using DecayRule = std::function<bool(const NamedParameter<T>&)>;
  static bool default_decay(const NamedParameter<T>& p) { return p.tensor.rank() >= 2; }

  AdamW(ParameterList<T> params, double beta1, double beta2, double eps, double weight_decay,
        DecayRule decay = default_decay);

  /// Applies one update from the accumulated gradients. Throws
  /// NonFiniteGradientError naming the first parameter with a NaN or
  /// infinite gradient, before touching any value.
  void step(double lr);
  /// Scales gradients so their global L2 norm is at most max_norm.
  /// Returns the norm before scaling.
  double clip_grad_norm(double max_norm);
  void zero_grad() { params_.zero_grad(); }
  std::size_t steps_taken() const { return t_; }

 private:
  ParameterList<T> params_;
  std::vector<std::vector<T>> m_, v_;
  std::vector<bool> decays_;
  double beta1_, beta2_, eps_, wd_;
  std::size_t t_ = 0;
};

extern template class AdamW<float>;
extern template class AdamW<double>;

struct TrainReport {
  std::vector<double> losses;
  /// Mean per-sample loss over the eval set; NaN without one.
  double final_eval_loss = 0.0;
  std::size_t steps = 0;
  std::size_t skipped_empty = 0;
  double wall_seconds = 0.0;
  std::string config_json = "{}";
  std::string build_id;

  /// Everything except wall time, so identical runs give identical bytes.
  std::string to_json() const;
  std::string timing_json() const;
};

struct TrainHooks {
  /// Called every checkpoint_every steps and once after the last step.
  std::function<void(std::size_t step, const DecoderLM<float>&)> checkpoint;
  std::function<void(std::size_t step, double loss, double lr)> on_step;
};

/// Mean masked cross-entropy over `data` without dropout.
double evaluate_loss(const DecoderLM<float>& model, std::span<const ConditioningBundle> data,
                     const SpecialTokens& sp, bool loss_on_name = false);

/// Supervised fine-tuning. Samples are visited in seeded per-epoch
/// shuffles; a step's loss is the mean of its samples' masked losses.
/// Modality dropout and in-block dropout draw from generators derived from
/// (seed, step, slot), so a run is reproducible bit for bit.
TrainReport train(DecoderLM<float>& model, std::span<const ConditioningBundle> data, const TrainConfig& tc,
                  const SpecialTokens& sp, std::span<const ConditioningBundle> eval_data = {},
                  const TrainHooks& hooks = {});

/// Identifies the library build in reports.
std::string build_id();

}  // namespace mantis
