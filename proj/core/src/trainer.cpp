#include "mantis/trainer.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

#include "json.hpp"
#include "mantis/ops.hpp"

#ifndef MANTIS_BUILD_ID
#define MANTIS_BUILD_ID "unknown"
#endif

namespace mantis {

using json = nlohmann::json;

std::string build_id() { return MANTIS_BUILD_ID; }

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("train config: " + msg); };
  if (total_steps == 0) fail("total_steps must be positive");
  if (warmup_steps > total_steps) fail("warmup_steps must not exceed total_steps");
  if (batch_size == 0) fail("batch_size must be positive");
  if (!(p_text_dropout >= 0.0 && p_text_dropout <= 1.0)) fail("p_text_dropout must lie in [0, 1]");
  if (!(lr_peak >= 0.0)) fail("lr_peak must be non-negative");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0, 1)");
  if (!(eps > 0.0)) fail("eps must be positive");
  if (!(grad_clip >= 0.0)) fail("grad_clip must be non-negative");
}

double lr_at(std::size_t step, const TrainConfig& tc) {
  if (step > tc.total_steps) {
    throw std::out_of_range("lr_at: step " + std::to_string(step) + " beyond total_steps " +
                            std::to_string(tc.total_steps));
  }
  if (step < tc.warmup_steps) return tc.lr_peak * static_cast<double>(step) / static_cast<double>(tc.warmup_steps);
  const std::size_t decay = tc.total_steps - tc.warmup_steps;
  if (decay == 0) return tc.lr_peak;
  return tc.lr_peak * static_cast<double>(tc.total_steps - step) / static_cast<double>(decay);
}

template <typename T>
AdamW<T>::AdamW(ParameterList<T> params, double beta1, double beta2, double eps, double weight_decay,
                DecayRule decay)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
  for (const auto& p : params_.items()) {
    m_.emplace_back(p.tensor.numel(), T(0));
    v_.emplace_back(p.tensor.numel(), T(0));
    decays_.push_back(decay ? decay(p) : false);
  }
}

template <typename T>
double AdamW<T>::clip_grad_norm(double max_norm) {
  double sq = 0.0;
  for (auto& p : params_.items())
    for (T g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& p : params_.items())
      for (T& g : p.tensor.mutable_grad()) g *= s;
  }
  return norm;
}

template <typename T>
void AdamW<T>::step(double lr) {
  for (auto& p : params_.items()) {
    for (T g : p.tensor.grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NonFiniteGradientError("non-finite gradient in parameter '" + p.name + "'");
      }
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& tensor = params_.items()[i].tensor;
    const auto grad = tensor.grad();
    auto data = tensor.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    const double shrink = decays_[i] ? 1.0 - lr * wd_ : 1.0;
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = static_cast<double>(grad[j]);
      const double mj = beta1_ * static_cast<double>(m[j]) + (1.0 - beta1_) * g;
      const double vj = beta2_ * static_cast<double>(v[j]) + (1.0 - beta2_) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = (mj / bc1) / (std::sqrt(vj / bc2) + eps_);
      data[j] = static_cast<T>(static_cast<double>(data[j]) * shrink - lr * update);
    }
  }
}

template class AdamW<float>;
template class AdamW<double>;

std::string TrainReport::to_json() const {
  json j{{"losses", losses},
         {"final_eval_loss", std::isnan(final_eval_loss) ? json(nullptr) : json(final_eval_loss)},
         {"steps", steps},
         {"skipped_empty", skipped_empty},
         {"config", json::parse(config_json)},
         {"build_id", build_id}};
  return j.dump(2) + "\n";
}

std::string TrainReport::timing_json() const {
  return json{{"wall_seconds", wall_seconds}, {"steps", steps}}.dump(2) + "\n";
}

namespace {

bool has_loss(const PreparedInput& in) {
  for (auto m : in.text.next_token_mask())
    if (m) return true;
  return false;
}

}  // namespace

double evaluate_loss(const DecoderLM<float>& model, std::span<const ConditioningBundle> data,
                     const SpecialTokens& sp, bool loss_on_name) {
  NoGradGuard no_grad;
  BuildOptions opts;
  opts.loss_on_name = loss_on_name;
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& b : data) {
    const PreparedInput in = prepare_input(b, sp, model.config(), opts);
    if (!has_loss(in)) continue;
    total += static_cast<double>(model.loss(in, b).item());
    ++n;
  }
  return n ? total / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

TrainReport train(DecoderLM<float>& model, std::span<const ConditioningBundle> data, const TrainConfig& tc,
                  const SpecialTokens& sp, std::span<const ConditioningBundle> eval_data,
                  const TrainHooks& hooks) {
  tc.validate();
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  const auto start = std::chrono::steady_clock::now();

  AdamW<float> opt(model.parameters(), tc.beta1, tc.beta2, tc.eps, tc.weight_decay);
  BuildOptions build;
  build.loss_on_name = tc.loss_on_name;

  TrainReport report;
  report.build_id = build_id();
  report.losses.reserve(tc.total_steps);

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle_rng(mix_seed(tc.seed, 0x5348554646ULL));
  std::size_t cursor = order.size();

  for (std::size_t step = 0; step < tc.total_steps; ++step) {
    std::vector<std::size_t> batch;
    for (std::size_t s = 0; s < tc.batch_size; ++s) {
      if (cursor == order.size()) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }

    std::vector<PreparedInput> inputs;
    std::vector<std::size_t> owners;
    for (std::size_t s = 0; s < batch.size(); ++s) {
      Rng slot_rng(mix_seed(mix_seed(tc.seed, step + 1), s));
      PreparedInput in = prepare_input(data[batch[s]], sp, model.config(), build);
      in = apply_modality_dropout(in, tc.p_text_dropout, slot_rng);
      if (!has_loss(in)) continue;
      inputs.push_back(std::move(in));
      owners.push_back(batch[s]);
    }
    if (inputs.empty()) {
      ++report.skipped_empty;
      continue;
    }

    opt.zero_grad();
    const double inv = 1.0 / static_cast<double>(inputs.size());
    double step_loss = 0.0;
    for (std::size_t s = 0; s < inputs.size(); ++s) {
      Rng drop_rng(mix_seed(mix_seed(tc.seed ^ 0xD0D0D0D0ULL, step + 1), s));
      const ForwardOptions fo{true, &drop_rng, false};
      const Tensor<float> l = model.loss(inputs[s], data[owners[s]], fo);
      step_loss += static_cast<double>(l.item()) * inv;
      backward(scale(l, static_cast<float>(inv)));
    }
    if (tc.grad_clip > 0.0) opt.clip_grad_norm(tc.grad_clip);
    const double lr = lr_at(step, tc);
    opt.step(lr);
    report.losses.push_back(step_loss);
    ++report.steps;
    if (hooks.on_step) hooks.on_step(step + 1, step_loss, lr);
    if (hooks.checkpoint && tc.checkpoint_every > 0 && (step + 1) % tc.checkpoint_every == 0 &&
        step + 1 < tc.total_steps) {
      hooks.checkpoint(step + 1, model);
    }
  }
  if (hooks.checkpoint) hooks.checkpoint(tc.total_steps, model);

  report.final_eval_loss = eval_data.empty() ? std::numeric_limits<double>::quiet_NaN()
                                             : evaluate_loss(model, eval_data, sp, tc.loss_on_name);
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace mantis
