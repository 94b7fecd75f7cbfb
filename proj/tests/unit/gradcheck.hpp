#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mantis/ops.hpp"
#include "mantis/parameters.hpp"
#include "mantis/rng.hpp"
#include "mantis/tensor.hpp"

namespace mantis::testing {

struct GradCheckResult {
  double max_rel = 0.0;
  double max_abs = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

// |a - n| / max(|a|, |n|). Entries within `abs_tol` of each other count as
// agreeing (error 0): near zero the central difference is round-off.
inline double rel_err(double a, double n, double abs_tol) {
  const double diff = std::abs(a - n);
  if (diff <= abs_tol) return 0.0;
  return diff / std::max(std::abs(a), std::abs(n));
}

/// Central finite differences against the reverse-mode gradient of the
/// scalar returned by `f`, for every element of every leaf.
inline GradCheckResult gradcheck(const std::function<Tensor<double>()>& f, ParameterList<double> leaves,
                                 double h = 1e-5, double abs_tol = 1e-8) {
  leaves.zero_grad();
  backward(f());
  GradCheckResult res;
  for (auto& p : leaves.items()) {
    const std::vector<double> analytic(p.tensor.grad().begin(), p.tensor.grad().end());
    auto data = p.tensor.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double keep = data[i];
      double fp = 0.0, fm = 0.0;
      {
        NoGradGuard ng;
        data[i] = keep + h;
        fp = f().item();
        data[i] = keep - h;
        fm = f().item();
      }
      data[i] = keep;
      const double numeric = (fp - fm) / (2.0 * h);
      const double e = rel_err(analytic[i], numeric, abs_tol);
      res.max_abs = std::max(res.max_abs, std::abs(analytic[i] - numeric));
      ++res.checked;
      if (e > res.max_rel) {
        res.max_rel = e;
        res.worst = p.name + "[" + std::to_string(i) + "] analytic " + std::to_string(analytic[i]) +
                    " numeric " + std::to_string(numeric);
      }
    }
  }
  return res;
}

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool requires_grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor<double>::from(std::move(shape), std::move(v), requires_grad);
}

/// Scalar projection sum(y * w) with fixed random weights w, so every
/// output element carries a distinct gradient.
inline Tensor<double> project(const Tensor<double>& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return sum(mul(y, random_tensor(y.shape(), rng, 1.0, false)));
}

}  // namespace mantis::testing
