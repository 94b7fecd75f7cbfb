#include "mantis/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "mantis/kernels.hpp"

namespace mantis {

namespace kernels {

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t r, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < r; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void transpose(const T* in, T* out, std::size_t r, std::size_t c) {
  constexpr std::size_t kBlock = 32;
  for (std::size_t i0 = 0; i0 < r; i0 += kBlock) {
    for (std::size_t j0 = 0; j0 < c; j0 += kBlock) {
      const std::size_t i1 = std::min(r, i0 + kBlock);
      const std::size_t j1 = std::min(c, j0 + kBlock);
      for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t j = j0; j < j1; ++j) out[j * r + i] = in[i * c + j];
    }
  }
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t r, std::size_t k, std::size_t n) {
  std::vector<T> bt(k * n);
  transpose(b, bt.data(), n, k);
  gemm_nn(a, bt.data(), c, r, k, n);
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t r, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < r; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template void gemm_nn<float>(const float*, const float*, float*, std::size_t, std::size_t, std::size_t);
template void gemm_nn<double>(const double*, const double*, double*, std::size_t, std::size_t, std::size_t);
template void gemm_nt<float>(const float*, const float*, float*, std::size_t, std::size_t, std::size_t);
template void gemm_nt<double>(const double*, const double*, double*, std::size_t, std::size_t, std::size_t);
template void gemm_tn<float>(const float*, const float*, float*, std::size_t, std::size_t, std::size_t);
template void gemm_tn<double>(const double*, const double*, double*, std::size_t, std::size_t, std::size_t);
template void transpose<float>(const float*, float*, std::size_t, std::size_t);
template void transpose<double>(const double*, double*, std::size_t, std::size_t);

}  // namespace kernels

namespace {

template <typename T>
using NodeT = detail::Node<T>;

template <typename T>
void require_rank2(const Tensor<T>& t, const char* op, const char* arg) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": " + arg + " must be rank 2, got " + shape_str(t.shape()));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// Gradient buffer of parent `i` if it participates in differentiation.
template <typename T>
T* parent_grad(const NodeT<T>& self, std::size_t i) {
  auto& p = *self.parents[i];
  if (!p.requires_grad) return nullptr;
  return p.ensure_grad().data();
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a, "matmul", "a");
  require_rank2(b, "matmul", "b");
  const std::size_t r = a.dim(0), k = a.dim(1), c = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ, a is " + shape_str(a.shape()) + ", b is " +
                     shape_str(b.shape()));
  }
  std::vector<T> out(r * c, T(0));
  kernels::gemm_nn(a.data().data(), b.data().data(), out.data(), r, k, c);
  return Tensor<T>::make_result({r, c}, std::move(out), {a, b}, [r, k, c](const NodeT<T>& self) {
    const T* g = self.grad.data();
    const auto& pa = *self.parents[0];
    const auto& pb = *self.parents[1];
    if (T* ga = parent_grad(self, 0)) kernels::gemm_nt(g, pb.data.data(), ga, r, c, k);
    if (T* gb = parent_grad(self, 1)) kernels::gemm_tn(pa.data.data(), g, gb, r, k, c);
  });
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a, "matmul_nt", "a");
  require_rank2(b, "matmul_nt", "b");
  const std::size_t r = a.dim(0), k = a.dim(1), c = b.dim(0);
  if (b.dim(1) != k) {
    throw ShapeError("matmul_nt: inner dimensions differ, a is " + shape_str(a.shape()) +
                     ", b is " + shape_str(b.shape()));
  }
  std::vector<T> out(r * c, T(0));
  kernels::gemm_nt(a.data().data(), b.data().data(), out.data(), r, k, c);
  return Tensor<T>::make_result({r, c}, std::move(out), {a, b}, [r, k, c](const NodeT<T>& self) {
    const T* g = self.grad.data();
    const auto& pa = *self.parents[0];
    const auto& pb = *self.parents[1];
    // out = a b^T: da = g b, db = g^T a
    if (T* ga = parent_grad(self, 0)) kernels::gemm_nn(g, pb.data.data(), ga, r, c, k);
    if (T* gb = parent_grad(self, 1)) kernels::gemm_tn(g, pa.data.data(), gb, r, c, k);
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  require_rank2(x, "linear", "x");
  require_rank2(w, "linear", "w");
  const std::size_t r = x.dim(0), k = x.dim(1), c = w.dim(1);
  if (w.dim(0) != k) {
    throw ShapeError("linear: inner dimensions differ, x is " + shape_str(x.shape()) + ", w is " +
                     shape_str(w.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != c) {
    throw ShapeError("linear: bias shape " + shape_str(bias.shape()) + " does not match output width " +
                     std::to_string(c));
  }
  std::vector<T> out(r * c, T(0));
  kernels::gemm_nn(x.data().data(), w.data().data(), out.data(), r, k, c);
  if (has_bias) {
    const T* bv = bias.data().data();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[i * c + j] += bv[j];
  }
  std::vector<Tensor<T>> parents{x, w};
  if (has_bias) parents.push_back(bias);
  return Tensor<T>::make_result(
      {r, c}, std::move(out), parents, [r, k, c, has_bias](const NodeT<T>& self) {
        const T* g = self.grad.data();
        const auto& px = *self.parents[0];
        const auto& pw = *self.parents[1];
        if (T* gx = parent_grad(self, 0)) kernels::gemm_nt(g, pw.data.data(), gx, r, c, k);
        if (T* gw = parent_grad(self, 1)) kernels::gemm_tn(px.data.data(), g, gw, r, k, c);
        if (has_bias) {
          if (T* gb = parent_grad(self, 2)) {
            for (std::size_t i = 0; i < r; ++i)
              for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
          }
        }
      });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  const T* av = a.data().data();
  const T* bv = b.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](const NodeT<T>& self) {
    const std::size_t n = self.grad.size();
    for (std::size_t p = 0; p < 2; ++p) {
      if (T* gp = parent_grad(self, p))
        for (std::size_t i = 0; i < n; ++i) gp[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  const T* av = a.data().data();
  const T* bv = b.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](const NodeT<T>& self) {
    const std::size_t n = self.grad.size();
    const auto& pa = *self.parents[0];
    const auto& pb = *self.parents[1];
    if (T* ga = parent_grad(self, 0))
      for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i] * pb.data[i];
    if (T* gb = parent_grad(self, 1))
      for (std::size_t i = 0; i < n; ++i) gb[i] += self.grad[i] * pa.data[i];
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [factor](const NodeT<T>& self) {
    if (T* gx = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += factor * self.grad[i];
  });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  const std::size_t n = x.numel();
  std::vector<T> out(n);
  const T* xv = x.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const T v = xv[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(kC * (v + kA * v * v * v)));
  }
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [](const NodeT<T>& self) {
    T* gx = parent_grad(self, 0);
    if (!gx) return;
    const auto& px = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T v = px.data[i];
      const T t = std::tanh(kC * (v + kA * v * v * v));
      const T dt = kC * (T(1) + T(3) * kA * v * v);
      gx[i] += self.grad[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * dt);
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  return Tensor<T>::make_result({1}, {total}, {x}, [](const NodeT<T>& self) {
    if (T* gx = parent_grad(self, 0)) {
      const std::size_t n = self.parents[0]->data.size();
      for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[0];
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, double eps) {
  if (x.rank() == 0) throw ShapeError("layernorm: scalar input");
  const std::size_t d = x.cols();
  if (gain.numel() != d || bias.numel() != d) {
    throw ShapeError("layernorm: last dim of " + shape_str(x.shape()) + " does not match gain " +
                     shape_str(gain.shape()) + " / bias " + shape_str(bias.shape()));
  }
  const std::size_t rows = x.rows();
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(rows);
  const T* xv = x.data().data();
  const T* g = gain.data().data();
  const T* b = bias.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv + r * d;
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(var + static_cast<T>(eps));
    inv_std[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mu) * inv;
      xhat[r * d + j] = h;
      out[r * d + j] = h * g[j] + b[j];
    }
  }
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](const NodeT<T>& self) {
        const T* dy = self.grad.data();
        const T* g = self.parents[1]->data.data();
        T* gx = parent_grad(self, 0);
        T* gg = parent_grad(self, 1);
        T* gb = parent_grad(self, 2);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* dyr = dy + r * d;
          const T* hr = xhat.data() + r * d;
          if (gg)
            for (std::size_t j = 0; j < d; ++j) gg[j] += dyr[j] * hr[j];
          if (gb)
            for (std::size_t j = 0; j < d; ++j) gb[j] += dyr[j];
          if (!gx) continue;
          T mean_dh = T(0), mean_dh_h = T(0);
          for (std::size_t j = 0; j < d; ++j) {
            const T dh = dyr[j] * g[j];
            mean_dh += dh;
            mean_dh_h += dh * hr[j];
          }
          mean_dh /= static_cast<T>(d);
          mean_dh_h /= static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const T dh = dyr[j] * g[j];
            gx[r * d + j] += inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
          }
        }
      });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  if (x.rank() == 0) throw ShapeError("softmax_rows: scalar input");
  const std::size_t rows = x.rows(), k = x.cols();
  std::vector<T> out(x.numel());
  const T* xv = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv + r * k;
    T* o = out.data() + r * k;
    T mx = -std::numeric_limits<T>::infinity();
    bool has_nan = false;
    for (std::size_t j = 0; j < k; ++j) {
      if (std::isnan(row[j])) has_nan = true;
      mx = std::max(mx, row[j]);
    }
    if (has_nan) {
      std::fill(o, o + k, std::numeric_limits<T>::quiet_NaN());
      continue;
    }
    T z = T(0);
    for (std::size_t j = 0; j < k; ++j) {
      o[j] = std::exp(row[j] - mx);
      z += o[j];
    }
    for (std::size_t j = 0; j < k; ++j) o[j] /= z;
  }
  std::vector<T> saved = out;
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x}, [rows, k, y = std::move(saved)](const NodeT<T>& self) {
        T* gx = parent_grad(self, 0);
        if (!gx) return;
        for (std::size_t r = 0; r < rows; ++r) {
          const T* yr = y.data() + r * k;
          const T* dy = self.grad.data() + r * k;
          T dot = T(0);
          for (std::size_t j = 0; j < k; ++j) dot += yr[j] * dy[j];
          for (std::size_t j = 0; j < k; ++j) gx[r * k + j] += yr[j] * (dy[j] - dot);
        }
      });
}

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const int> ids) {
  require_rank2(table, "embedding_lookup", "table");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<int> idx(ids.begin(), ids.end());
  for (int id : idx) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw IndexError("embedding_lookup: id " + std::to_string(id) + " outside [0, " +
                       std::to_string(vocab) + ")");
    }
  }
  std::vector<T> out(idx.size() * d);
  const T* tv = table.data().data();
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(tv + static_cast<std::size_t>(idx[i]) * d, d, out.data() + i * d);
  const std::size_t n = idx.size();
  return Tensor<T>::make_result({n, d}, std::move(out), {table},
                                [d, idx = std::move(idx)](const NodeT<T>& self) {
                                  T* gt = parent_grad(self, 0);
                                  if (!gt) return;
                                  for (std::size_t i = 0; i < idx.size(); ++i) {
                                    T* dst = gt + static_cast<std::size_t>(idx[i]) * d;
                                    const T* src = self.grad.data() + i * d;
                                    for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                                  }
                                });
}

template <typename T>
Tensor<T> masked_cross_entropy(const Tensor<T>& logits, std::span<const int> targets,
                               std::span<const std::uint8_t> loss_mask) {
  require_rank2(logits, "masked_cross_entropy", "logits");
  const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != rows || loss_mask.size() != rows) {
    throw ShapeError("masked_cross_entropy: " + std::to_string(rows) + " logit rows but " +
                     std::to_string(targets.size()) + " targets and " +
                     std::to_string(loss_mask.size()) + " mask entries");
  }
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < rows; ++i) {
    if (!loss_mask[i]) continue;
    const int t = targets[i];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw IndexError("masked_cross_entropy: target " + std::to_string(t) + " at row " +
                       std::to_string(i) + " outside [0, " + std::to_string(vocab) + ")");
    }
    active.push_back(i);
  }
  if (active.empty()) throw EmptyLossError("masked_cross_entropy: empty loss (all positions masked)");

  const T* lv = logits.data().data();
  std::vector<T> probs(active.size() * vocab);
  std::vector<int> tgt(active.size());
  T total = T(0);
  for (std::size_t a = 0; a < active.size(); ++a) {
    const std::size_t i = active[a];
    const T* row = lv + i * vocab;
    T* p = probs.data() + a * vocab;
    T mx = row[0];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
    T z = T(0);
    for (std::size_t j = 0; j < vocab; ++j) {
      p[j] = std::exp(row[j] - mx);
      z += p[j];
    }
    for (std::size_t j = 0; j < vocab; ++j) p[j] /= z;
    tgt[a] = targets[i];
    total += (std::log(z) + mx) - row[tgt[a]];
  }
  const T count = static_cast<T>(active.size());
  return Tensor<T>::make_result(
      {1}, {total / count}, {logits},
      [vocab, count, active = std::move(active), probs = std::move(probs),
       tgt = std::move(tgt)](const NodeT<T>& self) {
        T* gl = parent_grad(self, 0);
        if (!gl) return;
        const T g = self.grad[0] / count;
        for (std::size_t a = 0; a < active.size(); ++a) {
          T* dst = gl + active[a] * vocab;
          const T* p = probs.data() + a * vocab;
          for (std::size_t j = 0; j < vocab; ++j) dst[j] += g * p[j];
          dst[tgt[a]] -= g;
        }
      });
}

template <typename T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t d = parts[0].cols();
  std::size_t total = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    require_rank2(p, "concat_rows", "part");
    if (p.cols() != d) {
      throw ShapeError("concat_rows: width mismatch " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    offsets.push_back(total);
    total += p.dim(0);
  }
  std::vector<T> out(total * d);
  for (std::size_t i = 0; i < parts.size(); ++i)
    std::copy(parts[i].data().begin(), parts[i].data().end(), out.begin() + offsets[i] * d);
  std::vector<Tensor<T>> parents(parts.begin(), parts.end());
  // Parents that do not require grad are still recorded (make_result keeps
  // defined parents), so offsets index parents 1:1.
  return Tensor<T>::make_result(
      {total, d}, std::move(out), parents, [d, offsets = std::move(offsets)](const NodeT<T>& self) {
        for (std::size_t i = 0; i < self.parents.size(); ++i) {
          T* gp = parent_grad(self, i);
          if (!gp) continue;
          const std::size_t n = self.parents[i]->data.size();
          const T* src = self.grad.data() + offsets[i] * d;
          for (std::size_t j = 0; j < n; ++j) gp[j] += src[j];
        }
      });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  require_rank2(x, "slice_rows", "x");
  if (begin > end || end > x.dim(0)) {
    throw IndexError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") outside " + shape_str(x.shape()));
  }
  const std::size_t d = x.dim(1);
  std::vector<T> out(x.data().begin() + begin * d, x.data().begin() + end * d);
  return Tensor<T>::make_result({end - begin, d}, std::move(out), {x},
                                [begin, d](const NodeT<T>& self) {
                                  T* gx = parent_grad(self, 0);
                                  if (!gx) return;
                                  for (std::size_t j = 0; j < self.grad.size(); ++j)
                                    gx[begin * d + j] += self.grad[j];
                                });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return Tensor<T>::make_result(std::move(shape), std::move(out), {x}, [](const NodeT<T>& self) {
    if (T* gx = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ContractError("dropout: probability must be < 1");
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.numel());
  std::vector<T> out(x.numel());
  const T* xv = x.data().data();
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = rng.uniform() < p ? T(0) : keep_scale;
    out[i] = xv[i] * mask[i];
  }
  return Tensor<T>::make_result(x.shape(), std::move(out), {x},
                                [mask = std::move(mask)](const NodeT<T>& self) {
                                  if (T* gx = parent_grad(self, 0))
                                    for (std::size_t i = 0; i < mask.size(); ++i)
                                      gx[i] += self.grad[i] * mask[i];
                                });
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    std::span<const std::uint8_t> allowed, std::size_t heads,
                    const std::optional<GatedPrefix<T>>& prefix) {
  require_rank2(q, "attention", "q");
  require_rank2(k, "attention", "k");
  require_rank2(v, "attention", "v");
  const std::size_t tq = q.dim(0), tk = k.dim(0), d = q.dim(1);
  if (k.dim(1) != d || v.dim(1) != d || v.dim(0) != tk) {
    throw ShapeError("attention: incompatible q " + shape_str(q.shape()) + ", k " +
                     shape_str(k.shape()) + ", v " + shape_str(v.shape()));
  }
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(d) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  if (allowed.size() != tq * tk) {
    throw ShapeError("attention: mask has " + std::to_string(allowed.size()) + " entries, expected " +
                     std::to_string(tq) + "x" + std::to_string(tk));
  }
  const std::size_t plen = prefix ? prefix->length : 0;
  if (plen > tk) throw ShapeError("attention: gated prefix longer than key sequence");
  if (prefix && prefix->gate.numel() != 1) throw ShapeError("attention: gate must hold one value");
  const T gate = prefix ? prefix->gate.item() : T(1);
  const bool skip_prefix = prefix && gate == T(0);

  const std::size_t dh = d / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  const T* qv = q.data().data();
  const T* kv = k.data().data();
  const T* vv = v.data().data();
  std::vector<std::uint8_t> mask(allowed.begin(), allowed.end());

  std::vector<T> out(tq * d, T(0));
  std::vector<T> probs(heads * tq * tk, T(0));
  // Ungated normalized weights of prefix keys, kept for the gate gradient.
  std::vector<T> prefix_weights(heads * tq * plen, T(0));
  std::vector<T> scores(tk);

  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < tq; ++i) {
      const std::uint8_t* mrow = mask.data() + i * tk;
      const T* qi = qv + i * d + off;
      T mx = -std::numeric_limits<T>::infinity();
      bool any = false;
      for (std::size_t j = 0; j < tk; ++j) {
        if (!mrow[j]) continue;
        const T* kj = kv + j * d + off;
        T s = T(0);
        for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
        s *= inv_sqrt;
        scores[j] = s;
        if (skip_prefix && j < plen) continue;
        mx = std::max(mx, s);
        any = true;
      }
      if (!any) continue;
      T* prow = probs.data() + (h * tq + i) * tk;
      T z = T(0);
      for (std::size_t j = 0; j < tk; ++j) {
        if (!mrow[j]) continue;
        const T e = std::exp(scores[j] - mx);
        if (j < plen) {
          prefix_weights[(h * tq + i) * plen + j] = e;
          if (skip_prefix) continue;
          prow[j] = gate * e;
        } else {
          prow[j] = e;
        }
        z += prow[j];
      }
      T* oi = out.data() + i * d + off;
      for (std::size_t j = 0; j < tk; ++j) {
        if (!mrow[j]) continue;
        if (skip_prefix && j < plen) continue;
        prow[j] /= z;
        const T* vj = vv + j * d + off;
        const T pj = prow[j];
        for (std::size_t c = 0; c < dh; ++c) oi[c] += pj * vj[c];
      }
      for (std::size_t j = 0; j < plen; ++j) prefix_weights[(h * tq + i) * plen + j] /= z;
    }
  }

  std::vector<Tensor<T>> parents{q, k, v};
  if (prefix) parents.push_back(prefix->gate);
  return Tensor<T>::make_result(
      {tq, d}, std::move(out), parents,
      [tq, tk, d, heads, dh, plen, inv_sqrt, mask = std::move(mask), probs = std::move(probs),
       prefix_weights = std::move(prefix_weights)](const NodeT<T>& self) {
        const T* qv = self.parents[0]->data.data();
        const T* kv = self.parents[1]->data.data();
        const T* vv = self.parents[2]->data.data();
        T* gq = parent_grad(self, 0);
        T* gk = parent_grad(self, 1);
        T* gv = parent_grad(self, 2);
        T* ggate = self.parents.size() > 3 ? parent_grad(self, 3) : nullptr;
        const T* dout = self.grad.data();
        std::vector<T> dp(tk);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = h * dh;
          for (std::size_t i = 0; i < tq; ++i) {
            const std::uint8_t* mrow = mask.data() + i * tk;
            const T* prow = probs.data() + (h * tq + i) * tk;
            const T* doi = dout + i * d + off;
            T weighted = T(0);
            bool any = false;
            for (std::size_t j = 0; j < tk; ++j) {
              dp[j] = T(0);
              if (!mrow[j]) continue;
              any = true;
              const T* vj = vv + j * d + off;
              T s = T(0);
              for (std::size_t c = 0; c < dh; ++c) s += doi[c] * vj[c];
              dp[j] = s;
              weighted += prow[j] * s;
              if (gv && prow[j] != T(0)) {
                T* gvj = gv + j * d + off;
                for (std::size_t c = 0; c < dh; ++c) gvj[c] += prow[j] * doi[c];
              }
            }
            if (!any) continue;
            if (ggate) {
              const T* rrow = prefix_weights.data() + (h * tq + i) * plen;
              T direct = T(0), mass = T(0);
              for (std::size_t j = 0; j < plen; ++j) {
                if (!mrow[j]) continue;
                direct += dp[j] * rrow[j];
                mass += rrow[j];
              }
              ggate[0] += direct - mass * weighted;
            }
            const T* qi = qv + i * d + off;
            for (std::size_t j = 0; j < tk; ++j) {
              if (!mrow[j] || prow[j] == T(0)) continue;
              const T ds = prow[j] * (dp[j] - weighted) * inv_sqrt;
              const T* kj = kv + j * d + off;
              if (gq) {
                T* gqi = gq + i * d + off;
                for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
              }
              if (gk) {
                T* gkj = gk + j * d + off;
                for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, std::size_t stride,
                 std::size_t pad) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw ShapeError("conv2d: expected rank-4 input and weight, got " + shape_str(x.shape()) +
                     " and " + shape_str(w.shape()));
  }
  const std::size_t n = x.dim(0), cin = x.dim(1), hin = x.dim(2), win = x.dim(3);
  const std::size_t cout = w.dim(0), ksz = w.dim(2);
  if (w.dim(1) != cin || w.dim(3) != ksz) {
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " incompatible with input " +
                     shape_str(x.shape()));
  }
  if (bias.numel() != cout) throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " mismatch");
  if (stride == 0 || hin + 2 * pad < ksz || win + 2 * pad < ksz) {
    throw ShapeError("conv2d: kernel does not fit input " + shape_str(x.shape()));
  }
  const std::size_t hout = (hin + 2 * pad - ksz) / stride + 1;
  const std::size_t wout = (win + 2 * pad - ksz) / stride + 1;
  const std::size_t npix = hout * wout;
  const std::size_t ncol = cin * ksz * ksz;

  // cols[img][q][pix] with q = (c, ky, kx); padded taps stay zero.
  std::vector<T> cols(n * ncol * npix, T(0));
  const T* xv = x.data().data();
  for (std::size_t img = 0; img < n; ++img) {
    T* cimg = cols.data() + img * ncol * npix;
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t ky = 0; ky < ksz; ++ky)
        for (std::size_t kx = 0; kx < ksz; ++kx) {
          T* crow = cimg + ((c * ksz + ky) * ksz + kx) * npix;
          for (std::size_t oy = 0; oy < hout; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                      static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(hin)) continue;
            for (std::size_t ox = 0; ox < wout; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                        static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(win)) continue;
              crow[oy * wout + ox] =
                  xv[((img * cin + c) * hin + static_cast<std::size_t>(iy)) * win +
                     static_cast<std::size_t>(ix)];
            }
          }
        }
  }

  std::vector<T> out(n * cout * npix, T(0));
  const T* wv = w.data().data();
  const T* bv = bias.data().data();
  for (std::size_t img = 0; img < n; ++img) {
    T* oimg = out.data() + img * cout * npix;
    for (std::size_t o = 0; o < cout; ++o) std::fill(oimg + o * npix, oimg + (o + 1) * npix, bv[o]);
    kernels::gemm_nn(wv, cols.data() + img * ncol * npix, oimg, cout, ncol, npix);
  }

  return Tensor<T>::make_result(
      {n, cout, hout, wout}, std::move(out), {x, w, bias},
      [n, cin, hin, win, cout, ksz, hout, wout, npix, ncol, stride, pad,
       cols = std::move(cols)](const NodeT<T>& self) {
        const T* g = self.grad.data();
        const T* wv = self.parents[1]->data.data();
        T* gx = parent_grad(self, 0);
        T* gw = parent_grad(self, 1);
        T* gb = parent_grad(self, 2);
        std::vector<T> dcols(gx ? ncol * npix : 0);
        for (std::size_t img = 0; img < n; ++img) {
          const T* gimg = g + img * cout * npix;
          if (gb)
            for (std::size_t o = 0; o < cout; ++o)
              for (std::size_t p = 0; p < npix; ++p) gb[o] += gimg[o * npix + p];
          if (gw) kernels::gemm_nt(gimg, cols.data() + img * ncol * npix, gw, cout, npix, ncol);
          if (!gx) continue;
          std::fill(dcols.begin(), dcols.end(), T(0));
          kernels::gemm_tn(wv, gimg, dcols.data(), cout, ncol, npix);
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t ky = 0; ky < ksz; ++ky)
              for (std::size_t kx = 0; kx < ksz; ++kx) {
                const T* drow = dcols.data() + ((c * ksz + ky) * ksz + kx) * npix;
                for (std::size_t oy = 0; oy < hout; ++oy) {
                  const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                            static_cast<std::ptrdiff_t>(pad);
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(hin)) continue;
                  for (std::size_t ox = 0; ox < wout; ++ox) {
                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                              static_cast<std::ptrdiff_t>(pad);
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(win)) continue;
                    gx[((img * cin + c) * hin + static_cast<std::size_t>(iy)) * win +
                       static_cast<std::size_t>(ix)] += drow[oy * wout + ox];
                  }
                }
              }
        }
      });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool: expected rank 4, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), npix = x.dim(2) * x.dim(3);
  std::vector<T> out(n * c);
  const T* xv = x.data().data();
  const T inv = T(1) / static_cast<T>(npix);
  for (std::size_t i = 0; i < n * c; ++i) {
    T s = T(0);
    for (std::size_t p = 0; p < npix; ++p) s += xv[i * npix + p];
    out[i] = s * inv;
  }
  return Tensor<T>::make_result({n, c}, std::move(out), {x}, [n, c, npix, inv](const NodeT<T>& self) {
    T* gx = parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < n * c; ++i)
      for (std::size_t p = 0; p < npix; ++p) gx[i * npix + p] += self.grad[i] * inv;
  });
}

#define MANTIS_INSTANTIATE_OPS(T)                                                                  \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> scale(const Tensor<T>&, T);                                                   \
  template Tensor<T> gelu(const Tensor<T>&);                                                       \
  template Tensor<T> sum(const Tensor<T>&);                                                        \
  template Tensor<T> mean(const Tensor<T>&);                                                       \
  template Tensor<T> layernorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);      \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                               \
  template Tensor<T> embedding_lookup(const Tensor<T>&, std::span<const int>);                     \
  template Tensor<T> masked_cross_entropy(const Tensor<T>&, std::span<const int>,                  \
                                          std::span<const std::uint8_t>);                          \
  template Tensor<T> concat_rows(std::span<const Tensor<T>>);                                      \
  template Tensor<T> slice_rows(const Tensor<T>&, std::size_t, std::size_t);                       \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                             \
  template Tensor<T> dropout(const Tensor<T>&, double, Rng&);                                      \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,               \
                               std::span<const std::uint8_t>, std::size_t,                         \
                               const std::optional<GatedPrefix<T>>&);                              \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,     \
                            std::size_t);                                                          \
  template Tensor<T> global_avg_pool(const Tensor<T>&);

MANTIS_INSTANTIATE_OPS(float)
MANTIS_INSTANTIATE_OPS(double)

#undef MANTIS_INSTANTIATE_OPS

}  // namespace mantis
