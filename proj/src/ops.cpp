#include "rad2ct/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "rad2ct/error.hpp"

namespace rad2ct {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         to_string(t.shape()));
  }
}

template <typename F>
Tensor unary(const Tensor& x, F f) {
  // f(v) -> {value, derivative}
  std::vector<Real> out(x.size());
  std::vector<Real> deriv(x.size());
  auto in = x.values();
  for (std::size_t i = 0; i < in.size(); ++i) {
    auto [y, d] = f(in[i]);
    out[i] = y;
    deriv[i] = d;
  }
  return Tensor::make_result(x.shape(), std::move(out), {x}, [d = std::move(deriv)](detail::Node& self) {
    if (Real* g = grad_buffer(*self.parents[0])) {
      for (std::size_t i = 0; i < d.size(); ++i) g[i] += self.grad[i] * d[i];
    }
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + to_string(a.shape()) + " by " + to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
  std::vector<Real> out(m * p, Real(0));
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    Real* row = &out[i * p];
    for (std::size_t kk = 0; kk < k; ++kk) {
      const Real s = av[i * k + kk];
      const Real* brow = &bv[kk * p];
      for (std::size_t j = 0; j < p; ++j) row[j] += s * brow[j];
    }
  }
  return Tensor::make_result({m, p}, std::move(out), {a, b}, [m, k, p](detail::Node& self) {
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    const Real* g = self.grad.data();
    if (Real* ga = grad_buffer(an)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
          Real s = 0;
          const Real* brow = &bn.value[kk * p];
          for (std::size_t j = 0; j < p; ++j) s += g[i * p + j] * brow[j];
          ga[i * k + kk] += s;
        }
      }
    }
    if (Real* gb = grad_buffer(bn)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
          const Real s = an.value[i * k + kk];
          Real* gbrow = &gb[kk * p];
          for (std::size_t j = 0; j < p; ++j) gbrow[j] += s * g[i * p + j];
        }
      }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add_bias(matmul(x, weight), bias);
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<Real> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (auto& p : self.parents) {
      if (Real* g = grad_buffer(*p)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<Real> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    if (Real* g = grad_buffer(*self.parents[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (Real* g = grad_buffer(*self.parents[1])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<Real> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    if (Real* g = grad_buffer(an)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bn.value[i];
    }
    if (Real* g = grad_buffer(bn)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * an.value[i];
    }
  });
}

Tensor scale(const Tensor& x, Real factor) {
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return Tensor::make_result(x.shape(), std::move(out), {x}, [factor](detail::Node& self) {
    if (Real* g = grad_buffer(*self.parents[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
    }
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t c = bias.size();
  if (x.rank() == 0 || x.shape().back() != c) {
    throw DimensionError("add_bias: bias " + to_string(bias.shape()) + " does not match last axis of " +
                         to_string(x.shape()));
  }
  std::vector<Real> out(x.values().begin(), x.values().end());
  auto bv = bias.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % c];
  return Tensor::make_result(x.shape(), std::move(out), {x, bias}, [c](detail::Node& self) {
    if (Real* g = grad_buffer(*self.parents[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (Real* g = grad_buffer(*self.parents[1])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % c] += self.grad[i];
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  std::vector<Real> out(x.values().begin(), x.values().end());
  return Tensor::make_result(std::move(shape), std::move(out), {x}, [](detail::Node& self) {
    if (Real* g = grad_buffer(*self.parents[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sum(const Tensor& x) {
  Real s = 0;
  for (Real v : x.values()) s += v;
  return Tensor::make_result({1}, {s}, {x}, [](detail::Node& self) {
    if (Real* g = grad_buffer(*self.parents[0])) {
      const Real up = self.grad[0];
      for (std::size_t i = 0; i < self.parents[0]->value.size(); ++i) g[i] += up;
    }
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), Real(1) / static_cast<Real>(x.size())); }

Tensor row_mean(const Tensor& x) {
  require_rank(x, 2, "row_mean");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<Real> out(rows, Real(0));
  for (std::size_t r = 0; r < rows; ++r) {
    Real s = 0;
    for (std::size_t c = 0; c < cols; ++c) s += x[r * cols + c];
    out[r] = s / static_cast<Real>(cols);
  }
  return Tensor::make_result({rows}, std::move(out), {x}, [rows, cols](detail::Node& self) {
    if (Real* g = grad_buffer(*self.parents[0])) {
      for (std::size_t r = 0; r < rows; ++r) {
        const Real up = self.grad[r] / static_cast<Real>(cols);
        for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += up;
      }
    }
  });
}

Tensor silu(const Tensor& x) {
  return unary(x, [](Real v) {
    const Real s = Real(1) / (Real(1) + std::exp(-v));
    return std::pair{v * s, s * (Real(1) + v * (Real(1) - s))};
  });
}

Tensor tanh(const Tensor& x) {
  return unary(x, [](Real v) {
    const Real t = std::tanh(v);
    return std::pair{t, Real(1) - t * t};
  });
}

Tensor abs(const Tensor& x) {
  return unary(x, [](Real v) { return std::pair{std::abs(v), v > 0 ? Real(1) : (v < 0 ? Real(-1) : Real(0))}; });
}

Tensor square(const Tensor& x) {
  return unary(x, [](Real v) { return std::pair{v * v, Real(2) * v}; });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " + to_string(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t n = x.dim(axis);
  std::vector<Real> out(x.size());
  auto in = x.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) {
      const std::size_t base = o * n * inner + j;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, in[base + i * inner]);
      Real z = 0;
      for (std::size_t i = 0; i < n; ++i) {
        out[base + i * inner] = std::exp(in[base + i * inner] - mx);
        z += out[base + i * inner];
      }
      for (std::size_t i = 0; i < n; ++i) out[base + i * inner] /= z;
    }
  }
  return Tensor::make_result(x.shape(), std::move(out), {x}, [outer, inner, n](detail::Node& self) {
    Real* g = grad_buffer(*self.parents[0]);
    if (!g) return;
    const auto& y = self.value;
    const auto& gy = self.grad;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t j = 0; j < inner; ++j) {
        const std::size_t base = o * n * inner + j;
        Real dot = 0;
        for (std::size_t i = 0; i < n; ++i) dot += y[base + i * inner] * gy[base + i * inner];
        for (std::size_t i = 0; i < n; ++i) {
          g[base + i * inner] += y[base + i * inner] * (gy[base + i * inner] - dot);
        }
      }
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t t_len = logits.dim(0), v = logits.dim(1);
  if (targets.size() != t_len) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         to_string(logits.shape()));
  }
  auto in = logits.values();
  auto probs = std::make_shared<std::vector<Real>>(in.size());
  Real total = 0;
  for (std::size_t t = 0; t < t_len; ++t) {
    const TokenId target = targets[t];
    if (target < 0 || static_cast<std::size_t>(target) >= v) {
      throw IndexError("cross_entropy: target " + std::to_string(target) + " outside vocabulary [0, " +
                       std::to_string(v) + ")");
    }
    const Real* row = &in[t * v];
    Real mx = *std::max_element(row, row + v);
    Real z = 0;
    for (std::size_t i = 0; i < v; ++i) {
      (*probs)[t * v + i] = std::exp(row[i] - mx);
      z += (*probs)[t * v + i];
    }
    for (std::size_t i = 0; i < v; ++i) (*probs)[t * v + i] /= z;
    total += -(row[target] - mx - std::log(z));
  }
  std::vector<TokenId> tgt(targets.begin(), targets.end());
  return Tensor::make_result(
      {1}, {total / static_cast<Real>(t_len)}, {logits},
      [probs, tgt = std::move(tgt), t_len, v](detail::Node& self) {
        Real* g = grad_buffer(*self.parents[0]);
        if (!g) return;
        const Real up = self.grad[0] / static_cast<Real>(t_len);
        for (std::size_t t = 0; t < t_len; ++t) {
          for (std::size_t i = 0; i < v; ++i) g[t * v + i] += up * (*probs)[t * v + i];
          g[t * v + static_cast<std::size_t>(tgt[t])] -= up;
        }
      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps) {
  const std::size_t c = x.shape().back();
  if (gain.size() != c || bias.size() != c) {
    throw DimensionError("layer_norm: gain " + to_string(gain.shape()) + " / bias " + to_string(bias.shape()) +
                         " do not match last axis of " + to_string(x.shape()));
  }
  const std::size_t rows = x.size() / c;
  std::vector<Real> out(x.size());
  auto xhat = std::make_shared<std::vector<Real>>(x.size());
  auto rstd = std::make_shared<std::vector<Real>>(rows);
  auto in = x.values();
  auto gv = gain.values();
  auto bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = &in[r * c];
    Real mu = 0;
    for (std::size_t i = 0; i < c; ++i) mu += row[i];
    mu /= static_cast<Real>(c);
    Real var = 0;
    for (std::size_t i = 0; i < c; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<Real>(c);
    const Real rs = Real(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t i = 0; i < c; ++i) {
      const Real h = (row[i] - mu) * rs;
      (*xhat)[r * c + i] = h;
      out[r * c + i] = h * gv[i] + bv[i];
    }
  }
  return Tensor::make_result(x.shape(), std::move(out), {x, gain, bias}, [xhat, rstd, rows, c](detail::Node& self) {
    const auto& gamma = self.parents[1]->value;
    Real* gx = grad_buffer(*self.parents[0]);
    Real* gg = grad_buffer(*self.parents[1]);
    Real* gb = grad_buffer(*self.parents[2]);
    const auto& dy = self.grad;
    for (std::size_t r = 0; r < rows; ++r) {
      Real sum_d = 0, sum_dh = 0;
      for (std::size_t i = 0; i < c; ++i) {
        const Real d = dy[r * c + i] * gamma[i];
        sum_d += d;
        sum_dh += d * (*xhat)[r * c + i];
        if (gg) gg[i] += dy[r * c + i] * (*xhat)[r * c + i];
        if (gb) gb[i] += dy[r * c + i];
      }
      if (gx) {
        const Real inv_n = Real(1) / static_cast<Real>(c);
        for (std::size_t i = 0; i < c; ++i) {
          const Real d = dy[r * c + i] * gamma[i];
          gx[r * c + i] += (*rstd)[r] * (d - inv_n * sum_d - (*xhat)[r * c + i] * inv_n * sum_dh);
        }
      }
    }
  });
}

Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gain, const Tensor& bias, Real eps) {
  if (x.rank() < 2) throw DimensionError("group_norm: input needs [B, C, ...], got " + to_string(x.shape()));
  const std::size_t b = x.dim(0), c = x.dim(1);
  if (groups == 0 || c % groups != 0) {
    throw DimensionError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                         std::to_string(groups) + " groups");
  }
  if (gain.size() != c || bias.size() != c) {
    throw DimensionError("group_norm: gain/bias must have " + std::to_string(c) + " entries");
  }
  const std::size_t spatial = x.size() / (b * c);
  const std::size_t per_group = c / groups;
  const std::size_t n = per_group * spatial;
  std::vector<Real> out(x.size());
  auto xhat = std::make_shared<std::vector<Real>>(x.size());
  auto rstd = std::make_shared<std::vector<Real>>(b * groups);
  auto in = x.values();
  auto gv = gain.values();
  auto bv = bias.values();
  for (std::size_t s = 0; s < b; ++s) {
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t base = (s * c + g * per_group) * spatial;
      Real mu = 0;
      for (std::size_t i = 0; i < n; ++i) mu += in[base + i];
      mu /= static_cast<Real>(n);
      Real var = 0;
      for (std::size_t i = 0; i < n; ++i) var += (in[base + i] - mu) * (in[base + i] - mu);
      var /= static_cast<Real>(n);
      const Real rs = Real(1) / std::sqrt(var + eps);
      (*rstd)[s * groups + g] = rs;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ch = g * per_group + i / spatial;
        const Real h = (in[base + i] - mu) * rs;
        (*xhat)[base + i] = h;
        out[base + i] = h * gv[ch] + bv[ch];
      }
    }
  }
  return Tensor::make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [xhat, rstd, b, c, groups, per_group, spatial, n](detail::Node& self) {
        const auto& gamma = self.parents[1]->value;
        Real* gx = grad_buffer(*self.parents[0]);
        Real* gg = grad_buffer(*self.parents[1]);
        Real* gb = grad_buffer(*self.parents[2]);
        const auto& dy = self.grad;
        const auto& h = *xhat;
        for (std::size_t s = 0; s < b; ++s) {
          for (std::size_t g = 0; g < groups; ++g) {
            const std::size_t base = (s * c + g * per_group) * spatial;
            Real sum_d = 0, sum_dh = 0;
            for (std::size_t i = 0; i < n; ++i) {
              const std::size_t ch = g * per_group + i / spatial;
              const Real d = dy[base + i] * gamma[ch];
              sum_d += d;
              sum_dh += d * h[base + i];
              if (gg) gg[ch] += dy[base + i] * h[base + i];
              if (gb) gb[ch] += dy[base + i];
            }
            if (gx) {
              const Real inv_n = Real(1) / static_cast<Real>(n);
              const Real rs = (*rstd)[s * groups + g];
              for (std::size_t i = 0; i < n; ++i) {
                const std::size_t ch = g * per_group + i / spatial;
                const Real d = dy[base + i] * gamma[ch];
                gx[base + i] += rs * (d - inv_n * sum_d - h[base + i] * inv_n * sum_dh);
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Convolution. Rank-2 tensors run through the 3D kernels with a unit depth axis.
// ---------------------------------------------------------------------------

namespace {

struct ConvGeometry {
  std::size_t batch = 0, in_ch = 0, out_ch = 0;
  std::size_t in[3] = {1, 1, 1};
  std::size_t k[3] = {1, 1, 1};
  std::size_t stride[3] = {1, 1, 1};
  std::size_t pad[3] = {0, 0, 0};
  std::size_t out[3] = {1, 1, 1};

  std::size_t in_volume() const { return in[0] * in[1] * in[2]; }
  std::size_t out_volume() const { return out[0] * out[1] * out[2]; }
  std::size_t k_volume() const { return k[0] * k[1] * k[2]; }
};

// Output positions o in [lo, hi) whose input index o·s - p + kk lies inside [0, n).
inline void valid_range(std::size_t n, std::size_t out_n, std::size_t s, std::size_t p, std::size_t kk,
                        std::size_t& lo, std::size_t& hi) {
  const long long off = static_cast<long long>(kk) - static_cast<long long>(p);
  long long first = off >= 0 ? 0 : (-off + static_cast<long long>(s) - 1) / static_cast<long long>(s);
  long long last = (static_cast<long long>(n) - 1 - off);
  if (last < 0) {
    lo = hi = 0;
    return;
  }
  last /= static_cast<long long>(s);
  lo = static_cast<std::size_t>(first);
  hi = std::min<std::size_t>(out_n, static_cast<std::size_t>(last) + 1);
  if (lo > hi) lo = hi;
}

// Visits every (input, output) index pair touched by kernel tap (kz, ky, kx):
// body(in_row_ptr_offset, out_row_offset, x_lo, x_hi) per output row.
template <typename Body>
void for_each_tap_row(const ConvGeometry& g, std::size_t kz, std::size_t ky, std::size_t kx, Body&& body) {
  std::size_t z_lo, z_hi, y_lo, y_hi, x_lo, x_hi;
  valid_range(g.in[0], g.out[0], g.stride[0], g.pad[0], kz, z_lo, z_hi);
  valid_range(g.in[1], g.out[1], g.stride[1], g.pad[1], ky, y_lo, y_hi);
  valid_range(g.in[2], g.out[2], g.stride[2], g.pad[2], kx, x_lo, x_hi);
  if (x_lo >= x_hi) return;
  for (std::size_t oz = z_lo; oz < z_hi; ++oz) {
    const std::size_t iz = oz * g.stride[0] + kz - g.pad[0];
    for (std::size_t oy = y_lo; oy < y_hi; ++oy) {
      const std::size_t iy = oy * g.stride[1] + ky - g.pad[1];
      const std::size_t in_row = (iz * g.in[1] + iy) * g.in[2];
      const std::size_t out_row = (oz * g.out[1] + oy) * g.out[2];
      const std::size_t ix0 = x_lo * g.stride[2] + kx - g.pad[2];
      body(in_row + ix0, out_row + x_lo, x_hi - x_lo);
    }
  }
}

// out[b, co] += Σ_ci in[b, ci] ⋆ w[co, ci]
void conv_forward(const ConvGeometry& g, const Real* in, const Real* w, Real* out) {
  const std::size_t sx = g.stride[2];
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t co = 0; co < g.out_ch; ++co) {
      Real* o = out + (b * g.out_ch + co) * g.out_volume();
      for (std::size_t ci = 0; ci < g.in_ch; ++ci) {
        const Real* src = in + (b * g.in_ch + ci) * g.in_volume();
        const Real* wk = w + (co * g.in_ch + ci) * g.k_volume();
        for (std::size_t kz = 0; kz < g.k[0]; ++kz)
          for (std::size_t ky = 0; ky < g.k[1]; ++ky)
            for (std::size_t kx = 0; kx < g.k[2]; ++kx) {
              const Real wv = wk[(kz * g.k[1] + ky) * g.k[2] + kx];
              for_each_tap_row(g, kz, ky, kx, [&](std::size_t i0, std::size_t o0, std::size_t len) {
                const Real* s = src + i0;
                Real* d = o + o0;
                for (std::size_t x = 0; x < len; ++x) d[x] += wv * s[x * sx];
              });
            }
      }
    }
  }
}

// gin[b, ci] += Σ_co gout[b, co] scattered through w[co, ci]
void conv_backward_input(const ConvGeometry& g, const Real* gout, const Real* w, Real* gin) {
  const std::size_t sx = g.stride[2];
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t ci = 0; ci < g.in_ch; ++ci) {
      Real* dst = gin + (b * g.in_ch + ci) * g.in_volume();
      for (std::size_t co = 0; co < g.out_ch; ++co) {
        const Real* go = gout + (b * g.out_ch + co) * g.out_volume();
        const Real* wk = w + (co * g.in_ch + ci) * g.k_volume();
        for (std::size_t kz = 0; kz < g.k[0]; ++kz)
          for (std::size_t ky = 0; ky < g.k[1]; ++ky)
            for (std::size_t kx = 0; kx < g.k[2]; ++kx) {
              const Real wv = wk[(kz * g.k[1] + ky) * g.k[2] + kx];
              for_each_tap_row(g, kz, ky, kx, [&](std::size_t i0, std::size_t o0, std::size_t len) {
                Real* d = dst + i0;
                const Real* s = go + o0;
                for (std::size_t x = 0; x < len; ++x) d[x * sx] += wv * s[x];
              });
            }
      }
    }
  }
}

// gw[co, ci] += Σ_b in[b, ci] ⋆ gout[b, co]
void conv_backward_weight(const ConvGeometry& g, const Real* in, const Real* gout, Real* gw) {
  const std::size_t sx = g.stride[2];
  for (std::size_t co = 0; co < g.out_ch; ++co) {
    for (std::size_t ci = 0; ci < g.in_ch; ++ci) {
      Real* wk = gw + (co * g.in_ch + ci) * g.k_volume();
      for (std::size_t kz = 0; kz < g.k[0]; ++kz)
        for (std::size_t ky = 0; ky < g.k[1]; ++ky)
          for (std::size_t kx = 0; kx < g.k[2]; ++kx) {
            Real acc = 0;
            for (std::size_t b = 0; b < g.batch; ++b) {
              const Real* src = in + (b * g.in_ch + ci) * g.in_volume();
              const Real* go = gout + (b * g.out_ch + co) * g.out_volume();
              for_each_tap_row(g, kz, ky, kx, [&](std::size_t i0, std::size_t o0, std::size_t len) {
                const Real* s = src + i0;
                const Real* d = go + o0;
                for (std::size_t x = 0; x < len; ++x) acc += s[x * sx] * d[x];
              });
            }
            wk[(kz * g.k[1] + ky) * g.k[2] + kx] += acc;
          }
    }
  }
}

// Fills the spatial fields of `g` from a channels-first tensor shape and kernel shape.
// `conv_in` is the tensor on the "input" side of the underlying correlation.
void spatial_geometry(ConvGeometry& g, const Shape& conv_in, const Shape& kernel, std::size_t stride,
                      std::size_t padding, int rank) {
  const std::size_t off = rank == 2 ? 1 : 0;
  for (std::size_t a = 0; a < static_cast<std::size_t>(rank); ++a) {
    g.in[a + off] = conv_in[2 + a];
    g.k[a + off] = kernel[2 + a];
    g.stride[a + off] = stride;
    g.pad[a + off] = padding;
  }
}

void check_conv_args(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride, int rank,
                     const char* op) {
  if (rank != 2 && rank != 3) throw UsageError(std::string(op) + ": rank must be 2 or 3");
  if (stride == 0) throw UsageError(std::string(op) + ": stride must be positive");
  const std::size_t r = static_cast<std::size_t>(rank) + 2;
  if (input.rank() != r || kernel.rank() != r) {
    throw DimensionError(std::string(op) + ": rank-" + std::to_string(rank) + " needs " + std::to_string(r) +
                         "-d input and kernel, got " + to_string(input.shape()) + " and " + to_string(kernel.shape()));
  }
  if (bias.defined() && bias.size() == 0) throw DimensionError(std::string(op) + ": empty bias");
}

Shape output_shape(const ConvGeometry& g, int rank) {
  Shape s{g.batch, g.out_ch};
  for (std::size_t a = (rank == 2 ? 1 : 0); a < 3; ++a) s.push_back(g.out[a]);
  return s;
}

void add_channel_bias(std::vector<Real>& out, const Tensor& bias, std::size_t batch, std::size_t channels,
                      std::size_t volume) {
  auto bv = bias.values();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c) {
      Real* o = &out[(b * channels + c) * volume];
      for (std::size_t i = 0; i < volume; ++i) o[i] += bv[c];
    }
}

void channel_bias_grad(Real* gb, const std::vector<Real>& gy, std::size_t batch, std::size_t channels,
                       std::size_t volume) {
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c) {
      Real s = 0;
      const Real* go = &gy[(b * channels + c) * volume];
      for (std::size_t i = 0; i < volume; ++i) s += go[i];
      gb[c] += s;
    }
}

}  // namespace

Tensor conv(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride, std::size_t padding,
            int rank) {
  check_conv_args(input, kernel, bias, stride, rank, "conv");
  ConvGeometry g;
  g.batch = input.dim(0);
  g.in_ch = input.dim(1);
  g.out_ch = kernel.dim(0);
  if (kernel.dim(1) != g.in_ch) {
    throw DimensionError("conv: kernel " + to_string(kernel.shape()) + " expects " + std::to_string(kernel.dim(1)) +
                         " input channels, input " + to_string(input.shape()) + " has " + std::to_string(g.in_ch));
  }
  if (bias.defined() && bias.size() != g.out_ch) {
    throw DimensionError("conv: bias " + to_string(bias.shape()) + " does not match " + std::to_string(g.out_ch) +
                         " output channels");
  }
  spatial_geometry(g, input.shape(), kernel.shape(), stride, padding, rank);
  for (std::size_t a = 0; a < 3; ++a) {
    if (g.k[a] > g.in[a] + 2 * g.pad[a]) {
      throw DimensionError("conv: kernel " + to_string(kernel.shape()) + " larger than padded input " +
                           to_string(input.shape()) + " (padding " + std::to_string(padding) + ")");
    }
    g.out[a] = (g.in[a] + 2 * g.pad[a] - g.k[a]) / g.stride[a] + 1;
  }
  std::vector<Real> out(g.batch * g.out_ch * g.out_volume(), Real(0));
  conv_forward(g, input.values().data(), kernel.values().data(), out.data());
  std::vector<Tensor> parents{input, kernel};
  if (bias.defined()) {
    add_channel_bias(out, bias, g.batch, g.out_ch, g.out_volume());
    parents.push_back(bias);
  }
  return Tensor::make_result(output_shape(g, rank), std::move(out), std::move(parents), [g](detail::Node& self) {
    auto& in = *self.parents[0];
    auto& w = *self.parents[1];
    if (Real* gi = grad_buffer(in)) conv_backward_input(g, self.grad.data(), w.value.data(), gi);
    if (Real* gw = grad_buffer(w)) conv_backward_weight(g, in.value.data(), self.grad.data(), gw);
    if (self.parents.size() > 2) {
      if (Real* gb = grad_buffer(*self.parents[2])) channel_bias_grad(gb, self.grad, g.batch, g.out_ch, g.out_volume());
    }
  });
}

Tensor conv_transpose(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
                      std::size_t padding, int rank) {
  check_conv_args(input, kernel, bias, stride, rank, "conv_transpose");
  if (kernel.dim(0) != input.dim(1)) {
    throw DimensionError("conv_transpose: kernel " + to_string(kernel.shape()) + " expects " +
                         std::to_string(kernel.dim(0)) + " input channels, input " + to_string(input.shape()) +
                         " has " + std::to_string(input.dim(1)));
  }
  // Underlying correlation runs from the (larger) output back to `input`.
  ConvGeometry g;
  g.batch = input.dim(0);
  g.out_ch = input.dim(1);
  g.in_ch = kernel.dim(1);
  if (bias.defined() && bias.size() != g.in_ch) {
    throw DimensionError("conv_transpose: bias " + to_string(bias.shape()) + " does not match " +
                         std::to_string(g.in_ch) + " output channels");
  }
  spatial_geometry(g, input.shape(), kernel.shape(), stride, padding, rank);
  for (std::size_t a = 0; a < 3; ++a) {
    g.out[a] = g.in[a];
    const long long full = static_cast<long long>(g.out[a] - 1) * static_cast<long long>(g.stride[a]) +
                           static_cast<long long>(g.k[a]) - 2 * static_cast<long long>(g.pad[a]);
    if (full <= 0) {
      throw DimensionError("conv_transpose: kernel " + to_string(kernel.shape()) + " with padding " +
                           std::to_string(padding) + " leaves no output for input " + to_string(input.shape()));
    }
    g.in[a] = static_cast<std::size_t>(full);
  }
  Shape shape{g.batch, g.in_ch};
  for (std::size_t a = (rank == 2 ? 1 : 0); a < 3; ++a) shape.push_back(g.in[a]);
  std::vector<Real> out(numel(shape), Real(0));
  conv_backward_input(g, input.values().data(), kernel.values().data(), out.data());
  std::vector<Tensor> parents{input, kernel};
  if (bias.defined()) {
    add_channel_bias(out, bias, g.batch, g.in_ch, g.in_volume());
    parents.push_back(bias);
  }
  return Tensor::make_result(std::move(shape), std::move(out), std::move(parents), [g](detail::Node& self) {
    auto& in = *self.parents[0];
    auto& w = *self.parents[1];
    if (Real* gi = grad_buffer(in)) conv_forward(g, self.grad.data(), w.value.data(), gi);
    if (Real* gw = grad_buffer(w)) conv_backward_weight(g, self.grad.data(), in.value.data(), gw);
    if (self.parents.size() > 2) {
      if (Real* gb = grad_buffer(*self.parents[2])) channel_bias_grad(gb, self.grad, g.batch, g.in_ch, g.in_volume());
    }
  });
}

Tensor channels_last(const Tensor& x) {
  if (x.rank() < 3) throw DimensionError("channels_last: need [B, C, spatial...], got " + to_string(x.shape()));
  const std::size_t b = x.dim(0), c = x.dim(1), s = x.size() / (b * c);
  std::vector<Real> out(x.size());
  auto in = x.values();
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < s; ++p) out[(n * s + p) * c + ch] = in[(n * c + ch) * s + p];
  return Tensor::make_result({b * s, c}, std::move(out), {x}, [b, c, s](detail::Node& self) {
    if (Real* g = grad_buffer(*self.parents[0])) {
      for (std::size_t n = 0; n < b; ++n)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t p = 0; p < s; ++p) g[(n * c + ch) * s + p] += self.grad[(n * s + p) * c + ch];
    }
  });
}

Tensor channels_first(const Tensor& rows, const Shape& shape) {
  if (shape.size() < 3 || rows.rank() != 2 || numel(shape) != rows.size() || rows.dim(1) != shape[1]) {
    throw DimensionError("channels_first: cannot arrange " + to_string(rows.shape()) + " as " + to_string(shape));
  }
  const std::size_t b = shape[0], c = shape[1], s = rows.size() / (b * c);
  std::vector<Real> out(rows.size());
  auto in = rows.values();
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < s; ++p) out[(n * c + ch) * s + p] = in[(n * s + p) * c + ch];
  return Tensor::make_result(shape, std::move(out), {rows}, [b, c, s](detail::Node& self) {
    if (Real* g = grad_buffer(*self.parents[0])) {
      for (std::size_t n = 0; n < b; ++n)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t p = 0; p < s; ++p) g[(n * s + p) * c + ch] += self.grad[(n * c + ch) * s + p];
    }
  });
}

Tensor embedding(const Tensor& table, std::span<const TokenId> indices) {
  require_rank(table, 2, "embedding");
  const std::size_t v = table.dim(0), c = table.dim(1);
  std::vector<Real> out(indices.size() * c);
  auto tv = table.values();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || static_cast<std::size_t>(indices[i]) >= v) {
      throw IndexError("embedding: index " + std::to_string(indices[i]) + " outside table of " + std::to_string(v) +
                       " rows");
    }
    std::copy_n(&tv[static_cast<std::size_t>(indices[i]) * c], c, &out[i * c]);
  }
  std::vector<TokenId> idx(indices.begin(), indices.end());
  return Tensor::make_result({indices.size(), c}, std::move(out), {table}, [idx = std::move(idx), c](detail::Node& self) {
    if (Real* g = grad_buffer(*self.parents[0])) {
      for (std::size_t i = 0; i < idx.size(); ++i) {
        Real* row = g + static_cast<std::size_t>(idx[i]) * c;
        for (std::size_t j = 0; j < c; ++j) row[j] += self.grad[i * c + j];
      }
    }
  });
}

Tensor causal_attention(const Tensor& qkv, std::size_t batch, std::size_t seq, std::size_t heads) {
  require_rank(qkv, 2, "causal_attention");
  if (qkv.dim(0) != batch * seq || qkv.dim(1) % 3 != 0) {
    throw DimensionError("causal_attention: qkv " + to_string(qkv.shape()) + " inconsistent with batch " +
                         std::to_string(batch) + " x seq " + std::to_string(seq));
  }
  const std::size_t c = qkv.dim(1) / 3;
  if (heads == 0 || c % heads != 0) {
    throw DimensionError("causal_attention: width " + std::to_string(c) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  const std::size_t hd = c / heads;
  const std::size_t w = 3 * c;
  const Real sc = Real(1) / std::sqrt(static_cast<Real>(hd));
  auto in = qkv.values();
  // probs[b][h][t][u], u <= t
  auto probs = std::make_shared<std::vector<Real>>(batch * heads * seq * seq, Real(0));
  std::vector<Real> out(batch * seq * c, Real(0));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t t = 0; t < seq; ++t) {
        const Real* q = &in[(b * seq + t) * w + h * hd];
        Real* p = &(*probs)[((b * heads + h) * seq + t) * seq];
        Real mx = -std::numeric_limits<Real>::infinity();
        for (std::size_t u = 0; u <= t; ++u) {
          const Real* k = &in[(b * seq + u) * w + c + h * hd];
          Real s = 0;
          for (std::size_t i = 0; i < hd; ++i) s += q[i] * k[i];
          p[u] = s * sc;
          mx = std::max(mx, p[u]);
        }
        Real z = 0;
        for (std::size_t u = 0; u <= t; ++u) {
          p[u] = std::exp(p[u] - mx);
          z += p[u];
        }
        Real* o = &out[(b * seq + t) * c + h * hd];
        for (std::size_t u = 0; u <= t; ++u) {
          p[u] /= z;
          const Real* v = &in[(b * seq + u) * w + 2 * c + h * hd];
          for (std::size_t i = 0; i < hd; ++i) o[i] += p[u] * v[i];
        }
      }
    }
  }
  return Tensor::make_result(
      {batch * seq, c}, std::move(out), {qkv}, [probs, batch, seq, heads, c, hd, w, sc](detail::Node& self) {
        Real* g = grad_buffer(*self.parents[0]);
        if (!g) return;
        const auto& in = self.parents[0]->value;
        const auto& dout = self.grad;
        std::vector<Real> dp(seq);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t t = 0; t < seq; ++t) {
              const Real* p = &(*probs)[((b * heads + h) * seq + t) * seq];
              const Real* d = &dout[(b * seq + t) * c + h * hd];
              Real dot = 0;
              for (std::size_t u = 0; u <= t; ++u) {
                const Real* v = &in[(b * seq + u) * w + 2 * c + h * hd];
                Real* gv = &g[(b * seq + u) * w + 2 * c + h * hd];
                Real s = 0;
                for (std::size_t i = 0; i < hd; ++i) {
                  s += d[i] * v[i];
                  gv[i] += p[u] * d[i];
                }
                dp[u] = s;
                dot += p[u] * s;
              }
              const Real* q = &in[(b * seq + t) * w + h * hd];
              Real* gq = &g[(b * seq + t) * w + h * hd];
              for (std::size_t u = 0; u <= t; ++u) {
                const Real ds = p[u] * (dp[u] - dot) * sc;
                const Real* k = &in[(b * seq + u) * w + c + h * hd];
                Real* gk = &g[(b * seq + u) * w + c + h * hd];
                for (std::size_t i = 0; i < hd; ++i) {
                  gq[i] += ds * k[i];
                  gk[i] += ds * q[i];
                }
              }
            }
          }
        }
      });
}

Tensor stop_gradient(const Tensor& x) { return x.detach(); }

Tensor straight_through(const Tensor& latent, const Tensor& quantized) {
  require_same_shape(latent, quantized, "straight_through");
  std::vector<Real> out(quantized.values().begin(), quantized.values().end());
  return Tensor::make_result(latent.shape(), std::move(out), {latent}, [](detail::Node& self) {
    if (Real* g = grad_buffer(*self.parents[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor mse_loss(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse_loss");
  const std::size_t n = a.size();
  Real s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Real d = a[i] - b[i];
    s += d * d;
  }
  return Tensor::make_result({1}, {s / static_cast<Real>(n)}, {a, b}, [n](detail::Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    const Real k = Real(2) * self.grad[0] / static_cast<Real>(n);
    if (Real* g = grad_buffer(*self.parents[0])) {
      for (std::size_t i = 0; i < n; ++i) g[i] += k * (av[i] - bv[i]);
    }
    if (Real* g = grad_buffer(*self.parents[1])) {
      for (std::size_t i = 0; i < n; ++i) g[i] -= k * (av[i] - bv[i]);
    }
  });
}

Tensor slice_l1_loss(const Tensor& a, const Tensor& b, std::size_t slices) {
  require_same_shape(a, b, "slice_l1_loss");
  if (slices == 0 || a.size() % slices != 0) {
    throw DimensionError("slice_l1_loss: " + std::to_string(a.size()) + " elements not divisible into " +
                         std::to_string(slices) + " slices");
  }
  const std::size_t per = a.size() / slices;
  Real total = 0;
  for (std::size_t s = 0; s < slices; ++s) {
    Real acc = 0;
    for (std::size_t i = s * per; i < (s + 1) * per; ++i) acc += std::abs(a[i] - b[i]);
    total += acc / static_cast<Real>(per);
  }
  const Real n = static_cast<Real>(a.size());
  return Tensor::make_result({1}, {total / static_cast<Real>(slices)}, {a, b}, [n](detail::Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    // per-slice mean over equal chunks then mean over slices: every element weighs 1/n
    const Real k = self.grad[0] / n;
    auto sign = [](Real d) { return d > 0 ? Real(1) : (d < 0 ? Real(-1) : Real(0)); };
    if (Real* g = grad_buffer(*self.parents[0])) {
      for (std::size_t i = 0; i < av.size(); ++i) g[i] += k * sign(av[i] - bv[i]);
    }
    if (Real* g = grad_buffer(*self.parents[1])) {
      for (std::size_t i = 0; i < av.size(); ++i) g[i] -= k * sign(av[i] - bv[i]);
    }
  });
}

Tensor dropout(const Tensor& x, Real p, std::mt19937_64& rng) {
  if (p < 0 || p >= 1) throw UsageError("dropout: rate must lie in [0, 1)");
  if (p == 0) return x;
  std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
  const Real inv = Real(1) / (Real(1) - p);
  std::vector<Real> mask(x.size());
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask[i] = keep(rng) ? inv : Real(0);
    out[i] = x[i] * mask[i];
  }
  return Tensor::make_result(x.shape(), std::move(out), {x}, [mask = std::move(mask)](detail::Node& self) {
    if (Real* g = grad_buffer(*self.parents[0])) {
      for (std::size_t i = 0; i < mask.size(); ++i) g[i] += self.grad[i] * mask[i];
    }
  });
}

}  // namespace rad2ct
