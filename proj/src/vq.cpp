#include "rad2ct/vq.hpp"

#include <limits>
#include <string>

#include "rad2ct/error.hpp"

namespace rad2ct {

const char* to_string(Modality m) { return m == Modality::thrx ? "thrx" : "ct"; }

Codebook::Codebook(std::size_t entries, std::size_t dim, std::mt19937_64& rng) {
  if (entries < 2 || dim < 1) throw UsageError("codebook needs at least 2 entries of dimension >= 1");
  const double bound = 1.0 / static_cast<double>(entries);
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<Real> values(entries * dim);
  for (auto& v : values) v = static_cast<Real>(u(rng));
  entries_ = Tensor::from({entries, dim}, std::move(values), true);
  usage_.assign(entries, 0);
}

Codebook::Codebook(Tensor entries) : entries_(std::move(entries)) {
  if (entries_.rank() != 2 || entries_.dim(0) < 2) throw UsageError("codebook tensor must be [N×D] with N >= 2");
  usage_.assign(entries_.dim(0), 0);
}

double Codebook::usage_fraction() const {
  if (usage_.empty()) return 0.0;
  std::size_t used = 0;
  for (auto u : usage_) used += u > 0 ? 1 : 0;
  return static_cast<double>(used) / static_cast<double>(usage_.size());
}

std::vector<TokenId> nearest_entries(std::span<const Real> rows, const Codebook& cb) {
  if (cb.size() == 0) throw UsageError("quantize: empty codebook");
  const std::size_t d = cb.dim(), n = cb.size();
  if (rows.size() % d != 0) {
    throw DimensionError("quantize: latent size " + std::to_string(rows.size()) + " not a multiple of D=" +
                         std::to_string(d));
  }
  auto e = cb.entries().values();
  std::vector<TokenId> out(rows.size() / d);
  for (std::size_t p = 0; p < out.size(); ++p) {
    const Real* z = &rows[p * d];
    Real best = std::numeric_limits<Real>::infinity();
    std::size_t arg = 0;
    for (std::size_t k = 0; k < n; ++k) {
      const Real* c = &e[k * d];
      Real dist = 0;
      for (std::size_t i = 0; i < d; ++i) dist += (z[i] - c[i]) * (z[i] - c[i]);
      if (dist < best) {
        best = dist;
        arg = k;
      }
    }
    out[p] = static_cast<TokenId>(arg);
  }
  return out;
}

Quantized quantize(const Tensor& latent, Codebook& cb, bool count_usage) {
  if (cb.size() == 0) throw UsageError("quantize: empty codebook");
  if (latent.rank() != 2 || latent.dim(1) != cb.dim()) {
    throw DimensionError("quantize: latent " + to_string(latent.shape()) + " does not end in codebook dimension " +
                         std::to_string(cb.dim()));
  }
  Quantized q;
  q.indices = nearest_entries(latent.values(), cb);
  q.selected = embedding(cb.entries(), q.indices);
  q.quantized = straight_through(latent, q.selected);
  if (count_usage) {
    for (auto i : q.indices) cb.usage()[static_cast<std::size_t>(i)] += 1;
  }
  return q;
}

VqLossTerms vq_loss(const Tensor& x, const Tensor& x_hat, const Tensor& latent, const Tensor& selected, Real beta) {
  if (x.shape() != x_hat.shape() || latent.shape() != selected.shape()) {
    throw DimensionError("vq_loss: shape mismatch " + to_string(x.shape()) + "/" + to_string(x_hat.shape()) + " and " +
                         to_string(latent.shape()) + "/" + to_string(selected.shape()));
  }
  VqLossTerms t;
  t.reconstruction = mse_loss(x, x_hat);
  t.codebook = mse_loss(stop_gradient(latent), selected);
  t.commitment = scale(mse_loss(latent, stop_gradient(selected)), beta);
  t.total = add(add(t.reconstruction, t.codebook), t.commitment);
  return t;
}

std::size_t reset_dead_codes(Codebook& cb, const Tensor& latents, std::uint64_t min_usage, std::mt19937_64& rng) {
  if (latents.rank() != 2 || latents.dim(1) != cb.dim() || latents.dim(0) == 0) {
    throw DimensionError("reset_dead_codes: latents must be [P×D] with P > 0");
  }
  std::size_t resets = 0;
  if (min_usage > 0) {
    const std::size_t d = cb.dim();
    std::uniform_int_distribution<std::size_t> pick(0, latents.dim(0) - 1);
    auto entries = cb.entries().mutable_values();
    auto rows = latents.values();
    for (std::size_t k = 0; k < cb.size(); ++k) {
      if (cb.usage()[k] >= min_usage) continue;
      const std::size_t r = pick(rng);
      for (std::size_t i = 0; i < d; ++i) entries[k * d + i] = rows[r * d + i];
      ++resets;
    }
  }
  std::fill(cb.usage().begin(), cb.usage().end(), 0);
  return resets;
}

}  // namespace rad2ct
