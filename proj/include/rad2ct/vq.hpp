#pragma once

// Vector quantization: nearest-neighbour codebook lookup with a straight-through
// gradient, the codebook/commitment loss, and dead-entry re-seeding.

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "rad2ct/ops.hpp"
#include "rad2ct/tensor.hpp"

namespace rad2ct {

enum class Modality : std::uint8_t { thrx = 0, ct = 1 };
const char* to_string(Modality m);

/// Codebook indices on a height × width × depth grid (depth = 1 for radiographs),
/// stored width fastest, then height, then depth.
struct TokenGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t depth = 1;
  std::vector<TokenId> indices;
  Modality modality = Modality::thrx;

  std::size_t size() const { return height * width * depth; }
  bool operator==(const TokenGrid&) const = default;
};

class Codebook {
 public:
  Codebook() = default;
  /// N entries of dimension D drawn uniformly from (-1/N, 1/N).
  Codebook(std::size_t entries, std::size_t dim, std::mt19937_64& rng);
  /// Wraps an existing [N×D] tensor (e.g. loaded from a checkpoint).
  explicit Codebook(Tensor entries);

  std::size_t size() const { return entries_.defined() ? entries_.dim(0) : 0; }
  std::size_t dim() const { return entries_.defined() ? entries_.dim(1) : 0; }
  Tensor& entries() { return entries_; }
  const Tensor& entries() const { return entries_; }
  std::vector<std::uint64_t>& usage() { return usage_; }
  const std::vector<std::uint64_t>& usage() const { return usage_; }
  /// Fraction of entries used at least once since the last reset.
  double usage_fraction() const;

 private:
  Tensor entries_;
  std::vector<std::uint64_t> usage_;
};

/// Index of the nearest entry (squared Euclidean; ties go to the lowest index) for
/// every D-dimensional row of `rows`.
std::vector<TokenId> nearest_entries(std::span<const Real> rows, const Codebook& cb);

struct Quantized {
  Tensor quantized;  // entry values forward, gradient straight through to the latent
  Tensor selected;   // entry values, gradient into the codebook
  std::vector<TokenId> indices;
};

/// `latent` is [P×D]. With count_usage, increments the usage counters of the chosen entries.
Quantized quantize(const Tensor& latent, Codebook& cb, bool count_usage = false);

struct VqLossTerms {
  Tensor reconstruction;  // mean (x - x̂)²
  Tensor codebook;        // mean (sg[z] - e)², reaches the codebook only
  Tensor commitment;      // beta · mean (z - sg[e])², reaches the encoder only
  Tensor total;
};

/// Squared norms are averaged over elements.
VqLossTerms vq_loss(const Tensor& x, const Tensor& x_hat, const Tensor& latent, const Tensor& selected, Real beta);

/// Entries used fewer than `min_usage` times since the last reset are moved onto
/// randomly chosen rows of `latents` [P×D]. Resets all usage counters; returns the
/// number of entries moved.
std::size_t reset_dead_codes(Codebook& cb, const Tensor& latents, std::uint64_t min_usage, std::mt19937_64& rng);

}  // namespace rad2ct
