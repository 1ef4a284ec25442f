#pragma once

// Convolutional VQ autoencoder used for both radiographs (rank 2) and CT volumes
// (rank 3).
//
// Encoder: per stage a stride-2 4^r convolution, group norm and SiLU, then a 1^r
// projection to the latent dimension D. Decoder mirrors it with stride-2
// transposed convolutions and ends in a 3^r convolution and tanh, so outputs lie in
// (-1, 1). Each stage halves every spatial extent.

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rad2ct/checkpoint.hpp"
#include "rad2ct/config.hpp"
#include "rad2ct/vq.hpp"
#include "rad2ct/volume.hpp"

namespace rad2ct {

struct AutoencoderConfig {
  int rank = 3;
  Extents3 input{32, 32, 32};  // depth must be 1 for rank 2
  std::vector<std::size_t> channels{16, 32, 64};
  std::size_t latent_dim = 16;
  std::size_t codebook_size = 256;
  double beta = 0.25;
  double l1_weight = 1.0;
  std::size_t groups = 4;

  std::size_t stages() const { return channels.size(); }
  Extents3 latent_extents() const;
  Modality modality() const { return rank == 2 ? Modality::thrx : Modality::ct; }
  /// Throws UsageError if extents are not divisible by 2^stages or fields are invalid.
  void validate() const;

  /// Keys `<prefix>.rank`, `<prefix>.input`, ...
  Config to_config(const std::string& prefix) const;
  static AutoencoderConfig from_config(const Config& cfg, const std::string& prefix, AutoencoderConfig defaults);
  static AutoencoderConfig desk_2d();
  static AutoencoderConfig desk_3d();
};

/// MSE + l1_weight · L1, where the L1 term is the mean over depth slices of the
/// per-slice mean (rank 3) or over images (rank 2).
Tensor reconstruction_loss(const Tensor& x, const Tensor& x_hat, int rank, Real l1_weight = Real(1));

class Autoencoder {
 public:
  Autoencoder(AutoencoderConfig cfg, std::uint64_t seed);

  const AutoencoderConfig& config() const { return cfg_; }
  Codebook& codebook() { return codebook_; }
  const Codebook& codebook() const { return codebook_; }

  /// [B, 1, spatial...] -> [B, D, latent spatial...]
  Tensor encode(const Tensor& x) const;
  /// [B, D, latent spatial...] -> [B, 1, spatial...]
  Tensor decode(const Tensor& e) const;

  struct Step {
    Tensor reconstruction;
    Tensor latent_rows;  // [B·P × D]
    VqLossTerms vq;
    Tensor l1;
    Tensor loss;
    std::vector<TokenId> indices;
  };
  /// Full training forward: encode, quantize (straight-through), decode, loss.
  Step forward(const Tensor& x, bool count_usage);

  /// Frozen-weight inference: one TokenGrid per batch sample.
  std::vector<TokenGrid> tokenize(const Tensor& x) const;
  Tensor decode_tokens(std::span<const TokenGrid> grids) const;

  /// Shape of a batch tensor for this model.
  Shape input_shape(std::size_t batch) const;

  std::vector<Tensor> parameters();
  Checkpoint to_checkpoint(const std::string& stage, std::uint64_t seed) const;
  static Autoencoder from_checkpoint(const Checkpoint& ckpt);

 private:
  struct Layer {
    std::string name;
    Tensor weight;
    Tensor bias;
  };
  struct Norm {
    std::string name;
    Tensor gain;
    Tensor bias;
    std::size_t groups;
  };

  std::vector<std::pair<std::string, Tensor>> named_tensors() const;

  AutoencoderConfig cfg_;
  std::vector<Layer> enc_;
  std::vector<Norm> enc_norm_;
  Layer enc_out_;
  Layer dec_in_;
  std::vector<Layer> dec_;
  std::vector<Norm> dec_norm_;
  Layer dec_out_;
  Codebook codebook_;
};

}  // namespace rad2ct
