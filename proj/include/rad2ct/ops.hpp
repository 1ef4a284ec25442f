#pragma once

// Differentiable tensor operations. All inputs are dense row-major tensors; image
// tensors are channels-first: [batch, channels, height, width] for rank 2 and
// [batch, channels, depth, height, width] for rank 3.

#include <cstdint>
#include <random>
#include <span>

#include "rad2ct/tensor.hpp"

namespace rad2ct {

using TokenId = std::int32_t;

Tensor matmul(const Tensor& a, const Tensor& b);
/// x[M×K] · weight[K×P] + bias[P].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, Real factor);
/// Adds bias[C] along the last axis of x.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor reshape(const Tensor& x, Shape shape);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// [S×P] -> [S], mean of every row.
Tensor row_mean(const Tensor& x);

Tensor silu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor square(const Tensor& x);

/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);

/// Mean over rows of -log softmax(logits[t])[targets[t]]; logits is [T×V].
Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets);

/// Normalizes over the last axis, then applies gain/bias of that extent.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps = Real(1e-5));

/// x is [B, C, ...]; statistics over (C/groups channels × spatial) per sample and group.
Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gain, const Tensor& bias,
                  Real eps = Real(1e-5));

/// Cross-correlation. input [B, Cin, spatial...], kernel [Cout, Cin, k...], optional bias [Cout].
/// rank selects 2D or 3D spatial layout.
Tensor conv(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
            std::size_t padding, int rank);
/// Adjoint of conv. input [B, Cin, spatial...], kernel [Cin, Cout, k...]; output extents
/// (in - 1)·stride - 2·padding + k.
Tensor conv_transpose(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
                      std::size_t padding, int rank);

/// [B, C, S1, S2, ...] -> [B·S, C] (one row per spatial position, raster order).
Tensor channels_last(const Tensor& x);
/// Inverse of channels_last; `shape` is the channels-first target shape.
Tensor channels_first(const Tensor& rows, const Shape& shape);

/// Rows of table[V×C] selected by indices -> [n×C].
Tensor embedding(const Tensor& table, std::span<const TokenId> indices);

/// Multi-head causal self-attention. qkv is [batch·seq × 3C] holding the query, key
/// and value projections side by side; returns [batch·seq × C].
Tensor causal_attention(const Tensor& qkv, std::size_t batch, std::size_t seq, std::size_t heads);

/// Forward value of x, no gradient flows back.
Tensor stop_gradient(const Tensor& x);
/// Forward value of `quantized`, gradient passed unchanged to `latent`.
Tensor straight_through(const Tensor& latent, const Tensor& quantized);

Tensor mse_loss(const Tensor& a, const Tensor& b);
/// Mean over `slices` equal chunks of the per-chunk mean |a - b|.
Tensor slice_l1_loss(const Tensor& a, const Tensor& b, std::size_t slices);

/// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& x, Real p, std::mt19937_64& rng);

}  // namespace rad2ct
