#pragma once

#include <cstddef>
#include <vector>

#include "effecg/tensor.hpp"

namespace effecg {

// Elementwise. Binary ops require identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double c);
Tensor square(const Tensor& x);
Tensor log(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
/// x * sigmoid(x)
Tensor swish(const Tensor& x);
/// Values outside [lo, hi] are pinned and receive zero gradient.
Tensor clamp(const Tensor& x, double lo, double hi);

// Reductions to a scalar.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Temporal mean: [C x N] -> [C], [B x C x N] -> [B x C]. Rejects N == 0.
Tensor global_avg_pool(const Tensor& x);

/// Numerically stable softmax along `axis` (max subtraction per slice).
Tensor softmax(const Tensor& x, std::size_t axis);

/// [M x K] x [K x P] -> [M x P]
Tensor matmul(const Tensor& a, const Tensor& b);
/// [B x M x K] x [B x K x P] -> [B x M x P]
Tensor batched_matmul(const Tensor& a, const Tensor& b);
/// Swap the last two axes of a rank-2 or rank-3 tensor.
Tensor transpose(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);

/// Add b[dim(axis)] broadcast over every other axis.
Tensor add_bias(const Tensor& x, const Tensor& b, std::size_t axis);
/// Multiply x by s, where s has x's shape minus its last axis.
Tensor channel_scale(const Tensor& x, const Tensor& s);
/// Row r of the result is row r of `a` when take_a[r], else of `b`.
Tensor row_select(const std::vector<bool>& take_a, const Tensor& a, const Tensor& b);
/// Rows of a [V x D] table; the gradient lands only on the looked-up rows.
Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& rows);

enum class Padding { same, valid };

struct ConvGeometry {
  std::size_t pad_left = 0;
  std::size_t pad_right = 0;
  std::size_t out_length = 0;
};

/// "same": output length ceil(N / stride), total padding split evenly with the
/// odd sample on the right. "valid": no padding.
ConvGeometry conv_geometry(std::size_t length, std::size_t kernel, std::size_t stride,
                           Padding padding);

/// Cross-correlation (no kernel flip). input [C_in x N] or [B x C_in x N],
/// kernels [C_out x C_in x K].
Tensor conv1d(const Tensor& input, const Tensor& kernels, std::size_t stride, Padding padding);
/// One kernel per channel. input [C x N] or [B x C x N], kernels [C x K].
Tensor depthwise_conv1d(const Tensor& input, const Tensor& kernels, std::size_t stride,
                        Padding padding);

/// Batch statistics over the batch and time axes of [B x C x N] (or over
/// rows of [B x C]); biased variance. Batch mean/variance are written out for
/// running-statistic updates.
Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                        std::vector<double>* batch_mean, std::vector<double>* batch_var);
Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       const std::vector<double>& running_mean,
                       const std::vector<double>& running_var, double eps);

}  // namespace effecg
