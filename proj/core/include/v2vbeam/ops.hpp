#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "v2vbeam/tensor.hpp"

namespace v2vbeam {

// Differentiable operations. Every op records a backward rule on the tape;
// gradients accumulate into inputs that require them.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);

// Adds vector v (length = columns) to every row of m.
Tensor add_bias(const Tensor& m, const Tensor& v);
// Scales row i of m by v[i] (v length = rows).
Tensor row_scale(const Tensor& m, const Tensor& v);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& m);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// Exp-normalization along `axis` with max-subtraction; each slice sums to 1.
Tensor softmax(const Tensor& x, int axis);

// Normalizes the last axis of x to zero mean / unit variance per row, then
// applies the per-feature affine (gain, bias).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Normalizes each slice along the FIRST axis (channel) over all remaining
// positions, then applies the per-channel affine. Batch-independent.
Tensor channel_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor concat(const std::vector<Tensor>& tensors, int axis);
Tensor slice(const Tensor& x, int axis, int start, int len);

// out[i] = x[index_map[i]]; the map must be a bijection when gradients flow.
Tensor gather(const Tensor& x, std::shared_ptr<const std::vector<std::int64_t>> index_map,
              std::vector<int> out_shape);

Tensor reshape(const Tensor& x, std::vector<int> shape);

Tensor sum(const Tensor& x);
// Mean over one axis of a 2-D tensor; returns a 1-D tensor.
Tensor mean_axis(const Tensor& m, int axis);

// Mean over the batch of -log softmax(logits)[label], fused log-softmax.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// 2-D convolution over x [C_in,H,W] with kernels w [C_out,C_in,k,k], bias
// [C_out], square kernel of odd size, same-padding k/2.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride);
// Depthwise variant: x [C,H,W], w [C,k,k], bias [C].
Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride);

// Scales channel slice c of x (first axis) by gate[c].
Tensor channel_scale(const Tensor& x, const Tensor& gate);

}  // namespace v2vbeam
