#pragma once

#include <utility>
#include <vector>

#include "gradleak/tensor.hpp"

namespace gradleak {

// Elementwise ops broadcast NumPy-style (trailing axes aligned). Each op
// records a backward rule on the active tape when any input requires grad;
// gradients accumulate with sum semantics on tensor reuse.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double c);
Tensor mul(const Tensor& a, double c);
inline Tensor neg(const Tensor& a) { return mul(a, -1.0); }

// Batched matrix product: [..., M, K] x [..., K, N] -> [..., M, N] with
// leading batch dims broadcast. Rank >= 2 on both sides.
Tensor matmul(const Tensor& a, const Tensor& b);

// Axis permutation; empty perm swaps the last two axes.
Tensor transpose(const Tensor& x, std::vector<int> perm = {});
Tensor reshape(const Tensor& x, Shape shape);
// Half-open [start, stop) per axis; starts/stops must cover every axis.
Tensor slice(const Tensor& x, const std::vector<int64_t>& starts,
             const std::vector<int64_t>& stops);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor broadcast_to(const Tensor& x, const Shape& shape);

// Reductions; empty axes reduce everything. Population variance.
Tensor sum(const Tensor& x, const std::vector<int>& axes = {}, bool keepdims = false);
Tensor mean(const Tensor& x, const std::vector<int>& axes = {}, bool keepdims = false);
Tensor variance(const Tensor& x, const std::vector<int>& axes = {}, bool keepdims = false);
Tensor max(const Tensor& x, const std::vector<int>& axes = {}, bool keepdims = false);

// Euclidean norm of all elements. Flat (zero) gradient below norm 1e-12 so
// residuals at the rounding floor do not emit unit-norm gradients.
Tensor l2_norm(const Tensor& x);

Tensor sqrt(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x); // tanh approximation, exact analytic derivative

Tensor softmax(const Tensor& x, int axis);
// Normalizes along `axis` to zero mean / unit variance; no affine part.
Tensor layer_norm(const Tensor& x, int axis, double eps);

// x: [N,H,W,C], w: [kh,kw,Cin,Cout], symmetric zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding);

// Per-channel batch statistics of an NHWC tensor over (N,H,W):
// {mean[C], population variance[C]}, both differentiable.
std::pair<Tensor, Tensor> batch_stats(const Tensor& x);

// [N,H,W,C] -> [N, (H/P)*(W/P), P*P*C]; patches row-major, pixels (py,px,c).
Tensor extract_patches(const Tensor& x, int64_t patch);

// Nearest-neighbor resize of an NHWC tensor; gradient passes through the
// index map.
Tensor resize_nearest(const Tensor& x, int64_t out_h, int64_t out_w);

// Mean over the batch of -log softmax(logits)[label]; labels in [0,K).
Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& labels);

// Indices that sort the flattened values ascending (stable). Not recorded on
// any tape; index output carries no gradient.
std::vector<int64_t> argsort(const Tensor& x);

} // namespace gradleak
