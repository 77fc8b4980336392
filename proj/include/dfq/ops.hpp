#pragma once

#include <span>

#include "dfq/tensor.hpp"

// Differentiable kernels. Every function records itself on `tape` when one of
// its inputs requires grad, and is otherwise a plain forward computation.
// Reductions accumulate in double regardless of the storage scalar.
namespace dfq {

struct Conv2dOptions {
  Index stride = 1;
  Index padding = 0;
};

struct Pool2dOptions {
  Index kernel = 2;
  Index stride = 2;
};

// Elementwise, identical shapes.
template <typename S> Tensor<S> add(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> sub(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> mul(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> scale(Tape<S>& tape, const Tensor<S>& a, S factor);
template <typename S> Tensor<S> add_scalar(Tape<S>& tape, const Tensor<S>& a, S value);
// a^exponent; a must be positive unless exponent is a positive integer.
template <typename S> Tensor<S> pow(Tape<S>& tape, const Tensor<S>& a, S exponent);
// ReLU with subgradient 0 at 0.
template <typename S> Tensor<S> relu(Tape<S>& tape, const Tensor<S>& a);
// |a| with subgradient 0 at 0.
template <typename S> Tensor<S> abs(Tape<S>& tape, const Tensor<S>& a);

template <typename S> Tensor<S> sum(Tape<S>& tape, const Tensor<S>& a);
template <typename S> Tensor<S> mean(Tape<S>& tape, const Tensor<S>& a);
template <typename S> Tensor<S> reshape(Tape<S>& tape, const Tensor<S>& a, Shape shape);

// [m,k] x [k,n] -> [m,n]
template <typename S> Tensor<S> matmul(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b);
// x[N,in], weight[out,in], bias[out] (may be undefined) -> [N,out]
template <typename S>
Tensor<S> linear(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias);
// x[N,C,H,W], weight[O,C,KH,KW], bias[O] (may be undefined) -> [N,O,OH,OW]
template <typename S>
Tensor<S> conv2d(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias,
                 Conv2dOptions opts = {});
template <typename S> Tensor<S> avg_pool2d(Tape<S>& tape, const Tensor<S>& x, Pool2dOptions opts);
template <typename S> Tensor<S> max_pool2d(Tape<S>& tape, const Tensor<S>& x, Pool2dOptions opts);

// Per-channel reductions over every axis except axis 1 of x[N,C,...] -> [C].
template <typename S> Tensor<S> channel_mean(Tape<S>& tape, const Tensor<S>& x);
// Biased (population) standard deviation.
template <typename S> Tensor<S> channel_std(Tape<S>& tape, const Tensor<S>& x);
// y = (x - shift[c]) * scale[c] + bias[c] over x[N,C,...].
template <typename S>
Tensor<S> channel_affine(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& shift, const Tensor<S>& scale,
                         const Tensor<S>& bias);

// Row-wise softmax of logits[N,K].
template <typename S> Tensor<S> softmax(Tape<S>& tape, const Tensor<S>& logits);
// logits[N,K] -> [N], element n = logits[n, labels[n]].
template <typename S> Tensor<S> gather(Tape<S>& tape, const Tensor<S>& logits, std::span<const int> labels);
// Mean over the batch of -log softmax(logits)[label].
template <typename S>
Tensor<S> cross_entropy(Tape<S>& tape, const Tensor<S>& logits, std::span<const int> labels);
// Mean over the batch of -sum_k target[n,k] * log softmax(logits)[n,k].
template <typename S>
Tensor<S> soft_cross_entropy(Tape<S>& tape, const Tensor<S>& logits, const Tensor<S>& target);

// Plain (non-recorded) helpers.
template <typename S> Array<S> softmax_rows(const Array<S>& logits, Index rows, Index cols);
void check_labels(std::span<const int> labels, Index batch, Index classes);

}  // namespace dfq
