#pragma once

#include <span>
#include <vector>

#include "dfq/model.hpp"
#include "dfq/tensor.hpp"

namespace dfq {

// Classification losses over logits[N,K] and hard labels. All return a
// one-element tensor holding the batch mean.

// -log softmax(logits)[y]; d/d(target logit) = (p_y - 1) / N.
template <typename S> Tensor<S> ce_loss(Tape<S>& tape, const Tensor<S>& logits, std::span<const int> labels);
// Negated target logit; d/d(target logit) = -1 / N at every point.
template <typename S> Tensor<S> abs_loss(Tape<S>& tape, const Tensor<S>& logits, std::span<const int> labels);
// Mean absolute / squared error between softmax probabilities and one-hot targets,
// averaged over all N*K entries.
template <typename S> Tensor<S> mae_loss(Tape<S>& tape, const Tensor<S>& logits, std::span<const int> labels);
template <typename S> Tensor<S> mse_loss(Tape<S>& tape, const Tensor<S>& logits, std::span<const int> labels);

// Sum over BN layers of ||batch_mean - mean||^2 + ||batch_std - std||^2.
template <typename S>
Tensor<S> bns_loss(Tape<S>& tape, const std::vector<BatchStats<S>>& batch, const std::vector<BNStats>& stored);

// Cross-entropy against teacher probabilities softmax(teacher / T), computed on
// student logits / T and scaled by T^2.
template <typename S>
Tensor<S> distillation_loss(Tape<S>& tape, const Tensor<S>& student_logits, const Tensor<S>& teacher_logits,
                            S temperature);

template <typename S> Tensor<S> one_hot(std::span<const int> labels, Index classes);

}  // namespace dfq
