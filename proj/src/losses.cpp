#include "dfq/losses.hpp"

#include "dfq/ops.hpp"

namespace dfq {

template <typename S>
Tensor<S> one_hot(std::span<const int> labels, Index classes) {
  const Index n = static_cast<Index>(labels.size());
  check_labels(labels, n, classes);
  Array<S> data = Array<S>::Zero(n * classes);
  for (Index r = 0; r < n; ++r) data[r * classes + labels[static_cast<std::size_t>(r)]] = S(1);
  return Tensor<S>({n, classes}, std::move(data));
}

template <typename S>
Tensor<S> ce_loss(Tape<S>& tape, const Tensor<S>& logits, std::span<const int> labels) {
  return cross_entropy(tape, logits, labels);
}

template <typename S>
Tensor<S> abs_loss(Tape<S>& tape, const Tensor<S>& logits, std::span<const int> labels) {
  return scale(tape, mean(tape, gather(tape, logits, labels)), S(-1));
}

template <typename S>
Tensor<S> mae_loss(Tape<S>& tape, const Tensor<S>& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw ShapeError("mae_loss: logits must be [N,K], got " + shape_string(logits.shape()));
  Tensor<S> diff = sub(tape, softmax(tape, logits), one_hot<S>(labels, logits.dim(1)));
  return mean(tape, abs(tape, diff));
}

template <typename S>
Tensor<S> mse_loss(Tape<S>& tape, const Tensor<S>& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw ShapeError("mse_loss: logits must be [N,K], got " + shape_string(logits.shape()));
  Tensor<S> diff = sub(tape, softmax(tape, logits), one_hot<S>(labels, logits.dim(1)));
  return mean(tape, mul(tape, diff, diff));
}

template <typename S>
Tensor<S> bns_loss(Tape<S>& tape, const std::vector<BatchStats<S>>& batch, const std::vector<BNStats>& stored) {
  if (batch.size() != stored.size()) {
    throw ContractError("bns_loss: " + std::to_string(batch.size()) + " batch statistics vs " +
                        std::to_string(stored.size()) + " stored BN layers");
  }
  if (batch.empty()) throw ContractError("bns_loss: no BN layers");
  Tensor<S> total;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Index c = stored[i].mean.size();
    Tensor<S> dm = sub(tape, batch[i].mean, Tensor<S>(Shape{c}, stored[i].mean.template cast<S>()));
    Tensor<S> ds = sub(tape, batch[i].std, Tensor<S>(Shape{c}, stored[i].std.template cast<S>()));
    Tensor<S> term = add(tape, sum(tape, mul(tape, dm, dm)), sum(tape, mul(tape, ds, ds)));
    total = total.defined() ? add(tape, total, term) : term;
  }
  return total;
}

template <typename S>
Tensor<S> distillation_loss(Tape<S>& tape, const Tensor<S>& student_logits, const Tensor<S>& teacher_logits,
                            S temperature) {
  if (student_logits.shape() != teacher_logits.shape()) {
    throw ShapeError("distillation_loss: shape mismatch " + shape_string(student_logits.shape()) + " vs " +
                     shape_string(teacher_logits.shape()));
  }
  const Index n = teacher_logits.dim(0), k = teacher_logits.dim(1);
  Array<S> scaled_teacher = teacher_logits.data() / temperature;
  Tensor<S> target({n, k}, softmax_rows(scaled_teacher, n, k));
  Tensor<S> soft = soft_cross_entropy(tape, scale(tape, student_logits, S(1) / temperature), target);
  return scale(tape, soft, temperature * temperature);
}

#define DFQ_INSTANTIATE_LOSSES(S)                                                                      \
  template Tensor<S> one_hot<S>(std::span<const int>, Index);                                          \
  template Tensor<S> ce_loss(Tape<S>&, const Tensor<S>&, std::span<const int>);                        \
  template Tensor<S> abs_loss(Tape<S>&, const Tensor<S>&, std::span<const int>);                       \
  template Tensor<S> mae_loss(Tape<S>&, const Tensor<S>&, std::span<const int>);                       \
  template Tensor<S> mse_loss(Tape<S>&, const Tensor<S>&, std::span<const int>);                       \
  template Tensor<S> bns_loss(Tape<S>&, const std::vector<BatchStats<S>>&, const std::vector<BNStats>&); \
  template Tensor<S> distillation_loss(Tape<S>&, const Tensor<S>&, const Tensor<S>&, S);

DFQ_INSTANTIATE_LOSSES(float)
DFQ_INSTANTIATE_LOSSES(double)

#undef DFQ_INSTANTIATE_LOSSES

}  // namespace dfq
