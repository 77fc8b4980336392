#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include <Eigen/Core>

namespace dfq {

// First-order optimizers keyed by slot index. State is kept in double.

class Sgd {
 public:
  Sgd(double lr, double momentum = 0.0, double weight_decay = 0.0)
      : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {}

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  template <typename S>
  void update(std::size_t slot, Eigen::Array<S, Eigen::Dynamic, 1>& param,
              const Eigen::Array<S, Eigen::Dynamic, 1>& grad, bool decay = true) {
    Eigen::ArrayXd g = grad.template cast<double>();
    if (decay && weight_decay_ != 0.0) g += weight_decay_ * param.template cast<double>();
    if (momentum_ != 0.0) {
      Eigen::ArrayXd& v = state(slot, g.size());
      v = momentum_ * v + g;
      g = v;
    }
    param = (param.template cast<double>() - lr_ * g).template cast<S>();
  }

 private:
  Eigen::ArrayXd& state(std::size_t slot, Eigen::Index n) {
    if (velocity_.size() <= slot) velocity_.resize(slot + 1);
    if (velocity_[slot].size() != n) velocity_[slot] = Eigen::ArrayXd::Zero(n);
    return velocity_[slot];
  }

  double lr_;
  double momentum_;
  double weight_decay_;
  std::vector<Eigen::ArrayXd> velocity_;
};

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // Advance the shared time step once per iteration, before the updates.
  void next_step() { ++t_; }
  void set_lr(double lr) { lr_ = lr; }

  template <typename S>
  void update(std::size_t slot, Eigen::Array<S, Eigen::Dynamic, 1>& param,
              const Eigen::Array<S, Eigen::Dynamic, 1>& grad) {
    if (m_.size() <= slot) {
      m_.resize(slot + 1);
      v_.resize(slot + 1);
    }
    const Eigen::ArrayXd g = grad.template cast<double>();
    if (m_[slot].size() != g.size()) {
      m_[slot] = Eigen::ArrayXd::Zero(g.size());
      v_[slot] = Eigen::ArrayXd::Zero(g.size());
    }
    m_[slot] = beta1_ * m_[slot] + (1.0 - beta1_) * g;
    v_[slot] = beta2_ * v_[slot] + (1.0 - beta2_) * g.square();
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const Eigen::ArrayXd step = lr_ * (m_[slot] / c1) / ((v_[slot] / c2).sqrt() + eps_);
    param = (param.template cast<double>() - step).template cast<S>();
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Eigen::ArrayXd> m_, v_;
};

}  // namespace dfq
