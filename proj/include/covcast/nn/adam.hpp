#pragma once

#include "covcast/nn/tensor.hpp"

#include <cmath>
#include <vector>

namespace covcast::nn {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias correction. Moment buffers are created on first use and
/// keep the parameter order given at construction.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      first_.push_back(Buffer::Zero(p.rows(), p.cols()));
      second_.push_back(Buffer::Zero(p.rows(), p.cols()));
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  /// Applies one update from the gradients currently stored on the
  /// parameters; a parameter without a gradient is treated as zero-gradient.
  void step() {
    ++steps_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Tensor& p = params_[k];
      const Buffer g = p.grad_or_zero();
      first_[k] = cfg_.beta1 * first_[k] + (1.0 - cfg_.beta1) * g;
      second_[k] = cfg_.beta2 * second_[k] + (1.0 - cfg_.beta2) * g.cwiseAbs2();
      const auto m_hat = first_[k].array() / c1;
      const auto v_hat = second_[k].array() / c2;
      p.mutable_value().array() -= cfg_.learning_rate * m_hat / (v_hat.sqrt() + cfg_.epsilon);
    }
  }

  long step_count() const { return steps_; }
  const AdamConfig& config() const { return cfg_; }
  void set_learning_rate(double lr) { cfg_.learning_rate = lr; }

 private:
  std::vector<Tensor> params_;
  std::vector<Buffer> first_;
  std::vector<Buffer> second_;
  AdamConfig cfg_;
  long steps_ = 0;
};

}  // namespace covcast::nn
