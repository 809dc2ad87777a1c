#include "v2vbeam/adam.hpp"

#include <cmath>

namespace v2vbeam {

AdamOptimizer::AdamOptimizer(std::vector<Tensor> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void adam_step(Tensor& param, const std::vector<double>& grad, std::vector<double>& m,
               std::vector<double>& v, std::int64_t t, const AdamConfig& cfg) {
  const std::size_t n = param.numel();
  if (grad.size() != n || m.size() != n || v.size() != n) {
    throw DimensionError("adam_step: parameter/gradient/state size mismatch for shape " +
                         shape_to_string(param.shape()));
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  double* theta = param.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grad[i] + cfg.weight_decay * theta[i];
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
    const double m_hat = m[i] / bc1;
    const double v_hat = v[i] / bc2;
    theta[i] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
  }
}

void AdamOptimizer::step() {
  ++t_;
  static const std::vector<double> kEmpty;
  for (std::size_t p = 0; p < params_.size(); ++p) {
    Tensor& param = params_[p];
    if (param.has_grad()) {
      adam_step(param, param.node()->grad, m_[p], v_[p], t_, cfg_);
    } else {
      std::vector<double> zeros(param.numel(), 0.0);
      adam_step(param, zeros, m_[p], v_[p], t_, cfg_);
    }
  }
}

void AdamOptimizer::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace v2vbeam
