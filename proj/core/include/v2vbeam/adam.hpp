#pragma once

#include <cstdint>
#include <vector>

#include "v2vbeam/tensor.hpp"

namespace v2vbeam {

struct AdamConfig {
  double learning_rate = 0.001;
  double weight_decay = 1e-4;  // classic L2, added to the gradient
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Bias-corrected Adam over a fixed parameter list. Moments are owned here and
// start at zero; t increments once per step().
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Tensor> params, AdamConfig cfg);

  // One update from the parameters' current gradients. Parameters without a
  // populated gradient are treated as zero-gradient.
  void step();
  void zero_grad();

  std::int64_t step_count() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::int64_t t_ = 0;
  AdamConfig cfg_;
};

// Single-tensor update rule; state vectors m and v must match the parameter
// shape and t is the 1-based step index. Exposed for direct testing.
void adam_step(Tensor& param, const std::vector<double>& grad, std::vector<double>& m,
               std::vector<double>& v, std::int64_t t, const AdamConfig& cfg);

}  // namespace v2vbeam
