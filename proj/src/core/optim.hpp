#pragma once

#include <vector>

#include "core/tensor.hpp"

namespace latdyn {

// Bias-corrected Adam with per-leaf moment accumulators.
struct AdamState {
  std::vector<Tensor> m, v;
  long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState init(const std::vector<Tensor*>& params);
  void apply(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads, double lr);
};

void sgd_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads, double lr);

// Global-norm gradient clipping; returns the pre-clip norm.
double clip_global_norm(std::vector<Tensor>& grads, double max_norm);

}  // namespace latdyn
