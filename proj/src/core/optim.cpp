#include "core/optim.hpp"

#include <cmath>

#include "core/errors.hpp"

namespace latdyn {

AdamState AdamState::init(const std::vector<Tensor*>& params) {
  AdamState s;
  s.m.reserve(params.size());
  s.v.reserve(params.size());
  for (const Tensor* p : params) {
    s.m.push_back(Tensor::zeros(p->shape()));
    s.v.push_back(Tensor::zeros(p->shape()));
  }
  return s;
}

void AdamState::apply(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
                      double lr) {
  if (params.size() != grads.size() || params.size() != m.size())
    throw ShapeError("adam: parameter/gradient/state count mismatch");
  ++step;
  const double bc1 = 1.0 - std::pow(beta1, double(step));
  const double bc2 = 1.0 - std::pow(beta2, double(step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = grads[i];
    if (!p.same_shape(g)) throw ShapeError("adam: gradient shape mismatch");
    for (std::size_t j = 0; j < p.numel(); ++j) {
      const double gj = g.vec()[j];
      double& mj = m[i].vec()[j];
      double& vj = v[i].vec()[j];
      mj = beta1 * mj + (1.0 - beta1) * gj;
      vj = beta2 * vj + (1.0 - beta2) * gj * gj;
      p.vec()[j] -= lr * (mj / bc1) / (std::sqrt(vj / bc2) + eps);
    }
  }
}

void sgd_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads, double lr) {
  if (params.size() != grads.size()) throw ShapeError("sgd: parameter/gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    for (std::size_t j = 0; j < p.numel(); ++j) p.vec()[j] -= lr * grads[i].vec()[j];
  }
}

double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor& g : grads)
    for (double v : g.vec()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (Tensor& g : grads)
      for (double& v : g.vec()) v *= scale;
  }
  return norm;
}

}  // namespace latdyn
