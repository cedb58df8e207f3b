#pragma once

// Test-only oracles: dense symmetric eigenvalues via Jacobi rotations,
// singular values through the Gram matrix, and finite-difference parameter
// gradients. Deliberately independent of the reverse-mode engine.

#include <algorithm>
#include <cmath>
#include <vector>

#include "core/structured.hpp"
#include "core/tensor.hpp"

namespace latdyn::testing {

inline std::vector<double> jacobi_eigenvalues(Tensor a) {
  const std::size_t n = a.dim(0);
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += a.at(i, j) * a.at(i, j);
    if (off < 1e-26) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a.at(p, q)) < 1e-30) continue;
        const double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * a.at(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a.at(k, p), akq = a.at(k, q);
          a.at(k, p) = c * akp - s * akq;
          a.at(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a.at(p, k), aqk = a.at(q, k);
          a.at(p, k) = c * apk - s * aqk;
          a.at(q, k) = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a.at(i, i);
  std::sort(ev.begin(), ev.end(), std::greater<>());
  return ev;
}

// Descending singular values via one-sided Jacobi (columns orthogonalized in
// place), which keeps tiny singular values at machine accuracy instead of the
// sqrt(eps) floor of the Gram-matrix route.
inline std::vector<double> singular_values(Tensor m) {
  if (m.dim(0) < m.dim(1)) {
    Tensor t = Tensor::zeros({m.dim(1), m.dim(0)});
    for (std::size_t i = 0; i < m.dim(0); ++i)
      for (std::size_t j = 0; j < m.dim(1); ++j) t.at(j, i) = m.at(i, j);
    m = std::move(t);
  }
  const std::size_t r = m.dim(0), c = m.dim(1);
  for (int sweep = 0; sweep < 60; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < c; ++p) {
      for (std::size_t q = p + 1; q < c; ++q) {
        double app = 0.0, aqq = 0.0, apq = 0.0;
        for (std::size_t k = 0; k < r; ++k) {
          app += m.at(k, p) * m.at(k, p);
          aqq += m.at(k, q) * m.at(k, q);
          apq += m.at(k, p) * m.at(k, q);
        }
        off = std::max(off, std::abs(apq));
        if (std::abs(apq) < 1e-300) continue;
        const double tau = (aqq - app) / (2.0 * apq);
        const double t = (tau >= 0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        const double cs = 1.0 / std::sqrt(1.0 + t * t);
        const double sn = cs * t;
        for (std::size_t k = 0; k < r; ++k) {
          const double kp = m.at(k, p), kq = m.at(k, q);
          m.at(k, p) = cs * kp - sn * kq;
          m.at(k, q) = sn * kp + cs * kq;
        }
      }
    }
    if (off < 1e-18) break;
  }
  std::vector<double> sv(c);
  for (std::size_t j = 0; j < c; ++j) {
    double acc = 0.0;
    for (std::size_t k = 0; k < r; ++k) acc += m.at(k, j) * m.at(k, j);
    sv[j] = std::sqrt(acc);
  }
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

inline void randomize_params(DynamicsModel& m, RngStream& rng, double scale = 0.6) {
  for (auto& p : m.params())
    for (double& v : p.tensor->vec()) v = rng.uniform(-scale, scale);
}

inline Tensor random_latent(const DynamicsModel& m, RngStream& rng, double scale = 0.8) {
  Tensor z = Tensor::zeros({std::size_t(m.arch.z_dim)});
  for (double& v : z.vec()) v = rng.uniform(-scale, scale);
  return z;
}

// Well-conditioned random states and labels for gradient checks: moderate
// magnitudes keep tanh away from deep saturation so finite differences at
// h=1e-5 resolve the derivative.
inline TaskBatch random_batch(const DynamicsModel& m, RngStream& rng, std::size_t rows,
                              double scale = 1.5) {
  TaskBatch b{Tensor::zeros({rows, m.dim()}), Tensor::zeros({rows, m.dim()})};
  for (double& v : b.states.vec()) v = rng.uniform(-scale, scale);
  for (double& v : b.labels.vec()) v = rng.uniform(-scale, scale);
  return b;
}

// Central differences straddle the clamp kink when a raw MR coefficient sits
// at the origin; push those coefficients away before checking.
inline void avoid_clamp_kinks(DynamicsModel& m, const Tensor& z, double margin) {
  auto fix = [&](ModulatedMLP& net) {
    if (net.kind != ModKind::MultiRank) return;
    const auto dims = net.shape.dims();
    std::size_t off = 0;
    for (int l = 0; l < net.shape.hidden; ++l) {
      for (int r = 0; r < net.rank; ++r) {
        double raw = net.hyper_b.at(off + r);
        for (int i = 0; i < net.z_dim; ++i) raw += z.at(i) * net.hyper_W.at(i, off + r);
        if (std::abs(raw) < margin) net.hyper_b.at(off + r) += (raw >= 0 ? margin : -margin);
      }
      off += std::size_t(net.rank) + std::size_t(dims[l + 1]);
    }
  };
  fix(m.e_qp);
  if (m.generic) fix(m.e_s);
}

// Max relative error between reverse-mode parameter gradients (z included)
// and central finite differences of the loss over every component. The
// per-component denominator is floored at 1e-4 of the gradient's sup norm:
// central differences resolve a component only down to eps*|loss|/h, so
// components far below the gradient scale are compared against that floor
// rather than against themselves.
inline double loss_param_grad_error(DynamicsModel& model, const Tensor& z, const TaskBatch& batch,
                                    double h) {
  std::vector<Tensor*> params;
  for (auto& p : model.params()) params.push_back(p.tensor);

  auto eval_loss = [&]() { return model_loss(model, z, batch.states, batch.labels); };

  Graph g;
  DynamicsModelNodes nodes = insert_model_leaves(g, model, true);
  Value zv;
  std::vector<Value> leaves = model_leaf_list(model, nodes);
  Tensor z_local = z;
  if (model.kind != ModKind::None) {
    zv = g.leaf(z_local, true);
    leaves.push_back(zv);
  }
  Value x = g.leaf(batch.states, true);
  LossBuild lb = model_loss_nodes(g, model, nodes, zv, x, g.constant(batch.labels));
  auto grads = g.gradient(lb.loss, leaves, false);

  double grad_scale = 0.0;
  for (const auto& gv : grads)
    for (double v : gv.tensor().vec()) grad_scale = std::max(grad_scale, std::abs(v));
  const double floor = std::max(1e-12, 1e-4 * grad_scale);

  double max_rel = 0.0;
  auto check_tensor = [&](Tensor* t, const Tensor& grad) {
    for (std::size_t i = 0; i < t->numel(); ++i) {
      const double saved = t->vec()[i];
      t->vec()[i] = saved + h;
      const double fp = eval_loss();
      t->vec()[i] = saved - h;
      const double fm = eval_loss();
      t->vec()[i] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = grad.vec()[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
    }
  };
  for (std::size_t pi = 0; pi < params.size(); ++pi)
    check_tensor(params[pi], grads[pi].tensor());
  if (model.kind != ModKind::None) {
    Tensor z_probe = z;
    const Tensor& gz = grads.back().tensor();
    for (std::size_t i = 0; i < z_probe.numel(); ++i) {
      const double saved = z_probe.vec()[i];
      z_probe.vec()[i] = saved + h;
      const double fp = model_loss(model, z_probe, batch.states, batch.labels);
      z_probe.vec()[i] = saved - h;
      const double fm = model_loss(model, z_probe, batch.states, batch.labels);
      z_probe.vec()[i] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double denom = std::max({std::abs(gz.vec()[i]), std::abs(numeric), floor});
      max_rel = std::max(max_rel, std::abs(gz.vec()[i] - numeric) / denom);
    }
  }
  return max_rel;
}

}  // namespace latdyn::testing
