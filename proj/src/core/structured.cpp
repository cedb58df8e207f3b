#include "core/structured.hpp"

#include <cmath>

#include "core/errors.hpp"

namespace latdyn {

DynamicsModel DynamicsModel::make(const SystemSpec& spec, const ArchConfig& arch, ModKind kind,
                                  RngStream rng) {
  DynamicsModel m;
  m.generic = spec.generic();
  m.n_q = spec.n_q();
  m.n_s = spec.n_s();
  m.arch = arch;
  m.kind = kind;
  MLPShape qp_shape{int(2 * m.n_q), arch.width, arch.depth, 1};
  m.e_qp = ModulatedMLP::make(qp_shape, kind, arch.rank, arch.z_dim, rng.derive("e_qp"),
                              arch.hyper_gain, arch.init_scale);
  if (m.generic) {
    MLPShape s_shape{int(m.n_s), arch.width, arch.depth, 1};
    m.e_s = ModulatedMLP::make(s_shape, kind, arch.rank, arch.z_dim, rng.derive("e_s"),
                               arch.hyper_gain, arch.init_scale);
    const std::size_t dim = m.dim();
    RngStream gr = rng.derive("generic");
    m.lambda_tilde = Tensor::zeros({std::size_t(arch.d1) * dim, dim});
    for (double& v : m.lambda_tilde.vec()) v = gr.uniform(-0.5, 0.5);
    m.d_tilde = Tensor::zeros({std::size_t(arch.d1), std::size_t(arch.d2)});
    for (double& v : m.d_tilde.vec()) v = gr.uniform(-0.5, 0.5);
    if (kind != ModKind::None) {
      // Same fan-in init as the MLP hypernetworks; zero latents keep the
      // friction factor at its base value at step 0.
      const double bound = arch.hyper_gain / std::sqrt(static_cast<double>(arch.z_dim));
      m.hyperD_W = Tensor::zeros({std::size_t(arch.z_dim), std::size_t(arch.d1 * arch.d2)});
      for (double& v : m.hyperD_W.vec()) v = gr.uniform(-bound, bound);
      m.hyperD_b = Tensor::zeros({std::size_t(arch.d1 * arch.d2)});
    }
  }
  return m;
}

std::vector<ParamRef> DynamicsModel::params() {
  std::vector<ParamRef> out = mlp_params(e_qp, "e_qp");
  if (generic) {
    auto es = mlp_params(e_s, "e_s");
    out.insert(out.end(), es.begin(), es.end());
    out.push_back({"lambda_tilde", &lambda_tilde});
    out.push_back({"d_tilde", &d_tilde});
    if (kind != ModKind::None) {
      out.push_back({"hyperD_W", &hyperD_W});
      out.push_back({"hyperD_b", &hyperD_b});
    }
  }
  return out;
}

std::vector<const Tensor*> DynamicsModel::params_const() const {
  auto& self = const_cast<DynamicsModel&>(*this);
  std::vector<const Tensor*> out;
  for (const auto& p : self.params()) out.push_back(p.tensor);
  return out;
}

DynamicsModelNodes insert_model_leaves(Graph& g, const DynamicsModel& m, bool param_grad) {
  DynamicsModelNodes n;
  n.e_qp = insert_mlp_leaves(g, m.e_qp, param_grad);
  if (m.generic) {
    n.e_s = insert_mlp_leaves(g, m.e_s, param_grad);
    n.lambda = g.leaf(m.lambda_tilde, param_grad);
    n.d_tilde = g.leaf(m.d_tilde, param_grad);
    if (m.kind != ModKind::None) {
      n.hyperD_W = g.leaf(m.hyperD_W, param_grad);
      n.hyperD_b = g.leaf(m.hyperD_b, param_grad);
    }
  }
  return n;
}

std::vector<Value> model_leaf_list(const DynamicsModel& m, const DynamicsModelNodes& nodes) {
  std::vector<Value> vs;
  // Same ordering as mlp_params / DynamicsModel::params so gradients line up
  // with parameter references index by index.
  auto push_mlp = [&](const MLPNodes& mn, const ModulatedMLP& mm) {
    for (std::size_t l = 0; l < mn.W.size(); ++l) {
      vs.push_back(mn.W[l]);
      vs.push_back(mn.b[l]);
    }
    vs.push_back(mn.Wo);
    vs.push_back(mn.bo);
    if (mm.kind != ModKind::None) {
      vs.push_back(mn.hyper_W);
      vs.push_back(mn.hyper_b);
    }
    for (std::size_t l = 0; l < mn.U.size(); ++l) {
      vs.push_back(mn.U[l]);
      vs.push_back(mn.V[l]);
    }
  };
  push_mlp(nodes.e_qp, m.e_qp);
  if (m.generic) {
    push_mlp(nodes.e_s, m.e_s);
    vs.push_back(nodes.lambda);
    vs.push_back(nodes.d_tilde);
    if (m.kind != ModKind::None) {
      vs.push_back(nodes.hyperD_W);
      vs.push_back(nodes.hyperD_b);
    }
  }
  return vs;
}

DynamicsModelNodes nodes_from_values(const DynamicsModel& m, const std::vector<Value>& values) {
  DynamicsModelNodes n;
  std::size_t i = 0;
  auto pull_mlp = [&](MLPNodes& mn, const ModulatedMLP& mm) {
    mn.W.resize(mm.W.size());
    mn.b.resize(mm.b.size());
    for (std::size_t l = 0; l < mm.W.size(); ++l) {
      mn.W[l] = values[i++];
      mn.b[l] = values[i++];
    }
    mn.Wo = values[i++];
    mn.bo = values[i++];
    if (mm.kind != ModKind::None) {
      mn.hyper_W = values[i++];
      mn.hyper_b = values[i++];
    }
    mn.U.resize(mm.U.size());
    mn.V.resize(mm.V.size());
    for (std::size_t l = 0; l < mm.U.size(); ++l) {
      mn.U[l] = values[i++];
      mn.V[l] = values[i++];
    }
  };
  pull_mlp(n.e_qp, m.e_qp);
  if (m.generic) {
    pull_mlp(n.e_s, m.e_s);
    n.lambda = values[i++];
    n.d_tilde = values[i++];
    if (m.kind != ModKind::None) {
      n.hyperD_W = values[i++];
      n.hyperD_b = values[i++];
    }
  }
  if (i != values.size()) throw ShapeError("nodes_from_values: value count mismatch");
  return n;
}

FieldBuild model_field_nodes(Graph& g, const DynamicsModel& m, const DynamicsModelNodes& nodes,
                             Value z, Value x, bool reversible_only) {
  const std::int64_t nq = static_cast<std::int64_t>(m.n_q);
  const std::int64_t ns = static_cast<std::int64_t>(m.n_s);
  const std::int64_t dim = 2 * nq + ns;
  if (x.tensor().rank() != 2 || x.tensor().dim(1) != std::size_t(dim))
    throw ShapeError("model field: state batch shape " + x.tensor().shape_str() +
                     " does not match model dimension " + std::to_string(dim));
  const std::int64_t batch = static_cast<std::int64_t>(x.tensor().dim(0));

  FieldBuild fb;
  Value energy;
  if (!m.generic) {
    ModForward fw = modulated_forward(g, m.e_qp, nodes.e_qp, z, x);
    energy = fw.out;
    fb.d_coeffs = std::move(fw.d_coeffs);
  } else {
    ModForward fqp =
        modulated_forward(g, m.e_qp, nodes.e_qp, z, g.slice(x, 0, batch, 0, 2 * nq));
    ModForward fs = modulated_forward(g, m.e_s, nodes.e_s, z, g.slice(x, 0, batch, 2 * nq, ns));
    energy = g.add(fqp.out, fs.out);
    fb.d_coeffs = std::move(fqp.d_coeffs);
    for (auto v : fs.d_coeffs) fb.d_coeffs.push_back(v);
  }

  Value dE = g.gradient(g.sum(energy), {x}, true)[0];  // B x dim per-row gradients

  // Reversible part: canonical L has +/-I on the (q,p) block and zeros on
  // the entropy rows, so L dE = (dE_p, -dE_q, 0).
  Value dEq = g.slice(dE, 0, batch, 0, nq);
  Value dEp = g.slice(dE, 0, batch, nq, nq);
  Value pred;
  if (ns == 0) {
    pred = g.concat({dEp, g.neg(dEq)}, 1);
  } else {
    pred = g.concat({dEp, g.neg(dEq), g.zeros({std::size_t(batch), std::size_t(ns)})}, 1);
  }

  if (m.generic && !reversible_only) {
    // Irreversible part M dS with M = zeta contracted twice against dE,
    // zeta_{ab,uv} = Lambda^m_{ab} D_{mn} Lambda^n_{uv}. Never materialized:
    // a_m = dE Lambda^m^T per row, b_m = entropy-column sum of a_m, and the
    // field adds sum_mn a_m D_{mn} b_n.
    const std::int64_t d1 = m.arch.d1;
    Value d_eff = nodes.d_tilde;
    if (m.kind != ModKind::None) {
      Value zr = g.reshape(z, {1, std::size_t(m.arch.z_dim)});
      Value delta = g.reshape(g.affine(zr, nodes.hyperD_W, nodes.hyperD_b),
                              {std::size_t(d1), std::size_t(m.arch.d2)});
      d_eff = g.add(d_eff, delta);
    }
    Value dmat = m.additive_friction
                     ? g.add(g.matmul(nodes.d_tilde, g.transpose(nodes.d_tilde)), d_eff)
                     : g.matmul(d_eff, g.transpose(d_eff));

    std::vector<Value> a(d1);
    std::vector<Value> b_cols(d1);
    for (std::int64_t mm = 0; mm < d1; ++mm) {
      Value lam_m = g.slice(nodes.lambda, mm * dim, dim, 0, dim);
      Value lam = g.mul_scalar(g.sub(lam_m, g.transpose(lam_m)), 0.5);
      a[mm] = g.matmul(dE, g.transpose(lam));
      b_cols[mm] = g.sum_axis1(g.slice(a[mm], 0, batch, 2 * nq, ns));
    }
    Value bmat = g.concat(b_cols, 1);      // B x d1
    Value coeff = g.matmul(bmat, dmat);    // D symmetric, so no transpose needed
    for (std::int64_t mm = 0; mm < d1; ++mm) {
      pred = g.add(pred, g.scale_rows(a[mm], g.slice(coeff, 0, batch, mm, 1)));
    }
  }

  fb.pred = pred;
  fb.energy = energy;
  fb.dE = dE;
  return fb;
}

LossBuild model_loss_nodes(Graph& g, const DynamicsModel& m, const DynamicsModelNodes& nodes,
                           Value z, Value x, Value labels) {
  const std::size_t batch = x.tensor().dim(0);
  if (batch == 0) throw DataError("model loss: empty batch");
  if (!labels.tensor().same_shape(x.tensor()))
    throw ShapeError("model loss: labels shape " + labels.tensor().shape_str() +
                     " does not match states " + x.tensor().shape_str());
  LossBuild lb;
  lb.field = model_field_nodes(g, m, nodes, z, x);
  Value res = g.sub(lb.field.pred, labels);
  Value data_term = g.mul_scalar(g.sum(g.square(res)), 1.0 / static_cast<double>(batch));
  Value total = data_term;
  if (m.kind == ModKind::MultiRank) {
    // Coefficient slices are shared with the forward pass; both nets'
    // banks enter for GENERIC models.
    std::size_t n_qp_layers = m.e_qp.U.size();
    std::vector<Value> d_qp(lb.field.d_coeffs.begin(),
                            lb.field.d_coeffs.begin() + std::min(n_qp_layers, lb.field.d_coeffs.size()));
    Value pen = mr_penalty(g, m.e_qp, nodes.e_qp, d_qp, m.arch.w_ortho, m.arch.w_l1);
    if (m.generic) {
      std::vector<Value> d_s(lb.field.d_coeffs.begin() + n_qp_layers, lb.field.d_coeffs.end());
      pen = g.add(pen, mr_penalty(g, m.e_s, nodes.e_s, d_s, m.arch.w_ortho, m.arch.w_l1));
    }
    lb.penalty = pen;
    total = g.add(total, pen);
  }
  lb.loss = total;
  return lb;
}

Tensor model_field(const DynamicsModel& m, const Tensor& z, const Tensor& states,
                   bool reversible_only) {
  Graph g;
  DynamicsModelNodes nodes = insert_model_leaves(g, m, false);
  Value zv;
  if (m.kind != ModKind::None) zv = g.constant(z);
  Value x = g.leaf(states, true);
  FieldBuild fb = model_field_nodes(g, m, nodes, zv, x, reversible_only);
  return fb.pred.tensor();
}

double model_loss(const DynamicsModel& m, const Tensor& z, const Tensor& states,
                  const Tensor& labels) {
  Graph g;
  DynamicsModelNodes nodes = insert_model_leaves(g, m, false);
  Value zv;
  if (m.kind != ModKind::None) zv = g.constant(z);
  Value x = g.leaf(states, true);
  LossBuild lb = model_loss_nodes(g, m, nodes, zv, x, g.constant(labels));
  return lb.loss.item();
}

Tensor antisymmetrize_lower(const Tensor& lambda_tilde, std::size_t d1) {
  const std::size_t dim = lambda_tilde.dim(1);
  if (lambda_tilde.dim(0) != d1 * dim)
    throw ShapeError("antisymmetrize_lower: expected stacked " + std::to_string(d1) +
                     " square blocks, got " + lambda_tilde.shape_str());
  Tensor out = lambda_tilde;
  for (std::size_t m = 0; m < d1; ++m) {
    for (std::size_t i = 0; i < dim; ++i) {
      for (std::size_t j = 0; j < dim; ++j) {
        out.at(m * dim + i, j) =
            0.5 * (lambda_tilde.at(m * dim + i, j) - lambda_tilde.at(m * dim + j, i));
      }
    }
  }
  return out;
}

Tensor spsd_core(const Tensor& d_tilde) {
  const std::size_t r = d_tilde.dim(0), c = d_tilde.dim(1);
  Tensor out = Tensor::zeros({r, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < r; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < c; ++k) acc += d_tilde.at(i, k) * d_tilde.at(j, k);
      out.at(i, j) = acc;
    }
  return out;
}

TaskBatch task_batch(const std::vector<Trajectory>& trajs, std::size_t nq, std::size_t np,
                     std::size_t ns) {
  const std::size_t dim = nq + np + ns;
  std::size_t rows = 0;
  for (const auto& t : trajs) rows += t.labels.size();
  if (rows == 0) throw DataError("task batch: no labeled samples");
  TaskBatch b{Tensor::zeros({rows, dim}), Tensor::zeros({rows, dim})};
  std::size_t r = 0;
  for (const auto& t : trajs) {
    for (std::size_t j = 0; j < t.labels.size(); ++j) {
      const auto xs = t.states[j + 1].flat();
      const auto vs = t.labels[j].flat();
      for (std::size_t c = 0; c < dim; ++c) {
        b.states.at(r, c) = xs[c];
        b.labels.at(r, c) = vs[c];
      }
      ++r;
    }
  }
  return b;
}

}  // namespace latdyn
