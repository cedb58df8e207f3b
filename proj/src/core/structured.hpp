#pragma once

#include <optional>
#include <vector>

#include "core/mlp.hpp"
#include "core/systems.hpp"

namespace latdyn {

struct ArchConfig {
  int width = 100;
  int depth = 4;
  int z_dim = 10;
  int rank = 8;
  int d1 = 2;  // Lambda third dimension / friction core rows
  int d2 = 2;  // friction core columns
  double w_ortho = 0.01;
  double w_l1 = 1e-5;
  // Multiplier on the hypernetwork's fan-in init bound; scales how strongly
  // a unit latent step modulates the base network.
  double hyper_gain = 1.0;
  // Multiplier on the base MLP's fan-in init bound. Values below 1 keep the
  // first tanh layer out of saturation for wide state boxes.
  double init_scale = 1.0;
};

// A structure-preserving dynamics model over a flat state (q, p, S...).
// Hamiltonian systems use only e_qp (the learned scalar H); GENERIC systems
// add the entropy-dependent energy term, the Poisson-leaf construction with
// the canonical L, and the friction contraction built from (Lambda, D).
struct DynamicsModel {
  bool generic = false;
  std::size_t n_q = 1, n_s = 0;
  ArchConfig arch;
  ModKind kind = ModKind::None;

  ModulatedMLP e_qp;
  ModulatedMLP e_s;           // generic only
  Tensor lambda_tilde;        // (d1*dim) x dim, stacked lower-index matrices
  Tensor d_tilde;             // d1 x d2
  Tensor hyperD_W, hyperD_b;  // z_dim x (d1*d2), (d1*d2); friction factor modulation
  // Additive-on-D ablation: modulate D itself instead of its factor. Breaks
  // the SPSD guarantee; kept behind this flag for comparison runs.
  bool additive_friction = false;

  std::size_t dim() const { return 2 * n_q + n_s; }
  static DynamicsModel make(const SystemSpec& spec, const ArchConfig& arch, ModKind kind,
                            RngStream rng);
  std::vector<ParamRef> params();
  std::vector<const Tensor*> params_const() const;
};

struct DynamicsModelNodes {
  MLPNodes e_qp, e_s;
  Value lambda, d_tilde, hyperD_W, hyperD_b;
};

DynamicsModelNodes insert_model_leaves(Graph& g, const DynamicsModel& m, bool param_grad);
std::vector<Value> model_leaf_list(const DynamicsModel& m, const DynamicsModelNodes& nodes);
// Inverse of model_leaf_list: rebind a node struct from an ordered value
// list (used by the inner-loop updates of the optimization baselines).
DynamicsModelNodes nodes_from_values(const DynamicsModel& m, const std::vector<Value>& values);

struct FieldBuild {
  Value pred;    // B x dim model field
  Value energy;  // B x 1 learned energy (or Hamiltonian)
  Value dE;      // B x dim input gradient of the energy
  std::vector<Value> d_coeffs;  // MR coefficient slices from all modulated nets
};

// X must be a leaf of shape B x dim inserted by the caller.
FieldBuild model_field_nodes(Graph& g, const DynamicsModel& m, const DynamicsModelNodes& nodes,
                             Value z, Value x, bool reversible_only = false);

struct LossBuild {
  Value loss;
  Value penalty;  // MR regularization term; invalid for other kinds
  FieldBuild field;
};

// Velocity-matching loss: mean over the batch of the squared residual norm,
// plus the MR penalties when the modulation kind is MultiRank.
LossBuild model_loss_nodes(Graph& g, const DynamicsModel& m, const DynamicsModelNodes& nodes,
                           Value z, Value x, Value labels);

// Plain evaluation: model field at a batch of flat states (rows). No
// parameter gradients are recorded. `reversible_only` drops the friction
// contraction and keeps the canonical Poisson part (GENERIC models only).
Tensor model_field(const DynamicsModel& m, const Tensor& z, const Tensor& states,
                   bool reversible_only = false);
double model_loss(const DynamicsModel& m, const Tensor& z, const Tensor& states,
                  const Tensor& labels);

// Parameterization tricks shared with the graph path, exposed for direct
// checks: Lambda^m = (Lambda~^m - Lambda~^m T) / 2 per stacked block, and
// D = D~ D~^T.
Tensor antisymmetrize_lower(const Tensor& lambda_tilde, std::size_t d1);
Tensor spsd_core(const Tensor& d_tilde);

// Batch helpers: states/labels of a task flattened to row-major tensors.
struct TaskBatch {
  Tensor states;  // B x dim
  Tensor labels;  // B x dim
};
TaskBatch task_batch(const std::vector<Trajectory>& trajs, std::size_t nq, std::size_t np,
                     std::size_t ns);

}  // namespace latdyn
