#pragma once

#include <string>
#include <vector>

#include "core/graph.hpp"
#include "core/rng.hpp"
#include "core/tensor.hpp"

namespace latdyn {

using ad::Graph;
using ad::Value;

enum class ModKind { None, Shift, FullWeight, RankOne, MultiRank };

ModKind mod_kind_from_name(const std::string& name);
std::string mod_kind_name(ModKind k);

struct MLPShape {
  int in = 2;
  int width = 100;
  int hidden = 4;  // modulated tanh layers; the output map is affine and unmodulated
  int out = 1;

  // Dimension chain in -> width ... -> width (hidden entries) -> out.
  std::vector<int> dims() const;
};

// Base MLP plus hypernetwork plus (for MR) basis banks. Weights are stored
// in x out so a batch forward is X*W + b on row-major batches; the paper's
// column convention u v^T therefore lands as outer(v, u) here.
struct ModulatedMLP {
  MLPShape shape;
  ModKind kind = ModKind::None;
  int rank = 8;      // MR
  int z_dim = 10;
  double hyper_gain = 1.0;
  double init_scale = 1.0;

  std::vector<Tensor> W, b;  // hidden layers
  Tensor Wo, bo;             // output affine
  Tensor hyper_W, hyper_b;   // z_dim x mod_dim, mod_dim (zero-initialized)
  std::vector<Tensor> U, V;  // MR banks: U[l] out x rank, V[l] in x rank

  // Flat hypernetwork output length for this kind and shape; layout is
  // layer 1..L with weight pieces first, then the bias shift s.
  int mod_dim() const;

  static ModulatedMLP make(MLPShape shape, ModKind kind, int rank, int z_dim,
                           RngStream rng, double hyper_gain = 1.0, double init_scale = 1.0);
};

struct ParamRef {
  std::string name;
  Tensor* tensor;
};

std::vector<ParamRef> mlp_params(ModulatedMLP& m, const std::string& prefix);

// Graph bindings for one MLP's parameters.
struct MLPNodes {
  std::vector<Value> W, b;
  Value Wo, bo, hyper_W, hyper_b;
  std::vector<Value> U, V;
};

MLPNodes insert_mlp_leaves(Graph& g, const ModulatedMLP& m, bool param_grad);

struct ModForward {
  Value out;                    // B x out
  std::vector<Value> d_coeffs;  // MR only: clamped coefficients per layer
};

// z must be a [z_dim] value for modulated kinds; pass an invalid Value for
// ModKind::None.
ModForward modulated_forward(Graph& g, const ModulatedMLP& m, const MLPNodes& nodes, Value z,
                             Value x);

// Orthonormality penalty on the MR basis banks plus l1 on the clamped
// coefficients, already weighted.
Value mr_penalty(Graph& g, const ModulatedMLP& m, const MLPNodes& nodes,
                 const std::vector<Value>& d_coeffs, double w_ortho, double w_l1);

// Concrete per-layer corrections for a given latent code (plain tensor math,
// no graph). Used by the rank/equivalence checks.
struct ModulationPieces {
  std::vector<Tensor> delta;  // in x out per hidden layer
  std::vector<Tensor> shift;  // out per hidden layer
};
ModulationPieces modulation_pieces(const ModulatedMLP& m, const Tensor& z);

}  // namespace latdyn
