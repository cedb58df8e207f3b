#include "core/mlp.hpp"

#include <cmath>

#include "core/errors.hpp"

namespace latdyn {

ModKind mod_kind_from_name(const std::string& name) {
  if (name == "none") return ModKind::None;
  if (name == "shift") return ModKind::Shift;
  if (name == "fw") return ModKind::FullWeight;
  if (name == "ro") return ModKind::RankOne;
  if (name == "mr") return ModKind::MultiRank;
  throw ConfigError("unknown modulation kind: " + name);
}

std::string mod_kind_name(ModKind k) {
  switch (k) {
    case ModKind::None: return "none";
    case ModKind::Shift: return "shift";
    case ModKind::FullWeight: return "fw";
    case ModKind::RankOne: return "ro";
    case ModKind::MultiRank: return "mr";
  }
  return "?";
}

std::vector<int> MLPShape::dims() const {
  std::vector<int> d;
  d.push_back(in);
  for (int i = 0; i < hidden; ++i) d.push_back(width);
  d.push_back(out);
  return d;
}

int ModulatedMLP::mod_dim() const {
  const auto d = shape.dims();
  int total = 0;
  for (int l = 0; l < shape.hidden; ++l) {
    const int rows = d[l];      // fan-in
    const int cols = d[l + 1];  // fan-out
    switch (kind) {
      case ModKind::None: break;
      case ModKind::Shift: total += cols; break;
      case ModKind::FullWeight: total += rows * cols + cols; break;
      case ModKind::RankOne: total += cols + rows + cols; break;  // u, v, s
      case ModKind::MultiRank: total += rank + cols; break;       // d, s
    }
  }
  return total;
}

namespace {

Tensor uniform_tensor(std::vector<std::size_t> shape, double bound, RngStream& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.vec()) v = rng.uniform(-bound, bound);
  return t;
}

// Gaussian bank with the first min(rows, cols) columns orthonormalized.
Tensor orthonormal_bank(std::size_t rows, std::size_t cols, RngStream& rng) {
  Tensor t = Tensor::zeros({rows, cols});
  for (double& v : t.vec()) v = rng.normal();
  const std::size_t k = std::min(rows, cols);
  for (std::size_t j = 0; j < cols; ++j) {
    if (j < k) {
      for (std::size_t prev = 0; prev < j; ++prev) {
        double dot = 0.0;
        for (std::size_t i = 0; i < rows; ++i) dot += t.at(i, j) * t.at(i, prev);
        for (std::size_t i = 0; i < rows; ++i) t.at(i, j) -= dot * t.at(i, prev);
      }
    }
    double norm = 0.0;
    for (std::size_t i = 0; i < rows; ++i) norm += t.at(i, j) * t.at(i, j);
    norm = std::sqrt(norm);
    if (norm < 1e-12) norm = 1.0;
    for (std::size_t i = 0; i < rows; ++i) t.at(i, j) /= norm;
  }
  return t;
}

}  // namespace

ModulatedMLP ModulatedMLP::make(MLPShape shape, ModKind kind, int rank, int z_dim,
                                RngStream rng, double hyper_gain, double init_scale) {
  ModulatedMLP m;
  m.shape = shape;
  m.kind = kind;
  m.rank = rank;
  m.z_dim = z_dim;
  m.hyper_gain = hyper_gain;
  m.init_scale = init_scale;
  const auto d = shape.dims();
  for (int l = 0; l < shape.hidden; ++l) {
    const double bound = init_scale / std::sqrt(static_cast<double>(d[l]));
    RngStream lr = rng.derive("layer").derive(static_cast<std::uint64_t>(l));
    m.W.push_back(uniform_tensor({std::size_t(d[l]), std::size_t(d[l + 1])}, bound, lr));
    m.b.push_back(uniform_tensor({std::size_t(d[l + 1])}, bound, lr));
    if (kind == ModKind::MultiRank) {
      RngStream br = rng.derive("bank").derive(static_cast<std::uint64_t>(l));
      m.U.push_back(orthonormal_bank(std::size_t(d[l + 1]), std::size_t(rank), br));
      m.V.push_back(orthonormal_bank(std::size_t(d[l]), std::size_t(rank), br));
    }
  }
  {
    const double bound = init_scale / std::sqrt(static_cast<double>(d[shape.hidden]));
    RngStream lr = rng.derive("out");
    m.Wo = uniform_tensor({std::size_t(d[shape.hidden]), std::size_t(shape.out)}, bound, lr);
    m.bo = uniform_tensor({std::size_t(shape.out)}, bound, lr);
  }
  // Latent codes start at zero, so training begins at the unmodulated base
  // network for every kind. The hypernetwork map itself gets a standard
  // fan-in init: with a zero map the latent gradient hyper_W^T delta would
  // vanish identically and the codes could never leave the origin.
  {
    const double bound = hyper_gain / std::sqrt(static_cast<double>(z_dim));
    RngStream hr = rng.derive("hyper");
    m.hyper_W = uniform_tensor({std::size_t(z_dim), std::size_t(m.mod_dim())}, bound, hr);
    m.hyper_b = Tensor::zeros({std::size_t(m.mod_dim())});
  }
  return m;
}

std::vector<ParamRef> mlp_params(ModulatedMLP& m, const std::string& prefix) {
  std::vector<ParamRef> out;
  for (std::size_t l = 0; l < m.W.size(); ++l) {
    out.push_back({prefix + ".W" + std::to_string(l), &m.W[l]});
    out.push_back({prefix + ".b" + std::to_string(l), &m.b[l]});
  }
  out.push_back({prefix + ".Wo", &m.Wo});
  out.push_back({prefix + ".bo", &m.bo});
  if (m.kind != ModKind::None) {
    out.push_back({prefix + ".hyper_W", &m.hyper_W});
    out.push_back({prefix + ".hyper_b", &m.hyper_b});
  }
  for (std::size_t l = 0; l < m.U.size(); ++l) {
    out.push_back({prefix + ".U" + std::to_string(l), &m.U[l]});
    out.push_back({prefix + ".V" + std::to_string(l), &m.V[l]});
  }
  return out;
}

MLPNodes insert_mlp_leaves(Graph& g, const ModulatedMLP& m, bool param_grad) {
  MLPNodes n;
  for (std::size_t l = 0; l < m.W.size(); ++l) {
    n.W.push_back(g.leaf(m.W[l], param_grad));
    n.b.push_back(g.leaf(m.b[l], param_grad));
  }
  n.Wo = g.leaf(m.Wo, param_grad);
  n.bo = g.leaf(m.bo, param_grad);
  if (m.kind != ModKind::None) {
    n.hyper_W = g.leaf(m.hyper_W, param_grad);
    n.hyper_b = g.leaf(m.hyper_b, param_grad);
  }
  for (std::size_t l = 0; l < m.U.size(); ++l) {
    n.U.push_back(g.leaf(m.U[l], param_grad));
    n.V.push_back(g.leaf(m.V[l], param_grad));
  }
  return n;
}

ModForward modulated_forward(Graph& g, const ModulatedMLP& m, const MLPNodes& nodes, Value z,
                             Value x) {
  const auto d = m.shape.dims();
  if (x.tensor().rank() != 2 || x.tensor().dim(1) != std::size_t(d[0]))
    throw ShapeError("modulated_forward: input shape " + x.tensor().shape_str() +
                     " does not match layer 1 fan-in " + std::to_string(d[0]));
  ModForward fw;
  Value mod;  // [mod_dim]
  if (m.kind != ModKind::None) {
    if (!z.valid() || z.tensor().rank() != 1 || z.tensor().dim(0) != std::size_t(m.z_dim))
      throw ShapeError("modulated_forward: latent code must be a vector of length " +
                       std::to_string(m.z_dim));
    Value zr = g.reshape(z, {1, std::size_t(m.z_dim)});
    mod = g.reshape(g.affine(zr, nodes.hyper_W, nodes.hyper_b), {std::size_t(m.mod_dim())});
  }
  std::int64_t off = 0;
  Value h = x;
  for (int l = 0; l < m.shape.hidden; ++l) {
    const std::int64_t rows = d[l], cols = d[l + 1];
    Value w_eff = nodes.W[l];
    Value bias = nodes.b[l];
    switch (m.kind) {
      case ModKind::None:
        break;
      case ModKind::Shift: {
        bias = g.add(bias, g.slice(mod, off, cols));
        off += cols;
        break;
      }
      case ModKind::FullWeight: {
        Value dw = g.reshape(g.slice(mod, off, rows * cols),
                             {std::size_t(rows), std::size_t(cols)});
        off += rows * cols;
        w_eff = g.add(w_eff, dw);
        bias = g.add(bias, g.slice(mod, off, cols));
        off += cols;
        break;
      }
      case ModKind::RankOne: {
        Value u = g.slice(mod, off, cols);
        off += cols;
        Value v = g.slice(mod, off, rows);
        off += rows;
        w_eff = g.add(w_eff, g.outer(v, u));
        bias = g.add(bias, g.slice(mod, off, cols));
        off += cols;
        break;
      }
      case ModKind::MultiRank: {
        Value dc = g.relu(g.slice(mod, off, m.rank));
        off += m.rank;
        fw.d_coeffs.push_back(dc);
        // V diag(d) U^T in the in x out layout.
        w_eff = g.add(w_eff, g.matmul(g.scale_cols(nodes.V[l], dc), g.transpose(nodes.U[l])));
        bias = g.add(bias, g.slice(mod, off, cols));
        off += cols;
        break;
      }
    }
    h = g.tanh_affine(h, w_eff, bias);
  }
  fw.out = g.affine(h, nodes.Wo, nodes.bo);
  return fw;
}

Value mr_penalty(Graph& g, const ModulatedMLP& m, const MLPNodes& nodes,
                 const std::vector<Value>& d_coeffs, double w_ortho, double w_l1) {
  Value total = g.constant(Tensor::scalar(0.0));
  Tensor eye = Tensor::zeros({std::size_t(m.rank), std::size_t(m.rank)});
  for (int i = 0; i < m.rank; ++i) eye.at(i, i) = 1.0;
  for (std::size_t l = 0; l < nodes.U.size(); ++l) {
    Value gu = g.sub(g.matmul(g.transpose(nodes.U[l]), nodes.U[l]), g.constant(eye));
    Value gv = g.sub(g.matmul(g.transpose(nodes.V[l]), nodes.V[l]), g.constant(eye));
    total = g.add(total, g.add(g.sum(g.square(gu)), g.sum(g.square(gv))));
  }
  total = g.mul_scalar(total, w_ortho);
  // Coefficients are clamped non-negative, so the l1 norm is a plain sum.
  for (Value dc : d_coeffs) total = g.add(total, g.mul_scalar(g.sum(dc), w_l1));
  return total;
}

ModulationPieces modulation_pieces(const ModulatedMLP& m, const Tensor& z) {
  ModulationPieces pieces;
  const auto d = m.shape.dims();
  std::vector<double> mod(std::size_t(m.mod_dim()), 0.0);
  for (std::size_t j = 0; j < mod.size(); ++j) {
    double acc = m.hyper_b.at(j);
    for (int i = 0; i < m.z_dim; ++i) acc += z.at(i) * m.hyper_W.at(i, j);
    mod[j] = acc;
  }
  std::size_t off = 0;
  for (int l = 0; l < m.shape.hidden; ++l) {
    const std::size_t rows = d[l], cols = d[l + 1];
    Tensor delta = Tensor::zeros({rows, cols});
    Tensor shift = Tensor::zeros({cols});
    switch (m.kind) {
      case ModKind::None:
        break;
      case ModKind::Shift:
        for (std::size_t j = 0; j < cols; ++j) shift.at(j) = mod[off + j];
        off += cols;
        break;
      case ModKind::FullWeight:
        for (std::size_t i = 0; i < rows * cols; ++i) delta.vec()[i] = mod[off + i];
        off += rows * cols;
        for (std::size_t j = 0; j < cols; ++j) shift.at(j) = mod[off + j];
        off += cols;
        break;
      case ModKind::RankOne: {
        const std::size_t u0 = off, v0 = off + cols;
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j) delta.at(i, j) = mod[v0 + i] * mod[u0 + j];
        off += cols + rows;
        for (std::size_t j = 0; j < cols; ++j) shift.at(j) = mod[off + j];
        off += cols;
        break;
      }
      case ModKind::MultiRank: {
        for (int r = 0; r < m.rank; ++r) {
          const double c = std::max(0.0, mod[off + r]);
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j)
              delta.at(i, j) += c * m.V[l].at(i, r) * m.U[l].at(j, r);
        }
        off += m.rank;
        for (std::size_t j = 0; j < cols; ++j) shift.at(j) = mod[off + j];
        off += cols;
        break;
      }
    }
    pieces.delta.push_back(std::move(delta));
    pieces.shift.push_back(std::move(shift));
  }
  return pieces;
}

}  // namespace latdyn
