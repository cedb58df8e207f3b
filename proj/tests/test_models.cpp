#include "doctest.h"

#include <cmath>

#include "core/dataset.hpp"
#include "core/errors.hpp"
#include "core/metalearn.hpp"
#include "core/structured.hpp"
#include "support.hpp"

using namespace latdyn;
using latdyn::testing::loss_param_grad_error;
using latdyn::testing::random_latent;
using latdyn::testing::randomize_params;
using latdyn::testing::singular_values;

namespace {

ArchConfig small_arch() {
  ArchConfig a;
  a.width = 12;
  a.depth = 2;
  a.z_dim = 4;
  a.rank = 3;
  return a;
}

Tensor random_states(const DynamicsModel& m, RngStream& rng, std::size_t batch,
                     bool entropy_positive = false) {
  Tensor x = Tensor::zeros({batch, m.dim()});
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t j = 0; j < m.dim(); ++j) {
      double v = rng.uniform(-2.0, 2.0);
      if (entropy_positive && j >= 2 * m.n_q) v = rng.uniform(0.1, 2.0);
      x.at(i, j) = v;
    }
  }
  return x;
}

}  // namespace

TEST_CASE("zero hypernetwork reproduces the base MLP bit for bit") {
  SystemSpec spec = SystemSpec::defaults(SystemId::MassSpring);
  RngStream rng(1);
  DynamicsModel base = DynamicsModel::make(spec, small_arch(), ModKind::None, RngStream(3));
  Tensor x = random_states(base, rng, 9);

  for (ModKind kind :
       {ModKind::Shift, ModKind::FullWeight, ModKind::RankOne, ModKind::MultiRank}) {
    CAPTURE(mod_kind_name(kind));
    DynamicsModel mod = DynamicsModel::make(spec, small_arch(), kind, RngStream(3));
    // Same base weights by construction (same stream); hypernetwork is zero.
    Tensor z = Tensor::zeros({std::size_t(mod.arch.z_dim)});
    Graph g0, g1;
    auto n0 = insert_model_leaves(g0, base, false);
    auto n1 = insert_model_leaves(g1, mod, false);
    Value y0 = modulated_forward(g0, base.e_qp, n0.e_qp, Value{}, g0.constant(x)).out;
    Value y1 = modulated_forward(g1, mod.e_qp, n1.e_qp, g1.constant(z), g1.constant(x)).out;
    REQUIRE(y0.tensor().numel() == y1.tensor().numel());
    for (std::size_t i = 0; i < y0.tensor().numel(); ++i)
      CHECK(y0.tensor().vec()[i] == y1.tensor().vec()[i]);
  }
}

TEST_CASE("rank-one correction touches exactly one entry for basis u,v") {
  SystemSpec spec = SystemSpec::defaults(SystemId::MassSpring);
  DynamicsModel m = DynamicsModel::make(spec, small_arch(), ModKind::RankOne, RngStream(5));
  // Hypernetwork bias emits u=e1, v=e2, s=0 at layer 1 (z stays zero).
  const auto dims = m.e_qp.shape.dims();
  const int cols = dims[1], rows = dims[0];
  (void)rows;
  m.e_qp.hyper_b.at(0) = 1.0;         // u = e1 (fan-out side)
  m.e_qp.hyper_b.at(cols + 1) = 1.0;  // v = e2 (fan-in side)
  Tensor z = Tensor::zeros({std::size_t(m.arch.z_dim)});
  auto pieces = modulation_pieces(m.e_qp, z);
  // In the in x out layout the correction v u^T has a single 1 at (1, 0).
  for (std::size_t i = 0; i < pieces.delta[0].dim(0); ++i)
    for (std::size_t j = 0; j < pieces.delta[0].dim(1); ++j)
      CHECK(pieces.delta[0].at(i, j) == ((i == 1 && j == 0) ? 1.0 : 0.0));
  for (double v : pieces.delta[1].vec()) CHECK(v == 0.0);
}

TEST_CASE("weight corrections have rank at most 1 (RO) and r (MR)") {
  SystemSpec spec = SystemSpec::defaults(SystemId::MassSpring);
  RngStream rng(9);
  for (ModKind kind : {ModKind::RankOne, ModKind::MultiRank}) {
    CAPTURE(mod_kind_name(kind));
    DynamicsModel m = DynamicsModel::make(spec, small_arch(), kind, RngStream(7));
    randomize_params(m, rng);
    Tensor z = random_latent(m, rng);
    auto pieces = modulation_pieces(m.e_qp, z);
    const std::size_t bound = (kind == ModKind::RankOne) ? 1 : std::size_t(m.arch.rank);
    for (const auto& delta : pieces.delta) {
      auto sv = singular_values(delta);
      REQUIRE(sv[0] > 1e-6);  // the draw actually modulates
      for (std::size_t i = bound; i < sv.size(); ++i) CHECK(sv[i] < 1e-10);
    }
  }
}

TEST_CASE("MR with r=1 and unit coefficient reproduces RO") {
  SystemSpec spec = SystemSpec::defaults(SystemId::MassSpring);
  ArchConfig arch = small_arch();
  RngStream rng(21);

  DynamicsModel ro = DynamicsModel::make(spec, arch, ModKind::RankOne, RngStream(11));
  arch.rank = 1;
  DynamicsModel mr = DynamicsModel::make(spec, arch, ModKind::MultiRank, RngStream(11));
  for (std::size_t l = 0; l < mr.e_qp.W.size(); ++l) {
    mr.e_qp.W[l] = ro.e_qp.W[l];
    mr.e_qp.b[l] = ro.e_qp.b[l];
  }
  mr.e_qp.Wo = ro.e_qp.Wo;
  mr.e_qp.bo = ro.e_qp.bo;

  // RO bias emits (u, v, s); plant the same u, v into the MR banks with a
  // coefficient of exactly 1 (the clamp is the identity there).
  const auto dims = ro.e_qp.shape.dims();
  std::size_t off = 0;
  for (int l = 0; l < ro.e_qp.shape.hidden; ++l) {
    const std::size_t rows = dims[l], cols = dims[l + 1];
    for (std::size_t j = 0; j < cols; ++j) ro.e_qp.hyper_b.at(off + j) = rng.uniform(-1, 1);
    for (std::size_t i = 0; i < rows; ++i)
      ro.e_qp.hyper_b.at(off + cols + i) = rng.uniform(-1, 1);
    for (std::size_t j = 0; j < cols; ++j)
      ro.e_qp.hyper_b.at(off + cols + rows + j) = rng.uniform(-1, 1);
    for (std::size_t j = 0; j < cols; ++j) mr.e_qp.U[l].at(j, 0) = ro.e_qp.hyper_b.at(off + j);
    for (std::size_t i = 0; i < rows; ++i)
      mr.e_qp.V[l].at(i, 0) = ro.e_qp.hyper_b.at(off + cols + i);
    off += cols + rows + cols;
  }
  std::size_t mr_off = 0;
  for (int l = 0; l < ro.e_qp.shape.hidden; ++l) {
    const std::size_t rows = dims[l], cols = dims[l + 1];
    mr.e_qp.hyper_b.at(mr_off) = 1.0;  // d coefficient
    std::size_t ro_s = 0;
    for (int k = 0; k < l; ++k) ro_s += dims[k + 1] + dims[k] + dims[k + 1];
    ro_s += cols + rows;
    for (std::size_t j = 0; j < cols; ++j)
      mr.e_qp.hyper_b.at(mr_off + 1 + j) = ro.e_qp.hyper_b.at(ro_s + j);
    mr_off += 1 + cols;
  }

  RngStream xr(31);
  Tensor x = random_states(ro, xr, 16);
  Tensor z = Tensor::zeros({std::size_t(arch.z_dim)});
  Graph g0, g1;
  auto n0 = insert_model_leaves(g0, ro, false);
  auto n1 = insert_model_leaves(g1, mr, false);
  Tensor y0 = modulated_forward(g0, ro.e_qp, n0.e_qp, g0.constant(z), g0.constant(x)).out.tensor();
  Tensor y1 = modulated_forward(g1, mr.e_qp, n1.e_qp, g1.constant(z), g1.constant(x)).out.tensor();
  for (std::size_t i = 0; i < y0.numel(); ++i)
    CHECK(std::abs(y0.vec()[i] - y1.vec()[i]) < 1e-12);
}

TEST_CASE("constant-output Hamiltonian model has a zero field") {
  SystemSpec spec = SystemSpec::defaults(SystemId::MassSpring);
  DynamicsModel m = DynamicsModel::make(spec, small_arch(), ModKind::Shift, RngStream(2));
  for (double& v : m.e_qp.Wo.vec()) v = 0.0;
  m.e_qp.bo.at(0) = 3.5;
  RngStream rng(4);
  Tensor x = random_states(m, rng, 7);
  Tensor f = model_field(m, Tensor::zeros({std::size_t(m.arch.z_dim)}), x);
  for (double v : f.vec()) CHECK(v == 0.0);
}

TEST_CASE("learned Hamiltonian is conserved along an RK4 rollout of the model field") {
  SystemSpec spec = SystemSpec::defaults(SystemId::MassSpring);
  DynamicsModel m = DynamicsModel::make(spec, small_arch(), ModKind::RankOne, RngStream(6));
  RngStream rng(8);
  randomize_params(m, rng, 0.4);
  Tensor z = random_latent(m, rng);

  auto field = [&](const State& st) {
    Tensor x = Tensor::zeros({1, 2});
    x.at(0, 0) = st.q[0];
    x.at(0, 1) = st.p[0];
    Tensor f = model_field(m, z, x);
    return State{{f.at(0, 0)}, {f.at(0, 1)}, {}};
  };
  auto energy = [&](const State& st) {
    Graph g;
    auto nodes = insert_model_leaves(g, m, false);
    Tensor x = Tensor::zeros({1, 2});
    x.at(0, 0) = st.q[0];
    x.at(0, 1) = st.p[0];
    return modulated_forward(g, m.e_qp, nodes.e_qp, g.constant(z), g.constant(x)).out.item();
  };

  State x0{{0.4}, {-0.3}, {}};
  auto states = rk4_integrate(field, x0, 0.1, 30);
  const double h0 = energy(x0);
  for (const auto& st : states)
    CHECK(std::abs(energy(st) - h0) / std::max(1e-12, std::abs(h0)) < 1e-6);
}

TEST_CASE("model field equals central differences of the learned energy") {
  SystemSpec spec = SystemSpec::defaults(SystemId::MassSpring);
  DynamicsModel m = DynamicsModel::make(spec, small_arch(), ModKind::FullWeight, RngStream(13));
  RngStream rng(14);
  randomize_params(m, rng, 0.4);
  Tensor z = random_latent(m, rng);

  auto energy_at = [&](double q, double p) {
    Graph g;
    auto nodes = insert_model_leaves(g, m, false);
    Tensor x = Tensor::zeros({1, 2});
    x.at(0, 0) = q;
    x.at(0, 1) = p;
    return modulated_forward(g, m.e_qp, nodes.e_qp, g.constant(z), g.constant(x)).out.item();
  };

  const double h = 1e-5;
  for (int rep = 0; rep < 5; ++rep) {
    double q = rng.uniform(-1.5, 1.5), p = rng.uniform(-1.5, 1.5);
    Tensor x = Tensor::zeros({1, 2});
    x.at(0, 0) = q;
    x.at(0, 1) = p;
    Tensor f = model_field(m, z, x);
    const double dq_num = (energy_at(q, p + h) - energy_at(q, p - h)) / (2 * h);
    const double dp_num = -(energy_at(q + h, p) - energy_at(q - h, p)) / (2 * h);
    CHECK(f.at(0, 0) == doctest::Approx(dq_num).epsilon(1e-6));
    CHECK(f.at(0, 1) == doctest::Approx(dp_num).epsilon(1e-6));
  }
}

TEST_CASE("antisymmetrization and SPSD core") {
  RngStream rng(17);
  // A symmetric block antisymmetrizes to zero.
  Tensor sym = Tensor::zeros({3, 3});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = i; j < 3; ++j) sym.at(i, j) = sym.at(j, i) = rng.uniform(-1, 1);
  Tensor lam = antisymmetrize_lower(sym, 1);
  for (double v : lam.vec()) CHECK(v == 0.0);

  Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
  Tensor d_eye = spsd_core(eye);
  CHECK(d_eye.at(0, 0) == 1.0);
  CHECK(d_eye.at(1, 1) == 1.0);
  CHECK(d_eye.at(0, 1) == 0.0);

  for (int rep = 0; rep < 10; ++rep) {
    Tensor dt = Tensor::zeros({2, 2});
    for (double& v : dt.vec()) v = rng.uniform(-2, 2);
    auto ev = latdyn::testing::jacobi_eigenvalues(spsd_core(dt));
    for (double e : ev) CHECK(e >= -1e-12);
  }

  // Exact antisymmetry of the derived blocks.
  Tensor lt = Tensor::zeros({8, 4});
  for (double& v : lt.vec()) v = rng.uniform(-1, 1);
  Tensor anti = antisymmetrize_lower(lt, 2);
  for (std::size_t m = 0; m < 2; ++m)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j)
        CHECK(anti.at(m * 4 + i, j) + anti.at(m * 4 + j, i) == 0.0);
}

TEST_CASE("generic model with zero friction core reduces to canonical flow") {
  SystemSpec spec = SystemSpec::defaults(SystemId::Dno);
  DynamicsModel m = DynamicsModel::make(spec, small_arch(), ModKind::Shift, RngStream(19));
  RngStream rng(20);
  randomize_params(m, rng, 0.4);
  for (double& v : m.d_tilde.vec()) v = 0.0;
  for (double& v : m.hyperD_W.vec()) v = 0.0;
  for (double& v : m.hyperD_b.vec()) v = 0.0;
  Tensor z = random_latent(m, rng);
  Tensor x = random_states(m, rng, 6);

  Graph g;
  auto nodes = insert_model_leaves(g, m, false);
  auto fb = model_field_nodes(g, m, nodes, g.constant(z), g.leaf(x, true));
  const Tensor& pred = fb.pred.tensor();
  const Tensor& dE = fb.dE.tensor();
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(pred.at(i, 0) == dE.at(i, 1));   // dq/dt = dE/dp
    CHECK(pred.at(i, 1) == -dE.at(i, 0));  // dp/dt = -dE/dq
    CHECK(pred.at(i, 2) == 0.0);           // entropy frozen
  }
}

TEST_CASE("generic structure holds for random draws regardless of training") {
  RngStream rng(23);
  for (SystemId id : {SystemId::Dno, SystemId::Tgc}) {
    CAPTURE(system_name(id));
    SystemSpec spec = SystemSpec::defaults(id);
    for (ModKind kind : {ModKind::Shift, ModKind::RankOne, ModKind::MultiRank}) {
      DynamicsModel m = DynamicsModel::make(spec, small_arch(), kind, RngStream(29));
      for (int rep = 0; rep < 8; ++rep) {
        randomize_params(m, rng, 0.35);
        Tensor z = random_latent(m, rng, 0.5);
        Tensor x = random_states(m, rng, 5, true);
        Graph g;
        auto nodes = insert_model_leaves(g, m, false);
        auto fb = model_field_nodes(g, m, nodes, g.constant(z), g.leaf(x, true));
        const Tensor& pred = fb.pred.tensor();
        const Tensor& dE = fb.dE.tensor();
        const std::size_t dim = m.dim();
        for (std::size_t i = 0; i < 5; ++i) {
          double de_dot_f = 0.0, ds_dot_f = 0.0, de_dot_irr = 0.0;
          for (std::size_t c = 0; c < dim; ++c) de_dot_f += dE.at(i, c) * pred.at(i, c);
          for (std::size_t c = 2 * m.n_q; c < dim; ++c) ds_dot_f += pred.at(i, c);
          // Irreversible part alone: subtract the canonical L dE columns.
          for (std::size_t c = 0; c < m.n_q; ++c)
            de_dot_irr += dE.at(i, c) * (pred.at(i, c) - dE.at(i, c + m.n_q));
          for (std::size_t c = 0; c < m.n_q; ++c)
            de_dot_irr += dE.at(i, c + m.n_q) * (pred.at(i, c + m.n_q) + dE.at(i, c));
          for (std::size_t c = 2 * m.n_q; c < dim; ++c)
            de_dot_irr += dE.at(i, c) * pred.at(i, c);
          CHECK(std::abs(de_dot_f) < 1e-10);   // energy conserved by construction
          CHECK(ds_dot_f >= -1e-12);           // entropy production
          CHECK(std::abs(de_dot_irr) < 1e-10); // degeneracy of the friction bracket
        }
      }
    }
  }
}

TEST_CASE("additive friction ablation breaks positive semi-definiteness") {
  SystemSpec spec = SystemSpec::defaults(SystemId::Dno);
  DynamicsModel m = DynamicsModel::make(spec, small_arch(), ModKind::Shift, RngStream(31));
  m.additive_friction = true;
  RngStream rng(32);
  bool saw_negative_production = false;
  for (int rep = 0; rep < 40 && !saw_negative_production; ++rep) {
    randomize_params(m, rng, 1.0);
    Tensor z = random_latent(m, rng, 2.0);
    Tensor x = random_states(m, rng, 4, true);
    Graph g;
    auto nodes = insert_model_leaves(g, m, false);
    auto fb = model_field_nodes(g, m, nodes, g.constant(z), g.leaf(x, true));
    for (std::size_t i = 0; i < 4; ++i) {
      double ds = 0.0;
      for (std::size_t c = 2 * m.n_q; c < m.dim(); ++c) ds += fb.pred.tensor().at(i, c);
      if (ds < -1e-9) saw_negative_production = true;
    }
  }
  CHECK(saw_negative_production);
}

TEST_CASE("symplecticity loss") {
  SystemSpec spec = SystemSpec::defaults(SystemId::MassSpring);
  DynamicsModel m = DynamicsModel::make(spec, small_arch(), ModKind::RankOne, RngStream(37));
  RngStream rng(38);
  randomize_params(m, rng, 0.4);
  Tensor z = random_latent(m, rng);
  Tensor x = random_states(m, rng, 10);

  SUBCASE("labels from the model's own field give zero loss") {
    Tensor labels = model_field(m, z, x);
    CHECK(model_loss(m, z, x, labels) < 1e-20);
  }

  SUBCASE("zero labels with a constant energy give zero loss") {
    for (double& v : m.e_qp.Wo.vec()) v = 0.0;
    CHECK(model_loss(m, z, x, Tensor::zeros(x.shape())) == 0.0);
  }

  SUBCASE("empty batch is rejected") {
    Tensor empty = Tensor::zeros({0, 2});
    CHECK_THROWS_AS(model_loss(m, z, empty, empty), DataError);
  }
}

TEST_CASE("finite-difference labels from the exact Hamiltonian keep the loss at O(dt^2)^2") {
  // With the learned energy replaced by the exact H (via labels from the
  // analytic field), the residual is only the centered-difference error.
  SystemSpec spec = SystemSpec::defaults(SystemId::MassSpring);
  std::vector<double> mu = {1.0, 1.0};
  State x0{{1.0}, {0.0}, {}};
  auto states = rk4_integrate(spec, mu, x0, 0.1, 30);
  auto labels = finite_difference(states, 0.1);
  double loss = 0.0;
  for (std::size_t j = 0; j < labels.size(); ++j) {
    State f = true_field(spec, states[j + 1], mu);
    double rq = labels[j].q[0] - f.q[0];
    double rp = labels[j].p[0] - f.p[0];
    loss += rq * rq + rp * rp;
  }
  loss /= static_cast<double>(labels.size());
  CHECK(loss < 1e-3);
}

TEST_CASE("MR penalty vanishes for orthonormal banks and zero coefficients") {
  SystemSpec spec = SystemSpec::defaults(SystemId::MassSpring);
  ArchConfig arch = small_arch();
  arch.rank = 2;  // rank <= every fan-in so exact orthonormality is attainable
  DynamicsModel m = DynamicsModel::make(spec, arch, ModKind::MultiRank, RngStream(41));
  Tensor z = Tensor::zeros({std::size_t(arch.z_dim)});
  RngStream rng(42);
  Tensor x = random_states(m, rng, 6);
  Graph g;
  auto nodes = insert_model_leaves(g, m, false);
  auto fw = modulated_forward(g, m.e_qp, nodes.e_qp, g.constant(z), g.constant(x));
  Value pen = mr_penalty(g, m.e_qp, nodes.e_qp, fw.d_coeffs, arch.w_ortho, arch.w_l1);
  CHECK(pen.item() < 1e-24);
}

TEST_CASE("loss parameter gradients match finite differences for every kind") {
  RngStream rng(51);
  const double h = 1e-5;
  for (SystemId id : {SystemId::MassSpring, SystemId::Dno}) {
    SystemSpec spec = SystemSpec::defaults(id);
    for (ModKind kind : {ModKind::None, ModKind::Shift, ModKind::FullWeight, ModKind::RankOne,
                         ModKind::MultiRank}) {
      CAPTURE(system_name(id));
      CAPTURE(mod_kind_name(kind));
      ArchConfig arch = small_arch();
      arch.width = 8;
      DynamicsModel m = DynamicsModel::make(spec, arch, kind, RngStream(71));
      randomize_params(m, rng, 0.5);
      Tensor z = (kind == ModKind::None) ? Tensor() : random_latent(m, rng);
      TaskBatch batch = latdyn::testing::random_batch(m, rng, 5);
      if (kind == ModKind::MultiRank) latdyn::testing::avoid_clamp_kinks(m, z, 1e-2);
      double err = loss_param_grad_error(m, z, batch, h);
      CHECK_MESSAGE(err < 1e-5, mod_kind_name(kind), " grad error ", err);
    }
  }
}

TEST_CASE("reversible-only field drops the friction part exactly") {
  SystemSpec spec = SystemSpec::defaults(SystemId::Dno);
  DynamicsModel m = DynamicsModel::make(spec, small_arch(), ModKind::Shift, RngStream(71));
  RngStream rng(72);
  randomize_params(m, rng, 0.4);
  Tensor z = random_latent(m, rng);
  Tensor x = random_states(m, rng, 4, true);
  Tensor rev = model_field(m, z, x, true);
  Graph g;
  auto nodes = insert_model_leaves(g, m, false);
  auto fb = model_field_nodes(g, m, nodes, g.constant(z), g.leaf(x, true));
  const Tensor& dE = fb.dE.tensor();
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(rev.at(i, 0) == dE.at(i, 1));
    CHECK(rev.at(i, 1) == -dE.at(i, 0));
    CHECK(rev.at(i, 2) == 0.0);
  }
}

TEST_CASE("multi-rank losses report their penalty component") {
  SystemSpec spec = SystemSpec::defaults(SystemId::MassSpring);
  DynamicsModel m = DynamicsModel::make(spec, small_arch(), ModKind::MultiRank, RngStream(73));
  RngStream rng(74);
  randomize_params(m, rng, 0.4);
  Tensor z = random_latent(m, rng);
  TaskBatch batch = latdyn::testing::random_batch(m, rng, 6);
  LossGrads lg = loss_and_grads(m, &z, batch, GradWrt::Params);
  CHECK(lg.penalty >= 0.0);
  CHECK(lg.penalty < lg.loss);

  DynamicsModel ro = DynamicsModel::make(spec, small_arch(), ModKind::RankOne, RngStream(73));
  LossGrads lg2 = loss_and_grads(ro, &z, batch, GradWrt::Params);
  CHECK(lg2.penalty < 0.0);
}
