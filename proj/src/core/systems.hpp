#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "core/rng.hpp"

namespace latdyn {

enum class SystemId { MassSpring, Pendulum, Duffing, Kepler, Dno, Tgc };

SystemId system_from_name(const std::string& name);
std::string system_name(SystemId id);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

// Phase-space point: generalized positions, momenta, and entropy components
// (empty for the Hamiltonian systems, [S] for DNO, [S1,S2] for TGC).
struct State {
  std::vector<double> q, p, s;

  std::size_t dim() const { return q.size() + p.size() + s.size(); }
  std::vector<double> flat() const;
  static State from_flat(const std::vector<double>& x, std::size_t nq, std::size_t np,
                         std::size_t ns);
  bool all_finite() const;
};

// Ground-truth system description. Defaults reproduce the benchmark setup:
// parameter boxes, initial-condition boxes, step size and terminal time per
// system, plus the fixed physical constants.
struct SystemSpec {
  SystemId id = SystemId::MassSpring;
  std::vector<Interval> mu_range;
  std::vector<Interval> init_range;  // per-coordinate; Kepler uses (r, theta)
  double dt = 0.1;
  double t_end = 3.0;
  // Ground-truth trajectories are integrated at dt/substeps and subsampled to
  // the dt grid, keeping the stored trajectories at RK4 accuracy even for
  // stiff parameter draws.
  int substeps = 1;

  double gravity = 9.81;           // pendulum
  bool pendulum_ml2 = false;       // kinetic term p^2/(2 m l^2) instead of p^2/(2 m l)
  double grav_const = 1.0;         // Kepler G
  double e_max = 0.5;              // Kepler eccentricity control
  double rho_y = 1.0;              // Kepler tangential momentum scale (y component)
  double k_dno = 1.0;              // DNO stiffness
  double bath_temp = 1.0;          // DNO bath temperature T
  double half_length = 1.0;        // TGC L_g (total length 2*L_g)
  double cross_section = 1.0;      // TGC A_c
  double nkb = 1.0;                // TGC N*k_B
  double c_hat = 102.25;           // TGC entropy offset in S = c_hat + ln(V E^{3/2})

  static SystemSpec defaults(SystemId id);

  bool generic() const { return id == SystemId::Dno || id == SystemId::Tgc; }
  std::size_t n_q() const { return id == SystemId::Kepler ? 2 : 1; }
  std::size_t n_p() const { return n_q(); }
  std::size_t n_s() const {
    return id == SystemId::Dno ? 1 : (id == SystemId::Tgc ? 2 : 0);
  }
  std::size_t dim() const { return n_q() + n_p() + n_s(); }
  std::size_t mu_dim() const { return 2; }
  int n_steps() const;  // t_end / dt, checked to be integral

  std::string to_json() const;
  static SystemSpec from_json(const std::string& text);
  std::uint64_t hash() const;
};

// Exact analytic vector field dx/dt = f(x; mu).
State true_field(const SystemSpec& spec, const State& x, const std::vector<double>& mu,
                 bool checked = false);

// Closed-form energies. `hamiltonian` covers the four conservative systems;
// `generic_energy` covers DNO/TGC. `generic_entropy` is the sum of entropy
// components.
double hamiltonian(const SystemSpec& spec, const State& x, const std::vector<double>& mu);
double generic_energy(const SystemSpec& spec, const State& x, const std::vector<double>& mu);
double generic_entropy(const State& x);

// TGC internal energies from the Sackur-Tetrode closure.
double tgc_internal_energy(const SystemSpec& spec, double entropy, double volume);
double tgc_entropy_of(const SystemSpec& spec, double internal_energy, double volume);

struct Trajectory {
  std::vector<double> mu;
  double dt = 0.0;
  std::vector<State> states;           // length n_seq
  std::vector<State> labels;           // centered differences, length n_seq - 2
  enum class Role { Adaptation, Performance } role = Role::Adaptation;
};

using FieldFn = std::function<State(const State&)>;

// Classical fixed-step RK4; throws NumericError with the step index if the
// state leaves the finite range.
std::vector<State> rk4_integrate(const FieldFn& field, const State& initial, double dt,
                                 int n_steps);
std::vector<State> rk4_integrate(const SystemSpec& spec, const std::vector<double>& mu,
                                 const State& initial, double dt, int n_steps);

// Centered finite differences (x_{j+1} - x_{j-1}) / (2 dt); endpoints dropped.
std::vector<State> finite_difference(const std::vector<State>& states, double dt);

std::vector<double> sample_task(const SystemSpec& spec, RngStream& rng);
State sample_initial(const SystemSpec& spec, RngStream& rng, const std::vector<double>& mu);

}  // namespace latdyn
