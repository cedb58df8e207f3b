#include "core/systems.hpp"

#include <cmath>
#include <sstream>

#include "core/errors.hpp"

#include "json.hpp"

namespace latdyn {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;
}

SystemId system_from_name(const std::string& name) {
  if (name == "mass_spring") return SystemId::MassSpring;
  if (name == "pendulum") return SystemId::Pendulum;
  if (name == "duffing") return SystemId::Duffing;
  if (name == "kepler") return SystemId::Kepler;
  if (name == "dno") return SystemId::Dno;
  if (name == "tgc") return SystemId::Tgc;
  throw ConfigError("unknown system id: " + name);
}

std::string system_name(SystemId id) {
  switch (id) {
    case SystemId::MassSpring: return "mass_spring";
    case SystemId::Pendulum: return "pendulum";
    case SystemId::Duffing: return "duffing";
    case SystemId::Kepler: return "kepler";
    case SystemId::Dno: return "dno";
    case SystemId::Tgc: return "tgc";
  }
  return "?";
}

std::vector<double> State::flat() const {
  std::vector<double> x;
  x.reserve(dim());
  x.insert(x.end(), q.begin(), q.end());
  x.insert(x.end(), p.begin(), p.end());
  x.insert(x.end(), s.begin(), s.end());
  return x;
}

State State::from_flat(const std::vector<double>& x, std::size_t nq, std::size_t np,
                       std::size_t ns) {
  if (x.size() != nq + np + ns) throw ShapeError("state: flat vector has wrong length");
  State st;
  st.q.assign(x.begin(), x.begin() + nq);
  st.p.assign(x.begin() + nq, x.begin() + nq + np);
  st.s.assign(x.begin() + nq + np, x.end());
  return st;
}

bool State::all_finite() const {
  for (const auto* v : {&q, &p, &s})
    for (double e : *v)
      if (!std::isfinite(e)) return false;
  return true;
}

SystemSpec SystemSpec::defaults(SystemId id) {
  SystemSpec s;
  s.id = id;
  switch (id) {
    case SystemId::MassSpring:
      s.mu_range = {{1, 5}, {1, 5}};            // (m, k)
      s.init_range = {{-9, 9}, {-9, 9}};        // (q0, p0)
      s.dt = 0.1;
      s.t_end = 3.0;
      s.substeps = 4;
      break;
    case SystemId::Pendulum:
      s.mu_range = {{1, 5}, {1, 5}};            // (m, l)
      s.init_range = {{-kTwoPi, kTwoPi}, {-19, 19}};
      s.dt = 0.1;
      s.t_end = 3.0;
      s.substeps = 32;
      break;
    case SystemId::Duffing:
      s.mu_range = {{2, 5}, {-5, -2}};          // (alpha, beta)
      s.init_range = {{-3, 3}, {-2, 2}};
      s.dt = 0.1;
      s.t_end = 3.0;
      s.substeps = 24;
      break;
    case SystemId::Kepler:
      s.mu_range = {{0.5, 2.5}, {0.5, 2.5}};    // (m1, m2)
      s.init_range = {{2, 3}, {0, kTwoPi}};     // (r, theta)
      s.dt = 0.05;
      s.t_end = 5.0;
      s.substeps = 16;
      break;
    case SystemId::Dno:
      s.mu_range = {{1, 1.5}, {0.05, 0.15}};    // (m, gamma)
      s.init_range = {{-kTwoPi, kTwoPi}, {-2, 2}};
      s.dt = 0.01;
      s.t_end = 1.0;
      s.substeps = 1;
      break;
    case SystemId::Tgc:
      s.mu_range = {{1, 4}, {0.5, 1.5}};        // (m, alpha)
      s.init_range = {{0.5, 1.5}, {-2, 2}};
      s.dt = 0.02;
      s.t_end = 2.0;
      s.substeps = 2;
      break;
  }
  return s;
}

int SystemSpec::n_steps() const {
  if (!(dt > 0.0)) throw ConfigError("system spec: dt must be positive");
  double steps = t_end / dt;
  int n = static_cast<int>(std::lround(steps));
  if (n < 1 || std::abs(steps - n) > 1e-9)
    throw ConfigError("system spec: terminal time is not an integer multiple of dt");
  return n;
}

std::string SystemSpec::to_json() const {
  nlohmann::json j;
  j["system"] = system_name(id);
  auto ranges = [](const std::vector<Interval>& rs) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& r : rs) a.push_back({r.lo, r.hi});
    return a;
  };
  j["mu_range"] = ranges(mu_range);
  j["init_range"] = ranges(init_range);
  j["dt"] = dt;
  j["t_end"] = t_end;
  j["substeps"] = substeps;
  j["gravity"] = gravity;
  j["pendulum_ml2"] = pendulum_ml2;
  j["grav_const"] = grav_const;
  j["e_max"] = e_max;
  j["rho_y"] = rho_y;
  j["k_dno"] = k_dno;
  j["bath_temp"] = bath_temp;
  j["half_length"] = half_length;
  j["cross_section"] = cross_section;
  j["nkb"] = nkb;
  j["c_hat"] = c_hat;
  return j.dump();
}

SystemSpec SystemSpec::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  SystemSpec s = defaults(system_from_name(j.at("system").get<std::string>()));
  auto ranges = [&](const char* key, std::vector<Interval>& out) {
    if (!j.contains(key)) return;
    out.clear();
    for (const auto& r : j.at(key)) out.push_back({r.at(0).get<double>(), r.at(1).get<double>()});
  };
  ranges("mu_range", s.mu_range);
  ranges("init_range", s.init_range);
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("dt", s.dt);
  get("t_end", s.t_end);
  get("substeps", s.substeps);
  get("gravity", s.gravity);
  get("pendulum_ml2", s.pendulum_ml2);
  get("grav_const", s.grav_const);
  get("e_max", s.e_max);
  get("rho_y", s.rho_y);
  get("k_dno", s.k_dno);
  get("bath_temp", s.bath_temp);
  get("half_length", s.half_length);
  get("cross_section", s.cross_section);
  get("nkb", s.nkb);
  get("c_hat", s.c_hat);
  return s;
}

std::uint64_t SystemSpec::hash() const { return hash_str(to_json()); }

namespace {

void check_mu(const SystemSpec& spec, const std::vector<double>& mu, bool checked) {
  if (mu.size() != spec.mu_dim())
    throw ConfigError("system " + system_name(spec.id) + ": expected " +
                      std::to_string(spec.mu_dim()) + " parameters, got " +
                      std::to_string(mu.size()));
  if (!checked) return;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    if (mu[i] < spec.mu_range[i].lo || mu[i] > spec.mu_range[i].hi)
      throw DataError("system " + system_name(spec.id) + ": parameter " + std::to_string(i) +
                      " outside its range");
  }
}

}  // namespace

double tgc_internal_energy(const SystemSpec& spec, double entropy, double volume) {
  if (!(volume > 0.0))
    throw NumericError("tgc: non-positive container volume " + std::to_string(volume));
  const double e =
      std::exp((2.0 / 3.0) * (entropy / spec.nkb - spec.c_hat - std::log(volume)));
  if (!(e > 0.0) || !std::isfinite(e))
    throw NumericError("tgc: non-positive internal energy for entropy " + std::to_string(entropy));
  return e;
}

double tgc_entropy_of(const SystemSpec& spec, double internal_energy, double volume) {
  if (!(internal_energy > 0.0) || !(volume > 0.0))
    throw NumericError("tgc: entropy undefined for non-positive energy or volume");
  return spec.nkb * (spec.c_hat + std::log(volume * std::pow(internal_energy, 1.5)));
}

State true_field(const SystemSpec& spec, const State& x, const std::vector<double>& mu,
                 bool checked) {
  check_mu(spec, mu, checked);
  State f;
  switch (spec.id) {
    case SystemId::MassSpring: {
      const double m = mu[0], k = mu[1];
      f.q = {x.p[0] / m};
      f.p = {-k * x.q[0]};
      break;
    }
    case SystemId::Pendulum: {
      const double m = mu[0], l = mu[1], g = spec.gravity;
      const double denom = spec.pendulum_ml2 ? m * l * l : m * l;
      f.q = {x.p[0] / denom};
      f.p = {-m * g * l * std::sin(x.q[0])};
      break;
    }
    case SystemId::Duffing: {
      const double alpha = mu[0], beta = mu[1];
      f.q = {x.p[0]};
      f.p = {-alpha * x.q[0] * x.q[0] * x.q[0] - beta * x.q[0]};
      break;
    }
    case SystemId::Kepler: {
      const double m1 = mu[0], m2 = mu[1], G = spec.grav_const;
      const double r2 = x.q[0] * x.q[0] + x.q[1] * x.q[1];
      const double r = std::sqrt(r2);
      const double c = -G * m1 * m2 / (r2 * r);
      f.q = {x.p[0] / m2, x.p[1] / m2};
      f.p = {c * x.q[0], c * x.q[1]};
      break;
    }
    case SystemId::Dno: {
      const double m = mu[0], gamma = mu[1], k = spec.k_dno, T = spec.bath_temp;
      f.q = {x.p[0] / m};
      f.p = {-k * std::sin(x.q[0]) - gamma * x.p[0]};
      f.s = {gamma * x.p[0] * x.p[0] / (m * T)};
      break;
    }
    case SystemId::Tgc: {
      const double m = mu[0], alpha = mu[1];
      const double q = x.q[0];
      const double v1 = q * spec.cross_section;
      const double v2 = (2.0 * spec.half_length - q) * spec.cross_section;
      const double e1 = tgc_internal_energy(spec, x.s[0], v1);
      const double e2 = tgc_internal_energy(spec, x.s[1], v2);
      const double nkb2 = spec.nkb * spec.nkb;
      const double dq = x.p[0] / m;
      const double dp = (2.0 / 3.0) * (e1 / q - e2 / (2.0 * spec.half_length - q));
      // Heat exchange written against 1/T_i = 3 N k_B / (2 E_i); this is the
      // friction-matrix contraction, which conserves the total energy and
      // produces entropy at rate alpha (1/T1 - 1/T2)^2.
      const double d = 1.0 / e1 - 1.0 / e2;
      const double ds1 = (9.0 * nkb2 * alpha / 4.0) * d / e1;
      const double ds2 = -(9.0 * nkb2 * alpha / 4.0) * d / e2;
      f.q = {dq};
      f.p = {dp};
      f.s = {ds1, ds2};
      break;
    }
  }
  return f;
}

double hamiltonian(const SystemSpec& spec, const State& x, const std::vector<double>& mu) {
  check_mu(spec, mu, false);
  switch (spec.id) {
    case SystemId::MassSpring: {
      const double m = mu[0], k = mu[1];
      return x.p[0] * x.p[0] / (2.0 * m) + k * x.q[0] * x.q[0] / 2.0;
    }
    case SystemId::Pendulum: {
      const double m = mu[0], l = mu[1], g = spec.gravity;
      const double denom = spec.pendulum_ml2 ? 2.0 * m * l * l : 2.0 * m * l;
      return x.p[0] * x.p[0] / denom + m * g * l * (1.0 - std::cos(x.q[0]));
    }
    case SystemId::Duffing: {
      const double alpha = mu[0], beta = mu[1];
      const double q2 = x.q[0] * x.q[0];
      return 0.5 * x.p[0] * x.p[0] + alpha * q2 * q2 / 4.0 + beta * q2 / 2.0;
    }
    case SystemId::Kepler: {
      const double m1 = mu[0], m2 = mu[1], G = spec.grav_const;
      const double p2 = x.p[0] * x.p[0] + x.p[1] * x.p[1];
      const double r = std::sqrt(x.q[0] * x.q[0] + x.q[1] * x.q[1]);
      return p2 / (2.0 * m2) - G * m1 * m2 / r;
    }
    default:
      throw ConfigError("hamiltonian: " + system_name(spec.id) + " is not a Hamiltonian system");
  }
}

double generic_energy(const SystemSpec& spec, const State& x, const std::vector<double>& mu) {
  check_mu(spec, mu, false);
  switch (spec.id) {
    case SystemId::Dno: {
      const double m = mu[0];
      return x.p[0] * x.p[0] / (2.0 * m) - spec.k_dno * std::cos(x.q[0]) +
             spec.bath_temp * x.s[0];
    }
    case SystemId::Tgc: {
      const double m = mu[0];
      const double q = x.q[0];
      const double e1 = tgc_internal_energy(spec, x.s[0], q * spec.cross_section);
      const double e2 =
          tgc_internal_energy(spec, x.s[1], (2.0 * spec.half_length - q) * spec.cross_section);
      return x.p[0] * x.p[0] / (2.0 * m) + e1 + e2;
    }
    default:
      throw ConfigError("generic_energy: " + system_name(spec.id) + " is not a GENERIC system");
  }
}

double generic_entropy(const State& x) {
  double s = 0.0;
  for (double v : x.s) s += v;
  return s;
}

namespace {

State axpy(const State& x, double a, const State& d) {
  State out = x;
  for (std::size_t i = 0; i < out.q.size(); ++i) out.q[i] += a * d.q[i];
  for (std::size_t i = 0; i < out.p.size(); ++i) out.p[i] += a * d.p[i];
  for (std::size_t i = 0; i < out.s.size(); ++i) out.s[i] += a * d.s[i];
  return out;
}

}  // namespace

std::vector<State> rk4_integrate(const FieldFn& field, const State& initial, double dt,
                                 int n_steps) {
  if (!(dt > 0.0)) throw ConfigError("rk4: dt must be positive");
  if (n_steps < 1) throw ConfigError("rk4: n_steps must be at least 1");
  std::vector<State> out;
  out.reserve(n_steps + 1);
  out.push_back(initial);
  State x = initial;
  for (int step = 0; step < n_steps; ++step) {
    State k1 = field(x);
    State k2 = field(axpy(x, 0.5 * dt, k1));
    State k3 = field(axpy(x, 0.5 * dt, k2));
    State k4 = field(axpy(x, dt, k3));
    State next = x;
    for (std::size_t i = 0; i < x.q.size(); ++i)
      next.q[i] += dt / 6.0 * (k1.q[i] + 2 * k2.q[i] + 2 * k3.q[i] + k4.q[i]);
    for (std::size_t i = 0; i < x.p.size(); ++i)
      next.p[i] += dt / 6.0 * (k1.p[i] + 2 * k2.p[i] + 2 * k3.p[i] + k4.p[i]);
    for (std::size_t i = 0; i < x.s.size(); ++i)
      next.s[i] += dt / 6.0 * (k1.s[i] + 2 * k2.s[i] + 2 * k3.s[i] + k4.s[i]);
    if (!next.all_finite())
      throw NumericError("rk4: integration blew up at step " + std::to_string(step + 1));
    out.push_back(next);
    x = std::move(next);
  }
  return out;
}

std::vector<State> rk4_integrate(const SystemSpec& spec, const std::vector<double>& mu,
                                 const State& initial, double dt, int n_steps) {
  return rk4_integrate([&](const State& x) { return true_field(spec, x, mu); }, initial, dt,
                       n_steps);
}

std::vector<State> finite_difference(const std::vector<State>& states, double dt) {
  if (states.size() < 3)
    throw DataError("finite_difference: need at least 3 states, got " +
                    std::to_string(states.size()));
  std::vector<State> labels;
  labels.reserve(states.size() - 2);
  const double inv = 1.0 / (2.0 * dt);
  for (std::size_t j = 1; j + 1 < states.size(); ++j) {
    State d;
    d.q.resize(states[j].q.size());
    d.p.resize(states[j].p.size());
    d.s.resize(states[j].s.size());
    for (std::size_t i = 0; i < d.q.size(); ++i)
      d.q[i] = (states[j + 1].q[i] - states[j - 1].q[i]) * inv;
    for (std::size_t i = 0; i < d.p.size(); ++i)
      d.p[i] = (states[j + 1].p[i] - states[j - 1].p[i]) * inv;
    for (std::size_t i = 0; i < d.s.size(); ++i)
      d.s[i] = (states[j + 1].s[i] - states[j - 1].s[i]) * inv;
    labels.push_back(std::move(d));
  }
  return labels;
}

std::vector<double> sample_task(const SystemSpec& spec, RngStream& rng) {
  std::vector<double> mu;
  mu.reserve(spec.mu_range.size());
  for (const auto& r : spec.mu_range) mu.push_back(rng.uniform(r.lo, r.hi));
  return mu;
}

State sample_initial(const SystemSpec& spec, RngStream& rng, const std::vector<double>& mu) {
  State x;
  switch (spec.id) {
    case SystemId::MassSpring:
    case SystemId::Pendulum:
    case SystemId::Duffing:
      x.q = {rng.uniform(spec.init_range[0].lo, spec.init_range[0].hi)};
      x.p = {rng.uniform(spec.init_range[1].lo, spec.init_range[1].hi)};
      break;
    case SystemId::Kepler: {
      const double r = rng.uniform(spec.init_range[0].lo, spec.init_range[0].hi);
      const double theta = rng.uniform(spec.init_range[1].lo, spec.init_range[1].hi);
      const double f_min = std::sqrt((1.0 - spec.e_max) / (1.0 + spec.e_max));
      const double f = rng.uniform(f_min, 1.0);
      // Circular speed at the sampled radius; the momentum is tangential and
      // scaled by f, which bounds the eccentricity away from 1.
      const double v_c = std::sqrt(spec.grav_const * mu[0] / r);
      const double v0 = f * v_c;
      x.q = {r * std::cos(theta), r * std::sin(theta)};
      x.p = {-mu[1] * v0 * std::sin(theta), spec.rho_y * mu[1] * v0 * std::cos(theta)};
      break;
    }
    case SystemId::Dno:
      x.q = {rng.uniform(spec.init_range[0].lo, spec.init_range[0].hi)};
      x.p = {rng.uniform(spec.init_range[1].lo, spec.init_range[1].hi)};
      x.s = {0.0};
      break;
    case SystemId::Tgc: {
      x.q = {rng.uniform(spec.init_range[0].lo, spec.init_range[0].hi)};
      x.p = {rng.uniform(spec.init_range[1].lo, spec.init_range[1].hi)};
      const double s0 = spec.c_hat + std::log(2.0);
      x.s = {s0, s0};
      break;
    }
  }
  return x;
}

}  // namespace latdyn
