#include "core/metrics.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "core/errors.hpp"

#include "json.hpp"

namespace latdyn {

MeshSpec MeshSpec::defaults(SystemId id) {
  MeshSpec m;
  switch (id) {
    case SystemId::MassSpring:
      m.bounds = {{-10, 10}, {-10, 10}};
      m.counts = {100, 100};
      break;
    case SystemId::Pendulum:
      m.bounds = {{-6, 6}, {-20, 20}};
      m.counts = {100, 100};
      break;
    case SystemId::Duffing:
      m.bounds = {{-3, 3}, {-3, 3}};
      m.counts = {100, 100};
      break;
    case SystemId::Kepler:
      // The benchmark reports no mesh metrics for the 4-D Kepler phase
      // space; a coarse box around the sampled orbits is provided for field
      // export.
      m.bounds = {{-3, 3}, {-3, 3}, {-2, 2}, {-2, 2}};
      m.counts = {20, 20, 10, 10};
      break;
    case SystemId::Dno:
      m.bounds = {{-8, 8}, {-1, 1}, {0, 3}};
      m.counts = {30, 30, 30};
      break;
    case SystemId::Tgc:
      m.bounds = {{0.5, 1.5}, {-1.5, 1.5}, {103, 103.8}, {103, 103.8}};
      m.counts = {30, 30, 30, 30};
      break;
  }
  return m;
}

std::size_t MeshSpec::total() const {
  std::size_t t = 1;
  for (int c : counts) t *= std::size_t(c);
  return t;
}

Tensor MeshSpec::points() const {
  const std::size_t dim = counts.size();
  Tensor pts = Tensor::zeros({total(), dim});
  std::vector<std::size_t> idx(dim, 0);
  for (std::size_t r = 0; r < total(); ++r) {
    for (std::size_t d = 0; d < dim; ++d) {
      const int n = counts[d];
      const double t = (n == 1) ? 0.0 : double(idx[d]) / double(n - 1);
      pts.at(r, d) = bounds[d].lo + t * (bounds[d].hi - bounds[d].lo);
    }
    for (std::size_t d = dim; d-- > 0;) {
      if (++idx[d] < std::size_t(counts[d])) break;
      idx[d] = 0;
    }
  }
  return pts;
}

FieldEval analytic_field_eval(const SystemSpec& spec, const std::vector<double>& mu) {
  return [spec, mu](const Tensor& states) {
    const std::size_t nq = spec.n_q(), np = spec.n_p(), ns = spec.n_s();
    Tensor out = Tensor::zeros(states.shape());
    std::vector<double> x(states.dim(1));
    for (std::size_t r = 0; r < states.dim(0); ++r) {
      for (std::size_t c = 0; c < x.size(); ++c) x[c] = states.at(r, c);
      State f = true_field(spec, State::from_flat(x, nq, np, ns), mu);
      const auto fv = f.flat();
      for (std::size_t c = 0; c < fv.size(); ++c) out.at(r, c) = fv[c];
    }
    return out;
  };
}

namespace {

Tensor stack_states(const Trajectory& t) {
  const std::size_t dim = t.states.front().dim();
  Tensor out = Tensor::zeros({t.states.size(), dim});
  for (std::size_t j = 0; j < t.states.size(); ++j) {
    const auto x = t.states[j].flat();
    for (std::size_t c = 0; c < dim; ++c) out.at(j, c) = x[c];
  }
  return out;
}

double l2(const Tensor& t) {
  double acc = 0.0;
  for (double v : t.vec()) acc += v * v;
  return std::sqrt(acc);
}

double l2_diff(const Tensor& a, const Tensor& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a.vec()[i] - b.vec()[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

}  // namespace

double eps_traj(const SystemSpec& spec, const std::vector<EvalCase>& cases, MetricOptions opts) {
  if (cases.empty()) throw DataError("eps_traj: no evaluation cases");
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& c : cases) {
    const auto& trajs =
        c.task->performance.empty() ? c.task->adaptation : c.task->performance;
    FieldEval truth = analytic_field_eval(spec, c.task->mu);
    for (const auto& t : trajs) {
      Tensor states = stack_states(t);
      Tensor ref = truth(states);
      const double denom = l2(ref);
      if (denom == 0.0) {
        if (opts.excluded) ++*opts.excluded;
        continue;
      }
      Tensor pred = c.field(states);
      total += l2_diff(ref, pred) / denom;
      ++count;
    }
  }
  if (count == 0) throw DataError("eps_traj: every trajectory was excluded");
  return total / double(count);
}

double eps_field(const SystemSpec& spec, const std::vector<EvalCase>& cases, const MeshSpec& mesh,
                 MetricOptions opts) {
  if (cases.empty()) throw DataError("eps_field: no evaluation cases");
  Tensor pts = mesh.points();
  const std::size_t dim = pts.dim(1);
  const std::size_t nq = spec.n_q(), np = spec.n_p(), ns = spec.n_s();
  if (dim != spec.dim())
    throw ShapeError("eps_field: mesh dimension does not match the system state");

  double total = 0.0;
  for (const auto& c : cases) {
    // Valid rows: points where the analytic field is defined.
    std::vector<std::size_t> valid;
    Tensor ref = Tensor::zeros(pts.shape());
    std::vector<double> x(dim);
    for (std::size_t r = 0; r < pts.dim(0); ++r) {
      for (std::size_t cdim = 0; cdim < dim; ++cdim) x[cdim] = pts.at(r, cdim);
      try {
        State f = true_field(spec, State::from_flat(x, nq, np, ns), c.task->mu);
        const auto fv = f.flat();
        for (std::size_t cdim = 0; cdim < dim; ++cdim) ref.at(r, cdim) = fv[cdim];
        valid.push_back(r);
      } catch (const NumericError&) {
        if (opts.excluded) ++*opts.excluded;
      }
    }
    if (valid.empty()) throw DataError("eps_field: analytic field undefined on the whole mesh");
    double num = 0.0, den = 0.0;
    for (std::size_t start = 0; start < valid.size(); start += std::size_t(opts.chunk)) {
      const std::size_t end = std::min(valid.size(), start + std::size_t(opts.chunk));
      Tensor chunk = Tensor::zeros({end - start, dim});
      for (std::size_t i = start; i < end; ++i)
        for (std::size_t cdim = 0; cdim < dim; ++cdim)
          chunk.at(i - start, cdim) = pts.at(valid[i], cdim);
      Tensor pred = c.field(chunk);
      for (std::size_t i = start; i < end; ++i)
        for (std::size_t cdim = 0; cdim < dim; ++cdim) {
          const double rv = ref.at(valid[i], cdim);
          const double d = rv - pred.at(i - start, cdim);
          num += d * d;
          den += rv * rv;
        }
    }
    if (den == 0.0) throw DataError("eps_field: reference field has zero norm on the mesh");
    total += std::sqrt(num) / std::sqrt(den);
  }
  return total / double(cases.size());
}

FieldRaster rasterize_field(const FieldEval& field, const MeshSpec& mesh) {
  if (mesh.counts.size() != 2)
    throw ShapeError("rasterize_field: raster requires a 2-D mesh");
  Tensor pts = mesh.points();
  Tensor vals = field(pts);
  FieldRaster r;
  r.n0 = mesh.counts[0];
  r.n1 = mesh.counts[1];
  r.channels = int(vals.dim(1));
  r.data.assign(vals.vec().begin(), vals.vec().end());
  return r;
}

double ssim(const FieldRaster& truth, const FieldRaster& model, SsimOptions opts) {
  if (truth.n0 != model.n0 || truth.n1 != model.n1 || truth.channels != model.channels)
    throw ShapeError("ssim: raster shapes differ");
  const int w = opts.window;
  if (truth.n0 < w || truth.n1 < w)
    throw ShapeError("ssim: grid smaller than the " + std::to_string(w) + "x" +
                     std::to_string(w) + " window");
  double acc = 0.0;
  for (int ch = 0; ch < truth.channels; ++ch) {
    double range;
    if (!opts.range.empty()) {
      range = opts.range[std::size_t(ch) < opts.range.size() ? ch : opts.range.size() - 1];
    } else {
      double lo = truth.at(0, 0, ch), hi = lo;
      for (int i = 0; i < truth.n0; ++i)
        for (int j = 0; j < truth.n1; ++j) {
          lo = std::min(lo, truth.at(i, j, ch));
          hi = std::max(hi, truth.at(i, j, ch));
        }
      range = hi - lo;
    }
    if (range <= 0.0) range = 1.0;
    const double c1 = (opts.k1 * range) * (opts.k1 * range);
    const double c2 = (opts.k2 * range) * (opts.k2 * range);
    const double inv_n = 1.0 / double(w * w);
    double ch_acc = 0.0;
    std::size_t windows = 0;
    for (int i0 = 0; i0 + w <= truth.n0; ++i0) {
      for (int j0 = 0; j0 + w <= truth.n1; ++j0) {
        double ma = 0.0, mb = 0.0;
        for (int i = 0; i < w; ++i)
          for (int j = 0; j < w; ++j) {
            ma += truth.at(i0 + i, j0 + j, ch);
            mb += model.at(i0 + i, j0 + j, ch);
          }
        ma *= inv_n;
        mb *= inv_n;
        double va = 0.0, vb = 0.0, cov = 0.0;
        for (int i = 0; i < w; ++i)
          for (int j = 0; j < w; ++j) {
            const double da = truth.at(i0 + i, j0 + j, ch) - ma;
            const double db = model.at(i0 + i, j0 + j, ch) - mb;
            va += da * da;
            vb += db * db;
            cov += da * db;
          }
        va *= inv_n;
        vb *= inv_n;
        cov *= inv_n;
        ch_acc += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                  ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++windows;
      }
    }
    acc += ch_acc / double(windows);
  }
  return acc / double(truth.channels);
}

double ssim_against_truth(const SystemSpec& spec, const std::vector<EvalCase>& cases,
                          const MeshSpec& mesh, SsimOptions opts) {
  if (mesh.counts.size() != 2)
    throw ShapeError("ssim_against_truth: SSIM is defined on 2-D meshes only");
  double acc = 0.0;
  for (const auto& c : cases) {
    FieldRaster truth = rasterize_field(analytic_field_eval(spec, c.task->mu), mesh);
    FieldRaster model = rasterize_field(c.field, mesh);
    acc += ssim(truth, model, opts);
  }
  return acc / double(cases.size());
}

void export_field(const std::filesystem::path& path, const SystemSpec& spec, const MeshSpec& mesh,
                  const FieldEval& model, const FieldEval* truth) {
  std::ofstream out(path);
  if (!out) throw DataError("export_field: cannot open " + path.string());
  nlohmann::json header;
  header["system"] = system_name(spec.id);
  nlohmann::json jm;
  jm["bounds"] = nlohmann::json::array();
  for (const auto& b : mesh.bounds) jm["bounds"].push_back({b.lo, b.hi});
  jm["counts"] = mesh.counts;
  header["mesh"] = jm;
  header["has_truth"] = (truth != nullptr);
  out << header.dump() << "\n";

  Tensor pts = mesh.points();
  Tensor mv = model(pts);
  Tensor tv = truth ? (*truth)(pts) : Tensor();
  char buf[32];
  auto emit = [&](double v) {
    snprintf(buf, sizeof buf, "%.17g", v);
    out << buf;
  };
  for (std::size_t r = 0; r < pts.dim(0); ++r) {
    for (std::size_t c = 0; c < pts.dim(1); ++c) {
      if (c) out << " ";
      emit(pts.at(r, c));
    }
    if (truth) {
      out << " |";
      for (std::size_t c = 0; c < tv.dim(1); ++c) {
        out << " ";
        emit(tv.at(r, c));
      }
    }
    out << " |";
    for (std::size_t c = 0; c < mv.dim(1); ++c) {
      out << " ";
      emit(mv.at(r, c));
    }
    out << "\n";
  }
}

FieldExport load_field_export(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("load_field_export: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError("load_field_export: empty file");
  nlohmann::json header = nlohmann::json::parse(line);
  FieldExport fe;
  for (const auto& b : header.at("mesh").at("bounds"))
    fe.mesh.bounds.push_back({b.at(0).get<double>(), b.at(1).get<double>()});
  fe.mesh.counts = header.at("mesh").at("counts").get<std::vector<int>>();
  const bool has_truth = header.at("has_truth").get<bool>();
  const std::size_t dim = fe.mesh.counts.size();
  const std::size_t total = fe.mesh.total();
  fe.points = Tensor::zeros({total, dim});
  fe.model = Tensor::zeros({total, dim});
  if (has_truth) fe.truth = Tensor::zeros({total, dim});
  std::size_t r = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (r >= total) throw DataError("load_field_export: more rows than mesh points");
    std::istringstream is(line);
    std::string tok;
    for (std::size_t c = 0; c < dim; ++c) {
      is >> tok;
      fe.points.at(r, c) = std::stod(tok);
    }
    is >> tok;  // separator
    if (has_truth) {
      for (std::size_t c = 0; c < dim; ++c) {
        is >> tok;
        fe.truth->at(r, c) = std::stod(tok);
      }
      is >> tok;
    }
    for (std::size_t c = 0; c < dim; ++c) {
      is >> tok;
      fe.model.at(r, c) = std::stod(tok);
    }
    ++r;
  }
  if (r != total) throw DataError("load_field_export: fewer rows than mesh points");
  return fe;
}

}  // namespace latdyn
