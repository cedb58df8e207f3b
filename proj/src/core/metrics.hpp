#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "core/dataset.hpp"
#include "core/systems.hpp"
#include "core/tensor.hpp"

namespace latdyn {

// Evaluation mesh: closed interval plus point count per dimension; flattened
// row-major with the last dimension fastest.
struct MeshSpec {
  std::vector<Interval> bounds;
  std::vector<int> counts;

  static MeshSpec defaults(SystemId id);
  std::size_t total() const;
  Tensor points() const;  // total x dim
};

// Batched field evaluator: rows of flat states -> rows of field vectors.
using FieldEval = std::function<Tensor(const Tensor& states)>;

FieldEval analytic_field_eval(const SystemSpec& spec, const std::vector<double>& mu);

// One adapted model (or oracle) paired with the task it is evaluated on.
struct EvalCase {
  const TaskDataset* task = nullptr;
  FieldEval field;
};

struct MetricOptions {
  int chunk = 4096;       // mesh evaluation chunk size
  int* excluded = nullptr;  // optional counter for skipped trajectories/points
};

// Relative trajectory error: per trajectory, the analytic and model fields
// are stacked over every state before taking norms; trajectories with a
// zero-norm reference are excluded. Performance trajectories are used when
// present (test tasks), adaptation trajectories otherwise.
double eps_traj(const SystemSpec& spec, const std::vector<EvalCase>& cases,
                MetricOptions opts = {});

// Relative field error on the mesh, averaged over tasks. Mesh points where
// the analytic field is undefined (TGC volume/energy domain) are excluded
// and counted.
double eps_field(const SystemSpec& spec, const std::vector<EvalCase>& cases, const MeshSpec& mesh,
                 MetricOptions opts = {});

// 2-D vector-field raster: values[i0][i1][channel] on the mesh grid.
struct FieldRaster {
  int n0 = 0, n1 = 0, channels = 0;
  std::vector<double> data;

  double at(int i0, int i1, int c) const {
    return data[(std::size_t(i0) * n1 + i1) * channels + c];
  }
};

FieldRaster rasterize_field(const FieldEval& field, const MeshSpec& mesh);

struct SsimOptions {
  int window = 7;
  double k1 = 0.01;
  double k2 = 0.03;
  // Dynamic range per channel; empty means derived from the first raster
  // (the ground truth).
  std::vector<double> range;
};

// Mean SSIM over valid windows, channels averaged. Both rasters must share
// the grid; grids smaller than the window are an error.
double ssim(const FieldRaster& truth, const FieldRaster& model, SsimOptions opts = {});

// Mean SSIM of model vs truth over the default 2-D mesh of a system.
double ssim_against_truth(const SystemSpec& spec, const std::vector<EvalCase>& cases,
                          const MeshSpec& mesh, SsimOptions opts = {});

// Plot-ready export: header line with the mesh, then one line per grid point
// with coordinates, optional truth vector, and model vector. Lossless.
void export_field(const std::filesystem::path& path, const SystemSpec& spec, const MeshSpec& mesh,
                  const FieldEval& model, const FieldEval* truth = nullptr);

struct FieldExport {
  MeshSpec mesh;
  Tensor points;
  std::optional<Tensor> truth;
  Tensor model;
};
FieldExport load_field_export(const std::filesystem::path& path);

}  // namespace latdyn
