#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "core/systems.hpp"

namespace latdyn {

// One task = one parameter realization mu^(k) with its trajectory bundles.
// Performance trajectories (novel initial conditions) exist for test tasks.
struct TaskDataset {
  int index = 0;
  std::vector<double> mu;
  std::vector<Trajectory> adaptation;
  std::vector<Trajectory> performance;
};

struct DatasetSplit {
  SystemSpec spec;
  std::uint64_t seed = 0;
  int n_traj = 0;
  std::vector<TaskDataset> train, val, test;
};

struct SplitCounts {
  int train = 70;
  int val = 20;
  int test = 10;
  int total() const { return train + val + test; }
};

// Deterministic in (spec, counts, n_traj, seed): every task owns RNG streams
// derived from (seed, task index), so the result does not depend on
// generation order or thread count.
DatasetSplit build_dataset(const SystemSpec& spec, SplitCounts counts, int n_traj,
                           std::uint64_t seed);

// One directory per split, one task_<k>.jsonl per task, manifest.json at the
// root. Floats round-trip exactly.
void save_dataset(const DatasetSplit& ds, const std::filesystem::path& dir, bool force = false);
DatasetSplit load_dataset(const std::filesystem::path& dir);

// Manifest hash used by training to refuse mismatched datasets.
std::uint64_t dataset_manifest_hash(const std::filesystem::path& dir);

}  // namespace latdyn
