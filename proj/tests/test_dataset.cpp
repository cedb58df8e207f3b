#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "core/dataset.hpp"
#include "core/errors.hpp"

using namespace latdyn;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

bool same_task(const TaskDataset& a, const TaskDataset& b) {
  if (a.index != b.index || a.mu != b.mu) return false;
  if (a.adaptation.size() != b.adaptation.size()) return false;
  if (a.performance.size() != b.performance.size()) return false;
  auto same_traj = [](const Trajectory& x, const Trajectory& y) {
    if (x.states.size() != y.states.size()) return false;
    for (std::size_t j = 0; j < x.states.size(); ++j)
      if (x.states[j].flat() != y.states[j].flat()) return false;
    for (std::size_t j = 0; j < x.labels.size(); ++j)
      if (x.labels[j].flat() != y.labels[j].flat()) return false;
    return true;
  };
  for (std::size_t i = 0; i < a.adaptation.size(); ++i)
    if (!same_traj(a.adaptation[i], b.adaptation[i])) return false;
  for (std::size_t i = 0; i < a.performance.size(); ++i)
    if (!same_traj(a.performance[i], b.performance[i])) return false;
  return true;
}

}  // namespace

TEST_CASE("split counts are honored exactly") {
  SystemSpec spec = SystemSpec::defaults(SystemId::MassSpring);
  DatasetSplit ds = build_dataset(spec, SplitCounts{4, 1, 1}, 2, 7);
  CHECK(ds.train.size() == 4);
  CHECK(ds.val.size() == 1);
  CHECK(ds.test.size() == 1);
  // Disjoint task indices across splits.
  CHECK(ds.val[0].index == 4);
  CHECK(ds.test[0].index == 5);
  // Performance sets only on test tasks.
  CHECK(ds.train[0].performance.empty());
  CHECK(ds.test[0].performance.size() == 2);
  CHECK(ds.test[0].adaptation.size() == 2);
  for (const auto& t : ds.test[0].performance) CHECK(t.role == Trajectory::Role::Performance);
}

TEST_CASE("generation is deterministic in the seed") {
  SystemSpec spec = SystemSpec::defaults(SystemId::Duffing);
  DatasetSplit a = build_dataset(spec, SplitCounts{2, 1, 1}, 3, 42);
  DatasetSplit b = build_dataset(spec, SplitCounts{2, 1, 1}, 3, 42);
  DatasetSplit c = build_dataset(spec, SplitCounts{2, 1, 1}, 3, 43);
  for (std::size_t i = 0; i < a.train.size(); ++i) CHECK(same_task(a.train[i], b.train[i]));
  CHECK(same_task(a.test[0], b.test[0]));
  CHECK_FALSE(a.train[0].mu == c.train[0].mu);
}

TEST_CASE("trajectory shape contract") {
  SystemSpec spec = SystemSpec::defaults(SystemId::Dno);
  DatasetSplit ds = build_dataset(spec, SplitCounts{1, 0, 0}, 1, 5);
  const Trajectory& t = ds.train[0].adaptation[0];
  CHECK(t.states.size() == static_cast<std::size_t>(spec.n_steps() + 1));
  CHECK(t.labels.size() == t.states.size() - 2);
  CHECK(t.dt == spec.dt);
}

TEST_CASE("save and load round-trip; resaving is byte-identical") {
  SystemSpec spec = SystemSpec::defaults(SystemId::MassSpring);
  DatasetSplit ds = build_dataset(spec, SplitCounts{2, 1, 1}, 2, 11);
  fs::path dir = fs::temp_directory_path() / "latdyn_test_dataset";
  fs::remove_all(dir);
  save_dataset(ds, dir);

  CHECK_THROWS_AS(save_dataset(ds, dir), DataError);  // non-empty, no force

  DatasetSplit back = load_dataset(dir);
  CHECK(back.spec.hash() == spec.hash());
  CHECK(back.n_traj == 2);
  REQUIRE(back.train.size() == 2);
  for (std::size_t i = 0; i < ds.train.size(); ++i) CHECK(same_task(ds.train[i], back.train[i]));
  CHECK(same_task(ds.test[0], back.test[0]));

  fs::path dir2 = fs::temp_directory_path() / "latdyn_test_dataset2";
  fs::remove_all(dir2);
  save_dataset(back, dir2);
  CHECK(slurp(dir / "manifest.json") == slurp(dir2 / "manifest.json"));
  CHECK(slurp(dir / "train" / "task_0.jsonl") == slurp(dir2 / "train" / "task_0.jsonl"));
  CHECK(slurp(dir / "test" / "task_3.jsonl") == slurp(dir2 / "test" / "task_3.jsonl"));

  CHECK(dataset_manifest_hash(dir) == spec.hash());
  fs::remove_all(dir);
  fs::remove_all(dir2);
}
