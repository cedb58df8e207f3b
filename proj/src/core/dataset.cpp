#include "core/dataset.hpp"

#include <fstream>

#include "core/errors.hpp"

#include "json.hpp"

namespace latdyn {

namespace {

Trajectory make_trajectory(const SystemSpec& spec, const std::vector<double>& mu,
                           const State& initial, Trajectory::Role role) {
  const int n_steps = spec.n_steps();
  const int sub = std::max(1, spec.substeps);
  std::vector<State> fine =
      rk4_integrate(spec, mu, initial, spec.dt / sub, n_steps * sub);
  Trajectory t;
  t.mu = mu;
  t.dt = spec.dt;
  t.role = role;
  t.states.reserve(n_steps + 1);
  for (int j = 0; j <= n_steps; ++j) t.states.push_back(std::move(fine[j * sub]));
  t.labels = finite_difference(t.states, spec.dt);
  return t;
}

TaskDataset make_task(const SystemSpec& spec, int index, int n_traj, bool with_performance,
                      const RngStream& root) {
  RngStream task_stream = root.derive(static_cast<std::uint64_t>(index));
  RngStream mu_stream = task_stream.derive("mu");
  TaskDataset task;
  task.index = index;
  task.mu = sample_task(spec, mu_stream);
  RngStream adapt_stream = task_stream.derive("adapt");
  for (int i = 0; i < n_traj; ++i) {
    RngStream traj = adapt_stream.derive(static_cast<std::uint64_t>(i));
    task.adaptation.push_back(
        make_trajectory(spec, task.mu, sample_initial(spec, traj, task.mu),
                        Trajectory::Role::Adaptation));
  }
  if (with_performance) {
    RngStream perf_stream = task_stream.derive("perf");
    for (int i = 0; i < n_traj; ++i) {
      RngStream traj = perf_stream.derive(static_cast<std::uint64_t>(i));
      task.performance.push_back(
          make_trajectory(spec, task.mu, sample_initial(spec, traj, task.mu),
                          Trajectory::Role::Performance));
    }
  }
  return task;
}

}  // namespace

DatasetSplit build_dataset(const SystemSpec& spec, SplitCounts counts, int n_traj,
                           std::uint64_t seed) {
  if (counts.train < 0 || counts.val < 0 || counts.test < 0 || counts.total() < 1)
    throw ConfigError("build_dataset: invalid split counts");
  if (n_traj < 1) throw ConfigError("build_dataset: n_traj must be at least 1");
  DatasetSplit ds;
  ds.spec = spec;
  ds.seed = seed;
  ds.n_traj = n_traj;
  RngStream root = RngStream(seed).derive("dataset").derive(system_name(spec.id));
  int k = 0;
  for (int i = 0; i < counts.train; ++i) ds.train.push_back(make_task(spec, k++, n_traj, false, root));
  for (int i = 0; i < counts.val; ++i) ds.val.push_back(make_task(spec, k++, n_traj, false, root));
  for (int i = 0; i < counts.test; ++i) ds.test.push_back(make_task(spec, k++, n_traj, true, root));
  return ds;
}

namespace {

nlohmann::json states_to_flat(const std::vector<State>& states) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& st : states)
    for (double v : st.flat()) a.push_back(v);
  return a;
}

std::vector<State> states_from_flat(const nlohmann::json& a, std::size_t count, std::size_t nq,
                                    std::size_t np, std::size_t ns) {
  const std::size_t dim = nq + np + ns;
  if (a.size() != count * dim) throw DataError("dataset: trajectory length mismatch");
  std::vector<State> states;
  states.reserve(count);
  std::vector<double> x(dim);
  for (std::size_t j = 0; j < count; ++j) {
    for (std::size_t i = 0; i < dim; ++i) x[i] = a[j * dim + i].get<double>();
    states.push_back(State::from_flat(x, nq, np, ns));
  }
  return states;
}

void save_task(const TaskDataset& task, const SystemSpec& spec, std::uint64_t seed,
               const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw DataError("dataset: cannot open " + file.string() + " for writing");
  nlohmann::json meta;
  meta["task"] = task.index;
  meta["system"] = system_name(spec.id);
  meta["mu"] = task.mu;
  meta["dt"] = spec.dt;
  meta["n_seq"] = spec.n_steps() + 1;
  meta["n_adaptation"] = task.adaptation.size();
  meta["n_performance"] = task.performance.size();
  meta["seed_path"] = {seed, static_cast<std::uint64_t>(task.index)};
  out << meta.dump() << "\n";
  auto dump_traj = [&](const Trajectory& t) {
    nlohmann::json j;
    j["role"] = (t.role == Trajectory::Role::Adaptation) ? "adaptation" : "performance";
    j["states"] = states_to_flat(t.states);
    j["labels"] = states_to_flat(t.labels);
    out << j.dump() << "\n";
  };
  for (const auto& t : task.adaptation) dump_traj(t);
  for (const auto& t : task.performance) dump_traj(t);
}

TaskDataset load_task(const SystemSpec& spec, const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw DataError("dataset: cannot open " + file.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError("dataset: empty task file " + file.string());
  nlohmann::json meta = nlohmann::json::parse(line);
  TaskDataset task;
  task.index = meta.at("task").get<int>();
  task.mu = meta.at("mu").get<std::vector<double>>();
  const std::size_t n_seq = meta.at("n_seq").get<std::size_t>();
  const std::size_t nq = spec.n_q(), np = spec.n_p(), ns = spec.n_s();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    Trajectory t;
    t.mu = task.mu;
    t.dt = spec.dt;
    t.role = (j.at("role").get<std::string>() == "adaptation") ? Trajectory::Role::Adaptation
                                                               : Trajectory::Role::Performance;
    t.states = states_from_flat(j.at("states"), n_seq, nq, np, ns);
    t.labels = states_from_flat(j.at("labels"), n_seq - 2, nq, np, ns);
    (t.role == Trajectory::Role::Adaptation ? task.adaptation : task.performance)
        .push_back(std::move(t));
  }
  if (task.adaptation.size() != meta.at("n_adaptation").get<std::size_t>() ||
      task.performance.size() != meta.at("n_performance").get<std::size_t>())
    throw DataError("dataset: trajectory counts in " + file.string() + " do not match header");
  return task;
}

}  // namespace

void save_dataset(const DatasetSplit& ds, const std::filesystem::path& dir, bool force) {
  namespace fs = std::filesystem;
  if (fs::exists(dir) && !fs::is_empty(dir) && !force)
    throw DataError("dataset: " + dir.string() + " exists and is not empty (use force)");
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["system"] = system_name(ds.spec.id);
  manifest["spec"] = nlohmann::json::parse(ds.spec.to_json());
  manifest["spec_hash"] = ds.spec.hash();
  manifest["seed"] = ds.seed;
  manifest["n_traj"] = ds.n_traj;
  manifest["counts"] = {{"train", ds.train.size()}, {"val", ds.val.size()}, {"test", ds.test.size()}};
  std::ofstream mf(dir / "manifest.json");
  if (!mf) throw DataError("dataset: cannot write manifest in " + dir.string());
  mf << manifest.dump(2) << "\n";
  auto save_split = [&](const std::vector<TaskDataset>& tasks, const char* name) {
    fs::create_directories(dir / name);
    for (const auto& t : tasks)
      save_task(t, ds.spec, ds.seed, dir / name / ("task_" + std::to_string(t.index) + ".jsonl"));
  };
  save_split(ds.train, "train");
  save_split(ds.val, "val");
  save_split(ds.test, "test");
}

DatasetSplit load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw DataError("dataset: no manifest in " + dir.string());
  nlohmann::json manifest = nlohmann::json::parse(mf);
  DatasetSplit ds;
  ds.spec = SystemSpec::from_json(manifest.at("spec").dump());
  ds.seed = manifest.at("seed").get<std::uint64_t>();
  ds.n_traj = manifest.at("n_traj").get<int>();
  auto load_split = [&](std::vector<TaskDataset>& tasks, const char* name, std::size_t count) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir / name)) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) tasks.push_back(load_task(ds.spec, f));
    std::sort(tasks.begin(), tasks.end(),
              [](const TaskDataset& a, const TaskDataset& b) { return a.index < b.index; });
    if (tasks.size() != count)
      throw DataError("dataset: split " + std::string(name) + " has wrong task count");
  };
  load_split(ds.train, "train", manifest.at("counts").at("train").get<std::size_t>());
  load_split(ds.val, "val", manifest.at("counts").at("val").get<std::size_t>());
  load_split(ds.test, "test", manifest.at("counts").at("test").get<std::size_t>());
  return ds;
}

std::uint64_t dataset_manifest_hash(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw DataError("dataset: no manifest in " + dir.string());
  nlohmann::json manifest = nlohmann::json::parse(mf);
  return manifest.at("spec_hash").get<std::uint64_t>();
}

}  // namespace latdyn
