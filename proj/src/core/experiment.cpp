#include "core/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include "core/checkpoint.hpp"
#include "core/errors.hpp"

#include "json.hpp"

namespace latdyn {

namespace fs = std::filesystem;

namespace {

double now_s() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

const std::vector<std::string> kAllMethods = {"scratch", "maml", "reptile", "anil",
                                              "shift",   "fw",   "ro",      "mr"};

// Seeds are independent runs; on a multicore host two single-threaded seed
// runs beat one two-threaded run because the evaluation graphs contend for
// memory bandwidth, not cores. Results are merged by index so the outcome
// matches the sequential order exactly.
void for_each_seed(const ExperimentConfig& cfg, const std::function<void(std::uint64_t, int)>& fn) {
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  const bool parallel_seeds = cfg.seeds.size() > 1 && hw > 1 && cfg.meta.threads == 0;
  if (!parallel_seeds) {
    for (std::uint64_t seed : cfg.seeds) fn(seed, cfg.meta.threads);
    return;
  }
  const int workers = static_cast<int>(std::min<std::size_t>(hw, cfg.seeds.size()));
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(cfg.seeds.size());
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w]() {
      for (std::size_t i = std::size_t(w); i < cfg.seeds.size(); i += std::size_t(workers)) {
        try {
          fn(cfg.seeds[i], 1);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

bool known_method(const std::string& m) {
  return m == "oracle" ||
         std::find(kAllMethods.begin(), kAllMethods.end(), m) != kAllMethods.end();
}

std::vector<std::uint64_t> parse_seeds(const std::string& value) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(value);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) seeds.push_back(std::stoull(tok));
  }
  if (seeds.empty()) throw ConfigError("config: empty seed list");
  return seeds;
}

bool parse_bool(const std::string& v) {
  if (v == "1" || v == "true" || v == "on") return true;
  if (v == "0" || v == "false" || v == "off") return false;
  throw ConfigError("config: expected a boolean, got '" + v + "'");
}

}  // namespace

ExperimentConfig ExperimentConfig::with_preset(const std::string& preset) {
  ExperimentConfig cfg;
  cfg.preset = preset;
  cfg.meta.n_out = 10000;
  cfg.meta.n_in = 3;
  cfg.meta.n_val = 100;
  cfg.meta.n_cert = 250;
  cfg.meta.eta_out = 1e-3;
  cfg.meta.eta_in = 2e-3;
  cfg.meta.batch = 5;
  cfg.arch = ArchConfig{};
  if (preset == "paper") {
    cfg.n_mu = 100;
    cfg.split = SplitCounts{70, 20, 10};
    cfg.seeds = {0, 1, 2, 3, 4, 5, 6};
    cfg.arch.width = 100;
    cfg.arch.depth = 4;
  } else if (preset == "desk") {
    // Reduced scale: fewer tasks, a smaller network, and fewer outer
    // iterations; method orderings survive, absolute numbers do not.
    cfg.n_mu = 30;
    cfg.split = SplitCounts{20, 5, 5};
    cfg.seeds = {0, 1, 2};
    cfg.arch.width = 64;
    cfg.arch.depth = 3;
    cfg.meta.n_out = 2500;
  } else {
    throw ConfigError("config: unknown preset '" + preset + "' (paper|desk)");
  }
  return cfg;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  overrides.push_back(key);
  if (key == "preset") {
    auto saved_overrides = overrides;
    *this = with_preset(value);
    overrides = std::move(saved_overrides);
  } else if (key == "system") {
    system_from_name(value);  // validate
    system = value;
  } else if (key == "method") {
    if (!known_method(value)) throw ConfigError("config: unknown method '" + value + "'");
    method = value;
  } else if (key == "n_mu") {
    n_mu = std::stoi(value);
  } else if (key == "split") {
    // "train/val/test"
    SplitCounts c;
    if (std::sscanf(value.c_str(), "%d/%d/%d", &c.train, &c.val, &c.test) != 3)
      throw ConfigError("config: split must be train/val/test");
    split = c;
  } else if (key == "n_T" || key == "n_traj") {
    n_traj = std::stoi(value);
  } else if (key == "seeds") {
    seeds = parse_seeds(value);
  } else if (key == "zero_init") {
    zero_init = parse_bool(value);
  } else if (key == "shots") {
    shots = std::stoi(value);
  } else if (key == "force") {
    force = parse_bool(value);
  } else if (key == "export_rasters") {
    export_rasters = parse_bool(value);
  } else if (key == "additive_friction") {
    additive_friction = parse_bool(value);
  } else if (key == "reversible_only") {
    reversible_only = parse_bool(value);
  } else if (key == "pendulum_ml2") {
    pendulum_ml2 = parse_bool(value);
  } else if (key == "out_root") {
    out_root = value;
  } else if (key == "system_spec") {
    std::ifstream in(value);
    if (!in) throw ConfigError("config: cannot read system spec file " + value);
    std::stringstream ss;
    ss << in.rdbuf();
    system_spec_json = ss.str();
    SystemSpec::from_json(system_spec_json);  // validate now
  } else if (key == "meta.n_out") {
    meta.n_out = std::stoi(value);
  } else if (key == "meta.n_in") {
    meta.n_in = std::stoi(value);
  } else if (key == "meta.n_val") {
    meta.n_val = std::stoi(value);
  } else if (key == "meta.n_cert") {
    meta.n_cert = std::stoi(value);
  } else if (key == "meta.eta_out") {
    meta.eta_out = std::stod(value);
  } else if (key == "meta.eta_in") {
    meta.eta_in = std::stod(value);
  } else if (key == "meta.eta_val") {
    meta.eta_val = std::stod(value);
  } else if (key == "meta.batch") {
    meta.batch = std::stoi(value);
  } else if (key == "meta.second_order") {
    meta.second_order = parse_bool(value);
  } else if (key == "meta.outer_adam") {
    meta.outer_adam = parse_bool(value);
  } else if (key == "meta.clip") {
    meta.clip = parse_bool(value);
  } else if (key == "meta.clip_norm") {
    meta.clip_norm = std::stod(value);
  } else if (key == "meta.threads") {
    meta.threads = std::stoi(value);
  } else if (key == "meta.scratch_iters") {
    meta.scratch_iters = std::stoi(value);
  } else if (key == "arch.width") {
    arch.width = std::stoi(value);
  } else if (key == "arch.depth") {
    arch.depth = std::stoi(value);
  } else if (key == "arch.z_dim") {
    arch.z_dim = std::stoi(value);
  } else if (key == "arch.rank") {
    arch.rank = std::stoi(value);
  } else if (key == "arch.d1") {
    arch.d1 = std::stoi(value);
  } else if (key == "arch.d2") {
    arch.d2 = std::stoi(value);
  } else if (key == "arch.w_ortho") {
    arch.w_ortho = std::stod(value);
  } else if (key == "arch.w_l1") {
    arch.w_l1 = std::stod(value);
  } else if (key == "arch.hyper_gain") {
    arch.hyper_gain = std::stod(value);
  } else if (key == "arch.init_scale") {
    arch.init_scale = std::stod(value);
  } else {
    throw ConfigError("config: unknown key '" + key + "'");
  }
}

void ExperimentConfig::load_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const std::exception& e) {
    throw ConfigError("config: " + path.string() + ": " + e.what());
  }
  if (j.contains("preset")) set("preset", j.at("preset").get<std::string>());
  std::function<void(const std::string&, const nlohmann::json&)> walk =
      [&](const std::string& prefix, const nlohmann::json& node) {
        for (const auto& [key, val] : node.items()) {
          const std::string full = prefix.empty() ? key : prefix + "." + key;
          if (full == "preset") continue;
          if (val.is_object()) {
            walk(full, val);
          } else if (val.is_array()) {
            std::string list;
            for (const auto& e : val) {
              if (!list.empty()) list += ",";
              list += e.dump();
            }
            set(full, list);
          } else if (val.is_string()) {
            set(full, val.get<std::string>());
          } else {
            set(full, val.dump());
          }
        }
      };
  walk("", j);
}

SystemSpec ExperimentConfig::system_spec() const {
  SystemSpec spec = system_spec_json.empty() ? SystemSpec::defaults(system_from_name(system))
                                             : SystemSpec::from_json(system_spec_json);
  if (!system_spec_json.empty() && spec.id != system_from_name(system))
    throw ConfigError("config: system spec file describes a different system");
  spec.pendulum_ml2 = pendulum_ml2;
  return spec;
}

fs::path ExperimentConfig::root() const {
  if (!out_root.empty()) return out_root;
  if (const char* env = std::getenv(kOutputRootEnv)) return env;
  return "latdyn_out";
}

fs::path ExperimentConfig::data_dir(std::uint64_t seed) const {
  return root() / "data" / (system + "_nT" + std::to_string(n_traj)) /
         ("seed" + std::to_string(seed));
}

fs::path ExperimentConfig::run_dir(std::uint64_t seed) const {
  return root() / "runs" / (method + "_" + system + "_nT" + std::to_string(n_traj)) /
         ("seed" + std::to_string(seed));
}

namespace {

MetaConfig resolved_meta(const ExperimentConfig& cfg, std::uint64_t seed) {
  MetaConfig m = cfg.meta;
  m.seed = seed;
  const auto& ov = cfg.overrides;
  auto overridden = [&](const char* key) {
    return std::find(ov.begin(), ov.end(), key) != ov.end();
  };
  if (cfg.method == "reptile") {
    if (!overridden("meta.eta_out")) m.eta_out = 0.01;
    if (!overridden("meta.eta_in")) m.eta_in = 0.02;
  }
  if (cfg.preset == "desk") {
    // Desk-scale reductions beyond the preset fields, both reported in the
    // run header: second-order inner loops shrink to one step, and
    // certification runs at half cadence.
    if ((cfg.method == "maml" || cfg.method == "anil") && !overridden("meta.n_in")) m.n_in = 1;
    if (!overridden("meta.n_cert")) m.n_cert = 1250;
  }
  return m;
}

}  // namespace

std::string ExperimentConfig::to_json(bool pretty) const {
  nlohmann::json j;
  j["preset"] = preset;
  j["system"] = system;
  j["method"] = method;
  j["n_mu"] = n_mu;
  j["split"] = {{"train", split.train}, {"val", split.val}, {"test", split.test}};
  j["n_T"] = n_traj;
  j["seeds"] = seeds;
  j["zero_init"] = zero_init;
  j["shots"] = shots;
  j["export_rasters"] = export_rasters;
  j["additive_friction"] = additive_friction;
  j["reversible_only"] = reversible_only;
  j["pendulum_ml2"] = pendulum_ml2;
  nlohmann::json m;
  m["n_out"] = meta.n_out;
  m["n_in"] = meta.n_in;
  m["n_val"] = meta.n_val;
  m["n_cert"] = meta.n_cert;
  m["eta_out"] = meta.eta_out;
  m["eta_in"] = meta.eta_in;
  m["eta_val"] = meta.eta_val;
  m["batch"] = meta.batch;
  m["second_order"] = meta.second_order;
  m["outer_adam"] = meta.outer_adam;
  m["clip"] = meta.clip;
  m["clip_norm"] = meta.clip_norm;
  m["scratch_iters"] = meta.scratch_iters;
  j["meta"] = m;
  nlohmann::json a;
  a["width"] = arch.width;
  a["depth"] = arch.depth;
  a["z_dim"] = arch.z_dim;
  a["rank"] = arch.rank;
  a["d1"] = arch.d1;
  a["d2"] = arch.d2;
  a["w_ortho"] = arch.w_ortho;
  a["w_l1"] = arch.w_l1;
  a["hyper_gain"] = arch.hyper_gain;
  a["init_scale"] = arch.init_scale;
  j["arch"] = a;
  j["system_spec"] = system_spec_json.empty() ? nlohmann::json()
                                              : nlohmann::json::parse(system_spec_json);
  j["resolved_system_spec"] = nlohmann::json::parse(system_spec().to_json());
  j["code_version"] = kCodeVersion;
  return pretty ? j.dump(2) : j.dump();
}

std::uint64_t ExperimentConfig::hash() const { return hash_str(to_json()); }

bool ExperimentConfig::modulation_method() const {
  return method == "shift" || method == "fw" || method == "ro" || method == "mr";
}

ModKind ExperimentConfig::kind() const {
  return modulation_method() ? mod_kind_from_name(method) : ModKind::None;
}

void run_generate(const ExperimentConfig& cfg) {
  SystemSpec spec = cfg.system_spec();
  if (cfg.split.total() != cfg.n_mu)
    throw ConfigError("generate: split counts must sum to n_mu");
  for (std::uint64_t seed : cfg.seeds) {
    fs::path dir = cfg.data_dir(seed);
    if (fs::exists(dir / "manifest.json")) {
      if (dataset_manifest_hash(dir) == spec.hash() && !cfg.force) continue;  // up to date
      if (!cfg.force)
        throw DataError("generate: " + dir.string() +
                        " holds a dataset for a different spec (use force)");
      fs::remove_all(dir);
    } else if (fs::exists(dir) && !fs::is_empty(dir) && !cfg.force) {
      throw DataError("generate: " + dir.string() + " exists and is not empty (use force)");
    }
    DatasetSplit ds = build_dataset(spec, cfg.split, cfg.n_traj, seed);
    save_dataset(ds, dir, cfg.force);
  }
}

namespace {

DatasetSplit load_verified_dataset(const ExperimentConfig& cfg, std::uint64_t seed) {
  SystemSpec spec = cfg.system_spec();
  fs::path dir = cfg.data_dir(seed);
  if (!fs::exists(dir / "manifest.json"))
    throw DataError("no dataset at " + dir.string() + " (run generate first)");
  if (dataset_manifest_hash(dir) != spec.hash())
    throw DataError("dataset at " + dir.string() +
                    " was generated from a different system spec; refusing to continue");
  return load_dataset(dir);
}

LogSink jsonl_sink(const fs::path& path) {
  auto out = std::make_shared<std::ofstream>(path);
  if (!*out) throw DataError("cannot open training log " + path.string());
  return [out](const TrainLogEntry& e) {
    nlohmann::json j;
    j["iter"] = e.iter;
    j["train_loss"] = e.train_loss;
    if (e.penalty >= 0.0) j["penalty"] = e.penalty;
    if (e.val_metric >= 0.0) j["val_metric"] = e.val_metric;
    j["wall_s"] = e.wall_s;
    *out << j.dump() << "\n";
    out->flush();
  };
}

void write_checkpoint(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& path,
                      const DynamicsModel& model, const std::vector<Tensor>& latents,
                      const std::vector<int>& latent_tasks) {
  Checkpoint ck;
  ck.method = cfg.method;
  ck.system = cfg.system;
  ck.spec_hash = cfg.system_spec().hash();
  ck.config_hash = cfg.hash();
  ck.model = model;
  ck.latents = latents;
  ck.latent_tasks = latent_tasks;
  (void)seed;
  save_checkpoint(ck, path);
}

}  // namespace

void run_train(const ExperimentConfig& cfg) {
  if (cfg.method == "oracle") return;  // nothing to train
  SystemSpec spec = cfg.system_spec();
  for_each_seed(cfg, [&](std::uint64_t seed, int threads) {
    DatasetSplit ds = load_verified_dataset(cfg, seed);
    fs::path dir = cfg.run_dir(seed);
    fs::create_directories(dir);
    MetaConfig meta = resolved_meta(cfg, seed);
    meta.threads = threads;
    LogSink sink = jsonl_sink(dir / "train_log.jsonl");
    RngStream init = RngStream(seed).derive("init").derive(cfg.method);
    DynamicsModel model = DynamicsModel::make(spec, cfg.arch, cfg.kind(), init);
    model.additive_friction = cfg.additive_friction;

    if (cfg.modulation_method()) {
      TrainerResult r = meta_train(meta, std::move(model), spec, ds.train, ds.val, sink);
      std::vector<int> tasks;
      for (const auto& t : ds.train) tasks.push_back(t.index);
      write_checkpoint(cfg, seed, dir / "checkpoint.json", r.model, r.latents, tasks);
    } else if (cfg.method == "maml" || cfg.method == "anil") {
      TrainerResult r =
          maml_train(meta, std::move(model), spec, ds.train, ds.val, cfg.method == "anil", sink);
      write_checkpoint(cfg, seed, dir / "checkpoint.json", r.model, {}, {});
    } else if (cfg.method == "reptile") {
      TrainerResult r = reptile_train(meta, std::move(model), spec, ds.train, ds.val, sink);
      write_checkpoint(cfg, seed, dir / "checkpoint.json", r.model, {}, {});
    } else if (cfg.method == "scratch") {
      // One independent model per test task, trained on that task's
      // adaptation trajectories only.
      for (const auto& task : ds.test) {
        RngStream task_init = init.derive(static_cast<std::uint64_t>(task.index));
        DynamicsModel per_task = DynamicsModel::make(spec, cfg.arch, ModKind::None, task_init);
        per_task.additive_friction = cfg.additive_friction;
        DynamicsModel trained = scratch_train(meta, std::move(per_task), task, sink);
        write_checkpoint(cfg, seed, dir / ("checkpoint_task_" + std::to_string(task.index) + ".json"),
                         trained, {}, {});
      }
    } else {
      throw ConfigError("train: unknown method " + cfg.method);
    }
  });
}

namespace {

std::string report_name(const ExperimentConfig& cfg) {
  std::string name = "report";
  if (cfg.zero_init) name += "_zero";
  if (cfg.shots >= 0) name += "_s" + std::to_string(cfg.shots);
  return name;
}

CellResult evaluate_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  SystemSpec spec = cfg.system_spec();
  DatasetSplit ds = load_verified_dataset(cfg, seed);
  fs::path dir = cfg.run_dir(seed);
  fs::create_directories(dir);
  MetaConfig meta = resolved_meta(cfg, seed);
  const int steps = cfg.resolved_shots();
  const double t0 = now_s();

  // Adapted per-task field evaluators. Models are kept alive alongside.
  std::vector<EvalCase> cases;
  std::vector<std::shared_ptr<DynamicsModel>> keep_models;
  std::vector<Tensor> keep_latents;

  if (cfg.method == "oracle") {
    for (const auto& task : ds.test) cases.push_back({&task, analytic_field_eval(spec, task.mu)});
  } else if (cfg.modulation_method()) {
    Checkpoint ck = load_checkpoint(dir / "checkpoint.json", spec);
    if (ck.spec_hash != spec.hash())
      throw DataError("evaluate: checkpoint was trained on a different system spec");
    if (ck.latents.empty())
      throw DataError("evaluate: checkpoint holds no latent codes for a modulation method");
    auto model = std::make_shared<DynamicsModel>(ck.model);
    keep_models.push_back(model);
    Tensor z0 = cfg.zero_init ? Tensor::zeros({std::size_t(ck.model.arch.z_dim)})
                              : mean_latent(ck.latents);
    keep_latents.reserve(ds.test.size());
    for (const auto& task : ds.test) {
      TaskBatch batch = task_batch(task.adaptation, spec.n_q(), spec.n_p(), spec.n_s());
      keep_latents.push_back(
          adapt_latent(*model, z0, batch, steps, meta.resolved_eta_val()));
    }
    for (std::size_t i = 0; i < ds.test.size(); ++i) {
      const Tensor z = keep_latents[i];
      cases.push_back({&ds.test[i], [model, z](const Tensor& states) {
                         return model_field(*model, z, states);
                       }});
    }
  } else if (cfg.method == "scratch") {
    for (const auto& task : ds.test) {
      fs::path p = dir / ("checkpoint_task_" + std::to_string(task.index) + ".json");
      Checkpoint ck = load_checkpoint(p, spec);
      auto model = std::make_shared<DynamicsModel>(ck.model);
      keep_models.push_back(model);
      cases.push_back({&task, [model](const Tensor& states) {
                         return model_field(*model, Tensor(), states);
                       }});
    }
  } else {  // maml / anil / reptile: test-time parameter fine-tuning
    Checkpoint ck = load_checkpoint(dir / "checkpoint.json", spec);
    if (ck.spec_hash != spec.hash())
      throw DataError("evaluate: checkpoint was trained on a different system spec");
    const bool last_layer = (cfg.method == "anil");
    for (const auto& task : ds.test) {
      TaskBatch batch = task_batch(task.adaptation, spec.n_q(), spec.n_p(), spec.n_s());
      auto model = std::make_shared<DynamicsModel>(
          finetune(ck.model, batch, steps, meta.resolved_eta_val(), last_layer));
      keep_models.push_back(model);
      cases.push_back({&task, [model](const Tensor& states) {
                         return model_field(*model, Tensor(), states);
                       }});
    }
  }

  CellResult res;
  res.method = cfg.method;
  res.system = cfg.system;
  res.n_traj = cfg.n_traj;
  res.seed = seed;
  MetricOptions traj_opts;
  traj_opts.excluded = &res.excluded_traj;
  res.eps_traj = eps_traj(spec, cases, traj_opts);
  MeshSpec mesh = MeshSpec::defaults(spec.id);
  MetricOptions mesh_opts;
  mesh_opts.excluded = &res.excluded_mesh;
  res.eps_field = eps_field(spec, cases, mesh, mesh_opts);
  if (spec.dim() == 2) res.ssim = ssim_against_truth(spec, cases, mesh);

  nlohmann::json j;
  j["method"] = res.method;
  j["system"] = res.system;
  j["n_T"] = res.n_traj;
  j["seed"] = res.seed;
  j["zero_init"] = cfg.zero_init;
  j["shots"] = steps;
  j["eps_traj"] = res.eps_traj;
  j["eps_field"] = res.eps_field;
  if (res.ssim >= -1.0 && spec.dim() == 2) j["ssim"] = res.ssim;
  j["excluded_trajectories"] = res.excluded_traj;
  j["excluded_mesh_points"] = res.excluded_mesh;
  j["config_hash"] = cfg.hash();
  j["spec_hash"] = spec.hash();
  j["code_version"] = kCodeVersion;
  std::ofstream out(dir / (report_name(cfg) + ".json"));
  if (!out) throw DataError("evaluate: cannot write report in " + dir.string());
  out << j.dump(2) << "\n";

  // Wall time lives in a sidecar so the canonical report stays byte-stable.
  nlohmann::json timing;
  timing["evaluate_s"] = now_s() - t0;
  std::ofstream tout(dir / (report_name(cfg) + "_timing.json"));
  tout << timing.dump(2) << "\n";

  if (cfg.export_rasters && !cases.empty()) {
    FieldEval truth = analytic_field_eval(spec, cases.front().task->mu);
    export_field(dir / (report_name(cfg) + "_field.txt"), spec, mesh, cases.front().field,
                 &truth);
  }
  return res;
}

}  // namespace

std::vector<CellResult> run_evaluate(const ExperimentConfig& cfg) {
  std::vector<CellResult> out(cfg.seeds.size());
  for_each_seed(cfg, [&](std::uint64_t seed, int threads) {
    std::size_t idx = 0;
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i)
      if (cfg.seeds[i] == seed) idx = i;
    ExperimentConfig c = cfg;
    c.meta.threads = threads;
    out[idx] = evaluate_seed(c, seed);
  });
  return out;
}

void run_export_field(const ExperimentConfig& cfg, const std::string& out_path) {
  SystemSpec spec = cfg.system_spec();
  MeshSpec mesh = MeshSpec::defaults(spec.id);
  const std::uint64_t seed = cfg.seeds.front();
  DatasetSplit ds = load_verified_dataset(cfg, seed);
  if (ds.test.empty()) throw DataError("export-field: dataset has no test tasks");
  const TaskDataset& task = ds.test.front();
  FieldEval truth = analytic_field_eval(spec, task.mu);
  if (cfg.method == "oracle") {
    export_field(out_path, spec, mesh, truth, &truth);
    return;
  }
  MetaConfig meta = resolved_meta(cfg, seed);
  fs::path dir = cfg.run_dir(seed);
  TaskBatch batch = task_batch(task.adaptation, spec.n_q(), spec.n_p(), spec.n_s());
  const int steps = cfg.resolved_shots();
  const bool rev = cfg.reversible_only;
  if (cfg.modulation_method()) {
    Checkpoint ck = load_checkpoint(dir / "checkpoint.json", spec);
    auto model = std::make_shared<DynamicsModel>(ck.model);
    Tensor z0 = cfg.zero_init ? Tensor::zeros({std::size_t(ck.model.arch.z_dim)})
                              : mean_latent(ck.latents);
    Tensor z = adapt_latent(*model, z0, batch, steps, meta.resolved_eta_val());
    export_field(out_path, spec, mesh,
                 [model, z, rev](const Tensor& s) { return model_field(*model, z, s, rev); },
                 &truth);
  } else if (cfg.method == "scratch") {
    Checkpoint ck =
        load_checkpoint(dir / ("checkpoint_task_" + std::to_string(task.index) + ".json"), spec);
    auto model = std::make_shared<DynamicsModel>(ck.model);
    export_field(out_path, spec, mesh,
                 [model, rev](const Tensor& s) { return model_field(*model, Tensor(), s, rev); },
                 &truth);
  } else {
    Checkpoint ck = load_checkpoint(dir / "checkpoint.json", spec);
    auto model = std::make_shared<DynamicsModel>(
        finetune(ck.model, batch, steps, meta.resolved_eta_val(), cfg.method == "anil"));
    export_field(out_path, spec, mesh,
                 [model, rev](const Tensor& s) { return model_field(*model, Tensor(), s, rev); },
                 &truth);
  }
}

namespace {

struct CellSpec {
  std::string method;
  std::string system;
  int n_traj;
  bool zero_init = false;
  const char* metric = "eps_traj";  // eps_traj | eps_field | ssim
};

TableCellStats aggregate(const std::vector<double>& values) {
  TableCellStats st;
  if (values.empty()) {
    st.failed = true;
    return st;
  }
  double sum = 0.0;
  for (double v : values) sum += v;
  st.mean = sum / double(values.size());
  if (values.size() >= 2) {
    double acc = 0.0;
    for (double v : values) acc += (v - st.mean) * (v - st.mean);
    st.stddev = std::sqrt(acc / double(values.size() - 1));
    st.has_std = true;
  }
  return st;
}

int default_n_traj(const std::string& system) { return system == "mass_spring" ? 20 : 10; }

}  // namespace

std::string ResultsTable::render_text() const {
  std::ostringstream os;
  os << "table " << id << "\n";
  std::vector<std::size_t> widths(col_labels.size() + 1, 0);
  widths[0] = 8;
  for (const auto& r : row_labels) widths[0] = std::max(widths[0], r.size());
  auto cell_text = [&](const TableCellStats& c) {
    if (c.failed) return std::string("--");
    char buf[64];
    if (c.has_std)
      snprintf(buf, sizeof buf, "%.3f(%.1f)", c.mean, c.stddev * 100.0);
    else
      snprintf(buf, sizeof buf, "%.3f", c.mean);
    return std::string(buf);
  };
  // Rank marks per column: * best, + second best (direction from the label:
  // SSIM columns rank descending, error columns ascending).
  std::vector<std::vector<std::string>> text(row_labels.size(),
                                             std::vector<std::string>(col_labels.size()));
  for (std::size_t c = 0; c < col_labels.size(); ++c) {
    const bool higher_better = col_labels[c].find("ssim") != std::string::npos;
    std::vector<std::pair<double, std::size_t>> ranked;
    for (std::size_t r = 0; r < row_labels.size(); ++r) {
      if (!cells[r][c].failed)
        ranked.push_back({higher_better ? -cells[r][c].mean : cells[r][c].mean, r});
      text[r][c] = cell_text(cells[r][c]);
    }
    std::sort(ranked.begin(), ranked.end());
    if (!ranked.empty()) text[ranked[0].second][c] += "*";
    if (ranked.size() > 1) text[ranked[1].second][c] += "+";
  }
  for (std::size_t c = 0; c < col_labels.size(); ++c) {
    widths[c + 1] = col_labels[c].size();
    for (std::size_t r = 0; r < row_labels.size(); ++r)
      widths[c + 1] = std::max(widths[c + 1], text[r][c].size());
  }
  auto pad = [&](const std::string& s, std::size_t w) {
    return s + std::string(w > s.size() ? w - s.size() : 0, ' ');
  };
  os << pad("method", widths[0]);
  for (std::size_t c = 0; c < col_labels.size(); ++c) os << "  " << pad(col_labels[c], widths[c + 1]);
  os << "\n";
  for (std::size_t r = 0; r < row_labels.size(); ++r) {
    os << pad(row_labels[r], widths[0]);
    for (std::size_t c = 0; c < col_labels.size(); ++c) os << "  " << pad(text[r][c], widths[c + 1]);
    os << "\n";
  }
  return os.str();
}

std::string ResultsTable::to_json() const {
  nlohmann::json j;
  j["table"] = id;
  j["rows"] = row_labels;
  j["cols"] = col_labels;
  nlohmann::json cj = nlohmann::json::array();
  for (const auto& row : cells) {
    nlohmann::json rj = nlohmann::json::array();
    for (const auto& c : row) {
      nlohmann::json e;
      e["failed"] = c.failed;
      if (!c.failed) {
        e["mean"] = c.mean;
        if (c.has_std) e["std"] = c.stddev;
      }
      rj.push_back(e);
    }
    cj.push_back(rj);
  }
  j["cells"] = cj;
  return j.dump(2);
}

ResultsTable run_reproduce(const ExperimentConfig& cfg, const std::string& table_id) {
  // Row/column grids mirroring the benchmark tables, at the configured scale.
  struct ColumnSpec {
    std::string label;
    std::string system;
    int n_traj;
    const char* metric;
    bool zero_init;
  };
  std::vector<std::string> methods = kAllMethods;
  std::vector<ColumnSpec> columns;
  auto push_systems = [&](const std::vector<std::string>& systems) {
    for (const auto& s : systems)
      columns.push_back({s + "(" + std::to_string(default_n_traj(s)) + ")", s, default_n_traj(s),
                         "eps_traj", false});
  };
  auto push_nt_sweep = [&](const std::string& s, std::vector<int> nts, bool with_ssim) {
    for (int nt : nts) {
      columns.push_back({"field@" + std::to_string(nt), s, nt, "eps_field", false});
      columns.push_back({"traj@" + std::to_string(nt), s, nt, "eps_traj", false});
      if (with_ssim) columns.push_back({"ssim@" + std::to_string(nt), s, nt, "ssim", false});
    }
  };
  if (table_id == "1") {
    push_systems({"mass_spring", "pendulum", "duffing", "kepler"});
  } else if (table_id == "2") {
    for (const std::string s : {"mass_spring", "pendulum", "duffing"}) {
      columns.push_back({s + " field", s, default_n_traj(s), "eps_field", false});
      columns.push_back({s + " ssim", s, default_n_traj(s), "ssim", false});
    }
  } else if (table_id == "3") {
    push_nt_sweep("mass_spring", {10, 20, 30}, true);
  } else if (table_id == "4") {
    push_nt_sweep("pendulum", {10, 20, 30}, true);
  } else if (table_id == "6") {
    push_nt_sweep("duffing", {5, 10, 20}, true);
  } else if (table_id == "7") {
    push_nt_sweep("dno", {10, 20, 30}, false);
  } else if (table_id == "8") {
    push_nt_sweep("tgc", {10, 20, 30}, false);
  } else if (table_id == "9") {
    methods = {"shift", "fw", "ro", "mr"};
    for (const std::string s : {"mass_spring", "pendulum", "duffing", "kepler"}) {
      columns.push_back({s + " avg", s, default_n_traj(s), "eps_traj", false});
      columns.push_back({s + " zero", s, default_n_traj(s), "eps_traj", true});
    }
  } else {
    throw ConfigError("reproduce: unknown table id '" + table_id + "' (1,2,3,4,6,7,8,9)");
  }

  // Single-cell filters: an explicitly set method/system restricts the grid.
  auto overridden = [&](const char* key) {
    return std::find(cfg.overrides.begin(), cfg.overrides.end(), key) != cfg.overrides.end();
  };
  if (overridden("method")) methods = {cfg.method};
  if (overridden("system")) {
    std::vector<ColumnSpec> filtered;
    for (auto& c : columns)
      if (c.system == cfg.system) filtered.push_back(c);
    columns = std::move(filtered);
    if (columns.empty()) throw ConfigError("reproduce: table has no column for " + cfg.system);
  }

  ResultsTable table;
  table.id = table_id;
  table.row_labels = methods;
  for (const auto& c : columns) table.col_labels.push_back(c.label + " " + c.metric);
  table.cells.assign(methods.size(), std::vector<TableCellStats>(columns.size()));

  for (std::size_t mi = 0; mi < methods.size(); ++mi) {
    for (std::size_t ci = 0; ci < columns.size(); ++ci) {
      ExperimentConfig cell = cfg;
      cell.method = methods[mi];
      cell.system = columns[ci].system;
      cell.n_traj = columns[ci].n_traj;
      cell.zero_init = columns[ci].zero_init;
      std::vector<double> values;
      try {
        run_generate(cell);
        // Train only when the checkpoint is missing; reruns are caches of a
        // deterministic computation.
        bool need_train = false;
        for (std::uint64_t seed : cell.seeds) {
          fs::path dir = cell.run_dir(seed);
          const bool have = cell.method == "oracle" ||
                            (cell.method == "scratch"
                                 ? fs::exists(dir) && !fs::is_empty(dir)
                                 : fs::exists(dir / "checkpoint.json"));
          if (!have) need_train = true;
        }
        if (need_train) run_train(cell);
        for (const CellResult& r : run_evaluate(cell)) {
          if (std::string(columns[ci].metric) == "eps_traj") values.push_back(r.eps_traj);
          else if (std::string(columns[ci].metric) == "eps_field") values.push_back(r.eps_field);
          else values.push_back(r.ssim);
        }
        table.cells[mi][ci] = aggregate(values);
      } catch (const std::exception& e) {
        table.cells[mi][ci].failed = true;
      }
    }
  }

  fs::path tdir = cfg.root() / "tables";
  fs::create_directories(tdir);
  {
    std::ofstream out(tdir / ("table" + table_id + ".json"));
    out << table.to_json() << "\n";
  }
  {
    std::ofstream out(tdir / ("table" + table_id + ".txt"));
    if (cfg.preset == "desk")
      out << "# desk preset: n_mu=" << cfg.n_mu << " (" << cfg.split.train << "/" << cfg.split.val
          << "/" << cfg.split.test << "), mlp " << cfg.arch.depth << "x" << cfg.arch.width
          << ", n_out=" << cfg.meta.n_out << ", seeds=" << cfg.seeds.size()
          << " (reduced from the benchmark defaults)\n";
    out << table.render_text();
  }
  return table;
}

}  // namespace latdyn
