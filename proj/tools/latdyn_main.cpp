// Experiment CLI over the latdyn C API: generate datasets, train any
// (method x system x n_T) cell, adapt/evaluate on test tasks, reproduce the
// benchmark tables, export fields. Everything is deterministic in the seeds.

#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "latdyn/latdyn.h"

namespace {

struct ConfigGuard {
  ld_config* cfg = nullptr;
  ~ConfigGuard() { ld_config_destroy(cfg); }
};

int fail(int code) {
  std::fprintf(stderr, "error: %s\n", ld_last_error());
  return code;
}

// Collect flag values as (key, value) pairs and apply them in command-line
// order so later flags win.
struct Overrides {
  std::vector<std::pair<std::string, std::string>> kv;
  void add(const std::string& key, const std::string& value) { kv.emplace_back(key, value); }
};

void add_common_flags(CLI::App* cmd, Overrides& ov, std::string& config_file) {
  cmd->add_option("--config", config_file, "JSON config file applied before the flags");
  auto opt = [cmd, &ov](const std::string& flag, const std::string& key, const std::string& help) {
    cmd->add_option_function<std::string>(
        flag, [key, &ov](const std::string& v) { ov.add(key, v); }, help);
  };
  opt("--preset", "preset", "Scale preset: paper or desk");
  opt("--system", "system",
      "System: mass_spring, pendulum, duffing, kepler, dno, tgc");
  opt("--method", "method", "Method: scratch, maml, reptile, anil, shift, fw, ro, mr, oracle");
  opt("--n-mu", "n_mu", "Number of parameter realizations");
  opt("--split", "split", "Task split as train/val/test");
  opt("--n-traj", "n_T", "Trajectories per task");
  opt("--seeds", "seeds", "Comma-separated seed list");
  opt("--out", "out_root", "Output root (defaults to $LATDYN_OUT or ./latdyn_out)");
  opt("--shots", "shots", "Adaptation steps at evaluation (default: meta.n_val)");
  opt("--system-spec", "system_spec", "JSON file overriding the system spec");
  opt("--iters", "meta.n_out", "Outer iterations");
  opt("--inner-steps", "meta.n_in", "Inner latent steps per outer iteration");
  opt("--adapt-steps", "meta.n_val", "Auto-decoding steps for validation/test");
  opt("--cert-every", "meta.n_cert", "Validation cadence in outer iterations");
  opt("--lr-outer", "meta.eta_out", "Outer learning rate");
  opt("--lr-inner", "meta.eta_in", "Inner (latent) learning rate");
  opt("--lr-adapt", "meta.eta_val", "Adaptation learning rate (default: inner)");
  opt("--batch", "meta.batch", "Tasks per outer iteration");
  opt("--threads", "meta.threads", "Worker threads across batch tasks (0 = auto)");
  opt("--scratch-iters", "meta.scratch_iters", "Adam iterations for the scratch baseline");
  opt("--width", "arch.width", "MLP width");
  opt("--depth", "arch.depth", "MLP hidden layers");
  opt("--z-dim", "arch.z_dim", "Latent code dimension");
  opt("--rank", "arch.rank", "MR modulation rank");
  opt("--d1", "arch.d1", "Friction tensor dimension D1");
  opt("--d2", "arch.d2", "Friction core dimension D2");
  opt("--hyper-gain", "arch.hyper_gain", "Hypernetwork init gain multiplier");
  opt("--init-scale", "arch.init_scale", "Base MLP init bound multiplier");
  cmd->add_flag_callback("--zero-init", [&ov]() { ov.add("zero_init", "1"); },
                         "Initialize test latents at zero instead of the training mean");
  cmd->add_flag_callback("--force", [&ov]() { ov.add("force", "1"); },
                         "Overwrite existing dataset directories");
  cmd->add_flag_callback("--export-rasters", [&ov]() { ov.add("export_rasters", "1"); },
                         "Write a field raster next to each report");
  cmd->add_flag_callback("--first-order", [&ov]() { ov.add("meta.second_order", "0"); },
                         "First-order MAML/ANIL meta-gradients");
  cmd->add_flag_callback("--outer-sgd", [&ov]() { ov.add("meta.outer_adam", "0"); },
                         "Plain SGD outer updates for MAML/ANIL");
  cmd->add_flag_callback("--clip", [&ov]() { ov.add("meta.clip", "1"); },
                         "Clip the global gradient norm (ANIL stability)");
  cmd->add_flag_callback("--additive-friction", [&ov]() { ov.add("additive_friction", "1"); },
                         "Ablation: modulate D additively instead of through its factor");
  cmd->add_flag_callback("--reversible-only", [&ov]() { ov.add("reversible_only", "1"); },
                         "Export only the canonical Poisson part of GENERIC fields");
  cmd->add_flag_callback("--pendulum-ml2", [&ov]() { ov.add("pendulum_ml2", "1"); },
                         "Use the p^2/(2 m l^2) pendulum kinetic term");
}

int build_config(const Overrides& ov, const std::string& config_file, ConfigGuard& guard) {
  std::string preset = "desk";
  for (const auto& [k, v] : ov.kv)
    if (k == "preset") preset = v;
  int rc = ld_config_create(preset.c_str(), &guard.cfg);
  if (rc != LD_OK) return rc;
  if (!config_file.empty()) {
    rc = ld_config_load_file(guard.cfg, config_file.c_str());
    if (rc != LD_OK) return rc;
  }
  for (const auto& [k, v] : ov.kv) {
    if (k == "preset") continue;
    rc = ld_config_set(guard.cfg, k.c_str(), v.c_str());
    if (rc != LD_OK) return rc;
  }
  return LD_OK;
}

std::string fetch_text(const std::function<int(char*, size_t, size_t*)>& fn, int& rc) {
  size_t needed = 0;
  rc = fn(nullptr, 0, &needed);
  if (rc != LD_OK) return {};
  std::string text(needed + 1, '\0');
  rc = fn(text.data(), text.size(), &needed);
  text.resize(needed);
  return text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{std::string("latdyn ") + ld_version() +
               " - meta-learned structure-preserving dynamics"};
  app.require_subcommand(1);

  struct Sub {
    CLI::App* cmd;
    Overrides ov;
    std::string config_file;
  };
  auto make_sub = [&](const char* name, const char* help) {
    auto sub = std::make_shared<Sub>();
    sub->cmd = app.add_subcommand(name, help);
    add_common_flags(sub->cmd, sub->ov, sub->config_file);
    return sub;
  };

  auto generate = make_sub("generate", "Generate a dataset for the configured system");
  auto train = make_sub("train", "Train the configured method on an existing dataset");
  auto evaluate = make_sub("evaluate", "Adapt on the test tasks and write metric reports");
  auto reproduce = make_sub("reproduce", "Run a whole benchmark table at the configured scale");
  auto exportf = make_sub("export-field", "Export a phase-space field grid for plotting");
  auto printc = make_sub("print-config", "Print the resolved configuration as JSON");

  std::string table_id = "1";
  reproduce->cmd->add_option("--table", table_id, "Table id: 1,2,3,4,6,7,8,9");
  std::string export_path = "field.txt";
  exportf->cmd->add_option("--to", export_path, "Output file for the field grid");

  CLI11_PARSE(app, argc, argv);

  auto run = [&](Sub& sub, const std::function<int(ld_config*)>& verb) {
    ConfigGuard guard;
    int rc = build_config(sub.ov, sub.config_file, guard);
    if (rc != LD_OK) return fail(rc);
    rc = verb(guard.cfg);
    if (rc != LD_OK) return fail(rc);
    return 0;
  };

  if (generate->cmd->parsed()) return run(*generate, [](ld_config* c) { return ld_run_generate(c); });
  if (train->cmd->parsed()) return run(*train, [](ld_config* c) { return ld_run_train(c); });
  if (evaluate->cmd->parsed()) return run(*evaluate, [](ld_config* c) { return ld_run_evaluate(c); });
  if (reproduce->cmd->parsed())
    return run(*reproduce, [&](ld_config* c) {
      int rc = LD_OK;
      std::string text = fetch_text(
          [&](char* buf, size_t cap, size_t* needed) {
            return ld_run_reproduce(c, table_id.c_str(), buf, cap, needed);
          },
          rc);
      if (rc == LD_OK) std::fputs(text.c_str(), stdout);
      return rc;
    });
  if (exportf->cmd->parsed())
    return run(*exportf,
               [&](ld_config* c) { return ld_run_export_field(c, export_path.c_str()); });
  if (printc->cmd->parsed())
    return run(*printc, [&](ld_config* c) {
      int rc = LD_OK;
      std::string text = fetch_text(
          [&](char* buf, size_t cap, size_t* needed) { return ld_config_print(c, buf, cap, needed); },
          rc);
      if (rc == LD_OK) std::printf("%s\n", text.c_str());
      return rc;
    });
  return 0;
}
