#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "core/metalearn.hpp"
#include "core/metrics.hpp"

namespace latdyn {

inline constexpr const char* kCodeVersion = "0.1.0";
inline constexpr const char* kOutputRootEnv = "LATDYN_OUT";

// Full experiment description: one (method, system, n_T) cell at one or more
// seeds. `preset` resolves the scale (benchmark defaults vs the reduced desk
// scale); every later override is tracked so print-config can show the
// deviations.
struct ExperimentConfig {
  std::string preset = "desk";  // paper | desk
  std::string system = "mass_spring";
  std::string method = "mr";  // scratch|maml|reptile|anil|shift|fw|ro|mr|oracle
  int n_mu = 30;
  SplitCounts split{20, 5, 5};
  int n_traj = 10;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  MetaConfig meta;
  ArchConfig arch;
  bool zero_init = false;    // latent initialization ablation
  int shots = -1;            // adaptation steps at evaluation; -1 = meta.n_val
  bool force = false;        // overwrite non-empty dataset directories
  bool export_rasters = false;
  bool additive_friction = false;
  bool pendulum_ml2 = false;
  // Rasterize/evaluate only the canonical Poisson part of GENERIC fields.
  bool reversible_only = false;
  std::string out_root;      // empty: $LATDYN_OUT or ./latdyn_out
  std::string system_spec_json;  // optional overrides for the SystemSpec
  std::vector<std::string> overrides;  // audit trail of set() calls

  static ExperimentConfig with_preset(const std::string& preset);
  // Dotted-path override, e.g. set("meta.n_out", "1500").
  void set(const std::string& key, const std::string& value);
  void load_file(const std::filesystem::path& path);

  SystemSpec system_spec() const;
  std::filesystem::path root() const;
  std::filesystem::path data_dir(std::uint64_t seed) const;
  std::filesystem::path run_dir(std::uint64_t seed) const;
  std::string to_json(bool pretty = false) const;
  std::uint64_t hash() const;
  int resolved_shots() const { return shots >= 0 ? shots : meta.n_val; }
  bool modulation_method() const;
  ModKind kind() const;
};

struct CellResult {
  std::string method;
  std::string system;
  int n_traj = 0;
  std::uint64_t seed = 0;
  double eps_traj = -1.0;
  double eps_field = -1.0;
  double ssim = -1.0;  // < 0: not defined for this system
  int excluded_traj = 0;
  int excluded_mesh = 0;
  std::string error;  // non-empty: the cell failed
};

// CLI verbs. Each throws ConfigError/DataError/NumericError on failure; the
// C API and CLI map those to exit codes 2/3/4.
void run_generate(const ExperimentConfig& cfg);
void run_train(const ExperimentConfig& cfg);
std::vector<CellResult> run_evaluate(const ExperimentConfig& cfg);
void run_export_field(const ExperimentConfig& cfg, const std::string& out_path);

struct TableCellStats {
  double mean = 0.0;
  bool has_std = false;
  double stddev = 0.0;
  bool failed = false;
};

struct ResultsTable {
  std::string id;
  std::vector<std::string> row_labels;     // methods
  std::vector<std::string> col_labels;     // system / metric columns
  std::vector<std::vector<TableCellStats>> cells;
  std::string render_text() const;         // best/second-best annotated
  std::string to_json() const;
};

ResultsTable run_reproduce(const ExperimentConfig& cfg, const std::string& table_id);

}  // namespace latdyn
