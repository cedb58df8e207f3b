#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "core/dataset.hpp"
#include "core/optim.hpp"
#include "core/structured.hpp"

namespace latdyn {

struct MetaConfig {
  int n_out = 10000;   // outer iterations
  int n_in = 3;        // latent / inner steps per outer iteration
  int n_val = 100;     // adaptation steps at validation/test time
  int n_cert = 250;    // validation cadence (outer iterations)
  double eta_out = 1e-3;
  double eta_in = 2e-3;
  double eta_val = -1.0;  // < 0 resolves to eta_in
  int batch = 5;
  std::uint64_t seed = 0;
  bool second_order = true;  // MAML/ANIL meta-gradient through the inner steps
  bool outer_adam = true;    // plain SGD outer updates when false
  bool clip = false;
  double clip_norm = 10.0;
  int threads = 0;         // 0 = hardware concurrency
  int scratch_iters = -1;  // < 0 resolves to n_out

  double resolved_eta_val() const { return eta_val > 0.0 ? eta_val : eta_in; }
  int resolved_scratch_iters() const { return scratch_iters >= 0 ? scratch_iters : n_out; }
};

enum class GradWrt { Params, Latent, LastLayer };

struct LossGrads {
  double loss = 0.0;
  double penalty = -1.0;  // MR regularization component; < 0 when absent
  std::vector<Tensor> grads;
};

// One loss/gradient evaluation on a task batch. `z` may be null for
// unmodulated models.
LossGrads loss_and_grads(const DynamicsModel& model, const Tensor* z, const TaskBatch& batch,
                         GradWrt wrt);

struct TrainLogEntry {
  int iter = 0;
  double train_loss = 0.0;
  double penalty = -1.0;     // < 0: not an MR run
  double val_metric = -1.0;  // < 0: no certification this iteration
  double wall_s = 0.0;
};

using LogSink = std::function<void(const TrainLogEntry&)>;

struct TrainerResult {
  DynamicsModel model;          // best-validation snapshot
  std::vector<Tensor> latents;  // training latent codes at that snapshot
  double best_val = -1.0;
  int best_iter = -1;
  std::vector<TrainLogEntry> log;
};

// Algorithm: per outer iteration sample a task batch, take n_in plain
// gradient-descent steps on each task's persistent latent code, then one
// Adam step on the shared parameters at the current latents. Every n_cert
// iterations the model is certified on the validation tasks (mean-latent
// initialized auto-decoding) and the best snapshot is kept.
TrainerResult meta_train(const MetaConfig& cfg, DynamicsModel model, const SystemSpec& spec,
                         const std::vector<TaskDataset>& train,
                         const std::vector<TaskDataset>& val, const LogSink& sink = {});

Tensor mean_latent(const std::vector<Tensor>& latents);

// Auto-decoding (validation/test): n_steps plain gradient-descent updates of
// the latent code against the adaptation loss; the model is untouched.
Tensor adapt_latent(const DynamicsModel& model, const Tensor& z_init, const TaskBatch& batch,
                    int n_steps, double eta);

// Optimization-based baselines on unmodulated models. ANIL restricts the
// inner loop to the final affine weights.
TrainerResult maml_train(const MetaConfig& cfg, DynamicsModel model, const SystemSpec& spec,
                         const std::vector<TaskDataset>& train,
                         const std::vector<TaskDataset>& val, bool anil, const LogSink& sink = {});

TrainerResult reptile_train(const MetaConfig& cfg, DynamicsModel model, const SystemSpec& spec,
                            const std::vector<TaskDataset>& train,
                            const std::vector<TaskDataset>& val, const LogSink& sink = {});

// Per-task baseline: Adam on one task's adaptation data.
DynamicsModel scratch_train(const MetaConfig& cfg, DynamicsModel model, const TaskDataset& task,
                            const LogSink& sink = {});

// Test-time parameter fine-tuning for the optimization-based baselines.
DynamicsModel finetune(DynamicsModel model, const TaskBatch& batch, int n_steps, double eta,
                       bool last_layer_only);

// Validation score used for model selection: mean relative trajectory error
// over the validation tasks after auto-decoding (or fine-tuning).
double certify(const DynamicsModel& model, const MetaConfig& cfg, const SystemSpec& spec,
               const std::vector<TaskDataset>& val, const std::vector<Tensor>& train_latents);
double certify_baseline(const DynamicsModel& model, const MetaConfig& cfg, const SystemSpec& spec,
                        const std::vector<TaskDataset>& val, bool last_layer_only);

}  // namespace latdyn
