#include "core/metalearn.hpp"

#include <chrono>
#include <cstring>
#include <cmath>
#include <thread>

#include "core/errors.hpp"
#include "core/metrics.hpp"

namespace latdyn {

namespace {

double now_s() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

int resolve_threads(int requested, std::size_t jobs) {
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  int t = requested > 0 ? requested : static_cast<int>(hw);
  return std::max(1, std::min<int>(t, static_cast<int>(jobs)));
}

// Fixed-order task parallelism: results are merged by index, so the outcome
// does not depend on the thread count.
void parallel_over(std::size_t jobs, int threads, const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || jobs <= 1) {
    for (std::size_t i = 0; i < jobs; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(jobs);
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t]() {
      for (std::size_t i = std::size_t(t); i < jobs; i += std::size_t(threads)) {
        try {
          fn(i);
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

std::vector<TaskBatch> cache_batches(const SystemSpec& spec,
                                     const std::vector<TaskDataset>& tasks) {
  std::vector<TaskBatch> out;
  out.reserve(tasks.size());
  for (const auto& t : tasks)
    out.push_back(task_batch(t.adaptation, spec.n_q(), spec.n_p(), spec.n_s()));
  return out;
}

std::vector<std::size_t> sample_batch_indices(RngStream& rng, std::size_t n_tasks,
                                              std::size_t batch) {
  // Without replacement, partial Fisher-Yates on an index vector.
  std::vector<std::size_t> idx(n_tasks);
  for (std::size_t i = 0; i < n_tasks; ++i) idx[i] = i;
  const std::size_t k = std::min(batch, n_tasks);
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t j = i + rng.next_below(n_tasks - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  return idx;
}

// Index positions of the final affine weights within the parameter order.
std::vector<std::size_t> last_layer_indices(DynamicsModel& m) {
  std::vector<std::size_t> out;
  auto refs = m.params();
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto& name = refs[i].name;
    if (name.size() >= 3 && name.compare(name.size() - 3, 3, ".Wo") == 0) out.push_back(i);
  }
  return out;
}

FieldEval model_eval(const DynamicsModel& model, const Tensor& z) {
  return [&model, z](const Tensor& states) { return model_field(model, z, states); };
}

}  // namespace

LossGrads loss_and_grads(const DynamicsModel& model, const Tensor* z, const TaskBatch& batch,
                         GradWrt wrt) {
  Graph g;
  const bool param_grad = (wrt != GradWrt::Latent);
  DynamicsModelNodes nodes = insert_model_leaves(g, model, param_grad);
  Value zv;
  if (model.kind != ModKind::None) {
    if (z == nullptr) throw ConfigError("loss_and_grads: modulated model needs a latent code");
    zv = g.leaf(*z, wrt == GradWrt::Latent);
  }
  Value x = g.leaf(batch.states, true);
  LossBuild lb = model_loss_nodes(g, model, nodes, zv, x, g.constant(batch.labels));

  std::vector<Value> wrt_values;
  switch (wrt) {
    case GradWrt::Latent:
      wrt_values = {zv};
      break;
    case GradWrt::Params:
      wrt_values = model_leaf_list(model, nodes);
      break;
    case GradWrt::LastLayer: {
      wrt_values.push_back(nodes.e_qp.Wo);
      if (model.generic) wrt_values.push_back(nodes.e_s.Wo);
      break;
    }
  }
  LossGrads out;
  out.loss = lb.loss.item();
  if (lb.penalty.valid()) out.penalty = lb.penalty.item();
  auto grads = g.gradient(lb.loss, wrt_values, false);
  out.grads.reserve(grads.size());
  for (auto& gv : grads) out.grads.push_back(gv.tensor());
  return out;
}

Tensor mean_latent(const std::vector<Tensor>& latents) {
  if (latents.empty()) throw DataError("mean_latent: no latent codes");
  Tensor avg = Tensor::zeros(latents.front().shape());
  for (const Tensor& z : latents)
    for (std::size_t i = 0; i < avg.numel(); ++i) avg.vec()[i] += z.vec()[i];
  for (double& v : avg.vec()) v /= double(latents.size());
  return avg;
}

Tensor adapt_latent(const DynamicsModel& model, const Tensor& z_init, const TaskBatch& batch,
                    int n_steps, double eta) {
  Tensor z = z_init;
  for (int i = 0; i < n_steps; ++i) {
    LossGrads lg = loss_and_grads(model, &z, batch, GradWrt::Latent);
    if (!std::isfinite(lg.loss))
      throw NumericError("adapt: non-finite loss at step " + std::to_string(i));
    for (std::size_t j = 0; j < z.numel(); ++j) z.vec()[j] -= eta * lg.grads[0].vec()[j];
  }
  return z;
}

double certify(const DynamicsModel& model, const MetaConfig& cfg, const SystemSpec& spec,
               const std::vector<TaskDataset>& val, const std::vector<Tensor>& train_latents) {
  if (val.empty()) return -1.0;
  Tensor z_avg = mean_latent(train_latents);
  std::vector<Tensor> adapted(val.size());
  auto batches = cache_batches(spec, val);
  parallel_over(val.size(), resolve_threads(cfg.threads, val.size()), [&](std::size_t i) {
    adapted[i] = adapt_latent(model, z_avg, batches[i], cfg.n_val, cfg.resolved_eta_val());
  });
  std::vector<EvalCase> cases;
  for (std::size_t i = 0; i < val.size(); ++i)
    cases.push_back({&val[i], model_eval(model, adapted[i])});
  return eps_traj(spec, cases);
}

double certify_baseline(const DynamicsModel& model, const MetaConfig& cfg, const SystemSpec& spec,
                        const std::vector<TaskDataset>& val, bool last_layer_only) {
  if (val.empty()) return -1.0;
  auto batches = cache_batches(spec, val);
  std::vector<DynamicsModel> adapted(val.size(), model);
  parallel_over(val.size(), resolve_threads(cfg.threads, val.size()), [&](std::size_t i) {
    adapted[i] = finetune(model, batches[i], cfg.n_val, cfg.resolved_eta_val(), last_layer_only);
  });
  std::vector<EvalCase> cases;
  Tensor no_z;
  for (std::size_t i = 0; i < val.size(); ++i)
    cases.push_back({&val[i], model_eval(adapted[i], no_z)});
  return eps_traj(spec, cases);
}

TrainerResult meta_train(const MetaConfig& cfg, DynamicsModel model, const SystemSpec& spec,
                         const std::vector<TaskDataset>& train,
                         const std::vector<TaskDataset>& val, const LogSink& sink) {
  if (train.empty()) throw DataError("meta_train: empty training split");
  if (model.kind == ModKind::None)
    throw ConfigError("meta_train: modulation-based training needs a modulated model");

  auto batches = cache_batches(spec, train);
  std::vector<Tensor> latents(train.size(), Tensor::zeros({std::size_t(model.arch.z_dim)}));

  std::vector<Tensor*> params;
  for (auto& p : model.params()) params.push_back(p.tensor);
  AdamState adam = AdamState::init(params);
  RngStream batch_rng = RngStream(cfg.seed).derive("outer_batches");

  TrainerResult result;
  result.model = model;
  result.latents = latents;
  const double t0 = now_s();
  const int threads = resolve_threads(cfg.threads, std::size_t(cfg.batch));

  for (int iter = 1; iter <= cfg.n_out; ++iter) {
    auto task_idx = sample_batch_indices(batch_rng, train.size(), std::size_t(cfg.batch));
    std::vector<std::vector<Tensor>> task_grads(task_idx.size());
    std::vector<double> task_loss(task_idx.size());

    // Two phases so the worker threads stay balanced: the per-task inner
    // chains first, then the outer-gradient evaluations.
    parallel_over(task_idx.size(), threads, [&](std::size_t b) {
      const std::size_t k = task_idx[b];
      for (int i = 0; i < cfg.n_in; ++i) {
        LossGrads lg = loss_and_grads(model, &latents[k], batches[k], GradWrt::Latent);
        if (!std::isfinite(lg.loss))
          throw NumericError("meta_train: non-finite loss at iteration " + std::to_string(iter) +
                             " task " + std::to_string(k));
        for (std::size_t j = 0; j < latents[k].numel(); ++j)
          latents[k].vec()[j] -= cfg.eta_in * lg.grads[0].vec()[j];
      }
    });
    std::vector<double> task_penalty(task_idx.size(), -1.0);
    parallel_over(task_idx.size(), threads, [&](std::size_t b) {
      const std::size_t k = task_idx[b];
      LossGrads lg = loss_and_grads(model, &latents[k], batches[k], GradWrt::Params);
      if (!std::isfinite(lg.loss))
        throw NumericError("meta_train: non-finite loss at iteration " + std::to_string(iter) +
                           " task " + std::to_string(k));
      task_loss[b] = lg.loss;
      task_penalty[b] = lg.penalty;
      task_grads[b] = std::move(lg.grads);
    });

    std::vector<Tensor> grads = std::move(task_grads[0]);
    double mean_loss = task_loss[0];
    for (std::size_t b = 1; b < task_grads.size(); ++b) {
      for (std::size_t i = 0; i < grads.size(); ++i)
        for (std::size_t j = 0; j < grads[i].numel(); ++j)
          grads[i].vec()[j] += task_grads[b][i].vec()[j];
      mean_loss += task_loss[b];
    }
    mean_loss /= double(task_idx.size());
    double mean_penalty = -1.0;
    if (model.kind == ModKind::MultiRank) {
      mean_penalty = 0.0;
      for (double p : task_penalty) mean_penalty += std::max(0.0, p);
      mean_penalty /= double(task_idx.size());
    }
    if (cfg.clip) clip_global_norm(grads, cfg.clip_norm);
    if (cfg.outer_adam)
      adam.apply(params, grads, cfg.eta_out);
    else
      sgd_step(params, grads, cfg.eta_out);

    TrainLogEntry entry{iter, mean_loss, mean_penalty, -1.0, now_s() - t0};
    if ((cfg.n_cert > 0 && iter % cfg.n_cert == 0) || iter == cfg.n_out) {
      entry.val_metric = certify(model, cfg, spec, val, latents);
      if (entry.val_metric >= 0.0 &&
          (result.best_iter < 0 || entry.val_metric < result.best_val)) {
        result.best_val = entry.val_metric;
        result.best_iter = iter;
        result.model = model;
        result.latents = latents;
      }
    }
    result.log.push_back(entry);
    if (sink) sink(entry);
  }
  if (result.best_iter < 0) {  // no validation set: keep the final state
    result.model = std::move(model);
    result.latents = std::move(latents);
  }
  return result;
}

namespace {

// One task's contribution to the MAML/ANIL meta-gradient: differentiate the
// post-inner-loop loss through n_in SGD steps. Every loss evaluation gets its
// own input leaf so the field gradient stays a partial derivative of the
// network input.
LossGrads maml_task_grads(const DynamicsModel& model, const TaskBatch& batch,
                          const MetaConfig& cfg, const std::vector<std::size_t>& inner_set) {
  Graph g;
  DynamicsModelNodes nodes0 = insert_model_leaves(g, model, true);
  std::vector<Value> theta = model_leaf_list(model, nodes0);
  std::vector<Value> cur = theta;
  for (int i = 0; i < cfg.n_in; ++i) {
    DynamicsModelNodes nodes = nodes_from_values(model, cur);
    Value x = g.leaf(batch.states, true);
    LossBuild lb = model_loss_nodes(g, model, nodes, Value{}, x, g.constant(batch.labels));
    std::vector<Value> wrt;
    for (std::size_t idx : inner_set) wrt.push_back(cur[idx]);
    auto grads = g.gradient(lb.loss, wrt, cfg.second_order);
    std::vector<Value> next = cur;
    for (std::size_t wi = 0; wi < inner_set.size(); ++wi)
      next[inner_set[wi]] = g.sub(cur[inner_set[wi]], g.mul_scalar(grads[wi], cfg.eta_in));
    cur = std::move(next);
  }
  Value x_out = g.leaf(batch.states, true);
  DynamicsModelNodes nodes_out = nodes_from_values(model, cur);
  LossBuild out = model_loss_nodes(g, model, nodes_out, Value{}, x_out, g.constant(batch.labels));
  LossGrads lg;
  lg.loss = out.loss.item();
  auto meta = g.gradient(out.loss, theta, false);
  for (auto& mv : meta) lg.grads.push_back(mv.tensor());
  return lg;
}

}  // namespace

TrainerResult maml_train(const MetaConfig& cfg, DynamicsModel model, const SystemSpec& spec,
                         const std::vector<TaskDataset>& train,
                         const std::vector<TaskDataset>& val, bool anil, const LogSink& sink) {
  if (train.empty()) throw DataError("maml_train: empty training split");
  auto batches = cache_batches(spec, train);
  std::vector<Tensor*> params;
  for (auto& p : model.params()) params.push_back(p.tensor);
  std::vector<std::size_t> inner_set;
  if (anil) {
    inner_set = last_layer_indices(model);
  } else {
    inner_set.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) inner_set[i] = i;
  }
  AdamState adam = AdamState::init(params);
  RngStream batch_rng = RngStream(cfg.seed).derive("outer_batches");
  TrainerResult result;
  result.model = model;
  const double t0 = now_s();
  const int threads = resolve_threads(cfg.threads, std::size_t(cfg.batch));

  for (int iter = 1; iter <= cfg.n_out; ++iter) {
    auto task_idx = sample_batch_indices(batch_rng, train.size(), std::size_t(cfg.batch));
    std::vector<std::vector<Tensor>> task_grads(task_idx.size());
    std::vector<double> task_loss(task_idx.size());
    parallel_over(task_idx.size(), threads, [&](std::size_t b) {
      LossGrads lg = maml_task_grads(model, batches[task_idx[b]], cfg, inner_set);
      if (!std::isfinite(lg.loss))
        throw NumericError("maml_train: non-finite loss at iteration " + std::to_string(iter) +
                           " task " + std::to_string(task_idx[b]));
      task_loss[b] = lg.loss;
      task_grads[b] = std::move(lg.grads);
    });
    std::vector<Tensor> grads = std::move(task_grads[0]);
    double mean_loss = task_loss[0];
    for (std::size_t b = 1; b < task_grads.size(); ++b) {
      for (std::size_t i = 0; i < grads.size(); ++i)
        for (std::size_t j = 0; j < grads[i].numel(); ++j)
          grads[i].vec()[j] += task_grads[b][i].vec()[j];
      mean_loss += task_loss[b];
    }
    mean_loss /= double(task_idx.size());
    if (cfg.clip) clip_global_norm(grads, cfg.clip_norm);
    if (cfg.outer_adam)
      adam.apply(params, grads, cfg.eta_out);
    else
      sgd_step(params, grads, cfg.eta_out);

    TrainLogEntry entry{iter, mean_loss, -1.0, -1.0, now_s() - t0};
    if ((cfg.n_cert > 0 && iter % cfg.n_cert == 0) || iter == cfg.n_out) {
      entry.val_metric = certify_baseline(model, cfg, spec, val, anil);
      if (entry.val_metric >= 0.0 &&
          (result.best_iter < 0 || entry.val_metric < result.best_val)) {
        result.best_val = entry.val_metric;
        result.best_iter = iter;
        result.model = model;
      }
    }
    result.log.push_back(entry);
    if (sink) sink(entry);
  }
  if (result.best_iter < 0) result.model = std::move(model);
  return result;
}

TrainerResult reptile_train(const MetaConfig& cfg, DynamicsModel model, const SystemSpec& spec,
                            const std::vector<TaskDataset>& train,
                            const std::vector<TaskDataset>& val, const LogSink& sink) {
  if (train.empty()) throw DataError("reptile_train: empty training split");
  auto batches = cache_batches(spec, train);
  std::vector<Tensor*> params;
  for (auto& p : model.params()) params.push_back(p.tensor);
  RngStream batch_rng = RngStream(cfg.seed).derive("outer_batches");
  TrainerResult result;
  result.model = model;
  const double t0 = now_s();
  const int threads = resolve_threads(cfg.threads, std::size_t(cfg.batch));

  for (int iter = 1; iter <= cfg.n_out; ++iter) {
    auto task_idx = sample_batch_indices(batch_rng, train.size(), std::size_t(cfg.batch));
    std::vector<std::vector<Tensor>> deltas(task_idx.size());
    std::vector<double> task_loss(task_idx.size());
    parallel_over(task_idx.size(), threads, [&](std::size_t b) {
      DynamicsModel adapted = model;
      std::vector<Tensor*> ap;
      for (auto& p : adapted.params()) ap.push_back(p.tensor);
      double loss = 0.0;
      if (cfg.n_in == 0) {
        // Degenerate case: move along the plain task gradient so the update
        // coincides with multi-task SGD at rate eta_out.
        LossGrads lg = loss_and_grads(adapted, nullptr, batches[task_idx[b]], GradWrt::Params);
        loss = lg.loss;
        std::vector<Tensor> d;
        for (auto& gt : lg.grads) {
          Tensor neg = gt;
          for (double& v : neg.vec()) v = -v;
          d.push_back(std::move(neg));
        }
        deltas[b] = std::move(d);
      } else {
        for (int i = 0; i < cfg.n_in; ++i) {
          LossGrads lg = loss_and_grads(adapted, nullptr, batches[task_idx[b]], GradWrt::Params);
          loss = lg.loss;
          sgd_step(ap, lg.grads, cfg.eta_in);
        }
        std::vector<Tensor> d(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
          d[i] = *ap[i];
          for (std::size_t j = 0; j < d[i].numel(); ++j) d[i].vec()[j] -= params[i]->vec()[j];
        }
        deltas[b] = std::move(d);
      }
      if (!std::isfinite(loss))
        throw NumericError("reptile_train: non-finite loss at iteration " + std::to_string(iter) +
                           " task " + std::to_string(task_idx[b]));
      task_loss[b] = loss;
    });
    double mean_loss = 0.0;
    for (std::size_t b = 0; b < task_idx.size(); ++b) mean_loss += task_loss[b];
    mean_loss /= double(task_idx.size());
    // theta <- theta + beta * mean_b (theta_tilde - theta)
    const double scale = cfg.eta_out / double(task_idx.size());
    for (std::size_t i = 0; i < params.size(); ++i)
      for (std::size_t j = 0; j < params[i]->numel(); ++j) {
        double acc = 0.0;
        for (std::size_t b = 0; b < deltas.size(); ++b) acc += deltas[b][i].vec()[j];
        params[i]->vec()[j] += scale * acc;
      }

    TrainLogEntry entry{iter, mean_loss, -1.0, -1.0, now_s() - t0};
    if ((cfg.n_cert > 0 && iter % cfg.n_cert == 0) || iter == cfg.n_out) {
      entry.val_metric = certify_baseline(model, cfg, spec, val, false);
      if (entry.val_metric >= 0.0 &&
          (result.best_iter < 0 || entry.val_metric < result.best_val)) {
        result.best_val = entry.val_metric;
        result.best_iter = iter;
        result.model = model;
      }
    }
    result.log.push_back(entry);
    if (sink) sink(entry);
  }
  if (result.best_iter < 0) result.model = std::move(model);
  return result;
}

DynamicsModel scratch_train(const MetaConfig& cfg, DynamicsModel model, const TaskDataset& task,
                            const LogSink& sink) {
  TaskBatch batch = task_batch(task.adaptation, model.n_q, model.n_q, model.n_s);
  std::vector<Tensor*> params;
  for (auto& p : model.params()) params.push_back(p.tensor);
  AdamState adam = AdamState::init(params);
  const int iters = cfg.resolved_scratch_iters();
  const double t0 = now_s();
  for (int iter = 1; iter <= iters; ++iter) {
    LossGrads lg = loss_and_grads(model, nullptr, batch, GradWrt::Params);
    if (!std::isfinite(lg.loss))
      throw NumericError("scratch_train: non-finite loss at iteration " + std::to_string(iter) +
                         " task " + std::to_string(task.index));
    if (cfg.clip) clip_global_norm(lg.grads, cfg.clip_norm);
    adam.apply(params, lg.grads, cfg.eta_out);
    if (sink && (iter % 100 == 0 || iter == iters))
      sink(TrainLogEntry{iter, lg.loss, -1.0, -1.0, now_s() - t0});
  }
  return model;
}

DynamicsModel finetune(DynamicsModel model, const TaskBatch& batch, int n_steps, double eta,
                       bool last_layer_only) {
  if (last_layer_only) {
    std::vector<Tensor*> last;
    last.push_back(&model.e_qp.Wo);
    if (model.generic) last.push_back(&model.e_s.Wo);
    for (int i = 0; i < n_steps; ++i) {
      LossGrads lg = loss_and_grads(model, nullptr, batch, GradWrt::LastLayer);
      if (!std::isfinite(lg.loss))
        throw NumericError("finetune: non-finite loss at step " + std::to_string(i));
      sgd_step(last, lg.grads, eta);
    }
    return model;
  }
  std::vector<Tensor*> params;
  for (auto& p : model.params()) params.push_back(p.tensor);
  for (int i = 0; i < n_steps; ++i) {
    LossGrads lg = loss_and_grads(model, nullptr, batch, GradWrt::Params);
    if (!std::isfinite(lg.loss))
      throw NumericError("finetune: non-finite loss at step " + std::to_string(i));
    sgd_step(params, lg.grads, eta);
  }
  return model;
}

}  // namespace latdyn
