#pragma once

// Ensemble families: deep, SWE, constrained (split), distilled,
// deep-with-distillation and permuted. Every builder records the training
// epochs it consumed so budgets can be compared against M * T.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "basinlab/train.hpp"

namespace basinlab {

enum class Family { deep, swe, constrained, distilled, deep_distilled, permuted };

inline const char* to_string(Family f) {
  switch (f) {
    case Family::deep: return "deep";
    case Family::swe: return "swe";
    case Family::constrained: return "constrained";
    case Family::distilled: return "distilled";
    case Family::deep_distilled: return "deep_distilled";
    case Family::permuted: return "permuted";
  }
  return "?";
}

inline Family family_from_string(const std::string& s) {
  for (Family f : {Family::deep, Family::swe, Family::constrained, Family::distilled, Family::deep_distilled, Family::permuted})
    if (s == to_string(f)) return f;
  throw UsageError("unknown ensemble family '" + s + "'");
}

struct EnsembleParams {
  std::size_t epochs = 0;        // T
  std::size_t split_epoch = 0;   // t
  std::size_t distill_epochs = 0;
  double beta = 1.0;
  double temperature = 1.0;
  double floor_lr = 0.0;
  std::uint64_t master_seed = 0;
};

struct EnsembleBundle {
  Family family = Family::deep;
  std::vector<Checkpoint> members;
  EnsembleParams params;
  std::size_t epochs_consumed = 0;
  bool partial = false;
  nlohmann::json metadata = nlohmann::json::object();

  std::size_t size() const { return members.size(); }
  const ModelSpec& spec() const {
    if (members.empty()) throw UsageError("empty ensemble bundle");
    return members.front().params.spec;
  }

  std::vector<ParamVector> member_params() const {
    std::vector<ParamVector> out;
    out.reserve(members.size());
    for (const auto& m : members) out.push_back(m.params);
    return out;
  }

  void validate() const {
    if (members.empty()) throw UsageError("empty ensemble bundle");
    for (const auto& m : members)
      if (!(m.params.spec == members.front().params.spec)) throw SpecError("ensemble members use different specs");
  }
};

// Optional checkpoint cache. Builders ask it before every training run
// and hand it every finished run, so interrupted experiments resume and
// repeated ones skip training.
struct ArtifactStore {
  // role is "member", "teacher" or "trunk".
  std::function<std::optional<Checkpoint>(const std::string& role, std::size_t index, std::size_t epoch,
                                          const TrainConfig& cfg)>
      load;
  std::function<void(const std::string& role, std::size_t index, const Checkpoint& ckpt, const std::vector<EpochLog>& log)>
      save;
};

struct BuildOptions {
  std::size_t jobs = 1;
  const Dataset* eval_set = nullptr;
  const ArtifactStore* store = nullptr;
};

// Mean over members of softmax(logits); rows sum to one.
inline Tensor<double> ensemble_predict(std::span<const ParamVector> members, const Tensor<float>& inputs) {
  if (members.empty()) throw UsageError("ensemble_predict: empty bundle");
  Tensor<double> avg(Shape{inputs.rows(), members.front().spec.num_classes});
  for (const auto& m : members) {
    const Tensor<double> p = predict_proba(m, inputs);
    for (std::size_t i = 0; i < p.size(); ++i) avg[i] += p[i];
  }
  const double inv = 1.0 / static_cast<double>(members.size());
  for (auto& v : avg.storage()) v *= inv;
  return avg;
}

inline Tensor<double> ensemble_predict(const EnsembleBundle& bundle, const Tensor<float>& inputs) {
  if (bundle.members.empty()) throw UsageError("ensemble_predict: empty bundle");
  const auto params = bundle.member_params();
  return ensemble_predict(std::span<const ParamVector>(params), inputs);
}

// (1 - beta) * tau^2 * KL(softmax(teacher / tau) || softmax(student / tau))
//   + beta * CE(student, labels), averaged over the batch.
// beta == 1 skips the teacher entirely.
template <typename T>
Var<T> distill_loss(const Var<T>& student_logits, const Tensor<T>& teacher_logits, std::span<const int> labels,
                    double beta, double tau) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw DomainError("distill_loss: beta must lie in [0, 1]");
  if (!(tau >= 1.0)) throw DomainError("distill_loss: temperature must be >= 1");
  if (beta == 1.0) return cross_entropy(student_logits, labels);
  if (teacher_logits.shape() != student_logits.value().shape())
    throw DimensionError("distill_loss: teacher and student logits differ in shape");
  Tensor<T> soft_teacher(teacher_logits.shape());
  Tensor<T> scaled = teacher_logits;
  for (auto& v : scaled.storage()) v = static_cast<T>(v / tau);
  detail::softmax_rows(scaled, soft_teacher);
  const Var<T> log_student = log_softmax(scale(student_logits, static_cast<T>(1.0 / tau)));
  const Var<T> kl = kl_divergence_log(Var<T>::constant(std::move(soft_teacher)), log_student);
  const Var<T> soft_term = scale(kl, static_cast<T>((1.0 - beta) * tau * tau));
  if (beta == 0.0) return soft_term;
  return add(soft_term, scale(cross_entropy(student_logits, labels), static_cast<T>(beta)));
}

// Training loss that distills toward `teacher` on the (augmented) batch.
inline LossBuilder distillation_loss(const ParamVector& teacher, double beta, double tau) {
  if (beta == 1.0) return cross_entropy_loss();
  return [teacher, beta, tau](const ParamLayout&, const std::vector<Var<float>>&, const Batch& b, const Var<float>& logits) {
    return distill_loss(logits, forward(teacher, b.inputs), std::span<const int>(b.labels), beta, tau);
  };
}

namespace detail {

inline TrainOptions member_options(const BuildOptions& opts) {
  TrainOptions o;
  o.eval_set = opts.eval_set;
  return o;
}

// Advances `state` to end_epoch, or returns the stored checkpoint for
// (role, index) when the store already has it. Cached runs report the
// nominal number of epochs so budgets do not depend on the cache.
inline TrainResult run_or_load(const BuildOptions& opts, const std::string& role, std::size_t index, RunState state,
                               const Dataset& data, const TrainConfig& cfg, std::size_t end_epoch,
                               const TrainOptions& topts) {
  if (opts.store && opts.store->load) {
    if (auto c = opts.store->load(role, index, end_epoch, cfg)) {
      TrainResult r;
      r.snapshots.push_back(std::move(*c));
      r.epochs_trained = end_epoch - std::min(end_epoch, state.epoch);
      r.from_cache = true;
      return r;
    }
  }
  TrainResult r = run_epochs(state, data, cfg, end_epoch, topts);
  if (opts.store && opts.store->save && !r.diverged) opts.store->save(role, index, r.final(), r.log);
  return r;
}

inline void finish_bundle(EnsembleBundle& b, const std::vector<TrainResult>& runs) {
  for (const auto& r : runs) {
    b.members.push_back(r.final());
    b.partial = b.partial || r.diverged;
    b.epochs_consumed += r.epochs_trained;
  }
  b.metadata["epoch_budget_deep_equivalent"] = b.params.epochs * b.members.size();
}

inline std::vector<TrainResult> independent_runs(const ModelSpec& spec, const Dataset& data, std::size_t members,
                                                 const TrainConfig& base, const BuildOptions& opts, const std::string& role,
                                                 const std::function<LossBuilder(std::size_t)>& loss_for = {}) {
  std::vector<TrainResult> runs(members);
  parallel_for(members, opts.jobs, [&](std::size_t k) {
    const TrainConfig c = continuation_config(base, k);
    TrainOptions o = member_options(opts);
    if (loss_for) o.loss = loss_for(k);
    runs[k] = run_or_load(opts, role, k, initial_state(spec, c), data, c, c.epochs, o);
  });
  return runs;
}

// Shared trunk of member 0 trained with `base` up to epoch t.
inline TrainResult trunk_run(const ModelSpec& spec, const Dataset& data, const TrainConfig& base, std::size_t t,
                             const BuildOptions& opts) {
  if (t > base.epochs) throw UsageError("split epoch t exceeds the training horizon");
  const TrainConfig c = continuation_config(base, 0);
  return run_or_load(opts, "trunk", 0, initial_state(spec, c), data, c, t, member_options(opts));
}

}  // namespace detail

// M independent runs: independent initializations and batch orders.
inline EnsembleBundle build_deep(const ModelSpec& spec, const Dataset& data, std::size_t members, const TrainConfig& base,
                                 const BuildOptions& opts = {}, const std::string& role = "member") {
  if (members == 0) throw UsageError("build_deep: need at least one member");
  EnsembleBundle b;
  b.family = Family::deep;
  b.params.epochs = base.epochs;
  b.params.master_seed = base.master_seed;
  detail::finish_bundle(b, detail::independent_runs(spec, data, members, base, opts, role));
  return b;
}

// One run that decays to floor_lr by epoch T and then holds it, saving a
// member every T epochs until M members are collected.
inline EnsembleBundle build_swe(const ModelSpec& spec, const Dataset& data, std::size_t members, const TrainConfig& base,
                                const BuildOptions& opts = {}) {
  if (members == 0) throw UsageError("build_swe: need at least one member");
  if (!(base.floor_lr > 0.0)) throw UsageError("build_swe: floor_lr must be > 0");
  TrainConfig cfg = base;
  cfg.schedule = Schedule::warmup_cosine_floor;
  EnsembleBundle b;
  b.family = Family::swe;
  b.params.epochs = base.epochs;
  b.params.floor_lr = base.floor_lr;
  b.params.master_seed = base.master_seed;
  b.metadata["epoch_budget_deep_equivalent"] = cfg.epochs * members;
  if (opts.store && opts.store->load) {
    std::vector<Checkpoint> cached;
    for (std::size_t m = 0; m < members; ++m)
      if (auto c = opts.store->load("member", m, (m + 1) * cfg.epochs, cfg)) cached.push_back(std::move(*c));
    if (cached.size() == members) {
      b.members = std::move(cached);
      b.epochs_consumed = members * cfg.epochs;
      return b;
    }
  }
  TrainOptions o = detail::member_options(opts);
  for (std::size_t m = 1; m <= members; ++m) o.snapshot_epochs.push_back(m * cfg.epochs);
  RunState state = initial_state(spec, cfg);
  TrainResult r = run_epochs(state, data, cfg, members * cfg.epochs, o);
  b.epochs_consumed = r.epochs_trained;
  b.partial = r.diverged;
  b.members = r.snapshots;
  if (opts.store && opts.store->save && !r.diverged)
    for (std::size_t m = 0; m < members; ++m) {
      const std::size_t upto = (m + 1) * cfg.epochs;
      std::vector<EpochLog> log;
      for (const auto& e : r.log)
        if (e.epoch <= upto) log.push_back(e);
      opts.store->save("member", m, r.snapshots[m], log);
    }
  return b;
}

// Members branch from one shared checkpoint at epoch t and differ only in
// batch order and augmentation. Same arithmetic as split_train.
inline EnsembleBundle build_constrained(const ModelSpec& spec, const Dataset& data, std::size_t members, std::size_t t,
                                        const TrainConfig& base, const BuildOptions& opts = {}) {
  if (members == 0) throw UsageError("build_constrained: need at least one member");
  EnsembleBundle b;
  b.family = Family::constrained;
  b.params.epochs = base.epochs;
  b.params.split_epoch = t;
  b.params.master_seed = base.master_seed;
  const TrainResult pre = detail::trunk_run(spec, data, base, t, opts);
  b.epochs_consumed = pre.epochs_trained;
  std::vector<TrainResult> runs(members, pre);
  if (!pre.diverged) {
    const Checkpoint at_split = pre.final();
    parallel_for(members, opts.jobs, [&](std::size_t k) {
      const TrainConfig c = continuation_config(base, k);
      runs[k] = detail::run_or_load(opts, "member", k, split_state(at_split, c), data, c, c.epochs, detail::member_options(opts));
    });
  }
  detail::finish_bundle(b, runs);
  if (pre.diverged) b.epochs_consumed = pre.epochs_trained;
  b.partial = b.partial || pre.diverged;
  b.metadata["epoch_budget_surplus"] = base.epochs * members - std::min(base.epochs * members, b.epochs_consumed);
  return b;
}

struct DistillConfig {
  double beta = 0.2;
  double temperature = 3.0;
  std::size_t split_epoch = 0;     // t
  std::size_t distill_epochs = 0;  // epochs after the split

  void validate() const {
    if (!(beta >= 0.0 && beta <= 1.0)) throw DomainError("distillation beta must lie in [0, 1]");
    if (!(temperature >= 1.0)) throw DomainError("distillation temperature must be >= 1");
  }
};

// Re-discovers each deep member inside the reference member's basin:
// member 1 continues the reference from theta_1^(t) with plain
// cross-entropy; member j >= 2 starts from the same point and distills
// toward deep member j. The trunk follows the reference member's own
// schedule; continuations resume it at step t * steps_per_epoch with
// horizon t + distill_epochs.
inline EnsembleBundle build_distilled(const ModelSpec& spec, const Dataset& data, const EnsembleBundle& deep,
                                      const DistillConfig& dcfg, const TrainConfig& base, const BuildOptions& opts = {}) {
  deep.validate();
  dcfg.validate();
  if (deep.size() < 2) throw UsageError("build_distilled: the deep bundle needs at least two members");
  if (dcfg.distill_epochs == 0) throw UsageError("build_distilled: distill_epochs must be >= 1");
  TrainConfig cfg = base;
  cfg.epochs = dcfg.split_epoch + dcfg.distill_epochs;
  EnsembleBundle b;
  b.family = Family::distilled;
  b.params.epochs = base.epochs;
  b.params.split_epoch = dcfg.split_epoch;
  b.params.distill_epochs = dcfg.distill_epochs;
  b.params.beta = dcfg.beta;
  b.params.temperature = dcfg.temperature;
  b.params.master_seed = base.master_seed;

  const TrainResult pre = detail::trunk_run(spec, data, base, dcfg.split_epoch, opts);
  const std::size_t m = deep.size();
  std::vector<TrainResult> runs(m, pre);
  if (!pre.diverged) {
    const Checkpoint at_split = pre.final();
    parallel_for(m, opts.jobs, [&](std::size_t k) {
      const TrainConfig c = continuation_config(cfg, k);
      TrainOptions o = detail::member_options(opts);
      if (k > 0) o.loss = distillation_loss(deep.members[k].params, dcfg.beta, dcfg.temperature);
      runs[k] = detail::run_or_load(opts, "member", k, split_state(at_split, c), data, c, c.epochs, o);
    });
  }
  detail::finish_bundle(b, runs);
  b.epochs_consumed += pre.epochs_trained;
  if (pre.diverged) b.epochs_consumed = pre.epochs_trained;
  b.partial = b.partial || pre.diverged;
  b.metadata["reference_member_loss"] = "cross_entropy";
  b.metadata["teacher_epochs_not_counted"] = deep.epochs_consumed;
  return b;
}

// Multi-basin control: student j trains from its own initialization (the
// seeds of `base`) with the distillation loss toward deep member j.
inline EnsembleBundle build_deep_distilled(const ModelSpec& spec, const Dataset& data, const EnsembleBundle& deep,
                                           double beta, double tau, const TrainConfig& base,
                                           const BuildOptions& opts = {}) {
  deep.validate();
  DistillConfig{beta, tau, 0, 0}.validate();
  EnsembleBundle b;
  b.family = Family::deep_distilled;
  b.params.epochs = base.epochs;
  b.params.beta = beta;
  b.params.temperature = tau;
  b.params.master_seed = base.master_seed;
  detail::finish_bundle(b, detail::independent_runs(spec, data, deep.size(), base, opts, "member", [&](std::size_t k) {
    return distillation_loss(deep.members[k].params, beta, tau);
  }));
  b.metadata["teacher_epochs_not_counted"] = deep.epochs_consumed;
  return b;
}

}  // namespace basinlab
