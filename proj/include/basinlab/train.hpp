#pragma once

// SGD with momentum, warmup-cosine schedules, the split-training mechanism
// behind constrained ensembles, and checkpoint persistence.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "basinlab/data.hpp"
#include "basinlab/eval.hpp"
#include "basinlab/models.hpp"
#include "basinlab/parallel.hpp"

namespace basinlab {

enum class Schedule { warmup_cosine, warmup_cosine_floor };

struct TrainConfig {
  std::size_t epochs = 50;  // T, the schedule horizon
  std::size_t batch_size = 128;
  double peak_lr = 0.1;
  double warmup_fraction = 0.1;
  Schedule schedule = Schedule::warmup_cosine;
  double floor_lr = 0.0;  // warmup_cosine_floor only
  double momentum = 0.9;
  std::uint64_t master_seed = 0;
  std::uint64_t member = 0;
  Augmentation augmentation{};
  bool reset_momentum_at_split = true;

  void validate() const {
    if (epochs == 0) throw UsageError("epochs must be >= 1");
    if (batch_size == 0) throw UsageError("batch_size must be >= 1");
    if (!(peak_lr > 0.0)) throw UsageError("peak learning rate must be > 0");
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw UsageError("warmup fraction must be in [0, 1)");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw UsageError("momentum must be in [0, 1)");
    if (schedule == Schedule::warmup_cosine_floor && !(floor_lr > 0.0)) throw UsageError("floor_lr must be > 0");
  }

  std::uint64_t init_seed() const { return mix_seed(mix_seed(master_seed, member), 1); }
  std::uint64_t shuffle_seed() const { return mix_seed(mix_seed(master_seed, member), 2); }
  std::uint64_t augment_seed() const { return mix_seed(mix_seed(master_seed, member), 3); }
};

// Training defaults paired with desk_blob_config().
inline TrainConfig desk_train_config() {
  TrainConfig c;
  c.batch_size = 16;
  return c;
}

// Learning rate at a global step: linear 0 -> peak over the warmup, then a
// half cosine from peak to 0 at the end of `epochs`. The floor variant
// clamps at floor_lr and holds it past the horizon.
inline double lr_at(const TrainConfig& cfg, std::size_t global_step, std::size_t steps_per_epoch) {
  const std::size_t total = cfg.epochs * steps_per_epoch;
  const std::size_t warmup = static_cast<std::size_t>(std::floor(cfg.warmup_fraction * static_cast<double>(total)));
  const bool floored = cfg.schedule == Schedule::warmup_cosine_floor;
  if (global_step < warmup) {
    const double lr = cfg.peak_lr * static_cast<double>(global_step) / static_cast<double>(warmup);
    return lr;
  }
  if (global_step >= total) return floored ? cfg.floor_lr : 0.0;
  const double progress = static_cast<double>(global_step - warmup) / static_cast<double>(total - warmup);
  const double lr = cfg.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return floored ? std::max(lr, cfg.floor_lr) : lr;
}

struct Checkpoint {
  static constexpr std::uint16_t kFormatVersion = 1;

  ParamVector params;
  std::size_t epoch = 0;
  std::size_t global_step = 0;
  TrainConfig config;
  double train_loss = std::numeric_limits<double>::quiet_NaN();
  double test_acc = std::numeric_limits<double>::quiet_NaN();
  std::vector<float> velocity;  // momentum buffer; empty when not kept
  std::uint16_t format_version = kFormatVersion;
};

struct EpochLog {
  std::size_t epoch = 0;  // epochs completed
  double lr = 0.0;        // learning rate at the last step of the epoch
  double train_loss = 0.0;
  double test_acc = std::numeric_limits<double>::quiet_NaN();
};

// Builds the scalar training loss for one batch from the parameter leaves.
using LossBuilder =
    std::function<Var<float>(const ParamLayout&, const std::vector<Var<float>>&, const Batch&, const Var<float>& logits)>;

inline LossBuilder cross_entropy_loss() {
  return [](const ParamLayout&, const std::vector<Var<float>>&, const Batch& b, const Var<float>& logits) {
    return cross_entropy(logits, std::span<const int>(b.labels));
  };
}

struct TrainOptions {
  const Dataset* eval_set = nullptr;       // when set, test accuracy is logged every epoch
  std::vector<std::size_t> snapshot_epochs;  // the final epoch is always included
  LossBuilder loss;                         // defaults to cross-entropy
  std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
  std::vector<Checkpoint> snapshots;
  std::vector<EpochLog> log;
  std::size_t epochs_trained = 0;
  bool diverged = false;
  bool from_cache = false;  // loaded from an artifact store, not trained
  std::string diagnostic;

  const Checkpoint& final() const { return snapshots.back(); }
};

// Mutable optimizer state of one run.
struct RunState {
  ParamVector params;
  std::vector<float> velocity;
  std::size_t epoch = 0;
  std::size_t global_step = 0;
};

inline Checkpoint make_checkpoint(const RunState& state, const TrainConfig& cfg, double train_loss, double test_acc) {
  Checkpoint c;
  c.params = state.params;
  c.epoch = state.epoch;
  c.global_step = state.global_step;
  c.config = cfg;
  c.train_loss = train_loss;
  c.test_acc = test_acc;
  c.velocity = state.velocity;
  return c;
}

// Advances `state` from its current epoch to `end_epoch` with classic
// momentum SGD: v <- mu v + g; theta <- theta - lr v. The schedule is driven
// by the global step counter, so continuations resume mid-schedule.
inline TrainResult run_epochs(RunState& state, const Dataset& data, const TrainConfig& cfg, std::size_t end_epoch,
                              const TrainOptions& opts = {}) {
  cfg.validate();
  TrainResult result;
  const ParamLayout layout = make_layout(state.params.spec);
  if (state.velocity.size() != state.params.size()) state.velocity.assign(state.params.size(), 0.0f);
  BatchStream stream(data, cfg.batch_size, cfg.shuffle_seed(), cfg.augment_seed(), cfg.augmentation);
  const std::size_t spe = stream.steps_per_epoch();
  const LossBuilder loss_fn = opts.loss ? opts.loss : cross_entropy_loss();
  const auto mu = static_cast<float>(cfg.momentum);
  auto wants_snapshot = [&](std::size_t e) {
    return e == end_epoch || std::find(opts.snapshot_epochs.begin(), opts.snapshot_epochs.end(), e) != opts.snapshot_epochs.end();
  };
  if (state.epoch >= end_epoch) {
    result.snapshots.push_back(make_checkpoint(state, cfg, std::numeric_limits<double>::quiet_NaN(),
                                               opts.eval_set ? evaluate(state.params, *opts.eval_set).accuracy
                                                             : std::numeric_limits<double>::quiet_NaN()));
    return result;
  }
  while (state.epoch < end_epoch) {
    const RunState before = state;
    double loss_sum = 0.0;
    double lr = 0.0;
    for (std::size_t step = 0; step < spe; ++step) {
      const Batch batch = stream.next_batch(state.epoch, step);
      auto vars = param_vars<float>(state.params, layout, true);
      const Var<float> logits = forward_graph(state.params.spec, layout, vars, Var<float>::constant(batch.inputs));
      const Var<float> loss = loss_fn(layout, vars, batch, logits);
      const float lv = loss.value().item();
      if (!std::isfinite(lv)) {
        state = before;
        result.diverged = true;
        result.diagnostic = "non-finite loss at epoch " + std::to_string(before.epoch) + ", step " + std::to_string(step);
        result.snapshots.push_back(make_checkpoint(state, cfg, std::numeric_limits<double>::quiet_NaN(),
                                                   std::numeric_limits<double>::quiet_NaN()));
        return result;
      }
      loss_sum += lv;
      backward(loss);
      lr = lr_at(cfg, state.global_step, spe);
      const auto lrf = static_cast<float>(lr);
      for (std::size_t e = 0; e < layout.entries.size(); ++e) {
        const auto& entry = layout.entries[e];
        const Tensor<float>& g = vars[e].grad();
        float* v = state.velocity.data() + entry.offset;
        float* p = state.params.values.data() + entry.offset;
        for (std::size_t i = 0; i < entry.size(); ++i) {
          v[i] = mu * v[i] + g[i];
          p[i] -= lrf * v[i];
        }
      }
      ++state.global_step;
    }
    ++state.epoch;
    ++result.epochs_trained;
    EpochLog log{state.epoch, lr, loss_sum / static_cast<double>(spe), std::numeric_limits<double>::quiet_NaN()};
    if (opts.eval_set) log.test_acc = evaluate(state.params, *opts.eval_set).accuracy;
    result.log.push_back(log);
    if (opts.on_epoch) opts.on_epoch(log);
    if (wants_snapshot(state.epoch)) result.snapshots.push_back(make_checkpoint(state, cfg, log.train_loss, log.test_acc));
  }
  return result;
}

inline RunState initial_state(const ModelSpec& spec, const TrainConfig& cfg) {
  RunState s;
  s.params = init_params(spec, cfg.init_seed());
  s.velocity.assign(s.params.size(), 0.0f);
  return s;
}

inline RunState state_from(const Checkpoint& c) {
  RunState s;
  s.params = c.params;
  s.velocity = c.velocity.size() == c.params.size() ? c.velocity : std::vector<float>(c.params.size(), 0.0f);
  s.epoch = c.epoch;
  s.global_step = c.global_step;
  return s;
}

// Full training run from the member's own initialization for cfg.epochs.
inline TrainResult train(const ModelSpec& spec, const Dataset& data, const TrainConfig& cfg, const TrainOptions& opts = {}) {
  RunState state = initial_state(spec, cfg);
  return run_epochs(state, data, cfg, cfg.epochs, opts);
}

// Continuation config for member k after a split: same schedule, the
// member's own shuffle/augmentation streams.
inline TrainConfig continuation_config(const TrainConfig& base, std::size_t k) {
  TrainConfig c = base;
  c.member = k;
  return c;
}

inline RunState split_state(const Checkpoint& at_split, const TrainConfig& cfg) {
  RunState s = state_from(at_split);
  if (cfg.reset_momentum_at_split) std::fill(s.velocity.begin(), s.velocity.end(), 0.0f);
  return s;
}

struct SplitResult {
  Checkpoint at_split;
  std::vector<TrainResult> members;
  std::size_t epochs_trained = 0;
  bool diverged = false;
};

// One run of `base` to epoch t, then M continuations to cfg.epochs that
// share theta^(t) and differ only in batch order and augmentation.
inline SplitResult split_train(const ModelSpec& spec, const Dataset& data, const TrainConfig& base, std::size_t t,
                               std::size_t members, std::size_t jobs = 1, const TrainOptions& opts = {}) {
  if (t > base.epochs) throw UsageError("split epoch t exceeds the training horizon");
  if (members == 0) throw UsageError("split_train needs at least one member");
  SplitResult out;
  RunState trunk = initial_state(spec, base);
  TrainOptions trunk_opts;
  trunk_opts.eval_set = opts.eval_set;
  TrainResult pre = run_epochs(trunk, data, base, t, trunk_opts);
  out.epochs_trained += pre.epochs_trained;
  out.at_split = pre.final();
  if (pre.diverged) {
    out.diverged = true;
    out.members.assign(members, pre);
    return out;
  }
  out.members.resize(members);
  parallel_for(members, jobs, [&](std::size_t k) {
    const TrainConfig cfg = continuation_config(base, k);
    RunState s = split_state(out.at_split, cfg);
    out.members[k] = run_epochs(s, data, cfg, cfg.epochs, opts);
  });
  for (const auto& m : out.members) {
    out.epochs_trained += m.epochs_trained;
    out.diverged = out.diverged || m.diverged;
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON for specs and configs
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const ModelSpec& s) {
  nlohmann::json j;
  j["kind"] = to_string(s.kind);
  j["input_dim"] = s.input_dim;
  j["num_classes"] = s.num_classes;
  j["hidden"] = s.hidden;
  if (s.kind == ArchKind::res_mlp) j["stream_width"] = s.stream_width;
  j["layer_norm"] = std::vector<bool>(s.layer_norm.begin(), s.layer_norm.end());
  return j;
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.kind = arch_from_string(j.at("kind").get<std::string>());
  s.input_dim = j.at("input_dim").get<std::size_t>();
  s.num_classes = j.at("num_classes").get<std::size_t>();
  s.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  if (s.kind == ArchKind::res_mlp) s.stream_width = j.at("stream_width").get<std::size_t>();
  const auto flags = j.at("layer_norm").get<std::vector<bool>>();
  s.layer_norm.assign(flags.begin(), flags.end());
  s.validate();
  return s;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"peak_lr", c.peak_lr},
          {"warmup_fraction", c.warmup_fraction},
          {"schedule", c.schedule == Schedule::warmup_cosine ? "warmup_cosine" : "warmup_cosine_floor"},
          {"floor_lr", c.floor_lr},
          {"momentum", c.momentum},
          {"master_seed", c.master_seed},
          {"member", c.member},
          {"jitter_sigma", c.augmentation.jitter_sigma},
          {"horizontal_flip", c.augmentation.horizontal_flip},
          {"reset_momentum_at_split", c.reset_momentum_at_split}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.at("epochs").get<std::size_t>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.peak_lr = j.at("peak_lr").get<double>();
  c.warmup_fraction = j.at("warmup_fraction").get<double>();
  c.schedule = j.at("schedule").get<std::string>() == "warmup_cosine" ? Schedule::warmup_cosine : Schedule::warmup_cosine_floor;
  c.floor_lr = j.at("floor_lr").get<double>();
  c.momentum = j.at("momentum").get<double>();
  c.master_seed = j.at("master_seed").get<std::uint64_t>();
  c.member = j.at("member").get<std::uint64_t>();
  c.augmentation.jitter_sigma = j.at("jitter_sigma").get<double>();
  c.augmentation.horizontal_flip = j.at("horizontal_flip").get<bool>();
  c.reset_momentum_at_split = j.at("reset_momentum_at_split").get<bool>();
  return c;
}

// FNV-1a over the canonical JSON dump.
inline std::string config_digest(const TrainConfig& c) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : to_json(c).dump()) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Checkpoint file format
//
//   "LBEN" | version u16 LE | header length u32 LE | UTF-8 JSON header
//   then one record per tensor:
//   name length u16 LE | name | rank u8 | dims u32 LE each | dtype u8 | payload
//
// dtype 0 = f32, 1 = f64; payloads are little-endian.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32s(std::string& out, std::span<const float> values) {
  for (float f : values) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
  }
}

inline void put_tensor(std::string& out, const std::string& name, const Shape& shape, std::span<const float> values) {
  put_u16(out, static_cast<std::uint16_t>(name.size()));
  out += name;
  out.push_back(static_cast<char>(shape.size()));
  for (auto d : shape) put_u32(out, static_cast<std::uint32_t>(d));
  out.push_back(0);
  put_f32s(out, values);
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string path) : b_(bytes), path_(std::move(path)) {}
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw FormatError(path_ + ": truncated checkpoint");
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(b_[pos_++]);
  }
  std::uint16_t u16() {
    const std::uint16_t lo = u8();
    return static_cast<std::uint16_t>(lo | (std::uint16_t{u8()} << 8));
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{u8()} << (8 * i);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  const std::string& b_;
  std::string path_;
  std::size_t pos_ = 0;
};

inline double json_number_or_nan(const nlohmann::json& j) {
  return j.is_number() ? j.get<double>() : std::numeric_limits<double>::quiet_NaN();
}

inline nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& c) {
  const ParamLayout layout = make_layout(c.params.spec);
  nlohmann::json header;
  header["spec"] = to_json(c.params.spec);
  header["epoch"] = c.epoch;
  header["global_step"] = c.global_step;
  header["config"] = to_json(c.config);
  header["config_digest"] = config_digest(c.config);
  header["metrics"] = {{"train_loss", detail::number_or_null(c.train_loss)}, {"test_acc", detail::number_or_null(c.test_acc)}};
  const std::string h = header.dump();
  std::string out = "LBEN";
  detail::put_u16(out, c.format_version);
  detail::put_u32(out, static_cast<std::uint32_t>(h.size()));
  out += h;
  for (const auto& e : layout.entries) detail::put_tensor(out, e.name, e.shape, c.params.view(e));
  if (c.velocity.size() == c.params.size())
    detail::put_tensor(out, "optimizer.velocity", Shape{c.velocity.size()}, c.velocity);
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& path = "<memory>") {
  detail::Reader r(bytes, path);
  if (bytes.size() < 4 || bytes.compare(0, 4, "LBEN") != 0) throw FormatError(path + ": bad checkpoint magic");
  r.bytes(4);
  const std::uint16_t version = r.u16();
  if (version != Checkpoint::kFormatVersion) throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t hlen = r.u32();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.bytes(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": corrupt checkpoint header: " + e.what());
  }
  Checkpoint c;
  try {
    const ModelSpec spec = model_spec_from_json(header.at("spec"));
    c.params = zero_params(spec);
    c.epoch = header.at("epoch").get<std::size_t>();
    c.global_step = header.at("global_step").get<std::size_t>();
    c.config = train_config_from_json(header.at("config"));
    c.train_loss = detail::json_number_or_nan(header.at("metrics").at("train_loss"));
    c.test_acc = detail::json_number_or_nan(header.at("metrics").at("test_acc"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": incomplete checkpoint header: " + e.what());
  } catch (const SpecError& e) {
    throw FormatError(path + ": invalid spec in checkpoint: " + e.what());
  }
  c.format_version = version;
  const ParamLayout layout = make_layout(c.params.spec);
  std::size_t next_entry = 0;
  while (!r.done()) {
    const std::string name = r.bytes(r.u16());
    const std::size_t rank = r.u8();
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    if (r.u8() != 0) throw FormatError(path + ": only f32 payloads are supported");
    const std::size_t n = shape_numel(shape);
    std::vector<float> values(n);
    const std::string payload = r.bytes(n * 4);
    for (std::size_t i = 0; i < n; ++i) {
      const auto* p = reinterpret_cast<const unsigned char*>(payload.data() + 4 * i);
      const std::uint32_t bits = std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) |
                                 (std::uint32_t{p[3]} << 24);
      std::memcpy(&values[i], &bits, 4);
    }
    if (name == "optimizer.velocity") {
      if (n != c.params.size()) throw FormatError(path + ": velocity length mismatch");
      c.velocity = std::move(values);
      continue;
    }
    if (next_entry >= layout.entries.size() || layout.entries[next_entry].name != name ||
        layout.entries[next_entry].shape != shape)
      throw FormatError(path + ": unexpected tensor record '" + name + "'");
    std::copy(values.begin(), values.end(), c.params.view(layout.entries[next_entry]).begin());
    ++next_entry;
  }
  if (next_entry != layout.entries.size()) throw FormatError(path + ": checkpoint is missing parameter tensors");
  return c;
}

// Writes to a temporary sibling and renames it into place.
inline void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) { atomic_write(path, encode_checkpoint(c)); }

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), {});
  return decode_checkpoint(bytes, path.string());
}

}  // namespace basinlab
