#pragma once

// Experiment manifests, run directories, metric records, aggregated tables
// and SVG plots.
//
// Run directory layout (one per experiment and seed):
//   <out>/<experiment>/seed-<s>/manifest.json
//   <out>/<experiment>/seed-<s>/member-<k>/epoch-<e>.ckpt, metrics.csv
//   <out>/<experiment>/seed-<s>/teachers/member-<k>/...   (deep teachers)
//   <out>/<experiment>/seed-<s>/trunk/epoch-<t>.ckpt        (shared split point)
//   <out>/<experiment>/seed-<s>/metrics.json [, plane.csv, alignment.json]

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "basinlab/align.hpp"
#include "basinlab/ensembles.hpp"
#include "basinlab/landscape.hpp"
#include "basinlab/train.hpp"

namespace basinlab {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

struct DatasetSource {
  std::string kind = "blobs";  // blobs | csv | idx
  BlobConfig blobs;
  std::string train_path, test_path;
  std::string train_images, train_labels, test_images, test_labels;
  std::size_t num_classes = 0;  // csv only; 0 infers from labels
};

struct ModelChoice {
  std::string kind = "mlp";  // mlp | res_mlp
  std::vector<std::size_t> hidden{64, 64};
  std::size_t stream_width = 64;
  bool layer_norm = true;

  ModelSpec resolve(std::size_t input_dim, std::size_t num_classes) const {
    ModelSpec s = kind == "mlp" ? ModelSpec::mlp(input_dim, hidden, num_classes, layer_norm)
                                : ModelSpec::res_mlp(input_dim, stream_width, hidden, num_classes, layer_norm);
    s.validate();
    return s;
  }
};

struct EnsembleChoice {
  Family family = Family::deep;
  std::size_t members = 5;
  std::size_t split_epoch = 0;
  double beta = 0.2;
  double temperature = 3.0;
  std::size_t distill_epochs = 0;  // 0 means T - t
  std::string align_method = "pcd";
  std::size_t max_outer_iters = kDefaultMaxOuterIters;
  std::size_t max_sweeps = kDefaultMaxSweeps;
};

struct MetricOptions {
  std::size_t q_joint_samples = kDefaultJointSamples;
  std::size_t lambda_points = kDefaultLambdaPoints;
  std::size_t plane_resolution = kDefaultPlaneResolution;
  double plane_margin = kDefaultPlaneMargin;
  std::string eval = "test";
  std::uint64_t seed = 0;
};

inline const std::vector<std::string>& known_metrics() {
  static const std::vector<std::string> m{"accuracy", "q_pair", "q_joint", "diversity", "plane"};
  return m;
}

struct ExperimentManifest {
  ExperimentManifest() {
    dataset.blobs = desk_blob_config();
    train = desk_train_config();
  }

  std::string experiment;
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir = "runs";
  DatasetSource dataset;
  ModelChoice model;
  TrainConfig train;
  EnsembleChoice ensemble;
  std::vector<std::string> metrics{"accuracy"};
  MetricOptions options;
};

namespace detail {

using json = nlohmann::json;

// Reads one JSON object, rejecting keys outside `allowed`.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path, std::vector<std::string> allowed) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw SchemaError(path_, "expected an object");
    for (const auto& [key, value] : j.items())
      if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
        throw SchemaError(at(key), "unknown key '" + key + "'");
  }

  bool has(const std::string& key) const { return j_.contains(key); }
  std::string at(const std::string& key) const { return path_ + "." + key; }
  const json& raw(const std::string& key) const { return j_.at(key); }

  template <typename T>
  T get(const std::string& key, T fallback) const {
    if (!has(key)) return fallback;
    return convert<T>(j_.at(key), at(key));
  }

  template <typename T>
  T required(const std::string& key) const {
    if (!has(key)) throw SchemaError(at(key), "missing required key");
    return convert<T>(j_.at(key), at(key));
  }

 private:
  template <typename T>
  static T convert(const json& v, const std::string& path) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw SchemaError(path, "expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw SchemaError(path, "expected a string");
      return v.get<std::string>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
        throw SchemaError(path, "expected a nonnegative integer");
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw SchemaError(path, "expected a number");
      const T x = v.get<T>();
      if (!std::isfinite(x)) throw SchemaError(path, "expected a finite number");
      return x;
    } else {
      if (!v.is_array()) throw SchemaError(path, "expected an array");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i)
        out.push_back(convert<typename T::value_type>(v[i], path + "[" + std::to_string(i) + "]"));
      return out;
    }
  }

  const json& j_;
  std::string path_;
};

inline void require(bool ok, const std::string& path, const std::string& what) {
  if (!ok) throw SchemaError(path, what);
}

}  // namespace detail

inline ExperimentManifest parse_manifest(const nlohmann::json& j) {
  using detail::ObjectReader;
  using detail::require;
  ExperimentManifest m;
  const ObjectReader top(j, "$",
                         {"experiment", "seeds", "output_dir", "dataset", "model", "train", "ensemble", "metrics", "metric_options"});
  m.experiment = top.required<std::string>("experiment");
  require(std::regex_match(m.experiment, std::regex("[A-Za-z0-9._-]+")), top.at("experiment"),
          "must be non-empty and use only letters, digits, '.', '_' or '-'");
  m.seeds = top.get("seeds", m.seeds);
  require(!m.seeds.empty(), top.at("seeds"), "at least one seed is required");
  m.output_dir = top.get("output_dir", m.output_dir);

  if (!top.has("dataset")) throw SchemaError(top.at("dataset"), "missing required key");
  {
    const auto& dj = top.raw("dataset");
    if (!dj.is_object()) throw SchemaError(top.at("dataset"), "expected an object");
    const std::string kind = dj.contains("kind") && dj["kind"].is_string() ? dj["kind"].get<std::string>() : "";
    auto& d = m.dataset;
    if (kind == "blobs") {
      const ObjectReader r(dj, "$.dataset",
                           {"kind", "num_classes", "clusters_per_class", "n_train", "n_test", "dim", "noise_dims",
                            "noise_sigma", "spread", "seed", "center_range"});
      auto& b = d.blobs;
      b.num_classes = r.get("num_classes", b.num_classes);
      b.clusters_per_class = r.get("clusters_per_class", b.clusters_per_class);
      b.n_train = r.get("n_train", b.n_train);
      b.n_test = r.get("n_test", b.n_test);
      b.dim = r.get("dim", b.dim);
      b.noise_dims = r.get("noise_dims", b.noise_dims);
      b.noise_sigma = r.get("noise_sigma", b.noise_sigma);
      b.spread = r.get("spread", b.spread);
      b.seed = r.get("seed", b.seed);
      b.center_range = r.get("center_range", b.center_range);
      require(b.num_classes >= 2, r.at("num_classes"), "must be >= 2");
      require(b.clusters_per_class >= 1, r.at("clusters_per_class"), "must be >= 1");
      require(b.dim >= 2, r.at("dim"), "must be >= 2");
      require(b.n_train >= b.num_classes, r.at("n_train"), "must be >= num_classes");
      require(b.n_test >= b.num_classes, r.at("n_test"), "must be >= num_classes");
    } else if (kind == "csv") {
      const ObjectReader r(dj, "$.dataset", {"kind", "train", "test", "num_classes"});
      d.train_path = r.required<std::string>("train");
      d.test_path = r.required<std::string>("test");
      d.num_classes = r.get("num_classes", std::size_t{0});
    } else if (kind == "idx") {
      const ObjectReader r(dj, "$.dataset", {"kind", "train_images", "train_labels", "test_images", "test_labels"});
      d.train_images = r.required<std::string>("train_images");
      d.train_labels = r.required<std::string>("train_labels");
      d.test_images = r.required<std::string>("test_images");
      d.test_labels = r.required<std::string>("test_labels");
    } else {
      throw SchemaError("$.dataset.kind", "expected one of blobs, csv, idx");
    }
    d.kind = kind;
  }

  if (top.has("model")) {
    const ObjectReader r(top.raw("model"), "$.model", {"kind", "hidden", "stream_width", "layer_norm"});
    m.model.kind = r.get("kind", m.model.kind);
    require(m.model.kind == "mlp" || m.model.kind == "res_mlp", r.at("kind"), "expected mlp or res_mlp");
    m.model.hidden = r.get("hidden", m.model.hidden);
    require(!m.model.hidden.empty(), r.at("hidden"), "at least one hidden layer is required");
    for (std::size_t i = 0; i < m.model.hidden.size(); ++i)
      require(m.model.hidden[i] >= 1, r.at("hidden") + "[" + std::to_string(i) + "]", "must be >= 1");
    m.model.stream_width = r.get("stream_width", m.model.stream_width);
    require(m.model.stream_width >= 1, r.at("stream_width"), "must be >= 1");
    m.model.layer_norm = r.get("layer_norm", m.model.layer_norm);
  }

  if (top.has("train")) {
    const ObjectReader r(top.raw("train"), "$.train",
                         {"epochs", "batch_size", "peak_lr", "warmup_fraction", "momentum", "floor_lr", "jitter_sigma",
                          "horizontal_flip", "reset_momentum_at_split"});
    auto& t = m.train;
    t.epochs = r.get("epochs", t.epochs);
    t.batch_size = r.get("batch_size", t.batch_size);
    t.peak_lr = r.get("peak_lr", t.peak_lr);
    t.warmup_fraction = r.get("warmup_fraction", t.warmup_fraction);
    t.momentum = r.get("momentum", t.momentum);
    t.floor_lr = r.get("floor_lr", t.floor_lr);
    t.augmentation.jitter_sigma = r.get("jitter_sigma", t.augmentation.jitter_sigma);
    t.augmentation.horizontal_flip = r.get("horizontal_flip", t.augmentation.horizontal_flip);
    t.reset_momentum_at_split = r.get("reset_momentum_at_split", t.reset_momentum_at_split);
    require(t.epochs >= 1, r.at("epochs"), "must be >= 1");
    require(t.batch_size >= 1, r.at("batch_size"), "must be >= 1");
    require(t.peak_lr > 0.0, r.at("peak_lr"), "must be > 0");
    require(t.warmup_fraction >= 0.0 && t.warmup_fraction < 1.0, r.at("warmup_fraction"), "must lie in [0, 1)");
    require(t.momentum >= 0.0 && t.momentum < 1.0, r.at("momentum"), "must lie in [0, 1)");
    require(t.floor_lr >= 0.0, r.at("floor_lr"), "must be >= 0");
    require(t.augmentation.jitter_sigma >= 0.0, r.at("jitter_sigma"), "must be >= 0");
  }

  if (!top.has("ensemble")) throw SchemaError(top.at("ensemble"), "missing required key");
  {
    const ObjectReader r(top.raw("ensemble"), "$.ensemble",
                         {"family", "members", "split_epoch", "beta", "temperature", "distill_epochs", "align_method",
                          "max_outer_iters", "max_sweeps"});
    auto& e = m.ensemble;
    const std::string fam = r.required<std::string>("family");
    try {
      e.family = family_from_string(fam);
    } catch (const UsageError&) {
      throw SchemaError(r.at("family"), "unknown family '" + fam + "'");
    }
    e.members = r.get("members", e.members);
    e.split_epoch = r.get("split_epoch", e.split_epoch);
    e.beta = r.get("beta", e.beta);
    e.temperature = r.get("temperature", e.temperature);
    e.distill_epochs = r.get("distill_epochs", e.distill_epochs);
    e.align_method = r.get("align_method", e.align_method);
    e.max_outer_iters = r.get("max_outer_iters", e.max_outer_iters);
    e.max_sweeps = r.get("max_sweeps", e.max_sweeps);
    require(e.members >= (e.family == Family::swe ? 1u : 2u), r.at("members"), "too few members for this family");
    require(e.split_epoch <= m.train.epochs, r.at("split_epoch"), "must not exceed train.epochs");
    require(e.beta >= 0.0 && e.beta <= 1.0, r.at("beta"), "must lie in [0, 1]");
    require(e.temperature >= 1.0, r.at("temperature"), "must be >= 1");
    require(e.align_method == "pcd" || e.align_method == "multi_pcd", r.at("align_method"), "expected pcd or multi_pcd");
    require(e.align_method != "multi_pcd" || e.members >= 3, r.at("members"), "multi_pcd needs at least 3 members");
    require(e.max_outer_iters >= 1, r.at("max_outer_iters"), "must be >= 1");
    require(e.max_sweeps >= 1, r.at("max_sweeps"), "must be >= 1");
    if (e.family == Family::swe && m.train.floor_lr == 0.0) m.train.floor_lr = 0.01;
    if (e.family == Family::distilled) {
      if (e.distill_epochs == 0) e.distill_epochs = m.train.epochs - e.split_epoch;
      require(e.distill_epochs >= 1, r.at("distill_epochs"), "must be >= 1");
    }
  }

  m.metrics = top.get("metrics", m.metrics);
  for (std::size_t i = 0; i < m.metrics.size(); ++i)
    require(std::find(known_metrics().begin(), known_metrics().end(), m.metrics[i]) != known_metrics().end(),
            "$.metrics[" + std::to_string(i) + "]", "unknown metric '" + m.metrics[i] + "'");
  if (std::find(m.metrics.begin(), m.metrics.end(), "plane") != m.metrics.end())
    require(m.ensemble.members >= 3, "$.metrics", "plane needs at least 3 members");

  if (top.has("metric_options")) {
    const ObjectReader r(top.raw("metric_options"), "$.metric_options",
                         {"q_joint_samples", "lambda_points", "plane_resolution", "plane_margin", "eval", "seed"});
    auto& o = m.options;
    o.q_joint_samples = r.get("q_joint_samples", o.q_joint_samples);
    o.lambda_points = r.get("lambda_points", o.lambda_points);
    o.plane_resolution = r.get("plane_resolution", o.plane_resolution);
    o.plane_margin = r.get("plane_margin", o.plane_margin);
    o.eval = r.get("eval", o.eval);
    o.seed = r.get("seed", o.seed);
    require(o.q_joint_samples >= 1, r.at("q_joint_samples"), "must be >= 1");
    require(o.lambda_points >= 2, r.at("lambda_points"), "must be >= 2");
    require(o.plane_resolution >= 2, r.at("plane_resolution"), "must be >= 2");
    require(o.plane_margin >= 0.0, r.at("plane_margin"), "must be >= 0");
    require(o.eval == "test" || o.eval == "train", r.at("eval"), "expected test or train");
  }
  return m;
}

inline nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": invalid JSON: " + e.what());
  }
}

inline ExperimentManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError("$", std::string("invalid JSON: ") + e.what());
  }
  return parse_manifest(j);
}

// Canonical form with every default filled in; seeds and output_dir are
// left out because they do not change what a single seed computes.
inline nlohmann::json to_json(const ExperimentManifest& m) {
  nlohmann::json d = {{"kind", m.dataset.kind}};
  if (m.dataset.kind == "blobs") {
    const auto& b = m.dataset.blobs;
    d.update({{"num_classes", b.num_classes}, {"clusters_per_class", b.clusters_per_class}, {"n_train", b.n_train},
              {"n_test", b.n_test}, {"dim", b.dim}, {"noise_dims", b.noise_dims}, {"noise_sigma", b.noise_sigma},
              {"spread", b.spread}, {"seed", b.seed}, {"center_range", b.center_range}});
  } else if (m.dataset.kind == "csv") {
    d.update({{"train", m.dataset.train_path}, {"test", m.dataset.test_path}, {"num_classes", m.dataset.num_classes}});
  } else {
    d.update({{"train_images", m.dataset.train_images}, {"train_labels", m.dataset.train_labels},
              {"test_images", m.dataset.test_images}, {"test_labels", m.dataset.test_labels}});
  }
  nlohmann::json train = to_json(m.train);
  train.erase("master_seed");
  train.erase("member");
  train.erase("schedule");
  const auto& e = m.ensemble;
  return {{"experiment", m.experiment},
          {"dataset", d},
          {"model", {{"kind", m.model.kind}, {"hidden", m.model.hidden}, {"stream_width", m.model.stream_width}, {"layer_norm", m.model.layer_norm}}},
          {"train", train},
          {"ensemble",
           {{"family", to_string(e.family)}, {"members", e.members}, {"split_epoch", e.split_epoch}, {"beta", e.beta},
            {"temperature", e.temperature}, {"distill_epochs", e.distill_epochs}, {"align_method", e.align_method},
            {"max_outer_iters", e.max_outer_iters}, {"max_sweeps", e.max_sweeps}}},
          {"metrics", m.metrics},
          {"metric_options",
           {{"q_joint_samples", m.options.q_joint_samples}, {"lambda_points", m.options.lambda_points},
            {"plane_resolution", m.options.plane_resolution}, {"plane_margin", m.options.plane_margin},
            {"eval", m.options.eval}, {"seed", m.options.seed}}}};
}

inline std::pair<Dataset, Dataset> load_datasets(const DatasetSource& s) {
  if (s.kind == "blobs") return make_gaussian_blobs(s.blobs);
  if (s.kind == "csv") {
    Dataset tr = load_csv(s.train_path, s.num_classes);
    Dataset te = load_csv(s.test_path, s.num_classes ? s.num_classes : tr.num_classes);
    te.split = "test";
    const std::size_t k = std::max(tr.num_classes, te.num_classes);
    tr.num_classes = te.num_classes = k;
    return {tr, te};
  }
  if (s.kind == "idx") {
    Dataset tr = load_idx(s.train_images, s.train_labels);
    Dataset te = load_idx(s.test_images, s.test_labels);
    te.split = "test";
    const std::size_t k = std::max(tr.num_classes, te.num_classes);
    tr.num_classes = te.num_classes = k;
    return {tr, te};
  }
  throw UsageError("unknown dataset kind '" + s.kind + "'");
}

// ---------------------------------------------------------------------------
// Run directories
// ---------------------------------------------------------------------------

inline std::string epoch_log_csv(const std::vector<EpochLog>& log) {
  std::string out = "epoch,lr,train_loss,test_acc\n";
  char buf[128];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g\n", e.epoch, e.lr, e.train_loss, e.test_acc);
    out += buf;
  }
  return out;
}

class RunDirectory {
 public:
  RunDirectory(fs::path root, ModelSpec spec) : root_(std::move(root)), spec_(std::move(spec)) {}

  const fs::path& root() const { return root_; }

  fs::path member_dir(const std::string& role, std::size_t index) const {
    if (role == "trunk") return root_ / "trunk";
    const fs::path d = root_ / ("member-" + std::to_string(index));
    return role == "teacher" ? root_ / "teachers" / d.filename() : d;
  }

  fs::path checkpoint_path(const std::string& role, std::size_t index, std::size_t epoch) const {
    return member_dir(role, index) / ("epoch-" + std::to_string(epoch) + ".ckpt");
  }

  // A stored checkpoint is reused only if it was written by the same spec and
  // training configuration.
  ArtifactStore store() {
    ArtifactStore s;
    s.load = [this](const std::string& role, std::size_t index, std::size_t epoch, const TrainConfig& cfg) -> std::optional<Checkpoint> {
      const fs::path p = checkpoint_path(role, index, epoch);
      if (!fs::exists(p)) return std::nullopt;
      Checkpoint c = load_checkpoint(p);
      if (!(c.params.spec == spec_) || c.epoch != epoch || config_digest(c.config) != config_digest(cfg)) return std::nullopt;
      ++cached_;
      return c;
    };
    s.save = [this](const std::string& role, std::size_t index, const Checkpoint& c, const std::vector<EpochLog>& log) {
      const fs::path dir = member_dir(role, index);
      fs::create_directories(dir);
      save_checkpoint(checkpoint_path(role, index, c.epoch), c);
      if (!log.empty()) atomic_write(dir / "metrics.csv", epoch_log_csv(log));
      ++trained_;
    };
    return s;
  }

  std::size_t trained() const { return trained_; }
  std::size_t cached() const { return cached_; }

 private:
  fs::path root_;
  ModelSpec spec_;
  std::atomic<std::size_t> trained_{0};
  std::atomic<std::size_t> cached_{0};
};

// Latest checkpoint of every member-<k> directory under `dir`, by k.
inline std::vector<Checkpoint> load_members(const fs::path& dir) {
  std::map<std::size_t, fs::path> latest;
  std::map<std::size_t, std::size_t> latest_epoch;
  if (!fs::is_directory(dir)) throw FormatError("not a run directory: " + dir.string());
  const std::regex member_re("member-([0-9]+)"), epoch_re("epoch-([0-9]+)\\.ckpt");
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::smatch mm;
    const std::string name = entry.path().filename().string();
    if (!entry.is_directory() || !std::regex_match(name, mm, member_re)) continue;
    const std::size_t k = std::stoul(mm[1]);
    for (const auto& f : fs::directory_iterator(entry.path())) {
      std::smatch em;
      const std::string fname = f.path().filename().string();
      if (!std::regex_match(fname, em, epoch_re)) continue;
      const std::size_t e = std::stoul(em[1]);
      if (!latest.count(k) || e > latest_epoch[k]) {
        latest[k] = f.path();
        latest_epoch[k] = e;
      }
    }
  }
  std::vector<Checkpoint> out;
  for (std::size_t k = 0; k < latest.size(); ++k) {
    if (!latest.count(k)) throw FormatError(dir.string() + ": member-" + std::to_string(k) + " has no checkpoint");
    out.push_back(load_checkpoint(latest[k]));
  }
  if (out.empty()) throw FormatError(dir.string() + ": no member checkpoints");
  return out;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct MetricRecord {
  std::string experiment;
  std::uint64_t seed = 0;
  std::string family;
  std::string metric;
  double value = 0.0;
};

struct MetricOutput {
  std::vector<MetricRecord> records;
  nlohmann::json reports = nlohmann::json::object();
  std::optional<PlaneGrid> plane;
};

inline MetricOutput compute_metrics(std::span<const ParamVector> members, const Dataset& eval_set,
                                    const std::vector<std::string>& requested, const MetricOptions& o,
                                    std::uint64_t run_seed, std::size_t jobs) {
  MetricOutput out;
  auto record = [&](const std::string& name, double v) {
    if (std::isfinite(v)) out.records.push_back({"", run_seed, "", name, v});
  };
  auto wants = [&](const char* m) { return std::find(requested.begin(), requested.end(), m) != requested.end(); };
  if (wants("accuracy") || wants("diversity")) {
    const auto probs = member_probabilities(members, eval_set, jobs);
    const EnsembleMetrics em = ensemble_metrics(probs, eval_set.labels);
    if (wants("accuracy")) {
      double mean = 0.0;
      for (double a : em.member_accuracy) mean += a / static_cast<double>(em.member_accuracy.size());
      record("ensemble_accuracy", em.ensemble_accuracy);
      record("mean_member_accuracy", mean);
      record("ensemble_log_loss", em.ensemble_log_loss);
      record("mean_member_log_loss", em.mean_member_log_loss);
      record("jensen_gap", em.jensen_gap());
      out.reports["accuracy"] = to_json(em);
    }
    if (wants("diversity") && members.size() >= 2) {
      DiversityReport d;
      d.predictive_variance = predictive_variance(probs, eval_set.labels);
      d.jsd = one_vs_all_jsd(probs);
      d.member_accuracy = em.member_accuracy;
      d.eval_split = eval_set.split;
      record("jsd", d.jsd);
      record("predictive_variance", d.predictive_variance);
      out.reports["diversity"] = to_json(d);
    }
  }
  if (wants("q_pair") && members.size() >= 2) {
    const PairCurve c = q_pair_curve(members[0], members[1], lambda_grid(o.lambda_points), eval_set, 0, 1, jobs);
    record("q_pair_min", *std::min_element(c.q_pair.begin(), c.q_pair.end()));
    out.reports["q_pair"] = to_json(c);
  }
  if (wants("q_joint") && members.size() >= 2) {
    const auto r = q_joint_report(members, o.q_joint_samples, mix_seed(o.seed, run_seed), eval_set, jobs);
    record("q_joint", r.mean);
    out.reports["q_joint"] = to_json(r);
  }
  if (wants("plane") && members.size() >= 3) {
    out.plane = plane_grid(members[0], members[1], members[2], eval_set, o.plane_resolution, o.plane_margin, jobs);
    out.reports["plane"] = to_json(*out.plane);
  }
  return out;
}

inline nlohmann::json to_json(const EnsembleBundle& b) {
  return {{"family", to_string(b.family)},
          {"members", b.size()},
          {"epochs_consumed", b.epochs_consumed},
          {"partial", b.partial},
          {"params",
           {{"epochs", b.params.epochs}, {"split_epoch", b.params.split_epoch}, {"distill_epochs", b.params.distill_epochs},
            {"beta", b.params.beta}, {"temperature", b.params.temperature}, {"floor_lr", b.params.floor_lr},
            {"master_seed", b.params.master_seed}}},
          {"metadata", b.metadata}};
}

// ---------------------------------------------------------------------------
// cmd_run
// ---------------------------------------------------------------------------

struct RunOverrides {
  std::optional<std::vector<std::uint64_t>> seeds;
  std::optional<std::size_t> jobs;
  std::optional<std::string> out;
  std::optional<std::string> eval;
};

struct RunSummary {
  std::vector<fs::path> seed_dirs;
  std::size_t runs_trained = 0;
  std::size_t runs_cached = 0;
  bool partial = false;
};

inline fs::path seed_dir(const fs::path& out, const std::string& experiment, std::uint64_t seed) {
  return out / experiment / ("seed-" + std::to_string(seed));
}

namespace detail {

inline void write_json(const fs::path& p, const nlohmann::json& j) { atomic_write(p, j.dump(2) + "\n"); }

// Builds (or reloads) the bundle for one seed.
inline EnsembleBundle build_for_manifest(const ExperimentManifest& m, const ModelSpec& spec, const Dataset& train,
                                         TrainConfig cfg, const BuildOptions& opts, RunDirectory& dir) {
  const auto& e = m.ensemble;
  auto teachers = [&] { return build_deep(spec, train, e.members, cfg, opts, "teacher"); };
  switch (e.family) {
    case Family::deep: return build_deep(spec, train, e.members, cfg, opts);
    case Family::swe: return build_swe(spec, train, e.members, cfg, opts);
    case Family::constrained: return build_constrained(spec, train, e.members, e.split_epoch, cfg, opts);
    case Family::distilled: {
      const EnsembleBundle deep = teachers();
      if (deep.partial) return deep;
      return build_distilled(spec, train, deep, {e.beta, e.temperature, e.split_epoch, e.distill_epochs}, cfg, opts);
    }
    case Family::deep_distilled: {
      const EnsembleBundle deep = teachers();
      if (deep.partial) return deep;
      return build_deep_distilled(spec, train, deep, e.beta, e.temperature, cfg, opts);
    }
    case Family::permuted: {
      const EnsembleBundle deep = teachers();
      if (deep.partial) return deep;
      const auto params = deep.member_params();
      const AlignmentResult pcd = pcd_align_all(params, e.max_sweeps, cfg.master_seed, opts.jobs);
      const AlignmentResult a =
          e.align_method == "pcd" ? pcd : multi_pcd_align(params, e.max_outer_iters, pcd.perms, cfg.master_seed, e.max_sweeps);
      EnsembleBundle out = permute_bundle(deep, a);
      for (std::size_t k = 0; k < out.size(); ++k) {
        fs::create_directories(dir.member_dir("member", k));
        save_checkpoint(dir.checkpoint_path("member", k, out.members[k].epoch), out.members[k]);
      }
      write_json(dir.root() / "alignment.json", to_json(a));
      return out;
    }
  }
  throw UsageError("unhandled family");
}

}  // namespace detail

// Trains every seed of the manifest and writes checkpoints and metrics.
// Completed runs are reloaded instead of retrained. Throws DivergenceError
// after writing all artifacts if any member diverged.
inline RunSummary cmd_run(ExperimentManifest m, const RunOverrides& ov = {}, std::ostream* log = nullptr) {
  if (ov.seeds) m.seeds = *ov.seeds;
  if (ov.out) m.output_dir = *ov.out;
  if (ov.eval) {
    if (*ov.eval != "test" && *ov.eval != "train") throw UsageError("--eval must be test or train");
    m.options.eval = *ov.eval;
  }
  const std::size_t jobs = deterministic_mode() ? 1 : ov.jobs.value_or(1);
  const auto [train_set, test_set] = load_datasets(m.dataset);
  train_set.validate(true);
  const Dataset& eval_set = m.options.eval == "train" ? train_set : test_set;
  const ModelSpec spec = m.model.resolve(train_set.dim(), train_set.num_classes);
  const nlohmann::json canonical = to_json(m);

  RunSummary summary;
  for (std::uint64_t seed : m.seeds) {
    const fs::path root = seed_dir(m.output_dir, m.experiment, seed);
    fs::create_directories(root);
    const nlohmann::json stamp = {{"manifest", canonical}, {"seed", seed}};
    if (fs::exists(root / "manifest.json") && read_json_file(root / "manifest.json") != stamp)
      throw UsageError(root.string() + " holds results of a different manifest; choose another experiment name or --out");
    detail::write_json(root / "manifest.json", stamp);

    RunDirectory dir(root, spec);
    const ArtifactStore store = dir.store();
    BuildOptions opts;
    opts.jobs = jobs;
    opts.eval_set = &test_set;
    opts.store = &store;
    TrainConfig cfg = m.train;
    cfg.master_seed = seed;
    const EnsembleBundle bundle = detail::build_for_manifest(m, spec, train_set, cfg, opts, dir);

    const auto params = bundle.member_params();
    MetricOutput mo = compute_metrics(params, eval_set, m.metrics, m.options, seed, jobs);
    mo.records.push_back({"", seed, "", "epochs_consumed", static_cast<double>(bundle.epochs_consumed)});
    nlohmann::json records = nlohmann::json::array();
    for (auto& r : mo.records) {
      r.experiment = m.experiment;
      r.family = to_string(bundle.family);
      records.push_back({{"metric", r.metric}, {"value", r.value}});
    }
    if (mo.plane) atomic_write(root / "plane.csv", plane_csv(*mo.plane));
    detail::write_json(root / "metrics.json", {{"experiment", m.experiment},
                                               {"seed", seed},
                                               {"family", to_string(bundle.family)},
                                               {"eval_split", eval_set.split},
                                               {"bundle", to_json(bundle)},
                                               {"records", records},
                                               {"reports", mo.reports}});
    summary.seed_dirs.push_back(root);
    summary.runs_trained += dir.trained();
    summary.runs_cached += dir.cached();
    summary.partial = summary.partial || bundle.partial;
    if (log)
      *log << m.experiment << " seed " << seed << ": " << dir.trained() << " runs trained, " << dir.cached()
           << " reused" << (bundle.partial ? " (partial: a member diverged)" : "") << "\n";
  }
  if (summary.partial) throw DivergenceError("at least one member diverged; completed artifacts were kept", -1);
  return summary;
}

// ---------------------------------------------------------------------------
// cmd_table
// ---------------------------------------------------------------------------

struct TableRow {
  std::string experiment, family, metric;
  double mean = 0.0, stddev = 0.0;
  std::size_t seeds = 0;
};

inline std::vector<fs::path> find_metric_files(const std::vector<fs::path>& inputs) {
  std::vector<fs::path> files;
  for (const auto& in : inputs) {
    if (fs::is_regular_file(in)) {
      files.push_back(in);
    } else if (fs::is_directory(in)) {
      for (const auto& e : fs::recursive_directory_iterator(in))
        if (e.is_regular_file() && e.path().filename() == "metrics.json") files.push_back(e.path());
    } else {
      throw FormatError("no such file or directory: " + in.string());
    }
  }
  std::sort(files.begin(), files.end());
  files.erase(std::unique(files.begin(), files.end()), files.end());
  return files;
}

inline std::vector<MetricRecord> read_records(const std::vector<fs::path>& inputs) {
  std::vector<MetricRecord> out;
  for (const auto& f : find_metric_files(inputs)) {
    const auto j = read_json_file(f);
    try {
      for (const auto& r : j.at("records"))
        out.push_back({j.at("experiment").get<std::string>(), j.at("seed").get<std::uint64_t>(),
                       j.at("family").get<std::string>(), r.at("metric").get<std::string>(), r.at("value").get<double>()});
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(f.string() + ": malformed metrics file: " + e.what());
    }
  }
  return out;
}

// Mean and sample standard deviation (n - 1; 0 for a single seed).
inline std::vector<TableRow> aggregate(const std::vector<MetricRecord>& records) {
  std::map<std::tuple<std::string, std::string, std::string>, std::vector<double>> groups;
  for (const auto& r : records) groups[{r.experiment, r.family, r.metric}].push_back(r.value);
  std::vector<TableRow> rows;
  for (const auto& [key, values] : groups) {
    TableRow row{std::get<0>(key), std::get<1>(key), std::get<2>(key), 0.0, 0.0, values.size()};
    for (double v : values) row.mean += v;
    row.mean /= static_cast<double>(values.size());
    if (values.size() > 1) {
      double ss = 0.0;
      for (double v : values) ss += (v - row.mean) * (v - row.mean);
      row.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
    }
    rows.push_back(row);
  }
  return rows;
}

inline std::string format_table(const std::vector<TableRow>& rows, const std::string& format) {
  char buf[64];
  auto fixed2 = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::string(std::strcmp(buf, "-0.00") == 0 ? "0.00" : buf);
  };
  std::ostringstream os;
  if (format == "csv") {
    os << "experiment,family,metric,mean,std,seeds\n";
    for (const auto& r : rows)
      os << r.experiment << ',' << r.family << ',' << r.metric << ',' << fixed2(r.mean) << ',' << fixed2(r.stddev) << ','
         << r.seeds << '\n';
    return os.str();
  }
  if (format != "text") throw UsageError("--format must be csv or text");
  std::vector<std::array<std::string, 5>> cells{{"experiment", "family", "metric", "mean ± std", "seeds"}};
  for (const auto& r : rows) cells.push_back({r.experiment, r.family, r.metric, fixed2(r.mean) + " ± " + fixed2(r.stddev), std::to_string(r.seeds)});
  std::array<std::size_t, 5> width{};
  auto display_width = [](const std::string& s) {
    std::size_t n = 0;
    for (unsigned char c : s) n += (c & 0xC0) != 0x80;
    return n;
  };
  for (const auto& row : cells)
    for (std::size_t c = 0; c < 5; ++c) width[c] = std::max(width[c], display_width(row[c]));
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < 5; ++c) {
      const bool right = c >= 3;
      const std::string pad(width[c] - display_width(row[c]), ' ');
      os << (right ? pad + row[c] : row[c] + (c + 1 < 5 ? pad : ""));
      if (c + 1 < 5) os << "  ";
    }
    os << '\n';
  }
  return os.str();
}

inline std::string cmd_table(const std::vector<fs::path>& inputs, const std::string& format) {
  return format_table(aggregate(read_records(inputs)), format);
}

// ---------------------------------------------------------------------------
// SVG plots
// ---------------------------------------------------------------------------

class SvgPlot {
 public:
  static constexpr double kWidth = 640, kHeight = 440, kLeft = 70, kRight = 150, kTop = 40, kBottom = 60;

  SvgPlot(std::string title, std::string xlabel, std::string ylabel)
      : title_(std::move(title)), xlabel_(std::move(xlabel)), ylabel_(std::move(ylabel)) {}

  void set_range(double x0, double x1, double y0, double y1) {
    if (!(x1 > x0)) { x0 -= 0.5; x1 += 0.5; }
    if (!(y1 > y0)) { y0 -= 0.5; y1 += 0.5; }
    x0_ = x0; x1_ = x1; y0_ = y0; y1_ = y1;
  }

  double px(double x) const { return kLeft + (x - x0_) / (x1_ - x0_) * (kWidth - kLeft - kRight); }
  double py(double y) const { return kHeight - kBottom - (y - y0_) / (y1_ - y0_) * (kHeight - kTop - kBottom); }

  void polyline(const std::vector<double>& xs, const std::vector<double>& ys, const std::string& color, const std::string& label) {
    std::string pts;
    for (std::size_t i = 0; i < xs.size(); ++i) pts += (i ? " " : "") + num(px(xs[i])) + "," + num(py(ys[i]));
    body_ += "<polyline class=\"series\" fill=\"none\" stroke=\"" + color + "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
    legend(label, color);
  }

  void point(double x, double y, const std::string& color, const std::string& cls = "point") {
    body_ += "<circle class=\"" + cls + "\" cx=\"" + num(px(x)) + "\" cy=\"" + num(py(y)) + "\" r=\"4\" fill=\"" + color + "\"/>\n";
  }

  void cell(double x0, double y0, double x1, double y1, const std::string& color) {
    const double a = px(x0), b = px(x1), c = py(y1), d = py(y0);
    body_ += "<rect class=\"cell\" x=\"" + num(a) + "\" y=\"" + num(c) + "\" width=\"" + num(b - a) + "\" height=\"" +
             num(d - c) + "\" fill=\"" + color + "\"/>\n";
  }

  void hline(double y, const std::string& cls) {
    body_ += "<line class=\"" + cls + "\" x1=\"" + num(px(x0_)) + "\" y1=\"" + num(py(y)) + "\" x2=\"" + num(px(x1_)) +
             "\" y2=\"" + num(py(y)) + "\" stroke=\"#888\" stroke-dasharray=\"4 3\"/>\n";
  }

  void legend(const std::string& label, const std::string& color) {
    if (label.empty()) return;
    const double y = kTop + 16.0 * static_cast<double>(legend_count_++);
    legend_ += "<rect x=\"" + num(kWidth - kRight + 12) + "\" y=\"" + num(y) + "\" width=\"10\" height=\"10\" fill=\"" + color +
               "\"/><text x=\"" + num(kWidth - kRight + 26) + "\" y=\"" + num(y + 9) + "\" font-size=\"11\">" + escape(label) +
               "</text>\n";
  }

  std::string str() const {
    std::string s = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
                    num(kWidth) + "\" height=\"" + num(kHeight) + "\" viewBox=\"0 0 " + num(kWidth) + " " + num(kHeight) +
                    "\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s += "<text x=\"" + num(kWidth / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" + escape(title_) + "</text>\n";
    s += body_;
    // Axes with five ticks each.
    const double xa = px(x0_), xb = px(x1_), ya = py(y0_), yb = py(y1_);
    s += "<g class=\"axes\" stroke=\"black\" fill=\"none\"><line x1=\"" + num(xa) + "\" y1=\"" + num(ya) + "\" x2=\"" + num(xb) +
         "\" y2=\"" + num(ya) + "\"/><line x1=\"" + num(xa) + "\" y1=\"" + num(ya) + "\" x2=\"" + num(xa) + "\" y2=\"" + num(yb) +
         "\"/></g>\n";
    for (int i = 0; i <= 4; ++i) {
      const double xv = x0_ + (x1_ - x0_) * i / 4.0, yv = y0_ + (y1_ - y0_) * i / 4.0;
      s += "<text x=\"" + num(px(xv)) + "\" y=\"" + num(ya + 16) + "\" text-anchor=\"middle\" font-size=\"10\">" + tick(xv) + "</text>\n";
      s += "<text x=\"" + num(xa - 6) + "\" y=\"" + num(py(yv) + 3) + "\" text-anchor=\"end\" font-size=\"10\">" + tick(yv) + "</text>\n";
    }
    s += "<text x=\"" + num((xa + xb) / 2) + "\" y=\"" + num(kHeight - 18) + "\" text-anchor=\"middle\" font-size=\"12\">" +
         escape(xlabel_) + "</text>\n";
    s += "<text transform=\"translate(18," + num((ya + yb) / 2) + ") rotate(-90)\" text-anchor=\"middle\" font-size=\"12\">" +
         escape(ylabel_) + "</text>\n";
    s += legend_;
    s += "</svg>\n";
    return s;
  }

  static std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::strcmp(buf, "-0.00") == 0 ? "0.00" : buf;
  }

  static std::string escape(const std::string& in) {
    std::string out;
    for (char c : in) {
      switch (c) {
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '&': out += "&amp;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
      }
    }
    return out;
  }

 private:
  static std::string tick(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", std::abs(v) < 1e-12 ? 0.0 : v);
    return buf;
  }

  std::string title_, xlabel_, ylabel_;
  std::string body_, legend_;
  int legend_count_ = 0;
  double x0_ = 0, x1_ = 1, y0_ = 0, y1_ = 1;
};

inline const std::string& palette(std::size_t i) {
  static const std::vector<std::string> colors{"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"};
  return colors[i % colors.size()];
}

// Linear blue-to-yellow ramp for t in [0, 1].
inline std::string heat_color(double t) {
  t = std::clamp(std::isfinite(t) ? t : 1.0, 0.0, 1.0);
  const int r = static_cast<int>(std::lround(68 + t * (253 - 68)));
  const int g = static_cast<int>(std::lround(1 + t * (231 - 1)));
  const int b = static_cast<int>(std::lround(84 + t * (37 - 84)));
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

namespace detail {

struct Extent {
  double lo = std::numeric_limits<double>::infinity(), hi = -std::numeric_limits<double>::infinity();
  void add(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  bool empty() const { return lo > hi; }
};

inline std::string run_label(const nlohmann::json& j) {
  return j.value("experiment", std::string("?")) + "/seed-" + std::to_string(j.value("seed", std::uint64_t{0}));
}

inline double record_value(const nlohmann::json& j, const std::string& metric) {
  for (const auto& r : j.value("records", nlohmann::json::array()))
    if (r.value("metric", std::string()) == metric) return r.value("value", std::nan(""));
  return std::nan("");
}

}  // namespace detail

// kind: interpolation | scatter | ablation | plane. `metric` selects the
// y value of ablation plots. Missing data yields an axes-only plot and a
// warning on `warn`.
inline std::string cmd_plot(const std::string& kind, const std::vector<fs::path>& inputs, std::ostream& warn,
                            const std::string& metric = "q_joint") {
  static const std::vector<std::string> kinds{"interpolation", "scatter", "ablation", "plane"};
  if (std::find(kinds.begin(), kinds.end(), kind) == kinds.end())
    throw UsageError("unknown plot kind '" + kind + "' (expected interpolation, scatter, ablation or plane)");
  std::vector<nlohmann::json> docs;
  for (const auto& f : find_metric_files(inputs)) docs.push_back(read_json_file(f));

  if (kind == "interpolation") {
    SvgPlot plot("Linear interpolation", "lambda", "q_pair (accuracy points)");
    detail::Extent y;
    y.add(0.0);
    std::vector<const nlohmann::json*> curves;
    for (const auto& d : docs)
      if (d.contains("reports") && d["reports"].contains("q_pair")) {
        curves.push_back(&d);
        for (double v : d["reports"]["q_pair"]["q_pair"]) y.add(v);
      }
    if (curves.empty()) warn << "warning: no q_pair curves found; writing empty axes\n";
    plot.set_range(0.0, 1.0, y.lo, y.hi);
    plot.hline(0.0, "zero");
    for (std::size_t i = 0; i < curves.size(); ++i) {
      const auto& c = (*curves[i])["reports"]["q_pair"];
      plot.polyline(c["lambda"].get<std::vector<double>>(), c["q_pair"].get<std::vector<double>>(), palette(i),
                    detail::run_label(*curves[i]));
    }
    return plot.str();
  }

  if (kind == "scatter") {
    SvgPlot plot("Connectivity vs accuracy", "q_joint (accuracy points)", "ensemble accuracy (%)");
    detail::Extent x, y;
    std::map<std::string, std::vector<std::pair<double, double>>> by_family;
    for (const auto& d : docs) {
      const double q = detail::record_value(d, "q_joint"), a = detail::record_value(d, "ensemble_accuracy");
      if (!std::isfinite(q) || !std::isfinite(a)) continue;
      by_family[d.value("family", std::string("?"))].push_back({q, a});
      x.add(q);
      y.add(a);
    }
    if (by_family.empty()) {
      warn << "warning: no runs with q_joint and ensemble_accuracy; writing empty axes\n";
      plot.set_range(0, 1, 0, 1);
      return plot.str();
    }
    plot.set_range(x.lo, x.hi, y.lo, y.hi);
    std::size_t i = 0;
    for (const auto& [family, pts] : by_family) {
      for (const auto& [q, a] : pts) plot.point(q, a, palette(i));
      plot.legend(family, palette(i++));
    }
    return plot.str();
  }

  if (kind == "ablation") {
    SvgPlot plot("Split-epoch ablation", "split epoch t", metric + " (seed mean)");
    std::map<std::string, std::map<std::size_t, std::vector<double>>> series;
    for (const auto& d : docs) {
      const double v = detail::record_value(d, metric);
      if (!std::isfinite(v) || !d.contains("bundle")) continue;
      series[d.value("family", std::string("?"))][d["bundle"]["params"].value("split_epoch", std::size_t{0})].push_back(v);
    }
    detail::Extent x, y;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> means;
    for (const auto& [family, by_t] : series)
      for (const auto& [t, vals] : by_t) {
        double m = 0.0;
        for (double v : vals) m += v / static_cast<double>(vals.size());
        means[family].first.push_back(static_cast<double>(t));
        means[family].second.push_back(m);
        x.add(static_cast<double>(t));
        y.add(m);
      }
    if (means.empty()) {
      warn << "warning: no runs report " << metric << "; writing empty axes\n";
      plot.set_range(0, 1, 0, 1);
      return plot.str();
    }
    plot.set_range(x.lo, x.hi, y.lo, y.hi);
    std::size_t i = 0;
    for (const auto& [family, xy] : means) {
      plot.polyline(xy.first, xy.second, palette(i), family);
      for (std::size_t k = 0; k < xy.first.size(); ++k) plot.point(xy.first[k], xy.second[k], palette(i));
      ++i;
    }
    return plot.str();
  }

  // plane
  SvgPlot plot("Loss plane", "alpha", "beta");
  const nlohmann::json* grid = nullptr;
  for (const auto& d : docs)
    if (d.contains("reports") && d["reports"].contains("plane")) {
      grid = &d["reports"]["plane"];
      break;
    }
  if (!grid) {
    warn << "warning: no plane grid found; writing empty axes\n";
    plot.set_range(0, 1, 0, 1);
    return plot.str();
  }
  const auto alphas = (*grid)["alpha"].get<std::vector<double>>();
  const auto betas = (*grid)["beta"].get<std::vector<double>>();
  const auto loss = (*grid)["loss"].get<std::vector<double>>();
  const std::size_t res = alphas.size();
  const double da = res > 1 ? (alphas[1] - alphas[0]) / 2 : 0.5, db = res > 1 ? (betas[1] - betas[0]) / 2 : 0.5;
  plot.set_range(alphas.front() - da, alphas.back() + da, betas.front() - db, betas.back() + db);
  detail::Extent l;
  for (double v : loss) l.add(std::log(v));
  for (std::size_t ib = 0; ib < betas.size(); ++ib)
    for (std::size_t ia = 0; ia < res; ++ia) {
      const double v = std::log(loss[ib * res + ia]);
      plot.cell(alphas[ia] - da, betas[ib] - db, alphas[ia] + da, betas[ib] + db,
                heat_color(l.empty() || l.hi == l.lo ? 0.0 : (v - l.lo) / (l.hi - l.lo)));
    }
  for (const auto& a : (*grid)["anchors"]) plot.point(a["alpha"].get<double>(), a["beta"].get<double>(), "#ffffff", "anchor");
  plot.legend("low loss", heat_color(0.0));
  plot.legend("high loss", heat_color(1.0));
  return plot.str();
}

// ---------------------------------------------------------------------------
// Metrics on existing run directories
// ---------------------------------------------------------------------------

struct LoadedRun {
  ExperimentManifest manifest;
  std::uint64_t seed = 0;
  std::vector<Checkpoint> members;
  Dataset train, test;

  std::vector<ParamVector> params() const {
    std::vector<ParamVector> out;
    for (const auto& c : members) out.push_back(c.params);
    return out;
  }
  const Dataset& eval(const std::string& which) const {
    if (which != "test" && which != "train") throw UsageError("--eval must be test or train");
    return which == "train" ? train : test;
  }
};

// `dir` is a seed directory written by cmd_run (or a subdirectory holding
// member-<k> folders, e.g. an aligned copy, below such a directory).
inline LoadedRun load_run(const fs::path& dir) {
  fs::path root = dir;
  while (!root.empty() && !fs::exists(root / "manifest.json")) {
    if (root == root.parent_path()) break;
    root = root.parent_path();
  }
  if (!fs::exists(root / "manifest.json")) throw FormatError(dir.string() + " is not inside a run directory");
  const auto stamp = read_json_file(root / "manifest.json");
  LoadedRun r;
  nlohmann::json mj = stamp.at("manifest");
  mj["seeds"] = {stamp.at("seed")};
  r.manifest = parse_manifest(mj);
  r.seed = stamp.at("seed").get<std::uint64_t>();
  r.members = load_members(dir);
  std::tie(r.train, r.test) = load_datasets(r.manifest.dataset);
  return r;
}

inline nlohmann::json cmd_align(const fs::path& dir, const std::string& method, std::size_t max_outer_iters,
                                std::size_t jobs = 1) {
  if (method != "pcd" && method != "multi_pcd") throw UsageError("--method must be pcd or multi_pcd");
  const LoadedRun run = load_run(dir);
  const auto params = run.params();
  const AlignmentResult pcd = pcd_align_all(params, kDefaultMaxSweeps, run.seed, jobs);
  const AlignmentResult a = method == "pcd" ? pcd : multi_pcd_align(params, max_outer_iters, pcd.perms, run.seed);
  const fs::path out = dir / ("aligned-" + method);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Checkpoint c = run.members[k];
    c.params = apply_permutation(params[k], a.perms[k]);
    c.velocity.clear();
    fs::create_directories(out / ("member-" + std::to_string(k)));
    save_checkpoint(out / ("member-" + std::to_string(k)) / ("epoch-" + std::to_string(c.epoch) + ".ckpt"), c);
  }
  const nlohmann::json j = to_json(a);
  detail::write_json(out / "alignment.json", j);
  return j;
}

inline nlohmann::json cmd_connect(const fs::path& dir, std::size_t samples, std::size_t lambda_points, const std::string& eval,
                                  std::size_t jobs = 1) {
  const LoadedRun run = load_run(dir);
  const auto params = run.params();
  if (params.size() < 2) throw UsageError("connect needs at least two members");
  const Dataset& es = run.eval(eval);
  const nlohmann::json j = {
      {"q_pair", to_json(q_pair_curve(params[0], params[1], lambda_grid(lambda_points), es, 0, 1, jobs))},
      {"q_joint", to_json(q_joint_report(params, samples, mix_seed(run.manifest.options.seed, run.seed), es, jobs))}};
  detail::write_json(dir / "connect.json", j);
  return j;
}

inline nlohmann::json cmd_plane(const fs::path& dir, std::size_t resolution, double margin, const std::string& eval,
                                std::size_t jobs = 1) {
  const LoadedRun run = load_run(dir);
  const auto params = run.params();
  if (params.size() < 3) throw UsageError("plane needs at least three members");
  const PlaneGrid g = plane_grid(params[0], params[1], params[2], run.eval(eval), resolution, margin, jobs);
  atomic_write(dir / "plane.csv", plane_csv(g));
  const nlohmann::json j = {{"experiment", run.manifest.experiment}, {"seed", run.seed}, {"reports", {{"plane", to_json(g)}}}};
  detail::write_json(dir / "plane.json", j);
  return j;
}

inline nlohmann::json cmd_diversity(const fs::path& dir, const std::string& eval, std::size_t jobs = 1) {
  const LoadedRun run = load_run(dir);
  const auto params = run.params();
  const nlohmann::json j = to_json(diversity_report(params, run.eval(eval), jobs));
  detail::write_json(dir / "diversity.json", j);
  return j;
}

}  // namespace basinlab
