#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "basinlab/tensor.hpp"

namespace basinlab {

// splitmix64 finalizer: a bijective 64-bit avalanche.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Derives an independent stream seed for index k from a master seed.
constexpr std::uint64_t mix_seed(std::uint64_t master, std::uint64_t k) noexcept {
  return splitmix64(master ^ splitmix64(k + 0x632BE59BD9B4E019ull));
}

struct Dataset {
  Tensor<float> inputs;  // [n x d]
  std::vector<int> labels;
  std::size_t num_classes = 0;
  std::string split = "train";
  std::string provenance;
  // Non-zero when rows are row-major images, enabling horizontal flips.
  std::size_t image_height = 0;
  std::size_t image_width = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return inputs.cols(); }

  void validate(bool require_all_classes) const {
    if (labels.empty()) throw FormatError("dataset is empty");
    if (inputs.rank() != 2 || inputs.dim(0) != labels.size()) throw FormatError("inputs and labels disagree on n");
    if (!inputs.all_finite()) throw FormatError("dataset contains non-finite inputs");
    std::vector<char> seen(num_classes, 0);
    for (int y : labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes) throw FormatError("label out of range");
      seen[static_cast<std::size_t>(y)] = 1;
    }
    if (require_all_classes && std::find(seen.begin(), seen.end(), 0) != seen.end())
      throw FormatError("some class has no training example");
  }
};

struct BlobConfig {
  std::size_t num_classes = 4;
  std::size_t clusters_per_class = 2;
  std::size_t n_train = 4096;
  std::size_t n_test = 4096;
  std::size_t dim = 2;
  double spread = 0.5;
  std::uint64_t seed = 0;
  double center_range = 2.0;  // centers uniform in [-range, range]^d
  // Extra label-independent N(0, noise_sigma^2) coordinates appended after
  // the d informative ones.
  std::size_t noise_dims = 0;
  double noise_sigma = 1.0;

  std::size_t input_dim() const { return dim + noise_dims; }
};

// Default desk task: K=4 classes of 8 clusters each in 2-D, plus four
// label-independent noise coordinates.
inline BlobConfig desk_blob_config() {
  BlobConfig c;
  c.clusters_per_class = 8;
  c.n_train = 1024;
  c.spread = 0.2;
  c.noise_dims = 4;
  return c;
}

// Cluster centers, indexed [class * clusters_per_class + cluster][dim].
inline std::vector<std::vector<double>> blob_centers(const BlobConfig& cfg) {
  std::mt19937_64 rng(mix_seed(cfg.seed, 0));
  std::uniform_real_distribution<double> u(-cfg.center_range, cfg.center_range);
  std::vector<std::vector<double>> centers(cfg.num_classes * cfg.clusters_per_class, std::vector<double>(cfg.dim));
  for (auto& c : centers)
    for (auto& v : c) v = u(rng);
  return centers;
}

namespace detail {

inline Dataset sample_blobs(const BlobConfig& cfg, const std::vector<std::vector<double>>& centers, std::size_t n,
                            std::uint64_t stream, const char* split) {
  const std::size_t per_class = n / cfg.num_classes;
  const std::size_t total = per_class * cfg.num_classes;
  Dataset ds;
  ds.num_classes = cfg.num_classes;
  ds.split = split;
  const std::size_t width = cfg.input_dim();
  ds.inputs = Tensor<float>(Shape{total, width});
  ds.labels.resize(total);
  std::mt19937_64 rng(mix_seed(cfg.seed, stream));
  std::normal_distribution<double> noise(0.0, 1.0);
  std::size_t row = 0;
  for (std::size_t i = 0; i < per_class; ++i) {
    for (std::size_t k = 0; k < cfg.num_classes; ++k, ++row) {
      const auto& c = centers[k * cfg.clusters_per_class + i % cfg.clusters_per_class];
      for (std::size_t j = 0; j < cfg.dim; ++j)
        ds.inputs[row * width + j] = static_cast<float>(c[j] + cfg.spread * noise(rng));
      for (std::size_t j = cfg.dim; j < width; ++j) ds.inputs[row * width + j] = static_cast<float>(cfg.noise_sigma * noise(rng));
      ds.labels[row] = static_cast<int>(k);
    }
  }
  std::ostringstream os;
  os << "gaussian_blobs(K=" << cfg.num_classes << ", clusters=" << cfg.clusters_per_class << ", d=" << cfg.dim
     << ", spread=" << cfg.spread << ", noise_dims=" << cfg.noise_dims << ", seed=" << cfg.seed << ")";
  ds.provenance = os.str();
  return ds;
}

}  // namespace detail

// Class-conditional Gaussian mixtures. Counts that do not divide evenly
// across classes are rounded down.
inline std::pair<Dataset, Dataset> make_gaussian_blobs(const BlobConfig& cfg) {
  if (cfg.num_classes < 2) throw UsageError("make_gaussian_blobs: need at least 2 classes");
  if (cfg.dim < 2) throw UsageError("make_gaussian_blobs: need d >= 2");
  if (cfg.clusters_per_class < 1) throw UsageError("make_gaussian_blobs: need at least one cluster per class");
  if (cfg.spread < 0.0) throw UsageError("make_gaussian_blobs: spread must be nonnegative");
  if (cfg.noise_sigma < 0.0) throw UsageError("make_gaussian_blobs: noise_sigma must be nonnegative");
  const auto centers = blob_centers(cfg);
  return {detail::sample_blobs(cfg, centers, cfg.n_train, 1, "train"),
          detail::sample_blobs(cfg, centers, cfg.n_test, 2, "test")};
}

inline std::pair<Dataset, Dataset> make_gaussian_blobs(std::size_t k, std::size_t clusters_per_class,
                                                       std::size_t n_train, std::size_t n_test, std::size_t d,
                                                       double spread, std::uint64_t seed) {
  BlobConfig cfg;
  cfg.num_classes = k;
  cfg.clusters_per_class = clusters_per_class;
  cfg.n_train = n_train;
  cfg.n_test = n_test;
  cfg.dim = d;
  cfg.spread = spread;
  cfg.seed = seed;
  return make_gaussian_blobs(cfg);
}

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off, const std::string& path) {
  if (off + 4 > b.size()) throw FormatError(path + ": truncated IDX header");
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

}  // namespace detail

// Reads an IDX image/label file pair (unsigned byte payloads). Pixels are
// scaled to [0, 1].
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);
  if (detail::read_be32(img, 0, images_path) != 0x00000803u) throw FormatError(images_path + ": bad IDX image magic");
  if (detail::read_be32(lab, 0, labels_path) != 0x00000801u) throw FormatError(labels_path + ": bad IDX label magic");
  const std::size_t n = detail::read_be32(img, 4, images_path);
  const std::size_t rows = detail::read_be32(img, 8, images_path);
  const std::size_t cols = detail::read_be32(img, 12, images_path);
  const std::size_t n_labels = detail::read_be32(lab, 4, labels_path);
  if (n != n_labels) throw FormatError("IDX image count " + std::to_string(n) + " != label count " + std::to_string(n_labels));
  if (n == 0) throw FormatError(images_path + ": no images");
  const std::size_t d = rows * cols;
  if (img.size() != 16 + n * d) throw FormatError(images_path + ": truncated or oversized IDX payload");
  if (lab.size() != 8 + n) throw FormatError(labels_path + ": truncated or oversized IDX payload");
  Dataset ds;
  ds.inputs = Tensor<float>(Shape{n, d});
  for (std::size_t i = 0; i < n * d; ++i) ds.inputs[i] = static_cast<float>(img[16 + i]) / 255.0f;
  ds.labels.resize(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = lab[8 + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.num_classes = static_cast<std::size_t>(max_label) + 1;
  ds.image_height = rows;
  ds.image_width = cols;
  ds.provenance = "idx(" + images_path + ", " + labels_path + ")";
  return ds;
}

// CSV with a header row; the last column is an integer label, the rest are
// features.
inline Dataset load_csv(const std::string& path, std::size_t num_classes = 0) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path + ": missing header row");
  std::vector<float> values;
  std::vector<int> labels;
  std::size_t width = 0;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() < 2) throw FormatError(path + ":" + std::to_string(lineno) + ": need features and a label");
    if (width == 0) width = cells.size();
    if (cells.size() != width) throw FormatError(path + ":" + std::to_string(lineno) + ": ragged row");
    try {
      for (std::size_t j = 0; j + 1 < cells.size(); ++j) values.push_back(std::stof(cells[j]));
      labels.push_back(std::stoi(cells.back()));
    } catch (const std::exception&) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": unparsable value");
    }
  }
  if (labels.empty()) throw FormatError(path + ": no data rows");
  Dataset ds;
  ds.inputs = Tensor<float>(Shape{labels.size(), width - 1}, std::move(values));
  int max_label = *std::max_element(labels.begin(), labels.end());
  ds.num_classes = num_classes ? num_classes : static_cast<std::size_t>(max_label) + 1;
  ds.labels = std::move(labels);
  ds.provenance = "csv(" + path + ")";
  ds.validate(false);
  return ds;
}

struct Augmentation {
  double jitter_sigma = 0.0;  // additive Gaussian input noise
  bool horizontal_flip = false;  // only for image-shaped datasets
};

struct Batch {
  Tensor<float> inputs;
  std::vector<int> labels;
  std::vector<std::size_t> indices;
};

// Seeded, epoch-indexed batch order with augmentation. Each epoch is a full
// permutation of the dataset; (seed, epoch, step) determine the batch
// bitwise. Owned by one training run (caches the current epoch order).
class BatchStream {
 public:
  BatchStream(const Dataset& data, std::size_t batch_size, std::uint64_t shuffle_seed, std::uint64_t augment_seed,
              Augmentation aug = {})
      : data_(&data), batch_size_(batch_size), shuffle_seed_(shuffle_seed), augment_seed_(augment_seed), aug_(aug) {
    if (batch_size_ == 0) throw UsageError("batch size must be >= 1");
    if (data.size() == 0) throw UsageError("empty dataset");
  }

  std::size_t steps_per_epoch() const { return (data_->size() + batch_size_ - 1) / batch_size_; }

  const std::vector<std::size_t>& epoch_order(std::size_t epoch) {
    if (cached_epoch_ != epoch || order_.empty()) {
      order_.resize(data_->size());
      std::iota(order_.begin(), order_.end(), std::size_t{0});
      std::mt19937_64 rng(mix_seed(shuffle_seed_, epoch));
      std::shuffle(order_.begin(), order_.end(), rng);
      cached_epoch_ = epoch;
    }
    return order_;
  }

  Batch next_batch(std::size_t epoch, std::size_t step) {
    if (step >= steps_per_epoch())
      throw UsageError("step " + std::to_string(step) + " outside epoch of " + std::to_string(steps_per_epoch()) + " steps");
    const auto& order = epoch_order(epoch);
    const std::size_t begin = step * batch_size_;
    const std::size_t end = std::min(begin + batch_size_, order.size());
    const std::size_t d = data_->dim();
    Batch b;
    b.indices.assign(order.begin() + static_cast<std::ptrdiff_t>(begin), order.begin() + static_cast<std::ptrdiff_t>(end));
    b.inputs = Tensor<float>(Shape{end - begin, d});
    b.labels.resize(end - begin);
    for (std::size_t r = 0; r < b.indices.size(); ++r) {
      const std::size_t src = b.indices[r];
      std::copy(data_->inputs.data() + src * d, data_->inputs.data() + (src + 1) * d, b.inputs.data() + r * d);
      b.labels[r] = data_->labels[src];
    }
    const bool can_flip = aug_.horizontal_flip && data_->image_width > 1;
    if (aug_.jitter_sigma > 0.0 || can_flip) {
      std::mt19937_64 rng(mix_seed(augment_seed_, epoch * steps_per_epoch() + step));
      std::normal_distribution<double> noise(0.0, aug_.jitter_sigma > 0.0 ? aug_.jitter_sigma : 1.0);
      std::bernoulli_distribution coin(0.5);
      const std::size_t w = data_->image_width;
      const std::size_t rows_per_image = can_flip ? d / w : 0;
      for (std::size_t r = 0; r < b.indices.size(); ++r) {
        float* x = b.inputs.data() + r * d;
        if (can_flip && coin(rng))
          for (std::size_t row = 0; row < rows_per_image; ++row) std::reverse(x + row * w, x + (row + 1) * w);
        if (aug_.jitter_sigma > 0.0)
          for (std::size_t j = 0; j < d; ++j) x[j] += static_cast<float>(noise(rng));
      }
    }
    return b;
  }

 private:
  const Dataset* data_;
  std::size_t batch_size_;
  std::uint64_t shuffle_seed_;
  std::uint64_t augment_seed_;
  Augmentation aug_;
  std::vector<std::size_t> order_;
  std::size_t cached_epoch_ = static_cast<std::size_t>(-1);
};

}  // namespace basinlab
