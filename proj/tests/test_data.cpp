#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <unistd.h>

#include "basinlab/data.hpp"
#include "basinlab/eval.hpp"
#include "basinlab/train.hpp"

using namespace basinlab;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("basinlab-" + name + "-" + std::to_string(::getpid()));
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

std::vector<unsigned char> be32(std::uint32_t v) {
  return {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 8),
          static_cast<unsigned char>(v)};
}

}  // namespace

TEST(Blobs, DeterministicAndBalanced) {
  BlobConfig c = desk_blob_config();
  const auto [tr, te] = make_gaussian_blobs(c);
  const auto [tr2, te2] = make_gaussian_blobs(c);
  EXPECT_EQ(tr.inputs, tr2.inputs);
  EXPECT_EQ(te.labels, te2.labels);
  EXPECT_EQ(tr.size(), 1024u);
  EXPECT_EQ(tr.dim(), 6u);
  std::vector<int> counts(4, 0);
  for (int y : tr.labels) ++counts[static_cast<std::size_t>(y)];
  EXPECT_EQ(counts, (std::vector<int>{256, 256, 256, 256}));
  EXPECT_NE(tr.inputs, te.inputs);
  EXPECT_EQ(te.split, "test");
}

TEST(Blobs, NoiseDimsAppendWithoutLabelInformation) {
  BlobConfig c;
  c.n_train = 4000;
  c.noise_dims = 3;
  const auto tr = make_gaussian_blobs(c).first;
  ASSERT_EQ(tr.dim(), 5u);
  // Noise coordinates have the same distribution in every class.
  for (std::size_t j = 2; j < 5; ++j) {
    std::vector<double> mean(4, 0.0), cnt(4, 0.0);
    double var = 0.0;
    for (std::size_t i = 0; i < tr.size(); ++i) {
      const double v = tr.inputs[i * 5 + j];
      mean[static_cast<std::size_t>(tr.labels[i])] += v;
      cnt[static_cast<std::size_t>(tr.labels[i])] += 1;
      var += v * v;
    }
    EXPECT_NEAR(var / tr.size(), 1.0, 0.1);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(mean[k] / cnt[k], 0.0, 0.1);
  }
}

TEST(Blobs, RejectsBadConfig) {
  BlobConfig c;
  c.num_classes = 1;
  EXPECT_THROW(make_gaussian_blobs(c), UsageError);
  c = BlobConfig{};
  c.spread = -1;
  EXPECT_THROW(make_gaussian_blobs(c), UsageError);
}

// Monte Carlo estimate of the Bayes-optimal accuracy on the desk task from
// the known mixture; a trained model cannot beat it beyond sampling noise.
TEST(Blobs, TrainedModelStaysBelowBayesAccuracy) {
  const BlobConfig c = desk_blob_config();
  const auto [tr, te] = make_gaussian_blobs(c);
  const auto centers = blob_centers(c);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < te.size(); ++i) {
    std::vector<double> score(c.num_classes, 0.0);
    for (std::size_t k = 0; k < c.num_classes; ++k)
      for (std::size_t m = 0; m < c.clusters_per_class; ++m) {
        const auto& mu = centers[k * c.clusters_per_class + m];
        double d2 = 0.0;
        for (std::size_t j = 0; j < c.dim; ++j) d2 += std::pow(te.inputs[i * te.dim() + j] - mu[j], 2);
        score[k] += std::exp(-d2 / (2 * c.spread * c.spread));
      }
    correct += static_cast<std::size_t>(std::max_element(score.begin(), score.end()) - score.begin()) ==
               static_cast<std::size_t>(te.labels[i]);
  }
  const double bayes = static_cast<double>(correct) / te.size();
  TrainConfig cfg = desk_train_config();
  cfg.epochs = 10;
  const auto r = train(ModelSpec::mlp(tr.dim(), {64, 64}, 4), tr, cfg);
  const double acc = evaluate(r.final().params, te).accuracy;
  EXPECT_GT(bayes, 0.5);
  EXPECT_LT(bayes, 1.0);
  EXPECT_LE(acc, bayes + 0.02);
  EXPECT_GT(acc, 0.5);
}

TEST(Idx, LoadsFixtureAndScalesPixels) {
  const auto d = temp_dir("idx");
  std::vector<unsigned char> img = be32(0x803), lab = be32(0x801);
  for (auto v : {be32(3), be32(2), be32(2)}) img.insert(img.end(), v.begin(), v.end());
  for (unsigned char px : {0, 255, 51, 102, 1, 2, 3, 4, 10, 20, 30, 40}) img.push_back(px);
  auto n = be32(3);
  lab.insert(lab.end(), n.begin(), n.end());
  for (unsigned char y : {0, 2, 1}) lab.push_back(y);
  write_bytes(d / "img", img);
  write_bytes(d / "lab", lab);
  const Dataset ds = load_idx((d / "img").string(), (d / "lab").string());
  EXPECT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.dim(), 4u);
  EXPECT_EQ(ds.num_classes, 3u);
  EXPECT_EQ(ds.image_width, 2u);
  EXPECT_FLOAT_EQ(ds.inputs[1], 1.0f);
  EXPECT_FLOAT_EQ(ds.inputs[2], 0.2f);
  EXPECT_EQ(ds.labels, (std::vector<int>{0, 2, 1}));

  img[3] = 0x04;
  write_bytes(d / "bad", img);
  EXPECT_THROW(load_idx((d / "bad").string(), (d / "lab").string()), FormatError);
  img[3] = 0x03;
  img.pop_back();
  write_bytes(d / "short", img);
  EXPECT_THROW(load_idx((d / "short").string(), (d / "lab").string()), FormatError);
  EXPECT_THROW(load_idx((d / "missing").string(), (d / "lab").string()), FormatError);
  fs::remove_all(d);
}

TEST(Csv, LoadsAndValidates) {
  const auto d = temp_dir("csv");
  std::ofstream(d / "ok.csv") << "x,y,label\n0.5,1.5,0\n-1,2,1\n\n3,4,1\n";
  const Dataset ds = load_csv((d / "ok.csv").string());
  EXPECT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.dim(), 2u);
  EXPECT_EQ(ds.num_classes, 2u);
  EXPECT_FLOAT_EQ(ds.inputs[2], -1.0f);
  std::ofstream(d / "ragged.csv") << "x,y,label\n1,2,0\n1,0\n";
  EXPECT_THROW(load_csv((d / "ragged.csv").string()), FormatError);
  std::ofstream(d / "text.csv") << "x,label\nabc,0\n";
  EXPECT_THROW(load_csv((d / "text.csv").string()), FormatError);
  std::ofstream(d / "range.csv") << "x,label\n1,5\n";
  EXPECT_THROW(load_csv((d / "range.csv").string(), 3), FormatError);
  fs::remove_all(d);
}

TEST(BatchStream, EpochIsSeededPermutation) {
  const auto tr = make_gaussian_blobs(4, 1, 100, 8, 2, 0.5, 0).first;
  BatchStream a(tr, 7, 11, 12), b(tr, 7, 11, 12), c(tr, 7, 99, 12);
  EXPECT_EQ(a.steps_per_epoch(), 15u);
  std::set<std::size_t> seen;
  for (std::size_t s = 0; s < a.steps_per_epoch(); ++s) {
    const Batch x = a.next_batch(3, s), y = b.next_batch(3, s);
    EXPECT_EQ(x.indices, y.indices);
    EXPECT_EQ(x.inputs, y.inputs);
    seen.insert(x.indices.begin(), x.indices.end());
  }
  EXPECT_EQ(seen.size(), tr.size());
  const std::vector<std::size_t> e0 = a.epoch_order(0), e1 = a.epoch_order(1);
  EXPECT_NE(e0, c.epoch_order(0));
  EXPECT_NE(e0, e1);
  EXPECT_THROW(a.next_batch(0, 15), UsageError);
}

TEST(BatchStream, JitterIsSeeded) {
  const auto tr = make_gaussian_blobs(4, 1, 64, 8, 2, 0.5, 0).first;
  BatchStream a(tr, 16, 1, 2, {0.1, false}), b(tr, 16, 1, 2, {0.1, false}), plain(tr, 16, 1, 2);
  EXPECT_EQ(a.next_batch(0, 0).inputs, b.next_batch(0, 0).inputs);
  EXPECT_NE(a.next_batch(0, 1).inputs, plain.next_batch(0, 1).inputs);
}
