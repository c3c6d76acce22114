#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <opencv2/imgcodecs.hpp>
#include <set>

#include "kdci/data.hpp"

using namespace kdci;

namespace {

DatasetSpec small_spec(Modality m) {
  DatasetSpec s;
  s.modality = m;
  s.train = 5;
  s.val = 3;
  s.test = 2;
  s.height = s.width = 16;
  s.bands = 4;
  s.seed = 9;
  return s;
}

std::filesystem::path fresh_dir(const std::string& name) {
  const auto d = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

}  // namespace

TEST(Synthesis, ShapesAndRanges) {
  for (Modality m : {Modality::mri, Modality::spc, Modality::cassi}) {
    const Dataset d = make_dataset(small_spec(m));
    ASSERT_EQ(d.train.size(), 5u);
    ASSERT_EQ(d.val.size(), 3u);
    ASSERT_EQ(d.test.size(), 2u);
    const int channels = m == Modality::mri ? 2 : m == Modality::spc ? 1 : 4;
    for (const auto& x : d.train) {
      EXPECT_EQ(x.kind, m);
      EXPECT_EQ(x.data.channels(), channels);
      EXPECT_EQ(x.data.height(), 16);
      EXPECT_TRUE(x.data.all_finite());
      if (m != Modality::mri)
        for (double v : x.data.values()) {
          EXPECT_GE(v, 0.0);
          EXPECT_LE(v, 1.0);
        }
    }
  }
}

TEST(Synthesis, MriMagnitudePeaksAtOne) {
  const Dataset d = make_dataset(small_spec(Modality::mri));
  for (const auto& x : d.train) {
    double peak = 0.0;
    for (int y = 0; y < 16; ++y)
      for (int c = 0; c < 16; ++c) peak = std::max(peak, std::hypot(x.data.at(0, y, c), x.data.at(1, y, c)));
    EXPECT_NEAR(peak, 1.0, 1e-12);
  }
}

TEST(Synthesis, CassiBandJumpBounded) {
  DatasetSpec s = small_spec(Modality::cassi);
  s.max_band_jump = 0.3;
  const Dataset d = make_dataset(s);
  for (const auto& x : d.train)
    for (int l = 1; l < 4; ++l)
      for (int p = 0; p < 256; ++p)
        EXPECT_LE(std::abs(x.data.plane(l)[p] - x.data.plane(l - 1)[p]), 0.3 + 1e-12);
}

TEST(Synthesis, DeterministicAndSeedSensitive) {
  const DatasetSpec s = small_spec(Modality::spc);
  const Dataset a = make_dataset(s), b = make_dataset(s);
  for (std::size_t i = 0; i < a.train.size(); ++i) EXPECT_EQ(sample_hash(a.train[i]), sample_hash(b.train[i]));
  DatasetSpec t = s;
  t.seed = 10;
  EXPECT_NE(sample_hash(make_dataset(t).train[0]), sample_hash(a.train[0]));
}

TEST(Synthesis, SplitsAreDisjoint) {
  const Dataset d = make_dataset(small_spec(Modality::cassi));
  std::set<std::string> seen;
  for (const auto* split : {&d.train, &d.val, &d.test})
    for (const auto& x : *split) EXPECT_TRUE(seen.insert(sample_hash(x)).second);
}

TEST(Synthesis, GrowingTrainKeepsValAndTest) {
  // Each split draws from its own stream, so enlarging one leaves the others fixed.
  DatasetSpec s = small_spec(Modality::spc);
  const Dataset a = make_dataset(s);
  s.train = 9;
  const Dataset b = make_dataset(s);
  EXPECT_EQ(sample_hash(a.val[0]), sample_hash(b.val[0]));
  EXPECT_EQ(sample_hash(a.train[4]), sample_hash(b.train[4]));
}

TEST(Synthesis, InvalidSpecsRejected) {
  DatasetSpec s = small_spec(Modality::mri);
  s.height = 12;
  EXPECT_THROW(make_dataset(s), ConfigError);
  s = small_spec(Modality::spc);
  s.train = 0;
  EXPECT_THROW(make_dataset(s), ConfigError);
  s = small_spec(Modality::spc);
  s.generator = "fractal";
  EXPECT_THROW(make_dataset(s), ConfigError);
}

TEST(Cache, RoundTripAndSpecMismatch) {
  const auto dir = fresh_dir("kdci_cache_test");
  DatasetSpec s = small_spec(Modality::cassi);
  s.validate();
  const Dataset a = cached_dataset(s, dir);
  const auto file = dir / ("dataset_" + dataset_hash(s).substr(0, 16) + ".bin");
  ASSERT_TRUE(std::filesystem::exists(file));
  const Dataset b = load_dataset_cache(file, s);
  ASSERT_EQ(b.train.size(), a.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) EXPECT_EQ(a.train[i].data.values(), b.train[i].data.values());
  DatasetSpec other = s;
  other.seed = 1;
  EXPECT_THROW(load_dataset_cache(file, other), IoError);
  std::filesystem::remove_all(dir);
}

TEST(Cache, CorruptFileRejected) {
  const auto dir = fresh_dir("kdci_cache_corrupt");
  const auto file = dir / "bad.bin";
  std::ofstream(file) << "not a dataset";
  EXPECT_THROW(load_dataset_cache(file, small_spec(Modality::spc)), IoError);
  std::filesystem::remove_all(dir);
}

TEST(External, IngestsSortedResizedAndNormalized) {
  const auto dir = fresh_dir("kdci_external");
  for (int i = 0; i < 6; ++i) {
    cv::Mat img(32, 32, CV_8UC1, cv::Scalar(20 + 30 * i));
    img(cv::Rect(4, 4, 8, 8)).setTo(200);
    cv::imwrite((dir / ("img_" + std::to_string(i) + ".png")).string(), img);
  }
  DatasetSpec s = small_spec(Modality::spc);
  s.generator = "external-dir";
  s.external_dir = dir.string();
  s.train = 3;
  s.val = 2;
  s.test = 1;
  const Dataset d = make_dataset(s);
  ASSERT_EQ(d.train.size(), 3u);
  double peak = 0.0;
  for (double v : d.train[0].data.values()) peak = std::max(peak, v);
  EXPECT_NEAR(peak, 1.0, 1e-12);
  EXPECT_EQ(d.train[0].data.height(), 16);
  s.train = 10;
  EXPECT_THROW(make_dataset(s), ConfigError);
  std::filesystem::remove_all(dir);
}

TEST(External, MissingDirectoryIsIoError) {
  DatasetSpec s = small_spec(Modality::spc);
  s.generator = "external-dir";
  s.external_dir = "/nonexistent/kdci";
  EXPECT_THROW(make_dataset(s), IoError);
}
