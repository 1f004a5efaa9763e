#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "aetta/streams.hpp"

using namespace aetta;
using namespace aetta::streams;

namespace {

nn::Architecture default_arch(const DatasetSpec& spec) {
  nn::Architecture a;
  a.input_dim = spec.input_dim;
  a.class_count = spec.class_count;
  return a;
}

// Source models on the default spec are expensive enough to share.
class SourceModels : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    data_ = new SourceData(make_source_dataset(DatasetSpec{}));
    pool_ = new LabeledSet(make_test_pool(DatasetSpec{}));
    stats_ = new FeatureStats(feature_stats(data_->train.features));
    for (std::uint64_t s : {0, 1, 2}) {
      models_.push_back(train_source_model(data_->train, default_arch(DatasetSpec{}), TrainConfig{}, s).model);
    }
  }
  static void TearDownTestSuite() {
    delete data_;
    delete pool_;
    delete stats_;
    models_.clear();
  }
  static inline SourceData* data_ = nullptr;
  static inline LabeledSet* pool_ = nullptr;
  static inline FeatureStats* stats_ = nullptr;
  static inline std::vector<nn::MlpModel> models_;
};

double pairwise_distance(const Matrix& x, std::size_t a, std::size_t b) {
  double s = 0.0;
  for (std::size_t c = 0; c < x.cols(); ++c) s += (x(a, c) - x(b, c)) * (x(a, c) - x(b, c));
  return std::sqrt(s);
}

double model_accuracy(const nn::MlpModel& m, const Matrix& x, const std::vector<std::size_t>& labels) {
  return accuracy(m, LabeledSet{x, labels, {}});
}

}  // namespace

TEST(Dataset, SameSeedIsBitwiseIdentical) {
  const auto a = make_source_dataset(DatasetSpec{});
  const auto b = make_source_dataset(DatasetSpec{});
  EXPECT_EQ(a.train.features, b.train.features);
  EXPECT_EQ(a.train.labels, b.train.labels);
  EXPECT_EQ(a.holdout.features, b.holdout.features);
  DatasetSpec other;
  other.seed = 8;
  EXPECT_NE(make_source_dataset(other).train.features, a.train.features);
}

TEST(Dataset, HoldoutIsDisjointFromTrain) {
  const auto d = make_source_dataset(DatasetSpec{});
  const std::set<std::size_t> train(d.train.origin.begin(), d.train.origin.end());
  EXPECT_EQ(train.size(), d.train.origin.size());
  for (auto i : d.holdout.origin) EXPECT_EQ(train.count(i), 0u);
  EXPECT_EQ(d.holdout.labels.size(), 1000u);
  EXPECT_EQ(d.train.labels.size() + d.holdout.labels.size(), 6000u);
}

TEST(Dataset, WellSeparatedBinaryProblemIsLinearlySolvable) {
  DatasetSpec spec;
  spec.class_count = 2;
  spec.cluster_separation = 20.0;
  spec.samples_per_class = 300;
  spec.holdout_per_class = 50;
  auto arch = default_arch(spec);
  arch.hidden = {};
  const auto d = make_source_dataset(spec);
  TrainConfig tc;
  tc.epochs = 40;
  const auto r = train_source_model(d.train, arch, tc, 0);
  EXPECT_GE(r.train_accuracy, 0.99);
}

TEST(Dataset, InvalidSpecsAreRejected) {
  DatasetSpec s;
  s.class_count = 1;
  EXPECT_THROW(make_source_dataset(s), ConfigError);
  s = {};
  s.cluster_separation = 0.0;
  EXPECT_THROW(make_source_dataset(s), ConfigError);
  s = {};
  s.input_dim = 1;
  EXPECT_THROW(make_source_dataset(s), ConfigError);
}

TEST(Training, ZeroEpochsReturnsInitialization) {
  const auto d = make_source_dataset(DatasetSpec{});
  TrainConfig tc;
  tc.epochs = 0;
  const auto arch = default_arch(DatasetSpec{});
  EXPECT_EQ(train_source_model(d.train, arch, tc, 3).model, nn::make_model(arch, 3));
}

TEST_F(SourceModels, DefaultConfigPassesTheHoldoutGate) {
  for (const auto& m : models_) EXPECT_GE(accuracy(m, data_->holdout), 0.90);
}

TEST_F(SourceModels, SeedsGiveDifferentParameters) {
  EXPECT_NE(models_[0], models_[1]);
  EXPECT_NE(models_[1], models_[2]);
}

TEST_F(SourceModels, CleanStreamMatchesHoldoutAccuracy) {
  const auto stream = make_stream(Fully{{CorruptionKind::Clean, 0}}, *pool_, *stats_, StreamConfig{64, 15, 4});
  for (const auto& m : models_) {
    std::size_t n = 0;
    double correct = 0.0;
    for (const auto& b : stream.batches) {
      const auto pred = row_argmax(nn::forward(m, b.features, nn::ForwardMode::deterministic()));
      correct += GroundTruth::accuracy(b.labels, pred) * static_cast<double>(pred.size());
      n += pred.size();
    }
    const double p = accuracy(m, data_->holdout);
    const double acc = correct / static_cast<double>(n);
    const double sd = std::sqrt(p * (1 - p) / static_cast<double>(n) + p * (1 - p) / 1000.0);
    EXPECT_LE(std::abs(acc - p), 3.0 * sd) << acc << " vs " << p;
  }
}

TEST_F(SourceModels, NoiseSeverityIsRoughlyMonotone) {
  const auto& x = pool_->features;
  int inversions = 0;
  for (std::uint64_t s = 0; s < 3; ++s) {
    double prev = 1.0;
    for (int sev = 1; sev <= 5; ++sev) {
      const auto xc = corrupt(x, {CorruptionKind::GaussianNoise, sev, 100 + s}, *stats_);
      const double acc = model_accuracy(models_[s], xc, pool_->labels);
      inversions += acc > prev ? 1 : 0;
      prev = acc;
    }
  }
  EXPECT_LE(inversions, 1);
}

TEST(Corrupt, SeverityZeroIsIdentity) {
  const auto d = make_source_dataset(DatasetSpec{});
  const auto st = feature_stats(d.train.features);
  for (auto k : kAllCorruptions) {
    EXPECT_EQ(corrupt(d.holdout.features, {k, 0, 9}, st), d.holdout.features) << corruption_name(k);
  }
  EXPECT_EQ(corrupt(d.holdout.features, {CorruptionKind::Clean, 5, 9}, st), d.holdout.features);
}

TEST(Corrupt, SameSeedSameOutput) {
  const auto d = make_source_dataset(DatasetSpec{});
  const auto st = feature_stats(d.train.features);
  for (auto k : kAllCorruptions) {
    EXPECT_EQ(corrupt(d.holdout.features, {k, 5, 3}, st), corrupt(d.holdout.features, {k, 5, 3}, st));
  }
  EXPECT_NE(corrupt(d.holdout.features, {CorruptionKind::GaussianNoise, 5, 3}, st),
            corrupt(d.holdout.features, {CorruptionKind::GaussianNoise, 5, 4}, st));
}

TEST(Corrupt, RotationPreservesPairwiseDistances) {
  const auto d = make_source_dataset(DatasetSpec{});
  const auto st = feature_stats(d.train.features);
  const auto x = slice_rows(d.holdout.features, 0, 40);
  for (int sev = 1; sev <= 5; ++sev) {
    const auto r = corrupt(x, {CorruptionKind::Rotation, sev, 11}, st);
    for (std::size_t a = 0; a < x.rows(); ++a) {
      for (std::size_t b = a + 1; b < x.rows(); ++b) {
        EXPECT_NEAR(pairwise_distance(r, a, b), pairwise_distance(x, a, b), 1e-9);
      }
    }
  }
}

TEST(Corrupt, NoiseMagnitudeFollowsSeverity) {
  const auto d = make_source_dataset(DatasetSpec{});
  const auto st = feature_stats(d.train.features);
  const auto& x = d.train.features;
  for (int sev : {1, 3, 5}) {
    const auto y = corrupt(x, {CorruptionKind::GaussianNoise, sev, 2}, st);
    for (std::size_t c = 0; c < x.cols(); ++c) {
      double ss = 0.0;
      for (std::size_t r = 0; r < x.rows(); ++r) ss += (y(r, c) - x(r, c)) * (y(r, c) - x(r, c));
      const double sigma = std::sqrt(ss / static_cast<double>(x.rows()));
      EXPECT_NEAR(sigma / (0.2 * sev * st.stddev[c]), 1.0, 0.06);
    }
  }
}

TEST(Corrupt, ScalingStaysWithinSeverityBand) {
  const auto d = make_source_dataset(DatasetSpec{});
  const auto st = feature_stats(d.train.features);
  const auto& x = d.holdout.features;
  for (int sev = 1; sev <= 5; ++sev) {
    const auto y = corrupt(x, {CorruptionKind::Scaling, sev, 5}, st);
    for (std::size_t c = 0; c < x.cols(); ++c) {
      const double f = (y(0, c) - st.mean[c]) / (x(0, c) - st.mean[c]);
      EXPECT_GE(f, 1.0 - 0.15 * sev - 1e-9);
      EXPECT_LE(f, 1.0 + 0.15 * sev + 1e-9);
    }
  }
}

TEST(Corrupt, RejectsBadInput) {
  const auto d = make_source_dataset(DatasetSpec{});
  const auto st = feature_stats(d.train.features);
  EXPECT_THROW(corrupt(d.holdout.features, {CorruptionKind::Rotation, 6, 0}, st), ConfigError);
  EXPECT_THROW(parse_corruption("fog"), ConfigError);
  for (auto k : kAllCorruptions) EXPECT_EQ(parse_corruption(corruption_name(k)), k);
}

TEST(Stream, ContinualScheduleHasFifteenSegments) {
  const DatasetSpec spec;
  const auto pool = make_test_pool(spec);
  const auto st = feature_stats(make_source_dataset(spec).train.features);
  const auto stream = make_stream(Continual{default_continual_schedule()}, pool, st, StreamConfig{64, 3, 1});
  EXPECT_EQ(stream.segment_starts.size(), 15u);
  EXPECT_EQ(stream.batches.size(), 45u);
  std::size_t starts = 0;
  for (std::size_t i = 0; i < stream.batches.size(); ++i) {
    const auto& b = stream.batches[i];
    EXPECT_EQ(b.batch_index, i);
    EXPECT_EQ(b.features.rows(), 64u);
    EXPECT_EQ(b.labels.size(), 64u);
    starts += b.segment_start ? 1 : 0;
  }
  EXPECT_EQ(starts, 15u);
  for (std::size_t s = 0; s < 15; ++s) EXPECT_EQ(stream.segment_starts[s], 3 * s);
}

TEST(Stream, DeterministicGivenSeed) {
  const DatasetSpec spec;
  const auto pool = make_test_pool(spec);
  const auto st = feature_stats(make_source_dataset(spec).train.features);
  const Continual sc{default_continual_schedule(true)};
  const auto a = make_stream(sc, pool, st, StreamConfig{64, 4, 7});
  const auto b = make_stream(sc, pool, st, StreamConfig{64, 4, 7});
  const auto c = make_stream(sc, pool, st, StreamConfig{64, 4, 8});
  EXPECT_EQ(a.batches, b.batches);
  EXPECT_NE(a.batches, c.batches);
}

TEST(Stream, NoReplacementWithinSegmentAndLabelsPreserved) {
  const DatasetSpec spec;
  const auto pool = make_test_pool(spec);
  const auto st = feature_stats(make_source_dataset(spec).train.features);
  const auto clean = make_stream(Fully{{CorruptionKind::Clean, 0}}, pool, st, StreamConfig{64, 20, 3});
  const auto noisy = make_stream(Fully{{CorruptionKind::Mixed, 5}}, pool, st, StreamConfig{64, 20, 3});
  std::set<std::vector<double>> rows;
  for (std::size_t i = 0; i < clean.batches.size(); ++i) {
    EXPECT_EQ(GroundTruth::reveal(clean.batches[i].labels)[0], GroundTruth::reveal(noisy.batches[i].labels)[0]);
    EXPECT_EQ(clean.batches[i].labels, noisy.batches[i].labels);
    for (std::size_t r = 0; r < clean.batches[i].features.rows(); ++r) {
      auto row = clean.batches[i].features.row(r);
      EXPECT_TRUE(rows.emplace(row.begin(), row.end()).second);
    }
  }
}

TEST(Stream, PoolExhaustionIsADomainError) {
  DatasetSpec spec;
  spec.test_pool_per_class = 5;
  const auto pool = make_test_pool(spec);
  const auto st = feature_stats(make_source_dataset(spec).train.features);
  EXPECT_THROW(make_stream(Fully{{CorruptionKind::Clean, 0}}, pool, st, StreamConfig{64, 2, 0}), DomainError);
}

TEST(Stream, CsvExport) {
  const DatasetSpec spec;
  const auto pool = make_test_pool(spec);
  const auto st = feature_stats(make_source_dataset(spec).train.features);
  const auto s = make_stream(Fully{{CorruptionKind::Rotation, 2}}, pool, st, StreamConfig{8, 2, 0});
  const auto path = std::filesystem::temp_directory_path() / "aetta_stream_test.csv";
  export_stream_csv(s, path);
  std::ifstream f(path);
  std::string header, line;
  std::getline(f, header);
  EXPECT_EQ(header.rfind("batch_index,segment,corruption,severity,label,f0,", 0), 0u);
  std::size_t n = 0;
  while (std::getline(f, line)) {
    ++n;
    EXPECT_NE(line.find(",rotation,2,"), std::string::npos);
  }
  EXPECT_EQ(n, 16u);
  std::filesystem::remove(path);
}
