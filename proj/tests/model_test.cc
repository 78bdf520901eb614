#include "tfl/model.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "gtest/gtest.h"
#include "tfl/rng.h"

namespace tfl {
namespace {

Dataset SeparableShard(int samples, uint64_t seed) {
  SyntheticSpec spec;
  spec.client_count = 1;
  spec.samples_per_client = samples;
  spec.class_separation = 3.0;
  spec.seed = seed;
  return GenerateSynthetic(spec).shards[0];
}

TEST(InitModelTest, DeterministicAndSized) {
  auto a = InitModel(kSyntheticShapes, 3);
  auto b = InitModel(kSyntheticShapes, 3);
  ASSERT_TRUE(a.ok() && b.ok());
  EXPECT_EQ(a->weights, b->weights);
  EXPECT_EQ(a->size(), 2410u);
  EXPECT_NE(InitModel(kSyntheticShapes, 4)->weights, a->weights);
}

TEST(InitModelTest, RejectsBadShapes) {
  EXPECT_FALSE(InitModel({}, 1).ok());
  EXPECT_FALSE(InitModel({{64, 32}, {16, 10}}, 1).ok());
}

TEST(LocalTrainTest, ZeroLearningRateIsIdentity) {
  const Dataset shard = SeparableShard(100, 1);
  const ModelParams m = InitModel(kSyntheticShapes, 1).value();
  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  EXPECT_EQ(LocalTrain(m, shard, cfg)->weights, m.weights);
}

TEST(LocalTrainTest, DefaultBatchSizeIs64) { EXPECT_EQ(TrainConfig{}.batch_size, 64); }

TEST(LocalTrainTest, FitsSeparableShard) {
  const Dataset shard = SeparableShard(600, 2);
  const ModelParams m = InitModel(kSyntheticShapes, 2).value();
  const ModelParams trained = LocalTrain(m, shard, TrainConfig{}).value();
  EXPECT_GT(Evaluate(trained, shard).value(), 0.95);
}

TEST(LocalTrainTest, RejectsDimensionMismatch) {
  const Dataset shard = SeparableShard(10, 1);
  const ModelParams m = InitModel({{32, 10}}, 1).value();
  EXPECT_EQ(LocalTrain(m, shard, TrainConfig{}).status().code(),
            absl::StatusCode::kInvalidArgument);
}

TEST(EvaluateTest, ConstantModelOnBalancedSetIsChance) {
  SyntheticSpec spec;
  spec.client_count = 1;
  spec.test_samples = 1000;
  const Dataset test = GenerateSynthetic(spec).test;
  ModelParams m = InitModel(kSyntheticShapes, 1).value();
  std::fill(m.weights.begin(), m.weights.end(), 0.0);
  m.weights[m.size() - 10 + 3] = 1.0;  // last-layer bias for class 3
  EXPECT_DOUBLE_EQ(Evaluate(m, test).value(), 0.1);
}

TEST(EvaluateTest, MemorizedSampleIsCorrect) {
  Dataset one = SeparableShard(1, 5);
  ModelParams m = InitModel(kSyntheticShapes, 5).value();
  TrainConfig cfg;
  cfg.local_epochs = 200;
  cfg.learning_rate = 0.1;
  EXPECT_DOUBLE_EQ(Evaluate(LocalTrain(m, one, cfg).value(), one).value(), 1.0);
}

TEST(EvaluateTest, EmptyDatasetIsAnError) {
  Dataset empty;
  empty.dim = 64;
  empty.class_count = 10;
  EXPECT_FALSE(Evaluate(InitModel(kSyntheticShapes, 1).value(), empty).ok());
}

TEST(EvaluateTest, InvariantUnderRowPermutation) {
  const Dataset shard = SeparableShard(300, 7);
  const ModelParams m =
      LocalTrain(InitModel(kSyntheticShapes, 7).value(), SeparableShard(300, 8),
                 TrainConfig{.local_epochs = 1})
          .value();
  Dataset permuted = shard;
  std::vector<size_t> order(shard.size());
  std::iota(order.begin(), order.end(), size_t{0});
  Rng rng(1);
  Shuffle(order, rng);
  for (size_t i = 0; i < order.size(); ++i) {
    permuted.labels[i] = shard.labels[order[i]];
    std::copy(shard.row(order[i]).begin(), shard.row(order[i]).end(),
              permuted.features.begin() + i * shard.dim);
  }
  const double acc = Evaluate(m, shard).value();
  EXPECT_DOUBLE_EQ(Evaluate(m, permuted).value(), acc);
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 1.0);
}

TEST(PerturbTest, ZeroStepsIsIdentity) {
  const Dataset shard = SeparableShard(100, 1);
  const ModelParams m = InitModel(kSyntheticShapes, 1).value();
  EXPECT_EQ(Perturb(m, shard, 0, TrainConfig{})->weights, m.weights);
  EXPECT_FALSE(Perturb(m, shard, -1, TrainConfig{}).ok());
}

TEST(PerturbTest, DistanceGrowsWithSteps) {
  SyntheticSpec spec;
  spec.client_count = 1;
  const Dataset shard = GenerateSynthetic(spec).shards[0];
  const ModelParams base =
      LocalTrain(InitModel(kSyntheticShapes, 9).value(), shard, TrainConfig{})
          .value();
  double previous = 0.0;
  for (int steps : {1, 3, 10}) {
    const double d = L2Distance(Perturb(base, shard, steps, TrainConfig{}).value(), base);
    EXPECT_GE(d, previous) << steps;
    previous = d;
  }
  EXPECT_GT(previous, 0.0);
}

// Central finite differences on every parameter block.
TEST(GradientTest, MatchesFiniteDifferences) {
  const Dataset shard = SeparableShard(40, 3);
  ModelParams m = InitModel({{64, 16}, {16, 10}}, 3).value();
  Rng rng(4);
  for (double& w : m.weights) w += 0.05 * StandardNormal(rng);  // non-zero biases
  std::vector<size_t> rows(16);
  std::iota(rows.begin(), rows.end(), size_t{0});
  std::vector<double> grad;
  ASSERT_TRUE(BatchLossAndGradient(m, shard, rows, &grad).ok());

  const size_t blocks[][2] = {{0, 1024}, {1024, 1040}, {1040, 1200}, {1200, 1210}};
  const double h = 1e-6;
  for (const auto& block : blocks) {
    double diff2 = 0.0;
    double norm2 = 0.0;
    for (size_t i = block[0]; i < block[1]; ++i) {
      ModelParams plus = m;
      ModelParams minus = m;
      plus.weights[i] += h;
      minus.weights[i] -= h;
      const double fd = (BatchLossAndGradient(plus, shard, rows, nullptr).value() -
                         BatchLossAndGradient(minus, shard, rows, nullptr).value()) /
                        (2 * h);
      diff2 += (fd - grad[i]) * (fd - grad[i]);
      norm2 += fd * fd + grad[i] * grad[i];
    }
    EXPECT_LT(std::sqrt(diff2) / std::max(std::sqrt(norm2), 1e-12), 1e-4)
        << "block starting at " << block[0];
  }
}

TEST(GradientTest, SgdStepDecreasesLossToFirstOrder) {
  const Dataset shard = SeparableShard(64, 6);
  const ModelParams m = InitModel(kSyntheticShapes, 6).value();
  std::vector<size_t> rows(64);
  std::iota(rows.begin(), rows.end(), size_t{0});
  std::vector<double> grad;
  const double loss = BatchLossAndGradient(m, shard, rows, &grad).value();
  double g2 = 0.0;
  for (double g : grad) g2 += g * g;
  const double eps = 1e-5;
  ModelParams stepped = m;
  for (size_t i = 0; i < grad.size(); ++i) stepped.weights[i] -= eps * grad[i];
  const double decrease = loss - BatchLossAndGradient(stepped, shard, rows, nullptr).value();
  EXPECT_NEAR(decrease / (eps * g2), 1.0, 1e-3);
}

TEST(SyntheticTest, DeterministicAndDefaultSized) {
  SyntheticSpec spec;
  EXPECT_EQ(spec.client_count, 100);
  EXPECT_EQ(spec.samples_per_client, 600);
  spec.client_count = 3;
  const SyntheticData a = GenerateSynthetic(spec);
  const SyntheticData b = GenerateSynthetic(spec);
  ASSERT_EQ(a.shards.size(), 3u);
  for (size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(a.shards[c].features, b.shards[c].features);
    EXPECT_EQ(a.shards[c].labels, b.shards[c].labels);
  }
  EXPECT_EQ(a.test.labels, b.test.labels);
}

TEST(SyntheticTest, ShardClassFrequenciesNearUniform) {
  SyntheticSpec spec;
  spec.client_count = 20;
  for (const Dataset& shard : GenerateSynthetic(spec).shards) {
    std::vector<int> counts(10, 0);
    for (int y : shard.labels) ++counts[y];
    for (int c : counts) {
      EXPECT_GE(c, 48);
      EXPECT_LE(c, 72);
    }
  }
}

class IdxTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() /
           ("tfl_idx_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    std::filesystem::create_directories(dir_);
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }

  static void Put32(std::string& s, uint32_t v) {
    for (int shift = 24; shift >= 0; shift -= 8) s.push_back(static_cast<char>(v >> shift));
  }
  std::string Write(const std::string& name, const std::string& bytes) {
    const auto path = (dir_ / name).string();
    std::ofstream(path, std::ios::binary) << bytes;
    return path;
  }
  std::string Images(uint32_t magic, uint32_t count) {
    std::string s;
    Put32(s, magic);
    Put32(s, count);
    Put32(s, 28);
    Put32(s, 28);
    for (uint32_t i = 0; i < count * 784; ++i) s.push_back(static_cast<char>(i == 0 ? 0xFF : i % 7));
    return s;
  }
  std::string Labels(uint32_t magic, uint32_t count) {
    std::string s;
    Put32(s, magic);
    Put32(s, count);
    for (uint32_t i = 0; i < count; ++i) s.push_back(static_cast<char>(i));
    return s;
  }

  std::filesystem::path dir_;
};

TEST_F(IdxTest, LoadsWellFormedFixture) {
  auto d = LoadIdx(Write("img", Images(2051, 4)), Write("lbl", Labels(2049, 4)));
  ASSERT_TRUE(d.ok()) << d.status();
  EXPECT_EQ(d->size(), 4u);
  EXPECT_EQ(d->dim, 784);
  EXPECT_EQ(d->features.size(), 4u * 784);
  EXPECT_DOUBLE_EQ(d->features[0], 1.0);
  EXPECT_EQ(d->labels, (std::vector<int>{0, 1, 2, 3}));
}

TEST_F(IdxTest, RejectsMismatchedCountsAndMagic) {
  EXPECT_FALSE(LoadIdx(Write("img", Images(2051, 4)), Write("lbl", Labels(2049, 3))).ok());
  EXPECT_FALSE(LoadIdx(Write("img", Images(2050, 4)), Write("lbl", Labels(2049, 4))).ok());
  EXPECT_FALSE(LoadIdx(Write("img", Images(2051, 4)), Write("lbl", Labels(2048, 4))).ok());
  std::string truncated = Images(2051, 4);
  truncated.pop_back();
  EXPECT_FALSE(LoadIdx(Write("img", truncated), Write("lbl", Labels(2049, 4))).ok());
}

}  // namespace
}  // namespace tfl
