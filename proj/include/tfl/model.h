#ifndef TFL_MODEL_H_
#define TFL_MODEL_H_

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "absl/status/statusor.h"

namespace tfl {

struct LayerShape {
  int in = 0;
  int out = 0;
  bool operator==(const LayerShape&) const = default;
};

// Flat parameter vector of a dense ReLU classifier. Layer l occupies
// out*in row-major weights followed by out biases.
struct ModelParams {
  std::vector<double> weights;
  std::vector<LayerShape> shapes;

  static size_t CountFor(std::span<const LayerShape> shapes);
  size_t size() const { return weights.size(); }
};

inline const std::vector<LayerShape> kSyntheticShapes = {{64, 32}, {32, 10}};
inline const std::vector<LayerShape> kIdxShapes = {{784, 64}, {64, 10}};

// Row-major samples x dim features with integer class labels.
struct Dataset {
  int dim = 0;
  int class_count = 0;
  std::vector<double> features;
  std::vector<int> labels;

  size_t size() const { return labels.size(); }
  std::span<const double> row(size_t i) const {
    return {features.data() + i * dim, static_cast<size_t>(dim)};
  }
};

struct TrainConfig {
  double learning_rate = 0.05;
  int batch_size = 64;
  int local_epochs = 10;
  uint64_t seed = 0;
};

absl::StatusOr<ModelParams> InitModel(std::vector<LayerShape> shapes,
                                      uint64_t seed);

// Mini-batch SGD on softmax cross-entropy. The input model is not modified.
absl::StatusOr<ModelParams> LocalTrain(const ModelParams& model,
                                       const Dataset& shard,
                                       const TrainConfig& cfg);

// Fraction of argmax-correct predictions.
absl::StatusOr<double> Evaluate(const ModelParams& model, const Dataset& test);

// Continues training for `steps` passes over the shard with every label
// remapped to (y + 1) mod class_count.
absl::StatusOr<ModelParams> Perturb(const ModelParams& model,
                                    const Dataset& shard, int steps,
                                    const TrainConfig& cfg);

// Mean cross-entropy over the selected rows; fills `gradient` (same layout as
// the weights) when non-null.
absl::StatusOr<double> BatchLossAndGradient(const ModelParams& model,
                                            const Dataset& data,
                                            std::span<const size_t> rows,
                                            std::vector<double>* gradient);

struct SyntheticSpec {
  int class_count = 10;
  int dim = 64;
  int samples_per_client = 600;
  int client_count = 100;
  int test_samples = 1000;
  // Per-coordinate standard deviation of the class means; unit noise.
  double class_separation = 0.55;
  uint64_t seed = 1;
};

struct SyntheticData {
  std::vector<Dataset> shards;
  Dataset test;
};

// Gaussian class clusters. Every shard receives the same per-class quota
// (remainders spread over the first classes) and is shuffled.
SyntheticData GenerateSynthetic(const SyntheticSpec& spec);

// IDX image/label pair (magic 2051 / 2049). Pixels scaled to [0, 1].
absl::StatusOr<Dataset> LoadIdx(const std::string& images_path,
                                const std::string& labels_path,
                                int class_count = 10);

double L2Distance(const ModelParams& a, const ModelParams& b);

}  // namespace tfl

#endif  // TFL_MODEL_H_
