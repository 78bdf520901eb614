#include "tfl/model.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

#include <Eigen/Dense>

#include "absl/status/status.h"
#include "absl/strings/str_cat.h"
#include "tfl/rng.h"
#include "tfl/status_macros.h"

namespace tfl {
namespace {

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstWeightMap = Eigen::Map<const RowMatrix>;
using WeightMap = Eigen::Map<RowMatrix>;

constexpr uint64_t kInitTag = 0x494e4954;      // "INIT"
constexpr uint64_t kTrainTag = 0x545241494e;   // "TRAIN"
constexpr uint64_t kPerturbTag = 0x50455254;   // "PERT"
constexpr uint64_t kMeansTag = 0x4d45414e53;   // "MEANS"
constexpr uint64_t kShardTag = 0x5348415244;   // "SHARD"
constexpr uint64_t kTestTag = 0x54455354;      // "TEST"
constexpr size_t kEvalChunk = 512;

absl::Status ValidateShapes(std::span<const LayerShape> shapes) {
  if (shapes.empty()) {
    return absl::InvalidArgumentError("model needs at least one layer");
  }
  for (size_t l = 0; l < shapes.size(); ++l) {
    if (shapes[l].in <= 0 || shapes[l].out <= 0) {
      return absl::InvalidArgumentError("layer dimensions must be positive");
    }
    if (l > 0 && shapes[l].in != shapes[l - 1].out) {
      return absl::InvalidArgumentError(absl::StrCat(
          "layer ", l, " input ", shapes[l].in, " does not chain from ",
          shapes[l - 1].out));
    }
  }
  return absl::OkStatus();
}

absl::Status ValidateCompatible(const ModelParams& model, const Dataset& data) {
  TFL_RETURN_IF_ERROR(ValidateShapes(model.shapes));
  if (model.weights.size() != ModelParams::CountFor(model.shapes)) {
    return absl::InvalidArgumentError("weight count does not match shapes");
  }
  if (model.shapes.front().in != data.dim) {
    return absl::InvalidArgumentError(absl::StrCat(
        "feature dim ", data.dim, " != model input ", model.shapes.front().in));
  }
  if (model.shapes.back().out != data.class_count) {
    return absl::InvalidArgumentError(
        absl::StrCat("class count ", data.class_count, " != model output ",
                     model.shapes.back().out));
  }
  return absl::OkStatus();
}

// Forward/backward workspace for one dense ReLU network.
class Network {
 public:
  explicit Network(const std::vector<LayerShape>& shapes) : shapes_(shapes) {
    size_t offset = 0;
    for (const LayerShape& s : shapes_) {
      weight_offsets_.push_back(offset);
      offset += static_cast<size_t>(s.in) * s.out;
      bias_offsets_.push_back(offset);
      offset += s.out;
    }
  }

  // Returns logits for the rows of `input`; caches activations.
  const RowMatrix& Forward(const double* params, const RowMatrix& input) {
    activations_.resize(shapes_.size() + 1);
    pre_activations_.resize(shapes_.size());
    activations_[0] = input;
    for (size_t l = 0; l < shapes_.size(); ++l) {
      ConstWeightMap w(params + weight_offsets_[l], shapes_[l].out, shapes_[l].in);
      Eigen::Map<const Eigen::RowVectorXd> b(params + bias_offsets_[l],
                                             shapes_[l].out);
      pre_activations_[l].noalias() = activations_[l] * w.transpose();
      pre_activations_[l].rowwise() += b;
      if (l + 1 < shapes_.size()) {
        activations_[l + 1] = pre_activations_[l].cwiseMax(0.0);
      } else {
        activations_[l + 1] = pre_activations_[l];
      }
    }
    return activations_.back();
  }

  // Mean softmax cross-entropy of the last Forward() against labels;
  // accumulates d(loss)/d(params) into grad when non-null.
  double Backward(const double* params, std::span<const int> labels,
                  double* grad) {
    const RowMatrix& logits = activations_.back();
    const Eigen::Index batch = logits.rows();
    RowMatrix delta(logits.rows(), logits.cols());
    double loss = 0.0;
    for (Eigen::Index i = 0; i < batch; ++i) {
      const double max_logit = logits.row(i).maxCoeff();
      const Eigen::RowVectorXd e = (logits.row(i).array() - max_logit).exp();
      const double z = e.sum();
      loss += std::log(z) + max_logit - logits(i, labels[i]);
      delta.row(i) = e / z;
      delta(i, labels[i]) -= 1.0;
    }
    delta /= static_cast<double>(batch);
    loss /= static_cast<double>(batch);
    if (grad == nullptr) return loss;
    for (size_t l = shapes_.size(); l-- > 0;) {
      WeightMap gw(grad + weight_offsets_[l], shapes_[l].out, shapes_[l].in);
      Eigen::Map<Eigen::RowVectorXd> gb(grad + bias_offsets_[l], shapes_[l].out);
      gw.noalias() += delta.transpose() * activations_[l];
      gb += delta.colwise().sum();
      if (l == 0) break;
      ConstWeightMap w(params + weight_offsets_[l], shapes_[l].out, shapes_[l].in);
      RowMatrix upstream = delta * w;
      delta = (pre_activations_[l - 1].array() > 0.0)
                  .select(upstream, RowMatrix::Zero(upstream.rows(), upstream.cols()));
    }
    return loss;
  }

 private:
  std::vector<LayerShape> shapes_;
  std::vector<size_t> weight_offsets_;
  std::vector<size_t> bias_offsets_;
  std::vector<RowMatrix> activations_;
  std::vector<RowMatrix> pre_activations_;
};

RowMatrix GatherRows(const Dataset& data, std::span<const size_t> rows) {
  RowMatrix x(rows.size(), data.dim);
  for (size_t i = 0; i < rows.size(); ++i) {
    const auto r = data.row(rows[i]);
    std::copy(r.begin(), r.end(), x.row(i).data());
  }
  return x;
}

// `epochs` passes of SGD over shuffled mini-batches with the given labels.
void RunSgd(ModelParams& model, const Dataset& data,
            const std::vector<int>& labels, const TrainConfig& cfg,
            int epochs, Rng& rng) {
  if (cfg.learning_rate == 0.0 || data.size() == 0) return;
  Network net(model.shapes);
  std::vector<size_t> order(data.size());
  std::vector<double> grad(model.size());
  std::vector<int> batch_labels;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::iota(order.begin(), order.end(), size_t{0});
    Shuffle(order, rng);
    for (size_t start = 0; start < order.size();
         start += static_cast<size_t>(cfg.batch_size)) {
      const size_t end =
          std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      const std::span<const size_t> rows(order.data() + start, end - start);
      batch_labels.clear();
      for (size_t r : rows) batch_labels.push_back(labels[r]);
      std::fill(grad.begin(), grad.end(), 0.0);
      net.Forward(model.weights.data(), GatherRows(data, rows));
      net.Backward(model.weights.data(), batch_labels, grad.data());
      for (size_t i = 0; i < grad.size(); ++i) {
        model.weights[i] -= cfg.learning_rate * grad[i];
      }
    }
  }
}

absl::Status ValidateConfig(const TrainConfig& cfg) {
  if (!(cfg.learning_rate >= 0.0) || cfg.batch_size < 1 || cfg.local_epochs < 0) {
    return absl::InvalidArgumentError(
        "train config needs learning-rate >= 0, batch-size >= 1, epochs >= 0");
  }
  return absl::OkStatus();
}

uint32_t ReadBigEndian32(const std::string& bytes, size_t offset) {
  return (static_cast<uint32_t>(static_cast<unsigned char>(bytes[offset])) << 24) |
         (static_cast<uint32_t>(static_cast<unsigned char>(bytes[offset + 1])) << 16) |
         (static_cast<uint32_t>(static_cast<unsigned char>(bytes[offset + 2])) << 8) |
         static_cast<uint32_t>(static_cast<unsigned char>(bytes[offset + 3]));
}

absl::StatusOr<std::string> ReadFile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return absl::NotFoundError(absl::StrCat("cannot open ", path));
  return std::string(std::istreambuf_iterator<char>(in), {});
}

Dataset MakeBalanced(int count, const SyntheticSpec& spec,
                     const std::vector<double>& means, Rng& rng) {
  Dataset d;
  d.dim = spec.dim;
  d.class_count = spec.class_count;
  for (int c = 0; c < spec.class_count; ++c) {
    const int quota = count / spec.class_count + (c < count % spec.class_count);
    d.labels.insert(d.labels.end(), quota, c);
  }
  Shuffle(d.labels, rng);
  d.features.resize(static_cast<size_t>(count) * spec.dim);
  for (int i = 0; i < count; ++i) {
    const double* mean = means.data() + static_cast<size_t>(d.labels[i]) * spec.dim;
    for (int j = 0; j < spec.dim; ++j) {
      d.features[static_cast<size_t>(i) * spec.dim + j] = mean[j] + StandardNormal(rng);
    }
  }
  return d;
}

}  // namespace

size_t ModelParams::CountFor(std::span<const LayerShape> shapes) {
  size_t n = 0;
  for (const LayerShape& s : shapes) {
    n += static_cast<size_t>(s.in) * s.out + static_cast<size_t>(s.out);
  }
  return n;
}

absl::StatusOr<ModelParams> InitModel(std::vector<LayerShape> shapes,
                                      uint64_t seed) {
  TFL_RETURN_IF_ERROR(ValidateShapes(shapes));
  ModelParams model;
  model.shapes = std::move(shapes);
  model.weights.reserve(ModelParams::CountFor(model.shapes));
  Rng rng(DeriveSeed(seed, {kInitTag}));
  for (const LayerShape& s : model.shapes) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(s.in));
    for (int i = 0; i < s.in * s.out; ++i) {
      model.weights.push_back(scale * StandardNormal(rng));
    }
    model.weights.insert(model.weights.end(), s.out, 0.0);
  }
  return model;
}

absl::StatusOr<ModelParams> LocalTrain(const ModelParams& model,
                                       const Dataset& shard,
                                       const TrainConfig& cfg) {
  TFL_RETURN_IF_ERROR(ValidateConfig(cfg));
  TFL_RETURN_IF_ERROR(ValidateCompatible(model, shard));
  ModelParams out = model;
  Rng rng(DeriveSeed(cfg.seed, {kTrainTag}));
  RunSgd(out, shard, shard.labels, cfg, cfg.local_epochs, rng);
  return out;
}

absl::StatusOr<ModelParams> Perturb(const ModelParams& model,
                                    const Dataset& shard, int steps,
                                    const TrainConfig& cfg) {
  if (steps < 0) {
    return absl::InvalidArgumentError("perturbation steps must be >= 0");
  }
  TFL_RETURN_IF_ERROR(ValidateConfig(cfg));
  TFL_RETURN_IF_ERROR(ValidateCompatible(model, shard));
  ModelParams out = model;
  std::vector<int> flipped(shard.labels.size());
  for (size_t i = 0; i < flipped.size(); ++i) {
    flipped[i] = (shard.labels[i] + 1) % shard.class_count;
  }
  Rng rng(DeriveSeed(cfg.seed, {kPerturbTag}));
  RunSgd(out, shard, flipped, cfg, steps, rng);
  return out;
}

absl::StatusOr<double> Evaluate(const ModelParams& model, const Dataset& test) {
  if (test.size() == 0) {
    return absl::InvalidArgumentError("cannot evaluate on an empty dataset");
  }
  TFL_RETURN_IF_ERROR(ValidateCompatible(model, test));
  Network net(model.shapes);
  std::vector<size_t> rows;
  size_t correct = 0;
  for (size_t start = 0; start < test.size(); start += kEvalChunk) {
    const size_t end = std::min(test.size(), start + kEvalChunk);
    rows.resize(end - start);
    std::iota(rows.begin(), rows.end(), start);
    const RowMatrix& logits = net.Forward(model.weights.data(), GatherRows(test, rows));
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      Eigen::Index arg = 0;
      logits.row(i).maxCoeff(&arg);
      correct += static_cast<int>(arg) == test.labels[start + i];
    }
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

absl::StatusOr<double> BatchLossAndGradient(const ModelParams& model,
                                            const Dataset& data,
                                            std::span<const size_t> rows,
                                            std::vector<double>* gradient) {
  TFL_RETURN_IF_ERROR(ValidateCompatible(model, data));
  if (rows.empty()) return absl::InvalidArgumentError("empty batch");
  Network net(model.shapes);
  std::vector<int> labels;
  for (size_t r : rows) labels.push_back(data.labels[r]);
  net.Forward(model.weights.data(), GatherRows(data, rows));
  if (gradient != nullptr) gradient->assign(model.size(), 0.0);
  return net.Backward(model.weights.data(), labels,
                      gradient == nullptr ? nullptr : gradient->data());
}

SyntheticData GenerateSynthetic(const SyntheticSpec& spec) {
  Rng mean_rng(DeriveSeed(spec.seed, {kMeansTag}));
  std::vector<double> means(static_cast<size_t>(spec.class_count) * spec.dim);
  for (double& m : means) m = spec.class_separation * StandardNormal(mean_rng);
  SyntheticData out;
  out.shards.reserve(spec.client_count);
  for (int c = 0; c < spec.client_count; ++c) {
    Rng rng(DeriveSeed(spec.seed, {kShardTag, static_cast<uint64_t>(c)}));
    out.shards.push_back(MakeBalanced(spec.samples_per_client, spec, means, rng));
  }
  Rng test_rng(DeriveSeed(spec.seed, {kTestTag}));
  out.test = MakeBalanced(spec.test_samples, spec, means, test_rng);
  return out;
}

absl::StatusOr<Dataset> LoadIdx(const std::string& images_path,
                                const std::string& labels_path,
                                int class_count) {
  TFL_ASSIGN_OR_RETURN(const std::string images, ReadFile(images_path));
  TFL_ASSIGN_OR_RETURN(const std::string labels, ReadFile(labels_path));
  if (images.size() < 16 || ReadBigEndian32(images, 0) != 2051) {
    return absl::InvalidArgumentError("bad IDX image magic");
  }
  if (labels.size() < 8 || ReadBigEndian32(labels, 0) != 2049) {
    return absl::InvalidArgumentError("bad IDX label magic");
  }
  const uint64_t count = ReadBigEndian32(images, 4);
  const uint64_t rows = ReadBigEndian32(images, 8);
  const uint64_t cols = ReadBigEndian32(images, 12);
  if (ReadBigEndian32(labels, 4) != count) {
    return absl::InvalidArgumentError("IDX image and label counts differ");
  }
  if (images.size() != 16 + count * rows * cols || labels.size() != 8 + count) {
    return absl::InvalidArgumentError("IDX payload length mismatch");
  }
  Dataset d;
  d.dim = static_cast<int>(rows * cols);
  d.class_count = class_count;
  d.features.resize(count * rows * cols);
  for (size_t i = 0; i < d.features.size(); ++i) {
    d.features[i] = static_cast<unsigned char>(images[16 + i]) / 255.0;
  }
  d.labels.resize(count);
  for (size_t i = 0; i < count; ++i) {
    d.labels[i] = static_cast<unsigned char>(labels[8 + i]);
    if (d.labels[i] >= class_count) {
      return absl::InvalidArgumentError("IDX label outside class range");
    }
  }
  return d;
}

double L2Distance(const ModelParams& a, const ModelParams& b) {
  double s = 0.0;
  for (size_t i = 0; i < std::min(a.size(), b.size()); ++i) {
    const double d = a.weights[i] - b.weights[i];
    s += d * d;
  }
  return std::sqrt(s);
}

}  // namespace tfl
