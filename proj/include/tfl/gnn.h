#ifndef TFL_GNN_H_
#define TFL_GNN_H_

// Anomalous-model detector: a heterogeneous bipartite message-passing network
// over clients and pre-processing nodes, and a projection-only MLP baseline.
// Both use hand-written backprop and Adam.

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "absl/status/statusor.h"
#include "tfl/preproc.h"
#include "tfl/rng.h"

namespace tfl {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr int kHistoryWindow = 8;

// Epochs in which each client was selected.
using HistoryRecords = std::map<ClientId, std::set<int>>;

struct BipartiteGraph {
  std::vector<ClientId> client_ids;
  std::vector<NodeId> node_ids;
  Matrix client_features;
  Matrix node_features;
  // (node index, client index) pairs.
  std::vector<std::pair<int, int>> edges;
  // 1 = malicious; empty when unlabeled.
  std::vector<int> labels;

  int client_count() const { return static_cast<int>(client_ids.size()); }
  int node_count() const { return static_cast<int>(node_ids.size()); }
};

struct GraphOptions {
  int history_window = kHistoryWindow;
  bool node_degree_feature = true;
  // Subtract the per-graph median of every projection column and of the node
  // accuracies.
  bool center_features = true;
};

// Client feature = [projection | bitmap of selection in epochs t-1..t-W].
// Node feature = [accuracy, degree / |C_t|]. Projections and accuracies are
// median-centered per graph by default. Clients and nodes are ordered by id.
absl::StatusOr<BipartiteGraph> BuildGraph(
    const std::map<ClientId, std::vector<double>>& projections,
    const HistoryRecords& history, int epoch,
    const std::map<NodeId, double>& node_accuracy,
    const NodeAssignment& assignment, const GraphOptions& options = {});

// Block-diagonal union; edge and row offsets are shifted.
BipartiteGraph MergeGraphs(std::span<const BipartiteGraph* const> graphs);

// Column-wise z-score fitted on training graphs. Zero-variance columns keep
// unit scale.
struct Standardizer {
  std::vector<double> client_mean, client_std, node_mean, node_std;

  static Standardizer Fit(std::span<const BipartiteGraph> graphs);
  BipartiteGraph Apply(const BipartiteGraph& g) const;
  bool empty() const { return client_mean.empty(); }
};

// Named parameter blocks in a fixed order.
struct ParamSet {
  std::vector<std::string> names;
  std::vector<Matrix> blocks;

  Matrix& operator[](const std::string& name);
  const Matrix& operator[](const std::string& name) const;
  void Add(std::string name, Matrix m);
  ParamSet ZerosLike() const;
  size_t ScalarCount() const;
};

enum class DetectorKind { kGnn, kMlp };

struct DetectorHyper {
  int layers = 3;
  int hidden = 128;
  double dropout = 0.5;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int batch_graphs = 64;
  int epochs = 200;
  double validation_fraction = 0.2;
  uint64_t seed = 0;
};

struct Detector {
  DetectorKind kind = DetectorKind::kGnn;
  DetectorHyper hyper;
  int client_dim = 0;
  int node_dim = 0;
  ParamSet params;
  Standardizer standardizer;
};

// Glorot-uniform weights, zero biases. The MLP reads only the first
// `projection_dim` client columns.
Detector InitDetector(DetectorKind kind, int client_dim, int node_dim,
                      const DetectorHyper& hyper, int projection_dim = kDefaultProjectionDim);

// Mean binary cross-entropy over clients of an already standardized, labeled
// graph. Fills `grad` (shaped like the params) when non-null. Dropout uses
// `rng` and is applied only when `train` is set.
absl::StatusOr<double> LossAndGradient(const Detector& det,
                                       const BipartiteGraph& graph, bool train,
                                       Rng* rng, ParamSet* grad);

// Per-client probabilities on a standardized graph, dropout off.
absl::StatusOr<std::vector<double>> ForwardProbabilities(const Detector& det,
                                                         const BipartiteGraph& graph);

// Applies the detector's standardizer (if fitted) first.
absl::StatusOr<std::vector<double>> Probabilities(const Detector& det,
                                                  const BipartiteGraph& raw);

struct DetectionResult {
  std::map<ClientId, double> probabilities;
  std::set<ClientId> flagged;
  double threshold = 0.5;
};

// Flags clients with probability >= threshold.
absl::StatusOr<DetectionResult> Detect(const Detector& det,
                                       const BipartiteGraph& raw,
                                       double threshold = 0.5);

struct TrainReport {
  int best_epoch = -1;
  double validation_f1 = 0.0;
  double validation_loss = 0.0;
  size_t train_graphs = 0;
  size_t validation_graphs = 0;
};

// Splits the corpus 80/20, fits the standardizer on the training part, runs
// Adam for the configured epochs and keeps the parameters with the best
// validation F1 (ties: lower validation loss).
absl::StatusOr<Detector> TrainDetector(DetectorKind kind,
                                       std::span<const BipartiteGraph> corpus,
                                       const DetectorHyper& hyper,
                                       TrainReport* report = nullptr);

// F1 of the malicious class; 0 when precision + recall is 0.
double F1Score(const std::set<ClientId>& predicted,
               const std::set<ClientId>& truth);

// F1 over all clients of labeled graphs, thresholded at 0.5.
absl::StatusOr<double> EvaluateF1(const Detector& det,
                                  std::span<const BipartiteGraph> graphs);

// Current-round clients ranked by ascending probability, other pool clients
// at 0.5; the k lowest, ties by id.
absl::StatusOr<std::vector<ClientId>> SelectClients(
    const std::map<ClientId, double>& probabilities,
    std::span<const ClientId> pool, int k);

std::string SerializeGraph(const BipartiteGraph& g);
absl::StatusOr<BipartiteGraph> ParseGraph(const std::string& text);
absl::Status WriteCorpus(std::span<const BipartiteGraph> corpus,
                         const std::string& dir);
absl::StatusOr<std::vector<BipartiteGraph>> ReadCorpus(const std::string& dir);

std::string SerializeDetector(const Detector& det);
absl::StatusOr<Detector> ParseDetector(const std::string& text);

}  // namespace tfl

#endif  // TFL_GNN_H_
