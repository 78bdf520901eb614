#ifndef TFL_AGGREGATOR_H_
#define TFL_AGGREGATOR_H_

// The elected aggregator. It holds the private key but only ever receives
// encrypted projections, encrypted semi-aggregates, the assignment graph and
// selection history.

#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "absl/status/statusor.h"
#include "tfl/gnn.h"
#include "tfl/model.h"
#include "tfl/paillier.h"
#include "tfl/preproc.h"

namespace tfl {

struct EpochAggregationInput {
  int epoch = 0;
  std::vector<PreprocessedNode> nodes;
  NodeAssignment assignment;
  HistoryRecords history;
  // Pool and size for C_{t+1}; selection is skipped when next_count is 0.
  std::vector<ClientId> pool;
  int next_count = 0;
  // Probabilities from earlier epochs; this epoch's detection overrides them.
  std::map<ClientId, double> prior_probabilities;
};

enum class ArtifactKind { kProjection, kSemiAggregate };

// One plaintext value set the aggregator obtained by decryption.
struct DecryptedArtifact {
  ArtifactKind kind = ArtifactKind::kProjection;
  size_t length = 0;
  // Clients folded into the artifact (1 for a projection).
  int client_count = 1;
};

struct GlobalAggregateResult {
  ModelParams model;
  std::vector<NodeId> included;
  bool fallback = false;
};

struct EpochAggregationOutput {
  std::set<ClientId> flagged;
  std::map<ClientId, double> probabilities;
  std::vector<ClientId> next_clients;
  std::map<NodeId, double> node_accuracy;
  std::vector<NodeId> included_nodes;
  bool fallback = false;
  ModelParams global_model;
  BipartiteGraph graph;
  std::vector<DecryptedArtifact> decrypted;
  std::vector<std::string> warnings;
};

struct AggregatorTiming {
  double decrypt_seconds = 0.0;
  double analyze_seconds = 0.0;
};

// Decodes every projection; a client projected by several nodes must decrypt
// identically. Decrypted values outside the ciphertext's magnitude bound
// (the symptom of a wrong key) are a DataLoss error.
absl::StatusOr<std::map<ClientId, std::vector<double>>> DecryptProjections(
    const PaillierKeyPair& kp, const FixedPointCodec& codec,
    std::span<const PreprocessedNode> nodes,
    std::vector<DecryptedArtifact>* log = nullptr);

// Decrypts and divides by the node's weight sum.
absl::StatusOr<std::map<NodeId, ModelParams>> DecryptSemiAggregates(
    const PaillierKeyPair& kp, const FixedPointCodec& codec,
    std::span<const PreprocessedNode> nodes,
    const std::vector<LayerShape>& shapes,
    std::vector<DecryptedArtifact>* log = nullptr);

absl::StatusOr<std::map<NodeId, double>> EvaluateNodes(
    const std::map<NodeId, ModelParams>& models, const Dataset& test);

// Node n is included iff none of its clients is flagged; with no survivors
// the ceil(|N|/2) most accurate nodes are used. Weights are node client
// counts.
absl::StatusOr<GlobalAggregateResult> GlobalAggregate(
    const std::map<NodeId, ModelParams>& node_models,
    const std::set<ClientId>& flagged,
    const std::map<NodeId, double>& accuracy,
    const NodeAssignment& assignment);

class Aggregator {
 public:
  // `detector` may be null, which disables detection (A_t stays empty).
  Aggregator(const PaillierKeyPair& kp, const FixedPointCodec& codec,
             std::vector<LayerShape> shapes, const Dataset* test,
             const Detector* detector, GraphOptions graph_options = {});

  absl::StatusOr<EpochAggregationOutput> Process(
      const EpochAggregationInput& input, AggregatorTiming* timing = nullptr) const;

 private:
  PaillierKeyPair kp_;
  FixedPointCodec codec_;
  std::vector<LayerShape> shapes_;
  const Dataset* test_;
  const Detector* detector_;
  GraphOptions graph_options_;
};

}  // namespace tfl

#endif  // TFL_AGGREGATOR_H_
