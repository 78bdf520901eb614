#ifndef TFL_ORCHESTRATOR_H_
#define TFL_ORCHESTRATOR_H_

// The global-epoch state machine: clients train and encrypt, pre-processing
// nodes project and semi-aggregate, results go through the ledger and blob
// store, the elected aggregator decrypts, detects and aggregates, and the next
// clients are notified.

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "absl/status/status.h"
#include "absl/status/statusor.h"
#include "tfl/aggregator.h"
#include "tfl/gnn.h"
#include "tfl/ledger.h"
#include "tfl/model.h"
#include "tfl/paillier.h"
#include "tfl/preproc.h"

namespace tfl {

struct SimConfig {
  int client_count = 100;
  int samples_per_client = 600;
  int selected_per_epoch = 20;
  int local_epochs = 10;
  int preproc_nodes = 10;
  int connections_per_node = 5;
  double perturbation_ratio = 0.5;
  int perturbation_steps = 3;
  int projection_dim = kDefaultProjectionDim;
  int key_bits = 128;
  int global_epochs = 20;
  // Per-run randomness: malicious set, selection, training, keys.
  uint64_t seed = 1;
  // Deployment constants shared by all runs: the dataset and the public
  // projection matrix.
  uint64_t data_seed = 1;
  uint64_t projection_seed = 1;
  SelectionPolicy aggregator_policy = SelectionPolicy::kRoundRobin;
  // Empty: detection disabled.
  std::string detector_params_path;

  Backend crypto_backend = Backend::kPaillier;
  int aggregator_candidates = 3;
  int test_samples = 1000;
  double class_separation = 0.55;
  double learning_rate = 0.05;
  int batch_size = 64;
  // Optional key file; otherwise a key is generated from the seed.
  std::string key_path;
  // Optional IDX dataset instead of the synthetic one.
  std::string idx_train_images;
  std::string idx_train_labels;
  std::string idx_test_images;
  std::string idx_test_labels;
};

absl::Status ValidateConfig(const SimConfig& config);

// Sets one field by its key=value name ("client-count", "perturbation-ratio",
// ...).
absl::Status SetConfigField(SimConfig& config, absl::string_view key,
                            absl::string_view value);
std::vector<std::string> ConfigFieldNames();

// Flat key=value lines; '#' starts a comment. Unknown keys are errors.
absl::StatusOr<SimConfig> ParseConfig(absl::string_view text);
// Same syntax applied on top of `config`, without validation.
absl::Status ApplyConfigText(SimConfig& config, absl::string_view text);
std::string SerializeConfig(const SimConfig& config);
absl::StatusOr<SimConfig> LoadConfig(const std::string& path);

struct PhaseTime {
  double sum = 0.0;
  // Slowest parallel unit (client or node); equals `sum` for the aggregator.
  double critical = 0.0;
};

struct TimingRecord {
  PhaseTime train;
  PhaseTime encrypt;
  PhaseTime project;
  PhaseTime semi_aggregate;
  PhaseTime decrypt;
  PhaseTime analyze;

  double TotalSum() const;
  double TotalCritical() const;
};

inline const std::vector<std::string> kPhaseNames = {
    "train", "encrypt", "project", "semi_aggregate", "decrypt", "analyze"};

struct EpochMetrics {
  int epoch = 0;
  double global_accuracy = 0.0;
  // Empty when no detector (or baseline) ran.
  std::optional<double> detection_f1;
  std::optional<double> baseline_f1;
  // Mean test accuracy of this epoch's perturbed local models.
  std::optional<double> abnormal_model_accuracy;
  int flagged_count = 0;
  std::vector<ClientId> selected_clients;
};

// Everything fixed for the duration of a run.
struct SimEnvironment {
  SimConfig config;
  std::vector<LayerShape> shapes;
  std::vector<Dataset> shards;
  Dataset test;
  std::set<ClientId> malicious;
  PaillierKeyPair keys;
  ProjectionMatrix projection;
  std::vector<NodeId> nodes;
  std::vector<std::string> candidates;
  ModelParams initial_model;

  FixedPointCodec Codec() const { return FixedPointCodec(keys.pk.n); }
};

absl::StatusOr<SimEnvironment> BuildEnvironment(const SimConfig& config);

struct SimState {
  int epoch = 0;
  ModelParams global;
  // C_t.
  std::vector<ClientId> selected;
  HistoryRecords history;
  // Last known abnormality probability per client.
  std::map<ClientId, double> known_probabilities;
  Ledger ledger;
  DdseStore store;
  AccessPolicy access = AccessPolicy::Default();
  // Key of the global model blob produced by each epoch.
  std::vector<std::string> global_keys;
};

SimState InitialState(const SimEnvironment& env);

// Selection without detector input: round(ratio * k) malicious clients and
// the rest benign, each drawn uniformly for the epoch. Sorted by id.
std::vector<ClientId> UndefendedSelection(const SimEnvironment& env, int epoch);

// Seeded per-client training settings and per-epoch assignment used by
// RunEpoch.
TrainConfig ClientTrainConfig(const SimEnvironment& env, int epoch, ClientId client);
absl::StatusOr<NodeAssignment> EpochAssignment(const SimEnvironment& env, int epoch,
                                               std::span<const ClientId> clients);

struct Detectors {
  // Drives exclusion and selection; null means defense off.
  const Detector* defense = nullptr;
  // Scored for metrics only.
  const Detector* baseline = nullptr;
  // Scored for metrics only when `defense` is null.
  const Detector* observer = nullptr;
};

struct EpochResult {
  EpochMetrics metrics;
  TimingRecord timing;
  // The aggregator's graph with ground-truth labels.
  BipartiteGraph graph;
  // Everything the aggregator decrypted this epoch.
  std::vector<DecryptedArtifact> decrypted;
  std::vector<std::string> warnings;
};

// One global epoch; advances `state`. Any integrity error aborts the epoch.
absl::StatusOr<EpochResult> RunEpoch(const SimEnvironment& env,
                                     const Detectors& detectors,
                                     SimState& state);

struct SimulationResult {
  std::vector<EpochMetrics> metrics;
  std::vector<TimingRecord> timings;
  std::vector<BipartiteGraph> graphs;
  SimState state;
};

absl::StatusOr<SimulationResult> RunSimulation(const SimConfig& config,
                                               const Detectors& detectors);

// Runs each seed with detection disabled and keeps every epoch's labeled graph.
absl::StatusOr<std::vector<BipartiteGraph>> GenerateDetectorCorpus(
    const SimConfig& config, const std::vector<uint64_t>& seeds,
    std::vector<double>* abnormal_accuracies = nullptr);

// Recomputes every epoch's aggregation purely from ledger and store contents
// and returns the resulting global-model blobs, one per epoch.
absl::StatusOr<std::vector<std::string>> ReplayGlobalBlobs(
    const SimEnvironment& env, const Detector* defense, const Ledger& ledger,
    const DdseStore& store);

// Plaintext model blob: "tfl-model v1", shapes, count, one %.17g per line.
std::string SerializeModel(const ModelParams& model);
absl::StatusOr<ModelParams> ParseModel(absl::string_view blob);

// CSV with header
// epoch,global_accuracy,detection_f1,baseline_f1,abnormal_model_accuracy,flagged_count,selected_clients
// where selected_clients is space separated and missing values are empty.
std::string MetricsCsv(const std::vector<EpochMetrics>& metrics);

}  // namespace tfl

#endif  // TFL_ORCHESTRATOR_H_
