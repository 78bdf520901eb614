#ifndef TFL_EXPERIMENTS_H_
#define TFL_EXPERIMENTS_H_

// Evaluation harness: detection sweeps, global-model scenarios and timing
// benchmarks, each producing a CSV.
//
// CSV schemas (header row, comma separated, '.' decimal):
//   sweep:    variable,value,seed,gnn_f1,mlp_f1,abnormal_model_accuracy,global_accuracy_final
//   scenario: epoch,condition,accuracy   (condition: non-perturbed|perturbed|novel)
//   bench:    clients,<phase>_sum,<phase>_crit for each phase,total_sum,total_crit
//   metrics:  see MetricsCsv in orchestrator.h

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "absl/status/status.h"
#include "absl/status/statusor.h"
#include "tfl/gnn.h"
#include "tfl/orchestrator.h"

namespace tfl {

enum class SweepVariable {
  kPerturbationRatio,
  kPerturbationSteps,
  kSelectedClients,
  kConnectionsPerNode,
};

absl::string_view SweepVariableName(SweepVariable v);
absl::StatusOr<SweepVariable> ParseSweepVariable(absl::string_view name);
std::vector<double> DefaultSweepValues(SweepVariable v);
absl::StatusOr<SimConfig> ApplySweepValue(SimConfig config, SweepVariable v, double value);

// How detector corpora are produced for one experiment point. Corpus runs
// always use the plaintext-shadow backend.
struct CorpusPlan {
  int train_runs = 2;
  int test_runs = 1;
  int epochs_per_run = 10;
  DetectorHyper hyper;
};

// Seeds of the corpus runs for an experiment seed; train and test runs never
// share a seed.
std::vector<uint64_t> TrainRunSeeds(uint64_t seed, const CorpusPlan& plan);
std::vector<uint64_t> TestRunSeeds(uint64_t seed, const CorpusPlan& plan);

struct SweepSpec {
  SweepVariable variable = SweepVariable::kPerturbationRatio;
  std::vector<double> values;
  std::vector<uint64_t> seeds = {1, 2, 3};
  SimConfig base;
  CorpusPlan plan;
};

struct ResultRow {
  SweepVariable variable = SweepVariable::kPerturbationRatio;
  double value = 0.0;
  uint64_t seed = 0;
  double gnn_f1 = 0.0;
  double mlp_f1 = 0.0;
  double abnormal_model_accuracy = 0.0;
  double global_accuracy_final = 0.0;
};

struct PointResult {
  double gnn_f1 = 0.0;
  double mlp_f1 = 0.0;
  double abnormal_model_accuracy = 0.0;
  double global_accuracy_final = 0.0;
};

// Generates train and held-out corpora, trains both detectors and scores them
// on the held-out graphs. The final accuracy is that of the last held-out run.
absl::StatusOr<PointResult> RunDetectionPoint(const SimConfig& config, uint64_t seed,
                                              const CorpusPlan& plan);

using Progress = std::function<void(const std::string&)>;

// Points whose configs coincide (e.g. the basic config reached from two
// variables) are computed once per seed and reused through `cache`.
class PointCache {
 public:
  absl::StatusOr<PointResult> Get(const SimConfig& config, uint64_t seed,
                                  const CorpusPlan& plan);

 private:
  std::map<std::pair<std::string, uint64_t>, PointResult> results_;
};

absl::StatusOr<std::vector<ResultRow>> RunSweep(const SweepSpec& spec,
                                                PointCache* cache = nullptr,
                                                const Progress& progress = {});
std::string SweepCsv(const std::vector<ResultRow>& rows);

enum class Scenario { kBasic, kRatio08, kSteps10, kConnections6 };

absl::string_view ScenarioName(Scenario s);
absl::StatusOr<Scenario> ParseScenario(absl::string_view name);
SimConfig ScenarioConfig(SimConfig base, Scenario s);

struct ScenarioRow {
  int epoch = 0;
  std::string condition;
  double accuracy = 0.0;
};

// Three runs sharing seeds: non-perturbed (ratio 0, no defense), perturbed
// (no defense) and novel (GNN defense). Without `detector` one is trained on
// a shadow corpus generated at the scenario config.
absl::StatusOr<std::vector<ScenarioRow>> RunScenario(const SimConfig& base,
                                                     Scenario scenario,
                                                     const CorpusPlan& plan,
                                                     const Detector* detector = nullptr,
                                                     const Progress& progress = {});
std::string ScenarioCsv(const std::vector<ScenarioRow>& rows);

struct BenchRow {
  int clients = 0;
  TimingRecord timing;
};

// One epoch per selected-client count with a GNN attached so the analyze
// phase includes detection. Without `detector` an untrained one is used;
// its cost is identical.
absl::StatusOr<std::vector<BenchRow>> RunBench(const SimConfig& base,
                                               const std::vector<int>& counts,
                                               const Detector* detector = nullptr,
                                               const Progress& progress = {});
std::string BenchCsv(const std::vector<BenchRow>& rows);

// Run directory layout: config.txt, metrics.csv, ledger.txt and store/ with
// one file per blob named by its key. The directory must not exist yet; it is
// built under "<dir>.partial" and renamed into place only when complete.
absl::Status SaveRun(const std::string& dir, const SimConfig& config,
                     const SimulationResult& run);

struct RunCheck {
  bool ok = false;
  // First block whose hash, linkage or blob references fail.
  std::optional<uint64_t> bad_block;
  // First stored blob that no longer hashes to its key.
  std::string bad_blob;
  std::string message;
};

// Verifies the chain, every stored blob and every blob reference of a run
// directory.
RunCheck VerifyRunDirectory(const std::string& dir);

// Writes `contents` to `path` through a temporary file; nothing is left
// behind on failure.
absl::Status WriteFileAtomic(const std::string& path, const std::string& contents);
absl::StatusOr<std::string> ReadFile(const std::string& path);

}  // namespace tfl

#endif  // TFL_EXPERIMENTS_H_
