#include "tfl/experiments.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <utility>

#include "absl/strings/str_cat.h"
#include "absl/strings/str_format.h"
#include "absl/strings/str_join.h"
#include "tfl/status_macros.h"

namespace tfl {
namespace {

std::string Fixed(double v) { return absl::StrFormat("%.6f", v); }

// Compact value text for the CSV: integers without a fraction.
std::string ValueText(double v) {
  if (v == std::floor(v) && std::fabs(v) < 1e9) {
    return absl::StrCat(static_cast<int64_t>(v));
  }
  return absl::StrFormat("%.6g", v);
}

double Mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

SimConfig CorpusConfig(SimConfig config) {
  config.crypto_backend = Backend::kPlaintextShadow;
  config.detector_params_path.clear();
  return config;
}

// Trains a GNN on a shadow corpus generated at `config`.
absl::StatusOr<Detector> TrainScenarioDetector(const SimConfig& config, const CorpusPlan& plan) {
  SimConfig c = CorpusConfig(config);
  c.global_epochs = plan.epochs_per_run;
  TFL_ASSIGN_OR_RETURN(std::vector<BipartiteGraph> corpus,
                       GenerateDetectorCorpus(c, TrainRunSeeds(config.seed, plan)));
  DetectorHyper hyper = plan.hyper;
  hyper.seed = config.seed;
  return TrainDetector(DetectorKind::kGnn, corpus, hyper);
}

}  // namespace

absl::string_view SweepVariableName(SweepVariable v) {
  switch (v) {
    case SweepVariable::kPerturbationRatio:
      return "perturbation-ratio";
    case SweepVariable::kPerturbationSteps:
      return "perturbation-steps";
    case SweepVariable::kSelectedClients:
      return "selected-clients";
    case SweepVariable::kConnectionsPerNode:
      return "connections-per-node";
  }
  return "";
}

absl::StatusOr<SweepVariable> ParseSweepVariable(absl::string_view name) {
  for (SweepVariable v :
       {SweepVariable::kPerturbationRatio, SweepVariable::kPerturbationSteps,
        SweepVariable::kSelectedClients, SweepVariable::kConnectionsPerNode}) {
    if (SweepVariableName(v) == name) return v;
  }
  return absl::InvalidArgumentError(absl::StrCat("unknown sweep variable '", name, "'"));
}

std::vector<double> DefaultSweepValues(SweepVariable v) {
  switch (v) {
    case SweepVariable::kPerturbationRatio:
      return {0.2, 0.35, 0.5, 0.65, 0.8};
    case SweepVariable::kPerturbationSteps:
      return {1, 3, 5, 10};
    case SweepVariable::kSelectedClients:
      return {10, 20, 30, 40};
    case SweepVariable::kConnectionsPerNode:
      return {3, 4, 5, 6};
  }
  return {};
}

absl::StatusOr<SimConfig> ApplySweepValue(SimConfig config, SweepVariable v, double value) {
  const bool integral = value == std::floor(value);
  switch (v) {
    case SweepVariable::kPerturbationRatio:
      if (!(value > 0.0 && value < 1.0)) {
        return absl::InvalidArgumentError("perturbation ratio must lie in (0, 1)");
      }
      config.perturbation_ratio = value;
      break;
    case SweepVariable::kPerturbationSteps:
      if (!integral || value < 1) {
        return absl::InvalidArgumentError("perturbation steps must be a positive integer");
      }
      config.perturbation_steps = static_cast<int>(value);
      break;
    case SweepVariable::kSelectedClients:
      if (!integral || value < 1) {
        return absl::InvalidArgumentError("selected clients must be a positive integer");
      }
      config.selected_per_epoch = static_cast<int>(value);
      break;
    case SweepVariable::kConnectionsPerNode:
      if (!integral || value < 1) {
        return absl::InvalidArgumentError("connections per node must be a positive integer");
      }
      config.connections_per_node = static_cast<int>(value);
      break;
  }
  TFL_RETURN_IF_ERROR(ValidateConfig(config));
  return config;
}

std::vector<uint64_t> TrainRunSeeds(uint64_t seed, const CorpusPlan& plan) {
  std::vector<uint64_t> seeds;
  for (int i = 0; i < plan.train_runs; ++i) seeds.push_back(seed * 1000 + static_cast<uint64_t>(i));
  return seeds;
}

std::vector<uint64_t> TestRunSeeds(uint64_t seed, const CorpusPlan& plan) {
  std::vector<uint64_t> seeds;
  for (int i = 0; i < plan.test_runs; ++i) {
    seeds.push_back(seed * 1000 + 500 + static_cast<uint64_t>(i));
  }
  return seeds;
}

absl::StatusOr<PointResult> RunDetectionPoint(const SimConfig& config, uint64_t seed,
                                              const CorpusPlan& plan) {
  if (plan.train_runs < 1 || plan.test_runs < 1 || plan.epochs_per_run < 1) {
    return absl::InvalidArgumentError("corpus plan needs at least one run and epoch");
  }
  SimConfig c = CorpusConfig(config);
  c.global_epochs = plan.epochs_per_run;
  std::vector<double> abnormal;
  TFL_ASSIGN_OR_RETURN(std::vector<BipartiteGraph> train,
                       GenerateDetectorCorpus(c, TrainRunSeeds(seed, plan), &abnormal));

  std::vector<BipartiteGraph> test;
  double final_accuracy = 0.0;
  for (uint64_t s : TestRunSeeds(seed, plan)) {
    SimConfig tc = c;
    tc.seed = s;
    TFL_ASSIGN_OR_RETURN(SimulationResult run, RunSimulation(tc, {}));
    for (auto& g : run.graphs) test.push_back(std::move(g));
    final_accuracy = run.metrics.back().global_accuracy;
  }

  DetectorHyper hyper = plan.hyper;
  hyper.seed = seed;
  TFL_ASSIGN_OR_RETURN(Detector gnn, TrainDetector(DetectorKind::kGnn, train, hyper));
  TFL_ASSIGN_OR_RETURN(Detector mlp, TrainDetector(DetectorKind::kMlp, train, hyper));
  PointResult r;
  TFL_ASSIGN_OR_RETURN(r.gnn_f1, EvaluateF1(gnn, test));
  TFL_ASSIGN_OR_RETURN(r.mlp_f1, EvaluateF1(mlp, test));
  r.abnormal_model_accuracy = Mean(abnormal);
  r.global_accuracy_final = final_accuracy;
  return r;
}

absl::StatusOr<PointResult> PointCache::Get(const SimConfig& config, uint64_t seed,
                                            const CorpusPlan& plan) {
  auto key = std::make_pair(SerializeConfig(CorpusConfig(config)), seed);
  auto it = results_.find(key);
  if (it != results_.end()) return it->second;
  TFL_ASSIGN_OR_RETURN(PointResult r, RunDetectionPoint(config, seed, plan));
  results_.emplace(std::move(key), r);
  return r;
}

absl::StatusOr<std::vector<ResultRow>> RunSweep(const SweepSpec& spec, PointCache* cache,
                                                const Progress& progress) {
  if (spec.values.empty()) return absl::InvalidArgumentError("sweep needs at least one value");
  if (spec.seeds.empty()) return absl::InvalidArgumentError("sweep needs at least one seed");
  // Validate every point before spending time on any of them.
  std::vector<SimConfig> configs;
  for (double v : spec.values) {
    TFL_ASSIGN_OR_RETURN(SimConfig c, ApplySweepValue(spec.base, spec.variable, v));
    configs.push_back(c);
  }
  PointCache local;
  if (cache == nullptr) cache = &local;
  std::vector<ResultRow> rows;
  for (size_t i = 0; i < spec.values.size(); ++i) {
    for (uint64_t seed : spec.seeds) {
      TFL_ASSIGN_OR_RETURN(PointResult p, cache->Get(configs[i], seed, spec.plan));
      ResultRow row;
      row.variable = spec.variable;
      row.value = spec.values[i];
      row.seed = seed;
      row.gnn_f1 = p.gnn_f1;
      row.mlp_f1 = p.mlp_f1;
      row.abnormal_model_accuracy = p.abnormal_model_accuracy;
      row.global_accuracy_final = p.global_accuracy_final;
      if (progress) {
        progress(absl::StrCat(SweepVariableName(spec.variable), "=", ValueText(row.value),
                              " seed ", seed, ": gnn ", Fixed(p.gnn_f1), " mlp ",
                              Fixed(p.mlp_f1)));
      }
      rows.push_back(row);
    }
  }
  return rows;
}

std::string SweepCsv(const std::vector<ResultRow>& rows) {
  std::string out =
      "variable,value,seed,gnn_f1,mlp_f1,abnormal_model_accuracy,global_accuracy_final\n";
  for (const ResultRow& r : rows) {
    absl::StrAppend(&out, SweepVariableName(r.variable), ",", ValueText(r.value), ",", r.seed,
                    ",", Fixed(r.gnn_f1), ",", Fixed(r.mlp_f1), ",",
                    Fixed(r.abnormal_model_accuracy), ",", Fixed(r.global_accuracy_final),
                    "\n");
  }
  return out;
}

absl::string_view ScenarioName(Scenario s) {
  switch (s) {
    case Scenario::kBasic:
      return "basic";
    case Scenario::kRatio08:
      return "ratio-0.8";
    case Scenario::kSteps10:
      return "steps-10";
    case Scenario::kConnections6:
      return "connections-6";
  }
  return "";
}

absl::StatusOr<Scenario> ParseScenario(absl::string_view name) {
  for (Scenario s : {Scenario::kBasic, Scenario::kRatio08, Scenario::kSteps10,
                     Scenario::kConnections6}) {
    if (ScenarioName(s) == name) return s;
  }
  return absl::InvalidArgumentError(absl::StrCat("unknown scenario '", name, "'"));
}

SimConfig ScenarioConfig(SimConfig base, Scenario s) {
  switch (s) {
    case Scenario::kBasic:
      break;
    case Scenario::kRatio08:
      base.perturbation_ratio = 0.8;
      break;
    case Scenario::kSteps10:
      base.perturbation_steps = 10;
      break;
    case Scenario::kConnections6:
      base.connections_per_node = 6;
      break;
  }
  return base;
}

absl::StatusOr<std::vector<ScenarioRow>> RunScenario(const SimConfig& base, Scenario scenario,
                                                     const CorpusPlan& plan,
                                                     const Detector* detector,
                                                     const Progress& progress) {
  const SimConfig config = ScenarioConfig(base, scenario);
  TFL_RETURN_IF_ERROR(ValidateConfig(config));
  Detector trained;
  if (detector == nullptr) {
    if (progress) progress("training scenario detector");
    TFL_ASSIGN_OR_RETURN(trained, TrainScenarioDetector(config, plan));
    detector = &trained;
  }
  SimConfig clean = config;
  clean.perturbation_ratio = 0.0;

  struct Condition {
    const char* name;
    const SimConfig* config;
    Detectors detectors;
  };
  const Condition conditions[] = {
      {"non-perturbed", &clean, {}},
      {"perturbed", &config, {}},
      {"novel", &config, {detector}},
  };
  std::vector<ScenarioRow> rows;
  for (const Condition& cond : conditions) {
    if (progress) progress(absl::StrCat("running ", cond.name));
    TFL_ASSIGN_OR_RETURN(SimulationResult run, RunSimulation(*cond.config, cond.detectors));
    for (const EpochMetrics& m : run.metrics) {
      rows.push_back({m.epoch, cond.name, m.global_accuracy});
    }
  }
  return rows;
}

std::string ScenarioCsv(const std::vector<ScenarioRow>& rows) {
  std::string out = "epoch,condition,accuracy\n";
  for (const ScenarioRow& r : rows) {
    absl::StrAppend(&out, r.epoch, ",", r.condition, ",", Fixed(r.accuracy), "\n");
  }
  return out;
}

absl::StatusOr<std::vector<BenchRow>> RunBench(const SimConfig& base,
                                               const std::vector<int>& counts,
                                               const Detector* detector,
                                               const Progress& progress) {
  if (counts.empty()) return absl::InvalidArgumentError("bench needs at least one client count");
  Detector untrained;
  if (detector == nullptr) {
    DetectorHyper hyper;
    hyper.seed = base.seed;
    untrained = InitDetector(DetectorKind::kGnn, base.projection_dim + kHistoryWindow, 2, hyper,
                             base.projection_dim);
    detector = &untrained;
  }
  std::vector<BenchRow> rows;
  for (int k : counts) {
    SimConfig c = base;
    c.selected_per_epoch = k;
    c.global_epochs = 1;
    TFL_RETURN_IF_ERROR(ValidateConfig(c));
    TFL_ASSIGN_OR_RETURN(SimulationResult run, RunSimulation(c, {detector}));
    rows.push_back({k, run.timings.front()});
    if (progress) {
      progress(absl::StrCat(k, " clients: total ", Fixed(rows.back().timing.TotalSum()),
                            " s, critical ", Fixed(rows.back().timing.TotalCritical()), " s"));
    }
  }
  return rows;
}

std::string BenchCsv(const std::vector<BenchRow>& rows) {
  std::vector<std::string> header = {"clients"};
  for (const std::string& p : kPhaseNames) {
    header.push_back(p + "_sum");
    header.push_back(p + "_crit");
  }
  header.push_back("total_sum");
  header.push_back("total_crit");
  std::string out = absl::StrCat(absl::StrJoin(header, ","), "\n");
  for (const BenchRow& r : rows) {
    const TimingRecord& t = r.timing;
    std::vector<std::string> f = {absl::StrCat(r.clients)};
    for (const PhaseTime* p :
         {&t.train, &t.encrypt, &t.project, &t.semi_aggregate, &t.decrypt, &t.analyze}) {
      f.push_back(Fixed(p->sum));
      f.push_back(Fixed(p->critical));
    }
    f.push_back(Fixed(t.TotalSum()));
    f.push_back(Fixed(t.TotalCritical()));
    absl::StrAppend(&out, absl::StrJoin(f, ","), "\n");
  }
  return out;
}

absl::Status SaveRun(const std::string& dir, const SimConfig& config,
                     const SimulationResult& run) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (fs::exists(dir, ec)) {
    return absl::AlreadyExistsError(absl::StrCat("output directory ", dir, " already exists"));
  }
  const std::string partial = dir + ".partial";
  fs::remove_all(partial, ec);
  auto write_all = [&]() -> absl::Status {
    fs::create_directories(fs::path(partial) / "store", ec);
    if (ec) return absl::NotFoundError(absl::StrCat("cannot create ", partial));
    TFL_RETURN_IF_ERROR(WriteFileAtomic(partial + "/config.txt", SerializeConfig(config)));
    TFL_RETURN_IF_ERROR(WriteFileAtomic(partial + "/metrics.csv", MetricsCsv(run.metrics)));
    TFL_RETURN_IF_ERROR(
        WriteFileAtomic(partial + "/ledger.txt", run.state.ledger.Serialize()));
    return run.state.store.SaveTo(partial + "/store");
  };
  absl::Status s = write_all();
  if (s.ok()) {
    fs::rename(partial, dir, ec);
    if (ec) s = absl::NotFoundError(absl::StrCat("cannot move run into ", dir));
  }
  if (!s.ok()) fs::remove_all(partial, ec);
  return s;
}

RunCheck VerifyRunDirectory(const std::string& dir) {
  RunCheck check;
  absl::StatusOr<std::string> text = ReadFile(dir + "/ledger.txt");
  if (!text.ok()) {
    check.message = std::string(text.status().message());
    return check;
  }
  if (std::optional<uint64_t> bad = VerifyLedgerText(*text)) {
    check.bad_block = bad;
    check.message = absl::StrCat("first bad block index ", *bad);
    return check;
  }
  absl::StatusOr<DdseStore> store = DdseStore::LoadFrom(dir + "/store");
  if (!store.ok()) {
    check.message = std::string(store.status().message());
    return check;
  }
  if (std::optional<std::string> bad = store->FindCorrupted()) {
    check.bad_blob = *bad;
    check.message = absl::StrCat("corrupted blob ", *bad);
    return check;
  }
  absl::StatusOr<Ledger> ledger = Ledger::Parse(*text);
  if (!ledger.ok()) {
    check.bad_block = 0;
    check.message = std::string(ledger.status().message());
    return check;
  }
  for (const Block& b : ledger->blocks()) {
    for (const Transaction& tx : b.txs) {
      for (const std::string& key : tx.blob_keys) {
        if (!store->Contains(key)) {
          check.bad_block = b.index;
          check.message =
              absl::StrCat("first bad block index ", b.index, ": missing blob ", key);
          return check;
        }
      }
    }
  }
  check.ok = true;
  check.message = absl::StrCat("ok: ", ledger->size(), " blocks, ", store->size(), " blobs");
  return check;
}

absl::Status WriteFileAtomic(const std::string& path, const std::string& contents) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) return absl::NotFoundError(absl::StrCat("cannot write ", tmp));
    out << contents;
    out.flush();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      return absl::DataLossError(absl::StrCat("short write to ", tmp));
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    return absl::NotFoundError(absl::StrCat("cannot move output to ", path));
  }
  return absl::OkStatus();
}

absl::StatusOr<std::string> ReadFile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return absl::NotFoundError(absl::StrCat("cannot read ", path));
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace tfl
