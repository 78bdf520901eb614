// tfl: command-line front end for the trusted federated-learning simulator.
//
//   tfl keygen --out key.txt [--bits 128] [--seed 1]
//   tfl run --out DIR [config flags]
//   tfl gen-corpus --out DIR --seeds 1 2 3 [config flags]
//   tfl train-detector --corpus DIR --out params.txt [--kind gnn|mlp]
//   tfl sweep --out sweep.csv [--variable NAME|all] [--values ...] [config flags]
//   tfl scenario --scenario basic --out scenario.csv [config flags]
//   tfl bench --out bench.csv [--clients 10 20 30 40] [config flags]
//   tfl verify-ledger DIR
//
// Config flags mirror the config file keys (--client-count, --perturbation-ratio,
// ...); --config loads a key=value file first and flags override it.
// Exit status: 0 success, 1 runtime or integrity failure, 2 usage or config
// error.

#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "absl/status/status.h"
#include "absl/strings/str_cat.h"
#include "tfl/experiments.h"
#include "tfl/gnn.h"
#include "tfl/orchestrator.h"
#include "tfl/paillier.h"
#include "tfl/status_macros.h"

namespace tfl {
namespace {

struct ConfigFlags {
  std::string config_path;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;
};

void AddConfigFlags(CLI::App* app, ConfigFlags* flags) {
  app->add_option("--config", flags->config_path, "key=value config file");
  for (const std::string& name : ConfigFieldNames()) {
    flags->options[name] =
        app->add_option("--" + name, flags->values[name])->group("Config");
  }
}

absl::StatusOr<SimConfig> BuildConfig(const ConfigFlags& flags) {
  SimConfig config;
  if (!flags.config_path.empty()) {
    TFL_ASSIGN_OR_RETURN(std::string text, ReadFile(flags.config_path));
    TFL_RETURN_IF_ERROR(ApplyConfigText(config, text));
  }
  for (const auto& [name, option] : flags.options) {
    if (option->count() > 0) {
      TFL_RETURN_IF_ERROR(SetConfigField(config, name, flags.values.at(name)));
    }
  }
  TFL_RETURN_IF_ERROR(ValidateConfig(config));
  return config;
}

void AddPlanFlags(CLI::App* app, CorpusPlan* plan) {
  app->add_option("--train-runs", plan->train_runs, "corpus runs used for training")
      ->capture_default_str()
      ->group("Corpus");
  app->add_option("--test-runs", plan->test_runs, "held-out corpus runs")
      ->capture_default_str()
      ->group("Corpus");
  app->add_option("--corpus-epochs", plan->epochs_per_run, "global epochs per corpus run")
      ->capture_default_str()
      ->group("Corpus");
}

void AddHyperFlags(CLI::App* app, DetectorHyper* h) {
  app->add_option("--layers", h->layers)->capture_default_str()->group("Detector");
  app->add_option("--hidden", h->hidden)->capture_default_str()->group("Detector");
  app->add_option("--dropout", h->dropout)->capture_default_str()->group("Detector");
  app->add_option("--lr", h->learning_rate)->capture_default_str()->group("Detector");
  app->add_option("--batch-graphs", h->batch_graphs)->capture_default_str()->group("Detector");
  app->add_option("--epochs", h->epochs)->capture_default_str()->group("Detector");
  app->add_option("--validation-fraction", h->validation_fraction)
      ->capture_default_str()
      ->group("Detector");
  app->add_option("--detector-seed", h->seed)->capture_default_str()->group("Detector");
}

void Log(const std::string& line) { std::fprintf(stderr, "%s\n", line.c_str()); }

absl::StatusOr<Detector> LoadDetector(const std::string& path) {
  TFL_ASSIGN_OR_RETURN(std::string text, ReadFile(path));
  return ParseDetector(text);
}

absl::Status CmdKeygen(int bits, uint64_t seed, const std::string& out) {
  TFL_ASSIGN_OR_RETURN(PaillierKeyPair kp, GenerateKeyPair(bits, seed));
  TFL_RETURN_IF_ERROR(WriteFileAtomic(out, SerializeKeyPair(kp)));
  Log(absl::StrCat("wrote ", bits, "-bit key to ", out));
  return absl::OkStatus();
}

absl::Status CmdRun(const ConfigFlags& flags, const std::string& out) {
  TFL_ASSIGN_OR_RETURN(SimConfig config, BuildConfig(flags));
  Detector defense;
  Detectors detectors;
  if (!config.detector_params_path.empty()) {
    TFL_ASSIGN_OR_RETURN(defense, LoadDetector(config.detector_params_path));
    detectors.defense = &defense;
  }
  TFL_ASSIGN_OR_RETURN(SimulationResult run, RunSimulation(config, detectors));
  for (const EpochMetrics& m : run.metrics) {
    Log(absl::StrCat("epoch ", m.epoch, ": accuracy ", m.global_accuracy));
  }
  return SaveRun(out, config, run);
}

absl::Status CmdGenCorpus(const ConfigFlags& flags, const std::vector<uint64_t>& seeds,
                          const std::string& out) {
  TFL_ASSIGN_OR_RETURN(SimConfig config, BuildConfig(flags));
  TFL_ASSIGN_OR_RETURN(std::vector<BipartiteGraph> corpus,
                       GenerateDetectorCorpus(config, seeds));
  std::error_code ec;
  if (std::filesystem::exists(out, ec)) {
    return absl::AlreadyExistsError(absl::StrCat("output directory ", out, " already exists"));
  }
  const std::string partial = out + ".partial";
  std::filesystem::remove_all(partial, ec);
  absl::Status s = WriteCorpus(corpus, partial);
  if (s.ok()) {
    std::filesystem::rename(partial, out, ec);
    if (ec) s = absl::NotFoundError(absl::StrCat("cannot move corpus into ", out));
  }
  if (!s.ok()) {
    std::filesystem::remove_all(partial, ec);
    return s;
  }
  Log(absl::StrCat("wrote ", corpus.size(), " graphs to ", out));
  return absl::OkStatus();
}

absl::Status CmdTrainDetector(const std::string& corpus_dir, const std::string& kind_name,
                              const DetectorHyper& hyper, const std::string& out,
                              const std::string& report_path) {
  DetectorKind kind;
  if (kind_name == "gnn") {
    kind = DetectorKind::kGnn;
  } else if (kind_name == "mlp") {
    kind = DetectorKind::kMlp;
  } else {
    return absl::InvalidArgumentError(absl::StrCat("unknown detector kind '", kind_name, "'"));
  }
  TFL_ASSIGN_OR_RETURN(std::vector<BipartiteGraph> corpus, ReadCorpus(corpus_dir));
  TrainReport report;
  TFL_ASSIGN_OR_RETURN(Detector det, TrainDetector(kind, corpus, hyper, &report));
  const std::string text = absl::StrCat(
      "kind ", kind_name, "\ntrain_graphs ", report.train_graphs, "\nvalidation_graphs ",
      report.validation_graphs, "\nbest_epoch ", report.best_epoch, "\nvalidation_f1 ",
      report.validation_f1, "\nvalidation_loss ", report.validation_loss, "\n");
  const std::string report_out = report_path.empty() ? out + ".report" : report_path;
  TFL_RETURN_IF_ERROR(WriteFileAtomic(out, SerializeDetector(det)));
  absl::Status s = WriteFileAtomic(report_out, text);
  if (!s.ok()) {
    std::error_code ec;
    std::filesystem::remove(out, ec);
    return s;
  }
  Log(text);
  return absl::OkStatus();
}

absl::Status CmdSweep(const ConfigFlags& flags, const std::string& variable,
                      const std::vector<double>& values, const std::vector<uint64_t>& seeds,
                      const CorpusPlan& plan, const std::string& out) {
  TFL_ASSIGN_OR_RETURN(SimConfig base, BuildConfig(flags));
  std::vector<SweepVariable> variables;
  if (variable == "all") {
    if (!values.empty()) {
      return absl::InvalidArgumentError("--values needs a single --variable");
    }
    variables = {SweepVariable::kPerturbationRatio, SweepVariable::kPerturbationSteps,
                 SweepVariable::kSelectedClients, SweepVariable::kConnectionsPerNode};
  } else {
    TFL_ASSIGN_OR_RETURN(SweepVariable v, ParseSweepVariable(variable));
    variables = {v};
  }
  std::vector<SweepSpec> specs;
  for (SweepVariable v : variables) {
    SweepSpec spec;
    spec.variable = v;
    spec.values = values.empty() ? DefaultSweepValues(v) : values;
    spec.seeds = seeds;
    spec.base = base;
    spec.plan = plan;
    for (double x : spec.values) TFL_RETURN_IF_ERROR(ApplySweepValue(base, v, x).status());
    specs.push_back(spec);
  }
  PointCache cache;
  std::vector<ResultRow> rows;
  for (const SweepSpec& spec : specs) {
    TFL_ASSIGN_OR_RETURN(auto part, RunSweep(spec, &cache, Log));
    rows.insert(rows.end(), part.begin(), part.end());
  }
  return WriteFileAtomic(out, SweepCsv(rows));
}

absl::Status CmdScenario(const ConfigFlags& flags, const std::string& name,
                         const std::string& detector_path, const CorpusPlan& plan,
                         const std::string& out) {
  TFL_ASSIGN_OR_RETURN(SimConfig base, BuildConfig(flags));
  TFL_ASSIGN_OR_RETURN(Scenario scenario, ParseScenario(name));
  Detector det;
  const Detector* detector = nullptr;
  if (!detector_path.empty()) {
    TFL_ASSIGN_OR_RETURN(det, LoadDetector(detector_path));
    detector = &det;
  }
  TFL_ASSIGN_OR_RETURN(auto rows, RunScenario(base, scenario, plan, detector, Log));
  return WriteFileAtomic(out, ScenarioCsv(rows));
}

absl::Status CmdBench(const ConfigFlags& flags, const std::vector<int>& counts,
                      const std::string& detector_path, const std::string& out) {
  TFL_ASSIGN_OR_RETURN(SimConfig base, BuildConfig(flags));
  Detector det;
  const Detector* detector = nullptr;
  if (!detector_path.empty()) {
    TFL_ASSIGN_OR_RETURN(det, LoadDetector(detector_path));
    detector = &det;
  }
  TFL_ASSIGN_OR_RETURN(auto rows, RunBench(base, counts, detector, Log));
  return WriteFileAtomic(out, BenchCsv(rows));
}

int ExitCode(const absl::Status& s) {
  if (s.ok()) return 0;
  std::fprintf(stderr, "error: %s\n", s.ToString().c_str());
  return s.code() == absl::StatusCode::kInvalidArgument ? 2 : 1;
}

int Main(int argc, char** argv) {
  CLI::App app{"Trusted federated-learning simulator"};
  app.require_subcommand(1);

  int key_bits = 128;
  uint64_t key_seed = 1;
  std::string out;
  auto* keygen = app.add_subcommand("keygen", "Generate a Paillier key pair");
  keygen->add_option("--bits", key_bits, "modulus bit length")->capture_default_str();
  keygen->add_option("--seed", key_seed, "generation seed")->capture_default_str();
  keygen->add_option("--out", out, "key file")->required();

  ConfigFlags run_flags;
  auto* run = app.add_subcommand("run", "Run a simulation and keep its ledger and store");
  AddConfigFlags(run, &run_flags);
  run->add_option("--out", out, "run directory (must not exist)")->required();

  ConfigFlags corpus_flags;
  std::vector<uint64_t> corpus_seeds;
  auto* gen = app.add_subcommand("gen-corpus", "Generate labeled detector graphs");
  AddConfigFlags(gen, &corpus_flags);
  gen->add_option("--seeds", corpus_seeds, "run seeds")->required();
  gen->add_option("--out", out, "corpus directory (must not exist)")->required();

  std::string corpus_dir, kind = "gnn", report_path;
  DetectorHyper hyper;
  auto* train = app.add_subcommand("train-detector", "Train a GNN or MLP detector");
  train->add_option("--corpus", corpus_dir, "corpus directory")->required();
  train->add_option("--kind", kind, "gnn or mlp")->capture_default_str();
  train->add_option("--out", out, "parameter file")->required();
  train->add_option("--report", report_path, "validation report (default <out>.report)");
  AddHyperFlags(train, &hyper);

  ConfigFlags sweep_flags;
  std::string variable = "all";
  std::vector<double> values;
  std::vector<uint64_t> sweep_seeds = {1, 2, 3};
  CorpusPlan sweep_plan;
  auto* sweep = app.add_subcommand("sweep", "Detection F1 sweep, GNN against MLP");
  AddConfigFlags(sweep, &sweep_flags);
  sweep->add_option("--variable", variable,
                    "perturbation-ratio, perturbation-steps, selected-clients, "
                    "connections-per-node or all")
      ->capture_default_str();
  sweep->add_option("--values", values, "values (default: the variable's standard grid)");
  sweep->add_option("--seeds", sweep_seeds, "experiment seeds")->capture_default_str();
  AddPlanFlags(sweep, &sweep_plan);
  AddHyperFlags(sweep, &sweep_plan.hyper);
  sweep->add_option("--out", out, "CSV path")->required();

  ConfigFlags scenario_flags;
  std::string scenario_name, detector_path;
  CorpusPlan scenario_plan;
  auto* scenario = app.add_subcommand("scenario", "Global accuracy with and without defense");
  AddConfigFlags(scenario, &scenario_flags);
  scenario->add_option("--scenario", scenario_name, "basic, ratio-0.8, steps-10, connections-6")
      ->required();
  scenario->add_option("--detector", detector_path,
                       "trained GNN (default: train one on a shadow corpus)");
  AddPlanFlags(scenario, &scenario_plan);
  AddHyperFlags(scenario, &scenario_plan.hyper);
  scenario->add_option("--out", out, "CSV path")->required();

  ConfigFlags bench_flags;
  std::vector<int> counts = {10, 20, 30, 40};
  auto* bench = app.add_subcommand("bench", "Per-phase timing for one epoch per client count");
  AddConfigFlags(bench, &bench_flags);
  bench->add_option("--clients", counts, "selected-client counts")->capture_default_str();
  bench->add_option("--detector", detector_path, "detector used in the analyze phase");
  bench->add_option("--out", out, "CSV path")->required();

  std::string verify_dir;
  auto* verify = app.add_subcommand("verify-ledger", "Check a run directory's chain and blobs");
  verify->add_option("dir", verify_dir, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (*keygen) return ExitCode(CmdKeygen(key_bits, key_seed, out));
  if (*run) return ExitCode(CmdRun(run_flags, out));
  if (*gen) return ExitCode(CmdGenCorpus(corpus_flags, corpus_seeds, out));
  if (*train) return ExitCode(CmdTrainDetector(corpus_dir, kind, hyper, out, report_path));
  if (*sweep) {
    return ExitCode(CmdSweep(sweep_flags, variable, values, sweep_seeds, sweep_plan, out));
  }
  if (*scenario) {
    return ExitCode(CmdScenario(scenario_flags, scenario_name, detector_path, scenario_plan, out));
  }
  if (*bench) return ExitCode(CmdBench(bench_flags, counts, detector_path, out));
  if (*verify) {
    const RunCheck check = VerifyRunDirectory(verify_dir);
    std::printf("%s\n", check.message.c_str());
    return check.ok ? 0 : 1;
  }
  return 2;
}

}  // namespace
}  // namespace tfl

int main(int argc, char** argv) { return tfl::Main(argc, argv); }
