// Acceptance suite. Each criterion prints one line:
//   PASS <name>: <details>   or   FAIL <name>: <details>
// Usage: tfl_acceptance [--only <name>] [--artifacts <dir>]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "absl/status/statusor.h"
#include "absl/strings/match.h"
#include "absl/strings/str_cat.h"
#include "absl/strings/str_format.h"
#include "absl/strings/str_split.h"
#include "tfl/experiments.h"
#include "tfl/gnn.h"
#include "tfl/ledger.h"
#include "tfl/model.h"
#include "tfl/orchestrator.h"
#include "tfl/paillier.h"
#include "tfl/preproc.h"
#include "tfl/rng.h"
#include "tfl/status_macros.h"

namespace tfl {
namespace {

namespace fs = std::filesystem;

struct Outcome {
  bool pass = false;
  std::string detail;
};

// Directory for CSVs and run directories produced along the way.
std::string g_artifacts;

double Since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

absl::Status Require(bool cond, const std::string& what) {
  return cond ? absl::OkStatus() : absl::InternalError(what);
}

absl::Status SaveArtifact(const std::string& name, const std::string& contents) {
  if (g_artifacts.empty()) return absl::OkStatus();
  std::error_code ec;
  fs::create_directories(g_artifacts, ec);
  return WriteFileAtomic((fs::path(g_artifacts) / name).string(), contents);
}

// ---------------------------------------------------------------------------

absl::StatusOr<Outcome> PaillierSuite() {
  const auto start = std::chrono::steady_clock::now();
  int checks = 0;
  for (int bits : {64, 128}) {
    TFL_ASSIGN_OR_RETURN(PaillierKeyPair kp, GenerateKeyPair(bits, 1000 + bits));
    const BigInt& n = kp.pk.n;
    Rng rng(bits);
    for (int i = 0; i < 1000; ++i) {
      const BigInt m1 = RandomBelow(rng, n);
      const BigInt m2 = RandomBelow(rng, n);
      const BigInt k = RandomBelow(rng, n);
      TFL_ASSIGN_OR_RETURN(Ciphertext c1, Encrypt(kp.pk, m1, rng));
      TFL_ASSIGN_OR_RETURN(Ciphertext c2, Encrypt(kp.pk, m2, rng));
      TFL_ASSIGN_OR_RETURN(BigInt d1, Decrypt(kp, c1));
      TFL_ASSIGN_OR_RETURN(BigInt d2, Decrypt(kp, c2));
      TFL_RETURN_IF_ERROR(Require(d1 == m1 && d2 == m2, "roundtrip mismatch"));

      TFL_ASSIGN_OR_RETURN(Ciphertext sum, HomAdd(kp.pk, c1, c2));
      TFL_ASSIGN_OR_RETURN(BigInt ds, Decrypt(kp, sum));
      BigInt expect_sum = (m1 + m2) % n;
      TFL_RETURN_IF_ERROR(Require(ds == expect_sum, "additive law violated"));

      TFL_ASSIGN_OR_RETURN(Ciphertext scaled, HomScalarMul(kp.pk, c1, k));
      TFL_ASSIGN_OR_RETURN(BigInt dk, Decrypt(kp, scaled));
      BigInt expect_prod = (m1 * k) % n;
      TFL_RETURN_IF_ERROR(Require(dk == expect_prod, "scalar law violated"));

      // Signed fixed-point values round-trip through the codec as well.
      const FixedPointCodec codec(n);
      const double x = (UniformUnit(rng) - 0.5) * 1000.0;
      TFL_ASSIGN_OR_RETURN(BigInt enc, codec.EncodeSigned(x));
      TFL_ASSIGN_OR_RETURN(Ciphertext cx, EncryptReal(kp.pk, codec, x, rng));
      TFL_ASSIGN_OR_RETURN(BigInt dx, Decrypt(kp, cx));
      TFL_RETURN_IF_ERROR(Require(codec.ToSigned(dx) == enc, "codec roundtrip mismatch"));
      checks += 4;
    }
  }
  const double seconds = Since(start);
  return Outcome{seconds < 60.0,
                 absl::StrFormat("%d exact checks over 2 key sizes in %.1f s (limit 60 s)",
                                 checks, seconds)};
}

// ---------------------------------------------------------------------------

absl::StatusOr<Outcome> PipelineEquivalence() {
  TFL_ASSIGN_OR_RETURN(PaillierKeyPair kp, GenerateKeyPair(128, 77));
  const FixedPointCodec codec(kp.pk.n);
  Rng rng(2024);
  double worst_proj_ratio = 0.0;
  double worst_semi = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const int d = 1 + static_cast<int>(UniformBelow(rng, 2410));
    const int k = 2 + static_cast<int>(UniformBelow(rng, 3));
    std::vector<ModelParams> models(k);
    std::vector<EncryptedModel> encrypted(k);
    std::vector<double> weights(k);
    for (int c = 0; c < k; ++c) {
      models[c].weights.resize(d);
      for (double& w : models[c].weights) w = 2.0 * UniformUnit(rng) - 1.0;
      weights[c] = 50.0 + static_cast<double>(UniformBelow(rng, 600));
      TFL_ASSIGN_OR_RETURN(encrypted[c], EncryptModel(kp.pk, models[c], codec, c, rng));
    }
    TFL_ASSIGN_OR_RETURN(ProjectionMatrix p,
                         ProjectionMatrix::Generate(32, d, 500 + trial, codec));

    // Projection of the first model.
    TFL_ASSIGN_OR_RETURN(EncryptedVector proj, ProjectEncrypted(kp.pk, encrypted[0], p));
    const std::vector<double> plain = p.Apply(models[0].weights);
    std::vector<BigInt> encoded_w(d);
    for (int j = 0; j < d; ++j) {
      TFL_ASSIGN_OR_RETURN(encoded_w[j], codec.EncodeSigned(models[0].weights[j]));
    }
    const double bound = d * std::ldexp(1.0, -16) * p.max_abs_entry();
    for (int i = 0; i < 32; ++i) {
      TFL_ASSIGN_OR_RETURN(BigInt residue, Decrypt(kp, proj.ciphertexts[i]));
      BigInt exact = 0;
      std::span<const BigInt> row = p.encoded_row(i);
      for (int j = 0; j < d; ++j) exact += row[j] * encoded_w[j];
      TFL_RETURN_IF_ERROR(Require(codec.ToSigned(residue) == exact,
                                  absl::StrCat("projection not exact, trial ", trial)));
      const double err =
          std::abs(codec.Decode(residue, proj.scale_exponent) - plain[i]);
      worst_proj_ratio = std::max(worst_proj_ratio, err / bound);
    }

    // Semi-aggregation of all k models.
    std::vector<const EncryptedModel*> ptrs;
    for (const EncryptedModel& m : encrypted) ptrs.push_back(&m);
    TFL_ASSIGN_OR_RETURN(EncryptedModel semi, SemiAggregate(kp.pk, ptrs, weights, codec));
    double weight_sum = 0.0;
    std::vector<BigInt> encoded_weights(k);
    for (int c = 0; c < k; ++c) {
      weight_sum += weights[c];
      TFL_ASSIGN_OR_RETURN(encoded_weights[c], codec.EncodeSigned(weights[c]));
    }
    for (int j = 0; j < d; ++j) {
      TFL_ASSIGN_OR_RETURN(BigInt residue, Decrypt(kp, semi.ciphertexts[j]));
      BigInt exact = 0;
      double reference = 0.0;
      for (int c = 0; c < k; ++c) {
        TFL_ASSIGN_OR_RETURN(BigInt wj, codec.EncodeSigned(models[c].weights[j]));
        exact += encoded_weights[c] * wj;
        reference += weights[c] * models[c].weights[j];
      }
      TFL_RETURN_IF_ERROR(Require(codec.ToSigned(residue) == exact,
                                  absl::StrCat("semi-aggregate not exact, trial ", trial)));
      const double err = std::abs(codec.Decode(residue, semi.scale_exponent) / weight_sum -
                                  reference / weight_sum);
      worst_semi = std::max(worst_semi, err);
    }
  }
  const double semi_limit = std::ldexp(1.0, -12);
  return Outcome{worst_proj_ratio <= 1.0 && worst_semi <= semi_limit,
                 absl::StrFormat("50 models exact at integer level; worst projection error "
                                 "%.3g of bound, worst semi-aggregate error %.3g (limit %.3g)",
                                 worst_proj_ratio, worst_semi, semi_limit)};
}

// ---------------------------------------------------------------------------

absl::StatusOr<Outcome> DetectionSweep() {
  const auto start = std::chrono::steady_clock::now();
  const SimConfig base;
  PointCache cache;
  std::vector<ResultRow> all;
  for (SweepVariable v :
       {SweepVariable::kPerturbationRatio, SweepVariable::kPerturbationSteps,
        SweepVariable::kSelectedClients, SweepVariable::kConnectionsPerNode}) {
    SweepSpec spec;
    spec.variable = v;
    spec.values = DefaultSweepValues(v);
    spec.base = base;
    TFL_ASSIGN_OR_RETURN(std::vector<ResultRow> rows,
                         RunSweep(spec, &cache, [](const std::string& line) {
                           std::fprintf(stderr, "  sweep %s\n", line.c_str());
                         }));
    all.insert(all.end(), rows.begin(), rows.end());
  }
  const double seconds = Since(start);
  TFL_RETURN_IF_ERROR(SaveArtifact("sweep.csv", SweepCsv(all)));

  struct Mean {
    double gnn = 0.0, mlp = 0.0;
    int n = 0;
  };
  std::map<std::pair<std::string, double>, Mean> points;
  for (const ResultRow& r : all) {
    Mean& m = points[{std::string(SweepVariableName(r.variable)), r.value}];
    m.gnn += r.gnn_f1;
    m.mlp += r.mlp_f1;
    ++m.n;
  }
  int losing = 0;
  std::string losers;
  for (auto& [key, m] : points) {
    m.gnn /= m.n;
    m.mlp /= m.n;
    if (m.gnn < m.mlp) {
      ++losing;
      absl::StrAppendFormat(&losers, " %s=%g(%.3f<%.3f)", key.first, key.second, m.gnn,
                            m.mlp);
    }
  }
  const Mean basic = points[{std::string(SweepVariableName(
                                 SweepVariable::kPerturbationRatio)),
                             base.perturbation_ratio}];
  const bool pass = basic.gnn >= 0.90 && losing == 0 && seconds < 1800.0;
  return Outcome{pass, absl::StrFormat("basic GNN F1 %.3f (MLP %.3f, need >= 0.90); "
                                       "GNN below MLP at %d of %d points%s; %.0f s "
                                       "(limit 1800 s)",
                                       basic.gnn, basic.mlp, losing, points.size(), losers,
                                       seconds)};
}

// ---------------------------------------------------------------------------

absl::StatusOr<std::map<std::string, std::vector<double>>> ScenarioSeries(
    Scenario s, double* seconds) {
  const auto start = std::chrono::steady_clock::now();
  TFL_ASSIGN_OR_RETURN(std::vector<ScenarioRow> rows,
                       RunScenario(SimConfig{}, s, CorpusPlan{}, nullptr,
                                   [](const std::string& line) {
                                     std::fprintf(stderr, "  scenario %s\n", line.c_str());
                                   }));
  *seconds = Since(start);
  TFL_RETURN_IF_ERROR(
      SaveArtifact(absl::StrCat("scenario-", ScenarioName(s), ".csv"), ScenarioCsv(rows)));
  std::map<std::string, std::vector<double>> series;
  for (const ScenarioRow& r : rows) series[r.condition].push_back(r.accuracy);
  return series;
}

absl::StatusOr<Outcome> AttackScenarios() {
  std::string detail;
  bool margins = true;
  bool fast = true;
  for (Scenario s : {Scenario::kRatio08, Scenario::kSteps10}) {
    double seconds = 0.0;
    TFL_ASSIGN_OR_RETURN(auto series, ScenarioSeries(s, &seconds));
    const double margin = series["novel"].back() - series["perturbed"].back();
    margins = margins && margin >= 0.05;
    fast = fast && seconds < 600.0;
    absl::StrAppendFormat(&detail, "%s: novel %.3f vs perturbed %.3f (margin %+.1f pp, %.0f s); ",
                          ScenarioName(s), series["novel"].back(), series["perturbed"].back(),
                          100.0 * margin, seconds);
  }
  absl::StrAppend(&detail, "need >= 5 pp in each, each < 600 s");
  return Outcome{margins && fast, detail};
}

absl::StatusOr<Outcome> BasicScenario() {
  double seconds = 0.0;
  TFL_ASSIGN_OR_RETURN(auto series, ScenarioSeries(Scenario::kBasic, &seconds));
  const std::vector<double>& novel = series["novel"];
  const std::vector<double>& clean = series["non-perturbed"];
  double worst = 0.0;
  for (size_t e = 10; e < novel.size(); ++e) {
    worst = std::max(worst, std::abs(novel[e] - clean[e]));
  }
  return Outcome{novel.size() > 10 && worst <= 0.03 && seconds < 600.0,
                 absl::StrFormat("largest |novel - non-perturbed| over epochs 10..%d is "
                                 "%.1f pp (limit 3 pp); %.0f s (limit 600 s)",
                                 static_cast<int>(novel.size()) - 1, 100.0 * worst, seconds)};
}

// ---------------------------------------------------------------------------

// Relative error ||a - n|| / (||a|| + ||n||) over a block, using every entry
// of blocks up to `max_entries` and a seeded sample beyond.
absl::StatusOr<double> DetectorBlockError(Detector det, const BipartiteGraph& g, size_t b,
                                          const ParamSet& grad, int max_entries) {
  Matrix& block = det.params.blocks[b];
  Rng rng(b + 17);
  const double h = 1e-6;
  const bool all = block.size() <= max_entries;
  const int count = all ? static_cast<int>(block.size()) : max_entries;
  double diff = 0, norm_a = 0, norm_n = 0;
  for (int s = 0; s < count; ++s) {
    const Eigen::Index k = all ? s : static_cast<Eigen::Index>(UniformBelow(rng, block.size()));
    const double saved = block.data()[k];
    block.data()[k] = saved + h;
    TFL_ASSIGN_OR_RETURN(double plus, LossAndGradient(det, g, false, nullptr, nullptr));
    block.data()[k] = saved - h;
    TFL_ASSIGN_OR_RETURN(double minus, LossAndGradient(det, g, false, nullptr, nullptr));
    block.data()[k] = saved;
    const double numeric = (plus - minus) / (2 * h);
    const double analytic = grad.blocks[b].data()[k];
    diff += (numeric - analytic) * (numeric - analytic);
    norm_a += analytic * analytic;
    norm_n += numeric * numeric;
  }
  const double denom = std::sqrt(norm_a) + std::sqrt(norm_n);
  return denom > 0 ? std::sqrt(diff) / denom : 0.0;
}

BipartiteGraph RandomGraph(int clients, int nodes, int per_node, uint64_t seed) {
  Rng rng(seed);
  BipartiteGraph g;
  g.client_features = Matrix(clients, kDefaultProjectionDim + kHistoryWindow);
  g.node_features = Matrix(nodes, 2);
  for (Eigen::Index i = 0; i < g.client_features.size(); ++i) {
    g.client_features.data()[i] = StandardNormal(rng);
  }
  for (Eigen::Index i = 0; i < g.node_features.size(); ++i) {
    g.node_features.data()[i] = StandardNormal(rng);
  }
  for (int c = 0; c < clients; ++c) g.client_ids.push_back(c);
  for (int n = 0; n < nodes; ++n) g.node_ids.push_back(n);
  for (int n = 0; n < nodes; ++n) {
    std::vector<int> pool(clients);
    for (int c = 0; c < clients; ++c) pool[c] = c;
    Shuffle(pool, rng);
    for (int k = 0; k < per_node; ++k) g.edges.emplace_back(n, pool[k]);
  }
  for (int c = 0; c < clients; ++c) g.labels.push_back(static_cast<int>(UniformBelow(rng, 2)));
  return g;
}

absl::StatusOr<Outcome> GradientCheck() {
  double worst = 0.0;
  std::string worst_block;
  int blocks = 0;
  const BipartiteGraph g = RandomGraph(20, 10, 5, 11);
  for (DetectorKind kind : {DetectorKind::kGnn, DetectorKind::kMlp}) {
    DetectorHyper hyper;
    hyper.seed = 5;
    Detector det = InitDetector(kind, kDefaultProjectionDim + kHistoryWindow, 2, hyper);
    // Non-zero biases so every block carries signal.
    Rng rng(6);
    for (Matrix& m : det.params.blocks) {
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += 0.05 * StandardNormal(rng);
    }
    ParamSet grad;
    TFL_RETURN_IF_ERROR(LossAndGradient(det, g, false, nullptr, &grad).status());
    for (size_t b = 0; b < det.params.blocks.size(); ++b) {
      TFL_ASSIGN_OR_RETURN(double err, DetectorBlockError(det, g, b, grad, 400));
      ++blocks;
      if (err > worst) {
        worst = err;
        worst_block = absl::StrCat(kind == DetectorKind::kGnn ? "gnn." : "mlp.",
                                   det.params.names[b]);
      }
    }
  }

  // Local classifier: every weight of every layer.
  SyntheticSpec spec;
  spec.client_count = 1;
  spec.samples_per_client = 32;
  spec.test_samples = 10;
  const SyntheticData data = GenerateSynthetic(spec);
  TFL_ASSIGN_OR_RETURN(ModelParams m, InitModel(kSyntheticShapes, 3));
  Rng rng(4);
  for (double& w : m.weights) w += 0.05 * StandardNormal(rng);
  std::vector<size_t> rows(32);
  for (size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  std::vector<double> grad;
  TFL_RETURN_IF_ERROR(BatchLossAndGradient(m, data.shards[0], rows, &grad).status());
  size_t offset = 0;
  for (size_t layer = 0; layer < kSyntheticShapes.size(); ++layer) {
    const LayerShape& s = kSyntheticShapes[layer];
    const size_t sizes[2] = {static_cast<size_t>(s.in) * s.out, static_cast<size_t>(s.out)};
    for (int part = 0; part < 2; ++part) {
      double diff = 0, norm_a = 0, norm_n = 0;
      for (size_t i = offset; i < offset + sizes[part]; ++i) {
        const double saved = m.weights[i];
        const double h = 1e-6;
        m.weights[i] = saved + h;
        TFL_ASSIGN_OR_RETURN(double plus,
                             BatchLossAndGradient(m, data.shards[0], rows, nullptr));
        m.weights[i] = saved - h;
        TFL_ASSIGN_OR_RETURN(double minus,
                             BatchLossAndGradient(m, data.shards[0], rows, nullptr));
        m.weights[i] = saved;
        const double numeric = (plus - minus) / (2 * h);
        diff += (numeric - grad[i]) * (numeric - grad[i]);
        norm_a += grad[i] * grad[i];
        norm_n += numeric * numeric;
      }
      const double denom = std::sqrt(norm_a) + std::sqrt(norm_n);
      const double err = denom > 0 ? std::sqrt(diff) / denom : 0.0;
      ++blocks;
      if (err > worst) {
        worst = err;
        worst_block = absl::StrCat("classifier.layer", layer, part == 0 ? ".w" : ".b");
      }
      offset += sizes[part];
    }
  }
  return Outcome{worst < 1e-4, absl::StrFormat("%d blocks, worst relative error %.2e (%s), "
                                               "limit 1e-4",
                                               blocks, worst, worst_block)};
}

// ---------------------------------------------------------------------------

SimConfig SmallPaillierConfig() {
  SimConfig c;
  c.client_count = 24;
  c.samples_per_client = 150;
  c.selected_per_epoch = 10;
  c.local_epochs = 2;
  c.preproc_nodes = 5;
  c.connections_per_node = 3;
  c.test_samples = 300;
  c.global_epochs = 3;
  c.key_bits = 128;
  c.seed = 9;
  return c;
}

std::string Slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void Spit(const fs::path& p, const std::string& bytes) {
  std::ofstream(p, std::ios::binary | std::ios::trunc) << bytes;
}

absl::StatusOr<Outcome> LedgerIntegrity() {
  const SimConfig config = SmallPaillierConfig();
  DetectorHyper hyper;
  hyper.seed = 2;
  const Detector det = InitDetector(DetectorKind::kGnn,
                                    config.projection_dim + kHistoryWindow, 2, hyper,
                                    config.projection_dim);
  TFL_ASSIGN_OR_RETURN(SimulationResult run, RunSimulation(config, {&det}));

  // Replay reconstructs every global-model blob.
  TFL_ASSIGN_OR_RETURN(SimEnvironment env, BuildEnvironment(config));
  TFL_ASSIGN_OR_RETURN(std::vector<std::string> replayed,
                       ReplayGlobalBlobs(env, &det, run.state.ledger, run.state.store));
  bool replay_ok = replayed.size() == run.state.global_keys.size();
  for (size_t e = 0; replay_ok && e < replayed.size(); ++e) {
    TFL_ASSIGN_OR_RETURN(std::string original, run.state.store.Get(run.state.global_keys[e]));
    replay_ok = replayed[e] == original;
  }

  const fs::path root = fs::temp_directory_path() / "tfl_acceptance_ledger";
  fs::remove_all(root);
  fs::create_directories(root);
  const std::string clean = (root / "clean").string();
  TFL_RETURN_IF_ERROR(SaveRun(clean, config, run));
  const RunCheck baseline = VerifyRunDirectory(clean);
  TFL_RETURN_IF_ERROR(Require(baseline.ok, "untampered run fails: " + baseline.message));

  std::vector<fs::path> blobs;
  for (const auto& entry : fs::directory_iterator(fs::path(clean) / "store")) {
    blobs.push_back(entry.path().filename());
  }
  std::sort(blobs.begin(), blobs.end());
  const std::string ledger_text = Slurp(fs::path(clean) / "ledger.txt");

  Rng rng(31337);
  int detected = 0;
  int ledger_tampers = 0;
  int blob_tampers = 0;
  const fs::path work = root / "work";
  for (int i = 0; i < 100; ++i) {
    fs::remove_all(work);
    fs::copy(clean, work, fs::copy_options::recursive);
    fs::path target;
    std::string bytes;
    const bool hit_ledger = i % 2 == 0;
    if (hit_ledger) {
      target = work / "ledger.txt";
      bytes = ledger_text;
      ++ledger_tampers;
    } else {
      target = work / "store" / blobs[UniformBelow(rng, blobs.size())];
      bytes = Slurp(target);
      ++blob_tampers;
    }
    const size_t pos = UniformBelow(rng, bytes.size());
    const char replacement =
        static_cast<char>(bytes[pos] ^ static_cast<char>(1 + UniformBelow(rng, 255)));
    bytes[pos] = replacement;
    Spit(target, bytes);

    const RunCheck check = VerifyRunDirectory(work.string());
    bool caught = !check.ok;
    if (!hit_ledger) {
      // The blob store itself refuses to serve the tampered blob.
      auto store = DdseStore::LoadFrom((work / "store").string());
      const std::string key = target.filename().string();
      caught = caught && (!store.ok() || !store->Get(key).ok());
    }
    if (caught) ++detected;
  }
  fs::remove_all(root);
  return Outcome{detected == 100 && replay_ok,
                 absl::StrFormat("%d/100 tampers detected (%d ledger, %d blob); replay of %d "
                                 "global blobs %s",
                                 detected, ledger_tampers, blob_tampers, replayed.size(),
                                 replay_ok ? "byte-identical" : "DIFFERS")};
}

// ---------------------------------------------------------------------------

absl::StatusOr<Outcome> PrivacyBoundary() {
  SimConfig config = SmallPaillierConfig();
  // Sparse connections so that some nodes end up with a single client.
  config.selected_per_epoch = 6;
  config.preproc_nodes = 6;
  config.connections_per_node = 1;
  TFL_ASSIGN_OR_RETURN(SimEnvironment env, BuildEnvironment(config));
  SimState state = InitialState(env);
  int artifacts = 0;
  int single_semis = 0;
  int warnings = 0;
  std::string violation;
  for (int e = 0; e < config.global_epochs; ++e) {
    TFL_ASSIGN_OR_RETURN(EpochResult r, RunEpoch(env, {}, state));
    for (const DecryptedArtifact& a : r.decrypted) {
      ++artifacts;
      if (a.kind == ArtifactKind::kProjection) {
        if (a.length != static_cast<size_t>(config.projection_dim) || a.client_count != 1) {
          violation = absl::StrCat("projection of length ", a.length);
        }
      } else if (a.client_count < 2) {
        ++single_semis;
      }
    }
    for (const std::string& w : r.warnings) {
      if (absl::StrContains(w, "single client")) ++warnings;
    }
  }
  const bool warned = single_semis == warnings && single_semis > 0;

  // Every stored blob is one of the permitted kinds; individual models never
  // appear in plaintext, and plaintext models are only global ones.
  const std::set<std::string> globals(state.global_keys.begin(), state.global_keys.end());
  std::map<std::string, int> kinds;
  for (const std::string& key : state.store.Keys()) {
    TFL_ASSIGN_OR_RETURN(std::string blob, state.store.Get(key));
    std::vector<absl::string_view> lines = absl::StrSplit(blob, absl::MaxSplits('\n', 3));
    std::string kind;
    if (lines[0] == "tfl-ciphertexts v1" && lines.size() > 2) {
      if (lines[1] == "kind vector") {
        kind = "encrypted-projection";
      } else if (lines[1] == "kind model" && lines[2] == "owner -1") {
        kind = "encrypted-semi-aggregate";
      }
    } else if (lines[0] == "tfl-model v1" && globals.contains(key)) {
      kind = "global-model";
    } else if (lines[0] == "tfl-node v1") {
      kind = "node-manifest";
    } else if (lines[0] == "tfl-detection v1") {
      kind = "detection-record";
    }
    if (kind.empty()) violation = absl::StrCat("unclassified blob ", key);
    ++kinds[kind];
  }

  // Aggregators never read local models, and clients read only their own.
  // Nodes do receive local models, but only encrypted under a key they lack.
  AccessPolicy policy = state.access;
  bool access_ok = true;
  for (int64_t e = 0; e < config.global_epochs; ++e) {
    for (const std::string& actor : env.candidates) {
      for (Role role : {Role::kAggregatorCandidate, Role::kSelectedAggregator}) {
        access_ok = access_ok &&
                    !policy.Check({actor, role, Action::kReadLocalModel, e, "client-0"}) &&
                    !policy.Check({actor, role, Action::kUploadLocalModel, e, "client-0"});
      }
    }
    access_ok = access_ok && !policy.Check({"client-1", Role::kClient,
                                            Action::kReadLocalModel, e, "client-0"});
  }

  std::string kind_text;
  for (const auto& [k, n] : kinds) absl::StrAppend(&kind_text, " ", k, "=", n);
  return Outcome{violation.empty() && warned && access_ok,
                 absl::StrFormat("%d decrypted artifacts, %d single-client semi-aggregates "
                                 "with %d warnings; access %s; blobs:%s%s",
                                 artifacts, single_semis, warnings,
                                 access_ok ? "denied as required" : "LEAKS", kind_text,
                                 violation.empty() ? "" : "; violation: " + violation)};
}

// ---------------------------------------------------------------------------

absl::StatusOr<Outcome> TimingShape() {
  const std::vector<int> counts = {10, 20, 30, 40};
  // Minimum over repetitions per phase filters scheduler noise.
  std::vector<BenchRow> best;
  for (int rep = 0; rep < 3; ++rep) {
    TFL_ASSIGN_OR_RETURN(std::vector<BenchRow> rows, RunBench(SimConfig{}, counts));
    if (best.empty()) {
      best = rows;
      continue;
    }
    for (size_t i = 0; i < rows.size(); ++i) {
      PhaseTime* dst[] = {&best[i].timing.train,          &best[i].timing.encrypt,
                          &best[i].timing.project,        &best[i].timing.semi_aggregate,
                          &best[i].timing.decrypt,        &best[i].timing.analyze};
      const PhaseTime* src[] = {&rows[i].timing.train,          &rows[i].timing.encrypt,
                                &rows[i].timing.project,        &rows[i].timing.semi_aggregate,
                                &rows[i].timing.decrypt,        &rows[i].timing.analyze};
      for (int p = 0; p < 6; ++p) {
        dst[p]->sum = std::min(dst[p]->sum, src[p]->sum);
        dst[p]->critical = std::min(dst[p]->critical, src[p]->critical);
      }
    }
  }
  TFL_RETURN_IF_ERROR(SaveArtifact("bench.csv", BenchCsv(best)));
  bool phases = true;
  double worst_share = 0.0;
  for (const BenchRow& r : best) {
    for (const PhaseTime* p : {&r.timing.train, &r.timing.encrypt, &r.timing.project,
                               &r.timing.semi_aggregate, &r.timing.decrypt,
                               &r.timing.analyze}) {
      phases = phases && p->sum > 0.0;
    }
    worst_share = std::max(worst_share, r.timing.analyze.sum / r.timing.TotalSum());
  }
  const std::string header = BenchCsv(best).substr(0, BenchCsv(best).find('\n'));
  for (const std::string& name : kPhaseNames) {
    phases = phases && absl::StrContains(header, name + "_sum");
  }
  const double growth =
      best.back().timing.TotalCritical() / best.front().timing.TotalCritical() - 1.0;
  return Outcome{phases && worst_share < 0.01 && growth < 0.5,
                 absl::StrFormat("six phases %s; analyze share at most %.3f%% (limit 1%%); "
                                 "critical path %.2f s -> %.2f s, growth %.1f%% (limit 50%%)",
                                 phases ? "present" : "MISSING", 100.0 * worst_share,
                                 best.front().timing.TotalCritical(),
                                 best.back().timing.TotalCritical(), 100.0 * growth)};
}

// ---------------------------------------------------------------------------

// Every file under a run directory, keyed by relative path.
std::map<std::string, std::string> Tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = Slurp(e.path());
  }
  return out;
}

absl::StatusOr<Outcome> Determinism() {
  const fs::path root = fs::temp_directory_path() / "tfl_acceptance_determinism";
  fs::remove_all(root);
  fs::create_directories(root);

  // Full default-size runs with the GNN defense attached.
  SimConfig config;
  DetectorHyper hyper;
  hyper.seed = 8;
  const Detector det = InitDetector(DetectorKind::kGnn,
                                    config.projection_dim + kHistoryWindow, 2, hyper,
                                    config.projection_dim);
  std::vector<std::map<std::string, std::string>> trees;
  for (int i = 0; i < 2; ++i) {
    TFL_ASSIGN_OR_RETURN(SimulationResult run, RunSimulation(config, {&det}));
    const std::string dir = (root / absl::StrCat("run", i)).string();
    TFL_RETURN_IF_ERROR(SaveRun(dir, config, run));
    trees.push_back(Tree(dir));
  }
  const bool runs_equal = trees[0] == trees[1];

  // Experiment CSVs at reduced size.
  SimConfig small = SmallPaillierConfig();
  small.crypto_backend = Backend::kPlaintextShadow;
  CorpusPlan plan;
  plan.train_runs = 2;
  plan.epochs_per_run = 3;
  plan.hyper.hidden = 16;
  plan.hyper.epochs = 10;
  SweepSpec spec;
  spec.variable = SweepVariable::kPerturbationSteps;
  spec.values = {1, 5};
  spec.seeds = {1, 2};
  spec.base = small;
  spec.plan = plan;
  std::vector<std::string> csvs[2];
  for (int i = 0; i < 2; ++i) {
    TFL_ASSIGN_OR_RETURN(std::vector<ResultRow> rows, RunSweep(spec));
    TFL_ASSIGN_OR_RETURN(std::vector<ScenarioRow> sc,
                         RunScenario(small, Scenario::kRatio08, plan));
    csvs[i] = {SweepCsv(rows), ScenarioCsv(sc)};
  }
  const bool csv_equal = csvs[0] == csvs[1];
  fs::remove_all(root);
  return Outcome{runs_equal && csv_equal,
                 absl::StrFormat("two full runs: %d files %s; sweep and scenario CSVs %s",
                                 trees[0].size(), runs_equal ? "byte-identical" : "DIFFER",
                                 csv_equal ? "byte-identical" : "DIFFER")};
}

// ---------------------------------------------------------------------------

struct Criterion {
  std::string name;
  std::function<absl::StatusOr<Outcome>()> run;
};

const std::vector<Criterion>& Criteria() {
  static const std::vector<Criterion> kAll = {
      {"paillier", PaillierSuite},
      {"pipeline-equivalence", PipelineEquivalence},
      {"detection-sweep", DetectionSweep},
      {"scenario-attack", AttackScenarios},
      {"scenario-basic", BasicScenario},
      {"gradients", GradientCheck},
      {"ledger-integrity", LedgerIntegrity},
      {"privacy", PrivacyBoundary},
      {"timing", TimingShape},
      {"determinism", Determinism},
  };
  return kAll;
}

}  // namespace
}  // namespace tfl

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::string only;
  bool list = false;
  app.add_option("--only", only, "Run a single criterion");
  app.add_option("--artifacts", tfl::g_artifacts, "Directory for produced CSVs");
  app.add_flag("--list", list, "Print criterion names");
  CLI11_PARSE(app, argc, argv);

  int failures = 0;
  bool matched = false;
  for (const tfl::Criterion& c : tfl::Criteria()) {
    if (list) {
      std::printf("%s\n", c.name.c_str());
      continue;
    }
    if (!only.empty() && c.name != only) continue;
    matched = true;
    absl::StatusOr<tfl::Outcome> r = c.run();
    const bool pass = r.ok() && r->pass;
    std::printf("%s %s: %s\n", pass ? "PASS" : "FAIL", c.name.c_str(),
                r.ok() ? r->detail.c_str() : r.status().ToString().c_str());
    std::fflush(stdout);
    if (!pass) ++failures;
  }
  if (list) return 0;
  if (!matched) {
    std::fprintf(stderr, "unknown criterion: %s\n", only.c_str());
    return 2;
  }
  return failures == 0 ? 0 : 1;
}
