#include "tfl/orchestrator.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include "absl/strings/numbers.h"
#include "absl/strings/str_cat.h"
#include "absl/strings/str_format.h"
#include "absl/strings/str_join.h"
#include "absl/strings/str_split.h"
#include "absl/strings/strip.h"
#include "tfl/status_macros.h"

namespace tfl {
namespace {

constexpr uint64_t kDataTag = 0x44415441;       // "DATA"
constexpr uint64_t kKeysTag = 0x4b455953;       // "KEYS"
constexpr uint64_t kInitTag = 0x494e4954;       // "INIT"
constexpr uint64_t kMatrixTag = 0x504d4154;     // "PMAT"
constexpr uint64_t kMaliciousTag = 0x4d414c49;  // "MALI"
constexpr uint64_t kSelectTag = 0x53454c45;     // "SELE"
constexpr uint64_t kTrainTag = 0x5452414e;      // "TRAN"
constexpr uint64_t kPerturbTag = 0x50455254;    // "PERT"
constexpr uint64_t kEncryptTag = 0x454e4352;    // "ENCR"
constexpr uint64_t kAssignTag = 0x41535347;     // "ASSG"
constexpr uint64_t kElectTag = 0x41474752;      // "AGGR"
constexpr uint64_t kShuffleTag = 0x53485546;    // "SHUF"

constexpr absl::string_view kModelMagic = "tfl-model v1";
constexpr absl::string_view kManifestMagic = "tfl-node v1";
constexpr absl::string_view kDetectionMagic = "tfl-detection v1";

using Clock = std::chrono::steady_clock;

double Seconds(Clock::time_point since) {
  return std::chrono::duration<double>(Clock::now() - since).count();
}

void AddUnit(PhaseTime& phase, double seconds) {
  phase.sum += seconds;
  phase.critical = std::max(phase.critical, seconds);
}

std::string NodeActor(NodeId n) { return absl::StrCat("node-", n); }
std::string ClientActor(ClientId c) { return absl::StrCat("client-", c); }

// ---------------------------------------------------------------------------
// Config fields.

struct Field {
  std::string name;
  std::function<absl::Status(SimConfig&, absl::string_view)> set;
  std::function<std::string(const SimConfig&)> get;
};

template <typename T>
Field IntField(std::string name, T SimConfig::*member) {
  return {name,
          [name, member](SimConfig& c, absl::string_view v) -> absl::Status {
            int64_t x;
            if (!absl::SimpleAtoi(v, &x)) {
              return absl::InvalidArgumentError(
                  absl::StrCat(name, ": not an integer: ", v));
            }
            c.*member = static_cast<T>(x);
            return absl::OkStatus();
          },
          [member](const SimConfig& c) { return absl::StrCat(c.*member); }};
}

Field DoubleField(std::string name, double SimConfig::*member) {
  return {name,
          [name, member](SimConfig& c, absl::string_view v) -> absl::Status {
            double x;
            if (!absl::SimpleAtod(v, &x)) {
              return absl::InvalidArgumentError(
                  absl::StrCat(name, ": not a number: ", v));
            }
            c.*member = x;
            return absl::OkStatus();
          },
          [member](const SimConfig& c) {
            return absl::StrFormat("%.17g", c.*member);
          }};
}

Field StringField(std::string name, std::string SimConfig::*member) {
  return {name,
          [member](SimConfig& c, absl::string_view v) -> absl::Status {
            c.*member = std::string(v);
            return absl::OkStatus();
          },
          [member](const SimConfig& c) { return c.*member; }};
}

const std::vector<Field>& Fields() {
  static const std::vector<Field>* fields = new std::vector<Field>{
      IntField("client-count", &SimConfig::client_count),
      IntField("samples-per-client", &SimConfig::samples_per_client),
      IntField("selected-per-epoch", &SimConfig::selected_per_epoch),
      IntField("local-epochs", &SimConfig::local_epochs),
      IntField("preproc-nodes", &SimConfig::preproc_nodes),
      IntField("connections-per-node", &SimConfig::connections_per_node),
      DoubleField("perturbation-ratio", &SimConfig::perturbation_ratio),
      IntField("perturbation-steps", &SimConfig::perturbation_steps),
      IntField("projection-dim", &SimConfig::projection_dim),
      IntField("key-bits", &SimConfig::key_bits),
      IntField("global-epochs", &SimConfig::global_epochs),
      IntField("seed", &SimConfig::seed),
      IntField("data-seed", &SimConfig::data_seed),
      IntField("projection-seed", &SimConfig::projection_seed),
      {"aggregator-policy",
       [](SimConfig& c, absl::string_view v) -> absl::Status {
         TFL_ASSIGN_OR_RETURN(c.aggregator_policy, ParseSelectionPolicy(v));
         return absl::OkStatus();
       },
       [](const SimConfig& c) {
         return std::string(SelectionPolicyName(c.aggregator_policy));
       }},
      StringField("detector-params-path", &SimConfig::detector_params_path),
      {"crypto-backend",
       [](SimConfig& c, absl::string_view v) -> absl::Status {
         if (v == "paillier") {
           c.crypto_backend = Backend::kPaillier;
         } else if (v == "shadow") {
           c.crypto_backend = Backend::kPlaintextShadow;
         } else {
           return absl::InvalidArgumentError(
               absl::StrCat("crypto-backend must be paillier or shadow, got ", v));
         }
         return absl::OkStatus();
       },
       [](const SimConfig& c) {
         return std::string(c.crypto_backend == Backend::kPaillier ? "paillier"
                                                                   : "shadow");
       }},
      IntField("aggregator-candidates", &SimConfig::aggregator_candidates),
      IntField("test-samples", &SimConfig::test_samples),
      DoubleField("class-separation", &SimConfig::class_separation),
      DoubleField("learning-rate", &SimConfig::learning_rate),
      IntField("batch-size", &SimConfig::batch_size),
      StringField("key-path", &SimConfig::key_path),
      StringField("idx-train-images", &SimConfig::idx_train_images),
      StringField("idx-train-labels", &SimConfig::idx_train_labels),
      StringField("idx-test-images", &SimConfig::idx_test_images),
      StringField("idx-test-labels", &SimConfig::idx_test_labels),
  };
  return *fields;
}

// ---------------------------------------------------------------------------
// Blob formats private to the epoch protocol.

struct NodeManifest {
  int epoch = 0;
  NodeId node = 0;
  double weight_sum = 0.0;
  int client_count = 0;
  std::string semi_key;
  std::vector<std::pair<ClientId, std::string>> projection_keys;
};

std::string SerializeManifest(const NodeManifest& m) {
  std::string out = absl::StrCat(kManifestMagic, "\nepoch ", m.epoch, "\nnode ",
                                 m.node, "\nweight-sum ",
                                 absl::StrFormat("%.17g", m.weight_sum),
                                 "\nclient-count ", m.client_count, "\nsemi ",
                                 m.semi_key, "\n");
  for (const auto& [c, key] : m.projection_keys) {
    absl::StrAppend(&out, "proj ", c, " ", key, "\n");
  }
  return out;
}

absl::Status Malformed(absl::string_view what, absl::string_view line) {
  return absl::DataLossError(absl::StrCat("malformed ", what, " line: ", line));
}

absl::StatusOr<NodeManifest> ParseManifest(absl::string_view blob) {
  std::vector<absl::string_view> lines = absl::StrSplit(blob, '\n');
  if (lines.size() < 7 || lines[0] != kManifestMagic || !lines.back().empty()) {
    return absl::DataLossError("not a node manifest");
  }
  lines.pop_back();
  NodeManifest m;
  auto value = [&](size_t i, absl::string_view key) -> absl::StatusOr<absl::string_view> {
    absl::string_view line = lines[i];
    if (!absl::ConsumePrefix(&line, key) || !absl::ConsumePrefix(&line, " ")) {
      return Malformed("manifest", lines[i]);
    }
    return line;
  };
  TFL_ASSIGN_OR_RETURN(absl::string_view epoch, value(1, "epoch"));
  TFL_ASSIGN_OR_RETURN(absl::string_view node, value(2, "node"));
  TFL_ASSIGN_OR_RETURN(absl::string_view wsum, value(3, "weight-sum"));
  TFL_ASSIGN_OR_RETURN(absl::string_view count, value(4, "client-count"));
  TFL_ASSIGN_OR_RETURN(absl::string_view semi, value(5, "semi"));
  if (!absl::SimpleAtoi(epoch, &m.epoch) || !absl::SimpleAtoi(node, &m.node) ||
      !absl::SimpleAtod(wsum, &m.weight_sum) ||
      !absl::SimpleAtoi(count, &m.client_count) || !IsHashHex(semi)) {
    return absl::DataLossError("malformed node manifest header");
  }
  m.semi_key = std::string(semi);
  for (size_t i = 6; i < lines.size(); ++i) {
    std::vector<absl::string_view> parts = absl::StrSplit(lines[i], ' ');
    ClientId c;
    if (parts.size() != 3 || parts[0] != "proj" || !absl::SimpleAtoi(parts[1], &c) ||
        !IsHashHex(parts[2])) {
      return Malformed("manifest", lines[i]);
    }
    m.projection_keys.emplace_back(c, std::string(parts[2]));
  }
  if (static_cast<int>(m.projection_keys.size()) != m.client_count) {
    return absl::DataLossError("manifest client count mismatch");
  }
  return m;
}

struct DetectionRecord {
  int epoch = 0;
  std::set<ClientId> flagged;
  std::map<ClientId, double> known;
  std::vector<ClientId> next;
  std::map<NodeId, double> accuracy;
};

std::string SerializeDetection(const DetectionRecord& d) {
  std::string out = absl::StrCat(kDetectionMagic, "\nepoch ", d.epoch, "\nflagged");
  for (ClientId c : d.flagged) absl::StrAppend(&out, " ", c);
  absl::StrAppend(&out, "\nnext");
  for (ClientId c : d.next) absl::StrAppend(&out, " ", c);
  absl::StrAppend(&out, "\n");
  for (const auto& [n, a] : d.accuracy) {
    absl::StrAppendFormat(&out, "accuracy %d %.17g\n", n, a);
  }
  for (const auto& [c, p] : d.known) {
    absl::StrAppendFormat(&out, "p %d %.17g\n", c, p);
  }
  return out;
}

absl::StatusOr<std::vector<int>> ParseIdList(absl::string_view line,
                                             absl::string_view key) {
  std::vector<absl::string_view> parts = absl::StrSplit(line, ' ');
  if (parts.empty() || parts[0] != key) return Malformed("detection", line);
  std::vector<int> out;
  for (size_t i = 1; i < parts.size(); ++i) {
    int v;
    if (!absl::SimpleAtoi(parts[i], &v)) return Malformed("detection", line);
    out.push_back(v);
  }
  return out;
}

absl::StatusOr<DetectionRecord> ParseDetection(absl::string_view blob) {
  std::vector<absl::string_view> lines = absl::StrSplit(blob, '\n');
  if (lines.size() < 5 || lines[0] != kDetectionMagic || !lines.back().empty()) {
    return absl::DataLossError("not a detection record");
  }
  lines.pop_back();
  DetectionRecord d;
  TFL_ASSIGN_OR_RETURN(std::vector<int> epoch, ParseIdList(lines[1], "epoch"));
  if (epoch.size() != 1) return Malformed("detection", lines[1]);
  d.epoch = epoch[0];
  TFL_ASSIGN_OR_RETURN(std::vector<int> flagged, ParseIdList(lines[2], "flagged"));
  d.flagged.insert(flagged.begin(), flagged.end());
  TFL_ASSIGN_OR_RETURN(d.next, ParseIdList(lines[3], "next"));
  for (size_t i = 4; i < lines.size(); ++i) {
    std::vector<absl::string_view> parts = absl::StrSplit(lines[i], ' ');
    int id;
    double v;
    if (parts.size() != 3 || !absl::SimpleAtoi(parts[1], &id) ||
        !absl::SimpleAtod(parts[2], &v)) {
      return Malformed("detection", lines[i]);
    }
    if (parts[0] == "accuracy") {
      d.accuracy[id] = v;
    } else if (parts[0] == "p") {
      d.known[id] = v;
    } else {
      return Malformed("detection", lines[i]);
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Epoch helpers.

absl::StatusOr<Block> Append(SimState& state, std::vector<Transaction> txs) {
  for (Transaction& tx : txs) tx.timestamp = state.ledger.NextTimestamp();
  return state.ledger.AppendBlock(std::move(txs), state.store);
}

Transaction MakeTx(TxType type, int epoch, std::string actor,
                   std::vector<std::string> keys, bool granted = true) {
  Transaction tx;
  tx.type = type;
  tx.epoch = epoch;
  tx.actor = std::move(actor);
  tx.blob_keys = std::move(keys);
  tx.granted = granted;
  return tx;
}

// Aggregator-side view of one epoch, rebuilt from the blob store.
struct FetchedEpoch {
  std::vector<PreprocessedNode> nodes;
  NodeAssignment assignment;
};

absl::StatusOr<FetchedEpoch> FetchEpoch(const DdseStore& store,
                                        const std::vector<std::string>& manifest_keys,
                                        int epoch) {
  FetchedEpoch out;
  out.assignment.epoch = epoch;
  for (const std::string& key : manifest_keys) {
    TFL_ASSIGN_OR_RETURN(std::string blob, store.Get(key));
    TFL_ASSIGN_OR_RETURN(NodeManifest m, ParseManifest(blob));
    if (m.epoch != epoch) {
      return absl::DataLossError("manifest epoch does not match its transaction");
    }
    PreprocessedNode node;
    node.node = m.node;
    node.weight_sum = m.weight_sum;
    node.client_count = m.client_count;
    TFL_ASSIGN_OR_RETURN(std::string semi, store.Get(m.semi_key));
    TFL_ASSIGN_OR_RETURN(node.semi_aggregate, ParseEncryptedModel(semi));
    for (const auto& [c, pkey] : m.projection_keys) {
      TFL_ASSIGN_OR_RETURN(std::string pblob, store.Get(pkey));
      TFL_ASSIGN_OR_RETURN(EncryptedVector v, ParseEncryptedVector(pblob));
      node.projections.emplace_back(c, std::move(v));
      out.assignment.edges.emplace_back(m.node, c);
    }
    out.nodes.push_back(std::move(node));
  }
  std::sort(out.assignment.edges.begin(), out.assignment.edges.end());
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

absl::Status ValidateConfig(const SimConfig& c) {
  auto fail = [](absl::string_view msg) { return absl::InvalidArgumentError(msg); };
  if (c.client_count < 1) return fail("client-count must be positive");
  if (c.samples_per_client < 1) return fail("samples-per-client must be positive");
  if (c.selected_per_epoch < 1 || c.selected_per_epoch > c.client_count) {
    return fail("selected-per-epoch must be in [1, client-count]");
  }
  if (c.local_epochs < 0) return fail("local-epochs must be non-negative");
  if (c.preproc_nodes < 1) return fail("preproc-nodes must be positive");
  if (c.connections_per_node < 1 || c.connections_per_node > c.selected_per_epoch) {
    return fail("connections-per-node must be in [1, selected-per-epoch]");
  }
  if (!(c.perturbation_ratio >= 0.0 && c.perturbation_ratio <= 1.0)) {
    return fail("perturbation-ratio must be in [0, 1]");
  }
  if (c.perturbation_steps < 0) return fail("perturbation-steps must be non-negative");
  if (c.projection_dim < 1) return fail("projection-dim must be positive");
  if (c.key_bits < 64) return fail("key-bits must be at least 64");
  if (c.global_epochs < 0) return fail("global-epochs must be non-negative");
  if (c.aggregator_candidates < 1) return fail("aggregator-candidates must be positive");
  if (c.test_samples < 1) return fail("test-samples must be positive");
  if (!(c.learning_rate > 0.0)) return fail("learning-rate must be positive");
  if (c.batch_size < 1) return fail("batch-size must be positive");
  const bool any_idx = !c.idx_train_images.empty() || !c.idx_train_labels.empty() ||
                       !c.idx_test_images.empty() || !c.idx_test_labels.empty();
  const bool all_idx = !c.idx_train_images.empty() && !c.idx_train_labels.empty() &&
                       !c.idx_test_images.empty() && !c.idx_test_labels.empty();
  if (any_idx && !all_idx) return fail("all four idx-* paths are required together");
  return absl::OkStatus();
}

absl::Status SetConfigField(SimConfig& config, absl::string_view key,
                            absl::string_view value) {
  for (const Field& f : Fields()) {
    if (f.name == key) return f.set(config, value);
  }
  return absl::InvalidArgumentError(absl::StrCat("unknown config key: ", key));
}

std::vector<std::string> ConfigFieldNames() {
  std::vector<std::string> out;
  for (const Field& f : Fields()) out.push_back(f.name);
  return out;
}

absl::Status ApplyConfigText(SimConfig& config, absl::string_view text) {
  int line_no = 0;
  for (absl::string_view line : absl::StrSplit(text, '\n')) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != absl::string_view::npos) line = line.substr(0, hash);
    line = absl::StripAsciiWhitespace(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == absl::string_view::npos) {
      return absl::InvalidArgumentError(
          absl::StrCat("config line ", line_no, ": expected key=value"));
    }
    TFL_RETURN_IF_ERROR(
        SetConfigField(config, absl::StripAsciiWhitespace(line.substr(0, eq)),
                       absl::StripAsciiWhitespace(line.substr(eq + 1))));
  }
  return absl::OkStatus();
}

absl::StatusOr<SimConfig> ParseConfig(absl::string_view text) {
  SimConfig config;
  TFL_RETURN_IF_ERROR(ApplyConfigText(config, text));
  TFL_RETURN_IF_ERROR(ValidateConfig(config));
  return config;
}

std::string SerializeConfig(const SimConfig& config) {
  std::string out;
  for (const Field& f : Fields()) {
    absl::StrAppend(&out, f.name, "=", f.get(config), "\n");
  }
  return out;
}

absl::StatusOr<SimConfig> LoadConfig(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return absl::NotFoundError(absl::StrCat("cannot read ", path));
  std::stringstream ss;
  ss << in.rdbuf();
  return ParseConfig(ss.str());
}

double TimingRecord::TotalSum() const {
  return train.sum + encrypt.sum + project.sum + semi_aggregate.sum + decrypt.sum +
         analyze.sum;
}

double TimingRecord::TotalCritical() const {
  return train.critical + encrypt.critical + project.critical +
         semi_aggregate.critical + decrypt.critical + analyze.critical;
}

absl::StatusOr<SimEnvironment> BuildEnvironment(const SimConfig& config) {
  TFL_RETURN_IF_ERROR(ValidateConfig(config));
  SimEnvironment env;
  env.config = config;
  const uint64_t seed = config.seed;
  if (config.idx_train_images.empty()) {
    SyntheticSpec spec;
    spec.client_count = config.client_count;
    spec.samples_per_client = config.samples_per_client;
    spec.test_samples = config.test_samples;
    spec.class_separation = config.class_separation;
    spec.seed = DeriveSeed(config.data_seed, {kDataTag});
    SyntheticData data = GenerateSynthetic(spec);
    env.shards = std::move(data.shards);
    env.test = std::move(data.test);
    env.shapes = {{spec.dim, 32}, {32, spec.class_count}};
  } else {
    TFL_ASSIGN_OR_RETURN(Dataset train,
                         LoadIdx(config.idx_train_images, config.idx_train_labels));
    TFL_ASSIGN_OR_RETURN(Dataset test,
                         LoadIdx(config.idx_test_images, config.idx_test_labels));
    const size_t need =
        static_cast<size_t>(config.client_count) * config.samples_per_client;
    if (train.size() < need) {
      return absl::InvalidArgumentError(absl::StrCat(
          "IDX training set has ", train.size(), " samples, need ", need));
    }
    std::vector<size_t> order(train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(DeriveSeed(config.data_seed, {kShuffleTag}));
    Shuffle(order, rng);
    for (int c = 0; c < config.client_count; ++c) {
      Dataset shard{train.dim, train.class_count, {}, {}};
      for (int s = 0; s < config.samples_per_client; ++s) {
        const size_t row = order[static_cast<size_t>(c) * config.samples_per_client + s];
        auto r = train.row(row);
        shard.features.insert(shard.features.end(), r.begin(), r.end());
        shard.labels.push_back(train.labels[row]);
      }
      env.shards.push_back(std::move(shard));
    }
    const size_t keep = std::min<size_t>(test.size(), config.test_samples);
    test.features.resize(keep * test.dim);
    test.labels.resize(keep);
    env.test = std::move(test);
    env.shapes = {{train.dim, 64}, {64, train.class_count}};
  }
  TFL_ASSIGN_OR_RETURN(env.initial_model,
                       InitModel(env.shapes, DeriveSeed(config.data_seed, {kInitTag})));

  std::vector<ClientId> ids(config.client_count);
  for (int c = 0; c < config.client_count; ++c) ids[c] = c;
  Rng mal_rng(DeriveSeed(seed, {kMaliciousTag}));
  Shuffle(ids, mal_rng);
  const int malicious_count =
      static_cast<int>(std::lround(config.perturbation_ratio * config.client_count));
  env.malicious.insert(ids.begin(), ids.begin() + malicious_count);

  if (!config.key_path.empty()) {
    std::ifstream in(config.key_path, std::ios::binary);
    if (!in) return absl::NotFoundError(absl::StrCat("cannot read ", config.key_path));
    std::stringstream ss;
    ss << in.rdbuf();
    TFL_ASSIGN_OR_RETURN(env.keys, ParseKeyPair(ss.str()));
  } else {
    TFL_ASSIGN_OR_RETURN(env.keys,
                         GenerateKeyPair(config.key_bits, DeriveSeed(seed, {kKeysTag})));
  }
  if (config.crypto_backend == Backend::kPlaintextShadow) env.keys = AsShadow(env.keys);
  const FixedPointCodec codec = env.Codec();
  TFL_ASSIGN_OR_RETURN(
      env.projection,
      ProjectionMatrix::Generate(config.projection_dim,
                                 static_cast<int>(ModelParams::CountFor(env.shapes)),
                                 DeriveSeed(config.projection_seed, {kMatrixTag}), codec));
  for (int n = 0; n < config.preproc_nodes; ++n) env.nodes.push_back(n);
  for (int a = 0; a < config.aggregator_candidates; ++a) {
    env.candidates.push_back(absl::StrCat("agg-", a));
  }
  return env;
}

std::vector<ClientId> UndefendedSelection(const SimEnvironment& env, int epoch) {
  const SimConfig& cfg = env.config;
  std::vector<ClientId> benign, malicious;
  for (ClientId c = 0; c < cfg.client_count; ++c) {
    (env.malicious.contains(c) ? malicious : benign).push_back(c);
  }
  Rng rng(DeriveSeed(cfg.seed, {kSelectTag, static_cast<uint64_t>(epoch)}));
  Shuffle(benign, rng);
  Shuffle(malicious, rng);
  const int k = cfg.selected_per_epoch;
  int m = static_cast<int>(std::lround(cfg.perturbation_ratio * k));
  m = std::min(m, static_cast<int>(malicious.size()));
  int b = k - m;
  if (b > static_cast<int>(benign.size())) {
    b = static_cast<int>(benign.size());
    m = k - b;
  }
  std::vector<ClientId> out(benign.begin(), benign.begin() + b);
  out.insert(out.end(), malicious.begin(), malicious.begin() + m);
  std::sort(out.begin(), out.end());
  return out;
}

TrainConfig ClientTrainConfig(const SimEnvironment& env, int epoch, ClientId client) {
  TrainConfig tc;
  tc.learning_rate = env.config.learning_rate;
  tc.batch_size = env.config.batch_size;
  tc.local_epochs = env.config.local_epochs;
  tc.seed = DeriveSeed(env.config.seed, {kTrainTag, static_cast<uint64_t>(epoch),
                                         static_cast<uint64_t>(client)});
  return tc;
}

absl::StatusOr<NodeAssignment> EpochAssignment(const SimEnvironment& env, int epoch,
                                               std::span<const ClientId> clients) {
  return AssignClients(clients, env.nodes, env.config.connections_per_node,
                       DeriveSeed(env.config.seed, {kAssignTag}), epoch);
}

SimState InitialState(const SimEnvironment& env) {
  SimState state;
  state.global = env.initial_model;
  state.selected = UndefendedSelection(env, 0);
  return state;
}

absl::StatusOr<EpochResult> RunEpoch(const SimEnvironment& env,
                                     const Detectors& detectors, SimState& state) {
  const SimConfig& cfg = env.config;
  const int t = state.epoch;
  const uint64_t seed = cfg.seed;
  const uint64_t ut = static_cast<uint64_t>(t);
  const FixedPointCodec codec = env.Codec();
  const PaillierPublicKey& pk = env.keys.pk;
  EpochResult result;
  TimingRecord& timing = result.timing;

  // Local training (plus perturbation) and encryption.
  const std::vector<ClientId>& clients = state.selected;
  std::map<ClientId, EncryptedModel> encrypted;
  std::vector<double> abnormal;
  for (ClientId c : clients) {
    TrainConfig tc = ClientTrainConfig(env, t, c);
    const bool is_malicious = env.malicious.contains(c);
    auto start = Clock::now();
    TFL_ASSIGN_OR_RETURN(ModelParams local, LocalTrain(state.global, env.shards[c], tc));
    if (is_malicious && cfg.perturbation_steps > 0) {
      tc.seed = DeriveSeed(seed, {kPerturbTag, ut, static_cast<uint64_t>(c)});
      TFL_ASSIGN_OR_RETURN(local,
                           Perturb(local, env.shards[c], cfg.perturbation_steps, tc));
    }
    AddUnit(timing.train, Seconds(start));
    if (is_malicious) {
      TFL_ASSIGN_OR_RETURN(double acc, Evaluate(local, env.test));
      abnormal.push_back(acc);
    }
    Rng rng(DeriveSeed(seed, {kEncryptTag, ut, static_cast<uint64_t>(c)}));
    start = Clock::now();
    TFL_ASSIGN_OR_RETURN(EncryptedModel em, EncryptModel(pk, local, codec, c, rng));
    AddUnit(timing.encrypt, Seconds(start));
    encrypted.emplace(c, std::move(em));
  }

  // Upload to the assigned pre-processing nodes.
  TFL_ASSIGN_OR_RETURN(NodeAssignment assignment, EpochAssignment(env, t, clients));

  // Steps 3-4: projection and semi-aggregation per node, results to the DDSE.
  std::vector<Transaction> uploads;
  std::vector<std::string> manifest_keys;
  std::vector<std::string> fetched_keys;
  for (NodeId n : env.nodes) {
    const std::vector<ClientId> members = assignment.ClientsOf(n);
    if (members.empty()) continue;
    std::vector<const EncryptedModel*> models;
    for (ClientId c : members) models.push_back(&encrypted.at(c));
    const std::vector<double> weights(members.size(), 1.0);
    NodeTiming nt;
    TFL_ASSIGN_OR_RETURN(PreprocessedNode pre,
                         PreprocessNode(pk, n, models, weights, env.projection,
                                        codec, &nt));
    AddUnit(timing.project, nt.project_seconds);
    AddUnit(timing.semi_aggregate, nt.semi_aggregate_seconds);

    NodeManifest m;
    m.epoch = t;
    m.node = n;
    m.weight_sum = pre.weight_sum;
    m.client_count = pre.client_count;
    m.semi_key = state.store.Put(SerializeEncryptedModel(pre.semi_aggregate));
    std::vector<std::string> keys;
    for (const auto& [c, v] : pre.projections) {
      m.projection_keys.emplace_back(c, state.store.Put(SerializeEncryptedVector(v)));
    }
    const std::string mkey = state.store.Put(SerializeManifest(m));
    keys.push_back(mkey);
    keys.push_back(m.semi_key);
    for (const auto& [c, k] : m.projection_keys) keys.push_back(k);
    AccessRequest req{NodeActor(n), Role::kPreprocNode, Action::kUploadPreprocessed, t, ""};
    if (!state.access.Check(req)) {
      return absl::PermissionDeniedError(absl::StrCat(req.actor, " may not upload"));
    }
    fetched_keys.insert(fetched_keys.end(), keys.begin(), keys.end());
    uploads.push_back(MakeTx(TxType::kUploadPreprocessed, t, NodeActor(n), keys));
    manifest_keys.push_back(mkey);
  }
  TFL_RETURN_IF_ERROR(Append(state, std::move(uploads)).status());

  // Aggregator election by contract.
  TFL_ASSIGN_OR_RETURN(std::string aggregator,
                       SelectAggregator(env.candidates, t, cfg.aggregator_policy,
                                        state.ledger.TipHash(),
                                        DeriveSeed(seed, {kElectTag})));
  state.access.RecordSelection(t, aggregator);
  TFL_RETURN_IF_ERROR(
      Append(state, {MakeTx(TxType::kAggregatorSelected, t, aggregator, {})}).status());

  // Access-checked fetch of pre-processed blobs and history.
  std::vector<std::string> history_keys;
  for (const Block& b : state.ledger.blocks()) {
    for (const Transaction& tx : b.txs) {
      if (tx.type == TxType::kUploadPreprocessed && tx.epoch < t &&
          tx.epoch >= t - kHistoryWindow && !tx.blob_keys.empty()) {
        history_keys.push_back(tx.blob_keys.front());
      }
    }
  }
  const bool read_ok = state.access.Check(
      {aggregator, Role::kSelectedAggregator, Action::kReadPreprocessed, t, ""});
  const bool history_ok = state.access.Check(
      {aggregator, Role::kSelectedAggregator, Action::kReadHistory, t, ""});
  TFL_RETURN_IF_ERROR(
      Append(state, {MakeTx(TxType::kDownloadGrant, t, aggregator, fetched_keys, read_ok),
                     MakeTx(TxType::kDownloadGrant, t, aggregator, history_keys,
                            history_ok)})
          .status());
  if (!read_ok || !history_ok) {
    return absl::PermissionDeniedError(
        absl::StrCat(aggregator, " was denied the epoch's inputs"));
  }
  TFL_ASSIGN_OR_RETURN(FetchedEpoch fetched, FetchEpoch(state.store, manifest_keys, t));

  // Decryption, evaluation, detection and global aggregation.
  EpochAggregationInput input;
  input.epoch = t;
  input.nodes = std::move(fetched.nodes);
  input.assignment = std::move(fetched.assignment);
  input.history = state.history;
  input.prior_probabilities = state.known_probabilities;
  for (ClientId c = 0; c < cfg.client_count; ++c) input.pool.push_back(c);
  input.next_count = detectors.defense != nullptr ? cfg.selected_per_epoch : 0;
  const Aggregator agg(env.keys, codec, env.shapes, &env.test, detectors.defense);
  AggregatorTiming at;
  TFL_ASSIGN_OR_RETURN(EpochAggregationOutput out, agg.Process(input, &at));
  timing.decrypt = {at.decrypt_seconds, at.decrypt_seconds};
  timing.analyze = {at.analyze_seconds, at.analyze_seconds};

  // Outputs to the DDSE.
  DetectionRecord record;
  record.epoch = t;
  record.flagged = out.flagged;
  record.known = state.known_probabilities;
  for (const auto& [c, p] : out.probabilities) record.known[c] = p;
  record.next = detectors.defense != nullptr ? out.next_clients
                                             : UndefendedSelection(env, t + 1);
  record.accuracy = out.node_accuracy;
  const std::string global_key = state.store.Put(SerializeModel(out.global_model));
  const std::string detection_key = state.store.Put(SerializeDetection(record));
  if (!state.access.Check(
          {aggregator, Role::kSelectedAggregator, Action::kUploadGlobal, t, ""})) {
    return absl::PermissionDeniedError(absl::StrCat(aggregator, " may not upload"));
  }
  TFL_RETURN_IF_ERROR(Append(state, {MakeTx(TxType::kUploadGlobal, t, aggregator,
                                             {global_key, detection_key})})
                          .status());

  // Steps 9-10: notify C_{t+1}; each notified client fetches w_{t+1}.
  std::vector<Transaction> notices;
  for (ClientId c : record.next) {
    const bool ok =
        state.access.Check({ClientActor(c), Role::kClient, Action::kReadGlobal, t, ""});
    notices.push_back(
        MakeTx(TxType::kClientNotify, t, ClientActor(c), {global_key}, ok));
  }
  TFL_RETURN_IF_ERROR(Append(state, std::move(notices)).status());
  TFL_ASSIGN_OR_RETURN(std::string global_blob, state.store.Get(global_key));
  TFL_ASSIGN_OR_RETURN(ModelParams next_global, ParseModel(global_blob));

  // Metrics (simulator-side ground truth).
  EpochMetrics& metrics = result.metrics;
  metrics.epoch = t;
  TFL_ASSIGN_OR_RETURN(metrics.global_accuracy, Evaluate(next_global, env.test));
  std::set<ClientId> truth;
  for (ClientId c : clients) {
    if (env.malicious.contains(c)) truth.insert(c);
  }
  if (detectors.defense != nullptr) {
    metrics.detection_f1 = F1Score(out.flagged, truth);
  } else if (detectors.observer != nullptr) {
    TFL_ASSIGN_OR_RETURN(DetectionResult d, Detect(*detectors.observer, out.graph));
    metrics.detection_f1 = F1Score(d.flagged, truth);
  }
  if (detectors.baseline != nullptr) {
    TFL_ASSIGN_OR_RETURN(DetectionResult d, Detect(*detectors.baseline, out.graph));
    metrics.baseline_f1 = F1Score(d.flagged, truth);
  }
  if (!abnormal.empty()) {
    double s = 0.0;
    for (double a : abnormal) s += a;
    metrics.abnormal_model_accuracy = s / abnormal.size();
  }
  metrics.flagged_count = static_cast<int>(out.flagged.size());
  metrics.selected_clients = clients;

  result.graph = std::move(out.graph);
  result.graph.labels.clear();
  for (ClientId c : result.graph.client_ids) {
    result.graph.labels.push_back(truth.contains(c) ? 1 : 0);
  }
  result.decrypted = std::move(out.decrypted);
  result.warnings = std::move(out.warnings);

  for (ClientId c : clients) state.history[c].insert(t);
  state.known_probabilities = std::move(record.known);
  state.global = std::move(next_global);
  state.selected = std::move(record.next);
  state.global_keys.push_back(global_key);
  state.epoch = t + 1;
  return result;
}

absl::StatusOr<SimulationResult> RunSimulation(const SimConfig& config,
                                               const Detectors& detectors) {
  TFL_ASSIGN_OR_RETURN(SimEnvironment env, BuildEnvironment(config));
  SimulationResult out;
  out.state = InitialState(env);
  for (int e = 0; e < config.global_epochs; ++e) {
    TFL_ASSIGN_OR_RETURN(EpochResult r, RunEpoch(env, detectors, out.state));
    out.metrics.push_back(std::move(r.metrics));
    out.timings.push_back(r.timing);
    out.graphs.push_back(std::move(r.graph));
  }
  return out;
}

absl::StatusOr<std::vector<BipartiteGraph>> GenerateDetectorCorpus(
    const SimConfig& config, const std::vector<uint64_t>& seeds,
    std::vector<double>* abnormal_accuracies) {
  if (seeds.empty()) return absl::InvalidArgumentError("corpus needs at least one run");
  std::vector<BipartiteGraph> corpus;
  for (uint64_t s : seeds) {
    SimConfig c = config;
    c.seed = s;
    TFL_ASSIGN_OR_RETURN(SimulationResult r, RunSimulation(c, {}));
    for (auto& g : r.graphs) corpus.push_back(std::move(g));
    if (abnormal_accuracies != nullptr) {
      for (const EpochMetrics& m : r.metrics) {
        if (m.abnormal_model_accuracy) {
          abnormal_accuracies->push_back(*m.abnormal_model_accuracy);
        }
      }
    }
  }
  return corpus;
}

absl::StatusOr<std::vector<std::string>> ReplayGlobalBlobs(const SimEnvironment& env,
                                                           const Detector* defense,
                                                           const Ledger& ledger,
                                                           const DdseStore& store) {
  if (auto bad = VerifyChain(ledger)) {
    return absl::DataLossError(absl::StrCat("ledger fails verification at block ", *bad));
  }
  std::map<int64_t, std::vector<std::string>> manifests;
  std::map<int64_t, std::string> detection_keys;
  for (const Block& b : ledger.blocks()) {
    for (const Transaction& tx : b.txs) {
      if (tx.type == TxType::kUploadPreprocessed && !tx.blob_keys.empty()) {
        manifests[tx.epoch].push_back(tx.blob_keys.front());
      } else if (tx.type == TxType::kUploadGlobal && tx.blob_keys.size() == 2) {
        detection_keys[tx.epoch] = tx.blob_keys[1];
      }
    }
  }
  const FixedPointCodec codec = env.Codec();
  const Aggregator agg(env.keys, codec, env.shapes, &env.test, defense);
  HistoryRecords history;
  std::map<ClientId, double> known;
  std::vector<std::string> blobs;
  for (const auto& [epoch, keys] : manifests) {
    const int t = static_cast<int>(epoch);
    if (t != static_cast<int>(blobs.size())) {
      return absl::DataLossError("ledger epochs are not contiguous");
    }
    TFL_ASSIGN_OR_RETURN(FetchedEpoch fetched, FetchEpoch(store, keys, t));
    EpochAggregationInput input;
    input.epoch = t;
    input.nodes = std::move(fetched.nodes);
    input.assignment = fetched.assignment;
    input.history = history;
    input.prior_probabilities = known;
    for (ClientId c = 0; c < env.config.client_count; ++c) input.pool.push_back(c);
    input.next_count = defense != nullptr ? env.config.selected_per_epoch : 0;
    TFL_ASSIGN_OR_RETURN(EpochAggregationOutput out, agg.Process(input));
    blobs.push_back(SerializeModel(out.global_model));
    for (const auto& [n, c] : fetched.assignment.edges) history[c].insert(t);
    auto dk = detection_keys.find(epoch);
    if (dk == detection_keys.end()) {
      return absl::DataLossError(absl::StrCat("epoch ", t, " has no UploadGlobal"));
    }
    TFL_ASSIGN_OR_RETURN(std::string dblob, store.Get(dk->second));
    TFL_ASSIGN_OR_RETURN(DetectionRecord d, ParseDetection(dblob));
    known = std::move(d.known);
  }
  return blobs;
}

std::string SerializeModel(const ModelParams& model) {
  std::string out = absl::StrCat(kModelMagic, "\nshapes");
  for (const LayerShape& s : model.shapes) absl::StrAppend(&out, " ", s.in, "x", s.out);
  absl::StrAppend(&out, "\ncount ", model.weights.size(), "\n");
  for (double w : model.weights) absl::StrAppendFormat(&out, "%.17g\n", w);
  return out;
}

absl::StatusOr<ModelParams> ParseModel(absl::string_view blob) {
  std::vector<absl::string_view> lines = absl::StrSplit(blob, '\n');
  if (lines.size() < 4 || lines[0] != kModelMagic || !lines.back().empty()) {
    return absl::DataLossError("not a model blob");
  }
  lines.pop_back();
  ModelParams m;
  std::vector<absl::string_view> shapes = absl::StrSplit(lines[1], ' ');
  if (shapes.empty() || shapes[0] != "shapes") return Malformed("model", lines[1]);
  for (size_t i = 1; i < shapes.size(); ++i) {
    std::vector<absl::string_view> dims = absl::StrSplit(shapes[i], 'x');
    LayerShape s;
    if (dims.size() != 2 || !absl::SimpleAtoi(dims[0], &s.in) ||
        !absl::SimpleAtoi(dims[1], &s.out) || s.in < 1 || s.out < 1) {
      return Malformed("model", lines[1]);
    }
    m.shapes.push_back(s);
  }
  size_t count;
  absl::string_view count_line = lines[2];
  if (!absl::ConsumePrefix(&count_line, "count ") ||
      !absl::SimpleAtoi(count_line, &count) || count != lines.size() - 3 ||
      count != ModelParams::CountFor(m.shapes)) {
    return Malformed("model", lines[2]);
  }
  m.weights.resize(count);
  for (size_t i = 0; i < count; ++i) {
    if (!absl::SimpleAtod(lines[3 + i], &m.weights[i]) || !std::isfinite(m.weights[i])) {
      return Malformed("model", lines[3 + i]);
    }
  }
  return m;
}

std::string MetricsCsv(const std::vector<EpochMetrics>& metrics) {
  auto opt = [](const std::optional<double>& v) {
    return v ? absl::StrFormat("%.6f", *v) : std::string();
  };
  std::string out =
      "epoch,global_accuracy,detection_f1,baseline_f1,abnormal_model_accuracy,"
      "flagged_count,selected_clients\n";
  for (const EpochMetrics& m : metrics) {
    absl::StrAppendFormat(&out, "%d,%.6f,%s,%s,%s,%d,%s\n", m.epoch,
                          m.global_accuracy, opt(m.detection_f1), opt(m.baseline_f1),
                          opt(m.abnormal_model_accuracy), m.flagged_count,
                          absl::StrJoin(m.selected_clients, " "));
  }
  return out;
}

}  // namespace tfl
