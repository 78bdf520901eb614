#include "tfl/orchestrator.h"

#include <algorithm>

#include "gtest/gtest.h"

namespace tfl {
namespace {

SimConfig SmallConfig() {
  SimConfig c;
  c.client_count = 16;
  c.samples_per_client = 120;
  c.selected_per_epoch = 8;
  c.local_epochs = 2;
  c.preproc_nodes = 4;
  c.connections_per_node = 3;
  c.test_samples = 300;
  c.global_epochs = 3;
  c.seed = 7;
  return c;
}

std::vector<TxType> CollapsedTypes(const Ledger& ledger) {
  std::vector<TxType> out;
  for (const Block& b : ledger.blocks()) {
    for (const Transaction& tx : b.txs) {
      if (out.empty() || out.back() != tx.type) out.push_back(tx.type);
    }
  }
  return out;
}

TEST(OrchestratorTest, OneEpochTransactionTrace) {
  SimConfig c;
  c.global_epochs = 1;
  auto r = RunSimulation(c, {});
  ASSERT_TRUE(r.ok()) << r.status();
  const Ledger& ledger = r->state.ledger;
  EXPECT_EQ(CollapsedTypes(ledger),
            (std::vector<TxType>{TxType::kUploadPreprocessed, TxType::kAggregatorSelected,
                                 TxType::kDownloadGrant, TxType::kUploadGlobal,
                                 TxType::kClientNotify}));
  std::map<TxType, int> counts;
  for (const Block& b : ledger.blocks()) {
    for (const Transaction& tx : b.txs) {
      ++counts[tx.type];
      EXPECT_TRUE(tx.granted);
      for (const std::string& k : tx.blob_keys) EXPECT_TRUE(r->state.store.Contains(k));
    }
  }
  EXPECT_EQ(counts[TxType::kUploadPreprocessed], 10);
  EXPECT_EQ(counts[TxType::kAggregatorSelected], 1);
  EXPECT_EQ(counts[TxType::kDownloadGrant], 2);
  EXPECT_EQ(counts[TxType::kUploadGlobal], 1);
  EXPECT_EQ(counts[TxType::kClientNotify], 20);
  EXPECT_FALSE(VerifyChain(ledger).has_value());
  EXPECT_FALSE(r->state.store.FindCorrupted().has_value());
}

TEST(OrchestratorTest, EveryStoredBlobIsReferencedByATransaction) {
  auto r = RunSimulation(SmallConfig(), {});
  ASSERT_TRUE(r.ok()) << r.status();
  std::set<std::string> referenced;
  for (const Block& b : r->state.ledger.blocks()) {
    for (const Transaction& tx : b.txs) {
      referenced.insert(tx.blob_keys.begin(), tx.blob_keys.end());
    }
  }
  for (const std::string& k : r->state.store.Keys()) EXPECT_TRUE(referenced.contains(k));
}

TEST(OrchestratorTest, EverySelectedClientIsAggregated) {
  auto r = RunSimulation(SmallConfig(), {});
  ASSERT_TRUE(r.ok()) << r.status();
  for (size_t e = 0; e < r->graphs.size(); ++e) {
    const BipartiteGraph& g = r->graphs[e];
    EXPECT_EQ(g.client_ids, r->metrics[e].selected_clients);
    std::vector<int> degree(g.client_count(), 0);
    for (const auto& [n, c] : g.edges) ++degree[c];
    for (int d : degree) EXPECT_GE(d, 1);
  }
}

TEST(OrchestratorTest, ZeroEpochsGiveEmptyOutput) {
  SimConfig c = SmallConfig();
  c.global_epochs = 0;
  auto r = RunSimulation(c, {});
  ASSERT_TRUE(r.ok());
  EXPECT_TRUE(r->metrics.empty());
  EXPECT_TRUE(r->timings.empty());
  EXPECT_EQ(r->state.ledger.size(), 0u);
}

TEST(OrchestratorTest, SameSeedsAreBitwiseIdentical) {
  auto a = RunSimulation(SmallConfig(), {});
  auto b = RunSimulation(SmallConfig(), {});
  ASSERT_TRUE(a.ok() && b.ok());
  EXPECT_EQ(a->state.ledger.Serialize(), b->state.ledger.Serialize());
  EXPECT_EQ(MetricsCsv(a->metrics), MetricsCsv(b->metrics));
  EXPECT_EQ(a->state.global.weights, b->state.global.weights);
  SimConfig other = SmallConfig();
  other.seed = 8;
  auto c = RunSimulation(other, {});
  ASSERT_TRUE(c.ok());
  EXPECT_NE(a->state.ledger.Serialize(), c->state.ledger.Serialize());
}

// Plaintext two-level FedAvg over the same selections and assignments, with
// the same fixed-point rounding as the encrypted path.
TEST(OrchestratorTest, NoAttackNoDefenseEqualsPlainFedAvg) {
  SimConfig c = SmallConfig();
  c.perturbation_ratio = 0.0;
  auto run = RunSimulation(c, {});
  ASSERT_TRUE(run.ok()) << run.status();
  SimEnvironment env = BuildEnvironment(c).value();
  const FixedPointCodec codec = env.Codec();
  const BigInt one = codec.EncodeSigned(1.0).value();
  ModelParams global = env.initial_model;
  std::vector<ClientId> selected = UndefendedSelection(env, 0);
  for (int t = 0; t < c.global_epochs; ++t) {
    ASSERT_EQ(selected, run->metrics[t].selected_clients);
    std::map<ClientId, ModelParams> local;
    for (ClientId cl : selected) {
      local[cl] = LocalTrain(global, env.shards[cl], ClientTrainConfig(env, t, cl)).value();
    }
    NodeAssignment a = EpochAssignment(env, t, selected).value();
    ModelParams next;
    next.shapes = global.shapes;
    next.weights.assign(global.size(), 0.0);
    double total = 0.0;
    for (NodeId n : env.nodes) {
      const std::vector<ClientId> members = a.ClientsOf(n);
      if (members.empty()) continue;
      for (size_t i = 0; i < global.size(); ++i) {
        BigInt sum = 0;
        for (ClientId cl : members) sum += codec.EncodeSigned(local[cl].weights[i]).value() * one;
        const double node_w =
            codec.Decode(codec.ToResidue(sum), 2 * kDefaultScaleBits) / members.size();
        next.weights[i] += static_cast<double>(members.size()) * node_w;
      }
      total += static_cast<double>(members.size());
    }
    for (double& w : next.weights) w /= total;
    global = std::move(next);
    EXPECT_EQ(Evaluate(global, env.test).value(), run->metrics[t].global_accuracy);
    selected = UndefendedSelection(env, t + 1);
  }
  EXPECT_EQ(global.weights, run->state.global.weights);
}

TEST(OrchestratorTest, CorpusFromOneBasicEpoch) {
  SimConfig c;
  c.global_epochs = 1;
  c.crypto_backend = Backend::kPlaintextShadow;
  auto corpus = GenerateDetectorCorpus(c, {3});
  ASSERT_TRUE(corpus.ok()) << corpus.status();
  ASSERT_EQ(corpus->size(), 1u);
  const BipartiteGraph& g = corpus->front();
  EXPECT_EQ(g.client_count(), 20);
  EXPECT_EQ(g.node_count(), 10);
  int malicious = 0;
  for (int l : g.labels) malicious += l;
  EXPECT_EQ(malicious, 10);
  EXPECT_EQ(g.client_features.cols(), 32 + kHistoryWindow);
  EXPECT_FALSE(GenerateDetectorCorpus(c, {}).ok());
}

TEST(OrchestratorTest, CorpusGridEnumeratesRuns) {
  SimConfig c = SmallConfig();
  c.global_epochs = 2;
  c.crypto_backend = Backend::kPlaintextShadow;
  size_t graphs = 0;
  for (double ratio : {0.2, 0.5, 0.8}) {
    c.perturbation_ratio = ratio;
    auto corpus = GenerateDetectorCorpus(c, {1, 2, 3});
    ASSERT_TRUE(corpus.ok());
    for (const BipartiteGraph& g : *corpus) {
      int malicious = 0;
      for (int l : g.labels) malicious += l;
      EXPECT_EQ(malicious, std::lround(ratio * c.selected_per_epoch));
    }
    graphs += corpus->size();
  }
  EXPECT_EQ(graphs, 3u * 3u * 2u);
}

TEST(OrchestratorTest, ReplayReproducesGlobalBlobs) {
  SimConfig c = SmallConfig();
  DetectorHyper h;
  h.hidden = 16;
  h.seed = 4;
  Detector det = InitDetector(DetectorKind::kGnn, 32 + kHistoryWindow, 2, h);
  auto run = RunSimulation(c, {&det});
  ASSERT_TRUE(run.ok()) << run.status();
  SimEnvironment env = BuildEnvironment(c).value();
  auto blobs = ReplayGlobalBlobs(env, &det, run->state.ledger, run->state.store);
  ASSERT_TRUE(blobs.ok()) << blobs.status();
  ASSERT_EQ(blobs->size(), run->state.global_keys.size());
  for (size_t e = 0; e < blobs->size(); ++e) {
    EXPECT_EQ((*blobs)[e], run->state.store.Get(run->state.global_keys[e]).value());
  }

  DdseStore bad_input = run->state.store;
  const std::string semi_key = run->state.ledger.blocks()[0].txs[0].blob_keys[1];
  std::string* semi = bad_input.MutableBlobForTesting(semi_key);
  (*semi)[semi->size() - 5] ^= 1;
  EXPECT_EQ(ReplayGlobalBlobs(env, &det, run->state.ledger, bad_input).status().code(),
            absl::StatusCode::kDataLoss);
}

TEST(OrchestratorTest, DefenseDrivesSelectionAndMetrics) {
  SimConfig c = SmallConfig();
  c.perturbation_ratio = 0.5;
  DetectorHyper h;
  h.hidden = 16;
  h.seed = 4;
  Detector det = InitDetector(DetectorKind::kGnn, 32 + kHistoryWindow, 2, h);
  Detector mlp = InitDetector(DetectorKind::kMlp, 32 + kHistoryWindow, 2, h);
  auto r = RunSimulation(c, {&det, &mlp});
  ASSERT_TRUE(r.ok()) << r.status();
  for (const EpochMetrics& m : r->metrics) {
    EXPECT_TRUE(m.detection_f1.has_value());
    EXPECT_TRUE(m.baseline_f1.has_value());
    EXPECT_TRUE(m.abnormal_model_accuracy.has_value());
    EXPECT_EQ(m.selected_clients.size(), 8u);
  }
  EXPECT_EQ(r->state.known_probabilities.size() > 0, true);
  auto off = RunSimulation(c, {nullptr, nullptr, &det});
  ASSERT_TRUE(off.ok());
  for (const EpochMetrics& m : off->metrics) {
    EXPECT_TRUE(m.detection_f1.has_value());
    EXPECT_FALSE(m.baseline_f1.has_value());
    EXPECT_EQ(m.flagged_count, 0);
  }
}

TEST(OrchestratorTest, TimingRecordsArePopulated) {
  auto r = RunSimulation(SmallConfig(), {});
  ASSERT_TRUE(r.ok());
  for (const TimingRecord& t : r->timings) {
    for (const PhaseTime* p : {&t.train, &t.encrypt, &t.project, &t.semi_aggregate,
                               &t.decrypt, &t.analyze}) {
      EXPECT_GT(p->sum, 0.0);
      EXPECT_GE(p->sum, p->critical);
    }
    EXPECT_LT(t.analyze.sum, t.decrypt.sum);
    EXPECT_LE(t.TotalCritical(), t.TotalSum());
  }
}

TEST(ConfigTest, RoundTripAndErrors) {
  SimConfig c = SmallConfig();
  c.aggregator_policy = SelectionPolicy::kPrevHash;
  c.crypto_backend = Backend::kPlaintextShadow;
  c.perturbation_ratio = 0.35;
  const std::string text = SerializeConfig(c);
  auto parsed = ParseConfig(text);
  ASSERT_TRUE(parsed.ok()) << parsed.status();
  EXPECT_EQ(SerializeConfig(*parsed), text);
  EXPECT_EQ(parsed->perturbation_ratio, 0.35);

  auto commented = ParseConfig("# basic\nclient-count = 50  # fewer\n\nseed=3\n");
  ASSERT_TRUE(commented.ok());
  EXPECT_EQ(commented->client_count, 50);
  EXPECT_EQ(commented->seed, 3u);

  EXPECT_FALSE(ParseConfig("no-such-key=1\n").ok());
  EXPECT_FALSE(ParseConfig("client-count\n").ok());
  EXPECT_FALSE(ParseConfig("perturbation-ratio=1.5\n").ok());
  EXPECT_FALSE(ParseConfig("selected-per-epoch=200\n").ok());
  EXPECT_FALSE(ParseConfig("aggregator-policy=lottery\n").ok());
  EXPECT_FALSE(ParseConfig("idx-train-images=/x\n").ok());
}

TEST(ModelBlobTest, RoundTripAndStrictness) {
  ModelParams m = InitModel(kSyntheticShapes, 2).value();
  const std::string blob = SerializeModel(m);
  auto back = ParseModel(blob);
  ASSERT_TRUE(back.ok());
  EXPECT_EQ(back->weights, m.weights);
  EXPECT_EQ(back->shapes, m.shapes);
  EXPECT_FALSE(ParseModel(blob.substr(0, blob.size() - 1)).ok());
  std::string bad = blob;
  bad.replace(bad.find("count 2410"), 10, "count 2409");
  EXPECT_FALSE(ParseModel(bad).ok());
}

TEST(MetricsCsvTest, Schema) {
  EpochMetrics m;
  m.epoch = 2;
  m.global_accuracy = 0.5;
  m.baseline_f1 = 1.0;
  m.selected_clients = {1, 4};
  EXPECT_EQ(MetricsCsv({m}),
            "epoch,global_accuracy,detection_f1,baseline_f1,abnormal_model_accuracy,"
            "flagged_count,selected_clients\n2,0.500000,,1.000000,,0,1 4\n");
}

}  // namespace
}  // namespace tfl
