#include "tfl/aggregator.h"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "absl/status/status.h"
#include "absl/strings/str_cat.h"
#include "tfl/status_macros.h"

namespace tfl {
namespace {

double Seconds(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - since)
      .count();
}

// Decrypts one ciphertext and checks the plaintext against its tracked bound.
absl::StatusOr<double> DecryptChecked(const PaillierKeyPair& kp,
                                      const FixedPointCodec& codec,
                                      const Ciphertext& ct) {
  auto m = Decrypt(kp, ct);
  if (!m.ok()) {
    return absl::DataLossError(
        absl::StrCat("ciphertext does not decrypt: ", m.status().message()));
  }
  const BigInt v = codec.ToSigned(*m);
  if (ct.tracked()) {
    const BigInt mag = abs(v);
    const double limit = std::floor(ct.magnitude_bits) + 1;
    if (mag != 0 && static_cast<double>(mpz_sizeinbase(mag.get_mpz_t(), 2)) > limit) {
      return absl::DataLossError(
          "decrypted value exceeds its magnitude bound (wrong key?)");
    }
  }
  return codec.Decode(*m, ct.scale_exponent);
}

absl::StatusOr<std::vector<double>> DecryptVector(const PaillierKeyPair& kp,
                                                  const FixedPointCodec& codec,
                                                  const std::vector<Ciphertext>& cts) {
  std::vector<double> out;
  out.reserve(cts.size());
  for (const Ciphertext& ct : cts) {
    TFL_ASSIGN_OR_RETURN(double x, DecryptChecked(kp, codec, ct));
    out.push_back(x);
  }
  return out;
}

}  // namespace

absl::StatusOr<std::map<ClientId, std::vector<double>>> DecryptProjections(
    const PaillierKeyPair& kp, const FixedPointCodec& codec,
    std::span<const PreprocessedNode> nodes, std::vector<DecryptedArtifact>* log) {
  std::map<ClientId, std::vector<double>> out;
  for (const PreprocessedNode& node : nodes) {
    for (const auto& [client, vec] : node.projections) {
      TFL_ASSIGN_OR_RETURN(std::vector<double> v,
                           DecryptVector(kp, codec, vec.ciphertexts));
      if (log != nullptr) {
        log->push_back({ArtifactKind::kProjection, v.size(), 1});
      }
      auto [it, inserted] = out.emplace(client, v);
      if (!inserted && it->second != v) {
        return absl::DataLossError(absl::StrCat(
            "projections of client ", client, " disagree between nodes"));
      }
    }
  }
  return out;
}

absl::StatusOr<std::map<NodeId, ModelParams>> DecryptSemiAggregates(
    const PaillierKeyPair& kp, const FixedPointCodec& codec,
    std::span<const PreprocessedNode> nodes, const std::vector<LayerShape>& shapes,
    std::vector<DecryptedArtifact>* log) {
  const size_t expected = ModelParams::CountFor(shapes);
  std::map<NodeId, ModelParams> out;
  for (const PreprocessedNode& node : nodes) {
    if (!(node.weight_sum > 0.0)) {
      return absl::InvalidArgumentError(
          absl::StrCat("node ", node.node, " has a non-positive weight sum"));
    }
    if (node.semi_aggregate.ciphertexts.size() != expected) {
      return absl::InvalidArgumentError(
          absl::StrCat("node ", node.node, " semi-aggregate has ",
                       node.semi_aggregate.ciphertexts.size(), " weights, expected ",
                       expected));
    }
    TFL_ASSIGN_OR_RETURN(std::vector<double> w,
                         DecryptVector(kp, codec, node.semi_aggregate.ciphertexts));
    if (log != nullptr) {
      log->push_back({ArtifactKind::kSemiAggregate, w.size(), node.client_count});
    }
    for (double& x : w) x /= node.weight_sum;
    out[node.node] = ModelParams{std::move(w), shapes};
  }
  return out;
}

absl::StatusOr<std::map<NodeId, double>> EvaluateNodes(
    const std::map<NodeId, ModelParams>& models, const Dataset& test) {
  std::map<NodeId, double> out;
  for (const auto& [node, model] : models) {
    TFL_ASSIGN_OR_RETURN(out[node], Evaluate(model, test));
  }
  return out;
}

absl::StatusOr<GlobalAggregateResult> GlobalAggregate(
    const std::map<NodeId, ModelParams>& node_models,
    const std::set<ClientId>& flagged, const std::map<NodeId, double>& accuracy,
    const NodeAssignment& assignment) {
  if (node_models.empty()) return absl::InvalidArgumentError("no node models");
  std::map<NodeId, std::vector<ClientId>> clients;
  for (const auto& [n, c] : assignment.edges) clients[n].push_back(c);
  GlobalAggregateResult out;
  for (const auto& [node, model] : node_models) {
    const auto& cs = clients[node];
    if (cs.empty()) continue;
    if (std::none_of(cs.begin(), cs.end(),
                     [&](ClientId c) { return flagged.contains(c); })) {
      out.included.push_back(node);
    }
  }
  if (out.included.empty()) {
    out.fallback = true;
    std::vector<std::pair<double, NodeId>> ranked;
    for (const auto& [node, model] : node_models) {
      if (clients[node].empty()) continue;
      auto it = accuracy.find(node);
      if (it == accuracy.end()) {
        return absl::FailedPreconditionError(
            absl::StrCat("node ", node, " has no accuracy"));
      }
      ranked.emplace_back(-it->second, node);
    }
    std::sort(ranked.begin(), ranked.end());
    const size_t keep = (ranked.size() + 1) / 2;
    for (size_t i = 0; i < keep; ++i) out.included.push_back(ranked[i].second);
    std::sort(out.included.begin(), out.included.end());
  }
  if (out.included.empty()) {
    return absl::FailedPreconditionError("no node has any connected client");
  }
  const ModelParams& first = node_models.at(out.included.front());
  out.model.shapes = first.shapes;
  out.model.weights.assign(first.size(), 0.0);
  double total = 0.0;
  for (NodeId node : out.included) {
    const ModelParams& m = node_models.at(node);
    if (m.size() != first.size()) {
      return absl::InvalidArgumentError("node models differ in size");
    }
    const double w = static_cast<double>(clients[node].size());
    total += w;
    for (size_t i = 0; i < m.size(); ++i) out.model.weights[i] += w * m.weights[i];
  }
  for (double& x : out.model.weights) x /= total;
  return out;
}

Aggregator::Aggregator(const PaillierKeyPair& kp, const FixedPointCodec& codec,
                       std::vector<LayerShape> shapes, const Dataset* test,
                       const Detector* detector, GraphOptions graph_options)
    : kp_(kp),
      codec_(codec),
      shapes_(std::move(shapes)),
      test_(test),
      detector_(detector),
      graph_options_(graph_options) {}

absl::StatusOr<EpochAggregationOutput> Aggregator::Process(
    const EpochAggregationInput& input, AggregatorTiming* timing) const {
  if (test_ == nullptr) return absl::FailedPreconditionError("no test dataset");
  EpochAggregationOutput out;
  auto start = std::chrono::steady_clock::now();
  TFL_ASSIGN_OR_RETURN(
      auto node_models,
      DecryptSemiAggregates(kp_, codec_, input.nodes, shapes_, &out.decrypted));
  TFL_ASSIGN_OR_RETURN(auto projections,
                       DecryptProjections(kp_, codec_, input.nodes, &out.decrypted));
  if (timing != nullptr) timing->decrypt_seconds = Seconds(start);
  for (const PreprocessedNode& node : input.nodes) {
    if (node.client_count == 1) {
      out.warnings.push_back(absl::StrCat(
          "node ", node.node,
          " has a single client; its semi-aggregate is that client's model"));
    }
  }

  start = std::chrono::steady_clock::now();
  TFL_ASSIGN_OR_RETURN(out.node_accuracy, EvaluateNodes(node_models, *test_));
  TFL_ASSIGN_OR_RETURN(out.graph,
                       BuildGraph(projections, input.history, input.epoch,
                                  out.node_accuracy, input.assignment,
                                  graph_options_));
  if (detector_ != nullptr) {
    TFL_ASSIGN_OR_RETURN(DetectionResult det, Detect(*detector_, out.graph));
    out.flagged = std::move(det.flagged);
    out.probabilities = std::move(det.probabilities);
    if (input.next_count > 0) {
      std::map<ClientId, double> known = input.prior_probabilities;
      for (const auto& [c, p] : out.probabilities) known[c] = p;
      TFL_ASSIGN_OR_RETURN(out.next_clients,
                           SelectClients(known, input.pool, input.next_count));
    }
  }
  TFL_ASSIGN_OR_RETURN(
      GlobalAggregateResult global,
      GlobalAggregate(node_models, out.flagged, out.node_accuracy, input.assignment));
  if (timing != nullptr) timing->analyze_seconds = Seconds(start);
  out.global_model = std::move(global.model);
  out.included_nodes = std::move(global.included);
  out.fallback = global.fallback;
  return out;
}

}  // namespace tfl
