#include "tfl/preproc.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>

#include "absl/status/status.h"
#include "absl/strings/numbers.h"
#include "absl/strings/str_cat.h"
#include "absl/strings/str_split.h"
#include "absl/strings/string_view.h"
#include "absl/strings/strip.h"
#include "tfl/rng.h"
#include "tfl/status_macros.h"

namespace tfl {
namespace {

constexpr uint64_t kProjectionTag = 0x50524f4a;  // "PROJ"
constexpr uint64_t kAssignTag = 0x41535347;      // "ASSG"
constexpr char kBlobMagic[] = "tfl-ciphertexts v1";

double Seconds(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - since)
      .count();
}

double MaxBound(const std::vector<Ciphertext>& cts) {
  double bound = -std::numeric_limits<double>::infinity();
  for (const Ciphertext& ct : cts) {
    if (!ct.tracked()) return Ciphertext::kUntracked;
    bound = std::max(bound, ct.magnitude_bits);
  }
  return cts.empty() ? Ciphertext::kUntracked : bound;
}

std::string FormatBound(double bound) {
  if (std::isnan(bound)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", bound);
  return buf;
}

std::string SerializeCiphertexts(const std::string& kind, ClientId owner,
                                 int scale, const std::vector<Ciphertext>& cts) {
  std::string out = absl::StrCat(kBlobMagic, "\nkind ", kind, "\nowner ", owner,
                                 "\nscale ", scale, "\nbound ",
                                 FormatBound(MaxBound(cts)), "\ncount ",
                                 cts.size(), "\n");
  for (const Ciphertext& ct : cts) absl::StrAppend(&out, ct.value.get_str(), "\n");
  return out;
}

struct ParsedBlob {
  std::string kind;
  ClientId owner = -1;
  int scale = 0;
  std::vector<Ciphertext> cts;
};

absl::StatusOr<absl::string_view> HeaderValue(absl::string_view line,
                                             absl::string_view key) {
  if (!absl::ConsumePrefix(&line, key) || !absl::ConsumePrefix(&line, " ")) {
    return absl::InvalidArgumentError(
        absl::StrCat("ciphertext blob: expected header '", key, "'"));
  }
  return line;
}

absl::StatusOr<ParsedBlob> ParseCiphertexts(const std::string& blob) {
  std::vector<absl::string_view> lines = absl::StrSplit(blob, '\n');
  if (lines.size() < 7 || lines.back() != "" || lines[0] != kBlobMagic) {
    return absl::InvalidArgumentError("ciphertext blob: bad header");
  }
  lines.pop_back();
  ParsedBlob out;
  TFL_ASSIGN_OR_RETURN(absl::string_view kind, HeaderValue(lines[1], "kind"));
  out.kind = std::string(kind);
  TFL_ASSIGN_OR_RETURN(absl::string_view owner, HeaderValue(lines[2], "owner"));
  TFL_ASSIGN_OR_RETURN(absl::string_view scale, HeaderValue(lines[3], "scale"));
  TFL_ASSIGN_OR_RETURN(absl::string_view bound_text, HeaderValue(lines[4], "bound"));
  TFL_ASSIGN_OR_RETURN(absl::string_view count_text, HeaderValue(lines[5], "count"));
  size_t count = 0;
  double bound = Ciphertext::kUntracked;
  if (!absl::SimpleAtoi(owner, &out.owner) || !absl::SimpleAtoi(scale, &out.scale) ||
      !absl::SimpleAtoi(count_text, &count) ||
      (bound_text != "nan" && !absl::SimpleAtod(bound_text, &bound))) {
    return absl::InvalidArgumentError("ciphertext blob: malformed header value");
  }
  if (lines.size() != 6 + count) {
    return absl::InvalidArgumentError("ciphertext blob: length prefix mismatch");
  }
  out.cts.resize(count);
  for (size_t i = 0; i < count; ++i) {
    const absl::string_view digits = lines[6 + i];
    if (digits.empty() ||
        !std::all_of(digits.begin(), digits.end(),
                     [](char c) { return c >= '0' && c <= '9'; }) ||
        out.cts[i].value.set_str(std::string(digits), 10) != 0) {
      return absl::InvalidArgumentError("ciphertext blob: malformed value");
    }
    out.cts[i].scale_exponent = out.scale;
    out.cts[i].magnitude_bits = bound;
  }
  return out;
}

}  // namespace

absl::StatusOr<ProjectionMatrix> ProjectionMatrix::FromEntries(
    int rows, int cols, std::vector<double> entries,
    const FixedPointCodec& codec) {
  if (rows <= 0 || cols <= 0 ||
      entries.size() != static_cast<size_t>(rows) * cols) {
    return absl::InvalidArgumentError("projection matrix shape mismatch");
  }
  ProjectionMatrix m;
  m.rows_ = rows;
  m.cols_ = cols;
  m.scale_bits_ = codec.scale_bits();
  m.entries_ = std::move(entries);
  m.encoded_.reserve(m.entries_.size());
  for (double e : m.entries_) {
    TFL_ASSIGN_OR_RETURN(BigInt v, codec.EncodeSigned(e));
    m.encoded_.push_back(std::move(v));
  }
  return m;
}

absl::StatusOr<ProjectionMatrix> ProjectionMatrix::Generate(
    int rows, int cols, uint64_t seed, const FixedPointCodec& codec) {
  if (rows <= 0 || cols <= 0) {
    return absl::InvalidArgumentError("projection matrix shape must be positive");
  }
  Rng rng(DeriveSeed(seed, {kProjectionTag}));
  const double stddev = 1.0 / std::sqrt(static_cast<double>(rows));
  std::vector<double> entries(static_cast<size_t>(rows) * cols);
  for (double& e : entries) e = stddev * StandardNormal(rng);
  TFL_ASSIGN_OR_RETURN(ProjectionMatrix m,
                       FromEntries(rows, cols, std::move(entries), codec));
  m.seed_ = seed;
  return m;
}

double ProjectionMatrix::max_abs_entry() const {
  double m = 0.0;
  for (double e : entries_) m = std::max(m, std::fabs(e));
  return m;
}

std::vector<double> ProjectionMatrix::Apply(std::span<const double> x) const {
  std::vector<double> out(rows_, 0.0);
  for (int i = 0; i < rows_; ++i) {
    for (int j = 0; j < cols_; ++j) out[i] += entry(i, j) * x[j];
  }
  return out;
}

std::vector<ClientId> NodeAssignment::ClientsOf(NodeId node) const {
  std::vector<ClientId> out;
  for (const auto& [n, c] : edges) {
    if (n == node) out.push_back(c);
  }
  return out;
}

std::vector<NodeId> NodeAssignment::NodesOf(ClientId client) const {
  std::vector<NodeId> out;
  for (const auto& [n, c] : edges) {
    if (c == client) out.push_back(n);
  }
  return out;
}

absl::StatusOr<NodeAssignment> AssignClients(std::span<const ClientId> selected,
                                             std::span<const NodeId> nodes,
                                             int per_node, uint64_t seed,
                                             int epoch) {
  if (nodes.empty() || per_node < 1) {
    return absl::InvalidArgumentError(
        "assignment needs at least one node and one connection per node");
  }
  if (static_cast<size_t>(per_node) > selected.size()) {
    return absl::InvalidArgumentError(
        absl::StrCat("connections-per-node ", per_node, " exceeds ",
                     selected.size(), " selected clients"));
  }
  Rng rng(DeriveSeed(seed, {kAssignTag, static_cast<uint64_t>(epoch)}));
  NodeAssignment out;
  out.epoch = epoch;
  std::vector<int> load(nodes.size(), 0);
  std::vector<int> degree(selected.size(), 0);
  std::vector<size_t> pool(selected.size());
  for (size_t n = 0; n < nodes.size(); ++n) {
    for (size_t i = 0; i < pool.size(); ++i) pool[i] = i;
    for (int k = 0; k < per_node; ++k) {
      const size_t pick = k + UniformBelow(rng, pool.size() - k);
      std::swap(pool[k], pool[pick]);
      out.edges.emplace_back(nodes[n], selected[pool[k]]);
      ++degree[pool[k]];
      ++load[n];
    }
  }
  for (size_t i = 0; i < selected.size(); ++i) {
    if (degree[i] > 0) continue;
    const size_t n = std::min_element(load.begin(), load.end()) - load.begin();
    out.edges.emplace_back(nodes[n], selected[i]);
    ++load[n];
  }
  std::sort(out.edges.begin(), out.edges.end());
  return out;
}

absl::StatusOr<EncryptedModel> EncryptModel(const PaillierPublicKey& pk,
                                            const ModelParams& model,
                                            const FixedPointCodec& codec,
                                            ClientId owner, Rng& rng) {
  EncryptedModel out;
  out.owner = owner;
  out.scale_exponent = codec.scale_bits();
  out.ciphertexts.reserve(model.size());
  for (double w : model.weights) {
    TFL_ASSIGN_OR_RETURN(Ciphertext ct, EncryptReal(pk, codec, w, rng));
    out.ciphertexts.push_back(std::move(ct));
  }
  return out;
}

absl::StatusOr<EncryptedVector> ProjectEncrypted(const PaillierPublicKey& pk,
                                                 const EncryptedModel& model,
                                                 const ProjectionMatrix& matrix) {
  if (static_cast<size_t>(matrix.cols()) != model.ciphertexts.size()) {
    return absl::InvalidArgumentError(
        absl::StrCat("projection expects ", matrix.cols(), " weights, got ",
                     model.ciphertexts.size()));
  }
  EncryptedVector out;
  out.scale_exponent = model.scale_exponent + matrix.scale_bits();
  out.ciphertexts.reserve(matrix.rows());
  for (int i = 0; i < matrix.rows(); ++i) {
    TFL_ASSIGN_OR_RETURN(
        Ciphertext row,
        HomLinearCombination(pk, model.ciphertexts, matrix.encoded_row(i),
                             matrix.scale_bits()));
    out.ciphertexts.push_back(std::move(row));
  }
  return out;
}

absl::StatusOr<EncryptedModel> SemiAggregate(
    const PaillierPublicKey& pk, std::span<const EncryptedModel* const> models,
    std::span<const double> weights, const FixedPointCodec& codec) {
  if (models.empty() || models.size() != weights.size()) {
    return absl::InvalidArgumentError(
        "semi-aggregation needs one weight per model and at least one model");
  }
  const size_t length = models.front()->ciphertexts.size();
  const int scale = models.front()->scale_exponent;
  std::vector<BigInt> coefficients;
  for (size_t c = 0; c < models.size(); ++c) {
    if (models[c]->ciphertexts.size() != length ||
        models[c]->scale_exponent != scale) {
      return absl::InvalidArgumentError(
          "semi-aggregation inputs differ in length or scale");
    }
    if (!(weights[c] > 0.0)) {
      return absl::InvalidArgumentError("aggregation weights must be positive");
    }
    TFL_ASSIGN_OR_RETURN(BigInt k, codec.EncodeSigned(weights[c]));
    coefficients.push_back(std::move(k));
  }
  EncryptedModel out;
  out.scale_exponent = scale + codec.scale_bits();
  out.ciphertexts.reserve(length);
  std::vector<Ciphertext> column(models.size());
  for (size_t j = 0; j < length; ++j) {
    for (size_t c = 0; c < models.size(); ++c) {
      column[c] = models[c]->ciphertexts[j];
    }
    TFL_ASSIGN_OR_RETURN(
        Ciphertext ct,
        HomLinearCombination(pk, column, coefficients, codec.scale_bits()));
    out.ciphertexts.push_back(std::move(ct));
  }
  return out;
}

absl::StatusOr<PreprocessedNode> PreprocessNode(
    const PaillierPublicKey& pk, NodeId node,
    std::span<const EncryptedModel* const> models,
    std::span<const double> weights, const ProjectionMatrix& matrix,
    const FixedPointCodec& codec, NodeTiming* timing) {
  PreprocessedNode out;
  out.node = node;
  out.client_count = static_cast<int>(models.size());
  auto start = std::chrono::steady_clock::now();
  for (const EncryptedModel* m : models) {
    TFL_ASSIGN_OR_RETURN(EncryptedVector v, ProjectEncrypted(pk, *m, matrix));
    out.projections.emplace_back(m->owner, std::move(v));
  }
  if (timing != nullptr) timing->project_seconds = Seconds(start);
  start = std::chrono::steady_clock::now();
  TFL_ASSIGN_OR_RETURN(out.semi_aggregate,
                       SemiAggregate(pk, models, weights, codec));
  if (timing != nullptr) timing->semi_aggregate_seconds = Seconds(start);
  for (double w : weights) out.weight_sum += w;
  return out;
}

std::string SerializeEncryptedModel(const EncryptedModel& model) {
  return SerializeCiphertexts("model", model.owner, model.scale_exponent,
                              model.ciphertexts);
}

std::string SerializeEncryptedVector(const EncryptedVector& vec) {
  return SerializeCiphertexts("vector", -1, vec.scale_exponent, vec.ciphertexts);
}

absl::StatusOr<EncryptedModel> ParseEncryptedModel(const std::string& blob) {
  TFL_ASSIGN_OR_RETURN(ParsedBlob parsed, ParseCiphertexts(blob));
  if (parsed.kind != "model") {
    return absl::InvalidArgumentError("ciphertext blob is not a model");
  }
  EncryptedModel out;
  out.owner = parsed.owner;
  out.scale_exponent = parsed.scale;
  out.ciphertexts = std::move(parsed.cts);
  return out;
}

absl::StatusOr<EncryptedVector> ParseEncryptedVector(const std::string& blob) {
  TFL_ASSIGN_OR_RETURN(ParsedBlob parsed, ParseCiphertexts(blob));
  if (parsed.kind != "vector") {
    return absl::InvalidArgumentError("ciphertext blob is not a vector");
  }
  EncryptedVector out;
  out.scale_exponent = parsed.scale;
  out.ciphertexts = std::move(parsed.cts);
  return out;
}

}  // namespace tfl
