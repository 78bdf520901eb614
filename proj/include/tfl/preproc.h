#ifndef TFL_PREPROC_H_
#define TFL_PREPROC_H_

// Client-side encryption and the pre-processing layer. Everything here works
// with the public key only: nodes project and semi-aggregate encrypted local
// models without ever being able to decrypt them.

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "absl/status/statusor.h"
#include "tfl/model.h"
#include "tfl/paillier.h"

namespace tfl {

using ClientId = int;
using NodeId = int;

inline constexpr int kDefaultProjectionDim = 32;

struct EncryptedModel {
  std::vector<Ciphertext> ciphertexts;
  int scale_exponent = 0;
  // -1 for semi-aggregates.
  ClientId owner = -1;
};

struct EncryptedVector {
  std::vector<Ciphertext> ciphertexts;
  int scale_exponent = 0;
};

// Dense d_out x d_in real matrix with its fixed-point encoding. Generated
// entries are N(0, 1/d_out) and reproducible from the seed.
class ProjectionMatrix {
 public:
  static absl::StatusOr<ProjectionMatrix> Generate(int rows, int cols,
                                                   uint64_t seed,
                                                   const FixedPointCodec& codec);
  static absl::StatusOr<ProjectionMatrix> FromEntries(
      int rows, int cols, std::vector<double> entries,
      const FixedPointCodec& codec);

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  uint64_t seed() const { return seed_; }
  int scale_bits() const { return scale_bits_; }
  double entry(int i, int j) const {
    return entries_[static_cast<size_t>(i) * cols_ + j];
  }
  double max_abs_entry() const;
  std::span<const BigInt> encoded_row(int i) const {
    return {encoded_.data() + static_cast<size_t>(i) * cols_,
            static_cast<size_t>(cols_)};
  }
  // Plaintext product with real weights, for reference computations.
  std::vector<double> Apply(std::span<const double> x) const;

 private:
  int rows_ = 0;
  int cols_ = 0;
  uint64_t seed_ = 0;
  int scale_bits_ = 0;
  std::vector<double> entries_;
  std::vector<BigInt> encoded_;
};

// Bipartite client/node connections for one epoch.
struct NodeAssignment {
  std::vector<std::pair<NodeId, ClientId>> edges;
  int epoch = 0;

  std::vector<ClientId> ClientsOf(NodeId node) const;
  std::vector<NodeId> NodesOf(ClientId client) const;
};

// Each node samples `per_node` distinct clients; clients left uncovered are
// then attached to the least-loaded node (lowest id on ties). Edges are
// sorted by (node, client).
absl::StatusOr<NodeAssignment> AssignClients(std::span<const ClientId> selected,
                                             std::span<const NodeId> nodes,
                                             int per_node, uint64_t seed,
                                             int epoch);

absl::StatusOr<EncryptedModel> EncryptModel(const PaillierPublicKey& pk,
                                            const ModelParams& model,
                                            const FixedPointCodec& codec,
                                            ClientId owner, Rng& rng);

// Row i of the result is Enc(sum_j P_ij * w_j) with scale 2 * scale-bits.
absl::StatusOr<EncryptedVector> ProjectEncrypted(const PaillierPublicKey& pk,
                                                 const EncryptedModel& model,
                                                 const ProjectionMatrix& matrix);

// Element-wise Enc(sum_c weight_c * w_c). The division by sum(weights) is
// left to whoever decrypts.
absl::StatusOr<EncryptedModel> SemiAggregate(
    const PaillierPublicKey& pk, std::span<const EncryptedModel* const> models,
    std::span<const double> weights, const FixedPointCodec& codec);

struct NodeTiming {
  double project_seconds = 0.0;
  double semi_aggregate_seconds = 0.0;
};

// Output of one pre-processing node for one epoch.
struct PreprocessedNode {
  NodeId node = 0;
  std::vector<std::pair<ClientId, EncryptedVector>> projections;
  EncryptedModel semi_aggregate;
  double weight_sum = 0.0;
  int client_count = 0;
};

// Projects every connected client's model and semi-aggregates them.
absl::StatusOr<PreprocessedNode> PreprocessNode(
    const PaillierPublicKey& pk, NodeId node,
    std::span<const EncryptedModel* const> models,
    std::span<const double> weights, const ProjectionMatrix& matrix,
    const FixedPointCodec& codec, NodeTiming* timing = nullptr);

// DDSE blob format: a text header (kind, owner, scale, magnitude bound,
// count) followed by one decimal ciphertext per line.
std::string SerializeEncryptedModel(const EncryptedModel& model);
std::string SerializeEncryptedVector(const EncryptedVector& vec);
absl::StatusOr<EncryptedModel> ParseEncryptedModel(const std::string& blob);
absl::StatusOr<EncryptedVector> ParseEncryptedVector(const std::string& blob);

}  // namespace tfl

#endif  // TFL_PREPROC_H_
