#ifndef TFL_LEDGER_H_
#define TFL_LEDGER_H_

// Hash-chained transaction ledger, content-addressed blob store (DDSE),
// access rules and the aggregator-selection contract.

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "absl/status/status.h"
#include "absl/status/statusor.h"
#include "absl/strings/string_view.h"

namespace tfl {

inline const std::string kZeroHash(64, '0');

// Lowercase hex SHA-256.
std::string Sha256Hex(absl::string_view bytes);
bool IsHashHex(absl::string_view s);

enum class TxType {
  kUploadPreprocessed,
  kAggregatorSelected,
  kUploadGlobal,
  kDownloadGrant,
  kClientNotify,
};

absl::string_view TxTypeName(TxType type);
absl::StatusOr<TxType> ParseTxType(absl::string_view name);

struct Transaction {
  TxType type = TxType::kUploadPreprocessed;
  int64_t epoch = 0;
  std::string actor;
  std::vector<std::string> blob_keys;
  uint64_t timestamp = 0;
  // False for a denied read request.
  bool granted = true;

  bool operator==(const Transaction&) const = default;
};

struct Block {
  uint64_t index = 0;
  std::string prev_hash;
  std::vector<Transaction> txs;
  std::string hash;
};

// SHA-256 over a fixed-order, length-prefixed binary encoding of the index,
// the previous hash and every transaction field.
std::string ComputeBlockHash(uint64_t index, absl::string_view prev_hash,
                             std::span<const Transaction> txs);

class DdseStore {
 public:
  // Returns the key, SHA-256 hex of the bytes. Idempotent.
  std::string Put(std::string bytes);
  // NotFound for unknown keys, DataLoss when the stored bytes no longer hash
  // to the key.
  absl::StatusOr<std::string> Get(absl::string_view key) const;
  bool Contains(absl::string_view key) const;
  size_t size() const { return blobs_.size(); }
  std::vector<std::string> Keys() const;

  // Re-hashes every blob; returns the first (in key order) corrupted key.
  std::optional<std::string> FindCorrupted() const;

  // One file per blob, named by its key.
  absl::Status SaveTo(const std::string& dir) const;
  static absl::StatusOr<DdseStore> LoadFrom(const std::string& dir);

  std::string* MutableBlobForTesting(absl::string_view key);

 private:
  std::map<std::string, std::string, std::less<>> blobs_;
};

// Append-only chain. Single writer: a block becomes visible only once fully
// built.
class Ledger {
 public:
  // Fails with InvalidArgument for empty or malformed transactions and with
  // DataLoss when a blob key is not in the store.
  absl::StatusOr<Block> AppendBlock(std::vector<Transaction> txs,
                                    const DdseStore& store);

  const std::vector<Block>& blocks() const { return blocks_; }
  size_t size() const { return blocks_.size(); }
  const std::string& TipHash() const;
  // Logical clock for transaction timestamps.
  uint64_t NextTimestamp() { return clock_++; }

  // Line format:
  //   tfl-ledger v1
  //   block <index> <prev> <hash> <tx-count>
  //   tx <type> <epoch> <actor> <timestamp> <granted> <key-count> <keys...>
  std::string Serialize() const;
  // Strict parse followed by chain verification.
  static absl::StatusOr<Ledger> Parse(absl::string_view text);

  Block* MutableBlockForTesting(size_t index) { return &blocks_[index]; }

 private:
  std::vector<Block> blocks_;
  uint64_t clock_ = 0;
};

// Index of the first block whose hash or linkage does not verify.
std::optional<uint64_t> VerifyChain(const Ledger& ledger);
std::optional<uint64_t> VerifyChain(std::span<const Block> blocks);

// Same on the persisted text. Lines that fail to parse are attributed to the
// block they belong to (0 for a damaged file header).
std::optional<uint64_t> VerifyLedgerText(absl::string_view text);

enum class SelectionPolicy { kRoundRobin, kSeededRandom, kPrevHash };

absl::string_view SelectionPolicyName(SelectionPolicy policy);
absl::StatusOr<SelectionPolicy> ParseSelectionPolicy(absl::string_view name);

// round-robin: epoch mod |candidates|; prev-hash: hash as a big integer mod
// |candidates|; seeded-random: derived from (seed, epoch).
absl::StatusOr<std::string> SelectAggregator(
    std::span<const std::string> candidates, int64_t epoch,
    SelectionPolicy policy, absl::string_view prev_hash, uint64_t seed);

enum class Role {
  kClient,
  kPreprocNode,
  kAggregatorCandidate,
  kSelectedAggregator,
};

enum class Action {
  kUploadLocalModel,
  kReadLocalModel,
  kUploadPreprocessed,
  kReadPreprocessed,
  kReadHistory,
  kReadDecryptionStage,
  kUploadGlobal,
  kReadGlobal,
};

struct AccessRequest {
  std::string actor;
  Role role = Role::kClient;
  Action action = Action::kReadGlobal;
  int64_t epoch = 0;
  // Owner of the requested resource, for owner-scoped actions.
  std::string resource_owner;
};

// Deny by default. Client model reads are owner-scoped; selected-aggregator
// rights apply only to the epoch the actor was elected for.
class AccessPolicy {
 public:
  static AccessPolicy Default();

  void Allow(Role role, Action action);
  void RecordSelection(int64_t epoch, std::string aggregator);
  bool Check(const AccessRequest& request) const;

 private:
  std::set<std::pair<Role, Action>> rules_;
  std::map<int64_t, std::string> selected_;
};

}  // namespace tfl

#endif  // TFL_LEDGER_H_
