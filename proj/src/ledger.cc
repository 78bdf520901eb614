#include "tfl/ledger.h"

#include <openssl/evp.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "absl/strings/str_cat.h"
#include "absl/strings/str_join.h"
#include "absl/strings/str_split.h"
#include "tfl/paillier.h"
#include "tfl/rng.h"
#include "tfl/status_macros.h"

namespace tfl {
namespace {

constexpr char kLedgerMagic[] = "tfl-ledger v1";
constexpr uint64_t kSelectTag = 0x53454c45;  // "SELE"

constexpr TxType kAllTxTypes[] = {
    TxType::kUploadPreprocessed, TxType::kAggregatorSelected,
    TxType::kUploadGlobal, TxType::kDownloadGrant, TxType::kClientNotify};

void AppendU64(std::string* out, uint64_t v) {
  for (int shift = 56; shift >= 0; shift -= 8) {
    out->push_back(static_cast<char>((v >> shift) & 0xff));
  }
}

void AppendBytes(std::string* out, absl::string_view s) {
  AppendU64(out, s.size());
  out->append(s.data(), s.size());
}

bool IsActorId(absl::string_view s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
           (c >= '0' && c <= '9') || c == '-' || c == '_' || c == '.' ||
           c == ':';
  });
}

absl::Status ValidateTransaction(const Transaction& tx) {
  if (tx.epoch < 0) return absl::InvalidArgumentError("negative epoch");
  if (!IsActorId(tx.actor)) {
    return absl::InvalidArgumentError(
        absl::StrCat("invalid actor id '", tx.actor, "'"));
  }
  for (const std::string& key : tx.blob_keys) {
    if (!IsHashHex(key)) {
      return absl::InvalidArgumentError(absl::StrCat("invalid blob key '", key, "'"));
    }
  }
  return absl::OkStatus();
}

// Canonical decimal: digits only, no leading zeros.
bool ParseCanonicalU64(absl::string_view s, uint64_t* out) {
  if (s.empty() || s.size() > 20 || (s.size() > 1 && s[0] == '0')) return false;
  uint64_t v = 0;
  for (char c : s) {
    if (c < '0' || c > '9') return false;
    const uint64_t digit = c - '0';
    if (v > (UINT64_MAX - digit) / 10) return false;
    v = v * 10 + digit;
  }
  *out = v;
  return true;
}

bool ParseBlockLine(absl::string_view line, Block* block, uint64_t* tx_count) {
  std::vector<absl::string_view> f = absl::StrSplit(line, ' ');
  if (f.size() != 5 || f[0] != "block") return false;
  if (!ParseCanonicalU64(f[1], &block->index) || !IsHashHex(f[2]) ||
      !IsHashHex(f[3]) || !ParseCanonicalU64(f[4], tx_count) || *tx_count == 0) {
    return false;
  }
  block->prev_hash = std::string(f[2]);
  block->hash = std::string(f[3]);
  return true;
}

bool ParseTxLine(absl::string_view line, Transaction* tx) {
  std::vector<absl::string_view> f = absl::StrSplit(line, ' ');
  if (f.size() < 7 || f[0] != "tx") return false;
  auto type = ParseTxType(f[1]);
  uint64_t epoch = 0, key_count = 0;
  if (!type.ok() || !ParseCanonicalU64(f[2], &epoch) || epoch > INT64_MAX ||
      !IsActorId(f[3]) || !ParseCanonicalU64(f[4], &tx->timestamp) ||
      (f[5] != "0" && f[5] != "1") || !ParseCanonicalU64(f[6], &key_count) ||
      f.size() != 7 + key_count) {
    return false;
  }
  tx->type = *type;
  tx->epoch = static_cast<int64_t>(epoch);
  tx->actor = std::string(f[3]);
  tx->granted = f[5] == "1";
  tx->blob_keys.clear();
  for (size_t i = 7; i < f.size(); ++i) {
    if (!IsHashHex(f[i])) return false;
    tx->blob_keys.emplace_back(f[i]);
  }
  return true;
}

struct TextParse {
  std::vector<Block> blocks;
  // Block index where parsing failed, if it did.
  std::optional<uint64_t> failed_at;
};

TextParse ParseLedgerText(absl::string_view text) {
  TextParse out;
  std::vector<absl::string_view> lines = absl::StrSplit(text, '\n');
  if (lines.empty() || lines[0] != kLedgerMagic) {
    out.failed_at = 0;
    return out;
  }
  const bool terminated = lines.back().empty();
  if (terminated) lines.pop_back();
  size_t i = 1;
  while (i < lines.size()) {
    const uint64_t position = out.blocks.size();
    Block block;
    uint64_t tx_count = 0;
    if (!ParseBlockLine(lines[i], &block, &tx_count) ||
        tx_count > lines.size() - i - 1) {
      out.failed_at = position;
      return out;
    }
    ++i;
    for (uint64_t k = 0; k < tx_count; ++k, ++i) {
      Transaction tx;
      if (!ParseTxLine(lines[i], &tx)) {
        out.failed_at = position;
        return out;
      }
      block.txs.push_back(std::move(tx));
    }
    out.blocks.push_back(std::move(block));
  }
  if (!terminated) {
    out.failed_at = out.blocks.empty() ? 0 : out.blocks.size() - 1;
  }
  return out;
}

}  // namespace

std::string Sha256Hex(absl::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xf]);
  }
  return out;
}

bool IsHashHex(absl::string_view s) {
  return s.size() == 64 && std::all_of(s.begin(), s.end(), [](char c) {
           return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'f');
         });
}

absl::string_view TxTypeName(TxType type) {
  switch (type) {
    case TxType::kUploadPreprocessed:
      return "UploadPreprocessed";
    case TxType::kAggregatorSelected:
      return "AggregatorSelected";
    case TxType::kUploadGlobal:
      return "UploadGlobal";
    case TxType::kDownloadGrant:
      return "DownloadGrant";
    case TxType::kClientNotify:
      return "ClientNotify";
  }
  return "";
}

absl::StatusOr<TxType> ParseTxType(absl::string_view name) {
  for (TxType t : kAllTxTypes) {
    if (TxTypeName(t) == name) return t;
  }
  return absl::InvalidArgumentError(absl::StrCat("unknown tx type '", name, "'"));
}

std::string ComputeBlockHash(uint64_t index, absl::string_view prev_hash,
                             std::span<const Transaction> txs) {
  std::string buf;
  AppendU64(&buf, index);
  AppendBytes(&buf, prev_hash);
  AppendU64(&buf, txs.size());
  for (const Transaction& tx : txs) {
    AppendU64(&buf, static_cast<uint64_t>(tx.type));
    AppendU64(&buf, static_cast<uint64_t>(tx.epoch));
    AppendBytes(&buf, tx.actor);
    AppendU64(&buf, tx.timestamp);
    AppendU64(&buf, tx.granted ? 1 : 0);
    AppendU64(&buf, tx.blob_keys.size());
    for (const std::string& key : tx.blob_keys) AppendBytes(&buf, key);
  }
  return Sha256Hex(buf);
}

std::string DdseStore::Put(std::string bytes) {
  std::string key = Sha256Hex(bytes);
  blobs_.emplace(key, std::move(bytes));
  return key;
}

absl::StatusOr<std::string> DdseStore::Get(absl::string_view key) const {
  auto it = blobs_.find(key);
  if (it == blobs_.end()) {
    return absl::NotFoundError(absl::StrCat("no blob with key ", key));
  }
  if (Sha256Hex(it->second) != key) {
    return absl::DataLossError(absl::StrCat("blob ", key, " fails its hash check"));
  }
  return it->second;
}

bool DdseStore::Contains(absl::string_view key) const {
  return blobs_.find(key) != blobs_.end();
}

std::vector<std::string> DdseStore::Keys() const {
  std::vector<std::string> out;
  for (const auto& [key, blob] : blobs_) out.push_back(key);
  return out;
}

std::optional<std::string> DdseStore::FindCorrupted() const {
  for (const auto& [key, blob] : blobs_) {
    if (Sha256Hex(blob) != key) return key;
  }
  return std::nullopt;
}

absl::Status DdseStore::SaveTo(const std::string& dir) const {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) {
    return absl::InvalidArgumentError(
        absl::StrCat("cannot create ", dir, ": ", ec.message()));
  }
  for (const auto& [key, blob] : blobs_) {
    std::ofstream f(std::filesystem::path(dir) / key, std::ios::binary);
    f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!f) return absl::InternalError(absl::StrCat("cannot write blob ", key));
  }
  return absl::OkStatus();
}

absl::StatusOr<DdseStore> DdseStore::LoadFrom(const std::string& dir) {
  std::error_code ec;
  std::filesystem::directory_iterator it(dir, ec);
  if (ec) {
    return absl::NotFoundError(absl::StrCat("cannot open store ", dir, ": ",
                                            ec.message()));
  }
  DdseStore store;
  for (const auto& entry : it) {
    const std::string name = entry.path().filename().string();
    if (!entry.is_regular_file() || !IsHashHex(name)) {
      return absl::DataLossError(absl::StrCat("unexpected store entry ", name));
    }
    std::ifstream f(entry.path(), std::ios::binary);
    std::ostringstream bytes;
    bytes << f.rdbuf();
    store.blobs_.emplace(name, bytes.str());
  }
  return store;
}

std::string* DdseStore::MutableBlobForTesting(absl::string_view key) {
  auto it = blobs_.find(key);
  return it == blobs_.end() ? nullptr : &it->second;
}

absl::StatusOr<Block> Ledger::AppendBlock(std::vector<Transaction> txs,
                                          const DdseStore& store) {
  if (txs.empty()) return absl::InvalidArgumentError("block without transactions");
  for (const Transaction& tx : txs) {
    TFL_RETURN_IF_ERROR(ValidateTransaction(tx));
    for (const std::string& key : tx.blob_keys) {
      if (!store.Contains(key)) {
        return absl::DataLossError(absl::StrCat("dangling blob key ", key));
      }
    }
  }
  Block block;
  block.index = blocks_.size();
  block.prev_hash = TipHash();
  block.txs = std::move(txs);
  block.hash = ComputeBlockHash(block.index, block.prev_hash, block.txs);
  blocks_.push_back(block);
  return block;
}

const std::string& Ledger::TipHash() const {
  return blocks_.empty() ? kZeroHash : blocks_.back().hash;
}

std::string Ledger::Serialize() const {
  std::string out = absl::StrCat(kLedgerMagic, "\n");
  for (const Block& b : blocks_) {
    absl::StrAppend(&out, "block ", b.index, " ", b.prev_hash, " ", b.hash, " ",
                    b.txs.size(), "\n");
    for (const Transaction& tx : b.txs) {
      absl::StrAppend(&out, "tx ", TxTypeName(tx.type), " ", tx.epoch, " ",
                      tx.actor, " ", tx.timestamp, " ", tx.granted ? 1 : 0, " ",
                      tx.blob_keys.size());
      for (const std::string& key : tx.blob_keys) absl::StrAppend(&out, " ", key);
      out.push_back('\n');
    }
  }
  return out;
}

absl::StatusOr<Ledger> Ledger::Parse(absl::string_view text) {
  TextParse parsed = ParseLedgerText(text);
  if (parsed.failed_at.has_value()) {
    return absl::DataLossError(
        absl::StrCat("ledger does not parse at block ", *parsed.failed_at));
  }
  if (auto bad = VerifyChain(parsed.blocks); bad.has_value()) {
    return absl::DataLossError(absl::StrCat("ledger fails verification at block ", *bad));
  }
  Ledger ledger;
  ledger.blocks_ = std::move(parsed.blocks);
  for (const Block& b : ledger.blocks_) {
    for (const Transaction& tx : b.txs) {
      ledger.clock_ = std::max(ledger.clock_, tx.timestamp + 1);
    }
  }
  return ledger;
}

std::optional<uint64_t> VerifyChain(std::span<const Block> blocks) {
  const std::string* prev = &kZeroHash;
  for (size_t i = 0; i < blocks.size(); ++i) {
    const Block& b = blocks[i];
    if (b.index != i || b.prev_hash != *prev || b.txs.empty() ||
        ComputeBlockHash(b.index, b.prev_hash, b.txs) != b.hash) {
      return i;
    }
    prev = &b.hash;
  }
  return std::nullopt;
}

std::optional<uint64_t> VerifyChain(const Ledger& ledger) {
  return VerifyChain(std::span<const Block>(ledger.blocks()));
}

std::optional<uint64_t> VerifyLedgerText(absl::string_view text) {
  TextParse parsed = ParseLedgerText(text);
  std::optional<uint64_t> bad = VerifyChain(parsed.blocks);
  if (bad.has_value()) return bad;
  return parsed.failed_at;
}

absl::string_view SelectionPolicyName(SelectionPolicy policy) {
  switch (policy) {
    case SelectionPolicy::kRoundRobin:
      return "round-robin";
    case SelectionPolicy::kSeededRandom:
      return "seeded-random";
    case SelectionPolicy::kPrevHash:
      return "prev-hash";
  }
  return "";
}

absl::StatusOr<SelectionPolicy> ParseSelectionPolicy(absl::string_view name) {
  for (SelectionPolicy p : {SelectionPolicy::kRoundRobin,
                            SelectionPolicy::kSeededRandom,
                            SelectionPolicy::kPrevHash}) {
    if (SelectionPolicyName(p) == name) return p;
  }
  return absl::InvalidArgumentError(
      absl::StrCat("unknown aggregator policy '", name, "'"));
}

absl::StatusOr<std::string> SelectAggregator(
    std::span<const std::string> candidates, int64_t epoch,
    SelectionPolicy policy, absl::string_view prev_hash, uint64_t seed) {
  if (candidates.empty()) {
    return absl::InvalidArgumentError("no aggregator candidates");
  }
  if (epoch < 0) return absl::InvalidArgumentError("negative epoch");
  const uint64_t count = candidates.size();
  uint64_t index = 0;
  switch (policy) {
    case SelectionPolicy::kRoundRobin:
      index = static_cast<uint64_t>(epoch) % count;
      break;
    case SelectionPolicy::kSeededRandom: {
      Rng rng(DeriveSeed(seed, {kSelectTag, static_cast<uint64_t>(epoch)}));
      index = UniformBelow(rng, count);
      break;
    }
    case SelectionPolicy::kPrevHash: {
      if (!IsHashHex(prev_hash)) {
        return absl::InvalidArgumentError("prev-hash policy needs a hex hash");
      }
      BigInt h(std::string(prev_hash), 16);
      BigInt r = h % BigInt(static_cast<unsigned long>(count));
      index = r.get_ui();
      break;
    }
  }
  return candidates[index];
}

AccessPolicy AccessPolicy::Default() {
  AccessPolicy p;
  p.Allow(Role::kClient, Action::kUploadLocalModel);
  p.Allow(Role::kClient, Action::kReadLocalModel);
  p.Allow(Role::kClient, Action::kReadGlobal);
  p.Allow(Role::kPreprocNode, Action::kReadLocalModel);
  p.Allow(Role::kPreprocNode, Action::kUploadPreprocessed);
  p.Allow(Role::kSelectedAggregator, Action::kReadPreprocessed);
  p.Allow(Role::kSelectedAggregator, Action::kReadHistory);
  p.Allow(Role::kSelectedAggregator, Action::kReadDecryptionStage);
  p.Allow(Role::kSelectedAggregator, Action::kUploadGlobal);
  p.Allow(Role::kSelectedAggregator, Action::kReadGlobal);
  p.Allow(Role::kAggregatorCandidate, Action::kReadGlobal);
  return p;
}

void AccessPolicy::Allow(Role role, Action action) {
  rules_.emplace(role, action);
}

void AccessPolicy::RecordSelection(int64_t epoch, std::string aggregator) {
  selected_[epoch] = std::move(aggregator);
}

bool AccessPolicy::Check(const AccessRequest& r) const {
  if (!rules_.contains({r.role, r.action})) return false;
  if (r.role == Role::kClient && r.action == Action::kReadLocalModel &&
      r.resource_owner != r.actor) {
    return false;
  }
  if (r.role == Role::kSelectedAggregator) {
    auto it = selected_.find(r.epoch);
    if (it == selected_.end() || it->second != r.actor) return false;
  }
  return true;
}

}  // namespace tfl
