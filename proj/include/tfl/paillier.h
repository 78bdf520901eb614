#ifndef TFL_PAILLIER_H_
#define TFL_PAILLIER_H_

// Paillier cryptosystem (g = n + 1 variant) with a signed fixed-point codec.
//
// Ciphertexts optionally carry a conservative log2 bound on the magnitude of
// the signed plaintext they hold. Every homomorphic operation on tracked
// ciphertexts re-checks that bound against n/2, so any computation that
// completes decodes to the exact integer result of the same operations on the
// encoded plaintexts. Ciphertexts produced from raw residues are untracked and
// wrap modulo n.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <gmpxx.h>

#include "absl/status/statusor.h"
#include "tfl/rng.h"

namespace tfl {

using BigInt = mpz_class;

inline constexpr int kMinKeyBits = 16;
inline constexpr int kDefaultKeyBits = 128;
inline constexpr int kDefaultScaleBits = 16;
inline constexpr int kMillerRabinRounds = 40;

// kPlaintextShadow keeps the residue m itself as the "ciphertext" and applies
// the same ring operations modulo n. Decrypted values are bit-identical to the
// Paillier backend; it exists so large simulation sweeps can skip the modular
// exponentiations. It provides no confidentiality.
enum class Backend { kPaillier, kPlaintextShadow };

struct PaillierPublicKey {
  BigInt n;
  BigInt n_squared;
  BigInt g;
  int bit_length = 0;
  Backend backend = Backend::kPaillier;

  // Largest signed magnitude representable: floor((n - 1) / 2).
  double CapacityBits() const;
};

struct PaillierKeyPair {
  PaillierPublicKey pk;
  BigInt lambda;
  BigInt mu;
};

struct Ciphertext {
  static constexpr double kUntracked = std::numeric_limits<double>::quiet_NaN();

  BigInt value;
  int scale_exponent = 0;
  // log2 upper bound of |signed plaintext|; NaN when untracked.
  double magnitude_bits = kUntracked;

  bool tracked() const { return !std::isnan(magnitude_bits); }
};

// Random big integer in [0, bound).
BigInt RandomBelow(Rng& rng, const BigInt& bound);
bool IsProbablePrime(const BigInt& candidate, int rounds, Rng& rng);

absl::StatusOr<PaillierKeyPair> GenerateKeyPair(int bit_length, uint64_t seed);
// Builds a key pair from explicit primes; used for worked examples.
absl::StatusOr<PaillierKeyPair> KeyPairFromPrimes(const BigInt& p,
                                                  const BigInt& q);
// Same key material, plaintext-shadow backend.
PaillierKeyPair AsShadow(PaillierKeyPair kp);

absl::StatusOr<Ciphertext> Encrypt(const PaillierPublicKey& pk, const BigInt& m,
                                   Rng& rng);
// Encryption with a caller-chosen nonce r (gcd(r, n) must be 1).
absl::StatusOr<Ciphertext> EncryptWithNonce(const PaillierPublicKey& pk,
                                            const BigInt& m, const BigInt& r);
absl::StatusOr<BigInt> Decrypt(const PaillierKeyPair& kp, const Ciphertext& ct);

absl::StatusOr<Ciphertext> HomAdd(const PaillierPublicKey& pk,
                                  const Ciphertext& a, const Ciphertext& b);
// Multiplies the plaintext by a residue k in [0, n). k_scale is the
// fixed-point scale exponent of k and is added to the result's scale.
absl::StatusOr<Ciphertext> HomScalarMul(const PaillierPublicKey& pk,
                                        const Ciphertext& a, const BigInt& k,
                                        int k_scale = 0);
// Multiplies by a signed integer scalar; negative scalars go through the
// ciphertext inverse so the exponent stays small.
absl::StatusOr<Ciphertext> HomScalarMulSigned(const PaillierPublicKey& pk,
                                              const Ciphertext& a,
                                              const BigInt& k, int k_scale);
// Computes Enc(sum_j k_j * m_j). All inputs must share a scale exponent and
// be tracked; the magnitude bound of the result is checked before any
// exponentiation happens.
absl::StatusOr<Ciphertext> HomLinearCombination(
    const PaillierPublicKey& pk, std::span<const Ciphertext> cts,
    std::span<const BigInt> coefficients, int coefficient_scale);

// Signed fixed-point mapping between reals and residues mod n.
class FixedPointCodec {
 public:
  FixedPointCodec(BigInt modulus, int scale_bits = kDefaultScaleBits);

  int scale_bits() const { return scale_bits_; }
  const BigInt& modulus() const { return modulus_; }

  // round(x * 2^scale_bits) as a signed integer; fails when the value does
  // not fit below n/2.
  absl::StatusOr<BigInt> EncodeSigned(double x) const;
  // EncodeSigned mapped into [0, n); negatives become n - |v|.
  absl::StatusOr<BigInt> Encode(double x) const;
  BigInt ToResidue(const BigInt& signed_value) const;
  BigInt ToSigned(const BigInt& residue) const;
  double Decode(const BigInt& residue, int scale_exponent) const;

 private:
  BigInt modulus_;
  BigInt half_;
  int scale_bits_;
};

// Signed big integer to double, rounding to nearest.
double BigIntToDouble(const BigInt& v);

absl::StatusOr<Ciphertext> EncryptReal(const PaillierPublicKey& pk,
                                       const FixedPointCodec& codec, double x,
                                       Rng& rng);
absl::StatusOr<double> DecryptReal(const PaillierKeyPair& kp,
                                   const FixedPointCodec& codec,
                                   const Ciphertext& ct);

// Key files: decimal n, g, lambda, mu and bit-length, one per line.
std::string SerializeKeyPair(const PaillierKeyPair& kp);
absl::StatusOr<PaillierKeyPair> ParseKeyPair(const std::string& text);

}  // namespace tfl

#endif  // TFL_PAILLIER_H_
