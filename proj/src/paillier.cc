#include "tfl/paillier.h"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <utility>
#include <vector>

#include "absl/status/status.h"
#include "absl/strings/numbers.h"
#include "absl/strings/str_cat.h"
#include "absl/strings/str_split.h"
#include "tfl/status_macros.h"

namespace tfl {
namespace {

constexpr uint64_t kKeygenStreamTag = 0x5041494c4c494552ULL;  // "PAILLIER"

double Log2Abs(const BigInt& v) {
  if (v == 0) return 0.0;
  if (mpz_fits_slong_p(v.get_mpz_t())) {
    return std::max(0.0, std::log2(std::fabs(static_cast<double>(mpz_get_si(v.get_mpz_t())))));
  }
  long exp = 0;
  const double mant = mpz_get_d_2exp(&exp, v.get_mpz_t());
  // |v| < 2^exp and |mant| in [0.5, 1).
  return std::max(0.0, std::log2(std::fabs(mant)) + static_cast<double>(exp));
}

// log2(2^a + 2^b) rounded up slightly so the bound stays conservative.
double Log2SumExp2(double a, double b) {
  const double hi = std::max(a, b);
  const double lo = std::min(a, b);
  return hi + std::log2(1.0 + std::exp2(lo - hi)) + 1e-9;
}

absl::Status CheckCapacity(const PaillierPublicKey& pk, double bits) {
  if (bits >= pk.CapacityBits()) {
    return absl::OutOfRangeError(absl::StrCat(
        "fixed-point capacity overflow: plaintext bound 2^", bits,
        " exceeds n/2 for a ", pk.bit_length, "-bit modulus"));
  }
  return absl::OkStatus();
}

absl::Status CheckCiphertextRange(const PaillierPublicKey& pk,
                                  const Ciphertext& ct) {
  if (ct.value < 0 || ct.value >= pk.n_squared) {
    return absl::OutOfRangeError("ciphertext outside [0, n^2)");
  }
  return absl::OkStatus();
}

BigInt RandomBits(Rng& rng, int bits) {
  BigInt out = 0;
  int remaining = bits;
  while (remaining > 0) {
    const int take = std::min(remaining, 64);
    uint64_t word = rng();
    if (take < 64) word &= (uint64_t{1} << take) - 1;
    out <<= take;
    BigInt w;
    mpz_import(w.get_mpz_t(), 1, 1, sizeof(word), 0, 0, &word);
    out += w;
    remaining -= take;
  }
  return out;
}

BigInt GeneratePrime(int bits, Rng& rng) {
  while (true) {
    BigInt candidate = RandomBits(rng, bits);
    mpz_setbit(candidate.get_mpz_t(), bits - 1);
    mpz_setbit(candidate.get_mpz_t(), bits - 2);
    mpz_setbit(candidate.get_mpz_t(), 0);
    for (; mpz_sizeinbase(candidate.get_mpz_t(), 2) == static_cast<size_t>(bits);
         candidate += 2) {
      if (IsProbablePrime(candidate, kMillerRabinRounds, rng)) return candidate;
    }
  }
}

BigInt PowMod(const BigInt& base, const BigInt& exp, const BigInt& mod) {
  BigInt out;
  mpz_powm(out.get_mpz_t(), base.get_mpz_t(), exp.get_mpz_t(), mod.get_mpz_t());
  return out;
}

BigInt Mod(const BigInt& v, const BigInt& mod) {
  BigInt out;
  mpz_mod(out.get_mpz_t(), v.get_mpz_t(), mod.get_mpz_t());
  return out;
}

}  // namespace

double PaillierPublicKey::CapacityBits() const {
  const BigInt half = (n - 1) / 2;
  return half <= 0 ? 0.0 : Log2Abs(half);
}

BigInt RandomBelow(Rng& rng, const BigInt& bound) {
  const int bits = static_cast<int>(mpz_sizeinbase(bound.get_mpz_t(), 2));
  while (true) {
    BigInt candidate = RandomBits(rng, bits);
    if (candidate < bound) return candidate;
  }
}

bool IsProbablePrime(const BigInt& candidate, int rounds, Rng& rng) {
  if (candidate < 2) return false;
  static constexpr int kSmallPrimes[] = {2,  3,  5,  7,  11, 13, 17, 19,
                                         23, 29, 31, 37, 41, 43, 47};
  for (int sp : kSmallPrimes) {
    if (candidate == sp) return true;
    if (mpz_divisible_ui_p(candidate.get_mpz_t(), sp)) return false;
  }
  const BigInt n_minus_1 = candidate - 1;
  BigInt d = n_minus_1;
  int s = 0;
  while (mpz_even_p(d.get_mpz_t())) {
    d >>= 1;
    ++s;
  }
  for (int round = 0; round < rounds; ++round) {
    const BigInt a = RandomBelow(rng, candidate - 3) + 2;
    BigInt x = PowMod(a, d, candidate);
    if (x == 1 || x == n_minus_1) continue;
    bool composite = true;
    for (int r = 1; r < s; ++r) {
      x = Mod(x * x, candidate);
      if (x == n_minus_1) {
        composite = false;
        break;
      }
    }
    if (composite) return false;
  }
  return true;
}

absl::StatusOr<PaillierKeyPair> KeyPairFromPrimes(const BigInt& p,
                                                  const BigInt& q) {
  if (p == q || p < 2 || q < 2) {
    return absl::InvalidArgumentError("primes must be distinct and >= 2");
  }
  PaillierKeyPair kp;
  kp.pk.n = p * q;
  kp.pk.n_squared = kp.pk.n * kp.pk.n;
  kp.pk.g = kp.pk.n + 1;
  kp.pk.bit_length =
      static_cast<int>(mpz_sizeinbase(kp.pk.n.get_mpz_t(), 2));
  const BigInt p1 = p - 1;
  const BigInt q1 = q - 1;
  BigInt phi_gcd;
  mpz_gcd(phi_gcd.get_mpz_t(), kp.pk.n.get_mpz_t(), BigInt(p1 * q1).get_mpz_t());
  if (phi_gcd != 1) {
    return absl::InvalidArgumentError("gcd(n, (p-1)(q-1)) != 1");
  }
  mpz_lcm(kp.lambda.get_mpz_t(), p1.get_mpz_t(), q1.get_mpz_t());
  const BigInt u = PowMod(kp.pk.g, kp.lambda, kp.pk.n_squared);
  const BigInt l_value = (u - 1) / kp.pk.n;
  if (mpz_invert(kp.mu.get_mpz_t(), l_value.get_mpz_t(), kp.pk.n.get_mpz_t()) ==
      0) {
    return absl::InvalidArgumentError("L(g^lambda) not invertible mod n");
  }
  return kp;
}

absl::StatusOr<PaillierKeyPair> GenerateKeyPair(int bit_length, uint64_t seed) {
  if (bit_length < kMinKeyBits || bit_length % 2 != 0) {
    return absl::InvalidArgumentError(absl::StrCat(
        "key bit-length must be even and >= ", kMinKeyBits, ", got ",
        bit_length));
  }
  Rng rng(DeriveSeed(seed, {kKeygenStreamTag, static_cast<uint64_t>(bit_length)}));
  const int prime_bits = bit_length / 2;
  while (true) {
    const BigInt p = GeneratePrime(prime_bits, rng);
    const BigInt q = GeneratePrime(prime_bits, rng);
    if (p == q) continue;
    auto kp = KeyPairFromPrimes(p, q);
    if (kp.ok()) return kp;
  }
}

PaillierKeyPair AsShadow(PaillierKeyPair kp) {
  kp.pk.backend = Backend::kPlaintextShadow;
  return kp;
}

absl::StatusOr<Ciphertext> EncryptWithNonce(const PaillierPublicKey& pk,
                                            const BigInt& m, const BigInt& r) {
  if (m < 0 || m >= pk.n) {
    return absl::OutOfRangeError("plaintext outside [0, n)");
  }
  Ciphertext ct;
  if (pk.backend == Backend::kPlaintextShadow) {
    ct.value = m;
    return ct;
  }
  // g^m = (1 + n)^m = 1 + m*n (mod n^2).
  const BigInt gm = Mod(1 + m * pk.n, pk.n_squared);
  ct.value = Mod(gm * PowMod(r, pk.n, pk.n_squared), pk.n_squared);
  return ct;
}

absl::StatusOr<Ciphertext> Encrypt(const PaillierPublicKey& pk, const BigInt& m,
                                   Rng& rng) {
  if (pk.backend == Backend::kPlaintextShadow) {
    return EncryptWithNonce(pk, m, 1);
  }
  BigInt r;
  BigInt gcd;
  do {
    r = RandomBelow(rng, pk.n);
    mpz_gcd(gcd.get_mpz_t(), r.get_mpz_t(), pk.n.get_mpz_t());
  } while (r == 0 || gcd != 1);
  return EncryptWithNonce(pk, m, r);
}

absl::StatusOr<BigInt> Decrypt(const PaillierKeyPair& kp, const Ciphertext& ct) {
  const PaillierPublicKey& pk = kp.pk;
  TFL_RETURN_IF_ERROR(CheckCiphertextRange(pk, ct));
  if (pk.backend == Backend::kPlaintextShadow) return Mod(ct.value, pk.n);
  const BigInt u = PowMod(ct.value, kp.lambda, pk.n_squared);
  const BigInt u_minus_1 = u - 1;
  if (!mpz_divisible_p(u_minus_1.get_mpz_t(), pk.n.get_mpz_t())) {
    return absl::OutOfRangeError("ciphertext is not a valid residue for key");
  }
  return Mod((u_minus_1 / pk.n) * kp.mu, pk.n);
}

absl::StatusOr<Ciphertext> HomAdd(const PaillierPublicKey& pk,
                                  const Ciphertext& a, const Ciphertext& b) {
  if (a.scale_exponent != b.scale_exponent) {
    return absl::FailedPreconditionError(
        absl::StrCat("scale mismatch in homomorphic add: ", a.scale_exponent,
                     " vs ", b.scale_exponent));
  }
  TFL_RETURN_IF_ERROR(CheckCiphertextRange(pk, a));
  TFL_RETURN_IF_ERROR(CheckCiphertextRange(pk, b));
  Ciphertext out;
  out.scale_exponent = a.scale_exponent;
  if (a.tracked() && b.tracked()) {
    out.magnitude_bits = Log2SumExp2(a.magnitude_bits, b.magnitude_bits);
    TFL_RETURN_IF_ERROR(CheckCapacity(pk, out.magnitude_bits));
  }
  if (pk.backend == Backend::kPlaintextShadow) {
    out.value = Mod(a.value + b.value, pk.n);
  } else {
    out.value = Mod(a.value * b.value, pk.n_squared);
  }
  return out;
}

absl::StatusOr<Ciphertext> HomScalarMul(const PaillierPublicKey& pk,
                                        const Ciphertext& a, const BigInt& k,
                                        int k_scale) {
  if (k < 0 || k >= pk.n) {
    return absl::OutOfRangeError("scalar outside [0, n)");
  }
  TFL_RETURN_IF_ERROR(CheckCiphertextRange(pk, a));
  Ciphertext out;
  out.scale_exponent = a.scale_exponent + k_scale;
  if (a.tracked()) {
    out.magnitude_bits = a.magnitude_bits + Log2Abs(k) + 1e-9;
    TFL_RETURN_IF_ERROR(CheckCapacity(pk, out.magnitude_bits));
  }
  if (pk.backend == Backend::kPlaintextShadow) {
    out.value = Mod(a.value * k, pk.n);
  } else {
    out.value = PowMod(a.value, k, pk.n_squared);
  }
  return out;
}

absl::StatusOr<Ciphertext> HomScalarMulSigned(const PaillierPublicKey& pk,
                                              const Ciphertext& a,
                                              const BigInt& k, int k_scale) {
  const std::span<const Ciphertext> cts(&a, 1);
  const std::span<const BigInt> ks(&k, 1);
  if (!a.tracked()) {
    // Untracked operands wrap; negate through the residue.
    const BigInt residue = Mod(k, pk.n);
    return HomScalarMul(pk, a, residue, k_scale);
  }
  return HomLinearCombination(pk, cts, ks, k_scale);
}

namespace {

// prod_j bases[j]^exps[j] mod m. Large products use the bucket method over
// w-bit exponent windows, which needs far fewer multiplications than one
// modular exponentiation per term.
BigInt MultiExp(const std::vector<const BigInt*>& bases,
                const std::vector<BigInt>& exps, const BigInt& m) {
  BigInt acc = 1;
  if (bases.empty()) return acc;
  size_t max_bits = 1;
  for (const BigInt& e : exps) {
    max_bits = std::max(max_bits, mpz_sizeinbase(e.get_mpz_t(), 2));
  }
  const size_t n = bases.size();
  if (n < 32) {
    BigInt term;
    for (size_t j = 0; j < n; ++j) {
      mpz_powm(term.get_mpz_t(), bases[j]->get_mpz_t(), exps[j].get_mpz_t(),
               m.get_mpz_t());
      acc *= term;
      mpz_mod(acc.get_mpz_t(), acc.get_mpz_t(), m.get_mpz_t());
    }
    return acc;
  }
  int w = 1;
  double best = 1e300;
  for (int c = 1; c <= 12; ++c) {
    const double windows = std::ceil(static_cast<double>(max_bits) / c);
    const double cost = windows * (static_cast<double>(n) + 2.0 * std::exp2(c) + c);
    if (cost < best) {
      best = cost;
      w = c;
    }
  }
  const size_t windows = (max_bits + w - 1) / w;
  std::vector<BigInt> buckets(size_t{1} << w);
  std::vector<bool> used(buckets.size());
  BigInt running, total;
  for (size_t win = windows; win-- > 0;) {
    for (int s = 0; s < w && win + 1 < windows; ++s) {
      acc *= acc;
      mpz_mod(acc.get_mpz_t(), acc.get_mpz_t(), m.get_mpz_t());
    }
    std::fill(used.begin(), used.end(), false);
    const mp_bitcnt_t low = static_cast<mp_bitcnt_t>(win * w);
    for (size_t j = 0; j < n; ++j) {
      size_t digit = 0;
      for (int b = w - 1; b >= 0; --b) {
        digit = (digit << 1) | mpz_tstbit(exps[j].get_mpz_t(), low + b);
      }
      if (digit == 0) continue;
      if (!used[digit]) {
        buckets[digit] = *bases[j];
        used[digit] = true;
      } else {
        buckets[digit] *= *bases[j];
        mpz_mod(buckets[digit].get_mpz_t(), buckets[digit].get_mpz_t(),
                m.get_mpz_t());
      }
    }
    // sum_d d * bucket[d] as running products from the top digit down.
    bool have_running = false;
    bool have_total = false;
    for (size_t d = buckets.size() - 1; d >= 1; --d) {
      if (used[d]) {
        if (have_running) {
          running *= buckets[d];
          mpz_mod(running.get_mpz_t(), running.get_mpz_t(), m.get_mpz_t());
        } else {
          running = buckets[d];
          have_running = true;
        }
      }
      if (!have_running) continue;
      if (have_total) {
        total *= running;
        mpz_mod(total.get_mpz_t(), total.get_mpz_t(), m.get_mpz_t());
      } else {
        total = running;
        have_total = true;
      }
    }
    if (have_total) {
      acc *= total;
      mpz_mod(acc.get_mpz_t(), acc.get_mpz_t(), m.get_mpz_t());
    }
  }
  return acc;
}

}  // namespace

absl::StatusOr<Ciphertext> HomLinearCombination(
    const PaillierPublicKey& pk, std::span<const Ciphertext> cts,
    std::span<const BigInt> coefficients, int coefficient_scale) {
  if (cts.empty() || cts.size() != coefficients.size()) {
    return absl::InvalidArgumentError(
        "linear combination needs equal, non-zero operand counts");
  }
  const int scale = cts.front().scale_exponent;
  double max_bits = -1.0;
  std::vector<double> term_bits(cts.size());
  for (size_t j = 0; j < cts.size(); ++j) {
    if (cts[j].scale_exponent != scale) {
      return absl::FailedPreconditionError(
          "scale mismatch in linear combination");
    }
    if (!cts[j].tracked()) {
      return absl::FailedPreconditionError(
          "linear combination requires magnitude-tracked ciphertexts");
    }
    TFL_RETURN_IF_ERROR(CheckCiphertextRange(pk, cts[j]));
    term_bits[j] = cts[j].magnitude_bits + Log2Abs(coefficients[j]);
    max_bits = std::max(max_bits, term_bits[j]);
  }
  // Bound sum_j |k_j| 2^{b_j} relative to the largest term.
  double relative = 0.0;
  for (size_t j = 0; j < cts.size(); ++j) {
    if (coefficients[j] == 0) continue;
    relative += std::exp2(term_bits[j] - max_bits);
  }
  Ciphertext out;
  out.scale_exponent = scale + coefficient_scale;
  out.magnitude_bits = max_bits + std::log2(std::max(relative, 1.0)) + 1e-9;
  TFL_RETURN_IF_ERROR(CheckCapacity(pk, out.magnitude_bits));

  if (pk.backend == Backend::kPlaintextShadow) {
    // Exact 128-bit accumulation whenever the tracked bounds allow it.
    bool small = out.magnitude_bits < 125.0;
    for (size_t j = 0; small && j < cts.size(); ++j) {
      small = cts[j].magnitude_bits < 62.0 && mpz_fits_slong_p(coefficients[j].get_mpz_t());
    }
    if (small) {
      __int128 acc = 0;
      BigInt neg;
      for (size_t j = 0; j < cts.size(); ++j) {
        const mpz_srcptr v = cts[j].value.get_mpz_t();
        int64_t x;
        if (mpz_fits_slong_p(v)) {
          x = mpz_get_si(v);
        } else {
          mpz_sub(neg.get_mpz_t(), pk.n.get_mpz_t(), v);
          x = -mpz_get_si(neg.get_mpz_t());
        }
        acc += static_cast<__int128>(x) * mpz_get_si(coefficients[j].get_mpz_t());
      }
      const bool negative = acc < 0;
      const unsigned __int128 mag =
          negative ? -static_cast<unsigned __int128>(acc) : static_cast<unsigned __int128>(acc);
      BigInt r = BigInt(static_cast<unsigned long>(mag >> 64));
      r <<= 64;
      r += static_cast<unsigned long>(mag & ~uint64_t{0});
      out.value = negative ? BigInt(pk.n - r) : r;
      if (out.value == pk.n) out.value = 0;
      return out;
    }
    BigInt acc = 0;
    for (size_t j = 0; j < cts.size(); ++j) acc += cts[j].value * coefficients[j];
    out.value = Mod(acc, pk.n);
    return out;
  }
  std::vector<const BigInt*> pos_bases, neg_bases;
  std::vector<BigInt> pos_exps, neg_exps;
  for (size_t j = 0; j < cts.size(); ++j) {
    const int sign = sgn(coefficients[j]);
    if (sign == 0) continue;
    (sign > 0 ? pos_bases : neg_bases).push_back(&cts[j].value);
    (sign > 0 ? pos_exps : neg_exps).push_back(abs(coefficients[j]));
  }
  BigInt positive = MultiExp(pos_bases, pos_exps, pk.n_squared);
  BigInt negative = MultiExp(neg_bases, neg_exps, pk.n_squared);
  const bool any_negative = !neg_bases.empty();
  if (any_negative) {
    BigInt inverse;
    if (mpz_invert(inverse.get_mpz_t(), negative.get_mpz_t(),
                   pk.n_squared.get_mpz_t()) == 0) {
      return absl::InvalidArgumentError("ciphertext not invertible mod n^2");
    }
    positive = Mod(positive * inverse, pk.n_squared);
  }
  out.value = std::move(positive);
  return out;
}

FixedPointCodec::FixedPointCodec(BigInt modulus, int scale_bits)
    : modulus_(std::move(modulus)),
      half_((modulus_ - 1) / 2),
      scale_bits_(scale_bits) {}

absl::StatusOr<BigInt> FixedPointCodec::EncodeSigned(double x) const {
  if (!std::isfinite(x)) {
    return absl::InvalidArgumentError("cannot encode a non-finite value");
  }
  const double scaled = std::nearbyint(std::ldexp(x, scale_bits_));
  BigInt v;
  mpz_set_d(v.get_mpz_t(), scaled);
  if (abs(v) > half_) {
    return absl::OutOfRangeError(absl::StrCat(
        "fixed-point capacity overflow encoding ", x, " at ", scale_bits_,
        " scale bits"));
  }
  return v;
}

absl::StatusOr<BigInt> FixedPointCodec::Encode(double x) const {
  TFL_ASSIGN_OR_RETURN(BigInt v, EncodeSigned(x));
  return ToResidue(v);
}

BigInt FixedPointCodec::ToResidue(const BigInt& signed_value) const {
  return Mod(signed_value, modulus_);
}

BigInt FixedPointCodec::ToSigned(const BigInt& residue) const {
  return residue > half_ ? BigInt(residue - modulus_) : residue;
}

double FixedPointCodec::Decode(const BigInt& residue, int scale_exponent) const {
  return std::ldexp(BigIntToDouble(ToSigned(residue)), -scale_exponent);
}

double BigIntToDouble(const BigInt& v) {
  if (mpz_fits_slong_p(v.get_mpz_t())) {
    return static_cast<double>(mpz_get_si(v.get_mpz_t()));
  }
  return mpz_get_d(v.get_mpz_t());
}

absl::StatusOr<Ciphertext> EncryptReal(const PaillierPublicKey& pk,
                                       const FixedPointCodec& codec, double x,
                                       Rng& rng) {
  TFL_ASSIGN_OR_RETURN(const BigInt v, codec.EncodeSigned(x));
  TFL_ASSIGN_OR_RETURN(Ciphertext ct, Encrypt(pk, codec.ToResidue(v), rng));
  ct.scale_exponent = codec.scale_bits();
  ct.magnitude_bits = Log2Abs(v) + 1e-9;
  return ct;
}

absl::StatusOr<double> DecryptReal(const PaillierKeyPair& kp,
                                   const FixedPointCodec& codec,
                                   const Ciphertext& ct) {
  TFL_ASSIGN_OR_RETURN(const BigInt m, Decrypt(kp, ct));
  return codec.Decode(m, ct.scale_exponent);
}

std::string SerializeKeyPair(const PaillierKeyPair& kp) {
  return absl::StrCat(kp.pk.n.get_str(), "\n", kp.pk.g.get_str(), "\n",
                      kp.lambda.get_str(), "\n", kp.mu.get_str(), "\n",
                      kp.pk.bit_length, "\n");
}

absl::StatusOr<PaillierKeyPair> ParseKeyPair(const std::string& text) {
  std::vector<std::string> lines = absl::StrSplit(text, '\n');
  if (!lines.empty() && lines.back().empty()) lines.pop_back();
  if (lines.size() != 5) {
    return absl::InvalidArgumentError("key file must have exactly 5 lines");
  }
  PaillierKeyPair kp;
  BigInt* fields[] = {&kp.pk.n, &kp.pk.g, &kp.lambda, &kp.mu};
  for (int i = 0; i < 4; ++i) {
    if (lines[i].empty() ||
        fields[i]->set_str(lines[i], 10) != 0 || *fields[i] <= 0) {
      return absl::InvalidArgumentError(
          absl::StrCat("malformed key field on line ", i + 1));
    }
  }
  int bits = 0;
  if (!absl::SimpleAtoi(lines[4], &bits) || bits < kMinKeyBits) {
    return absl::InvalidArgumentError("malformed key bit-length");
  }
  kp.pk.bit_length = bits;
  kp.pk.n_squared = kp.pk.n * kp.pk.n;
  if (kp.pk.g != kp.pk.n + 1) {
    return absl::InvalidArgumentError("key generator must be n + 1");
  }
  return kp;
}

}  // namespace tfl
