#pragma once

// Domain types shared by every stage of the toolkit: token ids, vocabularies,
// the secret watermark rule, n-gram contexts, probability vectors, and the
// keyed partition that colors each token red or green for a given context.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

namespace demark {

using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;

/// Reserved id used to left-pad contexts shorter than the n-gram length.
inline constexpr TokenId kPadToken = 0;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid configuration; `field()` names the offending entry.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// The oracle cannot serve this kind of request (e.g. exact probabilities in
/// sampling-only mode, or an API that returns no log-probabilities).
struct CapabilityError : Error {
  using Error::Error;
};

/// Transport-level failure that may succeed when retried.
struct TransientError : Error {
  using Error::Error;
};

struct AuthError : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Hashing / PRF
// ---------------------------------------------------------------------------

namespace hash {

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Absorbs a byte string 8 bytes at a time (little-endian, zero padded),
/// then the length.
inline std::uint64_t digest_bytes(std::string_view bytes, std::uint64_t state = 0x6A09E667F3BCC908ULL) noexcept {
  std::size_t i = 0;
  while (i < bytes.size()) {
    std::uint64_t chunk = 0;
    for (std::size_t b = 0; b < 8 && i < bytes.size(); ++b, ++i) {
      chunk |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i])) << (8 * b);
    }
    state = mix64(state ^ chunk);
  }
  return mix64(state ^ static_cast<std::uint64_t>(bytes.size()));
}

/// Order-sensitive absorption of one token.
constexpr std::uint64_t absorb(std::uint64_t state, std::uint64_t value) noexcept {
  return mix64(state ^ ((value + 1) * 0xD1B54A32D192ED03ULL));
}

inline std::uint64_t absorb_tokens(std::uint64_t state, std::span<const TokenId> tokens) noexcept {
  for (TokenId t : tokens) state = absorb(state, t);
  return absorb(state, 0xFFFFFFFFULL + tokens.size());
}

/// Uniform double in [0, 1) from the top 53 bits.
constexpr double to_unit(std::uint64_t x) noexcept {
  return static_cast<double>(x >> 11) * 0x1.0p-53;
}

}  // namespace hash

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

class Vocabulary {
 public:
  Vocabulary() : Vocabulary(2, {}) {}

  /// `special` always gains the pad id.
  Vocabulary(std::size_t size, std::set<TokenId> special, TokenId eos = kPadToken)
      : size_(size), special_(std::move(special)), eos_(eos) {
    special_.insert(kPadToken);
    if (eos_ != kPadToken) special_.insert(eos_);
    if (size_ < 2) throw ConfigError("vocab_size", "must be at least 2");
    for (TokenId t : special_) {
      if (t >= size_) throw ConfigError("special_tokens", "id " + std::to_string(t) + " outside vocabulary");
    }
    pool_.reserve(size_ - special_.size());
    for (TokenId t = 0; t < size_; ++t) {
      if (!special_.contains(t)) pool_.push_back(t);
    }
    if (pool_.size() < 2) throw ConfigError("special_tokens", "fewer than two probeable tokens remain");
  }

  /// Default layout: id 0 pads, id 1 ends sequences.
  static Vocabulary with_defaults(std::size_t size) { return Vocabulary(size, {kPadToken, 1}, 1); }

  std::size_t size() const noexcept { return size_; }
  const std::set<TokenId>& special_tokens() const noexcept { return special_; }
  TokenId eos() const noexcept { return eos_; }
  bool has_eos() const noexcept { return eos_ != kPadToken; }
  bool is_special(TokenId t) const { return special_.contains(t); }

  /// Tokens eligible as probe targets and random contexts, ascending.
  std::span<const TokenId> probe_pool() const noexcept { return pool_; }

 private:
  std::size_t size_;
  std::set<TokenId> special_;
  TokenId eos_;
  TokenSeq pool_;
};

// ---------------------------------------------------------------------------
// WatermarkSpec
// ---------------------------------------------------------------------------

/// The secret rule: key, n-gram length h, logit boost delta, green fraction.
class WatermarkSpec {
 public:
  WatermarkSpec() : WatermarkSpec("demark", 3, 2.0, 0.5) {}

  WatermarkSpec(std::string secret_key, std::size_t prefix_len, double delta, double green_fraction)
      : key_(std::move(secret_key)), prefix_len_(prefix_len), delta_(delta), green_fraction_(green_fraction) {
    if (prefix_len_ < 1) throw ConfigError("prefix_len", "must be >= 1");
    if (!(delta_ >= 0.0) || !std::isfinite(delta_)) throw ConfigError("delta", "must be finite and >= 0");
    if (!(green_fraction_ > 0.0 && green_fraction_ < 1.0)) throw ConfigError("green_fraction", "must lie in (0, 1)");
    key_digest_ = hash::digest_bytes(key_);
    threshold_ = static_cast<std::uint64_t>(std::ldexp(green_fraction_, 64));
  }

  const std::string& secret_key() const noexcept { return key_; }
  std::size_t prefix_len() const noexcept { return prefix_len_; }
  double delta() const noexcept { return delta_; }
  double green_fraction() const noexcept { return green_fraction_; }

  std::uint64_t key_digest() const noexcept { return key_digest_; }
  std::uint64_t green_threshold() const noexcept { return threshold_; }

  WatermarkSpec with_delta(double delta) const { return {key_, prefix_len_, delta, green_fraction_}; }

  friend bool operator==(const WatermarkSpec& a, const WatermarkSpec& b) {
    return a.key_ == b.key_ && a.prefix_len_ == b.prefix_len_ && a.delta_ == b.delta_ &&
           a.green_fraction_ == b.green_fraction_;
  }

 private:
  std::string key_;
  std::size_t prefix_len_;
  double delta_;
  double green_fraction_;
  std::uint64_t key_digest_ = 0;
  std::uint64_t threshold_ = 0;
};

inline std::string to_hex(std::string_view bytes) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (unsigned char c : bytes) {
    out.push_back(kDigits[c >> 4]);
    out.push_back(kDigits[c & 0xF]);
  }
  return out;
}

inline std::string from_hex(std::string_view hex, const std::string& field = "secret_key_hex") {
  auto nibble = [&](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    throw ConfigError(field, "invalid hex digit");
  };
  if (hex.size() % 2 != 0) throw ConfigError(field, "odd number of hex digits");
  std::string out(hex.size() / 2, '\0');
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<char>(nibble(hex[2 * i]) * 16 + nibble(hex[2 * i + 1]));
  }
  return out;
}

inline nlohmann::json to_json(const WatermarkSpec& spec) {
  return {{"secret_key_hex", to_hex(spec.secret_key())},
          {"prefix_len", spec.prefix_len()},
          {"delta", spec.delta()},
          {"green_fraction", spec.green_fraction()}};
}

namespace detail {

template <typename T>
T required(const nlohmann::json& j, const std::string& key, const std::string& scope) {
  const std::string field = scope.empty() ? key : scope + "." + key;
  if (!j.is_object() || !j.contains(key)) throw ConfigError(field, "missing");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(field, "wrong type");
  }
}

template <typename T>
T optional(const nlohmann::json& j, const std::string& key, T fallback, const std::string& scope) {
  if (!j.is_object() || !j.contains(key)) return fallback;
  return required<T>(j, key, scope);
}

}  // namespace detail

inline WatermarkSpec watermark_spec_from_json(const nlohmann::json& j, const std::string& scope = "") {
  auto prefixed = [&](const char* f) { return scope.empty() ? std::string(f) : scope + "." + f; };
  const auto key = from_hex(detail::required<std::string>(j, "secret_key_hex", scope), prefixed("secret_key_hex"));
  const auto h = detail::required<long long>(j, "prefix_len", scope);
  if (h < 1) throw ConfigError(prefixed("prefix_len"), "must be >= 1");
  const auto delta = detail::required<double>(j, "delta", scope);
  const auto gf = detail::required<double>(j, "green_fraction", scope);
  try {
    return WatermarkSpec(key, static_cast<std::size_t>(h), delta, gf);
  } catch (const ConfigError& e) {
    throw ConfigError(prefixed(e.field().c_str()), e.what());
  }
}

// ---------------------------------------------------------------------------
// NGramContext
// ---------------------------------------------------------------------------

/// Exactly h token ids: the last h tokens of a history, left-padded.
class NGramContext {
 public:
  static NGramContext from_history(std::span<const TokenId> history, std::size_t h) {
    NGramContext ctx;
    ctx.tokens_.assign(h, kPadToken);
    const std::size_t take = std::min(h, history.size());
    std::copy(history.end() - static_cast<std::ptrdiff_t>(take), history.end(),
              ctx.tokens_.end() - static_cast<std::ptrdiff_t>(take));
    return ctx;
  }

  static NGramContext from_history(std::span<const TokenId> history, const WatermarkSpec& spec) {
    return from_history(history, spec.prefix_len());
  }

  std::span<const TokenId> tokens() const noexcept { return tokens_; }
  std::size_t size() const noexcept { return tokens_.size(); }

  friend bool operator==(const NGramContext&, const NGramContext&) = default;

 private:
  TokenSeq tokens_;
};

// ---------------------------------------------------------------------------
// Partition
// ---------------------------------------------------------------------------

enum class Color : std::uint8_t { red = 0, green = 1 };

inline const char* to_string(Color c) noexcept { return c == Color::green ? "green" : "red"; }

inline Color color_from_string(std::string_view s) {
  if (s == "green") return Color::green;
  if (s == "red") return Color::red;
  throw Error("unknown color '" + std::string(s) + "'");
}

inline Color opposite(Color c) noexcept { return c == Color::green ? Color::red : Color::green; }

/// The green list of one (key, context) pair. Holds the absorbed context
/// state so coloring the whole vocabulary costs one mix per token.
///
/// PRF(key, ctx, t) = mix64(S ^ mix64(t)) where S is the key digest with the
/// context tokens absorbed in order (see `hash::absorb_tokens`). The token is
/// green iff PRF < floor(green_fraction * 2^64).
class GreenList {
 public:
  GreenList(const WatermarkSpec& spec, std::span<const TokenId> ctx_tokens)
      : state_(hash::absorb_tokens(spec.key_digest(), ctx_tokens)), threshold_(spec.green_threshold()) {}

  GreenList(const WatermarkSpec& spec, const NGramContext& ctx) : GreenList(spec, ctx.tokens()) {}

  Color color(TokenId token) const noexcept {
    return hash::mix64(state_ ^ hash::mix64(token)) < threshold_ ? Color::green : Color::red;
  }
  bool is_green(TokenId token) const noexcept { return color(token) == Color::green; }

 private:
  std::uint64_t state_;
  std::uint64_t threshold_;
};

inline Color partition(const WatermarkSpec& spec, const NGramContext& ctx, TokenId token) {
  if (ctx.size() != spec.prefix_len()) throw Error("context length does not match prefix_len");
  return GreenList(spec, ctx).color(token);
}

// ---------------------------------------------------------------------------
// Seeded randomness
// ---------------------------------------------------------------------------

using Rng = std::mt19937_64;

/// Deterministic stream for (seed, label). Distinct labels give unrelated streams.
inline Rng seeded_rng(std::uint64_t seed, std::string_view stream_label) {
  const std::uint64_t s = hash::digest_bytes(stream_label, hash::mix64(seed));
  std::seed_seq seq{static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(s >> 32),
                    static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  return Rng(seq);
}

inline Rng seeded_rng(std::uint64_t seed, std::string_view stream_label, std::uint64_t index) {
  return seeded_rng(seed, std::string(stream_label) + "#" + std::to_string(index));
}

/// Uniform [0,1) from the generator's raw bits (portable across standard libraries).
inline double uniform01(Rng& rng) { return hash::to_unit(rng()); }

/// `count` distinct tokens drawn uniformly from `pool`, in draw order.
inline TokenSeq sample_distinct(std::span<const TokenId> pool, std::size_t count, Rng& rng) {
  if (count > pool.size()) throw Error("cannot draw " + std::to_string(count) + " distinct tokens from a pool of " +
                                       std::to_string(pool.size()));
  TokenSeq out;
  out.reserve(count);
  std::set<TokenId> seen;
  while (out.size() < count) {
    const TokenId t = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
    if (seen.insert(t).second) out.push_back(t);
  }
  return out;
}

/// `count` tokens drawn uniformly (with replacement) from `pool`.
inline TokenSeq sample_tokens(std::span<const TokenId> pool, std::size_t count, Rng& rng) {
  TokenSeq out(count);
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  for (auto& t : out) t = pool[pick(rng)];
  return out;
}

// ---------------------------------------------------------------------------
// TokenDistribution
// ---------------------------------------------------------------------------

struct TokenProb {
  TokenId token;
  double prob;
  friend bool operator==(const TokenProb&, const TokenProb&) = default;
};

inline constexpr double kNormTolerance = 1e-9;

/// Probability vector over token ids; either full (sums to 1) or a top-k
/// truncation (sums to at most 1).
class TokenDistribution {
 public:
  TokenDistribution() = default;

  TokenDistribution(std::vector<TokenProb> entries, bool truncated = false)
      : entries_(std::move(entries)), truncated_(truncated) {
    double total = 0.0;
    for (const auto& e : entries_) {
      if (!(e.prob > 0.0)) throw Error("token " + std::to_string(e.token) + " has non-positive probability");
      total += e.prob;
    }
    if (!truncated_ && std::abs(total - 1.0) > kNormTolerance) {
      throw Error("distribution not normalized (sum=" + std::to_string(total) + ")");
    }
    if (truncated_ && total > 1.0 + kNormTolerance) throw Error("truncated distribution sums above 1");
  }

  /// Normalizes positive weights into a full distribution.
  static TokenDistribution from_weights(std::vector<TokenProb> weights) {
    double total = 0.0;
    for (const auto& e : weights) total += e.prob;
    if (!(total > 0.0)) throw Error("weights sum to zero");
    for (auto& e : weights) e.prob /= total;
    return TokenDistribution(std::move(weights), false);
  }

  std::span<const TokenProb> entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool truncated() const noexcept { return truncated_; }

  double total() const noexcept {
    double s = 0.0;
    for (const auto& e : entries_) s += e.prob;
    return s;
  }

  /// Probability of `token`, 0 when absent.
  double prob(TokenId token) const noexcept {
    for (const auto& e : entries_) {
      if (e.token == token) return e.prob;
    }
    return 0.0;
  }

  /// The k most probable entries (ties broken by lower id), un-renormalized.
  TokenDistribution top_k(std::size_t k) const {
    std::vector<TokenProb> sorted = entries_;
    auto by_prob = [](const TokenProb& a, const TokenProb& b) {
      return a.prob != b.prob ? a.prob > b.prob : a.token < b.token;
    };
    const std::size_t keep = std::min(k, sorted.size());
    std::partial_sort(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(keep), sorted.end(), by_prob);
    sorted.resize(keep);
    return TokenDistribution(std::move(sorted), truncated_ || keep < entries_.size());
  }

  /// Renormalized copy over the listed entries (clears the truncated flag).
  TokenDistribution renormalized() const {
    return from_weights(entries_);
  }

 private:
  std::vector<TokenProb> entries_;
  bool truncated_ = false;
};

/// Inverse-CDF draw from a distribution's entries (renormalizing on the fly).
inline TokenId sample_token(const TokenDistribution& dist, Rng& rng) {
  const auto entries = dist.entries();
  if (entries.empty()) throw Error("cannot sample from an empty distribution");
  double target = uniform01(rng) * dist.total();
  for (const auto& e : entries) {
    target -= e.prob;
    if (target < 0.0) return e.token;
  }
  return entries.back().token;
}

}  // namespace demark
