#pragma once

// Access to "probability that the watermarked model continues a random
// selection probe with token T". Implementations: the deterministic synthetic
// language model below (used by every test), and the HTTP client in
// remote_oracle.hpp.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <ostream>
#include <span>
#include <string>
#include <string_view>

#include <json.hpp>

#include "demark/core.hpp"
#include "demark/watermark.hpp"

namespace demark {

/// Probe access level: exact first-token probabilities (gray box) or sampled
/// completions only (black box).
enum class ProbeMode { exact, sampled };

inline const char* to_string(ProbeMode m) noexcept { return m == ProbeMode::exact ? "L1" : "L0"; }

inline ProbeMode probe_mode_from_string(std::string_view s) {
  if (s == "L1" || s == "exact") return ProbeMode::exact;
  if (s == "L0" || s == "sampled") return ProbeMode::sampled;
  throw ConfigError("oracle.mode", "expected L1 or L0, got '" + std::string(s) + "'");
}

/// Which candidate is listed first in the probe prompt.
enum class ProbeOrder { ij, ji };

struct ProbeQuery {
  TokenSeq context;
  TokenId first;
  TokenId second;
  ProbeOrder order = ProbeOrder::ij;

  TokenId listed_first() const noexcept { return order == ProbeOrder::ij ? first : second; }
  TokenId listed_second() const noexcept { return order == ProbeOrder::ij ? second : first; }
};

/// Probabilities of `first` and `second` for one probe order (not renormalized).
struct RawPair {
  double p_first;
  double p_second;
  bool low_confidence = false;
};

/// First-token hit counts over `n_samples` sampled completions of one probe order.
struct ProbeCounts {
  int first;
  int second;
  int n_samples;
};

/// Output of the probability estimation function: renormalized over the pair.
struct ProbePair {
  double p_first;
  double p_second;
};

class Oracle {
 public:
  virtual ~Oracle() = default;

  virtual ProbeMode mode() const = 0;
  /// Samples per probe order in sampled mode.
  virtual int sample_count() const = 0;
  virtual const Vocabulary& vocabulary() const = 0;
  virtual std::string_view source_name() const = 0;

  virtual RawPair probe_exact(const ProbeQuery& query) const = 0;
  virtual ProbeCounts probe_sample(const ProbeQuery& query) const = 0;
  /// The k most probable next tokens of the watermarked model, un-renormalized.
  virtual TokenDistribution top_k(std::span<const TokenId> context, std::size_t k) const = 0;

  /// Number of requests served (one per probe order, one per top-k call).
  virtual std::uint64_t query_count() const noexcept { return queries_.load(std::memory_order_relaxed); }

 protected:
  void count_query() const noexcept { queries_.fetch_add(1, std::memory_order_relaxed); }

 private:
  mutable std::atomic<std::uint64_t> queries_{0};
};

inline void validate_probe(const Vocabulary& vocab, TokenId first, TokenId second) {
  if (first == second) throw Error("probe candidates must differ");
  for (TokenId t : {first, second}) {
    if (t >= vocab.size()) throw Error("probe token " + std::to_string(t) + " outside vocabulary");
    if (vocab.is_special(t)) throw Error("probe token " + std::to_string(t) + " is a special token");
  }
}

/// Clamps a sampled count into [1, n_s - 1].
inline int clamp_count(int count, int n_samples) { return std::min(std::max(count, 1), n_samples - 1); }

/// Estimates P(T_i | x, T_i, T_j) and P(T_j | x, T_i, T_j) by querying both
/// candidate orders. Exact mode sums the two orders' probabilities per token
/// and renormalizes over the pair; sampled mode does the same with clamped
/// first-token counts.
inline ProbePair estimate_pair(const Oracle& oracle, std::span<const TokenId> context, TokenId ti, TokenId tj) {
  validate_probe(oracle.vocabulary(), ti, tj);
  ProbeQuery q{TokenSeq(context.begin(), context.end()), ti, tj, ProbeOrder::ij};
  double num_i = 0.0;
  double num_j = 0.0;
  if (oracle.mode() == ProbeMode::exact) {
    const RawPair a = oracle.probe_exact(q);
    q.order = ProbeOrder::ji;
    const RawPair b = oracle.probe_exact(q);
    num_i = a.p_first + b.p_first;
    num_j = a.p_second + b.p_second;
  } else {
    const int n = oracle.sample_count();
    if (n < 2) throw ConfigError("oracle.n_samples", "sampled probing needs at least 2 samples");
    const ProbeCounts a = oracle.probe_sample(q);
    q.order = ProbeOrder::ji;
    const ProbeCounts b = oracle.probe_sample(q);
    num_i = clamp_count(a.first, n) + clamp_count(b.first, n);
    num_j = clamp_count(a.second, n) + clamp_count(b.second, n);
  }
  const double total = num_i + num_j;
  if (!(total > 0.0)) throw Error("probe returned no mass on either candidate");
  return {num_i / total, num_j / total};
}

// ---------------------------------------------------------------------------
// Synthetic language model
// ---------------------------------------------------------------------------

struct SyntheticLMConfig {
  Vocabulary vocab = Vocabulary::with_defaults(1000);
  /// Hidden watermark the model applies to everything it emits.
  WatermarkSpec spec;
  /// Bound on the symmetric probe noise epsilon; must stay below 0.5.
  double noise_max = 0.0;
  std::uint64_t base_seed = 0;
  ProbeMode mode = ProbeMode::exact;
  int n_samples = 10;

  // Shape of the base next-token distribution: a Dirichlet(1) draw over
  // `support_size` context-keyed tokens mixed with `floor_mass` spread
  // uniformly over the rest, keyed on the last `base_context` tokens.
  std::size_t support_size = 16;
  double floor_mass = 0.02;
  std::size_t base_context = 2;

  void validate() const {
    if (!(noise_max >= 0.0 && noise_max < 0.5)) throw ConfigError("oracle.noise_max", "must lie in [0, 0.5)");
    if (support_size < 1 || support_size > vocab.probe_pool().size()) {
      throw ConfigError("oracle.support_size", "must lie in [1, probeable vocabulary size]");
    }
    if (!(floor_mass > 0.0 && floor_mass < 1.0)) throw ConfigError("oracle.floor_mass", "must lie in (0, 1)");
    if (n_samples < 1) throw ConfigError("oracle.n_samples", "must be >= 1");
  }
};

/// Deterministic stand-in for a watermarked LM service. Every method is a pure
/// function of its arguments and the config, so it is safe to share across
/// threads; only the query counter mutates.
///
/// Probes: the unwatermarked model prefers T_i over T_j by a token-attached
/// noise, P(T_i) = 0.5 + eps, P(T_j) = 0.5 - eps, independent of which one is
/// listed first. eps = noise_max * u with u uniform in [-1, 1], hashed from
/// (base_seed, x, {T_i, T_j}) and antisymmetric in the pair. The watermark
/// (keyed on the last h tokens of x) is then applied to that two-token
/// distribution.
class SyntheticLM final : public Oracle {
 public:
  explicit SyntheticLM(SyntheticLMConfig config) : config_(std::move(config)) { config_.validate(); }

  const SyntheticLMConfig& config() const noexcept { return config_; }
  const WatermarkSpec& spec() const noexcept { return config_.spec; }

  ProbeMode mode() const override { return config_.mode; }
  int sample_count() const override { return config_.n_samples; }
  const Vocabulary& vocabulary() const override { return config_.vocab; }
  std::string_view source_name() const override { return "synthetic"; }

  /// Unwatermarked next-token distribution (never contains the pad token).
  TokenDistribution next_distribution(std::span<const TokenId> history) const {
    const auto& vocab = config_.vocab;
    const std::size_t window = std::min(config_.base_context, history.size());
    const std::uint64_t key =
        hash::absorb_tokens(hash::mix64(config_.base_seed ^ 0xB5AD4ECEDA1CE2A9ULL), history.last(window));
    Rng rng(key);

    const auto pool = vocab.probe_pool();
    const TokenSeq support = sample_distinct(pool, config_.support_size, rng);
    std::vector<double> draws(support.size());
    double draw_sum = 0.0;
    for (double& d : draws) {
      d = -std::log1p(-uniform01(rng));  // Exp(1) == Gamma(1)
      draw_sum += d;
    }

    const std::size_t n_tokens = pool.size() + (vocab.has_eos() ? 1 : 0);
    const double floor = config_.floor_mass / static_cast<double>(n_tokens);
    std::vector<TokenProb> entries;
    entries.reserve(n_tokens);
    if (vocab.has_eos()) entries.push_back({vocab.eos(), floor});
    for (TokenId t : pool) entries.push_back({t, floor});
    std::sort(entries.begin(), entries.end(), [](const TokenProb& a, const TokenProb& b) { return a.token < b.token; });
    for (std::size_t s = 0; s < support.size(); ++s) {
      auto it = std::lower_bound(entries.begin(), entries.end(), support[s],
                                 [](const TokenProb& e, TokenId t) { return e.token < t; });
      it->prob += (1.0 - config_.floor_mass) * draws[s] / draw_sum;
    }
    return TokenDistribution::from_weights(std::move(entries));
  }

  /// The distribution the watermarked service actually samples from.
  TokenDistribution watermarked_distribution(std::span<const TokenId> history) const {
    return apply_watermark(next_distribution(history), config_.spec, NGramContext::from_history(history, config_.spec));
  }

  /// Signed noise attached to `ti` in the pair {ti, tj} under probe context x.
  double probe_noise(std::span<const TokenId> context, TokenId ti, TokenId tj) const {
    if (config_.noise_max == 0.0) return 0.0;
    const TokenId lo = std::min(ti, tj);
    const TokenId hi = std::max(ti, tj);
    std::uint64_t h = hash::absorb_tokens(hash::mix64(config_.base_seed ^ 0x5851F42D4C957F2DULL), context);
    h = hash::absorb(hash::absorb(h, lo), hi);
    const double u = 2.0 * hash::to_unit(h) - 1.0;
    const double eps = config_.noise_max * u;
    return ti == lo ? eps : -eps;
  }

  /// Watermarked probability of `first` and `second` for one presentation.
  RawPair probe_distribution(const ProbeQuery& q) const {
    const double eps = probe_noise(q.context, q.first, q.second);
    const GreenList greens(config_.spec, NGramContext::from_history(q.context, config_.spec));
    const double delta = config_.spec.delta();
    // Work with the log odds so large delta cannot overflow.
    const double boost = (greens.is_green(q.first) ? delta : 0.0) - (greens.is_green(q.second) ? delta : 0.0);
    const double log_odds = std::log(0.5 + eps) - std::log(0.5 - eps) + boost;
    const double p_first = 1.0 / (1.0 + std::exp(-log_odds));
    const double p_second = 1.0 / (1.0 + std::exp(log_odds));
    return {p_first, p_second};
  }

  RawPair probe_exact(const ProbeQuery& q) const override {
    if (config_.mode != ProbeMode::exact) throw CapabilityError("synthetic oracle is in sampled (L0) mode");
    validate_probe(config_.vocab, q.first, q.second);
    count_query();
    return probe_distribution(q);
  }

  ProbeCounts probe_sample(const ProbeQuery& q) const override {
    validate_probe(config_.vocab, q.first, q.second);
    count_query();
    const RawPair p = probe_distribution(q);
    // Keyed on the presentation so swapping (T_i, T_j) together with the
    // order replays the same completions.
    std::uint64_t h = hash::absorb_tokens(hash::mix64(config_.base_seed ^ 0x2545F4914F6CDD1DULL), q.context);
    h = hash::absorb(hash::absorb(hash::absorb(h, q.listed_first()), q.listed_second()),
                     static_cast<std::uint64_t>(config_.n_samples));
    Rng rng(h);
    const double p_listed_first = q.order == ProbeOrder::ij ? p.p_first : p.p_second;
    int hits = 0;
    for (int s = 0; s < config_.n_samples; ++s) hits += uniform01(rng) < p_listed_first ? 1 : 0;
    const int misses = config_.n_samples - hits;
    return q.order == ProbeOrder::ij ? ProbeCounts{hits, misses, config_.n_samples}
                                     : ProbeCounts{misses, hits, config_.n_samples};
  }

  TokenDistribution top_k(std::span<const TokenId> context, std::size_t k) const override {
    if (config_.mode != ProbeMode::exact) throw CapabilityError("synthetic oracle is in sampled (L0) mode");
    if (k < 1) throw Error("top_k needs k >= 1");
    count_query();
    return watermarked_distribution(context).top_k(k);
  }

 private:
  SyntheticLMConfig config_;
};

/// Unwatermarked view of a synthetic model, for attacker-side generation.
class BaseModel {
 public:
  explicit BaseModel(const SyntheticLM& lm) : lm_(&lm) {}
  TokenDistribution next_distribution(std::span<const TokenId> history) const { return lm_->next_distribution(history); }

 private:
  const SyntheticLM* lm_;
};

// ---------------------------------------------------------------------------
// Transcript logging
// ---------------------------------------------------------------------------

/// Forwards to another oracle and appends one JSONL line per probe:
/// {context, t_i, t_j, order, p_i, p_j, source}.
class TranscriptOracle final : public Oracle {
 public:
  TranscriptOracle(const Oracle& inner, std::ostream& sink) : inner_(inner), sink_(sink) {}

  ProbeMode mode() const override { return inner_.mode(); }
  int sample_count() const override { return inner_.sample_count(); }
  const Vocabulary& vocabulary() const override { return inner_.vocabulary(); }
  std::string_view source_name() const override { return inner_.source_name(); }
  std::uint64_t query_count() const noexcept override { return inner_.query_count(); }

  RawPair probe_exact(const ProbeQuery& q) const override {
    const RawPair p = inner_.probe_exact(q);
    log(q, p.p_first, p.p_second);
    return p;
  }

  ProbeCounts probe_sample(const ProbeQuery& q) const override {
    const ProbeCounts c = inner_.probe_sample(q);
    const double n = static_cast<double>(c.n_samples);
    log(q, c.first / n, c.second / n);
    return c;
  }

  TokenDistribution top_k(std::span<const TokenId> context, std::size_t k) const override {
    return inner_.top_k(context, k);
  }

 private:
  void log(const ProbeQuery& q, double pi, double pj) const {
    nlohmann::json line = {{"context", q.context},
                           {"t_i", q.first},
                           {"t_j", q.second},
                           {"order", q.order == ProbeOrder::ij ? "ij" : "ji"},
                           {"p_i", pi},
                           {"p_j", pj},
                           {"source", std::string(inner_.source_name())}};
    std::lock_guard lock(mutex_);
    sink_ << line.dump() << '\n';
  }

  const Oracle& inner_;
  std::ostream& sink_;
  mutable std::mutex mutex_;
};

}  // namespace demark
