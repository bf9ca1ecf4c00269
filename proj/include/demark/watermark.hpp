#pragma once

// n-gram red/green watermarking: the logit boost applied to a next-token
// distribution, a sampling loop that emits watermarked text, and the z-test
// detector with its theoretical-threshold TPR metric.

#include <cmath>
#include <concepts>
#include <functional>
#include <span>
#include <vector>

#include "demark/core.hpp"
#include "demark/stats.hpp"

namespace demark {

/// Boosts green tokens by e^delta and renormalizes. Evaluated in log space so
/// that log P_W(g) - log P_W(r) - (log P(g) - log P(r)) = delta holds to
/// rounding for every green/red pair.
inline TokenDistribution apply_watermark(const TokenDistribution& p, const WatermarkSpec& spec,
                                         const NGramContext& ctx) {
  if (p.truncated()) throw Error("apply_watermark needs a full distribution, got a truncated one");
  if (ctx.size() != spec.prefix_len()) throw Error("context length does not match prefix_len");
  if (spec.delta() == 0.0) return p;
  const GreenList greens(spec, ctx);
  const double delta = spec.delta();
  const auto entries = p.entries();

  std::vector<double> logits(entries.size());
  double max_logit = -INFINITY;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    logits[i] = std::log(entries[i].prob) + (greens.is_green(entries[i].token) ? delta : 0.0);
    max_logit = std::max(max_logit, logits[i]);
  }
  double sum = 0.0;
  for (double l : logits) sum += std::exp(l - max_logit);
  const double log_norm = max_logit + std::log(sum);

  std::vector<TokenProb> out(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    out[i] = {entries[i].token, std::exp(logits[i] - log_norm)};
  }
  return TokenDistribution(std::move(out), false);
}

/// Anything that yields a full next-token distribution for a history.
template <typename S>
concept DistributionSource = requires(const S& s, std::span<const TokenId> history) {
  { s.next_distribution(history) } -> std::convertible_to<TokenDistribution>;
};

struct GenerateOptions {
  /// Drop the end-of-sequence token from every step so outputs have fixed length.
  bool suppress_eos = true;
  TokenId eos = 1;
};

namespace detail {

inline TokenDistribution without_token(const TokenDistribution& p, TokenId drop) {
  std::vector<TokenProb> kept;
  kept.reserve(p.size());
  for (const auto& e : p.entries()) {
    if (e.token != drop) kept.push_back(e);
  }
  return TokenDistribution::from_weights(std::move(kept));
}

}  // namespace detail

/// Samples `n_tokens` continuations of `prompt`, each drawn from the source's
/// distribution watermarked under the last-h context. Returns only the new tokens.
template <DistributionSource Source>
TokenSeq generate(const Source& source, const WatermarkSpec& spec, std::span<const TokenId> prompt,
                  std::size_t n_tokens, Rng& rng, GenerateOptions options = {}) {
  if (n_tokens < 1) throw Error("n_tokens must be >= 1");
  TokenSeq history(prompt.begin(), prompt.end());
  history.reserve(prompt.size() + n_tokens);
  TokenSeq out;
  out.reserve(n_tokens);
  while (out.size() < n_tokens) {
    TokenDistribution base = source.next_distribution(history);
    if (options.suppress_eos) base = detail::without_token(base, options.eos);
    const auto ctx = NGramContext::from_history(history, spec);
    const TokenId next = sample_token(apply_watermark(base, spec, ctx), rng);
    history.push_back(next);
    out.push_back(next);
    if (!options.suppress_eos && next == options.eos) break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Detection
// ---------------------------------------------------------------------------

/// What a detector needs: the key, h and the green fraction (not delta).
struct DetectorKey {
  std::string secret_key;
  std::size_t prefix_len;
  double green_fraction;

  static DetectorKey from(const WatermarkSpec& spec) {
    return {spec.secret_key(), spec.prefix_len(), spec.green_fraction()};
  }
};

struct DetectionReport {
  std::size_t n_scored = 0;
  std::size_t n_green = 0;
  double z_score = 0.0;
  double p_value = 0.5;
};

inline DetectionReport report_from_counts(std::size_t n_scored, std::size_t n_green, double green_fraction) {
  if (n_green > n_scored) throw Error("n_green exceeds n_scored");
  if (n_scored == 0) throw Error("no scored tokens");
  const double n = static_cast<double>(n_scored);
  const double z = (static_cast<double>(n_green) - green_fraction * n) /
                   std::sqrt(n * green_fraction * (1.0 - green_fraction));
  return {n_scored, n_green, z, stats::normal_sf(z)};
}

/// One-proportion z-test over every position that has a full preceding h-gram.
/// Repeated n-grams are scored every time they occur.
inline DetectionReport detect(std::span<const TokenId> tokens, const DetectorKey& key) {
  const std::size_t h = key.prefix_len;
  if (tokens.size() <= h) {
    throw Error("sequence of length " + std::to_string(tokens.size()) + " is too short to score with prefix_len " +
                std::to_string(h));
  }
  const WatermarkSpec spec(key.secret_key, h, 0.0, key.green_fraction);
  std::size_t greens = 0;
  for (std::size_t i = h; i < tokens.size(); ++i) {
    const GreenList list(spec, tokens.subspan(i - h, h));
    greens += list.is_green(tokens[i]) ? 1 : 0;
  }
  return report_from_counts(tokens.size() - h, greens, key.green_fraction);
}

/// Fraction of z-scores strictly above the theoretical threshold Phi^{-1}(1 - fpr).
inline double tpr_at_fpr(std::span<const double> z_scores, double fpr) {
  if (z_scores.empty()) throw Error("tpr_at_fpr on an empty score list");
  if (!(fpr > 0.0 && fpr < 1.0)) throw Error("fpr must lie in (0, 1)");
  const double threshold = stats::normal_quantile(1.0 - fpr);
  std::size_t hits = 0;
  for (double z : z_scores) hits += z > threshold ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(z_scores.size());
}

}  // namespace demark
