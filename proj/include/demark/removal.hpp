#pragma once

// Using stolen parameters: undoing the watermark at decode time, forging it
// on another model, and the distribution-distance bound for removal.

#include <cmath>
#include <span>
#include <unordered_map>
#include <vector>

#include "demark/core.hpp"
#include "demark/oracle.hpp"
#include "demark/steal.hpp"
#include "demark/watermark.hpp"

namespace demark {

struct RemovalConfig {
  /// Removal strength; estimated-green tokens are scaled by e^{-eta * delta_hat}.
  double eta = 1.0;
  /// Candidate window fetched per decoding step.
  std::size_t top_k = 20;

  void validate() const {
    if (!(eta >= 0.0) || !std::isfinite(eta)) throw ConfigError("removal.eta", "must be finite and >= 0");
    if (top_k < 1) throw ConfigError("removal.top_k", "must be >= 1");
  }
};

/// Scales entries colored green by e^{-eta * delta_hat} and renormalizes over
/// the listed entries. `colors` is aligned with `p_w.entries()`.
inline TokenDistribution remove_watermark(const TokenDistribution& p_w, std::span<const Color> colors,
                                          double delta_hat, double eta) {
  if (colors.size() != p_w.size()) throw Error("one color per candidate is required");
  const double scale = std::exp(-eta * delta_hat);
  std::vector<TokenProb> out(p_w.entries().begin(), p_w.entries().end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (colors[i] == Color::green) out[i].prob *= scale;
  }
  return TokenDistribution::from_weights(std::move(out));
}

/// One removal step: classify every candidate under the last h_hat tokens of
/// `history`, then invert the boost. Classification failures propagate.
inline TokenDistribution remove_step(const TokenDistribution& p_w, std::span<const TokenId> history,
                                     const RemovalConfig& config, double delta_hat, ColorClassifier& classifier) {
  std::vector<Color> colors(p_w.size(), Color::red);
  if (config.eta * delta_hat != 0.0) {
    TokenSeq candidates;
    candidates.reserve(p_w.size());
    for (const auto& e : p_w.entries()) candidates.push_back(e.token);
    colors = classifier.classify_all(history, candidates);
  }
  return remove_watermark(p_w, colors, delta_hat, config.eta);
}

namespace detail {

inline TokenDistribution drop_token(const TokenDistribution& p, TokenId drop) {
  std::vector<TokenProb> kept;
  kept.reserve(p.size());
  for (const auto& e : p.entries()) {
    if (e.token != drop) kept.push_back(e);
  }
  return TokenDistribution(std::move(kept), true);
}

}  // namespace detail

/// Decodes from a watermarked gray-box oracle with the watermark removed:
/// top-k, classify, invert, renormalize within the window, sample.
inline TokenSeq remove_generate(const Oracle& oracle, const StolenParams& stolen, ColorClassifier& classifier,
                                const RemovalConfig& config, std::span<const TokenId> prompt, std::size_t n_tokens,
                                Rng& rng, GenerateOptions options = {}) {
  config.validate();
  if (n_tokens < 1) throw Error("n_tokens must be >= 1");
  TokenSeq history(prompt.begin(), prompt.end());
  TokenSeq out;
  out.reserve(n_tokens);
  while (out.size() < n_tokens) {
    TokenDistribution window = oracle.top_k(history, config.top_k);
    if (options.suppress_eos) window = detail::drop_token(window, options.eos);
    if (window.size() == 0) throw Error("top-k window is empty after EOS suppression");
    const TokenDistribution p_r = remove_step(window, history, config, stolen.delta_hat, classifier);
    const TokenId next = sample_token(p_r, rng);
    history.push_back(next);
    out.push_back(next);
    if (!options.suppress_eos && next == options.eos) break;
  }
  return out;
}

/// Forges the watermark on an attacker model: each step boosts the
/// attacker's top-k candidates that the stolen rule colors green by
/// e^{delta_hat} over its full distribution. Tokens outside the window keep
/// their probability (treated as red).
template <DistributionSource Source>
TokenSeq exploit_generate(const Source& attacker, const StolenParams& stolen, ColorClassifier& classifier,
                          std::span<const TokenId> prompt, std::size_t n_tokens, Rng& rng, std::size_t top_k = 20,
                          GenerateOptions options = {}) {
  if (n_tokens < 1) throw Error("n_tokens must be >= 1");
  if (top_k < 1) throw ConfigError("removal.top_k", "must be >= 1");
  TokenSeq history(prompt.begin(), prompt.end());
  TokenSeq out;
  out.reserve(n_tokens);
  const double boost = std::exp(stolen.delta_hat);
  while (out.size() < n_tokens) {
    TokenDistribution base = attacker.next_distribution(history);
    if (options.suppress_eos) base = detail::without_token(base, options.eos);
    std::vector<TokenProb> weights(base.entries().begin(), base.entries().end());
    if (stolen.delta_hat != 0.0) {
      const TokenDistribution window = base.top_k(top_k);
      TokenSeq candidates;
      for (const auto& e : window.entries()) candidates.push_back(e.token);
      const auto colors = classifier.classify_all(history, candidates);
      std::unordered_map<TokenId, Color> color_of;
      for (std::size_t i = 0; i < candidates.size(); ++i) color_of.emplace(candidates[i], colors[i]);
      for (auto& w : weights) {
        const auto it = color_of.find(w.token);
        if (it != color_of.end() && it->second == Color::green) w.prob *= boost;
      }
    }
    const TokenId next = sample_token(TokenDistribution::from_weights(std::move(weights)), rng);
    history.push_back(next);
    out.push_back(next);
    if (!options.suppress_eos && next == options.eos) break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Distance bound
// ---------------------------------------------------------------------------

struct TvBoundInputs {
  /// Probability mass (under the original P) whose estimated color is wrong.
  double epsilon1;
  /// Bound on |delta - delta_hat|.
  double epsilon2;
  /// True watermark strength.
  double delta;
};

/// Upper bound on sum_t |P_R(t) - P(t)| after removal with eta = 1:
/// eps1 * f2 + (1 - eps1) * f1.
inline double tv_bound(const TvBoundInputs& in) {
  const double e1 = in.epsilon1;
  const double e2 = in.epsilon2;
  const double d = in.delta;
  if (!(e1 >= 0.0 && e1 <= 1.0)) throw Error("epsilon1 must lie in [0, 1]");
  if (!(e2 >= 0.0)) throw Error("epsilon2 must be >= 0");
  if (!(d >= 0.0)) throw Error("delta must be >= 0");
  if (e1 == 1.0) throw Error("bound undefined at epsilon1 = 1");
  const double denom = (1.0 - e1) + e1 * std::exp(d - e2);
  const double f1 = std::max(std::exp(2.0 * e2) / (1.0 - e1) - 1.0, 1.0 - std::exp(-2.0 * e2) / denom);
  const double f2 = std::max(std::exp(d + 2.0 * e2) / (1.0 - e1) - 1.0, 1.0 - std::exp(-d - 2.0 * e2) / denom);
  return e1 * f2 + (1.0 - e1) * f1;
}

/// sum_t |P(t) - Q(t)| over the union of supports (twice the usual TV).
inline double l1_distance(const TokenDistribution& p, const TokenDistribution& q) {
  std::unordered_map<TokenId, double> diff;
  for (const auto& e : p.entries()) diff[e.token] += e.prob;
  for (const auto& e : q.entries()) diff[e.token] -= e.prob;
  double s = 0.0;
  for (const auto& [t, v] : diff) s += std::abs(v);
  return s;
}

}  // namespace demark
