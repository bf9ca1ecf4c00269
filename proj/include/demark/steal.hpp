#pragma once

// Watermark stealing from probe queries alone: pairwise log-ratio matrices,
// token scores, the n-gram length search, the strength estimate, and the
// green-list classifier with its per-context memo.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "demark/core.hpp"
#include "demark/oracle.hpp"

namespace demark {

/// Collected no cross-color evidence; more rounds or targets are needed.
struct InsufficientSignal : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Hyperparameters
// ---------------------------------------------------------------------------

struct StealHyper {
  double alpha1 = 0.2;
  double alpha2 = 10.0;
  double beta = 0.8;
  double gamma = 0.1;
  std::size_t m = 50;
  std::size_t c = 5;

  void validate() const {
    if (!(alpha1 > 0.0)) throw ConfigError("steal.alpha1", "must be > 0");
    if (!(alpha1 < alpha2)) throw ConfigError("steal.alpha2", "must exceed alpha1");
    if (!(beta > 0.0 && beta <= 1.0)) throw ConfigError("steal.beta", "must lie in (0, 1]");
    if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("steal.gamma", "must lie in (0, 1)");
    if (m < 2) throw ConfigError("steal.m", "must be >= 2");
    if (c < 1) throw ConfigError("steal.c", "must be >= 1");
  }
};

inline nlohmann::json to_json(const StealHyper& h) {
  return {{"alpha1", h.alpha1}, {"alpha2", h.alpha2}, {"beta", h.beta},
          {"gamma", h.gamma},   {"m", h.m},           {"c", h.c}};
}

inline StealHyper steal_hyper_from_json(const nlohmann::json& j, const std::string& scope = "steal") {
  StealHyper h;
  h.alpha1 = detail::optional<double>(j, "alpha1", h.alpha1, scope);
  h.alpha2 = detail::optional<double>(j, "alpha2", h.alpha2, scope);
  h.beta = detail::optional<double>(j, "beta", h.beta, scope);
  h.gamma = detail::optional<double>(j, "gamma", h.gamma, scope);
  const auto m = detail::optional<long long>(j, "m", static_cast<long long>(h.m), scope);
  const auto c = detail::optional<long long>(j, "c", static_cast<long long>(h.c), scope);
  if (m < 2) throw ConfigError(scope + ".m", "must be >= 2");
  if (c < 1) throw ConfigError(scope + ".c", "must be >= 1");
  h.m = static_cast<std::size_t>(m);
  h.c = static_cast<std::size_t>(c);
  h.validate();
  return h;
}

// ---------------------------------------------------------------------------
// Ratio matrix and scores
// ---------------------------------------------------------------------------

/// R[i][j] = log(P(T_i) / P(T_j)) under one probe context; antisymmetric.
class RatioMatrix {
 public:
  RatioMatrix(TokenSeq targets) : targets_(std::move(targets)), values_(targets_.size() * targets_.size(), 0.0) {}

  std::size_t size() const noexcept { return targets_.size(); }
  const TokenSeq& targets() const noexcept { return targets_; }

  double operator()(std::size_t i, std::size_t j) const noexcept { return values_[i * size() + j]; }

  /// Sets R[i][j] = value and R[j][i] = -value.
  void set_pair(std::size_t i, std::size_t j, double value) noexcept {
    values_[i * size() + j] = value;
    values_[j * size() + i] = -value;
  }

  RatioMatrix negated() const {
    RatioMatrix out = *this;
    for (double& v : out.values_) v = -v;
    return out;
  }

 private:
  TokenSeq targets_;
  std::vector<double> values_;
};

inline void validate_targets(const Vocabulary& vocab, std::span<const TokenId> targets) {
  std::unordered_set<TokenId> seen;
  for (TokenId t : targets) {
    if (t >= vocab.size() || vocab.is_special(t)) throw Error("target " + std::to_string(t) + " is not probeable");
    if (!seen.insert(t).second) throw Error("targets must be pairwise distinct");
  }
}

/// One estimate per unordered pair, m(m-1)/2 calls. Any failing pair aborts.
inline RatioMatrix relative_ratios(const Oracle& oracle, std::span<const TokenId> context,
                                   std::span<const TokenId> targets) {
  validate_targets(oracle.vocabulary(), targets);
  RatioMatrix r(TokenSeq(targets.begin(), targets.end()));
  for (std::size_t i = 0; i < targets.size(); ++i) {
    for (std::size_t j = i + 1; j < targets.size(); ++j) {
      const ProbePair p = estimate_pair(oracle, context, targets[i], targets[j]);
      r.set_pair(i, j, std::log(p.p_first / p.p_second));
    }
  }
  return r;
}

struct TokenScores {
  TokenSeq targets;
  std::vector<int> scores;
};

/// s_i counts R[i][j] inside (alpha1, alpha2) up and inside (-alpha2, -alpha1) down.
inline TokenScores token_scores(const RatioMatrix& r, double alpha1, double alpha2) {
  if (!(alpha1 < alpha2)) throw ConfigError("steal.alpha2", "must exceed alpha1");
  TokenScores s{r.targets(), std::vector<int>(r.size(), 0)};
  for (std::size_t i = 0; i < r.size(); ++i) {
    for (std::size_t j = 0; j < r.size(); ++j) {
      const double v = r(i, j);
      if (alpha1 < v && v < alpha2) {
        ++s.scores[i];
      } else if (-alpha2 < v && v < -alpha1) {
        --s.scores[i];
      }
    }
  }
  return s;
}

inline TokenScores token_scores(const Oracle& oracle, std::span<const TokenId> context,
                                std::span<const TokenId> targets, double alpha1, double alpha2) {
  return token_scores(relative_ratios(oracle, context, targets), alpha1, alpha2);
}

// ---------------------------------------------------------------------------
// n-gram length
// ---------------------------------------------------------------------------

/// Fraction of targets whose scores have the same strict sign in both vectors.
/// A zero score in either vector counts as inconsistent.
inline double consistency_rate(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size() || a.empty()) throw Error("score vectors must be non-empty and equally long");
  std::size_t agree = 0;
  for (std::size_t i = 0; i < a.size(); ++i) agree += (a[i] * b[i] > 0) ? 1 : 0;
  return static_cast<double>(agree) / static_cast<double>(a.size());
}

/// Consistency curve for one sampled context of length h_max:
/// result[h'] = cr between suffix lengths h' and h'-1, for h' in [2, h_max]
/// (entries 0 and 1 are unused).
inline std::vector<double> prefix_consistency(const Oracle& oracle, std::size_t h_max, const StealHyper& hyper,
                                              Rng& rng) {
  const auto pool = oracle.vocabulary().probe_pool();
  const TokenSeq x = sample_tokens(pool, h_max, rng);
  const TokenSeq targets = sample_distinct(pool, hyper.m, rng);
  std::vector<std::vector<int>> scores(h_max + 1);
  for (std::size_t hp = h_max; hp >= 1; --hp) {
    const std::span<const TokenId> suffix = std::span(x).last(hp);
    scores[hp] = token_scores(oracle, suffix, targets, hyper.alpha1, hyper.alpha2).scores;
  }
  std::vector<double> cr(h_max + 1, 1.0);
  for (std::size_t hp = h_max; hp >= 2; --hp) cr[hp] = consistency_rate(scores[hp], scores[hp - 1]);
  return cr;
}

/// Largest h' (scanning down from h_max) whose consistency drops below beta, else 1.
inline std::size_t prefix_length_from_curve(std::span<const double> cr, double beta) {
  if (cr.size() < 3) return 1;
  for (std::size_t hp = cr.size() - 1; hp >= 2; --hp) {
    if (cr[hp] < beta) return hp;
  }
  return 1;
}

/// Estimates the n-gram length. With `repeats` > 1 each repeat samples a fresh
/// context and the most frequent answer wins (ties go to the smaller h).
/// A true h above h_max cannot be detected and yields a wrong answer.
inline std::size_t identify_h(const Oracle& oracle, std::size_t h_max, const StealHyper& hyper, Rng& rng,
                              std::size_t repeats = 1) {
  if (h_max < 1) throw ConfigError("steal.h_max", "must be >= 1");
  if (repeats < 1) throw ConfigError("steal.h_repeats", "must be >= 1");
  std::map<std::size_t, std::size_t> votes;
  for (std::size_t r = 0; r < repeats; ++r) {
    if (h_max == 1) {
      ++votes[1];
      continue;
    }
    ++votes[prefix_length_from_curve(prefix_consistency(oracle, h_max, hyper, rng), hyper.beta)];
  }
  std::size_t best = 1;
  std::size_t best_votes = 0;
  for (const auto& [h, n] : votes) {
    if (n > best_votes) {
      best = h;
      best_votes = n;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Strength
// ---------------------------------------------------------------------------

/// Appends R[i][j] for every pair with s_i > gamma*m and s_j < -gamma*m.
inline void collect_extreme_ratios(const RatioMatrix& r, const TokenScores& s, double gamma,
                                   std::vector<double>& out) {
  const double cut = gamma * static_cast<double>(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (!(s.scores[i] > cut)) continue;
    for (std::size_t j = 0; j < r.size(); ++j) {
      if (s.scores[j] < -cut) out.push_back(r(i, j));
    }
  }
}

/// Mean log-ratio between strongly-green and strongly-red targets over c
/// rounds of fresh (context, targets). Each round's scores come from the same
/// probe batch as its ratio matrix.
inline double identify_delta(const Oracle& oracle, std::size_t h, const StealHyper& hyper, Rng& rng) {
  if (h < 1) throw ConfigError("h", "must be >= 1");
  const auto pool = oracle.vocabulary().probe_pool();
  std::vector<double> collected;
  for (std::size_t round = 0; round < hyper.c; ++round) {
    const TokenSeq x = sample_tokens(pool, h, rng);
    const TokenSeq targets = sample_distinct(pool, hyper.m, rng);
    const RatioMatrix r = relative_ratios(oracle, x, targets);
    collect_extreme_ratios(r, token_scores(r, hyper.alpha1, hyper.alpha2), hyper.gamma, collected);
  }
  if (collected.empty()) {
    throw InsufficientSignal("no target pair cleared the +/- gamma*m score cut after " + std::to_string(hyper.c) +
                             " rounds; increase c or m");
  }
  double sum = 0.0;
  for (double v : collected) sum += v;
  return sum / static_cast<double>(collected.size());
}

// ---------------------------------------------------------------------------
// Green list
// ---------------------------------------------------------------------------

/// R' = sgn(R) * min(|R| / delta_hat, delta_hat / |R|), with R' = 0 where R = 0.
inline double adjusted_ratio(double r, double delta_hat) noexcept {
  if (r == 0.0) return 0.0;
  const double a = std::abs(r);
  return std::copysign(std::min(a / delta_hat, delta_hat / a), r);
}

/// Classifies every target of `r`: green iff sum_j |s_j| R'[i][j] > 0 with
/// raw scores s_j = sum_k R'[j][k].
inline std::vector<Color> classify_targets(const RatioMatrix& r, double delta_hat) {
  if (!(delta_hat > 0.0)) throw Error("delta_hat must be > 0 to classify");
  const std::size_t m = r.size();
  std::vector<double> adj(m * m);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) adj[i * m + j] = adjusted_ratio(r(i, j), delta_hat);
  }
  std::vector<double> raw(m, 0.0);
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t k = 0; k < m; ++k) raw[j] += adj[j * m + k];
  }
  std::vector<Color> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += std::abs(raw[j]) * adj[i * m + j];
    out[i] = s > 0.0 ? Color::green : Color::red;
  }
  return out;
}

/// The estimated green subset of `targets` under `context`, in target order.
inline TokenSeq identify_green(const Oracle& oracle, std::span<const TokenId> context,
                               std::span<const TokenId> targets, double delta_hat) {
  const RatioMatrix r = relative_ratios(oracle, context, targets);
  const auto colors = classify_targets(r, delta_hat);
  TokenSeq greens;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (colors[i] == Color::green) greens.push_back(targets[i]);
  }
  return greens;
}

// ---------------------------------------------------------------------------
// Color cache and stolen parameters
// ---------------------------------------------------------------------------

/// (n-gram, token) -> color. Concurrent readers, exclusive writers; the first
/// color stored for a key is kept.
class ColorCache {
 public:
  ColorCache() = default;
  ColorCache(const ColorCache& other) : entries_(other.snapshot()) {}
  ColorCache& operator=(const ColorCache& other) {
    if (this != &other) {
      auto copy = other.snapshot();
      std::unique_lock lock(mutex_);
      entries_ = std::move(copy);
    }
    return *this;
  }

  std::optional<Color> find(std::span<const TokenId> ngram, TokenId token) const {
    std::shared_lock lock(mutex_);
    const auto it = entries_.find(TokenSeq(ngram.begin(), ngram.end()));
    if (it == entries_.end()) return std::nullopt;
    const auto& row = it->second;
    const auto pos = std::lower_bound(row.begin(), row.end(), token,
                                      [](const auto& e, TokenId t) { return e.first < t; });
    if (pos == row.end() || pos->first != token) return std::nullopt;
    return pos->second;
  }

  /// Returns false when the key was already present (existing color kept).
  bool insert(std::span<const TokenId> ngram, TokenId token, Color color) {
    std::unique_lock lock(mutex_);
    auto& row = entries_[TokenSeq(ngram.begin(), ngram.end())];
    const auto pos = std::lower_bound(row.begin(), row.end(), token,
                                      [](const auto& e, TokenId t) { return e.first < t; });
    if (pos != row.end() && pos->first == token) return false;
    row.insert(pos, {token, color});
    return true;
  }

  /// Inserts every entry of `other` not already present.
  void merge(const ColorCache& other) {
    other.for_each([this](std::span<const TokenId> ngram, TokenId token, Color color) { insert(ngram, token, color); });
  }

  std::size_t size() const {
    std::shared_lock lock(mutex_);
    std::size_t n = 0;
    for (const auto& [k, row] : entries_) n += row.size();
    return n;
  }

  /// Visits entries in canonical (n-gram, token) order.
  void for_each(const std::function<void(std::span<const TokenId>, TokenId, Color)>& fn) const {
    for (const auto& [ngram, row] : snapshot()) {
      for (const auto& [token, color] : row) fn(ngram, token, color);
    }
  }

 private:
  using Row = std::vector<std::pair<TokenId, Color>>;
  std::map<TokenSeq, Row> snapshot() const {
    std::shared_lock lock(mutex_);
    return entries_;
  }

  mutable std::shared_mutex mutex_;
  std::map<TokenSeq, Row> entries_;
};

/// What the attacker has learned: h_hat, delta_hat, and the colors seen so far.
struct StolenParams {
  std::size_t h_hat = 1;
  double delta_hat = 0.0;
  StealHyper hyper;
  ColorCache color_cache;

  void save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    std::ofstream params(dir / "params.json");
    params << nlohmann::json{{"h_hat", h_hat}, {"delta_hat", delta_hat}, {"hyper", to_json(hyper)}}.dump(2) << '\n';
    if (!params) throw Error("cannot write " + (dir / "params.json").string());
    std::ofstream cache(dir / "cache.jsonl");
    color_cache.for_each([&](std::span<const TokenId> ngram, TokenId token, Color color) {
      cache << nlohmann::json{{"ngram", TokenSeq(ngram.begin(), ngram.end())}, {"token", token}, {"color", to_string(color)}}
                   .dump()
            << '\n';
    });
    if (!cache) throw Error("cannot write " + (dir / "cache.jsonl").string());
  }

  static StolenParams load(const std::filesystem::path& dir) {
    std::ifstream params(dir / "params.json");
    if (!params) throw Error("cannot read " + (dir / "params.json").string());
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(params);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("params.json", e.what());
    }
    StolenParams out;
    const auto h = detail::required<long long>(j, "h_hat", "params");
    if (h < 1) throw ConfigError("params.h_hat", "must be >= 1");
    out.h_hat = static_cast<std::size_t>(h);
    out.delta_hat = detail::required<double>(j, "delta_hat", "params");
    if (!(out.delta_hat >= 0.0)) throw ConfigError("params.delta_hat", "must be >= 0");
    out.hyper = steal_hyper_from_json(j.value("hyper", nlohmann::json::object()), "params.hyper");

    std::ifstream cache(dir / "cache.jsonl");
    std::string line;
    std::size_t lineno = 0;
    while (cache && std::getline(cache, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        const auto e = nlohmann::json::parse(line);
        out.color_cache.insert(e.at("ngram").get<TokenSeq>(), e.at("token").get<TokenId>(),
                               color_from_string(e.at("color").get<std::string>()));
      } catch (const std::exception& ex) {
        throw ConfigError("cache.jsonl:" + std::to_string(lineno), ex.what());
      }
    }
    return out;
  }
};

/// Per-step token coloring against the last h_hat tokens. Misses run the
/// green-list classifier on the missing tokens padded with random reference
/// targets up to m, and every classified target is stored.
///
/// Reads consult `cache` first, then the optional read-only `fallback`.
/// Reference targets are drawn from a stream keyed on (seed, n-gram, batch),
/// so callers' random streams never depend on what was already cached.
class ColorClassifier {
 public:
  ColorClassifier(const Oracle& oracle, const StolenParams& params, ColorCache& cache,
                  const ColorCache* fallback = nullptr, std::uint64_t seed = 0)
      : oracle_(oracle), params_(params), cache_(cache), fallback_(fallback), seed_(seed) {}

  ColorClassifier(const Oracle& oracle, StolenParams& params) : ColorClassifier(oracle, params, params.color_cache) {}

  TokenSeq ngram_of(std::span<const TokenId> history) const {
    const auto ctx = NGramContext::from_history(history, params_.h_hat);
    return TokenSeq(ctx.tokens().begin(), ctx.tokens().end());
  }

  std::optional<Color> lookup(std::span<const TokenId> ngram, TokenId token) const {
    if (auto c = cache_.find(ngram, token)) return c;
    if (fallback_ != nullptr) return fallback_->find(ngram, token);
    return std::nullopt;
  }

  Color classify(std::span<const TokenId> history, TokenId token) {
    const TokenId one[] = {token};
    return classify_all(history, one).front();
  }

  /// Colors for `tokens` (same order). Special tokens are always red.
  std::vector<Color> classify_all(std::span<const TokenId> history, std::span<const TokenId> tokens) {
    const TokenSeq ngram = ngram_of(history);
    const auto& vocab = oracle_.vocabulary();
    TokenSeq missing;
    std::unordered_set<TokenId> queued;
    for (TokenId t : tokens) {
      if (vocab.is_special(t) || lookup(ngram, t)) continue;
      if (queued.insert(t).second) missing.push_back(t);
    }
    const std::size_t m = params_.hyper.m;
    for (std::size_t start = 0; start < missing.size(); start += m) {
      const std::size_t take = std::min(m, missing.size() - start);
      TokenSeq targets(missing.begin() + static_cast<std::ptrdiff_t>(start),
                       missing.begin() + static_cast<std::ptrdiff_t>(start + take));
      std::unordered_set<TokenId> in_batch(targets.begin(), targets.end());
      const auto pool = vocab.probe_pool();
      const std::size_t wanted = std::min(m, pool.size());
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      Rng rng(hash::absorb_tokens(hash::absorb_tokens(hash::mix64(seed_ ^ 0x9E3779B97F4A7C15ULL), ngram), targets));
      while (targets.size() < wanted) {
        const TokenId ref = pool[pick(rng)];
        if (in_batch.insert(ref).second) targets.push_back(ref);
      }
      if (targets.size() < 2) throw Error("not enough probeable tokens to classify");
      const RatioMatrix r = relative_ratios(oracle_, ngram, targets);
      const auto colors = classify_targets(r, params_.delta_hat);
      for (std::size_t i = 0; i < targets.size(); ++i) cache_.insert(ngram, targets[i], colors[i]);
    }
    std::vector<Color> out;
    out.reserve(tokens.size());
    for (TokenId t : tokens) out.push_back(vocab.is_special(t) ? Color::red : *lookup(ngram, t));
    return out;
  }

 private:
  const Oracle& oracle_;
  const StolenParams& params_;
  ColorCache& cache_;
  const ColorCache* fallback_;
  std::uint64_t seed_;
};

}  // namespace demark
