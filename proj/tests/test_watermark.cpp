#include <gtest/gtest.h>

#include <cmath>

#include "demark/oracle.hpp"
#include "demark/stats.hpp"
#include "demark/watermark.hpp"

using namespace demark;

namespace {

/// A key/context under which token 2 is green and token 3 is red.
struct TwoTokenCase {
  WatermarkSpec spec;
  TokenSeq ctx;
};

TwoTokenCase find_green_red(double delta) {
  for (int k = 0;; ++k) {
    const WatermarkSpec s("case-" + std::to_string(k), 1, delta, 0.5);
    const TokenSeq ctx = {7};
    const GreenList g(s, NGramContext::from_history(ctx, s));
    if (g.is_green(2) && !g.is_green(3)) return {s, ctx};
  }
}

struct FixedSource {
  TokenDistribution dist;
  TokenDistribution next_distribution(std::span<const TokenId>) const { return dist; }
};

}  // namespace

TEST(ApplyWatermark, HandComputedTwoTokens) {
  const auto c = find_green_red(std::log(3.0));
  const TokenDistribution p({{2, 0.5}, {3, 0.5}});
  const auto w = apply_watermark(p, c.spec, NGramContext::from_history(c.ctx, c.spec));
  EXPECT_NEAR(w.prob(2), 0.75, 1e-12);
  EXPECT_NEAR(w.prob(3), 0.25, 1e-12);
}

TEST(ApplyWatermark, ZeroDeltaIsIdentity) {
  const TokenDistribution p({{2, 0.1}, {3, 0.2}, {4, 0.3}, {5, 0.4}});
  const WatermarkSpec s("k", 2, 0.0, 0.5);
  const auto w = apply_watermark(p, s, NGramContext::from_history(TokenSeq{9, 9}, s));
  for (const auto& e : p.entries()) EXPECT_EQ(w.prob(e.token), e.prob);
}

TEST(ApplyWatermark, AllGreenIsIdentity) {
  const WatermarkSpec s("k", 1, 3.0, 0.5);
  const auto ctx = NGramContext::from_history(TokenSeq{4}, s);
  const GreenList g(s, ctx);
  std::vector<TokenProb> entries;
  for (TokenId t = 2; entries.size() < 5; ++t) {
    if (g.is_green(t)) entries.push_back({t, 0.2});
  }
  const TokenDistribution p(entries);
  const auto w = apply_watermark(p, s, ctx);
  for (const auto& e : p.entries()) EXPECT_NEAR(w.prob(e.token), e.prob, 1e-15);
}

TEST(ApplyWatermark, MatchesDirectFormula) {
  const WatermarkSpec s("formula", 2, 1.7, 0.5);
  const auto ctx = NGramContext::from_history(TokenSeq{5, 6}, s);
  const GreenList g(s, ctx);
  std::vector<TokenProb> entries;
  for (TokenId t = 2; t < 40; ++t) entries.push_back({t, 1.0 + t % 7});
  const auto p = TokenDistribution::from_weights(entries);
  double z = 0.0;
  for (const auto& e : p.entries()) z += e.prob * (g.is_green(e.token) ? std::exp(1.7) : 1.0);
  const auto w = apply_watermark(p, s, ctx);
  for (const auto& e : p.entries()) {
    EXPECT_NEAR(w.prob(e.token), e.prob * (g.is_green(e.token) ? std::exp(1.7) : 1.0) / z, 1e-14);
  }
}

TEST(ApplyWatermark, RejectsTruncated) {
  const WatermarkSpec s("k", 1, 1.0, 0.5);
  const TokenDistribution p({{2, 0.5}}, true);
  EXPECT_THROW(apply_watermark(p, s, NGramContext::from_history(TokenSeq{3}, s)), Error);
}

TEST(Generate, DeterministicAndZeroDeltaMatchesUnwatermarked) {
  SyntheticLMConfig c;
  c.base_seed = 4;
  const SyntheticLM lm(c);
  const WatermarkSpec s = c.spec;
  const TokenSeq prompt = {10, 11, 12};
  Rng a = seeded_rng(1, "gen");
  Rng b = seeded_rng(1, "gen");
  EXPECT_EQ(generate(BaseModel(lm), s, prompt, 100, a), generate(BaseModel(lm), s, prompt, 100, b));

  Rng d = seeded_rng(2, "gen");
  const auto with_zero = generate(BaseModel(lm), s.with_delta(0.0), prompt, 100, d);
  // Same draws, same sampler, no reweighting.
  Rng e = seeded_rng(2, "gen");
  TokenSeq plain;
  TokenSeq hist = prompt;
  while (plain.size() < 100) {
    auto dist = lm.next_distribution(hist);
    std::vector<TokenProb> kept;
    for (const auto& x : dist.entries()) {
      if (x.token != 1) kept.push_back(x);
    }
    const TokenId t = sample_token(TokenDistribution::from_weights(kept), e);
    plain.push_back(t);
    hist.push_back(t);
  }
  EXPECT_EQ(with_zero, plain);
}

TEST(Generate, LargeDeltaForcesGreen) {
  SyntheticLMConfig c;
  c.base_seed = 8;
  c.spec = WatermarkSpec("strong", 3, 10.0, 0.5);
  const SyntheticLM lm(c);
  Rng rng = seeded_rng(3, "strong");
  const TokenSeq prompt = {20, 21, 22};
  const auto out = generate(BaseModel(lm), c.spec, prompt, 300, rng);
  ASSERT_EQ(out.size(), 300u);
  TokenSeq all = prompt;
  all.insert(all.end(), out.begin(), out.end());
  const auto r = detect(std::span<const TokenId>(all).subspan(prompt.size() - 3), DetectorKey::from(c.spec));
  EXPECT_GT(static_cast<double>(r.n_green) / static_cast<double>(r.n_scored), 0.9);
}

TEST(Generate, EosEndsWhenNotSuppressed) {
  const FixedSource src{TokenDistribution({{1, 0.999999}, {2, 0.000001}})};
  const WatermarkSpec s("k", 1, 0.0, 0.5);
  Rng rng = seeded_rng(1, "eos");
  const auto out = generate(src, s, TokenSeq{5}, 50, rng, GenerateOptions{false, 1});
  EXPECT_EQ(out, TokenSeq{1});
  const auto full = generate(src, s, TokenSeq{5}, 50, rng);
  EXPECT_EQ(full.size(), 50u);
}

TEST(Detect, HandComputedCounts) {
  const auto r = report_from_counts(100, 70, 0.5);
  EXPECT_NEAR(r.z_score, 4.0, 1e-12);
  // 1 - Phi(4) = 0.5 * erfc(4 / sqrt 2)
  EXPECT_NEAR(r.p_value, 3.167124183311992e-05, 1e-15);
  const auto null = report_from_counts(100, 50, 0.5);
  EXPECT_EQ(null.z_score, 0.0);
  EXPECT_EQ(null.p_value, 0.5);
  const auto quarter = report_from_counts(40, 10, 0.25);
  EXPECT_EQ(quarter.z_score, 0.0);
  EXPECT_THROW(report_from_counts(10, 11, 0.5), Error);
}

TEST(Detect, CountsAgainstPartition) {
  const WatermarkSpec s("det", 2, 2.0, 0.5);
  const TokenSeq toks = {5, 6, 7, 8, 9, 10, 11, 12};
  std::size_t greens = 0;
  for (std::size_t i = 2; i < toks.size(); ++i) {
    greens += partition(s, NGramContext::from_history(std::span(toks).first(i), s), toks[i]) == Color::green;
  }
  const auto r = detect(toks, DetectorKey::from(s));
  EXPECT_EQ(r.n_scored, 6u);
  EXPECT_EQ(r.n_green, greens);
  EXPECT_NEAR(r.p_value, 1.0 - stats::normal_cdf(r.z_score), 1e-12);
}

TEST(Detect, TooShortIsAnError) {
  const WatermarkSpec s("det", 3, 2.0, 0.5);
  EXPECT_THROW(detect(TokenSeq{5, 6, 7}, DetectorKey::from(s)), Error);
}

TEST(TprAtFpr, ThresholdAndEdges) {
  EXPECT_NEAR(stats::normal_quantile(1.0 - 0.001), 3.090232306167813, 1e-9);
  EXPECT_EQ(tpr_at_fpr(std::vector<double>{4.0, 2.0}, 0.001), 0.5);
  EXPECT_EQ(tpr_at_fpr(std::vector<double>{100.0, 100.0}, 1e-5), 1.0);
  for (double f : {0.4, 0.1, 1e-3}) EXPECT_EQ(tpr_at_fpr(std::vector<double>{0.0, 0.0}, f), 0.0);
  EXPECT_THROW(tpr_at_fpr(std::vector<double>{}, 0.01), Error);
  // Strict inequality at the threshold.
  const double t = stats::normal_quantile(0.99);
  EXPECT_EQ(tpr_at_fpr(std::vector<double>{t}, 0.01), 0.0);
}

TEST(Stats, LowerMedianAndKs) {
  EXPECT_EQ(stats::lower_median({4.0, 1.0, 3.0, 2.0}), 2.0);
  EXPECT_EQ(stats::lower_median({3.0, 1.0, 2.0}), 2.0);
  // Perfectly spread sample: D = 1/(2n).
  std::vector<double> u;
  for (int i = 0; i < 100; ++i) u.push_back((i + 0.5) / 100.0);
  const auto ks = stats::ks_uniform(u);
  EXPECT_NEAR(ks.statistic, 0.005, 1e-12);
  EXPECT_GT(ks.p_value, 0.99);
  std::vector<double> skew(100, 0.01);
  EXPECT_LT(stats::ks_uniform(skew).p_value, 1e-6);
}
