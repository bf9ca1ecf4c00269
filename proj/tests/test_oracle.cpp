#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "demark/oracle.hpp"

using namespace demark;

namespace {

/// Replies with fixed numbers per presentation order.
class ScriptedOracle final : public Oracle {
 public:
  ScriptedOracle(ProbeMode mode, RawPair ij, RawPair ji, ProbeCounts cij = {}, ProbeCounts cji = {})
      : mode_(mode), ij_(ij), ji_(ji), cij_(cij), cji_(cji) {}

  ProbeMode mode() const override { return mode_; }
  int sample_count() const override { return n_; }
  const Vocabulary& vocabulary() const override { return vocab_; }
  std::string_view source_name() const override { return "scripted"; }
  RawPair probe_exact(const ProbeQuery& q) const override {
    count_query();
    return q.order == ProbeOrder::ij ? ij_ : ji_;
  }
  ProbeCounts probe_sample(const ProbeQuery& q) const override {
    count_query();
    return q.order == ProbeOrder::ij ? cij_ : cji_;
  }
  TokenDistribution top_k(std::span<const TokenId>, std::size_t) const override {
    throw CapabilityError("none");
  }

  int n_ = 10;

 private:
  ProbeMode mode_;
  RawPair ij_, ji_;
  ProbeCounts cij_, cji_;
  Vocabulary vocab_ = Vocabulary::with_defaults(10);
};

SyntheticLMConfig config_with(double delta, double noise = 0.0, ProbeMode mode = ProbeMode::exact) {
  SyntheticLMConfig c;
  c.spec = WatermarkSpec("oracle-test", 2, delta, 0.5);
  c.noise_max = noise;
  c.mode = mode;
  c.base_seed = 77;
  return c;
}

/// Two probe targets with the requested colors under `ctx`.
std::pair<TokenId, TokenId> pick_pair(const WatermarkSpec& s, const TokenSeq& ctx, Color a, Color b) {
  const GreenList g(s, NGramContext::from_history(ctx, s));
  TokenId ta = 0, tb = 0;
  for (TokenId t = 2; ta == 0 || tb == 0; ++t) {
    if (ta == 0 && g.color(t) == a) {
      ta = t;
    } else if (tb == 0 && g.color(t) == b) {
      tb = t;
    }
  }
  return {ta, tb};
}

}  // namespace

TEST(EstimatePair, ExactSumsOrdersThenRenormalizes) {
  const ScriptedOracle o(ProbeMode::exact, {0.8, 0.2, false}, {0.6, 0.4, false});
  const TokenSeq ctx = {5};
  const auto p = estimate_pair(o, ctx, 3, 4);
  EXPECT_NEAR(p.p_first, 0.7, 1e-15);
  EXPECT_NEAR(p.p_second, 0.3, 1e-15);
  EXPECT_EQ(o.query_count(), 2u);
}

TEST(EstimatePair, SampledClampsCounts) {
  const ScriptedOracle o(ProbeMode::sampled, {}, {}, {10, 0, 10}, {10, 0, 10});
  const TokenSeq ctx = {5};
  EXPECT_NEAR(estimate_pair(o, ctx, 3, 4).p_first, 0.9, 1e-15);
  ScriptedOracle tiny(ProbeMode::sampled, {}, {}, {1, 0, 1}, {1, 0, 1});
  tiny.n_ = 1;
  EXPECT_THROW(estimate_pair(tiny, ctx, 3, 4), ConfigError);
}

TEST(EstimatePair, RejectsBadCandidates) {
  const ScriptedOracle o(ProbeMode::exact, {0.5, 0.5, false}, {0.5, 0.5, false});
  const TokenSeq ctx = {5};
  EXPECT_THROW(estimate_pair(o, ctx, 3, 3), Error);
  EXPECT_THROW(estimate_pair(o, ctx, 1, 3), Error);
  EXPECT_THROW(estimate_pair(o, ctx, 3, 10), Error);
}

TEST(SyntheticProbe, SameColorIsEven) {
  const SyntheticLM lm(config_with(2.0));
  const TokenSeq ctx = {40, 41};
  for (Color c : {Color::green, Color::red}) {
    const auto [a, b] = pick_pair(lm.spec(), ctx, c, c);
    const auto raw = lm.probe_exact({ctx, a, b, ProbeOrder::ij});
    EXPECT_DOUBLE_EQ(raw.p_first, 0.5);
    EXPECT_DOUBLE_EQ(raw.p_second, 0.5);
    EXPECT_DOUBLE_EQ(estimate_pair(lm, ctx, a, b).p_first, 0.5);
  }
}

TEST(SyntheticProbe, CrossColorMatchesHandValue) {
  const SyntheticLM lm(config_with(std::log(3.0)));
  const TokenSeq ctx = {40, 41};
  const auto [g, r] = pick_pair(lm.spec(), ctx, Color::green, Color::red);
  const auto raw = lm.probe_exact({ctx, g, r, ProbeOrder::ij});
  EXPECT_NEAR(raw.p_first, 0.75, 1e-12);
  EXPECT_NEAR(raw.p_second, 0.25, 1e-12);
  const auto again = lm.probe_exact({ctx, g, r, ProbeOrder::ij});
  EXPECT_EQ(raw.p_first, again.p_first);
}

TEST(SyntheticProbe, NoiseIsBoundedAntisymmetricAndOrderFree) {
  const SyntheticLM lm(config_with(2.0, 0.1));
  Rng rng = seeded_rng(2, "noise");
  const auto pool = lm.vocabulary().probe_pool();
  double max_abs = 0.0;
  for (int i = 0; i < 2000; ++i) {
    const TokenSeq ctx = sample_tokens(pool, 2, rng);
    const auto pair = sample_distinct(pool, 2, rng);
    const double e = lm.probe_noise(ctx, pair[0], pair[1]);
    EXPECT_EQ(e, -lm.probe_noise(ctx, pair[1], pair[0]));
    max_abs = std::max(max_abs, std::abs(e));
    const auto a = lm.probe_exact({ctx, pair[0], pair[1], ProbeOrder::ij});
    const auto b = lm.probe_exact({ctx, pair[0], pair[1], ProbeOrder::ji});
    EXPECT_EQ(a.p_first, b.p_first);
  }
  EXPECT_LE(max_abs, 0.1);
  EXPECT_GT(max_abs, 0.09);
}

TEST(SyntheticProbe, SampledSwapReplaysCounts) {
  const SyntheticLM lm(config_with(2.0, 0.1, ProbeMode::sampled));
  const TokenSeq ctx = {40, 41};
  const ProbeQuery q{ctx, 5, 9, ProbeOrder::ij};
  const ProbeQuery swapped{ctx, 9, 5, ProbeOrder::ji};
  EXPECT_EQ(q.listed_first(), swapped.listed_first());
  const auto a = lm.probe_sample(q);
  const auto b = lm.probe_sample(swapped);
  EXPECT_EQ(a.first, b.second);
  EXPECT_EQ(a.second, b.first);
  EXPECT_EQ(a.first + a.second, 10);
}

TEST(SyntheticProbe, SampledFrequencyTracksProbability) {
  auto cfg = config_with(std::log(3.0), 0.0, ProbeMode::sampled);
  cfg.n_samples = 4000;
  const SyntheticLM lm(cfg);
  const TokenSeq ctx = {40, 41};
  const auto [g, r] = pick_pair(lm.spec(), ctx, Color::green, Color::red);
  const auto c = lm.probe_sample({ctx, g, r, ProbeOrder::ij});
  EXPECT_NEAR(c.first / 4000.0, 0.75, 0.03);
}

TEST(SyntheticProbe, SampledModeRefusesExactAccess) {
  const SyntheticLM lm(config_with(2.0, 0.0, ProbeMode::sampled));
  const TokenSeq ctx = {40, 41};
  EXPECT_THROW(lm.probe_exact({ctx, 5, 9, ProbeOrder::ij}), CapabilityError);
  EXPECT_THROW(lm.top_k(ctx, 5), CapabilityError);
}

TEST(SyntheticLM, BaseDistributionShape) {
  const SyntheticLM lm(config_with(2.0));
  const TokenSeq h = {12, 13, 14};
  const auto p = lm.next_distribution(h);
  EXPECT_FALSE(p.truncated());
  EXPECT_NEAR(p.total(), 1.0, 1e-9);
  EXPECT_EQ(p.prob(kPadToken), 0.0);
  EXPECT_EQ(p.size(), 999u);
  // Keyed only on the last two tokens.
  const TokenSeq h2 = {99, 13, 14};
  EXPECT_EQ(p.entries()[10].prob, lm.next_distribution(h2).entries()[10].prob);
}

TEST(SyntheticLM, TopKFullAndArgmax) {
  auto cfg = config_with(2.0);
  cfg.vocab = Vocabulary::with_defaults(40);
  const SyntheticLM lm(cfg);
  const TokenSeq ctx = {7, 8, 9};
  const auto full = lm.top_k(ctx, 40);
  EXPECT_NEAR(full.total(), 1.0, 1e-9);

  const auto base = lm.next_distribution(ctx);
  const GreenList g(cfg.spec, NGramContext::from_history(ctx, cfg.spec));
  TokenId best = 0;
  double best_w = -1.0;
  for (const auto& e : base.entries()) {
    const double w = e.prob * (g.is_green(e.token) ? std::exp(2.0) : 1.0);
    if (w > best_w) {
      best_w = w;
      best = e.token;
    }
  }
  const auto one = lm.top_k(ctx, 1);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one.entries()[0].token, best);
  EXPECT_TRUE(one.truncated());
}

TEST(SyntheticLM, CountsEveryRequest) {
  const SyntheticLM lm(config_with(2.0));
  const TokenSeq ctx = {7, 8};
  (void)estimate_pair(lm, ctx, 3, 4);
  (void)lm.top_k(ctx, 20);
  EXPECT_EQ(lm.query_count(), 3u);
}

TEST(SyntheticLM, ConfigValidation) {
  auto c = config_with(2.0, 0.5);
  EXPECT_THROW(SyntheticLM{c}, ConfigError);
  c = config_with(2.0);
  c.support_size = 5000;
  EXPECT_THROW(SyntheticLM{c}, ConfigError);
}

TEST(Transcript, LogsOneLinePerProbe) {
  const SyntheticLM lm(config_with(2.0));
  std::ostringstream sink;
  const TranscriptOracle t(lm, sink);
  const TokenSeq ctx = {7, 8};
  const auto via = estimate_pair(t, ctx, 3, 4);
  const auto direct = estimate_pair(lm, ctx, 3, 4);
  EXPECT_EQ(via.p_first, direct.p_first);
  std::istringstream lines(sink.str());
  std::string line;
  std::vector<nlohmann::json> rows;
  while (std::getline(lines, line)) rows.push_back(nlohmann::json::parse(line));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0]["order"], "ij");
  EXPECT_EQ(rows[1]["order"], "ji");
  EXPECT_EQ(rows[0]["t_i"], 3);
  EXPECT_EQ(rows[0]["source"], "synthetic");
  EXPECT_EQ(rows[0]["context"], ctx);
  EXPECT_TRUE(rows[0].contains("p_j"));
}
