#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "relook/brpo.hpp"
#include "test_util.hpp"

namespace relook {
namespace {

using testing::random_item;
using testing::tiny_config;

TEST(Advantages, HandEvaluated) {
  EXPECT_EQ(group_advantages({1, 0, 1, 0}), (std::vector<double>{1, -1, 1, -1}));
  EXPECT_EQ(group_advantages({2, 2, 2, 2}), (std::vector<double>{0, 0, 0, 0}));
  EXPECT_THROW(group_advantages({1}), ConfigError);
}

TEST(Advantages, StandardizedOnRandomGroups) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-3, 3);
  for (int c = 0; c < 10000; ++c) {
    std::vector<double> r(2 + c % 15);
    for (auto& v : r) v = u(rng);
    const auto a = group_advantages(r);
    const double n = static_cast<double>(a.size());
    const double mean = std::accumulate(a.begin(), a.end(), 0.0) / n;
    double var = 0;
    for (double v : a) var += (v - mean) * (v - mean);
    EXPECT_LT(std::abs(mean), 1e-6);
    EXPECT_NEAR(std::sqrt(var / n), 1.0, 1e-6);
    // shifting every reward leaves the advantages alone
    auto shifted = r;
    for (auto& v : shifted) v += 5.0;
    const auto b = group_advantages(shifted);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-9);
  }
}

TEST(Kl, RatioTwo) {
  EXPECT_NEAR(kl_k3(0.0, std::log(2.0)), 2.0 - std::log(2.0) - 1.0, 1e-9);
  EXPECT_NEAR(kl_k3(0.0, std::log(2.0)), 0.30685, 1e-5);
  EXPECT_EQ(kl_term({-1.5, -0.2}, {-1.5, -0.2}), (std::vector<double>{0, 0}));
  EXPECT_THROW(kl_term({0.0}, {}), DimensionError);
}

TEST(Kl, NonnegativeAndZeroOnlyAtOne) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> lr(std::log(0.01), std::log(100.0));
  std::uniform_real_distribution<double> lp(-8, 0);
  for (int c = 0; c < 10000; ++c) {
    const double theta = lp(rng);
    const double log_rho = lr(rng);
    const double k = kl_k3(theta, theta + log_rho);
    const double rho = std::exp(log_rho);
    EXPECT_GE(k, 0.0);
    EXPECT_NEAR(k, rho - std::log(rho) - 1.0, 1e-9 * std::max(1.0, rho));
    if (std::abs(log_rho) > 1e-6) EXPECT_GT(k, 0.0);
  }
}

double reference_surrogate(double ratio, double a, double eps) {
  double clipped = ratio;
  if (clipped < 1 - eps) clipped = 1 - eps;
  if (clipped > 1 + eps) clipped = 1 + eps;
  const double x = ratio * a, y = clipped * a;
  return x < y ? x : y;
}

TEST(Clip, HandEvaluated) {
  EXPECT_DOUBLE_EQ(clipped_surrogate(1.5, 1.0, 0.2), 1.2);
  EXPECT_DOUBLE_EQ(clipped_surrogate(0.5, 1.0, 0.2), 0.5);
  EXPECT_DOUBLE_EQ(clipped_surrogate(0.5, -1.0, 0.2), -0.8);
  EXPECT_DOUBLE_EQ(clipped_surrogate(1.5, -1.0, 0.2), -1.5);
}

TEST(Clip, MatchesBruteForceAndBounds) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> lr(-2, 2), adv(-3, 3), ep(0.01, 0.99);
  for (int c = 0; c < 10000; ++c) {
    const double ratio = std::exp(lr(rng)), a = adv(rng), eps = ep(rng);
    const double s = clipped_surrogate(ratio, a, eps);
    EXPECT_NEAR(s, reference_surrogate(ratio, a, eps), 1e-7);
    // pessimistic bound: gains are capped at 1+eps, losses are never softened
    if (a > 0) EXPECT_NEAR(s, std::min(ratio, 1 + eps) * a, 1e-12);
    if (a < 0) EXPECT_NEAR(s, std::max(ratio, 1 - eps) * a, 1e-12);
    if (a > 0) EXPECT_LE(s, std::max(ratio, 1 + eps) * a + 1e-12);
    // derivative w.r.t. log ratio by central differences
    const double h = 1e-6, l = std::log(ratio);
    const double fd = (reference_surrogate(std::exp(l + h), a, eps) - reference_surrogate(std::exp(l - h), a, eps)) / (2 * h);
    const bool near_kink = std::abs(ratio - (1 + eps)) < 1e-4 || std::abs(ratio - (1 - eps)) < 1e-4;
    if (!near_kink) EXPECT_NEAR(clipped_surrogate_grad(ratio, a, eps), fd, 1e-5);
  }
}

PolicyTerms random_terms(std::mt19937_64& rng, std::size_t n, double adv, double spread) {
  std::normal_distribution<double> nd(0, spread);
  std::uniform_real_distribution<double> lp(-4, -0.1);
  PolicyTerms p;
  for (std::size_t t = 0; t < n; ++t) {
    p.logp_old.push_back(lp(rng));
    p.logp.push_back(p.logp_old.back() + nd(rng));
    p.logp_ref.push_back(p.logp_old.back() + nd(rng));
  }
  p.advantage = adv;
  return p;
}

// Objective of a group computed straight from the displayed formula.
double reference_objective(const std::vector<PolicyTerms>& g, const TrainConfig& cfg) {
  double total = 0;
  for (const auto& p : g) {
    std::vector<std::size_t> act;
    for (std::size_t t = 0; t < p.logp.size(); ++t)
      if (p.is_action.empty() || p.is_action[t]) act.push_back(t);
    double surr = 0, kl = 0;
    if (act.empty()) continue;
    if (cfg.ratio_mode == RatioMode::token_level) {
      for (auto t : act) {
        surr += reference_surrogate(std::exp(p.logp[t] - p.logp_old[t]), p.advantage, cfg.clip_eps) / act.size();
        const double rho = std::exp(p.logp_ref[t] - p.logp[t]);
        kl += (rho - std::log(rho) - 1) / act.size();
      }
    } else {
      double num = 1, den = 1, ref = 1;
      for (auto t : act) {
        num *= std::exp(p.logp[t]);
        den *= std::exp(p.logp_old[t]);
        ref *= std::exp(p.logp_ref[t]);
      }
      surr = reference_surrogate(num / den, p.advantage, cfg.clip_eps);
      kl = ref / num - std::log(ref / num) - 1;
    }
    total += surr - cfg.beta * kl;
  }
  return total / g.size();
}

TEST(Objective, MatchesReferenceAndItsGradient) {
  std::mt19937_64 rng(10);
  std::normal_distribution<double> adv(0, 1);
  for (RatioMode mode : {RatioMode::token_level, RatioMode::sequence_level}) {
    for (int c = 0; c < 300; ++c) {
      TrainConfig cfg;
      cfg.ratio_mode = mode;
      cfg.beta = c % 3 == 0 ? 0.0 : 0.1;
      std::vector<PolicyTerms> g;
      for (int i = 0; i < 4; ++i) {
        g.push_back(random_terms(rng, 1 + (c + i) % 5, adv(rng), 0.15));
        if (i == 2) g.back().is_action = std::vector<bool>(g.back().logp.size(), true), g.back().is_action[0] = false;
      }
      const ObjectiveValue v = brpo_loss(g, cfg);
      EXPECT_NEAR(v.objective, reference_objective(g, cfg), 1e-9);
      for (std::size_t i = 0; i < g.size(); ++i) {
        for (std::size_t t = 0; t < g[i].logp.size(); ++t) {
          auto up = g, down = g;
          const double h = 1e-6;
          up[i].logp[t] += h;
          down[i].logp[t] -= h;
          const double fd = (reference_objective(up, cfg) - reference_objective(down, cfg)) / (2 * h);
          const double r = std::exp(g[i].logp[t] - g[i].logp_old[t]);
          if (std::abs(r - 1.2) < 1e-3 || std::abs(r - 0.8) < 1e-3) continue;
          EXPECT_NEAR(v.coeff[i][t], fd, 1e-5) << "mode " << int(mode) << " case " << c;
        }
      }
    }
  }
}

TEST(Objective, RatioOneZeroAdvantageIsMinusBetaKl) {
  std::mt19937_64 rng(11);
  TrainConfig cfg;
  std::vector<PolicyTerms> g;
  for (int i = 0; i < 5; ++i) {
    auto p = random_terms(rng, 6, 0.0, 0.3);
    p.logp = p.logp_old;
    g.push_back(p);
  }
  const auto v = brpo_loss(g, cfg);
  double kl = 0;
  for (const auto& p : g) {
    const auto k = kl_term(p.logp, p.logp_ref);
    kl += std::accumulate(k.begin(), k.end(), 0.0) / k.size() / g.size();
  }
  EXPECT_NEAR(v.objective, -cfg.beta * kl, 1e-12);
  EXPECT_NEAR(v.surrogate, 0.0, 1e-15);
}

TEST(Objective, FlippingAdvantagesNegatesUnclippedSurrogate) {
  std::mt19937_64 rng(12);
  TrainConfig cfg;
  cfg.beta = 0;
  std::vector<PolicyTerms> g, flipped;
  for (int i = 0; i < 4; ++i) {
    auto p = random_terms(rng, 5, 0.7 - 0.4 * i, 0.02);
    g.push_back(p);
    p.advantage = -p.advantage;
    flipped.push_back(p);
  }
  EXPECT_NEAR(brpo_loss(g, cfg).surrogate, -brpo_loss(flipped, cfg).surrogate, 1e-12);
  EXPECT_EQ(brpo_loss(g, cfg).clip_fraction, 0.0);
}

TEST(Objective, SingleTokenClipExample) {
  PolicyTerms p;
  p.logp = {std::log(0.6)};
  p.logp_old = {std::log(0.4)};
  p.advantage = 1.0;
  TrainConfig cfg;
  cfg.beta = 0;
  const auto v = brpo_loss(std::vector<PolicyTerms>{p}, cfg);
  EXPECT_NEAR(v.objective, 1.2, 1e-12);
  EXPECT_EQ(v.coeff[0][0], 0.0);
  EXPECT_EQ(v.clip_fraction, 1.0);
}

TEST(Objective, MisalignedInputsRejected) {
  PolicyTerms p;
  p.logp = {-1, -2};
  p.logp_old = {-1};
  TrainConfig cfg;
  EXPECT_THROW(brpo_loss(std::vector<PolicyTerms>{p}, cfg), DimensionError);
  EXPECT_THROW(brpo_loss(std::vector<PolicyTerms>{}, cfg), EmptyInputError);
}

TEST(Config, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.G = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.clip_eps = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.beta = -0.1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.ratio_mode = RatioMode::sequence_level;
  c.seed = 77;
  nlohmann::json j = c;
  EXPECT_EQ(j.get<TrainConfig>(), c);
}

// With pi_theta == pi_old and no KL, the gradient of the clipped objective is
// the plain policy gradient (1/G) sum_i A_i (1/n_i) sum_t grad log pi(y_t).
TEST(PolicyGradient, EqualsVanillaEstimatorAtOldPolicy) {
  auto policy = ModelParams<float>::init(tiny_config(8, 1, 2, 128), 21);
  TrainConfig tc;
  tc.G = 4;
  tc.beta = 0;
  tc.max_new = 12;
  RewardConfig rc;
  ReattentionConfig ra;
  const QAItem qa = random_item(5);
  GroupBatch g = sample_group(policy, nullptr, qa, 0, 0, tc, rc, ra);
  const double adv[] = {1.3, -0.4, 0.6, -1.5};
  for (int i = 0; i < 4; ++i) g.rollouts[i].advantage = adv[i];
  policy.zero_grad();
  brpo_gradient(policy, {g}, tc);

  auto dp = policy.cast<double>();
  auto pg = [&](ModelParams<double>& p) {
    double s = 0;
    for (const auto& r : g.rollouts) {
      const auto lp = logprob_of(p, g.prompt, r.tokens, r.script);
      s += r.advantage * std::accumulate(lp.begin(), lp.end(), 0.0) / lp.size() / g.rollouts.size();
    }
    return s;
  };
  std::mt19937_64 pick(3);
  int checked = 0;
  double worst = 0;
  auto fnamed = policy.named();
  auto dnamed = dp.named();
  for (std::size_t k = 0; k < fnamed.size(); ++k) {
    if (fnamed[k].first == "vis_emb" || fnamed[k].first == "pos_emb" || fnamed[k].first == "tok_emb") continue;
    for (int s = 0; s < 6; ++s) {
      const std::size_t i = pick() % dnamed[k].second->size();
      double& x = (*dnamed[k].second)[i];
      const double x0 = x, h = 1e-4;
      x = x0 + h;
      const double up = pg(dp);
      x = x0 - h;
      const double down = pg(dp);
      x = x0;
      const double fd = (up - down) / (2 * h);
      const double analytic = -static_cast<double>(fnamed[k].second->grad()[i]);
      worst = std::max(worst, std::abs(analytic - fd) / std::max({std::abs(fd), std::abs(analytic), 1e-2}));
      ++checked;
    }
  }
  EXPECT_GT(checked, 50);
  EXPECT_LT(worst, 2e-3);
}

std::vector<QAItem> items(std::size_t n, std::uint64_t offset) {
  std::vector<QAItem> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_item(offset + i, Template::count_color));
  return out;
}

TEST(Train, SeededRunReproducesTelemetry) {
  auto cold = ModelParams<float>::init(tiny_config(16, 1, 2, 128), 4);
  testing::bias_token(cold, Vocabulary::instance().open(BlockKind::reflection), 3.0);
  TrainConfig tc;
  tc.G = 4;
  tc.steps = 3;
  tc.max_new = 24;
  tc.seed = 5;
  tc.eval_every = 2;
  tc.n_eval = 3;
  RewardConfig rc;
  rc.lambda = 4;
  ReattentionConfig ra;
  ra.mode = ReattentionMode::vtc;
  ra.max_injections = 2;
  auto run = [&]() {
    std::string log;
    BrpoState st = BrpoState::start(cold, tc);
    BrpoHooks hooks;
    hooks.on_step = [&](const nlohmann::ordered_json& j) { log += j.dump() + "\n"; };
    brpo_train(st, items(20, 100), items(5, 900), tc, rc, ra, hooks);
    return log;
  };
  const std::string a = run();
  EXPECT_EQ(a, run());
  EXPECT_NE(a.find("\"reflection_len_mean\""), std::string::npos);
  EXPECT_NE(a.find("\"n_r_mean\""), std::string::npos);
  EXPECT_NE(a.find("\"final\":true"), std::string::npos);
  EXPECT_NE(a.find("\"eval_acc\""), std::string::npos);
}

TEST(Train, NanAbortsWithDump) {
  auto cold = ModelParams<float>::init(tiny_config(16, 1, 2, 128), 4);
  TrainConfig tc;
  tc.G = 2;
  tc.steps = 2;
  tc.max_new = 8;
  BrpoState st = BrpoState::start(cold, tc);
  st.policy.head[0] = std::nanf("");
  bool dumped = false;
  BrpoHooks hooks;
  hooks.on_failure = [&](const nlohmann::ordered_json& d) { dumped = d.contains("reason"); };
  RewardConfig rc;
  rc.allow_zero_reflections = true;
  // a NaN logit makes every reward equal, so force a live gradient through the
  // KL term instead
  tc.beta = 0.5;
  EXPECT_THROW(brpo_train(st, items(4, 0), {}, tc, rc, {}, hooks), NumericError);
  EXPECT_TRUE(dumped);
}

TEST(Sft, LossIsMeanResponseCrossEntropy) {
  auto p = ModelParams<float>::init(tiny_config(), 6);
  std::vector<SftExample> batch;
  for (std::uint64_t s = 0; s < 3; ++s) {
    const QAItem qa = random_item(s, kAllTemplates[s % 4]);
    auto ex = sft_example(DatasetRecord{qa, gold_trace(qa).text()});
    ASSERT_TRUE(ex.has_value());
    batch.push_back(*ex);
  }
  double total = 0, n = 0;
  for (const auto& ex : batch) {
    for (double lp : logprob_of(p, ex.prompt, ex.response)) total -= lp;
    n += ex.response.size();
  }
  p.zero_grad();
  std::size_t tokens = 0;
  const double loss = sft_gradient(p, std::span<const SftExample>(batch), {}, &tokens);
  EXPECT_EQ(tokens, static_cast<std::size_t>(n));
  EXPECT_NEAR(loss, total / n, 1e-4);
}

TEST(Sft, FrozenVisualTableStaysPutWithZeroGradient) {
  auto p = ModelParams<float>::init(tiny_config(), 6);
  const auto vis0 = p.vis_emb.values();
  const auto head0 = p.head.values();
  SftConfig cfg;
  cfg.batch_size = 2;
  Adam opt(p, cfg.adam());
  std::vector<DatasetRecord> data;
  for (std::uint64_t s = 0; s < 2; ++s) {
    const QAItem qa = random_item(s);
    data.push_back({qa, gold_trace(qa).text()});
  }
  sft_step(p, opt, data, cfg);
  EXPECT_EQ(p.vis_emb.values(), vis0);
  for (float g : p.vis_emb.grad()) EXPECT_EQ(g, 0.0f);
  EXPECT_NE(p.head.values(), head0);
  cfg.freeze_visual = false;
  sft_step(p, opt, data, cfg);
  EXPECT_NE(p.vis_emb.values(), vis0);
}

TEST(Sft, MalformedTracesSkipped) {
  auto p = ModelParams<float>::init(tiny_config(), 6);
  SftConfig cfg;
  Adam opt(p, cfg.adam());
  const QAItem qa = random_item(1);
  std::vector<DatasetRecord> data{{qa, gold_trace(qa).text()},
                                  {qa, std::string("<SUMMARY> only </SUMMARY>")},
                                  {qa, std::string("<SUMMARY> zebra </SUMMARY>")},
                                  {qa, std::nullopt}};
  const auto r = sft_step(p, opt, data, cfg);
  EXPECT_EQ(r.used, 1u);
  EXPECT_EQ(r.skipped, 3u);
  std::vector<DatasetRecord> bad(data.begin() + 1, data.end());
  EXPECT_THROW(sft_step(p, opt, bad, cfg), EmptyInputError);
}

TEST(Sft, InjectedPositionsAreNotScored) {
  auto p = ModelParams<float>::init(tiny_config(), 6);
  const QAItem qa = random_item(2);
  auto ex = *sft_example(DatasetRecord{qa, gold_trace(qa).text()});
  ReattentionConfig vtc;
  vtc.mode = ReattentionMode::vtc;
  const auto script = teacher_forced_script(p, ex.prompt, ex.response, vtc);
  ASSERT_EQ(script.size(), 1u);
  EXPECT_EQ(script[0].visual_ids.size(), 16u);
  const auto lp = logprob_of(p, ex.prompt, ex.response, script);
  double expect = 0;
  for (double v : lp) expect -= v;
  expect /= lp.size();
  std::size_t tokens = 0;
  p.zero_grad();
  const double loss = sft_gradient(p, std::span<const SftExample>(&ex, 1), vtc, &tokens);
  EXPECT_EQ(tokens, ex.response.size());
  EXPECT_NEAR(loss, expect, 1e-4);
  ReattentionConfig vo;
  vo.mode = ReattentionMode::vision_only;
  EXPECT_THROW(teacher_forced_script(p, ex.prompt, ex.response, vo), ConfigError);
}

TEST(Sft, BatchesCoverEachEpoch) {
  std::vector<int> seen(10, 0);
  for (int step = 0; step < 5; ++step)
    for (auto i : sft_batch_indices(10, 2, 3, step)) ++seen[i];
  for (int c : seen) EXPECT_EQ(c, 1);
  EXPECT_EQ(sft_batch_indices(10, 4, 3, 7), sft_batch_indices(10, 4, 3, 7));
}

TEST(Adam, StateRoundTripGivesIdenticalSteps) {
  auto a = ModelParams<float>::init(tiny_config(), 6);
  auto b = a.clone();
  AdamConfig cfg;
  Adam oa(a, cfg), ob(b, cfg);
  std::mt19937_64 rng(1);
  std::normal_distribution<float> nd(0, 1);
  auto fill = [&](ModelParams<float>& p, std::uint64_t seed) {
    std::mt19937_64 r(seed);
    p.zero_grad();
    for (auto& [n, t] : p.named())
      for (auto& g : t->grad()) g = std::normal_distribution<float>(0, 1)(r);
  };
  fill(a, 1);
  oa.step(a);
  const auto path = (std::filesystem::temp_directory_path() / "relook_adam_rt.bin").string();
  oa.save(path, a);
  b = a.clone();
  ob.load(path, b);
  EXPECT_EQ(ob.steps(), 1);
  fill(a, 2);
  fill(b, 2);
  oa.step(a);
  ob.step(b);
  EXPECT_EQ(a.head.values(), b.head.values());
  std::remove(path.c_str());
  (void)nd;
  (void)rng;
}

TEST(Adam, GradClipBoundsTheUpdate) {
  auto p = ModelParams<float>::init(tiny_config(), 6);
  AdamConfig cfg;
  cfg.grad_clip = 1.0;
  Adam opt(p, cfg);
  p.zero_grad();
  p.head.grad()[0] = 1e6f;
  EXPECT_NEAR(opt.step(p), 1e6, 1.0);
  p.zero_grad();
  p.head.grad()[0] = std::nanf("");
  EXPECT_THROW(opt.step(p), NumericError);
}

}  // namespace
}  // namespace relook
