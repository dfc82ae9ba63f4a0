#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "relook/model.hpp"
#include "relook/reattention.hpp"
#include "test_util.hpp"

namespace relook {
namespace {

using testing::bias_token;
using testing::bound_from;
using testing::random_item;
using testing::tiny_config;

const Vocabulary& V() { return Vocabulary::instance(); }

// Full logits of every position via the taped forward.
template <typename T>
Tensor<T> taped_logits(ModelParams<T>& p, const SequenceState& s) {
  Tape<T> tape;
  auto b = bind(tape, p);
  auto f = forward_sequence(tape, b, p.config, s);
  std::vector<std::size_t> rows(s.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return tape.value(logits_at(tape, b, f, rows));
}

SequenceState short_prompt(std::uint64_t seed) { return prompt_for(random_item(seed)); }

TEST(Model, WholeModelGradientMatchesFiniteDifferences) {
  auto cfg = tiny_config(8, 1, 2, 40);
  auto p = ModelParams<double>::init(cfg, 3);
  for (auto& v : p.lnf_b.data()) v = 0.1;
  SequenceState s = short_prompt(4);
  std::vector<TokenId> resp = V().encode("<SUMMARY> count the red squares </SUMMARY>");
  const ReplayLayout layout = replay_layout(s, resp, {});
  std::vector<Tensor<double>*> params;
  for (auto& [n, t] : p.named()) params.push_back(t);
  const double err = testing::max_grad_error(params, [&](Tape<double>& tape, const std::vector<Var>& leaves) {
    auto b = bound_from<double>(leaves, cfg.layers);
    return sum(tape, logprob_on_tape(tape, b, cfg, layout, resp));
  }, 1e-4);
  EXPECT_LT(err, 1e-3);
}

TEST(Model, Causal) {
  auto p = ModelParams<float>::init(tiny_config(), 1);
  SequenceState s = short_prompt(7);
  for (TokenId t : V().encode("<SUMMARY> the red squares </SUMMARY>")) s.append(Origin::generated, t);
  const auto base = taped_logits(p, s);
  const std::size_t cols = base.cols();
  for (std::size_t j : {s.size() - 1, s.size() - 3, std::size_t{2}}) {
    SequenceState changed;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const Position& q = s[i];
      changed.append(q.origin, i == j ? (is_visual(q.origin) ? (q.id + 1) % 10 : (q.id + 5) % 40) : q.id);
    }
    const auto alt = taped_logits(p, changed);
    for (std::size_t i = 0; i < j; ++i)
      for (std::size_t c = 0; c < cols; ++c) ASSERT_EQ(base(i, c), alt(i, c)) << "row " << i << " changed with " << j;
    bool moved = false;
    for (std::size_t c = 0; c < cols; ++c) moved = moved || base(j, c) != alt(j, c);
    EXPECT_TRUE(moved);
  }
}

TEST(Model, CachedDecodingMatchesFullForward) {
  auto p = ModelParams<float>::init(tiny_config(), 2);
  SequenceState s = short_prompt(9);
  for (TokenId t : V().encode("<CAPTION> a blue circle at row 1 column 2 </CAPTION>")) s.append(Origin::generated, t);
  const auto full = taped_logits(p, s);
  Decoder<float> dec(p);
  SequenceState partial;
  dec.reset(partial);
  double worst = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    dec.state().append(s[i].origin, s[i].id);
    const auto& lg = dec.feed();
    for (std::size_t c = 0; c < lg.size(); ++c) worst = std::max(worst, std::abs(double(lg[c]) - full(i, c)));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Model, AttentionRowsAreDistributions) {
  auto p = ModelParams<float>::init(tiny_config(), 2);
  SequenceState s = short_prompt(10);
  auto [logits, att] = forward(p, s);
  EXPECT_EQ(att.context_len, s.size());
  for (int l = 0; l < p.config.layers; ++l) {
    for (int h = 0; h < p.config.heads; ++h) {
      double tot = 0;
      for (std::size_t j = 0; j < att.context_len; ++j) tot += att.at(l, h, p.config.heads, j);
      EXPECT_NEAR(tot, 1.0, 1e-5);
    }
  }
}

TEST(Model, CapacityErrorPastMaxPositions) {
  auto p = ModelParams<float>::init(tiny_config(16, 1, 2, 20), 2);
  SequenceState s = short_prompt(11);
  while (s.size() <= 20) s.append(Origin::generated, V().eos());
  EXPECT_THROW(taped_logits(p, s), CapacityError);
  Decoder<float> dec(p);
  dec.reset(s);
  EXPECT_THROW(dec.feed(), CapacityError);
}

TEST(Model, BadConfigRejected) {
  auto cfg = tiny_config();
  cfg.heads = 3;
  EXPECT_THROW(ModelParams<float>{cfg}, ConfigError);
}

TEST(Sampling, SameSeedSameOutput) {
  auto p = ModelParams<float>::init(tiny_config(), 5);
  SequenceState s = short_prompt(12);
  SampleParams sp;
  sp.max_new = 30;
  sp.seed = 99;
  auto a = sample(p, s, sp), b = sample(p, s, sp);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_EQ(a.logprobs, b.logprobs);
  sp.seed = 100;
  EXPECT_NE(sample(p, s, sp).tokens, a.tokens);
}

TEST(Sampling, GreedyTakesArgmax) {
  auto p = ModelParams<float>::init(tiny_config(), 5);
  SequenceState s = short_prompt(13);
  SampleParams sp;
  sp.greedy = true;
  sp.max_new = 6;
  auto r = sample(p, s, sp);
  SequenceState st = s;
  for (TokenId t : r.tokens) {
    auto [lg, att] = forward(p, st);
    EXPECT_EQ(t, std::max_element(lg.begin(), lg.end()) - lg.begin());
    st.append(Origin::generated, t);
  }
}

TEST(Sampling, StopsAtStopToken) {
  auto p = ModelParams<float>::init(tiny_config(), 6);
  bias_token(p, V().eos(), 6.0);
  SampleParams sp;
  sp.max_new = 50;
  sp.stop_tokens = {V().eos()};
  auto r = sample(p, short_prompt(3), sp);
  ASSERT_TRUE(r.hit_stop);
  EXPECT_EQ(r.tokens.back(), V().eos());
  EXPECT_EQ(std::count(r.tokens.begin(), r.tokens.end(), V().eos()), 1);
}

TEST(Sampling, NonPositiveTemperatureRejected) {
  auto p = ModelParams<float>::init(tiny_config(), 6);
  SampleParams sp;
  sp.temperature = 0;
  EXPECT_THROW(sample(p, short_prompt(3), sp), ConfigError);
}

TEST(Replay, LogprobsMatchSamplerWithInjections) {
  auto p = ModelParams<float>::init(tiny_config(), 8);
  bias_token(p, V().open(BlockKind::reflection), 5.5);
  std::size_t with_injection = 0;
  for (ReattentionMode mode : {ReattentionMode::vtc, ReattentionMode::vtr, ReattentionMode::vision_only}) {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      ReattentionConfig rc;
      rc.mode = mode;
      rc.m = 25;
      rc.max_injections = 4;
      ReflectionHook hook(rc);
      SampleParams sp;
      sp.max_new = 40;
      sp.seed = seed;
      const SequenceState prompt = short_prompt(20 + seed);
      auto r = sample(p, prompt, sp, std::ref(hook));
      with_injection += !hook.script().empty();
      const auto lp = logprob_of(p, prompt, r.tokens, hook.script());
      ASSERT_EQ(lp.size(), r.logprobs.size());
      for (std::size_t i = 0; i < lp.size(); ++i) EXPECT_NEAR(lp[i], r.logprobs[i], 1e-5);
      const ReplayLayout layout = replay_layout(prompt, r.tokens, hook.script());
      EXPECT_EQ(layout.sequence, r.state);
      Tape<float> tape;
      auto b = bind(tape, p);
      const auto& taped = tape.value(logprob_on_tape(tape, b, p.config, layout, r.tokens));
      for (std::size_t i = 0; i < lp.size(); ++i) EXPECT_NEAR(taped[i], r.logprobs[i], 1e-4);
      for (std::size_t i = 0; i < r.sampled.size(); ++i) EXPECT_EQ(r.sampled[i], bool(layout.is_action[i]));
    }
  }
  EXPECT_GT(with_injection, 6u);
}

TEST(Replay, EditingOneTokenOnlyMovesLaterLogprobs) {
  auto p = ModelParams<float>::init(tiny_config(), 8);
  const SequenceState prompt = short_prompt(30);
  auto resp = V().encode("<SUMMARY> count the red squares </SUMMARY> <CONCLUSION> 2 </CONCLUSION>");
  const auto base = logprob_of(p, prompt, resp);
  for (std::size_t j = 0; j + 1 < resp.size(); j += 3) {
    auto edited = resp;
    edited[j] = V().id("blue");
    const auto alt = logprob_of(p, prompt, edited);
    for (std::size_t i = 0; i < j; ++i) EXPECT_EQ(base[i], alt[i]);
    bool later = false;
    for (std::size_t i = j + 1; i < resp.size(); ++i) later = later || base[i] != alt[i];
    EXPECT_TRUE(later);
  }
}

TEST(Replay, BadScriptsRejected) {
  const SequenceState prompt = short_prompt(31);
  auto resp = V().encode("<SUMMARY> red </SUMMARY>");
  InjectionScript bad{{1, ReattentionMode::vtc, {1, 2}, {}}};
  EXPECT_THROW(replay_layout(prompt, resp, bad), ReplayError);
  InjectionScript past{{9, ReattentionMode::text_only, {}, {}}};
  EXPECT_THROW(replay_layout(prompt, resp, past), ReplayError);
  EXPECT_THROW(replay_layout(SequenceState{}, resp, {}), ReplayError);
}

TEST(Checkpoint, RoundTripIsExact) {
  auto p = ModelParams<float>::init(tiny_config(), 12);
  p.set_visual_frozen(true);
  const auto path = (std::filesystem::temp_directory_path() / "relook_model_rt.ckpt").string();
  save_checkpoint(path, p, {{"step", 17}});
  nlohmann::json extra;
  auto q = load_checkpoint(path, &extra);
  EXPECT_EQ(q.config, p.config);
  EXPECT_EQ(extra.at("step"), 17);
  auto a = p.named();
  auto b = q.named();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    EXPECT_EQ(a[i].second->values(), b[i].second->values());
  }
  std::remove(path.c_str());
}

TEST(Checkpoint, GarbageFileRejected) {
  const auto path = (std::filesystem::temp_directory_path() / "relook_model_bad.ckpt").string();
  {
    std::ofstream os(path, std::ios::binary);
    os << "not a checkpoint";
  }
  EXPECT_THROW(load_checkpoint(path), Error);
  EXPECT_THROW(load_checkpoint(path + ".missing"), Error);
  std::remove(path.c_str());
}

TEST(Params, CloneCopiesValuesAndFreezeFlag) {
  auto p = ModelParams<float>::init(tiny_config(), 12);
  p.set_visual_frozen(true);
  auto q = p.clone();
  EXPECT_TRUE(q.visual_frozen());
  EXPECT_EQ(q.head.values(), p.head.values());
  q.head[0] += 1;
  EXPECT_NE(q.head[0], p.head[0]);
}

}  // namespace
}  // namespace relook
