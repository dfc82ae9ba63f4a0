#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "relook/error.hpp"
#include "relook/model.hpp"
#include "relook/scene.hpp"
#include "relook/sequence.hpp"
#include "relook/trace_grammar.hpp"

namespace relook {

// ---------------------------------------------------------------------------
// Object mentions and CHAIR

using BlockMask = std::set<BlockKind>;

inline const BlockMask& default_mention_mask() {
  static const BlockMask mask{BlockKind::caption, BlockKind::conclusion};
  return mask;
}

struct ObjectMentionReport {
  std::set<std::string> generated;
  std::set<std::string> gold;
  std::set<std::string> hallucinated;  // generated - gold
  std::set<std::string> recalled;      // generated & gold
};

/// "color shape" labels mentioned in `words`, matching a color word followed by
/// a singular or plural shape word.
inline std::set<std::string> mentioned_objects(const std::vector<std::string>& words) {
  std::set<std::string> out;
  for (std::size_t i = 0; i + 1 < words.size(); ++i) {
    const auto c = std::find(kColorNames.begin(), kColorNames.end(), words[i]);
    if (c == kColorNames.end()) continue;
    for (std::size_t s = 0; s < kShapeNames.size(); ++s) {
      if (words[i + 1] == kShapeNames[s] || words[i + 1] == kShapePlurals[s]) {
        out.insert(std::string(*c) + " " + std::string(kShapeNames[s]));
      }
    }
  }
  return out;
}

inline ObjectMentionReport mention_report(const StructuredResponse& r, const std::set<std::string>& gold,
                                          const BlockMask& mask = default_mention_mask()) {
  ObjectMentionReport rep;
  rep.gold = gold;
  for (const Block& b : r.blocks) {
    if (!mask.contains(b.kind)) continue;
    rep.generated.merge(mentioned_objects(b.words));
  }
  for (const auto& o : rep.generated) (gold.contains(o) ? rep.recalled : rep.hallucinated).insert(o);
  return rep;
}

/// Hallucinated mentions over all mentions in the corpus.
inline double chair_i(const std::vector<ObjectMentionReport>& reports) {
  std::size_t bad = 0, all = 0;
  for (const auto& r : reports) {
    bad += r.hallucinated.size();
    all += r.generated.size();
  }
  if (all == 0) throw UndefinedMetricError("chair_i: no object mentions in the corpus");
  return static_cast<double>(bad) / static_cast<double>(all);
}

/// Fraction of responses with at least one hallucinated mention.
inline double chair_s(const std::vector<ObjectMentionReport>& reports) {
  if (reports.empty()) throw UndefinedMetricError("chair_s: empty corpus");
  std::size_t bad = 0;
  for (const auto& r : reports) bad += !r.hallucinated.empty();
  return static_cast<double>(bad) / static_cast<double>(reports.size());
}

/// Recalled gold objects over all gold objects in the corpus.
inline double recall(const std::vector<ObjectMentionReport>& reports) {
  std::size_t hit = 0, all = 0;
  for (const auto& r : reports) {
    hit += r.recalled.size();
    all += r.gold.size();
  }
  if (all == 0) throw UndefinedMetricError("recall: no gold objects in the corpus");
  return static_cast<double>(hit) / static_cast<double>(all);
}

// ---------------------------------------------------------------------------
// Attention profiles

struct AttentionProfile {
  std::size_t bucket_width = 1;
  std::vector<double> mean;        // per bucket of generation steps
  std::vector<std::size_t> count;  // samples per bucket
};

/// Mean attention_to_visual per window of `bucket_width` generation steps,
/// pooled over all records.
inline AttentionProfile attention_profile(const std::vector<AttnRecord>& records, std::size_t bucket_width) {
  if (bucket_width == 0) throw ConfigError("attention_profile: bucket width must be at least 1");
  AttentionProfile p;
  p.bucket_width = bucket_width;
  std::vector<double> sum;
  for (const auto& rec : records) {
    for (std::size_t t = 0; t < rec.steps.size(); ++t) {
      const std::size_t b = t / bucket_width;
      if (b >= sum.size()) {
        sum.resize(b + 1, 0.0);
        p.count.resize(b + 1, 0);
      }
      sum[b] += attention_to_visual(rec, t);
      ++p.count[b];
    }
  }
  p.mean.resize(sum.size(), 0.0);
  for (std::size_t b = 0; b < sum.size(); ++b) p.mean[b] = p.count[b] ? sum[b] / p.count[b] : 0.0;
  return p;
}

// ---------------------------------------------------------------------------
// Visual dependence proxy

/// A scored response: prompt, generated tokens and the injections made while
/// generating them.
struct ScoredResponse {
  SequenceState prompt;
  std::vector<TokenId> tokens;
  InjectionScript script;
};

struct MiProxy {
  std::size_t window = 1;
  std::vector<std::vector<double>> deltas;  // per response, per generated position
  std::vector<double> window_mean;
  std::vector<std::size_t> window_count;
};

/// The prompt with every visual position showing the blank visual token.
inline SequenceState blank_visual(const SequenceState& s) {
  SequenceState out;
  for (const auto& p : s.positions()) out.append(p.origin, is_visual(p.origin) ? kBlankVisual : p.id);
  return out;
}

inline InjectionScript blank_visual(InjectionScript script) {
  for (auto& e : script) std::fill(e.visual_ids.begin(), e.visual_ids.end(), kBlankVisual);
  return script;
}

/// delta_t = log p(y_t | context) - log p(y_t | context with blank visuals),
/// averaged per window of `window` generated positions across responses.
template <typename T>
MiProxy mi_proxy(const ModelParams<T>& params, const std::vector<ScoredResponse>& responses, std::size_t window) {
  if (window == 0) throw ConfigError("mi_proxy: window must be at least 1");
  MiProxy out;
  out.window = window;
  std::vector<double> sum;
  for (const auto& r : responses) {
    if (r.tokens.empty()) {
      out.deltas.emplace_back();
      continue;
    }
    const auto with = logprob_of(params, r.prompt, r.tokens, r.script);
    const auto without = logprob_of(params, blank_visual(r.prompt), r.tokens, blank_visual(r.script));
    std::vector<double> d(with.size());
    for (std::size_t t = 0; t < d.size(); ++t) {
      d[t] = with[t] - without[t];
      const std::size_t b = t / window;
      if (b >= sum.size()) {
        sum.resize(b + 1, 0.0);
        out.window_count.resize(b + 1, 0);
      }
      sum[b] += d[t];
      ++out.window_count[b];
    }
    out.deltas.push_back(std::move(d));
  }
  out.window_mean.resize(sum.size(), 0.0);
  for (std::size_t b = 0; b < sum.size(); ++b) {
    out.window_mean[b] = out.window_count[b] ? sum[b] / out.window_count[b] : 0.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trend statistics

/// Least-squares slope of y on x; 0 when x is constant.
inline double ls_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw DimensionError("ls_slope: series differ in length");
  if (x.size() < 2) throw EmptyInputError("ls_slope: need at least two points");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxx > 0 ? sxy / sxx : 0.0;
}

/// Per-step attention_to_visual series of a record.
inline std::vector<double> visual_attention_series(const AttnRecord& rec) {
  std::vector<double> out(rec.steps.size());
  for (std::size_t t = 0; t < out.size(); ++t) out[t] = attention_to_visual(rec, t);
  return out;
}

/// One-sided sign test: P(X >= successes) for X ~ Binomial(n, 1/2).
inline double sign_test_p(std::size_t successes, std::size_t n) {
  if (successes > n) throw ConfigError("sign_test_p: successes exceed trials");
  if (n == 0) return 1.0;
  double p = 0.0;
  const double ln2n = static_cast<double>(n) * std::log(2.0);
  for (std::size_t k = successes; k <= n; ++k) {
    const double lc = std::lgamma(static_cast<double>(n) + 1) - std::lgamma(static_cast<double>(k) + 1) -
                      std::lgamma(static_cast<double>(n - k) + 1);
    p += std::exp(lc - ln2n);
  }
  return std::min(1.0, p);
}

}  // namespace relook
