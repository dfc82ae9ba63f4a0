#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <vector>

#include "relook/error.hpp"
#include "relook/model.hpp"
#include "relook/sequence.hpp"
#include "relook/vocab.hpp"

namespace relook {

/// Token counts of a sequence and its visual proportion before (r) and after
/// (r_prime) k injected visual tokens.
struct VisualRatio {
  std::size_t text_prompt = 0;  // L_x
  std::size_t visual = 0;       // L_c
  std::size_t generated = 0;    // L_y
  std::size_t injected = 0;     // k

  double r() const {
    const double total = static_cast<double>(text_prompt + visual + generated);
    return total > 0 ? static_cast<double>(visual) / total : 0.0;
  }
  double r_prime() const {
    const double total = static_cast<double>(text_prompt + visual + generated + injected);
    return total > 0 ? static_cast<double>(visual + injected) / total : 0.0;
  }
};

inline VisualRatio visual_ratio(const SequenceState& s) {
  return {s.text_prompt_length(), s.visual_length(), s.generated_length(), s.injected_length()};
}

struct ReattentionConfig {
  ReattentionMode mode = ReattentionMode::off;
  double m = 50.0;  // routing percentage for vtr
  std::size_t max_injections = std::numeric_limits<std::size_t>::max();

  void validate() const {
    if (!(m >= 0.0 && m <= 100.0)) throw ConfigError("routing percentage m must lie in [0, 100]");
  }
  friend bool operator==(const ReattentionConfig&, const ReattentionConfig&) = default;
};

/// attn_j = (1/L_y) sum_i attn_{i,j} over the first `steps` response tokens,
/// where attn_{i,j} is the layer/head mean attention of step i to the j-th
/// original visual position.
inline std::vector<double> aggregate_visual_attention(const AttnRecord& rec, std::size_t steps) {
  if (steps == 0) throw Error("aggregate_visual_attention: no generated steps");
  if (steps > rec.steps.size()) throw Error("aggregate_visual_attention: record shorter than requested steps");
  const std::size_t lc = rec.visual_positions.size();
  std::vector<double> out(lc, 0.0);
  const double lh = static_cast<double>(rec.layers) * rec.heads;
  for (std::size_t i = 0; i < steps; ++i) {
    const AttnStep& st = rec.steps[i];
    for (std::size_t j = 0; j < lc; ++j) {
      const std::size_t pos = rec.visual_positions[j];
      if (pos >= st.context_len) continue;
      double s = 0.0;
      for (int l = 0; l < rec.layers; ++l)
        for (int h = 0; h < rec.heads; ++h) s += st.at(l, h, rec.heads, pos);
      out[j] += s / lh;
    }
  }
  for (auto& v : out) v /= static_cast<double>(steps);
  return out;
}

/// Number of tokens routed for percentage m of `count` visual tokens, rounded up.
inline std::size_t routed_count(double m, std::size_t count) {
  if (!(m >= 0.0 && m <= 100.0)) throw ConfigError("routing percentage m must lie in [0, 100]");
  // Round-off guard so exact products such as 50% of 16 stay at 8.
  const double raw = m * static_cast<double>(count) / 100.0;
  return std::min(count, static_cast<std::size_t>(std::ceil(raw - 1e-9)));
}

/// Indices of the ceil(m% * n) highest scores, lower index first among ties,
/// returned in ascending index order.
inline std::vector<std::size_t> select_top_m(const std::vector<double>& scores, double m) {
  const std::size_t take = routed_count(m, scores.size());
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  idx.resize(take);
  std::sort(idx.begin(), idx.end());
  return idx;
}

struct InjectionOutcome {
  std::size_t k = 0;
  bool limited = false;  // refused because the injection budget is spent
  std::vector<int> ids;
};

/// Number of separate injected blocks already in the sequence.
inline std::size_t injection_count(const SequenceState& s) {
  std::size_t blocks = 0;
  bool in_block = false;
  for (const auto& p : s.positions()) {
    const bool inj = p.origin == Origin::injected_visual;
    if (inj && !in_block) ++blocks;
    in_block = inj;
  }
  return blocks;
}

namespace detail {

inline void require_pending_reflection(const SequenceState& s) {
  const TokenId open = Vocabulary::instance().open(BlockKind::reflection);
  if (s.empty() || s.committed() >= s.size() || s.positions().back().origin != Origin::generated ||
      s.positions().back().id != open) {
    throw Error("visual injection requires a freshly emitted <REFLECTION> token");
  }
}

// Moves the trailing <REFLECTION> behind the injected block.
inline InjectionOutcome displace_and_inject(SequenceState& s, std::vector<int> ids, std::size_t max_injections) {
  require_pending_reflection(s);
  InjectionOutcome out;
  if (ids.empty()) return out;
  if (injection_count(s) >= max_injections) {
    out.limited = true;
    return out;
  }
  const Position refl = s.pop_pending();
  for (int v : ids) s.append(Origin::injected_visual, v);
  s.append(refl.origin, refl.id);
  out.k = ids.size();
  out.ids = std::move(ids);
  return out;
}

}  // namespace detail

/// Visual Token COPY: re-presents the whole original visual span before the
/// just-emitted <REFLECTION>.
inline InjectionOutcome apply_vtc(SequenceState& s,
                                  std::size_t max_injections = std::numeric_limits<std::size_t>::max()) {
  return detail::displace_and_inject(s, s.visual_ids(), max_injections);
}

/// Visual Token ROUTE: re-presents the top-m% original visual tokens ranked by
/// their mean attention over the response so far.
inline InjectionOutcome apply_vtr(SequenceState& s, const AttnRecord& rec, double m,
                                  std::size_t max_injections = std::numeric_limits<std::size_t>::max()) {
  detail::require_pending_reflection(s);
  const std::vector<int> visual = s.visual_ids();
  if (rec.visual_positions.size() != visual.size()) {
    throw Error("attention record and sequence disagree on the visual span");
  }
  std::vector<int> ids;
  if (routed_count(m, visual.size()) > 0) {
    const auto scores = aggregate_visual_attention(rec, rec.steps.size());
    for (std::size_t j : select_top_m(scores, m)) ids.push_back(visual[j]);
  }
  return detail::displace_and_inject(s, std::move(ids), max_injections);
}

/// Sampling hook that applies the configured reflection mode whenever the
/// policy emits <REFLECTION>, and records each insertion for replay.
class ReflectionHook {
 public:
  explicit ReflectionHook(ReattentionConfig cfg) : cfg_(cfg), script_(std::make_shared<InjectionScript>()) {
    cfg_.validate();
  }

  void operator()(HookContext& ctx) const {
    const auto& vocab = Vocabulary::instance();
    if (ctx.token != vocab.open(BlockKind::reflection)) return;
    InjectionOutcome got;
    std::vector<TokenId> forced;
    switch (cfg_.mode) {
      case ReattentionMode::off:
      case ReattentionMode::text_only: return;
      case ReattentionMode::vtc: got = apply_vtc(ctx.state, cfg_.max_injections); break;
      case ReattentionMode::vtr:
        got = apply_vtr(ctx.state, ctx.record, cfg_.m, cfg_.max_injections);
        break;
      case ReattentionMode::vision_only:
        got = apply_vtc(ctx.state, cfg_.max_injections);
        forced.push_back(vocab.close(BlockKind::reflection));
        ctx.state.append(Origin::generated, forced.back());
        break;
    }
    if (got.k == 0 && forced.empty()) return;
    script_->push_back({ctx.step, cfg_.mode, std::move(got.ids), std::move(forced)});
  }

  const InjectionScript& script() const { return *script_; }
  void clear() const { script_->clear(); }
  const ReattentionConfig& config() const { return cfg_; }

 private:
  ReattentionConfig cfg_;
  std::shared_ptr<InjectionScript> script_;
};

inline ReflectionHook reflection_hook(const ReattentionConfig& cfg) { return ReflectionHook(cfg); }

}  // namespace relook
