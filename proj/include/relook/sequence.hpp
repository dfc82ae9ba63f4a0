#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "relook/error.hpp"
#include "relook/vocab.hpp"

namespace relook {

/// Where a context position came from.
enum class Origin : std::uint8_t { prompt_text, visual, generated, injected_visual };

inline bool is_visual(Origin o) { return o == Origin::visual || o == Origin::injected_visual; }

struct Position {
  Origin origin;
  int id;  // text token id, or visual embedding id for visual origins
  friend bool operator==(const Position&, const Position&) = default;
};

/// Append-only decode buffer. Positions below `committed()` have been consumed
/// by the model and are immutable; the pending tail may still be rearranged
/// by a sampling hook.
class SequenceState {
 public:
  SequenceState() = default;

  static SequenceState from_prompt(const std::vector<int>& visual_ids, const std::vector<TokenId>& text_ids) {
    SequenceState s;
    for (int v : visual_ids) s.append(Origin::visual, v);
    for (TokenId t : text_ids) s.append(Origin::prompt_text, t);
    return s;
  }

  void append(Origin o, int id) { positions_.push_back({o, id}); }

  /// Removes the last position; only pending (uncommitted) positions may go.
  Position pop_pending() {
    if (positions_.size() <= committed_) throw Error("cannot remove a position the model has consumed");
    Position p = positions_.back();
    positions_.pop_back();
    return p;
  }

  const std::vector<Position>& positions() const { return positions_; }
  const Position& operator[](std::size_t i) const { return positions_[i]; }
  std::size_t size() const { return positions_.size(); }
  bool empty() const { return positions_.empty(); }

  std::size_t committed() const { return committed_; }
  void set_committed(std::size_t n) {
    if (n > positions_.size()) throw Error("commit beyond sequence end");
    committed_ = n;
  }

  std::size_t count(Origin o) const {
    return static_cast<std::size_t>(
        std::count_if(positions_.begin(), positions_.end(), [o](const Position& p) { return p.origin == o; }));
  }
  std::size_t text_prompt_length() const { return count(Origin::prompt_text); }  // L_x
  std::size_t visual_length() const { return count(Origin::visual); }            // L_c
  std::size_t generated_length() const { return count(Origin::generated); }      // L_y
  std::size_t injected_length() const { return count(Origin::injected_visual); }  // k

  std::vector<std::size_t> indices(Origin o) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < positions_.size(); ++i)
      if (positions_[i].origin == o) out.push_back(i);
    return out;
  }

  /// Embedding ids of the original visual span, in order.
  std::vector<int> visual_ids() const {
    std::vector<int> out;
    for (const auto& p : positions_)
      if (p.origin == Origin::visual) out.push_back(p.id);
    return out;
  }

  std::vector<TokenId> generated_tokens() const {
    std::vector<TokenId> out;
    for (const auto& p : positions_)
      if (p.origin == Origin::generated) out.push_back(p.id);
    return out;
  }

  friend bool operator==(const SequenceState& a, const SequenceState& b) { return a.positions_ == b.positions_; }

 private:
  std::vector<Position> positions_;
  std::size_t committed_ = 0;
};

enum class ReattentionMode { off, text_only, vision_only, vtc, vtr };

inline std::string_view mode_name(ReattentionMode m) {
  switch (m) {
    case ReattentionMode::off: return "off";
    case ReattentionMode::text_only: return "text_only";
    case ReattentionMode::vision_only: return "vision_only";
    case ReattentionMode::vtc: return "vtc";
    case ReattentionMode::vtr: return "vtr";
  }
  return "?";
}

inline ReattentionMode mode_from_name(std::string_view s) {
  for (auto m : {ReattentionMode::off, ReattentionMode::text_only, ReattentionMode::vision_only,
                 ReattentionMode::vtc, ReattentionMode::vtr}) {
    if (mode_name(m) == s) return m;
  }
  throw ConfigError("unknown reattention mode '" + std::string(s) + "'");
}

/// One visual insertion made while sampling. `step` is the index, within the
/// response, of the token the visual block was placed before; `forced` lists
/// tokens appended after it without being sampled.
struct InjectionEvent {
  std::size_t step = 0;
  ReattentionMode mode = ReattentionMode::vtc;
  std::vector<int> visual_ids;
  std::vector<TokenId> forced;
  friend bool operator==(const InjectionEvent&, const InjectionEvent&) = default;
};

using InjectionScript = std::vector<InjectionEvent>;

/// Physical layout of prompt + response + injections.
struct ReplayLayout {
  SequenceState sequence;
  std::vector<std::size_t> predict_rows;  // row whose logits score response token s
  std::vector<bool> is_action;            // false for forced tokens
};

/// Rebuilds the sequence the sampler produced from the prompt, the response
/// tokens and the injection script.
inline ReplayLayout replay_layout(const SequenceState& prompt, const std::vector<TokenId>& response,
                                  const InjectionScript& script) {
  if (prompt.empty()) throw ReplayError("empty prompt");
  ReplayLayout out;
  out.sequence = prompt;
  out.sequence.set_committed(0);
  out.predict_rows.reserve(response.size());
  out.is_action.assign(response.size(), true);
  std::size_t ev = 0;
  for (std::size_t s = 0; s < response.size(); ++s) {
    std::size_t predict = out.sequence.size() - 1;
    if (ev < script.size() && script[ev].step < s) throw ReplayError("injection script is not ordered by step");
    if (ev < script.size() && script[ev].step == s) {
      const auto& e = script[ev];
      if (e.mode != ReattentionMode::off && e.mode != ReattentionMode::text_only &&
          response[s] != Vocabulary::instance().open(BlockKind::reflection)) {
        throw ReplayError("injection at step " + std::to_string(s) + " does not precede a reflection tag");
      }
      for (int v : e.visual_ids) out.sequence.append(Origin::injected_visual, v);
      for (std::size_t f = 0; f < e.forced.size(); ++f) {
        if (s + 1 + f >= response.size() || response[s + 1 + f] != e.forced[f]) {
          throw ReplayError("forced tokens of injection at step " + std::to_string(s) + " do not match the response");
        }
        out.is_action[s + 1 + f] = false;
      }
      ++ev;
    }
    out.predict_rows.push_back(predict);
    out.sequence.append(Origin::generated, response[s]);
  }
  if (ev != script.size()) throw ReplayError("injection script refers past the end of the response");
  return out;
}

}  // namespace relook
