#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "relook/vocab.hpp"

namespace relook {

enum class ViolationKind {
  missing_block,
  duplicate_block,
  wrong_order,
  unclosed_tag,
  unmatched_close,
  overlap,
  nesting,
  stray_text,
};

inline std::string_view violation_name(ViolationKind k) {
  switch (k) {
    case ViolationKind::missing_block: return "missing_block";
    case ViolationKind::duplicate_block: return "duplicate_block";
    case ViolationKind::wrong_order: return "wrong_order";
    case ViolationKind::unclosed_tag: return "unclosed_tag";
    case ViolationKind::unmatched_close: return "unmatched_close";
    case ViolationKind::overlap: return "overlap";
    case ViolationKind::nesting: return "nesting";
    case ViolationKind::stray_text: return "stray_text";
  }
  return "?";
}

struct Violation {
  ViolationKind kind;
  std::size_t position;  // token index where the breach was detected
  std::optional<BlockKind> block;

  std::string describe() const {
    std::string s(violation_name(kind));
    s += " at token " + std::to_string(position);
    if (block) s += " (" + std::string(block_name(*block)) + ")";
    return s;
  }
};

/// One top-level tagged region. `start` indexes the opening tag and `end` is
/// one past the closing tag; `words` holds the content between them.
struct Block {
  BlockKind kind;
  std::size_t start;
  std::size_t end;
  std::vector<std::string> words;

  std::size_t length() const { return end - start - 2; }
  std::string text() const {
    std::string out;
    for (std::size_t i = 0; i < words.size(); ++i) out += (i ? " " : "") + words[i];
    return out;
  }
};

struct StructuredResponse {
  std::vector<std::string> tokens;
  std::vector<Block> blocks;
  std::vector<Violation> violations;

  bool valid() const { return violations.empty(); }
  bool has_violation(ViolationKind k) const {
    return std::any_of(violations.begin(), violations.end(), [k](const Violation& v) { return v.kind == k; });
  }
};

struct ReflectionStats {
  std::size_t count = 0;         // N_r
  std::size_t total_length = 0;  // L_r_total, tags excluded
  std::vector<std::size_t> lengths;

  double mean_length() const { return count ? static_cast<double>(total_length) / count : 0.0; }
};

namespace detail {

inline int canonical_rank(BlockKind k) {
  switch (k) {
    case BlockKind::summary: return 0;
    case BlockKind::caption: return 1;
    case BlockKind::reasoning: return 2;
    case BlockKind::conclusion: return 3;
    case BlockKind::reflection: return -1;
  }
  return -1;
}

}  // namespace detail

/// Extracts top-level blocks from a word/tag sequence. Never throws: every
/// structural problem is reported in `violations`.
inline StructuredResponse parse_words(std::vector<std::string> tokens) {
  StructuredResponse r;
  r.tokens = std::move(tokens);
  const auto& tk = r.tokens;

  struct Open {
    BlockKind kind;
    std::size_t pos;
  };
  std::vector<Open> stack;
  BlockKind outer_kind = BlockKind::summary;
  std::size_t outer_start = 0;
  bool in_stray = false;

  for (std::size_t i = 0; i < tk.size(); ++i) {
    const auto tag = parse_tag(tk[i]);
    if (!tag) {
      if (stack.empty()) {
        if (!in_stray) r.violations.push_back({ViolationKind::stray_text, i, std::nullopt});
        in_stray = true;
      }
      continue;
    }
    in_stray = false;
    if (!tag->closing) {
      if (stack.empty()) {
        outer_kind = tag->kind;
        outer_start = i;
      }
      stack.push_back({tag->kind, i});
      continue;
    }
    if (stack.empty()) {
      r.violations.push_back({ViolationKind::unmatched_close, i, tag->kind});
      continue;
    }
    if (stack.back().kind == tag->kind) {
      if (stack.size() > 1) r.violations.push_back({ViolationKind::nesting, stack.back().pos, tag->kind});
      stack.pop_back();
      if (stack.empty()) {
        Block b{outer_kind, outer_start, i + 1, {}};
        b.words.assign(tk.begin() + static_cast<std::ptrdiff_t>(outer_start + 1),
                       tk.begin() + static_cast<std::ptrdiff_t>(i));
        r.blocks.push_back(std::move(b));
      }
      continue;
    }
    auto it = std::find_if(stack.rbegin(), stack.rend(), [&](const Open& o) { return o.kind == tag->kind; });
    if (it != stack.rend()) {
      r.violations.push_back({ViolationKind::overlap, i, tag->kind});
      stack.erase(std::next(it).base());
    } else {
      r.violations.push_back({ViolationKind::unmatched_close, i, tag->kind});
    }
  }
  for (const Open& o : stack) r.violations.push_back({ViolationKind::unclosed_tag, o.pos, o.kind});

  // Block-level rules for everything except reflections.
  std::array<int, 4> seen{};
  std::array<std::size_t, 4> first_pos{};
  int last_rank = -1;
  for (const Block& b : r.blocks) {
    const int rank = detail::canonical_rank(b.kind);
    if (rank < 0) continue;
    if (seen[rank]++ == 0) {
      first_pos[rank] = b.start;
    } else {
      r.violations.push_back({ViolationKind::duplicate_block, b.start, b.kind});
    }
    if (rank < last_rank) r.violations.push_back({ViolationKind::wrong_order, b.start, b.kind});
    last_rank = std::max(last_rank, rank);
  }
  constexpr std::array<BlockKind, 4> required = {BlockKind::summary, BlockKind::caption, BlockKind::reasoning,
                                                 BlockKind::conclusion};
  for (int k = 0; k < 4; ++k) {
    if (seen[k] == 0) r.violations.push_back({ViolationKind::missing_block, tk.size(), required[k]});
  }
  return r;
}

inline StructuredResponse parse(std::string_view text) { return parse_words(lex_text(text)); }

inline StructuredResponse parse(const std::vector<TokenId>& ids, const Vocabulary& vocab = Vocabulary::instance()) {
  std::vector<std::string> words;
  words.reserve(ids.size());
  for (TokenId id : ids) words.push_back(vocab.word(id));
  return parse_words(std::move(words));
}

/// Re-emits the blocks of a response; identical to the input for valid ones.
inline std::vector<std::string> serialize(const StructuredResponse& r) {
  std::vector<std::string> out;
  for (const Block& b : r.blocks) {
    out.push_back(open_tag(b.kind));
    out.insert(out.end(), b.words.begin(), b.words.end());
    out.push_back(close_tag(b.kind));
  }
  return out;
}

inline ReflectionStats reflection_stats(const StructuredResponse& r) {
  ReflectionStats s;
  for (const Block& b : r.blocks) {
    if (b.kind != BlockKind::reflection) continue;
    ++s.count;
    s.lengths.push_back(b.length());
    s.total_length += b.length();
  }
  return s;
}

/// Normalized answer from the last CONCLUSION block, or nullopt when absent.
///
/// Words are lowercased and stripped of trailing punctuation. The last numeric
/// word wins; otherwise the last "yes"/"no"; otherwise the whole text with a
/// leading "the answer is" removed.
inline std::optional<std::string> extract_conclusion(const StructuredResponse& r) {
  const Block* last = nullptr;
  for (const Block& b : r.blocks)
    if (b.kind == BlockKind::conclusion) last = &b;
  if (last == nullptr) return std::nullopt;

  std::vector<std::string> words;
  for (std::string w : last->words) {
    if (parse_tag(w)) continue;
    std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return std::tolower(c); });
    while (!w.empty() && std::string_view(".,!?;:").find(w.back()) != std::string_view::npos) w.pop_back();
    if (!w.empty()) words.push_back(std::move(w));
  }
  if (words.empty()) return std::nullopt;

  auto is_number = [](const std::string& w) {
    return std::all_of(w.begin(), w.end(), [](unsigned char c) { return std::isdigit(c); });
  };
  for (auto it = words.rbegin(); it != words.rend(); ++it)
    if (is_number(*it)) return *it;
  for (auto it = words.rbegin(); it != words.rend(); ++it)
    if (*it == "yes" || *it == "no") return *it;

  std::size_t from = 0;
  if (words.size() > 3 && words[0] == "the" && words[1] == "answer" && words[2] == "is") from = 3;
  std::string out;
  for (std::size_t i = from; i < words.size(); ++i) out += (i > from ? " " : "") + words[i];
  return out;
}

}  // namespace relook
