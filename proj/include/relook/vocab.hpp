#pragma once

#include <array>
#include <cctype>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "relook/error.hpp"

namespace relook {

using TokenId = int;

enum class BlockKind { summary, caption, reasoning, reflection, conclusion };

inline constexpr std::array<BlockKind, 5> kAllBlocks = {BlockKind::summary, BlockKind::caption,
                                                        BlockKind::reasoning, BlockKind::reflection,
                                                        BlockKind::conclusion};

inline std::string_view block_name(BlockKind k) {
  switch (k) {
    case BlockKind::summary: return "SUMMARY";
    case BlockKind::caption: return "CAPTION";
    case BlockKind::reasoning: return "REASONING";
    case BlockKind::reflection: return "REFLECTION";
    case BlockKind::conclusion: return "CONCLUSION";
  }
  return "?";
}

inline std::string open_tag(BlockKind k) { return "<" + std::string(block_name(k)) + ">"; }
inline std::string close_tag(BlockKind k) { return "</" + std::string(block_name(k)) + ">"; }

/// A tag lexeme: which block it delimits and whether it opens or closes.
struct TagInfo {
  BlockKind kind;
  bool closing;
};

inline std::optional<TagInfo> parse_tag(std::string_view s) {
  for (BlockKind k : kAllBlocks) {
    if (s == open_tag(k)) return TagInfo{k, false};
    if (s == close_tag(k)) return TagInfo{k, true};
  }
  return std::nullopt;
}

/// Splits text into words and tags. Tags need no surrounding whitespace;
/// everything else splits on whitespace.
inline std::vector<std::string> lex_text(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (c == '<') {
      const auto close = text.find('>', i);
      if (close != std::string_view::npos && parse_tag(text.substr(i, close - i + 1))) {
        flush();
        out.emplace_back(text.substr(i, close - i + 1));
        i = close + 1;
        continue;
      }
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else {
      cur.push_back(c);
    }
    ++i;
  }
  flush();
  return out;
}

/// Fixed word-level text vocabulary: two control tokens, ten block tags, count
/// numerals, and a closed word list covering every template.
class Vocabulary {
 public:
  static constexpr int kMaxNumeral = 64;

  Vocabulary() {
    add("<pad>");
    add("<eos>");
    for (BlockKind k : kAllBlocks) {
      add(open_tag(k));
      add(close_tag(k));
    }
    for (int n = 0; n <= kMaxNumeral; ++n) add(std::to_string(n));
    for (std::string_view w : kWords) add(std::string(w));
  }

  static const Vocabulary& instance() {
    static const Vocabulary v;
    return v;
  }

  std::size_t size() const { return words_.size(); }
  const std::string& word(TokenId id) const { return words_.at(static_cast<std::size_t>(id)); }

  std::optional<TokenId> find(std::string_view w) const {
    auto it = index_.find(std::string(w));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  TokenId id(std::string_view w) const {
    auto f = find(w);
    if (!f) throw FormatError("word not in vocabulary: '" + std::string(w) + "'");
    return *f;
  }

  TokenId pad() const { return 0; }
  TokenId eos() const { return 1; }
  TokenId open(BlockKind k) const { return 2 + 2 * static_cast<int>(k); }
  TokenId close(BlockKind k) const { return 3 + 2 * static_cast<int>(k); }

  std::optional<TagInfo> tag(TokenId id) const {
    if (id < 2 || id >= 12) return std::nullopt;
    return TagInfo{static_cast<BlockKind>((id - 2) / 2), (id - 2) % 2 == 1};
  }

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> out;
    for (const auto& w : lex_text(text)) out.push_back(id(w));
    return out;
  }

  std::vector<TokenId> encode_words(const std::vector<std::string>& words) const {
    std::vector<TokenId> out;
    out.reserve(words.size());
    for (const auto& w : words) out.push_back(id(w));
    return out;
  }

  std::string decode(const std::vector<TokenId>& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) out.push_back(' ');
      out += word(ids[i]);
    }
    return out;
  }

 private:
  void add(std::string w) {
    index_.emplace(w, static_cast<TokenId>(words_.size()));
    words_.push_back(std::move(w));
  }

  static constexpr std::string_view kWords[] = {
      ".", ",", ":", "?", "a", "an", "the", "is", "are", "there", "how", "many", "what", "which",
      "of", "in", "at", "on", "and", "or", "not", "no", "yes", "so", "it", "this", "that", "to",
      "i", "me", "let", "will", "must", "can", "see", "look", "again", "check", "list", "count",
      "counted", "number", "total", "answer", "question", "asks", "about", "image", "shows",
      "scene", "grid", "row", "column", "cell", "position", "object", "objects", "shape", "shapes",
      "color", "colors", "red", "green", "blue", "yellow", "square", "circle", "triangle",
      "squares", "circles", "triangles", "nothing", "empty", "present", "absent", "missing",
      "found", "find", "whether", "each", "every", "one", "none", "all", "only", "also", "then",
      "first", "next", "finally", "step", "steps", "verify", "verified", "confirm", "confirms",
      "matches", "match", "does", "do", "has", "have", "with", "for", "from", "by", "be", "was",
      "were", "same", "different", "correct", "wait", "recount", "result", "final",
      "therefore", "because", "holds", "contains", "contain", "item", "items", "left",
      "right", "top", "bottom", "middle", "corner", "near", "far", "above", "below", "beside",
      "between", "more", "less", "than", "equal", "zero", "single", "pair", "some", "any",
      "other", "others", "here", "where", "when", "who", "why", "kind", "type", "size", "small",
      "large", "big", "visible", "hidden", "careful", "carefully", "describe", "description",
      "reason", "reasoning", "think", "thought", "summary", "caption", "reflection", "conclusion",
      "task", "need", "needs", "want", "use", "used", "image's", "shown"};

  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace relook
