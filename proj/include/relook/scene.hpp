#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "relook/error.hpp"
#include "relook/vocab.hpp"

namespace relook {

enum class ShapeKind { square, circle, triangle };
enum class Color { red, green, blue, yellow };

inline constexpr std::array<std::string_view, 3> kShapeNames = {"square", "circle", "triangle"};
inline constexpr std::array<std::string_view, 3> kShapePlurals = {"squares", "circles", "triangles"};
inline constexpr std::array<std::string_view, 4> kColorNames = {"red", "green", "blue", "yellow"};

struct Object {
  ShapeKind shape = ShapeKind::square;
  Color color = Color::red;

  std::string label() const {
    return std::string(kColorNames[static_cast<int>(color)]) + " " +
           std::string(kShapeNames[static_cast<int>(shape)]);
  }
  friend bool operator==(const Object&, const Object&) = default;
};

inline std::optional<Object> object_from_label(std::string_view label) {
  for (int c = 0; c < 4; ++c) {
    for (int s = 0; s < 3; ++s) {
      Object o{static_cast<ShapeKind>(s), static_cast<Color>(c)};
      if (o.label() == label) return o;
    }
  }
  return std::nullopt;
}

struct SceneConfig {
  int width = 4;
  int height = 4;
  int min_objects = 1;
  int max_objects = 3;

  void validate() const {
    if (width <= 0 || height <= 0) throw ConfigError("scene extents must be positive");
    if (width * height > Vocabulary::kMaxNumeral) throw ConfigError("scene has more cells than numerals");
    if (min_objects < 1 || max_objects < min_objects) throw ConfigError("invalid object-count range");
    if (max_objects > width * height) {
      throw ConfigError("requested " + std::to_string(max_objects) + " objects but the grid has only " +
                        std::to_string(width * height) + " cells");
    }
  }
  friend bool operator==(const SceneConfig&, const SceneConfig&) = default;
};

/// Symbolic image: a grid with at most one object per cell, row-major.
struct Scene {
  int width = 0;
  int height = 0;
  std::vector<std::optional<Object>> cells;

  int cell_count() const { return width * height; }
  const std::optional<Object>& at(int row, int col) const { return cells.at(row * width + col); }

  int object_count() const {
    return static_cast<int>(std::count_if(cells.begin(), cells.end(), [](const auto& c) { return c.has_value(); }));
  }

  std::set<std::string> object_labels() const {
    std::set<std::string> out;
    for (const auto& c : cells)
      if (c) out.insert(c->label());
    return out;
  }

  friend bool operator==(const Scene&, const Scene&) = default;
};

// Visual tokens: id 0 is the blank cell, otherwise 1 + cell*12 + shape*4 + color,
// so the id alone carries the object's position bucket.
inline constexpr int kBlankVisual = 0;

inline int visual_vocab_size(const SceneConfig& cfg) { return 1 + cfg.width * cfg.height * 12; }

/// Cell, shape and color encoded by a non-blank visual id.
struct VisualFeatures {
  int cell = 0;
  ShapeKind shape = ShapeKind::square;
  Color color = Color::red;
};

inline std::optional<VisualFeatures> decode_visual(int id, const SceneConfig& cfg) {
  if (id == kBlankVisual) return std::nullopt;
  if (id < 0 || id >= visual_vocab_size(cfg)) throw DimensionError("visual id " + std::to_string(id) + " out of range");
  const int k = id - 1;
  return VisualFeatures{k / 12, static_cast<ShapeKind>((k % 12) / 4), static_cast<Color>(k % 4)};
}

inline std::vector<int> visual_tokens(const Scene& scene) {
  std::vector<int> out(scene.cells.size(), kBlankVisual);
  for (std::size_t i = 0; i < scene.cells.size(); ++i) {
    if (const auto& o = scene.cells[i]) {
      out[i] = 1 + static_cast<int>(i) * 12 + static_cast<int>(o->shape) * 4 + static_cast<int>(o->color);
    }
  }
  return out;
}

inline Scene generate_scene(std::uint64_t seed, const SceneConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  Scene scene;
  scene.width = cfg.width;
  scene.height = cfg.height;
  scene.cells.assign(cfg.width * cfg.height, std::nullopt);
  const int n = std::uniform_int_distribution<int>(cfg.min_objects, cfg.max_objects)(rng);
  std::vector<int> free(scene.cells.size());
  for (std::size_t i = 0; i < free.size(); ++i) free[i] = static_cast<int>(i);
  // Partial Fisher-Yates: each n-subset of cells is equally likely.
  for (int i = 0; i < n; ++i) {
    const int j = std::uniform_int_distribution<int>(i, static_cast<int>(free.size()) - 1)(rng);
    std::swap(free[i], free[j]);
    Object o;
    o.shape = static_cast<ShapeKind>(std::uniform_int_distribution<int>(0, 2)(rng));
    o.color = static_cast<Color>(std::uniform_int_distribution<int>(0, 3)(rng));
    scene.cells[free[i]] = o;
  }
  return scene;
}

enum class Template { count_color, count_shape, exists_object, attribute_of_position };

inline constexpr std::array<Template, 4> kAllTemplates = {Template::count_color, Template::count_shape,
                                                          Template::exists_object,
                                                          Template::attribute_of_position};

inline std::string_view template_name(Template t) {
  switch (t) {
    case Template::count_color: return "count_color";
    case Template::count_shape: return "count_shape";
    case Template::exists_object: return "exists_object";
    case Template::attribute_of_position: return "attribute_of_position";
  }
  return "?";
}

inline Template template_from_name(std::string_view name) {
  for (Template t : kAllTemplates)
    if (template_name(t) == name) return t;
  throw ConfigError("unknown template '" + std::string(name) + "'");
}

/// The concrete parameters of one question.
struct Query {
  Template kind = Template::count_color;
  Color color = Color::red;
  ShapeKind shape = ShapeKind::square;
  int row = 0;
  int col = 0;
};

struct QAItem {
  std::uint64_t seed = 0;
  Scene scene;
  Query query;
  std::vector<std::string> question;
  std::string gold_answer;
  std::set<std::string> gold_objects;
};

inline std::string answer_for(const Scene& scene, const Query& q) {
  switch (q.kind) {
    case Template::count_color:
      return std::to_string(std::count_if(scene.cells.begin(), scene.cells.end(),
                                          [&](const auto& c) { return c && c->color == q.color; }));
    case Template::count_shape:
      return std::to_string(std::count_if(scene.cells.begin(), scene.cells.end(),
                                          [&](const auto& c) { return c && c->shape == q.shape; }));
    case Template::exists_object: {
      const bool hit = std::any_of(scene.cells.begin(), scene.cells.end(), [&](const auto& c) {
        return c && c->shape == q.shape && c->color == q.color;
      });
      return hit ? "yes" : "no";
    }
    case Template::attribute_of_position: {
      const auto& c = scene.at(q.row, q.col);
      return c ? c->label() : "nothing";
    }
  }
  return {};
}

inline std::vector<std::string> split_words(std::string_view s) { return lex_text(s); }

inline std::vector<std::string> render_question(const Query& q) {
  const std::string color(kColorNames[static_cast<int>(q.color)]);
  const std::string shape(kShapeNames[static_cast<int>(q.shape)]);
  switch (q.kind) {
    case Template::count_color: return split_words("how many " + color + " objects are there ?");
    case Template::count_shape:
      return split_words("how many " + std::string(kShapePlurals[static_cast<int>(q.shape)]) + " are there ?");
    case Template::exists_object: return split_words("is there a " + color + " " + shape + " ?");
    case Template::attribute_of_position:
      return split_words("what is at row " + std::to_string(q.row) + " column " + std::to_string(q.col) + " ?");
  }
  return {};
}

inline QAItem make_qa(const Scene& scene, const Query& q, std::uint64_t seed = 0) {
  if (q.kind == Template::attribute_of_position &&
      (q.row < 0 || q.row >= scene.height || q.col < 0 || q.col >= scene.width)) {
    throw ConfigError("query position outside the scene");
  }
  QAItem item;
  item.seed = seed;
  item.scene = scene;
  item.query = q;
  item.question = render_question(q);
  item.gold_answer = answer_for(scene, q);
  item.gold_objects = scene.object_labels();
  return item;
}

/// Draws template parameters. exists_object and count_color deliberately ask
/// about absent attributes part of the time.
inline QAItem generate_qa(const Scene& scene, Template t, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  Query q;
  q.kind = t;
  std::vector<Object> present;
  std::vector<int> occupied;
  for (std::size_t i = 0; i < scene.cells.size(); ++i) {
    if (scene.cells[i]) {
      present.push_back(*scene.cells[i]);
      occupied.push_back(static_cast<int>(i));
    }
  }
  std::bernoulli_distribution coin(0.5);
  switch (t) {
    case Template::count_color:
      if (!present.empty() && coin(rng)) {
        q.color = present[std::uniform_int_distribution<std::size_t>(0, present.size() - 1)(rng)].color;
      } else {
        q.color = static_cast<Color>(std::uniform_int_distribution<int>(0, 3)(rng));
      }
      break;
    case Template::count_shape:
      if (!present.empty() && coin(rng)) {
        q.shape = present[std::uniform_int_distribution<std::size_t>(0, present.size() - 1)(rng)].shape;
      } else {
        q.shape = static_cast<ShapeKind>(std::uniform_int_distribution<int>(0, 2)(rng));
      }
      break;
    case Template::exists_object:
      if (!present.empty() && coin(rng)) {
        const Object o = present[std::uniform_int_distribution<std::size_t>(0, present.size() - 1)(rng)];
        q.shape = o.shape;
        q.color = o.color;
      } else {
        // Distractor: an object absent from the scene, when one exists.
        std::vector<Object> absent;
        for (int c = 0; c < 4; ++c)
          for (int s = 0; s < 3; ++s) {
            Object o{static_cast<ShapeKind>(s), static_cast<Color>(c)};
            if (std::find(present.begin(), present.end(), o) == present.end()) absent.push_back(o);
          }
        const Object o = absent[std::uniform_int_distribution<std::size_t>(0, absent.size() - 1)(rng)];
        q.shape = o.shape;
        q.color = o.color;
      }
      break;
    case Template::attribute_of_position: {
      int cell;
      if (!occupied.empty() && std::bernoulli_distribution(0.7)(rng)) {
        cell = occupied[std::uniform_int_distribution<std::size_t>(0, occupied.size() - 1)(rng)];
      } else {
        cell = std::uniform_int_distribution<int>(0, scene.cell_count() - 1)(rng);
      }
      q.row = cell / scene.width;
      q.col = cell % scene.width;
      break;
    }
  }
  return make_qa(scene, q, seed);
}

inline QAItem generate_qa(const Scene& scene, std::string_view template_id, std::uint64_t seed) {
  return generate_qa(scene, template_from_name(template_id), seed);
}

// ---------------------------------------------------------------------------
// Gold reasoning traces with exactly one reflection.

struct GoldTrace {
  std::vector<std::string> words;  // tags are single words
  std::string text() const {
    std::string out;
    for (std::size_t i = 0; i < words.size(); ++i) out += (i ? " " : "") + words[i];
    return out;
  }
};

namespace detail {

inline std::string where(int cell, int width) {
  return "row " + std::to_string(cell / width) + " column " + std::to_string(cell % width);
}

inline void append(std::vector<std::string>& out, std::string_view text) {
  for (auto& w : lex_text(text)) out.push_back(std::move(w));
}

}  // namespace detail

inline GoldTrace gold_trace(const QAItem& qa) {
  const Scene& s = qa.scene;
  const Query& q = qa.query;
  const std::string color(kColorNames[static_cast<int>(q.color)]);
  const std::string shape(kShapeNames[static_cast<int>(q.shape)]);
  const std::string plural(kShapePlurals[static_cast<int>(q.shape)]);
  const std::string target_pos = "row " + std::to_string(q.row) + " column " + std::to_string(q.col);

  std::vector<std::pair<int, Object>> objs;
  for (int i = 0; i < s.cell_count(); ++i)
    if (s.cells[i]) objs.emplace_back(i, *s.cells[i]);

  auto matches = [&](const Object& o) {
    switch (q.kind) {
      case Template::count_color: return o.color == q.color;
      case Template::count_shape: return o.shape == q.shape;
      case Template::exists_object: return o.color == q.color && o.shape == q.shape;
      case Template::attribute_of_position: return false;
    }
    return false;
  };

  std::vector<std::string> w;
  using detail::append;
  append(w, "<SUMMARY>");
  switch (q.kind) {
    case Template::count_color: append(w, "i will list the objects and count the " + color + " objects ."); break;
    case Template::count_shape: append(w, "i will list the objects and count the " + plural + " ."); break;
    case Template::exists_object:
      append(w, "i will list the objects and check whether there is a " + color + " " + shape + " .");
      break;
    case Template::attribute_of_position:
      append(w, "i will list the objects and find what is at " + target_pos + " .");
      break;
  }
  append(w, "</SUMMARY> <CAPTION> the image shows");
  for (std::size_t i = 0; i < objs.size(); ++i) {
    if (i) append(w, ",");
    append(w, "a " + objs[i].second.label() + " at " + detail::where(objs[i].first, s.width));
  }
  append(w, ". </CAPTION> <REASONING>");

  int hits = 0;
  for (const auto& [cell, o] : objs) {
    const bool m = matches(o);
    hits += m;
    switch (q.kind) {
      case Template::count_color: append(w, "the " + o.label() + (m ? " is " : " is not ") + color + " ."); break;
      case Template::count_shape:
        append(w, "the " + o.label() + (m ? " is a " : " is not a ") + shape + " .");
        break;
      case Template::exists_object: append(w, "the " + o.label() + (m ? " matches ." : " does not match ."));
        break;
      case Template::attribute_of_position: break;
    }
  }
  switch (q.kind) {
    case Template::count_color: append(w, "so the number of " + color + " objects is " + std::to_string(hits) + " ."); break;
    case Template::count_shape: append(w, "so the number of " + plural + " is " + std::to_string(hits) + " ."); break;
    case Template::exists_object:
      append(w, "so a " + color + " " + shape + (hits ? " is present ." : " is absent ."));
      break;
    case Template::attribute_of_position: {
      const auto& c = s.at(q.row, q.col);
      append(w, c ? "the object at " + target_pos + " is a " + c->label() + " ."
                  : "no object is at " + target_pos + " .");
      break;
    }
  }

  append(w, "</REASONING> <REFLECTION> let me look again .");
  switch (q.kind) {
    case Template::count_color:
    case Template::count_shape:
      for (const auto& [cell, o] : objs)
        if (matches(o)) append(w, "i see a " + o.label() + " at " + detail::where(cell, s.width) + " .");
      append(w, "so the count is " + std::to_string(hits) + " .");
      break;
    case Template::exists_object: {
      bool said = false;
      for (const auto& [cell, o] : objs) {
        if (matches(o) && !said) {
          append(w, "a " + o.label() + " is at " + detail::where(cell, s.width) + " .");
          said = true;
        }
      }
      if (!said) append(w, "no " + color + " " + shape + " is found .");
      break;
    }
    case Template::attribute_of_position: {
      const auto& c = s.at(q.row, q.col);
      append(w, target_pos + (c ? " holds a " + c->label() + " ." : " is empty ."));
      break;
    }
  }
  append(w, "</REFLECTION> <CONCLUSION> the answer is " + qa.gold_answer + " </CONCLUSION>");
  return GoldTrace{std::move(w)};
}

// ---------------------------------------------------------------------------
// Dataset records: one JSON object per line with fixed field order
//   version, seed, template, scene{width,height,cells}, question, gold_answer,
//   gold_objects, query, trace

inline constexpr int kDatasetVersion = 1;

inline nlohmann::ordered_json to_json(const QAItem& qa, const GoldTrace* trace) {
  nlohmann::ordered_json j;
  j["version"] = kDatasetVersion;
  j["seed"] = qa.seed;
  j["template"] = std::string(template_name(qa.query.kind));
  nlohmann::ordered_json scene;
  scene["width"] = qa.scene.width;
  scene["height"] = qa.scene.height;
  nlohmann::ordered_json cells = nlohmann::ordered_json::array();
  for (const auto& c : qa.scene.cells) cells.push_back(c ? nlohmann::ordered_json(c->label()) : nullptr);
  scene["cells"] = std::move(cells);
  j["scene"] = std::move(scene);
  j["question"] = qa.question;
  j["gold_answer"] = qa.gold_answer;
  j["gold_objects"] = std::vector<std::string>(qa.gold_objects.begin(), qa.gold_objects.end());
  nlohmann::ordered_json query;
  query["color"] = std::string(kColorNames[static_cast<int>(qa.query.color)]);
  query["shape"] = std::string(kShapeNames[static_cast<int>(qa.query.shape)]);
  query["row"] = qa.query.row;
  query["col"] = qa.query.col;
  j["query"] = std::move(query);
  j["trace"] = trace ? nlohmann::ordered_json(trace->text()) : nullptr;
  return j;
}

struct DatasetRecord {
  QAItem qa;
  std::optional<std::string> trace;
};

inline DatasetRecord record_from_json(const nlohmann::ordered_json& j) {
  if (j.at("version").get<int>() != kDatasetVersion) throw FormatError("unsupported dataset version");
  DatasetRecord r;
  QAItem& qa = r.qa;
  qa.seed = j.at("seed").get<std::uint64_t>();
  qa.scene.width = j.at("scene").at("width").get<int>();
  qa.scene.height = j.at("scene").at("height").get<int>();
  for (const auto& c : j.at("scene").at("cells")) {
    if (c.is_null()) {
      qa.scene.cells.emplace_back(std::nullopt);
    } else {
      auto o = object_from_label(c.get<std::string>());
      if (!o) throw FormatError("bad object label in dataset: " + c.dump());
      qa.scene.cells.emplace_back(*o);
    }
  }
  if (static_cast<int>(qa.scene.cells.size()) != qa.scene.cell_count()) throw FormatError("scene cell count mismatch");
  qa.query.kind = template_from_name(j.at("template").get<std::string>());
  const auto& q = j.at("query");
  qa.query.color = object_from_label(q.at("color").get<std::string>() + " square").value().color;
  qa.query.shape = object_from_label("red " + q.at("shape").get<std::string>()).value().shape;
  qa.query.row = q.at("row").get<int>();
  qa.query.col = q.at("col").get<int>();
  qa.question = j.at("question").get<std::vector<std::string>>();
  qa.gold_answer = j.at("gold_answer").get<std::string>();
  for (const auto& o : j.at("gold_objects")) qa.gold_objects.insert(o.get<std::string>());
  if (!j.at("trace").is_null()) r.trace = j.at("trace").get<std::string>();
  return r;
}

inline void write_dataset(const std::string& path, const std::vector<DatasetRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  for (const auto& r : records) {
    GoldTrace t;
    if (r.trace) t.words = lex_text(*r.trace);
    out << to_json(r.qa, r.trace ? &t : nullptr).dump() << '\n';
  }
  if (!out) throw Error("write failed for '" + path + "'");
}

inline std::vector<DatasetRecord> read_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open dataset '" + path + "'");
  std::vector<DatasetRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(record_from_json(nlohmann::ordered_json::parse(line)));
  }
  return out;
}

}  // namespace relook
