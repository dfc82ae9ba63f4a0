#pragma once

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "relook/brpo.hpp"
#include "relook/error.hpp"
#include "relook/metrics.hpp"
#include "relook/model.hpp"
#include "relook/reattention.hpp"
#include "relook/rewards.hpp"
#include "relook/scene.hpp"

namespace relook {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Run configuration

struct SynthConfig {
  int n = 1000;
  int n_eval = 0;
  std::vector<std::string> templates{"count_color", "count_shape", "exists_object", "attribute_of_position"};
  friend bool operator==(const SynthConfig&, const SynthConfig&) = default;
};

struct DecodeConfig {
  std::vector<std::string> modes{"off"};
  std::vector<double> m_list{50.0};
  double temperature = 1.0;
  bool greedy = false;
  int max_new = 160;
  int limit = 0;  // 0 decodes the whole eval set
  friend bool operator==(const DecodeConfig&, const DecodeConfig&) = default;
};

struct EvalConfig {
  std::string dump;       // decode dump to score
  std::string telemetry;  // optional BRPO telemetry for reflection dynamics
  bool gold = false;      // score the gold traces of the eval set instead of a dump
  int bucket_width = 8;
  int mi_window = 8;
  std::vector<std::string> mention_blocks{"CAPTION", "CONCLUSION"};
  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

struct RunConfig {
  std::uint64_t seed = 0;
  SceneConfig scene;
  SynthConfig synth;
  std::string train_data;
  std::string eval_data;
  std::string checkpoint;  // model to start from
  std::string resume;      // checkpoint of an interrupted run
  std::string out;         // explicit output directory
  int dim = 64, layers = 4, heads = 4, max_positions = 512, mlp_mult = 4;
  SftConfig sft;
  TrainConfig train;
  RewardConfig reward;
  ReattentionConfig reattention;
  DecodeConfig decode;
  EvalConfig eval;

  ModelConfig model_config() const {
    ModelConfig m;
    m.vocab_size = static_cast<int>(Vocabulary::instance().size());
    m.visual_vocab_size = visual_vocab_size(scene);
    m.dim = dim;
    m.layers = layers;
    m.heads = heads;
    m.max_positions = max_positions;
    m.mlp_mult = mlp_mult;
    return m;
  }

  void validate() const {
    scene.validate();
    model_config().validate();
    sft.validate();
    train.validate();
    reward.validate();
    reattention.validate();
    for (const auto& t : synth.templates) template_from_name(t);
    for (const auto& m : decode.modes) mode_from_name(m);
    for (double m : decode.m_list) ReattentionConfig{ReattentionMode::vtr, m}.validate();
    if (synth.n < 0 || synth.n_eval < 0 || decode.limit < 0 || decode.max_new < 1) {
      throw ConfigError("counts in run config must be nonnegative");
    }
    if (eval.bucket_width < 1 || eval.mi_window < 1) throw ConfigError("eval windows must be at least 1");
  }
  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

inline nlohmann::ordered_json to_ordered(const RunConfig& c) {
  using oj = nlohmann::ordered_json;
  oj j;
  j["seed"] = c.seed;
  j["scene"] = {{"width", c.scene.width},
                {"height", c.scene.height},
                {"min_objects", c.scene.min_objects},
                {"max_objects", c.scene.max_objects}};
  j["synth"] = {{"n", c.synth.n}, {"n_eval", c.synth.n_eval}, {"templates", c.synth.templates}};
  j["train_data"] = c.train_data;
  j["eval_data"] = c.eval_data;
  j["checkpoint"] = c.checkpoint;
  j["resume"] = c.resume;
  j["out"] = c.out;
  j["model"] = {{"dim", c.dim},
                {"layers", c.layers},
                {"heads", c.heads},
                {"max_positions", c.max_positions},
                {"mlp_mult", c.mlp_mult}};
  j["sft"] = oj::parse(nlohmann::json(c.sft).dump());
  j["train"] = oj::parse(nlohmann::json(c.train).dump());
  j["reward"] = {{"lambda", c.reward.lambda},
                 {"w_format", c.reward.w_format},
                 {"w_accuracy", c.reward.w_accuracy},
                 {"w_balance", c.reward.w_balance},
                 {"allow_zero_reflections", c.reward.allow_zero_reflections}};
  j["reattention"] = {{"mode", mode_name(c.reattention.mode)},
                      {"m", c.reattention.m},
                      {"max_injections", c.reattention.max_injections}};
  j["decode"] = {{"modes", c.decode.modes},
                 {"m_list", c.decode.m_list},
                 {"temperature", c.decode.temperature},
                 {"greedy", c.decode.greedy},
                 {"max_new", c.decode.max_new},
                 {"limit", c.decode.limit}};
  j["eval"] = {{"dump", c.eval.dump},
               {"telemetry", c.eval.telemetry},
               {"gold", c.eval.gold},
               {"bucket_width", c.eval.bucket_width},
               {"mi_window", c.eval.mi_window},
               {"mention_blocks", c.eval.mention_blocks}};
  return j;
}

/// Reads a run config; absent keys keep their defaults.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  c.seed = j.value("seed", c.seed);
  if (j.contains("scene")) {
    const auto& s = j["scene"];
    c.scene.width = s.value("width", c.scene.width);
    c.scene.height = s.value("height", c.scene.height);
    c.scene.min_objects = s.value("min_objects", c.scene.min_objects);
    c.scene.max_objects = s.value("max_objects", c.scene.max_objects);
  }
  if (j.contains("synth")) {
    const auto& s = j["synth"];
    c.synth.n = s.value("n", c.synth.n);
    c.synth.n_eval = s.value("n_eval", c.synth.n_eval);
    c.synth.templates = s.value("templates", c.synth.templates);
  }
  c.train_data = j.value("train_data", c.train_data);
  c.eval_data = j.value("eval_data", c.eval_data);
  c.checkpoint = j.value("checkpoint", c.checkpoint);
  c.resume = j.value("resume", c.resume);
  c.out = j.value("out", c.out);
  if (j.contains("model")) {
    const auto& m = j["model"];
    c.dim = m.value("dim", c.dim);
    c.layers = m.value("layers", c.layers);
    c.heads = m.value("heads", c.heads);
    c.max_positions = m.value("max_positions", c.max_positions);
    c.mlp_mult = m.value("mlp_mult", c.mlp_mult);
  }
  if (j.contains("sft")) from_json(j["sft"], c.sft);
  if (j.contains("train")) from_json(j["train"], c.train);
  if (j.contains("reward")) {
    const auto& r = j["reward"];
    c.reward.lambda = r.value("lambda", c.reward.lambda);
    c.reward.w_format = r.value("w_format", c.reward.w_format);
    c.reward.w_accuracy = r.value("w_accuracy", c.reward.w_accuracy);
    c.reward.w_balance = r.value("w_balance", c.reward.w_balance);
    c.reward.allow_zero_reflections = r.value("allow_zero_reflections", c.reward.allow_zero_reflections);
  }
  if (j.contains("reattention")) {
    const auto& r = j["reattention"];
    c.reattention.mode = mode_from_name(r.value("mode", std::string(mode_name(c.reattention.mode))));
    c.reattention.m = r.value("m", c.reattention.m);
    c.reattention.max_injections = r.value("max_injections", c.reattention.max_injections);
  }
  if (j.contains("decode")) {
    const auto& d = j["decode"];
    c.decode.modes = d.value("modes", c.decode.modes);
    c.decode.m_list = d.value("m_list", c.decode.m_list);
    c.decode.temperature = d.value("temperature", c.decode.temperature);
    c.decode.greedy = d.value("greedy", c.decode.greedy);
    c.decode.max_new = d.value("max_new", c.decode.max_new);
    c.decode.limit = d.value("limit", c.decode.limit);
  }
  if (j.contains("eval")) {
    const auto& e = j["eval"];
    c.eval.dump = e.value("dump", c.eval.dump);
    c.eval.telemetry = e.value("telemetry", c.eval.telemetry);
    c.eval.gold = e.value("gold", c.eval.gold);
    c.eval.bucket_width = e.value("bucket_width", c.eval.bucket_width);
    c.eval.mi_window = e.value("mi_window", c.eval.mi_window);
    c.eval.mention_blocks = e.value("mention_blocks", c.eval.mention_blocks);
  }
  return c;
}

inline void save_run_config(const fs::path& path, const RunConfig& c) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write config '" + path.string() + "'");
  os << to_ordered(c).dump(2) << '\n';
}

inline RunConfig load_run_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read config '" + path.string() + "'");
  return run_config_from_json(nlohmann::json::parse(is));
}

// ---------------------------------------------------------------------------
// Output directories and files

/// Output directory of a run: `cfg.out` when set, otherwise a timestamped
/// directory under $RELOOK_OUT (default ./runs).
inline fs::path make_run_dir(const RunConfig& cfg, std::string_view verb) {
  fs::path dir;
  if (!cfg.out.empty()) {
    dir = cfg.out;
  } else {
    const char* root = std::getenv("RELOOK_OUT");
    const fs::path base = root != nullptr && *root != '\0' ? fs::path(root) : fs::path("runs");
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    localtime_r(&now, &tm);
    std::ostringstream name;
    name << verb << '-' << std::put_time(&tm, "%Y%m%d-%H%M%S");
    dir = base / name.str();
    for (int k = 1; fs::exists(dir); ++k) dir = base / (name.str() + "-" + std::to_string(k));
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw Error("cannot create output directory '" + dir.string() + "'");
  return dir;
}

class JsonlWriter {
 public:
  explicit JsonlWriter(const fs::path& path, bool append = false)
      : os_(path, append ? std::ios::app : std::ios::trunc), path_(path) {
    if (!os_) throw Error("cannot open '" + path.string() + "' for writing");
  }
  void write(const nlohmann::ordered_json& j) {
    os_ << j.dump() << '\n';
    os_.flush();
    if (!os_) throw Error("write failed for '" + path_.string() + "'");
  }

 private:
  std::ofstream os_;
  fs::path path_;
};

inline std::vector<nlohmann::ordered_json> read_jsonl(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read '" + path.string() + "'");
  std::vector<nlohmann::ordered_json> out;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty()) out.push_back(nlohmann::ordered_json::parse(line));
  }
  return out;
}

/// Writes a two-column numeric series.
inline void write_series(const fs::path& path, const std::vector<double>& x, const std::vector<double>& y) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write '" + path.string() + "'");
  os << std::setprecision(10);
  for (std::size_t i = 0; i < x.size() && i < y.size(); ++i) os << x[i] << ' ' << y[i] << '\n';
}

inline std::vector<QAItem> load_items(const std::string& path) {
  if (path.empty()) throw ConfigError("dataset path not set");
  std::vector<QAItem> out;
  for (auto& r : read_dataset(path)) out.push_back(std::move(r.qa));
  return out;
}

// ---------------------------------------------------------------------------
// synth

struct SynthResult {
  std::size_t train = 0;
  std::size_t eval = 0;
  fs::path train_path, eval_path;
};

inline std::vector<DatasetRecord> synthesize(const RunConfig& cfg, int n, std::uint64_t stream) {
  std::vector<DatasetRecord> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const std::uint64_t seed = derive_seed({cfg.seed, stream, static_cast<std::uint64_t>(i)});
    const Scene scene = generate_scene(seed, cfg.scene);
    const std::string& t = cfg.synth.templates[static_cast<std::size_t>(i) % cfg.synth.templates.size()];
    QAItem qa = generate_qa(scene, t, seed);
    out.push_back({qa, gold_trace(qa).text()});
  }
  return out;
}

inline SynthResult cmd_synth(const RunConfig& cfg, const fs::path& dir) {
  cfg.validate();
  if (cfg.synth.templates.empty()) throw ConfigError("no templates selected");
  SynthResult r;
  r.train_path = dir / "train.jsonl";
  const auto train = synthesize(cfg, cfg.synth.n, 1);
  write_dataset(r.train_path.string(), train);
  r.train = train.size();
  if (cfg.synth.n_eval > 0) {
    r.eval_path = dir / "eval.jsonl";
    const auto eval = synthesize(cfg, cfg.synth.n_eval, 2);
    write_dataset(r.eval_path.string(), eval);
    r.eval = eval.size();
  }
  std::ofstream vocab(dir / "vocab.txt");
  const auto& v = Vocabulary::instance();
  for (std::size_t i = 0; i < v.size(); ++i) vocab << i << '\t' << v.word(static_cast<TokenId>(i)) << '\n';
  return r;
}

// ---------------------------------------------------------------------------
// sft

struct SftResult {
  fs::path checkpoint;
  double final_loss = 0.0;
  int steps = 0;
};

inline SftResult cmd_sft(const RunConfig& cfg, const fs::path& dir) {
  cfg.validate();
  const auto data = read_dataset(cfg.train_data);
  ModelParams<float> params;
  Adam opt;
  int start = 0;
  if (!cfg.resume.empty()) {
    nlohmann::json extra;
    params = load_checkpoint(cfg.resume, &extra);
    opt = Adam(params, cfg.sft.adam());
    opt.load(cfg.resume + ".adam", params);
    start = extra.at("step").get<int>();
  } else {
    if (cfg.checkpoint.empty()) {
      // fresh model: the frozen visual table gets a structured, decodable init
      params = ModelParams<float>::init(cfg.model_config(), cfg.seed);
      init_visual_encoder(params, cfg.scene, cfg.seed);
    } else {
      params = load_checkpoint(cfg.checkpoint);
    }
    opt = Adam(params, cfg.sft.adam());
  }
  params.set_visual_frozen(cfg.sft.freeze_visual);
  SftResult res;
  JsonlWriter log(dir / "sft_telemetry.jsonl");
  auto save = [&](int step, const fs::path& path) {
    save_checkpoint(path.string(), params, nlohmann::json{{"step", step}, {"stage", "sft"}});
    opt.save(path.string() + ".adam", params);
  };
  sft_train(
      params, opt, data, cfg.sft, start,
      [&](const nlohmann::ordered_json& j) {
        res.final_loss = j.at("loss").get<double>();
        log.write(j);
      },
      [&](int step) { save(step, dir / ("sft_step" + std::to_string(step) + ".ckpt")); });
  res.steps = cfg.sft.steps;
  res.checkpoint = dir / "model.ckpt";
  save(cfg.sft.steps, res.checkpoint);
  return res;
}

// ---------------------------------------------------------------------------
// brpo

struct BrpoResult {
  fs::path checkpoint;
  fs::path telemetry;
  int steps = 0;
};

inline void save_brpo_state(const BrpoState& s, const fs::path& path) {
  save_checkpoint(path.string(), s.policy, nlohmann::json{{"step", s.step}, {"stage", "brpo"}});
  save_checkpoint(path.string() + ".ref", s.ref);
  s.opt.save(path.string() + ".adam", s.policy);
}

inline BrpoState load_brpo_state(const fs::path& path, const TrainConfig& tc) {
  nlohmann::json extra;
  auto policy = load_checkpoint(path.string(), &extra);
  BrpoState s = BrpoState::start(policy, tc);
  s.ref = load_checkpoint(path.string() + ".ref");
  s.opt.load(path.string() + ".adam", s.policy);
  s.step = extra.at("step").get<int>();
  return s;
}

inline BrpoResult cmd_brpo(const RunConfig& cfg, const fs::path& dir) {
  cfg.validate();
  const auto train = load_items(cfg.train_data);
  const auto eval = cfg.eval_data.empty() ? std::vector<QAItem>{} : load_items(cfg.eval_data);
  BrpoState state;
  if (!cfg.resume.empty()) {
    state = load_brpo_state(cfg.resume, cfg.train);
  } else {
    if (cfg.checkpoint.empty()) throw ConfigError("brpo needs a cold-start checkpoint");
    state = BrpoState::start(load_checkpoint(cfg.checkpoint), cfg.train);
  }
  BrpoResult res;
  res.telemetry = dir / "brpo_telemetry.jsonl";
  JsonlWriter log(res.telemetry);
  BrpoHooks hooks;
  hooks.on_step = [&](const nlohmann::ordered_json& j) { log.write(j); };
  hooks.on_checkpoint = [&](const BrpoState& s) {
    save_brpo_state(s, dir / ("brpo_step" + std::to_string(s.step) + ".ckpt"));
  };
  hooks.on_failure = [&](const nlohmann::ordered_json& d) {
    std::ofstream os(dir / "failure.json");
    os << d.dump(2) << '\n';
  };
  brpo_train(state, train, eval, cfg.train, cfg.reward, cfg.reattention, hooks);
  res.steps = state.step;
  res.checkpoint = dir / "policy.ckpt";
  save_brpo_state(state, res.checkpoint);
  return res;
}

// ---------------------------------------------------------------------------
// decode

inline nlohmann::ordered_json script_to_json(const InjectionScript& s) {
  nlohmann::ordered_json out = nlohmann::ordered_json::array();
  for (const auto& e : s) {
    out.push_back({{"step", e.step}, {"mode", mode_name(e.mode)}, {"visual_ids", e.visual_ids}, {"forced", e.forced}});
  }
  return out;
}

inline InjectionScript script_from_json(const nlohmann::ordered_json& j) {
  InjectionScript s;
  for (const auto& e : j) {
    s.push_back({e.at("step").get<std::size_t>(), mode_from_name(e.at("mode").get<std::string>()),
                 e.at("visual_ids").get<std::vector<int>>(), e.at("forced").get<std::vector<TokenId>>()});
  }
  return s;
}

/// One decoded response and its bookkeeping.
struct DecodeRecord {
  std::size_t item = 0;
  std::vector<TokenId> tokens;
  InjectionScript script;
  std::vector<double> visual_attention;  // attention_to_visual per step
  std::size_t injected = 0;
  double wall_ms = 0.0;
};

inline DecodeRecord decode_one(const ModelParams<float>& params, const QAItem& qa, std::size_t item,
                               const ReattentionConfig& ra, const DecodeConfig& dc, std::uint64_t seed,
                               AttnRecord* record = nullptr) {
  SampleParams sp;
  sp.temperature = dc.temperature;
  sp.greedy = dc.greedy;
  sp.max_new = dc.max_new;
  sp.seed = derive_seed({seed, 0xdec0ULL, item});
  sp.stop_tokens = {Vocabulary::instance().eos()};
  ReflectionHook hook(ra);
  const auto t0 = std::chrono::steady_clock::now();
  SampleResult s = sample(params, prompt_for(qa), sp, std::ref(hook));
  const auto t1 = std::chrono::steady_clock::now();
  DecodeRecord d;
  d.item = item;
  d.tokens = std::move(s.tokens);
  d.script = hook.script();
  d.visual_attention = visual_attention_series(s.record);
  d.injected = s.state.injected_length();
  d.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  if (record != nullptr) *record = std::move(s.record);
  return d;
}

inline nlohmann::ordered_json decode_record_json(const DecodeRecord& d, ReattentionMode mode, double m) {
  nlohmann::ordered_json j;
  j["item"] = d.item;
  j["mode"] = mode_name(mode);
  j["m"] = m;
  j["tokens"] = d.tokens;
  j["text"] = Vocabulary::instance().decode(d.tokens);
  j["script"] = script_to_json(d.script);
  j["length"] = d.tokens.size();
  j["injected"] = d.injected;
  j["visual_attention"] = d.visual_attention;
  return j;
}

struct DecodeOutput {
  ReattentionMode mode;
  double m;
  fs::path dump;
  std::size_t responses = 0;
  double mean_length = 0.0;
  double mean_wall_ms = 0.0;
};

inline std::string dump_name(ReattentionMode mode, double m) {
  std::ostringstream os;
  os << "decode_" << mode_name(mode);
  if (mode == ReattentionMode::vtr) os << "_m" << m;
  return os.str();
}

/// Decodes the eval set once per mode (and per m for vtr). Responses go to
/// <name>.jsonl; wall times to <name>.timing.jsonl so dumps stay reproducible.
inline std::vector<DecodeOutput> cmd_decode(const RunConfig& cfg, const fs::path& dir) {
  cfg.validate();
  if (cfg.checkpoint.empty()) throw ConfigError("decode needs a checkpoint");
  const auto params = load_checkpoint(cfg.checkpoint);
  auto items = load_items(cfg.eval_data);
  if (cfg.decode.limit > 0 && items.size() > static_cast<std::size_t>(cfg.decode.limit)) items.resize(cfg.decode.limit);
  std::vector<DecodeOutput> out;
  for (const auto& mname : cfg.decode.modes) {
    const ReattentionMode mode = mode_from_name(mname);
    const std::vector<double> ms = mode == ReattentionMode::vtr ? cfg.decode.m_list : std::vector<double>{cfg.reattention.m};
    for (double m : ms) {
      ReattentionConfig ra = cfg.reattention;
      ra.mode = mode;
      ra.m = m;
      DecodeOutput o{mode, m, dir / (dump_name(mode, m) + ".jsonl")};
      JsonlWriter dump(o.dump);
      JsonlWriter timing(dir / (dump_name(mode, m) + ".timing.jsonl"));
      for (std::size_t i = 0; i < items.size(); ++i) {
        const DecodeRecord d = decode_one(params, items[i], i, ra, cfg.decode, cfg.seed);
        dump.write(decode_record_json(d, mode, m));
        timing.write({{"item", i}, {"wall_ms", d.wall_ms}, {"length", d.tokens.size()}});
        o.mean_length += static_cast<double>(d.tokens.size());
        o.mean_wall_ms += d.wall_ms;
      }
      o.responses = items.size();
      if (!items.empty()) {
        o.mean_length /= static_cast<double>(items.size());
        o.mean_wall_ms /= static_cast<double>(items.size());
      }
      out.push_back(o);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// eval

inline BlockMask mask_from_names(const std::vector<std::string>& names) {
  BlockMask m;
  for (const auto& n : names) {
    const auto tag = parse_tag("<" + n + ">");
    if (!tag) throw ConfigError("unknown block '" + n + "' in mention mask");
    m.insert(tag->kind);
  }
  return m;
}

struct EvalReport {
  std::map<std::string, double> metrics;  // summary table
  AttentionProfile profile;
  std::optional<MiProxy> mi;
};

/// Scores responses against their eval items.
inline EvalReport evaluate_responses(const std::vector<QAItem>& items, const std::vector<std::size_t>& item_of,
                                     const std::vector<std::vector<TokenId>>& responses,
                                     const std::vector<std::vector<double>>& attention, const EvalConfig& ec,
                                     const RewardConfig& rc) {
  if (responses.empty()) throw EmptyInputError("eval: no responses to score");
  const BlockMask mask = mask_from_names(ec.mention_blocks);
  EvalReport rep;
  std::vector<ObjectMentionReport> mentions;
  double acc = 0, fmt = 0, bal = 0, len = 0, n_r = 0, l_r = 0;
  for (std::size_t k = 0; k < responses.size(); ++k) {
    const QAItem& qa = items.at(item_of[k]);
    const auto resp = parse(strip_eos(responses[k]));
    const auto rw = composite_reward(resp, qa.gold_answer, rc);
    const auto st = reflection_stats(resp);
    acc += rw.accuracy;
    fmt += rw.format;
    bal += rw.balance;
    len += static_cast<double>(responses[k].size());
    n_r += static_cast<double>(st.count);
    l_r += static_cast<double>(st.total_length);
    mentions.push_back(mention_report(resp, qa.gold_objects, mask));
  }
  const double n = static_cast<double>(responses.size());
  auto& m = rep.metrics;
  m["responses"] = n;
  m["accuracy"] = acc / n;
  m["format"] = fmt / n;
  m["balance"] = bal / n;
  m["length_mean"] = len / n;
  m["n_r_mean"] = n_r / n;
  m["reflection_len_mean"] = n_r > 0 ? l_r / n_r : 0.0;
  try {
    m["chair_i"] = chair_i(mentions);
  } catch (const UndefinedMetricError&) {
  }
  m["chair_s"] = chair_s(mentions);
  try {
    m["recall"] = recall(mentions);
  } catch (const UndefinedMetricError&) {
  }

  rep.profile.bucket_width = static_cast<std::size_t>(ec.bucket_width);
  std::vector<double> sum;
  for (const auto& series : attention) {
    for (std::size_t t = 0; t < series.size(); ++t) {
      const std::size_t b = t / rep.profile.bucket_width;
      if (b >= sum.size()) {
        sum.resize(b + 1, 0.0);
        rep.profile.count.resize(b + 1, 0);
      }
      sum[b] += series[t];
      ++rep.profile.count[b];
    }
  }
  rep.profile.mean.resize(sum.size());
  for (std::size_t b = 0; b < sum.size(); ++b) rep.profile.mean[b] = sum[b] / rep.profile.count[b];
  if (!attention.empty()) {
    std::vector<double> xs, ys;
    for (const auto& series : attention) {
      for (std::size_t t = 0; t < series.size(); ++t) {
        xs.push_back(static_cast<double>(t));
        ys.push_back(series[t]);
      }
    }
    if (xs.size() >= 2) m["attention_slope"] = ls_slope(xs, ys);
  }
  return rep;
}

inline EvalReport cmd_eval(const RunConfig& cfg, const fs::path& dir) {
  cfg.validate();
  const auto items = load_items(cfg.eval_data);
  std::vector<std::size_t> item_of;
  std::vector<std::vector<TokenId>> responses;
  std::vector<std::vector<double>> attention;
  std::vector<ScoredResponse> scored;
  std::vector<double> wall;
  if (cfg.eval.gold) {
    for (std::size_t i = 0; i < items.size(); ++i) {
      item_of.push_back(i);
      responses.push_back(Vocabulary::instance().encode_words(gold_trace(items[i]).words));
    }
  } else {
    if (cfg.eval.dump.empty()) throw ConfigError("eval needs a decode dump or --gold");
    for (const auto& j : read_jsonl(cfg.eval.dump)) {
      const std::size_t i = j.at("item").get<std::size_t>();
      if (i >= items.size()) throw FormatError("dump refers to item " + std::to_string(i) + " outside the eval set");
      item_of.push_back(i);
      responses.push_back(j.at("tokens").get<std::vector<TokenId>>());
      attention.push_back(j.at("visual_attention").get<std::vector<double>>());
      scored.push_back({prompt_for(items[i]), responses.back(), script_from_json(j.at("script"))});
    }
    fs::path timing = cfg.eval.dump;
    timing.replace_extension(".timing.jsonl");
    if (fs::exists(timing)) {
      for (const auto& j : read_jsonl(timing)) wall.push_back(j.at("wall_ms").get<double>());
    }
  }
  if (responses.empty()) throw EmptyInputError("eval: the dump holds no responses");
  EvalReport rep = evaluate_responses(items, item_of, responses, attention, cfg.eval, cfg.reward);
  if (!wall.empty()) {
    double s = 0;
    for (double w : wall) s += w;
    rep.metrics["wall_ms_mean"] = s / static_cast<double>(wall.size());
  }
  if (!cfg.checkpoint.empty() && !scored.empty()) {
    const auto params = load_checkpoint(cfg.checkpoint);
    rep.mi = mi_proxy(params, scored, static_cast<std::size_t>(cfg.eval.mi_window));
    double s = 0, c = 0;
    for (const auto& d : rep.mi->deltas) {
      for (double v : d) {
        s += v;
        c += 1;
      }
    }
    if (c > 0) rep.metrics["mi_proxy_mean"] = s / c;
  }

  // Summary table and plot data.
  nlohmann::ordered_json summary;
  std::ofstream tsv(dir / "summary.tsv");
  tsv << std::setprecision(10);
  for (const auto& [k, v] : rep.metrics) {
    summary[k] = v;
    tsv << k << '\t' << v << '\n';
  }
  std::ofstream(dir / "summary.json") << summary.dump(2) << '\n';
  {
    std::vector<double> x;
    for (std::size_t b = 0; b < rep.profile.mean.size(); ++b) x.push_back(static_cast<double>(b * rep.profile.bucket_width));
    write_series(dir / "attention_profile.dat", x, rep.profile.mean);
  }
  if (rep.mi) {
    std::vector<double> x;
    for (std::size_t b = 0; b < rep.mi->window_mean.size(); ++b) x.push_back(static_cast<double>(b * rep.mi->window));
    write_series(dir / "mi_proxy.dat", x, rep.mi->window_mean);
  }
  if (!cfg.eval.telemetry.empty()) {
    std::vector<double> step, len, count, acc, eval_step, eval_acc;
    for (const auto& j : read_jsonl(cfg.eval.telemetry)) {
      if (j.contains("eval_acc")) {
        eval_step.push_back(j.at("step").get<double>());
        eval_acc.push_back(j.at("eval_acc").get<double>());
      }
      if (!j.contains("reflection_len_mean")) continue;
      step.push_back(j.at("step").get<double>());
      len.push_back(j.at("reflection_len_mean").get<double>());
      count.push_back(j.at("n_r_mean").get<double>());
      acc.push_back(j.at("acc_reward").get<double>());
    }
    write_series(dir / "reflection_length.dat", step, len);
    write_series(dir / "reflection_count.dat", step, count);
    write_series(dir / "train_accuracy.dat", step, acc);
    write_series(dir / "eval_accuracy.dat", eval_step, eval_acc);
  }
  return rep;
}

}  // namespace relook
