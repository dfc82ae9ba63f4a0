#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "relook/autograd.hpp"
#include "relook/error.hpp"
#include "relook/model.hpp"
#include "relook/reattention.hpp"
#include "relook/rewards.hpp"
#include "relook/scene.hpp"
#include "relook/sequence.hpp"
#include "relook/trace_grammar.hpp"

namespace relook {

// ---------------------------------------------------------------------------
// Seeds

inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x6a09e667f3bcc908ULL;
  for (auto p : parts) h = mix64(h ^ mix64(p));
  return h;
}

// ---------------------------------------------------------------------------
// Prompts and responses

inline SequenceState prompt_for(const QAItem& qa) {
  return SequenceState::from_prompt(visual_tokens(qa.scene), Vocabulary::instance().encode_words(qa.question));
}

/// Response tokens without a trailing <eos>.
inline std::vector<TokenId> strip_eos(std::vector<TokenId> tokens) {
  const TokenId eos = Vocabulary::instance().eos();
  while (!tokens.empty() && tokens.back() == eos) tokens.pop_back();
  return tokens;
}

// ---------------------------------------------------------------------------
// Configuration

enum class RatioMode { token_level, sequence_level };

inline std::string_view ratio_mode_name(RatioMode m) {
  return m == RatioMode::token_level ? "token_level" : "sequence_level";
}

inline RatioMode ratio_mode_from_name(std::string_view s) {
  if (s == "token_level") return RatioMode::token_level;
  if (s == "sequence_level") return RatioMode::sequence_level;
  throw ConfigError("unknown ratio mode '" + std::string(s) + "'");
}

struct TrainConfig {
  int G = 8;
  double temperature = 1.0;
  double clip_eps = 0.2;
  double beta = 0.1;  // KL weight
  double lr = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-8;
  double grad_clip = 0.0;  // global norm; 0 disables
  int steps = 100;
  std::uint64_t seed = 0;
  RatioMode ratio_mode = RatioMode::token_level;
  int questions_per_step = 1;
  int updates_per_batch = 1;  // inner updates before pi_old is refreshed
  int max_new = 160;
  int eval_every = 0;  // 0 disables periodic evaluation
  int n_eval = 0;
  int checkpoint_every = 0;

  void validate() const {
    if (G < 2) throw ConfigError("G must be at least 2");
    if (!(clip_eps > 0 && clip_eps < 1)) throw ConfigError("clip epsilon must lie in (0, 1)");
    if (beta < 0) throw ConfigError("KL weight must be nonnegative");
    if (!(temperature > 0)) throw ConfigError("temperature must be positive");
    if (!(lr > 0)) throw ConfigError("learning rate must be positive");
    if (steps < 0 || questions_per_step < 1 || updates_per_batch < 1 || max_new < 1) {
      throw ConfigError("invalid step counts in training config");
    }
    if (eval_every < 0 || n_eval < 0 || checkpoint_every < 0 || grad_clip < 0) {
      throw ConfigError("invalid evaluation or clipping settings");
    }
  }
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"G", c.G},
                     {"temperature", c.temperature},
                     {"clip_eps", c.clip_eps},
                     {"beta", c.beta},
                     {"lr", c.lr},
                     {"adam_beta1", c.adam_beta1},
                     {"adam_beta2", c.adam_beta2},
                     {"adam_eps", c.adam_eps},
                     {"grad_clip", c.grad_clip},
                     {"steps", c.steps},
                     {"seed", c.seed},
                     {"ratio_mode", ratio_mode_name(c.ratio_mode)},
                     {"questions_per_step", c.questions_per_step},
                     {"updates_per_batch", c.updates_per_batch},
                     {"max_new", c.max_new},
                     {"eval_every", c.eval_every},
                     {"n_eval", c.n_eval},
                     {"checkpoint_every", c.checkpoint_every}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.G = j.value("G", c.G);
  c.temperature = j.value("temperature", c.temperature);
  c.clip_eps = j.value("clip_eps", c.clip_eps);
  c.beta = j.value("beta", c.beta);
  c.lr = j.value("lr", c.lr);
  c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.steps = j.value("steps", c.steps);
  c.seed = j.value("seed", c.seed);
  c.ratio_mode = ratio_mode_from_name(j.value("ratio_mode", std::string(ratio_mode_name(c.ratio_mode))));
  c.questions_per_step = j.value("questions_per_step", c.questions_per_step);
  c.updates_per_batch = j.value("updates_per_batch", c.updates_per_batch);
  c.max_new = j.value("max_new", c.max_new);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.n_eval = j.value("n_eval", c.n_eval);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
}

// ---------------------------------------------------------------------------
// Advantages, KL and the clipped surrogate

inline constexpr double kStdEpsilon = 1e-8;

/// A_i = (r_i - mean) / std with the population std; all zeros when the
/// group carries no signal.
inline std::vector<double> group_advantages(const std::vector<double>& rewards) {
  if (rewards.size() < 2) throw ConfigError("group_advantages needs at least two rewards");
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> out(rewards.size(), 0.0);
  if (sd < kStdEpsilon) return out;
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / sd;
  return out;
}

/// rho - log(rho) - 1 with rho = exp(logp_ref - logp_theta).
inline double kl_k3(double logp_theta, double logp_ref) {
  const double d = logp_ref - logp_theta;
  return std::expm1(d) - d;
}

inline std::vector<double> kl_term(const std::vector<double>& logp_theta, const std::vector<double>& logp_ref) {
  if (logp_theta.size() != logp_ref.size()) throw DimensionError("kl_term: arrays differ in length");
  std::vector<double> out(logp_theta.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = kl_k3(logp_theta[i], logp_ref[i]);
  return out;
}

/// min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A).
inline double clipped_surrogate(double ratio, double adv, double eps) {
  const double clipped = std::clamp(ratio, 1.0 - eps, 1.0 + eps);
  return std::min(ratio * adv, clipped * adv);
}

/// Derivative of clipped_surrogate with respect to log(ratio).
inline double clipped_surrogate_grad(double ratio, double adv, double eps) {
  const bool inside = ratio >= 1.0 - eps && ratio <= 1.0 + eps;
  if (inside) return ratio * adv;
  const double clipped = std::clamp(ratio, 1.0 - eps, 1.0 + eps);
  return ratio * adv < clipped * adv ? ratio * adv : 0.0;
}

/// Log-probabilities and advantage of one rollout. `is_action` marks sampled
/// tokens; forced tokens are excluded from ratios and KL. Empty means all.
struct PolicyTerms {
  std::vector<double> logp;      // current policy
  std::vector<double> logp_old;  // policy that sampled the rollout
  std::vector<double> logp_ref;  // frozen reference; may be empty when beta == 0
  std::vector<bool> is_action;
  double advantage = 0.0;
};

struct ObjectiveValue {
  double objective = 0.0;  // to be maximized
  double surrogate = 0.0;
  double kl = 0.0;           // group mean of the per-rollout KL
  double clip_fraction = 0.0;
  // d objective / d logp for every token of every rollout.
  std::vector<std::vector<double>> coeff;
};

/// Clipped group objective: mean over rollouts of surrogate minus beta * KL,
/// with analytic derivatives with respect to the current log-probs.
inline ObjectiveValue brpo_loss(std::span<const PolicyTerms> group, const TrainConfig& cfg) {
  if (group.empty()) throw EmptyInputError("brpo_loss: empty group");
  const double G = static_cast<double>(group.size());
  const double eps = cfg.clip_eps;
  ObjectiveValue out;
  out.coeff.resize(group.size());
  std::size_t clipped = 0, counted = 0;
  for (std::size_t i = 0; i < group.size(); ++i) {
    const PolicyTerms& p = group[i];
    const std::size_t n = p.logp.size();
    if (p.logp_old.size() != n) throw DimensionError("brpo_loss: old log-probs misaligned");
    const bool use_ref = cfg.beta > 0;
    if (use_ref && p.logp_ref.size() != n) throw DimensionError("brpo_loss: reference log-probs misaligned");
    if (!p.is_action.empty() && p.is_action.size() != n) throw DimensionError("brpo_loss: action mask misaligned");
    auto act = [&](std::size_t t) { return p.is_action.empty() || p.is_action[t]; };
    std::size_t n_act = 0;
    for (std::size_t t = 0; t < n; ++t) n_act += act(t);
    auto& c = out.coeff[i];
    c.assign(n, 0.0);
    if (n_act == 0) continue;

    double surr = 0.0, kl = 0.0;
    if (cfg.ratio_mode == RatioMode::token_level) {
      const double inv = 1.0 / static_cast<double>(n_act);
      for (std::size_t t = 0; t < n; ++t) {
        if (!act(t)) continue;
        const double ratio = std::exp(p.logp[t] - p.logp_old[t]);
        surr += clipped_surrogate(ratio, p.advantage, eps) * inv;
        double g = clipped_surrogate_grad(ratio, p.advantage, eps);
        clipped += g == 0.0 && p.advantage != 0.0;
        ++counted;
        if (use_ref) {
          kl += kl_k3(p.logp[t], p.logp_ref[t]) * inv;
          g -= cfg.beta * -std::expm1(p.logp_ref[t] - p.logp[t]);
        }
        c[t] = g * inv / G;
      }
    } else {
      double log_ratio = 0.0, log_ref = 0.0;
      for (std::size_t t = 0; t < n; ++t) {
        if (!act(t)) continue;
        log_ratio += p.logp[t] - p.logp_old[t];
        if (use_ref) log_ref += p.logp_ref[t] - p.logp[t];
      }
      const double ratio = std::exp(log_ratio);
      surr = clipped_surrogate(ratio, p.advantage, eps);
      double g = clipped_surrogate_grad(ratio, p.advantage, eps);
      clipped += g == 0.0 && p.advantage != 0.0;
      ++counted;
      if (use_ref) {
        kl = std::expm1(log_ref) - log_ref;
        g -= cfg.beta * -std::expm1(log_ref);
      }
      for (std::size_t t = 0; t < n; ++t)
        if (act(t)) c[t] = g / G;
    }
    out.surrogate += surr / G;
    out.kl += kl / G;
  }
  out.objective = out.surrogate - cfg.beta * out.kl;
  out.clip_fraction = counted ? static_cast<double>(clipped) / static_cast<double>(counted) : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
  double grad_clip = 0.0;     // global norm; 0 disables
};

inline double grad_norm(ModelParams<float>& p) {
  double s = 0.0;
  for (auto& [name, t] : p.named()) {
    if (!t->requires_grad() || !t->has_grad()) continue;
    for (float g : t->grad()) s += static_cast<double>(g) * g;
  }
  return std::sqrt(s);
}

/// Adam with bias correction over the trainable tensors of a model.
class Adam {
 public:
  Adam() = default;
  Adam(const ModelParams<float>& p, AdamConfig cfg) : cfg_(cfg) {
    for (const auto& [name, t] : p.named()) {
      m_.emplace_back(t->shape());
      v_.emplace_back(t->shape());
    }
  }

  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  std::int64_t steps() const { return t_; }

  /// Applies one update from the accumulated gradients and returns the
  /// gradient norm before clipping.
  double step(ModelParams<float>& p) {
    auto named = p.named();
    if (named.size() != m_.size()) throw DimensionError("optimizer state does not match the model");
    const double norm = grad_norm(p);
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
    const double scale = cfg_.grad_clip > 0 && norm > cfg_.grad_clip ? cfg_.grad_clip / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < named.size(); ++k) {
      Tensor<float>& w = *named[k].second;
      if (!w.requires_grad() || !w.has_grad()) continue;
      auto g = w.grad();
      auto m = m_[k].data();
      auto v = v_[k].data();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(g[i]) * scale;
        m[i] = static_cast<float>(cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi);
        v[i] = static_cast<float>(cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi);
        const double mh = m[i] / bc1, vh = v[i] / bc2;
        double wi = w[i];
        if (cfg_.weight_decay > 0) wi -= cfg_.lr * cfg_.weight_decay * wi;
        wi -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
        w[i] = static_cast<float>(wi);
      }
    }
    return norm;
  }

  void save(const std::string& path, const ModelParams<float>& p) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open '" + path + "' for writing");
    std::vector<std::pair<std::string, const Tensor<float>*>> ts;
    auto named = p.named();
    for (std::size_t k = 0; k < named.size(); ++k) {
      ts.emplace_back("m." + named[k].first, &m_[k]);
      ts.emplace_back("v." + named[k].first, &v_[k]);
    }
    write_tensors(os, nlohmann::json{{"format", "relook-adam"}, {"t", t_}}, ts);
    if (!os) throw Error("write failed for '" + path + "'");
  }

  void load(const std::string& path, const ModelParams<float>& p) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open optimizer state '" + path + "'");
    const auto header = read_header(is);
    if (header.value("format", std::string()) != "relook-adam") throw FormatError("not an optimizer state file");
    std::vector<std::pair<std::string, Tensor<float>*>> ts;
    auto named = p.named();
    if (named.size() != m_.size()) throw DimensionError("optimizer state does not match the model");
    for (std::size_t k = 0; k < named.size(); ++k) {
      ts.emplace_back("m." + named[k].first, &m_[k]);
      ts.emplace_back("v." + named[k].first, &v_[k]);
    }
    read_tensors(is, ts);
    t_ = header.at("t").get<std::int64_t>();
  }

 private:
  AdamConfig cfg_;
  std::vector<Tensor<float>> m_, v_;
  std::int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Cold-start supervised fine-tuning

/// Fills the visual table with compositional features: each object id is the
/// sum of random shape, color, row and column vectors, and the blank id has a
/// vector of its own. Stands in for a pretrained visual encoder, which the
/// cold start keeps frozen.
inline void init_visual_encoder(ModelParams<float>& p, const SceneConfig& scene, std::uint64_t seed) {
  if (p.vis_emb.rows() != static_cast<std::size_t>(visual_vocab_size(scene))) {
    throw DimensionError("visual table does not match the scene configuration");
  }
  const std::size_t d = p.vis_emb.cols();
  std::mt19937_64 rng(derive_seed({seed, 0x7157ULL}));
  std::normal_distribution<double> nd(0.0, 0.05);
  auto draw = [&](std::size_t n) {
    std::vector<std::vector<double>> v(n, std::vector<double>(d));
    for (auto& row : v)
      for (auto& x : row) x = nd(rng);
    return v;
  };
  const auto shape = draw(3), color = draw(4), row = draw(scene.height), col = draw(scene.width), blank = draw(1);
  for (int id = 0; id < visual_vocab_size(scene); ++id) {
    const auto f = decode_visual(id, scene);
    for (std::size_t j = 0; j < d; ++j) {
      double v = 2.0 * blank[0][j];
      if (f) {
        v = shape[static_cast<int>(f->shape)][j] + color[static_cast<int>(f->color)][j] +
            row[f->cell / scene.width][j] + col[f->cell % scene.width][j];
      }
      p.vis_emb(id, j) = static_cast<float>(v);
    }
  }
}

/// Visual injections applied while teacher forcing a gold trace, so that the
/// cold-start model sees the same layout it will meet at decode time.
template <typename T>
InjectionScript teacher_forced_script(const ModelParams<T>& params, const SequenceState& prompt,
                                      const std::vector<TokenId>& response, const ReattentionConfig& cfg) {
  if (cfg.mode == ReattentionMode::off || cfg.mode == ReattentionMode::text_only) return {};
  if (cfg.mode == ReattentionMode::vision_only) {
    throw ConfigError("vision_only reflections cannot be teacher forced on gold traces");
  }
  ReflectionHook hook(cfg);
  Decoder<T> dec(params);
  dec.reset(prompt);
  dec.feed();
  AttnRecord rec;
  rec.layers = params.config.layers;
  rec.heads = params.config.heads;
  rec.visual_positions = prompt.indices(Origin::visual);
  for (std::size_t s = 0; s < response.size(); ++s) {
    rec.steps.push_back(dec.last_attention());
    dec.state().append(Origin::generated, response[s]);
    HookContext ctx{dec.state(), rec, response[s], s};
    hook(ctx);
    dec.feed();
  }
  return hook.script();
}

struct SftExample {
  SequenceState prompt;
  std::vector<TokenId> response;  // gold trace followed by <eos>
  std::string gold_answer;
};

/// Training example for a record, or nullopt when its trace is missing or
/// does not parse cleanly.
inline std::optional<SftExample> sft_example(const DatasetRecord& rec) {
  if (!rec.trace) return std::nullopt;
  const auto& vocab = Vocabulary::instance();
  std::vector<TokenId> ids;
  for (const auto& w : lex_text(*rec.trace)) {
    const auto id = vocab.find(w);
    if (!id) return std::nullopt;
    ids.push_back(*id);
  }
  if (!parse(ids, vocab).valid()) return std::nullopt;
  ids.push_back(vocab.eos());
  return SftExample{prompt_for(rec.qa), std::move(ids), rec.qa.gold_answer};
}

struct SftConfig {
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  int steps = 500;
  int batch_size = 8;
  std::uint64_t seed = 0;
  bool freeze_visual = true;
  ReattentionConfig injection;  // off, text_only, vtc or vtr
  int log_every = 10;
  int checkpoint_every = 0;

  void validate() const {
    if (!(lr > 0) || steps < 0 || batch_size < 1 || log_every < 1 || checkpoint_every < 0) {
      throw ConfigError("invalid SFT configuration");
    }
    injection.validate();
    if (injection.mode == ReattentionMode::vision_only) {
      throw ConfigError("vision_only reflections cannot be teacher forced on gold traces");
    }
  }
  AdamConfig adam() const { return {lr, beta1, beta2, eps, weight_decay, grad_clip}; }
  friend bool operator==(const SftConfig&, const SftConfig&) = default;
};

inline void to_json(nlohmann::json& j, const SftConfig& c) {
  j = nlohmann::json{{"lr", c.lr},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"eps", c.eps},
                     {"weight_decay", c.weight_decay},
                     {"grad_clip", c.grad_clip},
                     {"steps", c.steps},
                     {"batch_size", c.batch_size},
                     {"seed", c.seed},
                     {"freeze_visual", c.freeze_visual},
                     {"injection_mode", mode_name(c.injection.mode)},
                     {"injection_m", c.injection.m},
                     {"log_every", c.log_every},
                     {"checkpoint_every", c.checkpoint_every}};
}

inline void from_json(const nlohmann::json& j, SftConfig& c) {
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.freeze_visual = j.value("freeze_visual", c.freeze_visual);
  c.injection.mode = mode_from_name(j.value("injection_mode", std::string(mode_name(c.injection.mode))));
  c.injection.m = j.value("injection_m", c.injection.m);
  c.log_every = j.value("log_every", c.log_every);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
}

struct SftStepResult {
  double loss = 0.0;  // mean token cross-entropy over the batch
  std::size_t tokens = 0;
  std::size_t used = 0;
  std::size_t skipped = 0;
  double grad_norm = 0.0;
};

/// Accumulates the gradient of the batch's mean response-token cross-entropy.
/// Prompt and injected positions are never scored. Returns the loss.
template <typename T>
double sft_gradient(ModelParams<T>& params, std::span<const SftExample> batch, const ReattentionConfig& injection,
                    std::size_t* token_count = nullptr) {
  std::size_t total = 0;
  for (const auto& ex : batch) total += ex.response.size();
  if (total == 0) throw EmptyInputError("sft: batch has no response tokens");
  double loss = 0.0;
  for (const auto& ex : batch) {
    const InjectionScript script = teacher_forced_script(params, ex.prompt, ex.response, injection);
    const ReplayLayout layout = replay_layout(ex.prompt, ex.response, script);
    Tape<T> tape;
    const auto b = bind(tape, params);
    Var lp = logprob_on_tape(tape, b, params.config, layout, ex.response);
    Var l = weighted_sum(tape, lp, std::vector<T>(ex.response.size(), static_cast<T>(-1.0 / total)));
    loss += static_cast<double>(tape.value(l)[0]);
    tape.backward(l);
  }
  if (token_count != nullptr) *token_count = total;
  return loss;
}

/// One optimizer step on a batch of dataset records; malformed traces are
/// skipped and counted.
inline SftStepResult sft_step(ModelParams<float>& params, Adam& opt, const std::vector<DatasetRecord>& batch,
                              const SftConfig& cfg) {
  std::vector<SftExample> examples;
  SftStepResult r;
  for (const auto& rec : batch) {
    if (auto ex = sft_example(rec)) {
      examples.push_back(std::move(*ex));
    } else {
      ++r.skipped;
    }
  }
  r.used = examples.size();
  if (examples.empty()) throw EmptyInputError("sft: no usable traces in batch");
  params.set_visual_frozen(cfg.freeze_visual);
  params.zero_grad();
  r.loss = sft_gradient(params, std::span<const SftExample>(examples), cfg.injection, &r.tokens);
  if (!std::isfinite(r.loss)) throw NumericError("sft: non-finite loss " + std::to_string(r.loss));
  r.grad_norm = opt.step(params);
  if (!params.all_finite()) throw NumericError("sft: parameters became non-finite");
  return r;
}

/// Record indices of SFT step `step`: consecutive slices of a per-epoch
/// seeded permutation.
inline std::vector<std::size_t> sft_batch_indices(std::size_t n, int batch_size, std::uint64_t seed, int step) {
  if (n == 0) throw EmptyInputError("sft: empty dataset");
  std::vector<std::size_t> out;
  std::vector<std::size_t> perm;
  std::size_t epoch = std::numeric_limits<std::size_t>::max();
  for (int j = 0; j < batch_size; ++j) {
    const std::size_t flat = static_cast<std::size_t>(step) * batch_size + j;
    const std::size_t e = flat / n;
    if (e != epoch) {
      epoch = e;
      perm.resize(n);
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      std::mt19937_64 rng(derive_seed({seed, 0x5f7ULL, e}));
      std::shuffle(perm.begin(), perm.end(), rng);
    }
    out.push_back(perm[flat % n]);
  }
  return out;
}

using TelemetrySink = std::function<void(const nlohmann::ordered_json&)>;

/// Runs SFT steps [start_step, cfg.steps). The sink receives one record per
/// logged step; `on_checkpoint(step)` fires every checkpoint_every steps.
inline void sft_train(ModelParams<float>& params, Adam& opt, const std::vector<DatasetRecord>& data,
                      const SftConfig& cfg, int start_step = 0, const TelemetrySink& sink = {},
                      const std::function<void(int)>& on_checkpoint = {}) {
  cfg.validate();
  for (int step = start_step; step < cfg.steps; ++step) {
    std::vector<DatasetRecord> batch;
    for (std::size_t i : sft_batch_indices(data.size(), cfg.batch_size, cfg.seed, step)) batch.push_back(data[i]);
    const SftStepResult r = sft_step(params, opt, batch, cfg);
    if (sink && (step % cfg.log_every == 0 || step + 1 == cfg.steps)) {
      nlohmann::ordered_json j;
      j["step"] = step;
      j["loss"] = r.loss;
      j["tokens"] = r.tokens;
      j["skipped"] = r.skipped;
      j["grad_norm"] = r.grad_norm;
      sink(j);
    }
    if (on_checkpoint && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) on_checkpoint(step + 1);
  }
}

// ---------------------------------------------------------------------------
// Rollouts

struct Rollout {
  std::size_t question = 0;
  std::vector<TokenId> tokens;  // generated positions, including forced ones
  InjectionScript script;
  std::vector<bool> is_action;
  std::vector<double> logp_old;
  std::vector<double> logp_ref;
  RewardBreakdown reward;
  ReflectionStats stats;
  double advantage = 0.0;
  bool hit_stop = false;
};

struct GroupBatch {
  std::size_t question = 0;
  SequenceState prompt;
  std::vector<Rollout> rollouts;
  double reward_mean = 0.0;
  double reward_std = 0.0;
};

/// Scores a sampled response: strips <eos>, parses and rewards it.
inline void score_rollout(Rollout& r, const std::string& gold, const RewardConfig& rc) {
  const auto resp = parse(strip_eos(r.tokens));
  r.reward = composite_reward(resp, gold, rc);
  r.stats = reflection_stats(resp);
}

inline GroupBatch sample_group(const ModelParams<float>& policy, const ModelParams<float>* ref, const QAItem& qa,
                               std::size_t qid, int step, const TrainConfig& tc, const RewardConfig& rc,
                               const ReattentionConfig& ra) {
  const auto& vocab = Vocabulary::instance();
  GroupBatch g;
  g.question = qid;
  g.prompt = prompt_for(qa);
  std::vector<double> rewards;
  for (int i = 0; i < tc.G; ++i) {
    SampleParams sp;
    sp.temperature = tc.temperature;
    sp.max_new = tc.max_new;
    sp.seed = derive_seed({tc.seed, static_cast<std::uint64_t>(step), qid, static_cast<std::uint64_t>(i)});
    sp.stop_tokens = {vocab.eos()};
    ReflectionHook hook(ra);
    SampleResult s = sample(policy, g.prompt, sp, std::ref(hook));
    Rollout r;
    r.question = qid;
    r.tokens = std::move(s.tokens);
    r.script = hook.script();
    r.is_action = std::move(s.sampled);
    r.logp_old = std::move(s.logprobs);
    r.hit_stop = s.hit_stop;
    if (ref != nullptr && tc.beta > 0) r.logp_ref = logprob_of(*ref, g.prompt, r.tokens, r.script);
    score_rollout(r, qa.gold_answer, rc);
    rewards.push_back(r.reward.composite);
    g.rollouts.push_back(std::move(r));
  }
  const auto adv = group_advantages(rewards);
  for (std::size_t i = 0; i < adv.size(); ++i) g.rollouts[i].advantage = adv[i];
  const double n = static_cast<double>(rewards.size());
  g.reward_mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - g.reward_mean) * (r - g.reward_mean);
  g.reward_std = std::sqrt(var / n);
  return g;
}

/// Accumulates d(-objective)/d(params) for the groups; returns the objective.
/// Each rollout's terms depend only on its own log-probs, so every rollout
/// needs a single taped forward.
inline ObjectiveValue brpo_gradient(ModelParams<float>& policy, const std::vector<GroupBatch>& groups,
                                    const TrainConfig& tc) {
  ObjectiveValue total;
  const double Q = static_cast<double>(groups.size());
  double rollouts = 0.0;
  for (const auto& g : groups) {
    const double G = static_cast<double>(g.rollouts.size());
    for (const auto& r : g.rollouts) {
      PolicyTerms terms{r.logp_old, r.logp_old, r.logp_ref, r.is_action, r.advantage};
      const ObjectiveValue probe = brpo_loss(std::span<const PolicyTerms>(&terms, 1), tc);
      const bool live = std::any_of(probe.coeff[0].begin(), probe.coeff[0].end(), [](double c) { return c != 0.0; });
      ObjectiveValue val = probe;
      if (live) {
        const ReplayLayout layout = replay_layout(g.prompt, r.tokens, r.script);
        Tape<float> tape;
        const auto b = bind(tape, policy);
        Var lp = logprob_on_tape(tape, b, policy.config, layout, r.tokens);
        const auto& lv = tape.value(lp).values();
        terms.logp.assign(lv.begin(), lv.end());
        val = brpo_loss(std::span<const PolicyTerms>(&terms, 1), tc);
        std::vector<float> w(val.coeff[0].size());
        for (std::size_t t = 0; t < w.size(); ++t) w[t] = static_cast<float>(-val.coeff[0][t] / (G * Q));
        tape.backward(weighted_sum(tape, lp, std::move(w)));
      }
      total.objective += val.objective / (G * Q);
      total.surrogate += val.surrogate / (G * Q);
      total.kl += val.kl / (G * Q);
      total.clip_fraction += val.clip_fraction;
      rollouts += 1.0;
    }
  }
  if (rollouts > 0) total.clip_fraction /= rollouts;
  return total;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalSummary {
  double accuracy = 0.0;
  double format = 0.0;
  double n_r_mean = 0.0;
  double response_len_mean = 0.0;
};

/// Mean rewards of one sampled response per question, seeded per question so
/// repeated evaluations use the same random stream.
inline EvalSummary evaluate_policy(const ModelParams<float>& policy, const std::vector<QAItem>& items,
                                   const TrainConfig& tc, const RewardConfig& rc, const ReattentionConfig& ra) {
  if (items.empty()) throw EmptyInputError("evaluate_policy: no items");
  const auto& vocab = Vocabulary::instance();
  EvalSummary e;
  for (std::size_t q = 0; q < items.size(); ++q) {
    SampleParams sp;
    sp.temperature = tc.temperature;
    sp.max_new = tc.max_new;
    sp.seed = derive_seed({tc.seed, 0xe7a1ULL, q});
    sp.stop_tokens = {vocab.eos()};
    ReflectionHook hook(ra);
    const SampleResult s = sample(policy, prompt_for(items[q]), sp, std::ref(hook));
    Rollout r;
    r.tokens = s.tokens;
    score_rollout(r, items[q].gold_answer, rc);
    e.accuracy += r.reward.accuracy;
    e.format += r.reward.format;
    e.n_r_mean += static_cast<double>(r.stats.count);
    e.response_len_mean += static_cast<double>(s.tokens.size());
  }
  const double n = static_cast<double>(items.size());
  e.accuracy /= n;
  e.format /= n;
  e.n_r_mean /= n;
  e.response_len_mean /= n;
  return e;
}

// ---------------------------------------------------------------------------
// Training loop

/// Policy, frozen reference and optimizer of a BRPO run.
struct BrpoState {
  ModelParams<float> policy;
  ModelParams<float> ref;
  Adam opt;
  int step = 0;

  static BrpoState start(const ModelParams<float>& cold_start, const TrainConfig& tc) {
    BrpoState s{cold_start.clone(), cold_start.clone(), {}, 0};
    s.policy.set_visual_frozen(cold_start.visual_frozen());
    s.opt = Adam(s.policy, {tc.lr, tc.adam_beta1, tc.adam_beta2, tc.adam_eps, 0.0, tc.grad_clip});
    return s;
  }
};

/// Question indices for a step, drawn from (seed, step) only so that a resumed
/// run sees the same questions.
inline std::vector<std::size_t> step_questions(std::size_t n, const TrainConfig& tc, int step) {
  std::vector<std::size_t> out;
  for (int q = 0; q < tc.questions_per_step; ++q) {
    out.push_back(derive_seed({tc.seed, 0x9a3eULL, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(q)}) %
                  n);
  }
  return out;
}

inline nlohmann::ordered_json step_telemetry(int step, const std::vector<GroupBatch>& groups,
                                             const ObjectiveValue& obj, double gnorm) {
  double reward = 0, acc = 0, fmt = 0, bal = 0, n_r = 0, l_r = 0, len = 0;
  double refl_sum = 0, refl_cnt = 0;
  std::size_t n = 0;
  for (const auto& g : groups) {
    for (const auto& r : g.rollouts) {
      reward += r.reward.composite;
      acc += r.reward.accuracy;
      fmt += r.reward.format;
      bal += r.reward.balance;
      n_r += static_cast<double>(r.stats.count);
      l_r += static_cast<double>(r.stats.total_length);
      len += static_cast<double>(r.tokens.size());
      refl_sum += static_cast<double>(r.stats.total_length);
      refl_cnt += static_cast<double>(r.stats.count);
      ++n;
    }
  }
  const double dn = static_cast<double>(n);
  nlohmann::ordered_json j;
  j["step"] = step;
  j["mean_reward"] = reward / dn;
  j["acc_reward"] = acc / dn;
  j["format_reward"] = fmt / dn;
  j["balance_reward"] = bal / dn;
  j["n_r_mean"] = n_r / dn;
  j["l_r_total_mean"] = l_r / dn;
  j["reflection_len_mean"] = refl_cnt > 0 ? refl_sum / refl_cnt : 0.0;
  j["response_len_mean"] = len / dn;
  j["kl_mean"] = obj.kl;
  j["objective"] = obj.objective;
  j["clip_fraction"] = obj.clip_fraction;
  j["grad_norm"] = gnorm;
  j["rollouts"] = n;
  return j;
}

struct BrpoHooks {
  TelemetrySink on_step;
  std::function<void(const BrpoState&)> on_checkpoint;
  // Called with a JSON description of the failing step before a numeric abort.
  std::function<void(const nlohmann::ordered_json&)> on_failure;
};

/// Runs BRPO steps until state.step == tc.steps. Each step samples G rollouts
/// for each chosen question, rewards them, and applies updates_per_batch
/// optimizer steps against the sampling policy.
inline void brpo_train(BrpoState& state, const std::vector<QAItem>& train, const std::vector<QAItem>& eval,
                       const TrainConfig& tc, const RewardConfig& rc, const ReattentionConfig& ra,
                       const BrpoHooks& hooks = {}) {
  tc.validate();
  rc.validate();
  ra.validate();
  if (train.empty()) throw EmptyInputError("brpo: empty training set");
  std::vector<QAItem> eval_items(eval.begin(), eval.begin() + std::min<std::size_t>(eval.size(), tc.n_eval));
  const bool evaluating = tc.eval_every > 0 && !eval_items.empty();
  auto add_eval = [&](nlohmann::ordered_json& j) {
    const EvalSummary e = evaluate_policy(state.policy, eval_items, tc, rc, ra);
    j["eval_acc"] = e.accuracy;
    j["eval_format"] = e.format;
    j["eval_n_r"] = e.n_r_mean;
    j["eval_len"] = e.response_len_mean;
  };

  while (state.step < tc.steps) {
    const int step = state.step;
    // Evaluation precedes the update, so step 0 reports the cold-start policy.
    nlohmann::ordered_json eval_fields = nlohmann::ordered_json::object();
    if (evaluating && step % tc.eval_every == 0) add_eval(eval_fields);
    std::vector<GroupBatch> groups;
    for (std::size_t qid : step_questions(train.size(), tc, step)) {
      groups.push_back(sample_group(state.policy, &state.ref, train[qid], qid, step, tc, rc, ra));
    }
    ObjectiveValue obj;
    double gnorm = 0.0;
    for (int u = 0; u < tc.updates_per_batch; ++u) {
      state.policy.zero_grad();
      obj = brpo_gradient(state.policy, groups, tc);
      auto fail = [&](const std::string& why) {
        if (hooks.on_failure) {
          nlohmann::ordered_json d;
          d["step"] = step;
          d["reason"] = why;
          d["objective"] = obj.objective;
          d["kl"] = obj.kl;
          for (const auto& g : groups) {
            for (const auto& r : g.rollouts) {
              d["rollouts"].push_back({{"question", r.question},
                                       {"reward", r.reward.composite},
                                       {"advantage", r.advantage},
                                       {"tokens", Vocabulary::instance().decode(r.tokens)}});
            }
          }
          hooks.on_failure(d);
        }
        throw NumericError("brpo step " + std::to_string(step) + ": " + why);
      };
      if (!std::isfinite(obj.objective)) fail("non-finite objective");
      try {
        gnorm = state.opt.step(state.policy);
      } catch (const NumericError& e) {
        fail(e.what());
      }
      if (!state.policy.all_finite()) fail("parameters became non-finite");
    }
    ++state.step;
    if (hooks.on_step) {
      auto j = step_telemetry(step, groups, obj, gnorm);
      for (auto& [k, v] : eval_fields.items()) j[k] = v;
      hooks.on_step(j);
    }
    if (hooks.on_checkpoint && tc.checkpoint_every > 0 && state.step % tc.checkpoint_every == 0) {
      hooks.on_checkpoint(state);
    }
  }
  if (evaluating && hooks.on_step) {
    nlohmann::ordered_json j;
    j["step"] = state.step;
    j["final"] = true;
    add_eval(j);
    hooks.on_step(j);
  }
}

}  // namespace relook
