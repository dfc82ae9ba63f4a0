#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "relook/autograd.hpp"
#include "relook/error.hpp"
#include "relook/sequence.hpp"
#include "relook/tensor.hpp"

namespace relook {

struct ModelConfig {
  int vocab_size = 0;
  int visual_vocab_size = 0;
  int dim = 64;
  int layers = 4;
  int heads = 4;
  int max_positions = 512;
  int mlp_mult = 4;

  void validate() const {
    if (vocab_size <= 0 || visual_vocab_size <= 0) throw ConfigError("vocabulary sizes must be positive");
    if (dim <= 0 || layers <= 0 || heads <= 0 || max_positions <= 0 || mlp_mult <= 0) {
      throw ConfigError("model extents must be positive");
    }
    if (dim % heads != 0) throw ConfigError("model dim must be divisible by the head count");
  }
  int head_dim() const { return dim / heads; }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"visual_vocab_size", c.visual_vocab_size},
                     {"dim", c.dim},               {"layers", c.layers},
                     {"heads", c.heads},           {"max_positions", c.max_positions},
                     {"mlp_mult", c.mlp_mult}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.visual_vocab_size = j.value("visual_vocab_size", c.visual_vocab_size);
  c.dim = j.value("dim", c.dim);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.max_positions = j.value("max_positions", c.max_positions);
  c.mlp_mult = j.value("mlp_mult", c.mlp_mult);
}

template <typename T>
struct LayerParams {
  Tensor<T> ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
};

/// All weights of the decoder. The visual table plays the role of a frozen
/// visual encoder when `set_visual_frozen(true)`.
template <typename T = float>
class ModelParams {
 public:
  ModelConfig config;
  Tensor<T> tok_emb, vis_emb, pos_emb;
  std::vector<LayerParams<T>> layers;
  Tensor<T> lnf_g, lnf_b, head;

  ModelParams() = default;

  explicit ModelParams(const ModelConfig& cfg) : config(cfg) {
    cfg.validate();
    const std::size_t d = cfg.dim, h = static_cast<std::size_t>(cfg.dim) * cfg.mlp_mult;
    tok_emb = Tensor<T>({static_cast<std::size_t>(cfg.vocab_size), d});
    vis_emb = Tensor<T>({static_cast<std::size_t>(cfg.visual_vocab_size), d});
    pos_emb = Tensor<T>({static_cast<std::size_t>(cfg.max_positions), d});
    layers.resize(cfg.layers);
    for (auto& L : layers) {
      L.ln1_g = Tensor<T>({d}, T{1});
      L.ln1_b = Tensor<T>({d});
      L.wq = Tensor<T>({d, d});
      L.wk = Tensor<T>({d, d});
      L.wv = Tensor<T>({d, d});
      L.wo = Tensor<T>({d, d});
      L.ln2_g = Tensor<T>({d}, T{1});
      L.ln2_b = Tensor<T>({d});
      L.w1 = Tensor<T>({d, h});
      L.b1 = Tensor<T>({h});
      L.w2 = Tensor<T>({h, d});
      L.b2 = Tensor<T>({d});
    }
    lnf_g = Tensor<T>({d}, T{1});
    lnf_b = Tensor<T>({d});
    head = Tensor<T>({d, static_cast<std::size_t>(cfg.vocab_size)});
    for (auto& [name, t] : named()) t->set_requires_grad(true);
  }

  /// Gaussian initialization; residual output projections are scaled down
  /// with depth.
  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed) {
    ModelParams p(cfg);
    std::mt19937_64 rng(seed);
    auto fill = [&rng](Tensor<T>& t, double stddev) {
      std::normal_distribution<double> nd(0.0, stddev);
      for (auto& v : t.data()) v = static_cast<T>(nd(rng));
    };
    const double d = cfg.dim;
    const double resid = 1.0 / std::sqrt(2.0 * cfg.layers);
    fill(p.tok_emb, 0.1);
    fill(p.vis_emb, 0.1);
    fill(p.pos_emb, 0.1);
    for (auto& L : p.layers) {
      fill(L.wq, 1.0 / std::sqrt(d));
      fill(L.wk, 1.0 / std::sqrt(d));
      fill(L.wv, 1.0 / std::sqrt(d));
      fill(L.wo, resid / std::sqrt(d));
      fill(L.w1, 1.0 / std::sqrt(d));
      fill(L.w2, resid / std::sqrt(d * cfg.mlp_mult));
    }
    fill(p.head, 1.0 / std::sqrt(d));
    return p;
  }

  std::vector<std::pair<std::string, Tensor<T>*>> named() {
    std::vector<std::pair<std::string, Tensor<T>*>> out{
        {"tok_emb", &tok_emb}, {"vis_emb", &vis_emb}, {"pos_emb", &pos_emb}};
    for (std::size_t i = 0; i < layers.size(); ++i) {
      auto& L = layers[i];
      const std::string p = "layer" + std::to_string(i) + ".";
      for (auto& [n, t] : std::initializer_list<std::pair<const char*, Tensor<T>*>>{
               {"ln1_g", &L.ln1_g}, {"ln1_b", &L.ln1_b}, {"wq", &L.wq}, {"wk", &L.wk},
               {"wv", &L.wv},       {"wo", &L.wo},       {"ln2_g", &L.ln2_g}, {"ln2_b", &L.ln2_b},
               {"w1", &L.w1},       {"b1", &L.b1},       {"w2", &L.w2},   {"b2", &L.b2}}) {
        out.emplace_back(p + n, t);
      }
    }
    out.emplace_back("lnf_g", &lnf_g);
    out.emplace_back("lnf_b", &lnf_b);
    out.emplace_back("head", &head);
    return out;
  }

  std::vector<std::pair<std::string, const Tensor<T>*>> named() const {
    std::vector<std::pair<std::string, const Tensor<T>*>> out;
    for (auto& [n, t] : const_cast<ModelParams*>(this)->named()) out.emplace_back(n, t);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& [name, t] : named()) n += t->size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : named()) {
      t->ensure_grad();
      t->zero_grad();
    }
  }

  bool all_finite() const {
    for (auto& [name, t] : named())
      if (!t->all_finite()) return false;
    return true;
  }

  void set_visual_frozen(bool frozen) { vis_emb.set_requires_grad(!frozen); }
  bool visual_frozen() const { return !vis_emb.requires_grad(); }

  /// Copy of the values only (no gradient buffers).
  ModelParams clone() const {
    ModelParams p(config);
    auto dst = p.named();
    auto src = named();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      dst[i].second->values() = src[i].second->values();
      dst[i].second->set_requires_grad(src[i].second->requires_grad());
    }
    return p;
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> p(config);
    auto dst = p.named();
    auto src = named();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      *dst[i].second = src[i].second->template cast<U>();
    }
    return p;
  }
};

// ---------------------------------------------------------------------------
// Taped full-sequence forward

template <typename T>
struct BoundParams {
  Var tok_emb, vis_emb, pos_emb;
  struct Layer {
    Var ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
  };
  std::vector<Layer> layers;
  Var lnf_g, lnf_b, head;
};

template <typename T>
BoundParams<T> bind(Tape<T>& tape, ModelParams<T>& p) {
  BoundParams<T> b;
  b.tok_emb = tape.leaf(p.tok_emb);
  b.vis_emb = tape.leaf(p.vis_emb);
  b.pos_emb = tape.leaf(p.pos_emb);
  for (auto& L : p.layers) {
    b.layers.push_back({tape.leaf(L.ln1_g), tape.leaf(L.ln1_b), tape.leaf(L.wq), tape.leaf(L.wk), tape.leaf(L.wv),
                        tape.leaf(L.wo), tape.leaf(L.ln2_g), tape.leaf(L.ln2_b), tape.leaf(L.w1), tape.leaf(L.b1),
                        tape.leaf(L.w2), tape.leaf(L.b2)});
  }
  b.lnf_g = tape.leaf(p.lnf_g);
  b.lnf_b = tape.leaf(p.lnf_b);
  b.head = tape.leaf(p.head);
  return b;
}

struct TapedForward {
  Var hidden;                  // final normalized hidden states [T x d]
  std::vector<Var> attention;  // causal attention matrices, layer-major then head
};

/// Runs every position of `seq` through the model on `tape`.
template <typename T>
TapedForward forward_sequence(Tape<T>& tape, const BoundParams<T>& b, const ModelConfig& cfg,
                              const SequenceState& seq) {
  const std::size_t n = seq.size();
  if (n == 0) throw DimensionError("forward: empty sequence");
  if (n > static_cast<std::size_t>(cfg.max_positions)) {
    throw CapacityError("sequence length " + std::to_string(n) + " exceeds max positions " +
                        std::to_string(cfg.max_positions));
  }
  std::vector<int> ids(n), pos(n);
  std::vector<bool> visual(n);
  for (std::size_t i = 0; i < n; ++i) {
    ids[i] = seq[i].id;
    visual[i] = is_visual(seq[i].origin);
    pos[i] = static_cast<int>(i);
  }
  Var x = add(tape, embedding2(tape, b.tok_emb, b.vis_emb, std::move(ids), std::move(visual)),
              embedding(tape, b.pos_emb, std::move(pos)));
  const std::size_t hd = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  TapedForward out;
  for (const auto& L : b.layers) {
    Var h = layer_norm(tape, x, L.ln1_g, L.ln1_b);
    Var q = matmul(tape, h, L.wq);
    Var k = matmul(tape, h, L.wk);
    Var v = matmul(tape, h, L.wv);
    std::vector<Var> heads;
    for (int hh = 0; hh < cfg.heads; ++hh) {
      Var qh = slice_cols(tape, q, hh * hd, hd);
      Var kh = slice_cols(tape, k, hh * hd, hd);
      Var vh = slice_cols(tape, v, hh * hd, hd);
      Var p = causal_softmax(tape, matmul_nt(tape, qh, kh), scale);
      out.attention.push_back(p);
      heads.push_back(matmul(tape, p, vh));
    }
    Var att = heads.size() == 1 ? heads[0] : concat_cols(tape, heads);
    x = add(tape, x, matmul(tape, att, L.wo));
    Var h2 = layer_norm(tape, x, L.ln2_g, L.ln2_b);
    Var u = gelu(tape, add_rowwise(tape, matmul(tape, h2, L.w1), L.b1));
    x = add(tape, x, add_rowwise(tape, matmul(tape, u, L.w2), L.b2));
  }
  out.hidden = layer_norm(tape, x, b.lnf_g, b.lnf_b);
  return out;
}

/// Logits for the chosen rows of a taped forward.
template <typename T>
Var logits_at(Tape<T>& tape, const BoundParams<T>& b, const TapedForward& f, std::vector<std::size_t> rows) {
  return matmul(tape, select_rows(tape, f.hidden, std::move(rows)), b.head);
}

// ---------------------------------------------------------------------------
// Attention records

/// Attention of one query position over its context, all layers and heads.
struct AttnStep {
  std::size_t context_len = 0;
  std::vector<float> weights;  // [layer][head][context_len]

  float at(int layer, int head, int heads, std::size_t j) const {
    return weights[(static_cast<std::size_t>(layer) * heads + head) * context_len + j];
  }
};

/// One AttnStep per response token: the attention row of the position whose
/// logits produced that token.
struct AttnRecord {
  int layers = 0;
  int heads = 0;
  std::vector<AttnStep> steps;
  std::vector<std::size_t> visual_positions;    // original visual span
  std::vector<std::size_t> injected_positions;  // injected copies

  std::size_t size() const { return steps.size(); }
};

/// Mean over layers and heads of the attention mass on all visual positions
/// (original and injected) at step `t`.
inline double attention_to_visual(const AttnRecord& rec, std::size_t t) {
  if (t >= rec.steps.size()) throw Error("attention_to_visual: step outside record");
  const AttnStep& st = rec.steps[t];
  double total = 0.0;
  for (int l = 0; l < rec.layers; ++l) {
    for (int h = 0; h < rec.heads; ++h) {
      double mass = 0.0;
      for (auto j : rec.visual_positions)
        if (j < st.context_len) mass += st.at(l, h, rec.heads, j);
      for (auto j : rec.injected_positions)
        if (j < st.context_len) mass += st.at(l, h, rec.heads, j);
      total += mass;
    }
  }
  const int lh = rec.layers * rec.heads;
  return lh > 0 ? total / lh : 0.0;
}

// ---------------------------------------------------------------------------
// Incremental decoder with a key/value cache. Mirrors forward_sequence row by
// row using the same kernels, so its logits match the taped path exactly.

template <typename T = float>
class Decoder {
 public:
  explicit Decoder(const ModelParams<T>& params) : p_(&params), cfg_(params.config) {
    caches_.resize(cfg_.layers);
    last_attention_.resize(static_cast<std::size_t>(cfg_.layers) * cfg_.heads);
  }

  SequenceState& state() { return state_; }
  const SequenceState& state() const { return state_; }

  void reset(SequenceState s) {
    state_ = std::move(s);
    state_.set_committed(0);
    for (auto& c : caches_) {
      c.k.clear();
      c.v.clear();
    }
  }

  /// Consumes every pending position; returns the logits of the last one.
  /// `on_row(index, logits)` sees the logits of each consumed position.
  template <typename OnRow>
  const std::vector<T>& feed(OnRow&& on_row) {
    while (state_.committed() < state_.size()) {
      step_one(state_[state_.committed()], state_.committed());
      state_.set_committed(state_.committed() + 1);
      on_row(state_.committed() - 1, logits_);
    }
    return logits_;
  }

  const std::vector<T>& feed() {
    return feed([](std::size_t, const std::vector<T>&) {});
  }

  const std::vector<T>& logits() const { return logits_; }

  /// Attention rows of the last consumed position, per layer and head.
  AttnStep last_attention() const {
    AttnStep s;
    s.context_len = state_.committed();
    s.weights.reserve(last_attention_.size() * s.context_len);
    for (const auto& row : last_attention_)
      for (std::size_t j = 0; j < s.context_len; ++j) s.weights.push_back(static_cast<float>(row[j]));
    return s;
  }

 private:
  struct Cache {
    std::vector<T> k, v;  // [t x d]
  };

  void step_one(const Position& pos, std::size_t index) {
    if (index >= static_cast<std::size_t>(cfg_.max_positions)) {
      throw CapacityError("sequence length " + std::to_string(index + 1) + " exceeds max positions " +
                          std::to_string(cfg_.max_positions));
    }
    const ModelParams<T>& P = *p_;
    const std::size_t d = cfg_.dim, hd = cfg_.head_dim(), H = cfg_.heads;
    const std::size_t hidden = d * cfg_.mlp_mult;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const Tensor<T>& table = is_visual(pos.origin) ? P.vis_emb : P.tok_emb;
    if (pos.id < 0 || static_cast<std::size_t>(pos.id) >= table.rows()) {
      throw DimensionError("decoder: id " + std::to_string(pos.id) + " outside embedding table");
    }
    std::vector<T> x(d), h(d), q(d), k(d), v(d), att(d), proj(d), u(hidden);
    for (std::size_t j = 0; j < d; ++j) x[j] = table(pos.id, j) + P.pos_emb(index, j);
    const std::size_t t = index + 1;
    std::vector<T> scores(t), probs(t);
    for (std::size_t l = 0; l < P.layers.size(); ++l) {
      const auto& L = P.layers[l];
      auto& C = caches_[l];
      kernels::layer_norm_row<T>(x, L.ln1_g.data(), L.ln1_b.data(), h);
      kernels::matmul_nn<T>(h, L.wq.data(), q, 1, d, d);
      kernels::matmul_nn<T>(h, L.wk.data(), k, 1, d, d);
      kernels::matmul_nn<T>(h, L.wv.data(), v, 1, d, d);
      C.k.insert(C.k.end(), k.begin(), k.end());
      C.v.insert(C.v.end(), v.begin(), v.end());
      for (std::size_t hh = 0; hh < H; ++hh) {
        const std::size_t off = hh * hd;
        for (std::size_t j = 0; j < t; ++j) {
          const T* krow = C.k.data() + j * d + off;
          double acc = 0.0;
          for (std::size_t c = 0; c < hd; ++c) acc += static_cast<double>(q[off + c]) * krow[c];
          scores[j] = static_cast<T>(acc);
        }
        kernels::softmax_row<T>(scores, probs, t, scale);
        std::vector<double> acc(hd, 0.0);
        for (std::size_t j = 0; j < t; ++j) {
          const double pj = static_cast<double>(probs[j]);
          if (pj == 0.0) continue;
          const T* vrow = C.v.data() + j * d + off;
          for (std::size_t c = 0; c < hd; ++c) acc[c] += pj * static_cast<double>(vrow[c]);
        }
        for (std::size_t c = 0; c < hd; ++c) att[off + c] = static_cast<T>(acc[c]);
        last_attention_[l * H + hh].assign(probs.begin(), probs.end());
      }
      kernels::matmul_nn<T>(att, L.wo.data(), proj, 1, d, d);
      for (std::size_t j = 0; j < d; ++j) x[j] = x[j] + proj[j];
      kernels::layer_norm_row<T>(x, L.ln2_g.data(), L.ln2_b.data(), h);
      kernels::matmul_nn<T>(h, L.w1.data(), u, 1, d, hidden);
      for (std::size_t j = 0; j < hidden; ++j) u[j] = u[j] + L.b1[j];
      for (std::size_t j = 0; j < hidden; ++j) u[j] = static_cast<T>(kernels::gelu(u[j]));
      kernels::matmul_nn<T>(u, L.w2.data(), proj, 1, hidden, d);
      for (std::size_t j = 0; j < d; ++j) proj[j] = proj[j] + L.b2[j];
      for (std::size_t j = 0; j < d; ++j) x[j] = x[j] + proj[j];
    }
    kernels::layer_norm_row<T>(x, P.lnf_g.data(), P.lnf_b.data(), h);
    logits_.resize(cfg_.vocab_size);
    kernels::matmul_nn<T>(h, P.head.data(), logits_, 1, d, cfg_.vocab_size);
  }

  const ModelParams<T>* p_;
  ModelConfig cfg_;
  SequenceState state_;
  std::vector<Cache> caches_;
  std::vector<T> logits_;
  std::vector<std::vector<T>> last_attention_;
};

template <typename T>
double log_softmax_at(std::span<const T> logits, TokenId token) {
  return static_cast<double>(logits[token]) - kernels::logsumexp_row<T>(logits);
}

/// Next-token logits and the newest position's attention for a whole state,
/// computed without a cache.
template <typename T>
std::pair<std::vector<T>, AttnStep> forward(const ModelParams<T>& params, const SequenceState& state) {
  Decoder<T> dec(params);
  dec.reset(state);
  auto logits = dec.feed();
  return {logits, dec.last_attention()};
}

// ---------------------------------------------------------------------------
// Sampling

struct SampleParams {
  double temperature = 1.0;
  bool greedy = false;
  int max_new = 160;
  std::uint64_t seed = 0;
  std::vector<TokenId> stop_tokens;
};

/// Context handed to a sampling hook right after a sampled token has been
/// appended (and before the model consumes it).
struct HookContext {
  SequenceState& state;
  const AttnRecord& record;
  TokenId token;
  std::size_t step;  // index of the token within the response
};

using SampleHook = std::function<void(HookContext&)>;

struct SampleResult {
  std::vector<TokenId> tokens;   // every generated-origin position, in order
  std::vector<double> logprobs;  // log pi(token) at temperature 1
  std::vector<bool> sampled;     // false for tokens a hook forced
  AttnRecord record;
  SequenceState state;
  bool hit_stop = false;
};

namespace detail {

inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

template <typename T>
TokenId draw(std::span<const T> logits, const SampleParams& sp, std::mt19937_64& rng) {
  if (sp.greedy) {
    return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  double mx = -INFINITY;
  for (T v : logits) mx = std::max(mx, static_cast<double>(v) / sp.temperature);
  std::vector<double> w(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    w[i] = std::exp(static_cast<double>(logits[i]) / sp.temperature - mx);
    total += w[i];
  }
  double u = uniform01(rng) * total;
  for (std::size_t i = 0; i < w.size(); ++i) {
    u -= w[i];
    if (u < 0) return static_cast<TokenId>(i);
  }
  return static_cast<TokenId>(w.size() - 1);
}

}  // namespace detail

/// Autoregressive sampling from `prompt`. After each sampled token is appended
/// the hook may insert visual positions before it or force further tokens
/// after it; positions the model already consumed cannot change.
template <typename T>
SampleResult sample(const ModelParams<T>& params, const SequenceState& prompt, const SampleParams& sp,
                    const SampleHook& hook = {}) {
  if (!sp.greedy && !(sp.temperature > 0)) throw ConfigError("sampling temperature must be positive");
  std::mt19937_64 rng(sp.seed);
  Decoder<T> dec(params);
  dec.reset(prompt);
  std::vector<T> logits = dec.feed();

  SampleResult res;
  res.record.layers = params.config.layers;
  res.record.heads = params.config.heads;
  res.record.visual_positions = prompt.indices(Origin::visual);
  auto is_stop = [&](TokenId t) { return std::find(sp.stop_tokens.begin(), sp.stop_tokens.end(), t) != sp.stop_tokens.end(); };

  while (res.tokens.size() < static_cast<std::size_t>(sp.max_new)) {
    const TokenId tok = detail::draw<T>(logits, sp, rng);
    res.record.steps.push_back(dec.last_attention());
    res.tokens.push_back(tok);
    res.logprobs.push_back(log_softmax_at<T>(logits, tok));
    res.sampled.push_back(true);

    SequenceState& st = dec.state();
    const std::size_t committed = st.committed();
    st.append(Origin::generated, tok);
    if (hook) {
      const std::vector<Position> before(st.positions().begin(), st.positions().begin() + committed);
      HookContext ctx{st, res.record, tok, res.tokens.size() - 1};
      hook(ctx);
      if (st.size() < committed + 1 || !std::equal(before.begin(), before.end(), st.positions().begin())) {
        throw Error("sampling hook modified positions the model already consumed");
      }
    }

    // Locate the sampled token among the new positions; generated positions
    // after it are forced.
    std::size_t sampled_at = st.size();
    for (std::size_t i = committed; i < st.size(); ++i) {
      if (st[i].origin == Origin::generated) {
        sampled_at = i;
        break;
      }
    }
    if (sampled_at == st.size() || st[sampled_at].id != tok) {
      throw Error("sampling hook displaced the sampled token");
    }
    bool stop = is_stop(tok);
    logits = dec.feed([&](std::size_t idx, const std::vector<T>& row_logits) {
      if (idx + 1 < st.size() && idx >= sampled_at && st[idx + 1].origin == Origin::generated) {
        const TokenId forced = st[idx + 1].id;
        res.record.steps.push_back(dec.last_attention());
        res.tokens.push_back(forced);
        res.logprobs.push_back(log_softmax_at<T>(row_logits, forced));
        res.sampled.push_back(false);
        stop = stop || is_stop(forced);
      }
    });
    if (stop) {
      res.hit_stop = true;
      break;
    }
  }
  res.state = dec.state();
  res.record.injected_positions = res.state.indices(Origin::injected_visual);
  return res;
}

// ---------------------------------------------------------------------------
// Teacher-forced scoring

/// Per-token log-probs of `response` after `prompt`, replaying the visual
/// insertions recorded in `script`. Computed without a tape.
template <typename T>
std::vector<double> logprob_of(const ModelParams<T>& params, const SequenceState& prompt,
                               const std::vector<TokenId>& response, const InjectionScript& script = {}) {
  const ReplayLayout layout = replay_layout(prompt, response, script);
  std::vector<double> out(response.size());
  std::vector<std::vector<std::size_t>> by_row(layout.sequence.size());
  for (std::size_t s = 0; s < response.size(); ++s) by_row[layout.predict_rows[s]].push_back(s);
  Decoder<T> dec(params);
  dec.reset(layout.sequence);
  dec.feed([&](std::size_t idx, const std::vector<T>& logits) {
    for (std::size_t s : by_row[idx]) out[s] = log_softmax_at<T>(logits, response[s]);
  });
  return out;
}

/// Same as logprob_of but on a tape, returning a rank-1 Var of log-probs.
template <typename T>
Var logprob_on_tape(Tape<T>& tape, const BoundParams<T>& b, const ModelConfig& cfg, const ReplayLayout& layout,
                    const std::vector<TokenId>& response) {
  TapedForward f = forward_sequence(tape, b, cfg, layout.sequence);
  Var logits = logits_at(tape, b, f, layout.predict_rows);
  return token_logprobs(tape, logits, response);
}

// ---------------------------------------------------------------------------
// Checkpoints: "RLKCKPT1", u64 header length, JSON header, then per tensor
// u32 name length, name, u32 rank, u64 extents, float32 values.

inline constexpr char kCheckpointMagic[8] = {'R', 'L', 'K', 'C', 'K', 'P', 'T', '1'};

namespace detail {

template <typename V>
void put(std::ostream& os, const V& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::istream& is) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!is) throw FormatError("checkpoint truncated");
  return v;
}

}  // namespace detail

inline void write_tensors(std::ostream& os, const nlohmann::json& header,
                          const std::vector<std::pair<std::string, const Tensor<float>*>>& tensors) {
  os.write(kCheckpointMagic, 8);
  const std::string h = header.dump();
  detail::put<std::uint64_t>(os, h.size());
  os.write(h.data(), static_cast<std::streamsize>(h.size()));
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(t->rank()));
    for (auto e : t->shape()) detail::put<std::uint64_t>(os, e);
    os.write(reinterpret_cast<const char*>(t->data().data()), static_cast<std::streamsize>(t->size() * sizeof(float)));
  }
}

inline nlohmann::json read_header(std::istream& is) {
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw FormatError("not a checkpoint file");
  const auto len = detail::get<std::uint64_t>(is);
  std::string h(len, '\0');
  is.read(h.data(), static_cast<std::streamsize>(len));
  if (!is) throw FormatError("checkpoint truncated");
  return nlohmann::json::parse(h);
}

/// Reads tensors into `targets`, requiring identical names, order and shapes.
inline void read_tensors(std::istream& is, const std::vector<std::pair<std::string, Tensor<float>*>>& targets) {
  const auto n = detail::get<std::uint32_t>(is);
  if (n != targets.size()) {
    throw FormatError("checkpoint holds " + std::to_string(n) + " tensors, expected " + std::to_string(targets.size()));
  }
  for (const auto& [name, t] : targets) {
    const auto nl = detail::get<std::uint32_t>(is);
    std::string got(nl, '\0');
    is.read(got.data(), nl);
    if (got != name) throw FormatError("checkpoint tensor '" + got + "' where '" + name + "' was expected");
    const auto rank = detail::get<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& e : shape) e = detail::get<std::uint64_t>(is);
    if (shape != t->shape()) {
      throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_str(shape) + ", expected " +
                        shape_str(t->shape()));
    }
    is.read(reinterpret_cast<char*>(t->data().data()), static_cast<std::streamsize>(t->size() * sizeof(float)));
    if (!is) throw FormatError("checkpoint truncated in '" + name + "'");
  }
}

inline constexpr int kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, const ModelParams<float>& p, nlohmann::json extra = {}) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  nlohmann::json header{{"format", "relook-checkpoint"}, {"version", kCheckpointVersion}, {"model", p.config},
                        {"visual_frozen", p.visual_frozen()}};
  if (!extra.is_null()) header["extra"] = std::move(extra);
  write_tensors(os, header, p.named());
  if (!os) throw Error("write failed for '" + path + "'");
}

inline ModelParams<float> load_checkpoint(const std::string& path, nlohmann::json* extra = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint '" + path + "'");
  const auto header = read_header(is);
  if (header.value("version", 0) != kCheckpointVersion) throw FormatError("unsupported checkpoint version");
  ModelParams<float> p(header.at("model").get<ModelConfig>());
  read_tensors(is, p.named());
  p.set_visual_frozen(header.value("visual_frozen", false));
  if (extra != nullptr) *extra = header.value("extra", nlohmann::json{});
  return p;
}

}  // namespace relook
