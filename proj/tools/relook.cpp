// relook: synth, sft, brpo, decode and eval on the synthetic grid world.
// Settings come from defaults, then --config, then flags.
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "relook/harness.hpp"

using namespace relook;

namespace {

template <typename T>
void set_if(std::optional<T>& flag, T& field) {
  if (flag) field = *flag;
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out, train_data, eval_data, checkpoint, resume;
  std::optional<int> dim, layers, heads, max_positions;

  void attach(CLI::App* app, bool model) {
    app->add_option("--config", config, "JSON run config; flags override it")->check(CLI::ExistingFile);
    app->add_option("--seed", seed, "seed for every random stream of the run");
    app->add_option("--out", out, "output directory (default: $RELOOK_OUT or ./runs, timestamped)");
    app->add_option("--train-data", train_data, "training dataset (jsonl)");
    app->add_option("--eval-data", eval_data, "evaluation dataset (jsonl)");
    app->add_option("--checkpoint", checkpoint, "model checkpoint to start from");
    app->add_option("--resume", resume, "checkpoint of an interrupted run");
    if (model) {
      app->add_option("--dim", dim);
      app->add_option("--layers", layers);
      app->add_option("--heads", heads);
      app->add_option("--max-positions", max_positions);
    }
  }

  RunConfig load() {
    RunConfig c = config.empty() ? RunConfig{} : load_run_config(config);
    if (seed) c.seed = c.sft.seed = c.train.seed = *seed;
    set_if(out, c.out);
    set_if(train_data, c.train_data);
    set_if(eval_data, c.eval_data);
    set_if(checkpoint, c.checkpoint);
    set_if(resume, c.resume);
    set_if(dim, c.dim);
    set_if(layers, c.layers);
    set_if(heads, c.heads);
    set_if(max_positions, c.max_positions);
    return c;
  }
};

std::optional<ReattentionMode> mode_flag(const std::optional<std::string>& s) {
  if (!s) return std::nullopt;
  return mode_from_name(*s);
}

fs::path start(const RunConfig& cfg, std::string_view verb) {
  cfg.validate();
  const fs::path dir = make_run_dir(cfg, verb);
  save_run_config(dir / "config.json", cfg);
  std::cout << verb << ": writing to " << dir.string() << '\n';
  return dir;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"relook: reflective reasoning with visual re-attention on a toy grid world"};
  app.require_subcommand(1);

  // synth
  Common synth_c;
  std::optional<int> n, n_eval;
  std::vector<std::string> templates;
  auto* synth = app.add_subcommand("synth", "generate QA items and gold traces");
  synth_c.attach(synth, false);
  synth->add_option("--n", n, "training items");
  synth->add_option("--n-eval", n_eval, "evaluation items");
  synth->add_option("--templates", templates, "question templates")->delimiter(',');

  // sft
  Common sft_c;
  std::optional<int> sft_steps, sft_batch, sft_ckpt_every;
  std::optional<double> sft_lr;
  std::optional<std::string> sft_inject;
  bool unfreeze = false;
  auto* sft = app.add_subcommand("sft", "cold-start supervised fine-tuning on gold traces");
  sft_c.attach(sft, true);
  sft->add_option("--steps", sft_steps);
  sft->add_option("--lr", sft_lr);
  sft->add_option("--batch-size", sft_batch);
  sft->add_option("--checkpoint-every", sft_ckpt_every);
  sft->add_option("--inject", sft_inject, "teacher-forced injection mode: off, text_only, vtc, vtr");
  sft->add_flag("--unfreeze-visual", unfreeze, "train the visual table too");

  // brpo
  Common brpo_c;
  std::optional<int> b_steps, b_G, b_qps, b_eval_every, b_n_eval, b_ckpt_every, b_max_new;
  std::optional<double> b_lr, b_beta, b_clip, b_lambda, b_grad_clip, b_m;
  std::optional<std::string> b_ratio, b_mode;
  auto* brpo = app.add_subcommand("brpo", "group policy optimisation with the reflection reward");
  brpo_c.attach(brpo, false);
  brpo->add_option("--steps", b_steps);
  brpo->add_option("--lr", b_lr);
  brpo->add_option("--G", b_G, "rollouts per question");
  brpo->add_option("--questions-per-step", b_qps);
  brpo->add_option("--beta", b_beta, "KL weight");
  brpo->add_option("--clip-eps", b_clip);
  brpo->add_option("--grad-clip", b_grad_clip);
  brpo->add_option("--lambda", b_lambda, "target mean reflection length");
  brpo->add_option("--ratio", b_ratio, "token or sequence")->check(CLI::IsMember({"token", "sequence"}));
  brpo->add_option("--max-new", b_max_new);
  brpo->add_option("--eval-every", b_eval_every);
  brpo->add_option("--n-eval", b_n_eval);
  brpo->add_option("--checkpoint-every", b_ckpt_every);
  brpo->add_option("--mode", b_mode, "re-attention mode during rollouts");
  brpo->add_option("--m", b_m, "routing percentage for vtr");

  // decode
  Common dec_c;
  std::vector<std::string> d_modes;
  std::vector<double> d_ms;
  std::optional<int> d_limit, d_max_new, d_max_inj;
  std::optional<double> d_temp;
  bool d_greedy = false;
  auto* decode = app.add_subcommand("decode", "decode the eval set under re-attention modes");
  dec_c.attach(decode, false);
  decode->add_option("--mode", d_modes, "off, text_only, vision_only, vtc, vtr")->delimiter(',');
  decode->add_option("--m", d_ms, "routing percentages for vtr")->delimiter(',');
  decode->add_option("--limit", d_limit, "decode only the first N items");
  decode->add_option("--max-new", d_max_new);
  decode->add_option("--max-injections", d_max_inj);
  decode->add_option("--temperature", d_temp);
  decode->add_flag("--greedy", d_greedy);

  // eval
  Common ev_c;
  std::optional<std::string> e_dump, e_telemetry;
  std::optional<int> e_bucket, e_window;
  std::vector<std::string> e_blocks;
  bool e_gold = false;
  auto* eval = app.add_subcommand("eval", "score a decode dump and emit plot data");
  ev_c.attach(eval, false);
  eval->add_option("--dump", e_dump, "decode dump (jsonl)");
  eval->add_flag("--gold", e_gold, "score the gold traces instead of a dump");
  eval->add_option("--telemetry", e_telemetry, "brpo telemetry for reflection dynamics");
  eval->add_option("--bucket", e_bucket, "attention profile bucket width");
  eval->add_option("--mi-window", e_window);
  eval->add_option("--mention-blocks", e_blocks, "blocks scanned for object mentions")->delimiter(',');

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      RunConfig c = synth_c.load();
      set_if(n, c.synth.n);
      set_if(n_eval, c.synth.n_eval);
      if (!templates.empty()) c.synth.templates = templates;
      const auto dir = start(c, "synth");
      const auto r = cmd_synth(c, dir);
      std::cout << "train items " << r.train << " -> " << r.train_path.string() << '\n';
      if (r.eval) std::cout << "eval items  " << r.eval << " -> " << r.eval_path.string() << '\n';
    } else if (sft->parsed()) {
      RunConfig c = sft_c.load();
      set_if(sft_steps, c.sft.steps);
      set_if(sft_lr, c.sft.lr);
      set_if(sft_batch, c.sft.batch_size);
      set_if(sft_ckpt_every, c.sft.checkpoint_every);
      if (auto m = mode_flag(sft_inject)) c.sft.injection.mode = *m;
      if (unfreeze) c.sft.freeze_visual = false;
      if (c.train_data.empty()) throw ConfigError("sft needs --train-data");
      const auto dir = start(c, "sft");
      const auto r = cmd_sft(c, dir);
      std::cout << "steps " << r.steps << "  final loss " << r.final_loss << '\n'
                << "checkpoint " << r.checkpoint.string() << '\n';
    } else if (brpo->parsed()) {
      RunConfig c = brpo_c.load();
      set_if(b_steps, c.train.steps);
      set_if(b_lr, c.train.lr);
      set_if(b_G, c.train.G);
      set_if(b_qps, c.train.questions_per_step);
      set_if(b_beta, c.train.beta);
      set_if(b_clip, c.train.clip_eps);
      set_if(b_grad_clip, c.train.grad_clip);
      set_if(b_lambda, c.reward.lambda);
      set_if(b_max_new, c.train.max_new);
      set_if(b_eval_every, c.train.eval_every);
      set_if(b_n_eval, c.train.n_eval);
      set_if(b_ckpt_every, c.train.checkpoint_every);
      set_if(b_m, c.reattention.m);
      if (b_ratio) c.train.ratio_mode = *b_ratio == "sequence" ? RatioMode::sequence_level : RatioMode::token_level;
      if (auto m = mode_flag(b_mode)) c.reattention.mode = *m;
      if (c.train_data.empty()) throw ConfigError("brpo needs --train-data");
      const auto dir = start(c, "brpo");
      const auto r = cmd_brpo(c, dir);
      const auto rows = read_jsonl(r.telemetry);
      std::cout << "steps " << r.steps << "  telemetry " << r.telemetry.string() << '\n';
      for (const auto& j : rows)
        if (j.contains("eval_acc")) std::cout << "  step " << j.at("step") << "  eval_acc " << j.at("eval_acc") << '\n';
      std::cout << "checkpoint " << r.checkpoint.string() << '\n';
    } else if (decode->parsed()) {
      RunConfig c = dec_c.load();
      if (!d_modes.empty()) c.decode.modes = d_modes;
      if (!d_ms.empty()) c.decode.m_list = d_ms;
      set_if(d_limit, c.decode.limit);
      set_if(d_max_new, c.decode.max_new);
      set_if(d_temp, c.decode.temperature);
      if (d_max_inj) c.reattention.max_injections = static_cast<std::size_t>(*d_max_inj);
      if (d_greedy) c.decode.greedy = true;
      if (c.eval_data.empty()) throw ConfigError("decode needs --eval-data");
      const auto dir = start(c, "decode");
      for (const auto& o : cmd_decode(c, dir)) {
        std::cout << mode_name(o.mode);
        if (o.mode == ReattentionMode::vtr) std::cout << " m=" << o.m;
        std::cout << "  responses " << o.responses << "  mean length " << o.mean_length << "  mean ms "
                  << o.mean_wall_ms << "  -> " << o.dump.string() << '\n';
      }
    } else if (eval->parsed()) {
      RunConfig c = ev_c.load();
      set_if(e_dump, c.eval.dump);
      set_if(e_telemetry, c.eval.telemetry);
      set_if(e_bucket, c.eval.bucket_width);
      set_if(e_window, c.eval.mi_window);
      if (!e_blocks.empty()) c.eval.mention_blocks = e_blocks;
      if (e_gold) c.eval.gold = true;
      if (c.eval_data.empty()) throw ConfigError("eval needs --eval-data");
      const auto dir = start(c, "eval");
      const auto rep = cmd_eval(c, dir);
      for (const auto& [k, v] : rep.metrics) std::cout << "  " << k << '\t' << v << '\n';
    }
  } catch (const ConfigError& e) {
    std::cerr << "relook: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "relook: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
