#include "lab/pipeline/config.hpp"

#include <fstream>
#include <set>

#include "lab/numcore/errors.hpp"

namespace lab {
namespace {

using nlohmann::json;

void reject_unknown(const json& section, const std::string& where,
                    const std::set<std::string>& allowed) {
  if (!section.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  for (const auto& [key, value] : section.items()) {
    if (!allowed.count(key)) throw ConfigError("config: unknown key '" + where + "." + key + "'");
  }
}

template <typename T>
void read(const json& section, const char* key, T& target, const std::string& where) {
  if (!section.contains(key)) return;
  try {
    target = section.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config: '" + where + "." + key + "' has the wrong type");
  }
}

const char* kMapNames[] = {"q", "k", "v", "o"};

}  // namespace

void LabConfig::validate() const {
  model.validate();
  task.validate();
  ppo.validate();
  if (reward_source != "oracle" && reward_source != "learned") {
    throw ConfigError("config: reward_source must be 'oracle' or 'learned'");
  }
  if (lora.rank == 0 || lora.rank >= model.d_model) {
    throw ConfigError("config: lora.rank must satisfy 0 < rank < d_model");
  }
  if (!(lora.dropout >= 0.0f && lora.dropout < 1.0f)) {
    throw ConfigError("config: lora.dropout must lie in [0, 1)");
  }
  if (task.content_last >= static_cast<int>(model.vocab_size)) {
    throw ConfigError("config: task content tokens exceed the vocabulary");
  }
  if (sft.batch_size == 0 || rm.batch_size == 0 || rm.epochs == 0) {
    throw ConfigError("config: batch sizes and epochs must be positive");
  }
  if (!(rm.heldout_fraction > 0.0 && rm.heldout_fraction < 1.0)) {
    throw ConfigError("config: rm.heldout_fraction must lie in (0, 1)");
  }
  if (eval.interval == 0 || eval.bootstrap == 0 || eval.kl_samples == 0) {
    throw ConfigError("config: eval.interval, eval.bootstrap and eval.kl_samples must be positive");
  }
}

void apply_preset(LabConfig& config, const std::string& name) {
  if (name == "dropout_only") {
    config.ppo.divergence = DivergenceKind::kNoRegularization;
    config.ppo.beta = 0.0;
    config.lora.dropout = LoraConfig::dropout_only().dropout;
  } else {
    config.ppo.divergence = parse_divergence(name);
    config.ppo.beta = config.ppo.divergence == DivergenceKind::kNoRegularization ? 0.0 : 0.02;
  }
  config.preset = name;
}

LabConfig config_from_json(const json& j) {
  LabConfig c;
  reject_unknown(j, "config",
                 {"seed", "preset", "reward_source", "task", "splits", "model", "lora", "sft",
                  "rm", "ppo", "eval"});
  read(j, "seed", c.seed, "config");
  if (j.contains("preset")) apply_preset(c, j.at("preset").get<std::string>());
  read(j, "reward_source", c.reward_source, "config");

  if (j.contains("task")) {
    const json& t = j.at("task");
    reject_unknown(t, "task",
                   {"kind", "prompt_min", "prompt_max", "response_min", "response_max",
                    "content_first", "content_last"});
    if (t.contains("kind")) c.task.kind = parse_task(t.at("kind").get<std::string>());
    read(t, "prompt_min", c.task.prompt_min, "task");
    read(t, "prompt_max", c.task.prompt_max, "task");
    read(t, "response_min", c.task.response_min, "task");
    read(t, "response_max", c.task.response_max, "task");
    read(t, "content_first", c.task.content_first, "task");
    read(t, "content_last", c.task.content_last, "task");
  }
  c.task.seed = c.seed;
  if (j.contains("splits")) {
    const json& s = j.at("splits");
    reject_unknown(s, "splits", {"sft", "rm", "ppo", "eval"});
    read(s, "sft", c.splits.sft, "splits");
    read(s, "rm", c.splits.rm, "splits");
    read(s, "ppo", c.splits.ppo, "splits");
    read(s, "eval", c.splits.eval, "splits");
  }
  if (j.contains("model")) {
    const json& m = j.at("model");
    reject_unknown(m, "model",
                   {"vocab_size", "d_model", "n_layers", "n_heads", "max_seq_len", "d_ff"});
    read(m, "vocab_size", c.model.vocab_size, "model");
    read(m, "d_model", c.model.d_model, "model");
    read(m, "n_layers", c.model.n_layers, "model");
    read(m, "n_heads", c.model.n_heads, "model");
    read(m, "max_seq_len", c.model.max_seq_len, "model");
    read(m, "d_ff", c.model.d_ff, "model");
  }
  if (j.contains("lora")) {
    const json& l = j.at("lora");
    reject_unknown(l, "lora", {"rank", "alpha", "dropout", "maps", "adapt_policy", "adapt_value"});
    read(l, "rank", c.lora.rank, "lora");
    read(l, "alpha", c.lora.alpha, "lora");
    read(l, "dropout", c.lora.dropout, "lora");
    read(l, "adapt_policy", c.placement.adapt_policy, "lora");
    read(l, "adapt_value", c.placement.adapt_value, "lora");
    if (l.contains("maps")) {
      c.placement.maps = {false, false, false, false};
      for (const auto& name : l.at("maps")) {
        bool found = false;
        for (std::size_t m = 0; m < 4; ++m) {
          if (name == kMapNames[m]) c.placement.maps[m] = found = true;
        }
        if (!found) throw ConfigError("config: unknown lora map " + name.dump());
      }
    }
  }
  if (j.contains("sft")) {
    const json& s = j.at("sft");
    reject_unknown(s, "sft", {"steps", "batch_size", "learning_rate"});
    read(s, "steps", c.sft.steps, "sft");
    read(s, "batch_size", c.sft.batch_size, "sft");
    read(s, "learning_rate", c.sft.learning_rate, "sft");
  }
  if (j.contains("rm")) {
    const json& r = j.at("rm");
    reject_unknown(r, "rm",
                   {"pairs", "epochs", "batch_size", "learning_rate", "heldout_fraction",
                    "sample_temperature"});
    read(r, "pairs", c.rm.pairs, "rm");
    read(r, "epochs", c.rm.epochs, "rm");
    read(r, "batch_size", c.rm.batch_size, "rm");
    read(r, "learning_rate", c.rm.learning_rate, "rm");
    read(r, "heldout_fraction", c.rm.heldout_fraction, "rm");
    read(r, "sample_temperature", c.rm.sample_temperature, "rm");
  }
  if (j.contains("ppo")) {
    const json& p = j.at("ppo");
    reject_unknown(p, "ppo",
                   {"beta", "clip_epsilon", "rollout_batch", "update_batch", "epochs", "gamma",
                    "lambda", "value_loss_weight", "divergence", "total_steps",
                    "whiten_advantages", "learning_rate", "value_learning_rate",
                    "max_grad_norm", "max_new_tokens", "temperature", "kl_monitor_examples",
                    "js_full_rows"});
    if (p.contains("divergence")) {
      c.ppo.divergence = parse_divergence(p.at("divergence").get<std::string>());
    }
    read(p, "beta", c.ppo.beta, "ppo");
    read(p, "clip_epsilon", c.ppo.clip_epsilon, "ppo");
    read(p, "rollout_batch", c.ppo.rollout_batch, "ppo");
    read(p, "update_batch", c.ppo.update_batch, "ppo");
    read(p, "epochs", c.ppo.epochs, "ppo");
    read(p, "gamma", c.ppo.gamma, "ppo");
    read(p, "lambda", c.ppo.lambda, "ppo");
    read(p, "value_loss_weight", c.ppo.value_loss_weight, "ppo");
    read(p, "total_steps", c.ppo.total_steps, "ppo");
    read(p, "whiten_advantages", c.ppo.whiten_advantages, "ppo");
    read(p, "learning_rate", c.ppo.learning_rate, "ppo");
    read(p, "value_learning_rate", c.ppo.value_learning_rate, "ppo");
    read(p, "max_grad_norm", c.ppo.max_grad_norm, "ppo");
    read(p, "max_new_tokens", c.ppo.max_new_tokens, "ppo");
    read(p, "temperature", c.ppo.temperature, "ppo");
    read(p, "kl_monitor_examples", c.ppo.kl_monitor_examples, "ppo");
    read(p, "js_full_rows", c.ppo.js_full_rows, "ppo");
  }
  if (j.contains("eval")) {
    const json& e = j.at("eval");
    reject_unknown(e, "eval", {"interval", "bootstrap", "kl_samples"});
    read(e, "interval", c.eval.interval, "eval");
    read(e, "bootstrap", c.eval.bootstrap, "eval");
    read(e, "kl_samples", c.eval.kl_samples, "eval");
  }
  c.validate();
  return c;
}

json config_to_json(const LabConfig& c) {
  json maps = json::array();
  for (std::size_t m = 0; m < 4; ++m) {
    if (c.placement.maps[m]) maps.push_back(kMapNames[m]);
  }
  json j = {
      {"seed", c.seed},
      {"reward_source", c.reward_source},
      {"task",
       {{"kind", task_name(c.task.kind)},
        {"prompt_min", c.task.prompt_min},
        {"prompt_max", c.task.prompt_max},
        {"response_min", c.task.response_min},
        {"response_max", c.task.response_max},
        {"content_first", c.task.content_first},
        {"content_last", c.task.content_last}}},
      {"splits",
       {{"sft", c.splits.sft}, {"rm", c.splits.rm}, {"ppo", c.splits.ppo}, {"eval", c.splits.eval}}},
      {"model",
       {{"vocab_size", c.model.vocab_size},
        {"d_model", c.model.d_model},
        {"n_layers", c.model.n_layers},
        {"n_heads", c.model.n_heads},
        {"max_seq_len", c.model.max_seq_len},
        {"d_ff", c.model.d_ff}}},
      {"lora",
       {{"rank", c.lora.rank},
        {"alpha", c.lora.alpha},
        {"dropout", c.lora.dropout},
        {"maps", maps},
        {"adapt_policy", c.placement.adapt_policy},
        {"adapt_value", c.placement.adapt_value}}},
      {"sft",
       {{"steps", c.sft.steps},
        {"batch_size", c.sft.batch_size},
        {"learning_rate", c.sft.learning_rate}}},
      {"rm",
       {{"pairs", c.rm.pairs},
        {"epochs", c.rm.epochs},
        {"batch_size", c.rm.batch_size},
        {"learning_rate", c.rm.learning_rate},
        {"heldout_fraction", c.rm.heldout_fraction},
        {"sample_temperature", c.rm.sample_temperature}}},
      {"ppo",
       {{"beta", c.ppo.beta},
        {"clip_epsilon", c.ppo.clip_epsilon},
        {"rollout_batch", c.ppo.rollout_batch},
        {"update_batch", c.ppo.update_batch},
        {"epochs", c.ppo.epochs},
        {"gamma", c.ppo.gamma},
        {"lambda", c.ppo.lambda},
        {"value_loss_weight", c.ppo.value_loss_weight},
        {"divergence", divergence_name(c.ppo.divergence)},
        {"total_steps", c.ppo.total_steps},
        {"whiten_advantages", c.ppo.whiten_advantages},
        {"learning_rate", c.ppo.learning_rate},
        {"value_learning_rate", c.ppo.value_learning_rate},
        {"max_grad_norm", c.ppo.max_grad_norm},
        {"max_new_tokens", c.ppo.max_new_tokens},
        {"temperature", c.ppo.temperature},
        {"kl_monitor_examples", c.ppo.kl_monitor_examples},
        {"js_full_rows", c.ppo.js_full_rows}}},
      {"eval",
       {{"interval", c.eval.interval},
        {"bootstrap", c.eval.bootstrap},
        {"kl_samples", c.eval.kl_samples}}},
  };
  if (!c.preset.empty()) j["preset"] = c.preset;
  return j;
}

LabConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace lab
