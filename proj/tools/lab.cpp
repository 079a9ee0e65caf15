// Command-line front end for the toy RLHF pipeline.

#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "CLI11.hpp"
#include "lab/divergence/divergence.hpp"
#include "lab/numcore/errors.hpp"
#include "lab/pipeline/pipeline.hpp"

namespace {

using namespace lab;

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
};

LabConfig resolve_config(const Globals& g) {
  LabConfig config = g.config_path.empty() ? LabConfig{} : load_config(g.config_path);
  if (g.seed) {
    config.seed = *g.seed;
    config.task.seed = *g.seed;
  }
  config.validate();
  return config;
}

std::filesystem::path out_dir(const Globals& g) {
  std::filesystem::path dir(g.out);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string());
  return dir;
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

PolicyModel load_policy(const std::string& path, const std::string& base) {
  const Checkpoint c = load_checkpoint(path);
  if (c.kind == "adapter") {
    if (base.empty()) throw ConfigError(path + " holds adapters only; pass --base");
    return apply_adapter_checkpoint(load_checkpoint(base), c);
  }
  return policy_from_checkpoint(c);
}

void cmd_gen_data(const Globals& g) {
  const LabConfig config = resolve_config(g);
  const auto dir = out_dir(g);
  const Splits data = generate_data(config);
  const std::pair<const char*, const std::vector<Episode>*> parts[] = {
      {"sft", &data.sft}, {"rm", &data.rm}, {"ppo", &data.ppo}, {"eval", &data.eval}};
  for (const auto& [name, episodes] : parts) {
    const auto path = dir / (std::string(name) + ".jsonl");
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    write_episodes_jsonl(out, *episodes);
    std::cout << name << ' ' << episodes->size() << " episodes -> " << path.string() << '\n';
  }
  write_json(dir / "config.json", config_to_json(config));
}

void cmd_train_sft(const Globals& g) {
  const LabConfig config = resolve_config(g);
  const auto dir = out_dir(g);
  RunLock lock(dir);
  const Splits data = generate_data(config);
  PolicyModel model = initial_policy(config);
  Rng rng(config.seed, 2);
  const SftReport report = train_sft(model, data.sft, config.sft, rng);
  model.set_base_trainable(false);
  save_checkpoint(dir / "sft.ckpt", snapshot_policy(model, "sft", config.sft.steps, config.seed));
  const double score = mean_oracle_score(data.eval, greedy_responses(model, data.eval,
                                                                     config.ppo.max_new_tokens));
  std::cout << "final_loss " << report.final_loss << "\neval_oracle_score " << score << '\n';
}

void cmd_train_rm(const Globals& g, const std::string& sft_path) {
  const LabConfig config = resolve_config(g);
  const auto dir = out_dir(g);
  RunLock lock(dir);
  const Splits data = generate_data(config);
  const PolicyModel sft = policy_from_checkpoint(load_checkpoint(sft_path));
  const PreferenceSet prefs = sample_preferences(sft, data.rm, config);
  RewardModel rm = initial_reward_model(sft);
  Rng rng(config.seed, 4);
  const RewardModelReport report = train_reward_model(rm, prefs.pairs, config.rm, rng);
  save_checkpoint(dir / "rm.ckpt", snapshot_reward(rm, "rm", config.seed));
  std::cout << "pairs " << prefs.pairs.size() << " (skipped " << prefs.skipped << ")\n";
  for (std::size_t e = 0; e < report.epoch_losses.size(); ++e) {
    std::cout << "epoch " << e << " loss " << report.epoch_losses[e] << '\n';
  }
  std::cout << "heldout_accuracy " << report.heldout_accuracy << '\n';
}

void cmd_train_ppo(const Globals& g, const std::string& sft_path, const std::string& rm_path) {
  LabConfig config = resolve_config(g);
  const auto dir = out_dir(g);
  RunLock lock(dir);
  const Splits data = generate_data(config);
  const PolicyModel sft = policy_from_checkpoint(load_checkpoint(sft_path));
  RewardFn reward = oracle_reward();
  if (config.reward_source == "learned") {
    if (rm_path.empty()) throw ConfigError("reward_source is \"learned\"; pass --rm");
    reward = learned_reward(
        std::make_shared<const RewardModel>(reward_from_checkpoint(load_checkpoint(rm_path))));
  }
  write_json(dir / "config.json", config_to_json(config));
  const auto start = std::chrono::steady_clock::now();
  run_ppo(sft, reward, data, config, dir, [&](const MetricsRecord& m) {
    std::cout << "step " << m.step << " reward " << std::fixed << std::setprecision(4)
              << m.mean_reward << " kl " << m.kl << " length " << m.response_length;
    if (m.win_rate) std::cout << " win_rate " << *m.win_rate << " eval_kl " << *m.eval_kl;
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cout << " t " << std::setprecision(1) << secs << "s\n" << std::defaultfloat;
  });
}

void cmd_eval(const Globals& g, const std::string& a, const std::string& b,
              const std::string& base) {
  const LabConfig config = resolve_config(g);
  const Splits data = generate_data(config);
  const PolicyModel model_a = load_policy(a, base);
  const PolicyModel model_b = load_policy(b, base);
  Rng rng(config.seed, 6);
  const WinRate w = evaluate_winrate(model_a, model_b, data.eval, config.ppo.max_new_tokens,
                                     config.eval.bootstrap, rng);
  std::cout << "win_rate " << w.rate << "\nstandard_error " << w.standard_error << "\nwins "
            << w.wins << "\nties " << w.ties << "\nlosses " << w.losses << '\n';
}

void cmd_calibrate(const Globals& g, std::size_t pairs, std::size_t samples,
                   const std::string& family_name) {
  const LabConfig config = resolve_config(g);
  PairFamily family = PairFamily::kRandom;
  if (family_name == "nearby") {
    family = PairFamily::kNearby;
  } else if (family_name == "peaked") {
    family = PairFamily::kPeakedFlat;
  } else if (family_name != "random") {
    throw ConfigError("unknown pair family '" + family_name + "'");
  }
  Rng rng(config.seed, 8);
  std::cout << calibration_csv_header() << '\n';
  for (std::size_t i = 0; i < pairs; ++i) {
    Rng pair_rng = rng.fork(i);
    const DistributionPair pair = make_pair(family, config.model.vocab_size, pair_rng);
    for (DivergenceKind kind : all_divergence_kinds()) {
      Rng draw = pair_rng.fork(static_cast<std::uint64_t>(kind) + 1);
      std::cout << calibration_csv_row(calibrate(kind, pair, samples, draw)) << '\n';
    }
  }
}

void cmd_analyze(const std::string& metrics, long max_step) {
  std::cout << analysis_report(analyze_run(read_metrics_file(metrics), max_step));
}

void cmd_plot(const std::string& metrics, const std::string& csv) {
  const std::string text = plot_csv(read_metrics_file(metrics));
  if (csv.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream out(csv);
  if (!out) throw IoError("cannot write " + csv);
  out << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Toy RLHF laboratory: SFT, reward modelling and PPO with KL regularizers"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "JSON configuration file");
  app.add_option("--seed", g.seed, "Master seed (overrides the config)");
  app.add_option("--out", g.out, "Output directory")->capture_default_str();

  std::string sft_path, rm_path, a_path, b_path, base_path, metrics_path, csv_path;
  std::size_t pairs = 50, samples = 100000;
  std::string family = "random";
  long max_step = 100;

  auto* gen = app.add_subcommand("gen-data", "Write the four episode splits as JSONL");
  auto* sft = app.add_subcommand("train-sft", "Supervised fine-tuning; writes sft.ckpt");
  auto* rm = app.add_subcommand("train-rm", "Train the reward model; writes rm.ckpt");
  rm->add_option("--sft", sft_path, "SFT checkpoint")->required();
  auto* ppo = app.add_subcommand("train-ppo", "PPO from an SFT checkpoint");
  ppo->add_option("--sft", sft_path, "SFT checkpoint")->required();
  ppo->add_option("--rm", rm_path, "Reward model checkpoint (learned reward)");
  auto* eval = app.add_subcommand("eval", "Greedy win rate of model A over model B");
  eval->add_option("--a", a_path, "Checkpoint of model A")->required();
  eval->add_option("--b", b_path, "Checkpoint of model B")->required();
  eval->add_option("--base", base_path, "Base checkpoint for adapter-only checkpoints");
  auto* cal = app.add_subcommand("calibrate-estimators", "Monte-Carlo estimator calibration CSV");
  cal->add_option("--pairs", pairs, "Number of distribution pairs")->capture_default_str();
  cal->add_option("--samples", samples, "Draws per pair")->capture_default_str();
  cal->add_option("--family", family, "random, nearby or peaked")->capture_default_str();
  auto* analyze = app.add_subcommand("analyze", "Correlations and win-rate vs KL table");
  analyze->add_option("--metrics", metrics_path, "metrics.jsonl")->required();
  analyze->add_option("--max-step", max_step, "Last step of the correlation window")
      ->capture_default_str();
  auto* plot = app.add_subcommand("plot", "Metrics as CSV for external plotting");
  plot->add_option("--metrics", metrics_path, "metrics.jsonl")->required();
  plot->add_option("--csv", csv_path, "Output file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) cmd_gen_data(g);
    if (sft->parsed()) cmd_train_sft(g);
    if (rm->parsed()) cmd_train_rm(g, sft_path);
    if (ppo->parsed()) cmd_train_ppo(g, sft_path, rm_path);
    if (eval->parsed()) cmd_eval(g, a_path, b_path, base_path);
    if (cal->parsed()) cmd_calibrate(g, pairs, samples, family);
    if (analyze->parsed()) cmd_analyze(metrics_path, max_step);
    if (plot->parsed()) cmd_plot(metrics_path, csv_path);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const TrainingDivergence& e) {
    std::cerr << "training diverged: " << e.what() << '\n';
    return 3;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return 4;
  } catch (const LabError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
