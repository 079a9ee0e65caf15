#include "lab/pipeline/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "lab/model/sampling.hpp"
#include "lab/numcore/adam.hpp"
#include "lab/numcore/errors.hpp"
#include "lab/numcore/ops.hpp"
#include "lab/numcore/parallel.hpp"

namespace lab {

namespace {

using nlohmann::json;

// Fixed stream ids so each stage draws from its own sequence.
enum Stream : std::uint64_t {
  kInitStream = 1,
  kSftStream = 2,
  kPreferenceStream = 3,
  kRewardStream = 4,
  kPpoStream = 5,
  kEvalStream = 6,
  kEvalKlStream = 7,
};

TaskKind kind_of(const std::vector<int>& prompt) {
  if (prompt.size() < 2 || prompt[1] < tokens::kFirstMarker ||
      prompt[1] >= tokens::kFirstContent) {
    throw InputError("prompt carries no task marker");
  }
  return static_cast<TaskKind>(prompt[1] - tokens::kFirstMarker);
}

std::vector<std::vector<int>> prompts_of(const std::vector<Episode>& episodes) {
  std::vector<std::vector<int>> out;
  out.reserve(episodes.size());
  for (const auto& e : episodes) out.push_back(e.prompt);
  return out;
}

std::optional<double> optional_number(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace

Tensor masked_nll(const Tensor& logprobs, const ResponseRows& rows) {
  return scale(mean(gather_columns(select_rows(logprobs, rows.rows), rows.targets)), -1.0f);
}

SftReport train_sft(PolicyModel& model, const std::vector<Episode>& episodes,
                    const SftConfig& config, Rng& rng) {
  if (episodes.empty()) throw InputError("train_sft: no episodes");
  Adam opt({config.learning_rate, 0.9f, 0.999f, 1e-8f, 1.0f});
  for (auto& p : model.trainable_parameters()) opt.add_parameter(p.name, p.tensor);
  if (opt.slots().empty()) throw ConfigError("train_sft: model has no trainable parameters");
  SftReport report;
  for (std::size_t step = 0; step < config.steps; ++step) {
    std::vector<std::vector<int>> prompts, golds;
    for (std::size_t i = 0; i < config.batch_size; ++i) {
      const Episode& e = episodes[rng.below(episodes.size())];
      prompts.push_back(e.prompt);
      golds.push_back(e.gold);
    }
    const ResponseRows rows = response_rows(prompts, golds, model.config().pad_token);
    try {
      opt.zero_grad();
      const Tensor loss = masked_nll(model.forward_logprobs(rows.batch), rows);
      loss.backward();
      opt.step();
      report.losses.push_back(loss.item());
    } catch (const TrainingDivergence& e) {
      throw TrainingDivergence("sft step " + std::to_string(step) + ": " + e.what());
    }
  }
  opt.zero_grad();
  report.final_loss = report.losses.empty() ? 0.0 : report.losses.back();
  return report;
}

std::vector<std::vector<int>> greedy_responses(const PolicyModel& model,
                                               const std::vector<Episode>& episodes,
                                               std::size_t max_new) {
  NoGradGuard no_grad;
  std::vector<std::vector<int>> out(episodes.size());
  const SampleOptions options{max_new, 1.0f, true};
  parallel_for(episodes.size(), [&](std::size_t i) {
    Rng unused(0);
    out[i] = sample_response(model, episodes[i].prompt, unused, options).tokens;
  });
  return out;
}

double mean_oracle_score(const std::vector<Episode>& episodes,
                         const std::vector<std::vector<int>>& responses) {
  if (episodes.empty() || episodes.size() != responses.size()) {
    throw InputError("mean_oracle_score: episode and response counts differ or are zero");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < episodes.size(); ++i) total += oracle_score(episodes[i], responses[i]);
  return total / static_cast<double>(episodes.size());
}

double bootstrap_standard_error(std::span<const double> outcomes, std::size_t resamples,
                                Rng& rng) {
  if (outcomes.empty()) throw InputError("bootstrap: no outcomes");
  if (resamples < 2) throw InputError("bootstrap: need at least 2 resamples");
  const std::size_t n = outcomes.size();
  double mean = 0.0, m2 = 0.0;
  for (std::size_t r = 1; r <= resamples; ++r) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += outcomes[rng.below(n)];
    const double value = total / static_cast<double>(n);
    const double delta = value - mean;
    mean += delta / static_cast<double>(r);
    m2 += delta * (value - mean);
  }
  return std::sqrt(m2 / static_cast<double>(resamples - 1));
}

WinRate winrate_from_scores(std::span<const double> scores_a, std::span<const double> scores_b,
                            std::size_t resamples, Rng& rng) {
  if (scores_a.empty()) throw InputError("win rate: empty evaluation set");
  if (scores_a.size() != scores_b.size()) {
    throw InputError("win rate: score lists differ in length");
  }
  WinRate w;
  std::vector<double> outcomes(scores_a.size());
  for (std::size_t i = 0; i < scores_a.size(); ++i) {
    if (scores_a[i] > scores_b[i]) {
      ++w.wins;
      outcomes[i] = 1.0;
    } else if (scores_a[i] < scores_b[i]) {
      ++w.losses;
      outcomes[i] = 0.0;
    } else {
      ++w.ties;
      outcomes[i] = 0.5;
    }
  }
  // Counted in half points so that rate(a, b) + rate(b, a) == 1 exactly.
  const double half_points = static_cast<double>(2 * w.wins + w.ties);
  w.rate = half_points / static_cast<double>(2 * scores_a.size());
  w.standard_error = bootstrap_standard_error(outcomes, resamples, rng);
  return w;
}

WinRate evaluate_winrate(const PolicyModel& a, const PolicyModel& b,
                         const std::vector<Episode>& episodes, std::size_t max_new,
                         std::size_t resamples, Rng& rng) {
  if (episodes.empty()) throw InputError("win rate: empty evaluation set");
  const auto ra = greedy_responses(a, episodes, max_new);
  const auto rb = greedy_responses(b, episodes, max_new);
  std::vector<double> sa(episodes.size()), sb(episodes.size());
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    sa[i] = oracle_score(episodes[i], ra[i]);
    sb[i] = oracle_score(episodes[i], rb[i]);
  }
  return winrate_from_scores(sa, sb, resamples, rng);
}

json metrics_to_json(const MetricsRecord& r) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"step", r.step},
          {"mean_reward", r.mean_reward},
          {"kl", r.kl},
          {"estimator_mean", r.estimator_mean},
          {"response_length", r.response_length},
          {"win_rate", opt(r.win_rate)},
          {"win_rate_se", opt(r.win_rate_se)},
          {"eval_kl", opt(r.eval_kl)},
          {"eval_reward", opt(r.eval_reward)},
          {"policy_loss", r.policy_loss},
          {"value_loss", r.value_loss},
          {"clip_fraction", r.clip_fraction},
          {"dropped", r.dropped},
          {"optimizer_updates", r.optimizer_updates},
          {"wall_clock", r.wall_clock}};
}

MetricsRecord metrics_from_json(const json& j) {
  MetricsRecord r;
  r.step = j.at("step").get<long>();
  r.mean_reward = j.at("mean_reward").get<double>();
  r.kl = j.at("kl").get<double>();
  r.estimator_mean = j.at("estimator_mean").get<double>();
  r.response_length = j.at("response_length").get<double>();
  r.win_rate = optional_number(j, "win_rate");
  r.win_rate_se = optional_number(j, "win_rate_se");
  r.eval_kl = optional_number(j, "eval_kl");
  r.eval_reward = optional_number(j, "eval_reward");
  r.policy_loss = j.at("policy_loss").get<double>();
  r.value_loss = j.at("value_loss").get<double>();
  r.clip_fraction = j.at("clip_fraction").get<double>();
  r.dropped = j.at("dropped").get<std::size_t>();
  r.optimizer_updates = j.at("optimizer_updates").get<long>();
  r.wall_clock = j.at("wall_clock").get<double>();
  return r;
}

std::vector<MetricsRecord> read_metrics_jsonl(std::istream& in) {
  std::vector<MetricsRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(metrics_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw InputError("metrics record " + std::to_string(line_no) + ": " + e.what());
    }
    if (out.size() > 1 && out.back().step <= out[out.size() - 2].step) {
      throw InputError("metrics record " + std::to_string(line_no) +
                       ": step does not increase");
    }
  }
  return out;
}

std::vector<MetricsRecord> read_metrics_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics file " + path.string());
  return read_metrics_jsonl(in);
}

bool same_metrics(const MetricsRecord& a, const MetricsRecord& b) {
  json ja = metrics_to_json(a), jb = metrics_to_json(b);
  ja.erase("wall_clock");
  jb.erase("wall_clock");
  return ja == jb;
}

std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw InputError("pearson: series differ in length");
  const std::size_t n = x.size();
  if (n < 2) return std::nullopt;
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  const bool x_constant = std::all_of(x.begin(), x.end(), [&](double v) { return v == x[0]; });
  const bool y_constant = std::all_of(y.begin(), y.end(), [&](double v) { return v == y[0]; });
  if (x_constant || y_constant || sxx <= 0.0 || syy <= 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

RunAnalysis analyze_run(const std::vector<MetricsRecord>& records, long max_step) {
  if (records.size() < 10) {
    throw InputError("analyze_run: need at least 10 metric records, got " +
                     std::to_string(records.size()));
  }
  RunAnalysis a;
  std::vector<double> sqrt_kl, kl, reward, length;
  for (const auto& r : records) {
    if (r.win_rate) {
      a.winrate_vs_kl.push_back(
          {r.step, r.eval_kl.value_or(r.kl), *r.win_rate, r.win_rate_se.value_or(0.0)});
    }
    if (r.step > max_step) continue;
    sqrt_kl.push_back(std::sqrt(std::max(r.kl, 0.0)));
    kl.push_back(r.kl);
    reward.push_back(r.mean_reward);
    length.push_back(r.response_length);
  }
  a.window_records = kl.size();
  a.sqrt_kl_reward = pearson(sqrt_kl, reward);
  a.kl_length = pearson(kl, length);
  return a;
}

std::string analysis_report(const RunAnalysis& a) {
  std::ostringstream out;
  auto show = [](const std::optional<double>& v) {
    if (!v) return std::string("undefined");
    std::ostringstream s;
    s << std::fixed << std::setprecision(4) << *v;
    return s.str();
  };
  out << "records_in_window " << a.window_records << '\n';
  out << "pearson_sqrt_kl_reward " << show(a.sqrt_kl_reward) << '\n';
  out << "pearson_kl_length " << show(a.kl_length) << '\n';
  out << "step,kl,win_rate,win_rate_se\n";
  for (const auto& row : a.winrate_vs_kl) {
    out << row.step << ',' << row.kl << ',' << row.win_rate << ',' << row.win_rate_se << '\n';
  }
  return out.str();
}

std::string plot_csv(const std::vector<MetricsRecord>& records) {
  std::ostringstream out;
  out << std::setprecision(10);
  out << "step,mean_reward,kl,sqrt_kl,estimator_mean,response_length,win_rate,eval_kl,"
         "eval_reward\n";
  auto opt = [](const std::optional<double>& v) {
    if (!v) return std::string();
    std::ostringstream s;
    s << std::setprecision(10) << *v;
    return s.str();
  };
  for (const auto& r : records) {
    out << r.step << ',' << r.mean_reward << ',' << r.kl << ',' << std::sqrt(std::max(r.kl, 0.0))
        << ',' << r.estimator_mean << ',' << r.response_length << ',' << opt(r.win_rate) << ','
        << opt(r.eval_kl) << ',' << opt(r.eval_reward) << '\n';
  }
  return out.str();
}

RunLock::RunLock(const std::filesystem::path& dir) : path_(dir / ".lock") {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string());
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    throw IoError("output directory " + dir.string() + " is locked by another run (" +
                  path_.string() + ")");
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] const auto written = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

RunLock::~RunLock() {
  std::error_code ec;
  std::filesystem::remove(path_, ec);
}

RewardFn oracle_reward() {
  return [](const std::vector<int>& prompt, const std::vector<int>& response) {
    return oracle_score(kind_of(prompt), prompt, response);
  };
}

RewardFn learned_reward(std::shared_ptr<const RewardModel> model) {
  return [model = std::move(model)](const std::vector<int>& prompt,
                                    const std::vector<int>& response) {
    return model->score(prompt, response);
  };
}

PpoRunResult run_ppo(const PolicyModel& sft, const RewardFn& reward, const Splits& data,
                     const LabConfig& config, const std::optional<std::filesystem::path>& out_dir,
                     const MetricsCallback& on_record) {
  config.validate();
  if (data.ppo.empty() || data.eval.empty()) throw InputError("run_ppo: empty ppo or eval split");
  Rng rng(config.seed, kPpoStream);
  Rng init = rng.fork(0);

  PolicyModel reference = sft.clone();
  reference.set_base_trainable(false);
  const std::uint64_t sft_hash = parameters_hash(sft.parameters());

  PolicyModel policy = sft.clone();
  if (config.placement.adapt_policy) {
    policy.set_base_trainable(false);
    policy.trunk().attach_adapters(config.lora, config.placement, init);
  } else {
    policy.set_base_trainable(true);
  }
  ValueModel value(sft.trunk().clone());
  if (config.placement.adapt_value) {
    value.set_base_trainable(false);
    value.trunk().attach_adapters(config.lora, config.placement, init);
  } else {
    value.set_base_trainable(true);
  }
  value.set_head_trainable(true);

  PpoRunResult result{{}, policy, value, parameters_hash(reference.parameters()), 0};
  PPOTrainer trainer(result.policy, result.value, reference, reward, config.ppo);

  std::ofstream metrics_out;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir / "checkpoints");
    metrics_out.open(*out_dir / "metrics.jsonl", std::ios::trunc);
    if (!metrics_out) throw IoError("cannot write " + (*out_dir / "metrics.jsonl").string());
  }

  const auto eval_prompts = prompts_of(data.eval);
  std::vector<std::vector<int>> kl_prompts;
  for (std::size_t i = 0; i < config.eval.kl_samples; ++i) {
    kl_prompts.push_back(eval_prompts[i % eval_prompts.size()]);
  }
  const SampleOptions kl_sampling{config.ppo.max_new_tokens, config.ppo.temperature, false};
  const auto sft_greedy = greedy_responses(sft, data.eval, config.ppo.max_new_tokens);
  std::vector<double> sft_scores(data.eval.size());
  for (std::size_t i = 0; i < data.eval.size(); ++i) {
    sft_scores[i] = oracle_score(data.eval[i], sft_greedy[i]);
  }

  auto evaluate = [&](MetricsRecord& m, long step) {
    const auto responses = greedy_responses(result.policy, data.eval, config.ppo.max_new_tokens);
    std::vector<double> scores(data.eval.size());
    for (std::size_t i = 0; i < data.eval.size(); ++i) {
      scores[i] = oracle_score(data.eval[i], responses[i]);
    }
    Rng boot = Rng(config.seed, kEvalStream).fork(static_cast<std::uint64_t>(step));
    const WinRate w = winrate_from_scores(scores, sft_scores, config.eval.bootstrap, boot);
    m.win_rate = w.rate;
    m.win_rate_se = w.standard_error;
    m.eval_reward = mean_oracle_score(data.eval, responses);
    m.eval_kl = sampled_exact_kl(result.policy, reference, kl_prompts,
                                 Rng(config.seed, kEvalKlStream), kl_sampling);
    if (out_dir) {
      std::ostringstream name;
      name << "step_" << std::setw(4) << std::setfill('0') << step << ".adapter";
      if (result.policy.trunk().has_adapters()) {
        save_checkpoint(*out_dir / "checkpoints" / name.str(),
                        snapshot_adapters(result.policy, sft_hash, "ppo", step, config.seed));
      }
    }
  };

  auto emit = [&](const MetricsRecord& m) {
    result.metrics.push_back(m);
    if (metrics_out.is_open()) {
      metrics_out << metrics_to_json(m).dump() << '\n';
      metrics_out.flush();
    }
    if (on_record) on_record(m);
  };

  const std::size_t rollout = config.ppo.rollout_batch;
  auto step_prompts = [&](std::size_t step) {
    std::vector<std::vector<int>> p(rollout);
    for (std::size_t i = 0; i < rollout; ++i) {
      p[i] = data.ppo[(step * rollout + i) % data.ppo.size()].prompt;
    }
    return p;
  };

  const std::size_t total = config.ppo.total_steps;
  for (std::size_t s = 0; s <= total; ++s) {
    // Evaluation sees the same policy as the rollout, before this step's update.
    MetricsRecord evaluated;
    const bool eval_step = s % config.eval.interval == 0 || s == total;
    if (eval_step) evaluate(evaluated, static_cast<long>(s));
    MetricsRecord m = s < total ? trainer.step(step_prompts(s), rng)
                                : trainer.measure(step_prompts(s), rng);
    m.step = static_cast<long>(s);
    if (eval_step) {
      m.win_rate = evaluated.win_rate;
      m.win_rate_se = evaluated.win_rate_se;
      m.eval_reward = evaluated.eval_reward;
      m.eval_kl = evaluated.eval_kl;
    }
    emit(m);
  }
  result.reference_hash_after = parameters_hash(reference.parameters());
  return result;
}

Splits generate_data(const LabConfig& config) {
  TaskSpec spec = config.task;
  spec.seed = config.seed;
  return generate_split(spec, config.splits);
}

PolicyModel initial_policy(const LabConfig& config) {
  Rng rng(config.seed, kInitStream);
  return PolicyModel(config.model, rng);
}

PreferenceSet sample_preferences(const PolicyModel& sft, const std::vector<Episode>& episodes,
                                 const LabConfig& config) {
  const SampleOptions options{config.ppo.max_new_tokens, config.rm.sample_temperature, false};
  const ResponseSampler sampler = [&sft, options](const std::vector<int>& prompt, Rng& rng) {
    NoGradGuard no_grad;
    return sample_response(sft, prompt, rng, options).tokens;
  };
  return make_preferences(episodes, sampler, config.rm.pairs, Rng(config.seed, kPreferenceStream));
}

RewardModel initial_reward_model(const PolicyModel& sft) {
  RewardModel rm(sft.trunk().clone());
  return rm;
}

PipelineResult run_pipeline(const LabConfig& config,
                            const std::optional<std::filesystem::path>& out_dir) {
  config.validate();
  const Splits data = generate_data(config);
  PolicyModel sft = initial_policy(config);
  Rng sft_rng(config.seed, kSftStream);
  SftReport sft_report = train_sft(sft, data.sft, config.sft, sft_rng);
  sft.set_base_trainable(false);

  const PreferenceSet prefs = sample_preferences(sft, data.rm, config);
  auto rm = std::make_shared<RewardModel>(initial_reward_model(sft));
  Rng rm_rng(config.seed, kRewardStream);
  RewardModelReport rm_report = train_reward_model(*rm, prefs.pairs, config.rm, rm_rng);

  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    save_checkpoint(*out_dir / "sft.ckpt", snapshot_policy(sft, "sft", 0, config.seed));
    save_checkpoint(*out_dir / "rm.ckpt", snapshot_reward(*rm, "rm", config.seed));
  }
  const RewardFn reward = config.reward_source == "learned" ? learned_reward(rm) : oracle_reward();
  PpoRunResult ppo = run_ppo(sft, reward, data, config, out_dir);
  return {std::move(sft_report), std::move(rm_report), std::move(ppo)};
}

}  // namespace lab
