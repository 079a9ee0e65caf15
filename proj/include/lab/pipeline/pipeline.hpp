#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "lab/pipeline/checkpoint.hpp"
#include "lab/pipeline/config.hpp"
#include "lab/pipeline/reward_model.hpp"
#include "lab/ppo/ppo.hpp"
#include "lab/tasks/tasks.hpp"

namespace lab {

// Supervised fine-tuning

// Negative mean log-likelihood of the response tokens only. `logprobs` is the
// [batch*seq x V] output of forward_logprobs on rows.batch.
Tensor masked_nll(const Tensor& logprobs, const ResponseRows& rows);

struct SftReport {
  std::vector<double> losses;
  double final_loss = 0.0;
};

// Teacher-forced cross-entropy on gold responses with prompt positions masked.
// Minibatches are drawn with replacement from `episodes`.
SftReport train_sft(PolicyModel& model, const std::vector<Episode>& episodes,
                    const SftConfig& config, Rng& rng);

// Evaluation

struct WinRate {
  double rate = 0.0;
  double standard_error = 0.0;
  std::size_t wins = 0, ties = 0, losses = 0;
};

std::vector<std::vector<int>> greedy_responses(const PolicyModel& model,
                                               const std::vector<Episode>& episodes,
                                               std::size_t max_new);
double mean_oracle_score(const std::vector<Episode>& episodes,
                         const std::vector<std::vector<int>>& responses);
// Bootstrap standard error of the mean of `outcomes`.
double bootstrap_standard_error(std::span<const double> outcomes, std::size_t resamples,
                                Rng& rng);
// Win = 1, tie = 0.5, loss = 0 per episode.
WinRate winrate_from_scores(std::span<const double> scores_a, std::span<const double> scores_b,
                            std::size_t resamples, Rng& rng);
// Both models decode greedily; the oracle judges.
WinRate evaluate_winrate(const PolicyModel& a, const PolicyModel& b,
                         const std::vector<Episode>& episodes, std::size_t max_new,
                         std::size_t resamples, Rng& rng);

// Metrics stream

nlohmann::json metrics_to_json(const MetricsRecord& record);
MetricsRecord metrics_from_json(const nlohmann::json& j);
std::vector<MetricsRecord> read_metrics_jsonl(std::istream& in);
std::vector<MetricsRecord> read_metrics_file(const std::filesystem::path& path);
// Every field except wall_clock.
bool same_metrics(const MetricsRecord& a, const MetricsRecord& b);

// Analysis

std::optional<double> pearson(std::span<const double> x, std::span<const double> y);

struct WinRateKlRow {
  long step = 0;
  double kl = 0.0;
  double win_rate = 0.0;
  double win_rate_se = 0.0;
};

struct RunAnalysis {
  std::optional<double> sqrt_kl_reward;  // empty when undefined
  std::optional<double> kl_length;
  std::size_t window_records = 0;
  std::vector<WinRateKlRow> winrate_vs_kl;
};

// Correlations over records with step <= max_step. Needs at least 10 records.
RunAnalysis analyze_run(const std::vector<MetricsRecord>& records, long max_step = 100);
std::string analysis_report(const RunAnalysis& analysis);
std::string plot_csv(const std::vector<MetricsRecord>& records);

// Runs

// Exclusive ownership of an output directory for the lifetime of the object.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

RewardFn oracle_reward();
RewardFn learned_reward(std::shared_ptr<const RewardModel> model);

struct PpoRunResult {
  std::vector<MetricsRecord> metrics;
  PolicyModel policy;
  ValueModel value;
  std::uint64_t reference_hash_before = 0;
  std::uint64_t reference_hash_after = 0;
};

using MetricsCallback = std::function<void(const MetricsRecord&)>;

// PPO from the SFT policy. Records steps 0..total_steps; record s holds the
// rollout of the policy after s updates, and evaluation fields every
// eval.interval steps. With an output directory, metrics.jsonl is appended
// each step and adapter checkpoints are written at each evaluation.
PpoRunResult run_ppo(const PolicyModel& sft, const RewardFn& reward, const Splits& data,
                     const LabConfig& config,
                     const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                     const MetricsCallback& on_record = {});

// Stage helpers shared by the CLI and the full pipeline.
Splits generate_data(const LabConfig& config);
PolicyModel initial_policy(const LabConfig& config);
PreferenceSet sample_preferences(const PolicyModel& sft, const std::vector<Episode>& episodes,
                                 const LabConfig& config);
RewardModel initial_reward_model(const PolicyModel& sft);

struct PipelineResult {
  SftReport sft;
  std::optional<RewardModelReport> rm;
  PpoRunResult ppo;
};

// Data -> SFT -> reward model -> PPO. PPO is rewarded by the oracle or the
// learned model according to reward_source.
PipelineResult run_pipeline(const LabConfig& config,
                            const std::optional<std::filesystem::path>& out_dir = std::nullopt);

}  // namespace lab
