#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lab/divergence/divergence.hpp"
#include "lab/model/sampling.hpp"
#include "lab/model/transformer.hpp"
#include "lab/numcore/adam.hpp"
#include "lab/numcore/rng.hpp"
#include "lab/numcore/tensor.hpp"

namespace lab {

struct PPOConfig {
  double beta = 0.02;
  double clip_epsilon = 0.2;
  std::size_t rollout_batch = 256;
  std::size_t update_batch = 128;
  std::size_t epochs = 1;
  double gamma = 1.0;
  double lambda = 0.95;
  double value_loss_weight = 1.0;
  DivergenceKind divergence = DivergenceKind::kClampedKL;
  std::size_t total_steps = 200;
  bool whiten_advantages = true;
  float learning_rate = 1e-3f;
  float value_learning_rate = 1e-3f;
  float max_grad_norm = 1.0f;
  std::size_t max_new_tokens = 16;
  float temperature = 1.0f;
  // Examples of each rollout whose exact KL is monitored; 0 means all.
  std::size_t kl_monitor_examples = 0;
  bool js_full_rows = false;
  // Fraction of failed reward calls above which a step is aborted.
  double max_drop_fraction = 0.1;

  void validate() const;
};

// Scores one (prompt, response) pair. Throwing or returning a non-finite
// value drops the example.
using RewardFn =
    std::function<double(const std::vector<int>& prompt, const std::vector<int>& response)>;

struct RolloutExample {
  std::vector<int> prompt;
  std::vector<int> response;
  std::vector<float> logp_old;
  std::vector<float> logp_ref;
  std::vector<float> values;
  double reward = 0.0;
  std::vector<double> kl_terms;
  std::vector<double> shaped_rewards;
  std::vector<double> advantages;
  std::vector<double> returns;
  double exact_kl_sum = 0.0;  // sum over tokens of exact per-token KL
};

struct RolloutBatch {
  std::vector<RolloutExample> examples;
  std::size_t dropped = 0;
  std::size_t monitored_tokens = 0;
  double monitored_kl_sum = 0.0;

  std::size_t token_count() const;
  // FNV-1a over the stored old-policy and reference log-probabilities.
  std::uint64_t snapshot_checksum() const;
};

// Per-token rewards: -beta * kl everywhere, plus the scalar reward on the
// last token.
std::vector<double> shape_rewards(double scalar_reward, std::span<const double> kl_terms,
                                  double beta);

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

// Generalized advantage estimation with a zero bootstrap after the last token.
GaeResult gae(std::span<const double> rewards, std::span<const double> values, double gamma,
              double lambda);

// Negated clipped surrogate objective averaged over tokens. Differentiable in
// logp_new only.
Tensor surrogate_loss(const Tensor& logp_new, std::span<const float> logp_old,
                      std::span<const float> advantages, double clip_epsilon);

// 0.5 * mean((values - returns)^2).
Tensor value_loss(const Tensor& values, std::span<const float> returns);

struct MetricsRecord {
  long step = 0;
  double mean_reward = 0.0;
  double kl = 0.0;              // exact per-token KL on the monitored subsample
  double estimator_mean = 0.0;  // mean per-token penalty estimate
  double response_length = 0.0;
  std::optional<double> win_rate;
  std::optional<double> win_rate_se;
  std::optional<double> eval_kl;
  std::optional<double> eval_reward;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double clip_fraction = 0.0;
  std::size_t dropped = 0;
  long optimizer_updates = 0;
  double wall_clock = 0.0;  // seconds
};

struct OptimizeStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double clip_fraction = 0.0;
  long updates = 0;
};

// Owns the optimizers for one policy/value pair. The reference policy is
// only read.
class PPOTrainer {
 public:
  PPOTrainer(PolicyModel& policy, ValueModel& value, const PolicyModel& reference,
             RewardFn reward, PPOConfig config);

  const PPOConfig& config() const noexcept { return config_; }
  // Samples one response per prompt and scores it. Throws TrainingDivergence
  // when too many reward calls fail.
  RolloutBatch collect(const std::vector<std::vector<int>>& prompts, Rng& rng) const;
  OptimizeStats optimize(const RolloutBatch& batch, Rng& rng);
  // collect + optimize; prompts.size() must equal rollout_batch.
  MetricsRecord step(const std::vector<std::vector<int>>& prompts, Rng& rng);
  // Rollout statistics of the current policy without an update.
  MetricsRecord measure(const std::vector<std::vector<int>>& prompts, Rng& rng);

  const Adam& policy_optimizer() const noexcept { return policy_opt_; }
  const Adam& value_optimizer() const noexcept { return value_opt_; }
  long steps_taken() const noexcept { return steps_; }

 private:
  MetricsRecord summarize(const RolloutBatch& batch) const;
  OptimizeStats optimize_minibatch(const RolloutBatch& batch,
                                   std::span<const std::size_t> members, Rng& rng);

  PolicyModel& policy_;
  ValueModel& value_;
  const PolicyModel& reference_;
  RewardFn reward_;
  PPOConfig config_;
  Adam policy_opt_;
  Adam value_opt_;
  long steps_ = 0;
};

// Rows of a packed prompt+response batch whose log-distribution predicts a
// response token, in example-major order.
struct ResponseRows {
  TokenBatch batch;
  std::vector<std::size_t> rows;
  std::vector<int> targets;
};
ResponseRows response_rows(const std::vector<const RolloutExample*>& examples, int pad_token);
ResponseRows response_rows(const std::vector<std::vector<int>>& prompts,
                           const std::vector<std::vector<int>>& responses, int pad_token);

// Mean exact per-token KL(policy || reference) over responses sampled from
// the policy, one per prompt; sample i uses rng.fork(i).
double sampled_exact_kl(const PolicyModel& policy, const PolicyModel& reference,
                        const std::vector<std::vector<int>>& prompts, const Rng& rng,
                        const SampleOptions& options);

}  // namespace lab
