#pragma once

#include <vector>

#include "lab/model/transformer.hpp"
#include "lab/pipeline/checkpoint.hpp"
#include "lab/pipeline/config.hpp"
#include "lab/tasks/tasks.hpp"

namespace lab {

// Transformer trunk with a scalar head read at the last token of
// prompt + response.
class RewardModel {
 public:
  explicit RewardModel(Transformer trunk);  // zero head

  const ModelConfig& config() const noexcept { return trunk_.config(); }
  // One score per sequence -> [n].
  Tensor scores(const std::vector<std::vector<int>>& sequences,
                const ForwardOptions& options = {}) const;
  double score(const std::vector<int>& prompt, const std::vector<int>& response) const;

  std::vector<NamedParameter> parameters() const;
  RewardModel clone() const;

 private:
  Transformer trunk_;
  Tensor head_w_;  // [1 x d]
  Tensor head_b_;  // [1]
};

// mean(log(1 + exp(rejected - chosen))), the pairwise preference loss.
Tensor preference_loss(const Tensor& chosen, const Tensor& rejected);

struct RewardModelReport {
  std::vector<double> epoch_losses;
  double heldout_accuracy = 0.0;
  std::size_t train_pairs = 0;
  std::size_t heldout_pairs = 0;
};

// Splits off the trailing held-out fraction, trains on the rest. Throws
// TrainingDivergence when there are no non-tied pairs.
RewardModelReport train_reward_model(RewardModel& model, const std::vector<PreferencePair>& pairs,
                                     const RewardModelConfig& config, Rng& rng);

double preference_accuracy(const RewardModel& model, const std::vector<PreferencePair>& pairs);

Checkpoint snapshot_reward(const RewardModel& model, std::string tag, std::uint64_t seed);
RewardModel reward_from_checkpoint(const Checkpoint& checkpoint);

}  // namespace lab
