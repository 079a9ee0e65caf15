#include "lab/pipeline/reward_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lab/numcore/adam.hpp"
#include "lab/numcore/errors.hpp"
#include "lab/numcore/ops.hpp"

namespace lab {
namespace {

std::vector<int> joined(const std::vector<int>& prompt, const std::vector<int>& response) {
  std::vector<int> s = prompt;
  s.insert(s.end(), response.begin(), response.end());
  return s;
}

// Tensors are kept on the trunk's naming scheme with a distinct head prefix.
constexpr const char* kHeadWeight = "reward_head.weight";
constexpr const char* kHeadBias = "reward_head.bias";

}  // namespace

RewardModel::RewardModel(Transformer trunk)
    : trunk_(std::move(trunk)),
      head_w_(Tensor::zeros({1, trunk_.config().d_model}, true)),
      head_b_(Tensor::zeros({1}, true)) {}

Tensor RewardModel::scores(const std::vector<std::vector<int>>& sequences,
                           const ForwardOptions& options) const {
  const TokenBatch batch = TokenBatch::pack(sequences, trunk_.config().pad_token);
  std::vector<std::size_t> last(batch.batch);
  for (std::size_t b = 0; b < batch.batch; ++b) last[b] = batch.row(b, batch.lengths[b] - 1);
  const Tensor h = select_rows(trunk_.hidden(batch, options), last);
  return reshape(add_bias(linear(h, head_w_), head_b_), {batch.batch});
}

double RewardModel::score(const std::vector<int>& prompt, const std::vector<int>& response) const {
  NoGradGuard no_grad;
  return scores({joined(prompt, response)}).item();
}

std::vector<NamedParameter> RewardModel::parameters() const {
  auto out = trunk_.base_parameters();
  out.push_back({kHeadWeight, head_w_});
  out.push_back({kHeadBias, head_b_});
  return out;
}

RewardModel RewardModel::clone() const {
  RewardModel copy(trunk_.clone());
  copy.head_w_ = head_w_.clone();
  copy.head_b_ = head_b_.clone();
  return copy;
}

Tensor preference_loss(const Tensor& chosen, const Tensor& rejected) {
  const std::size_t n = chosen.numel();
  if (rejected.numel() != n) {
    throw DimensionError("preference_loss: " + std::to_string(n) + " chosen scores, " +
                         std::to_string(rejected.numel()) + " rejected");
  }
  if (n == 0) throw InputError("preference_loss: no pairs");
  const auto c = chosen.data(), r = rejected.data();
  std::vector<float> sig(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = static_cast<double>(r[i]) - c[i];
    // log(1 + e^z) and its derivative sigmoid(z), stable for either sign.
    total += z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
    sig[i] = static_cast<float>(1.0 / (1.0 + std::exp(-z)));
  }
  const float inv_n = 1.0f / static_cast<float>(n);
  return make_result(
      {1}, {static_cast<float>(total / static_cast<double>(n))}, {chosen, rejected},
      [sig = std::move(sig), inv_n](std::span<const float> g, std::span<Tensor> in) {
        std::vector<float> gc(sig.size()), gr(sig.size());
        for (std::size_t i = 0; i < sig.size(); ++i) {
          gr[i] = g[0] * sig[i] * inv_n;
          gc[i] = -gr[i];
        }
        in[0].accumulate_grad(gc);
        in[1].accumulate_grad(gr);
      },
      "preference_loss");
}

double preference_accuracy(const RewardModel& model, const std::vector<PreferencePair>& pairs) {
  if (pairs.empty()) throw InputError("preference_accuracy: no pairs");
  NoGradGuard no_grad;
  std::size_t correct = 0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < pairs.size(); start += kChunk) {
    const std::size_t stop = std::min(start + kChunk, pairs.size());
    std::vector<std::vector<int>> chosen, rejected;
    for (std::size_t i = start; i < stop; ++i) {
      chosen.push_back(joined(pairs[i].prompt, pairs[i].chosen()));
      rejected.push_back(joined(pairs[i].prompt, pairs[i].rejected()));
    }
    const Tensor sc = model.scores(chosen), sr = model.scores(rejected);
    for (std::size_t i = 0; i < sc.numel(); ++i) correct += sc.data()[i] > sr.data()[i] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(pairs.size());
}

RewardModelReport train_reward_model(RewardModel& model, const std::vector<PreferencePair>& pairs,
                                     const RewardModelConfig& config, Rng& rng) {
  std::vector<PreferencePair> usable;
  for (const auto& p : pairs) {
    if (p.margin >= kTieMargin) usable.push_back(p);
  }
  if (usable.empty()) {
    throw TrainingDivergence("reward model: every preference pair is a tie");
  }
  RewardModelReport report;
  report.heldout_pairs = std::max<std::size_t>(
      1, static_cast<std::size_t>(config.heldout_fraction * static_cast<double>(usable.size())));
  if (report.heldout_pairs >= usable.size()) {
    throw InputError("reward model: too few pairs to hold any out");
  }
  report.train_pairs = usable.size() - report.heldout_pairs;
  const std::vector<PreferencePair> heldout(usable.begin() + static_cast<long>(report.train_pairs),
                                            usable.end());
  usable.resize(report.train_pairs);

  Adam opt({config.learning_rate, 0.9f, 0.999f, 1e-8f, 1.0f});
  for (auto& p : model.parameters()) {
    p.tensor.set_requires_grad(true);
    opt.add_parameter(p.name, p.tensor);
  }
  std::vector<std::size_t> order(usable.size());
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(start + config.batch_size, order.size());
      std::vector<std::vector<int>> chosen, rejected;
      for (std::size_t i = start; i < stop; ++i) {
        const PreferencePair& p = usable[order[i]];
        chosen.push_back(joined(p.prompt, p.chosen()));
        rejected.push_back(joined(p.prompt, p.rejected()));
      }
      opt.zero_grad();
      const Tensor loss = preference_loss(model.scores(chosen), model.scores(rejected));
      loss.backward();
      opt.step();
      epoch_loss += loss.item();
      ++batches;
    }
    opt.zero_grad();
    report.epoch_losses.push_back(epoch_loss / static_cast<double>(batches));
  }
  for (auto& p : model.parameters()) p.tensor.set_requires_grad(false);
  report.heldout_accuracy = preference_accuracy(model, heldout);
  return report;
}

Checkpoint snapshot_reward(const RewardModel& model, std::string tag, std::uint64_t seed) {
  Checkpoint c;
  c.kind = "reward";
  c.tag = std::move(tag);
  c.config = model.config();
  for (const auto& p : model.parameters()) c.parameters.push_back({p.name, p.tensor.clone()});
  c.seed = seed;
  return c;
}

RewardModel reward_from_checkpoint(const Checkpoint& c) {
  if (c.kind != "reward") throw IoError("expected a reward checkpoint, found '" + c.kind + "'");
  Rng unused(0);
  RewardModel model{Transformer(c.config, unused)};
  assign_parameters(model.parameters(), c.parameters);
  return model;
}

}  // namespace lab
