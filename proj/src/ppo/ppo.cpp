#include "lab/ppo/ppo.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <numeric>

#include "lab/model/sampling.hpp"
#include "lab/numcore/errors.hpp"
#include "lab/numcore/ops.hpp"
#include "lab/numcore/parallel.hpp"

namespace lab {
namespace {

// Sequences scored per forward pass during rollout.
constexpr std::size_t kScoringChunk = 64;

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t bytes) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

void whiten(std::vector<RolloutExample>& examples) {
  double total = 0.0, squares = 0.0;
  std::size_t n = 0;
  for (const auto& e : examples) {
    for (double a : e.advantages) {
      total += a;
      ++n;
    }
  }
  if (n == 0) return;
  const double mean = total / static_cast<double>(n);
  for (const auto& e : examples) {
    for (double a : e.advantages) squares += (a - mean) * (a - mean);
  }
  const double sd = std::sqrt(squares / static_cast<double>(n));
  const double inv = sd > 1e-12 ? 1.0 / (sd + 1e-8) : 1.0;
  for (auto& e : examples) {
    for (double& a : e.advantages) a = (a - mean) * inv;
  }
}

}  // namespace

void PPOConfig::validate() const {
  if (!(clip_epsilon > 0.0 && clip_epsilon < 1.0)) {
    throw ConfigError("clip epsilon must lie in (0, 1), got " + std::to_string(clip_epsilon));
  }
  if (!(beta >= 0.0)) throw ConfigError("beta must be >= 0");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
  if (rollout_batch == 0 || update_batch == 0 || epochs == 0) {
    throw ConfigError("rollout_batch, update_batch and epochs must be positive");
  }
  if (update_batch > rollout_batch) {
    throw ConfigError("update_batch exceeds rollout_batch");
  }
  if (max_new_tokens == 0) throw ConfigError("max_new_tokens must be positive");
  if (!(temperature > 0.0f)) throw ConfigError("temperature must be positive");
  if (!(learning_rate > 0.0f) || !(value_learning_rate > 0.0f)) {
    throw ConfigError("learning rates must be positive");
  }
  if (!(value_loss_weight >= 0.0)) throw ConfigError("value_loss_weight must be >= 0");
}

std::size_t RolloutBatch::token_count() const {
  std::size_t n = 0;
  for (const auto& e : examples) n += e.response.size();
  return n;
}

std::uint64_t RolloutBatch::snapshot_checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& e : examples) {
    h = fnv1a(h, e.logp_old.data(), e.logp_old.size() * sizeof(float));
    h = fnv1a(h, e.logp_ref.data(), e.logp_ref.size() * sizeof(float));
  }
  return h;
}

std::vector<double> shape_rewards(double scalar_reward, std::span<const double> kl_terms,
                                  double beta) {
  if (kl_terms.empty()) throw InputError("shape_rewards: empty response");
  if (!(beta >= 0.0)) throw InputError("shape_rewards: beta must be >= 0");
  std::vector<double> out(kl_terms.size());
  for (std::size_t t = 0; t < out.size(); ++t) out[t] = -beta * kl_terms[t];
  out.back() += scalar_reward;
  return out;
}

GaeResult gae(std::span<const double> rewards, std::span<const double> values, double gamma,
              double lambda) {
  if (rewards.size() != values.size()) {
    throw InputError("gae: " + std::to_string(rewards.size()) + " rewards for " +
                     std::to_string(values.size()) + " values");
  }
  const std::size_t n = rewards.size();
  GaeResult r{std::vector<double>(n), std::vector<double>(n)};
  double next_adv = 0.0, next_value = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    const double delta = rewards[i] + gamma * next_value - values[i];
    next_adv = delta + gamma * lambda * next_adv;
    r.advantages[i] = next_adv;
    r.returns[i] = next_adv + values[i];
    next_value = values[i];
  }
  return r;
}

Tensor surrogate_loss(const Tensor& logp_new, std::span<const float> logp_old,
                      std::span<const float> advantages, double clip_epsilon) {
  const std::size_t n = logp_new.numel();
  if (logp_old.size() != n || advantages.size() != n) {
    throw DimensionError("surrogate_loss: " + std::to_string(n) + " new log-probs, " +
                         std::to_string(logp_old.size()) + " old, " +
                         std::to_string(advantages.size()) + " advantages");
  }
  if (n == 0) throw InputError("surrogate_loss: no tokens");
  const auto lp = logp_new.data();
  std::vector<float> coef(n);
  double objective = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double ratio = std::exp(static_cast<double>(lp[i]) - logp_old[i]);
    if (!std::isfinite(ratio)) {
      throw TrainingDivergence("surrogate_loss: non-finite probability ratio at token " +
                               std::to_string(i));
    }
    const double a = advantages[i];
    const double unclipped = ratio * a;
    const double clipped = std::clamp(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon) * a;
    if (unclipped <= clipped) {
      objective += unclipped;
      coef[i] = static_cast<float>(unclipped);
    } else {
      objective += clipped;
      coef[i] = 0.0f;
    }
  }
  const float inv_n = 1.0f / static_cast<float>(n);
  return make_result(
      {1}, {static_cast<float>(-objective / static_cast<double>(n))}, {logp_new},
      [coef = std::move(coef), inv_n](std::span<const float> g, std::span<Tensor> in) {
        auto slot = in[0].grad_slot();
        for (std::size_t i = 0; i < coef.size(); ++i) slot[i] -= g[0] * coef[i] * inv_n;
      },
      "surrogate_loss");
}

Tensor value_loss(const Tensor& values, std::span<const float> returns) {
  const std::size_t n = values.numel();
  if (returns.size() != n) {
    throw DimensionError("value_loss: " + std::to_string(n) + " values for " +
                         std::to_string(returns.size()) + " returns");
  }
  if (n == 0) throw InputError("value_loss: no values");
  const auto v = values.data();
  std::vector<float> diff(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(v[i]) - returns[i];
    diff[i] = static_cast<float>(d);
    total += d * d;
  }
  const float inv_n = 1.0f / static_cast<float>(n);
  return make_result(
      {1}, {static_cast<float>(0.5 * total / static_cast<double>(n))}, {values},
      [diff = std::move(diff), inv_n](std::span<const float> g, std::span<Tensor> in) {
        auto slot = in[0].grad_slot();
        for (std::size_t i = 0; i < diff.size(); ++i) slot[i] += g[0] * diff[i] * inv_n;
      },
      "value_loss");
}

ResponseRows response_rows(const std::vector<std::vector<int>>& prompts,
                           const std::vector<std::vector<int>>& responses, int pad_token) {
  if (prompts.size() != responses.size()) {
    throw InputError("response_rows: " + std::to_string(prompts.size()) + " prompts for " +
                     std::to_string(responses.size()) + " responses");
  }
  std::vector<std::vector<int>> sequences;
  sequences.reserve(prompts.size());
  for (std::size_t b = 0; b < prompts.size(); ++b) {
    if (prompts[b].empty() || responses[b].empty()) {
      throw InputError("response_rows: empty prompt or response");
    }
    std::vector<int> s = prompts[b];
    s.insert(s.end(), responses[b].begin(), responses[b].end());
    sequences.push_back(std::move(s));
  }
  ResponseRows out;
  out.batch = TokenBatch::pack(sequences, pad_token);
  for (std::size_t b = 0; b < prompts.size(); ++b) {
    const std::size_t p = prompts[b].size();
    for (std::size_t j = 0; j < responses[b].size(); ++j) {
      out.rows.push_back(out.batch.row(b, p + j - 1));
      out.targets.push_back(responses[b][j]);
    }
  }
  return out;
}

ResponseRows response_rows(const std::vector<const RolloutExample*>& examples, int pad_token) {
  std::vector<std::vector<int>> prompts, responses;
  for (const auto* e : examples) {
    prompts.push_back(e->prompt);
    responses.push_back(e->response);
  }
  return response_rows(prompts, responses, pad_token);
}

double sampled_exact_kl(const PolicyModel& policy, const PolicyModel& reference,
                        const std::vector<std::vector<int>>& prompts, const Rng& rng,
                        const SampleOptions& options) {
  NoGradGuard no_grad;
  std::vector<std::vector<int>> responses(prompts.size());
  parallel_for(prompts.size(), [&](std::size_t i) {
    Rng stream = rng.fork(i);
    responses[i] = sample_response(policy, prompts[i], stream, options).tokens;
  });
  const std::size_t vocab = policy.config().vocab_size;
  double total = 0.0;
  std::size_t tokens = 0;
  for (std::size_t start = 0; start < prompts.size(); start += kScoringChunk) {
    const std::size_t stop = std::min(start + kScoringChunk, prompts.size());
    const std::vector<std::vector<int>> p(prompts.begin() + static_cast<long>(start),
                                          prompts.begin() + static_cast<long>(stop));
    const std::vector<std::vector<int>> r(responses.begin() + static_cast<long>(start),
                                          responses.begin() + static_cast<long>(stop));
    const ResponseRows rr = response_rows(p, r, policy.config().pad_token);
    const Tensor theta = policy.forward_logprobs(rr.batch);
    const Tensor ref = reference.forward_logprobs(rr.batch);
    for (std::size_t row : rr.rows) {
      total += exact_kl(theta.data().subspan(row * vocab, vocab),
                        ref.data().subspan(row * vocab, vocab));
    }
    tokens += rr.rows.size();
  }
  return tokens == 0 ? 0.0 : total / static_cast<double>(tokens);
}

PPOTrainer::PPOTrainer(PolicyModel& policy, ValueModel& value, const PolicyModel& reference,
                       RewardFn reward, PPOConfig config)
    : policy_(policy),
      value_(value),
      reference_(reference),
      reward_(std::move(reward)),
      config_(config),
      policy_opt_({config.learning_rate, 0.9f, 0.999f, 1e-8f, config.max_grad_norm}),
      value_opt_({config.value_learning_rate, 0.9f, 0.999f, 1e-8f, config.max_grad_norm}) {
  config_.validate();
  for (auto& p : policy_.trainable_parameters()) policy_opt_.add_parameter(p.name, p.tensor);
  for (auto& p : value_.trainable_parameters()) value_opt_.add_parameter(p.name, p.tensor);
  if (policy_opt_.slots().empty()) throw ConfigError("policy has no trainable parameters");
}

RolloutBatch PPOTrainer::collect(const std::vector<std::vector<int>>& prompts, Rng& rng) const {
  NoGradGuard no_grad;
  const std::size_t n = prompts.size();
  if (n == 0) throw InputError("collect: no prompts");
  const Rng base = rng.fork(rng.next_u64());
  const SampleOptions sample_options{config_.max_new_tokens, config_.temperature, false};
  std::vector<SampledResponse> samples(n);
  parallel_for(n, [&](std::size_t i) {
    Rng stream = base.fork(i);
    samples[i] = sample_response(policy_, prompts[i], stream, sample_options);
  });

  RolloutBatch out;
  for (std::size_t i = 0; i < n; ++i) {
    double r = 0.0;
    bool ok = true;
    try {
      r = reward_(prompts[i], samples[i].tokens);
      ok = std::isfinite(r);
    } catch (const std::exception&) {
      ok = false;
    }
    if (!ok) {
      ++out.dropped;
      continue;
    }
    RolloutExample e;
    e.prompt = prompts[i];
    e.response = std::move(samples[i].tokens);
    e.reward = r;
    out.examples.push_back(std::move(e));
  }
  if (static_cast<double>(out.dropped) > config_.max_drop_fraction * static_cast<double>(n)) {
    throw TrainingDivergence("rollout: " + std::to_string(out.dropped) + " of " +
                             std::to_string(n) + " reward calls failed");
  }

  const std::size_t vocab = policy_.config().vocab_size;
  const std::size_t monitored = config_.kl_monitor_examples == 0
                                    ? out.examples.size()
                                    : std::min(config_.kl_monitor_examples, out.examples.size());
  const EstimateOptions estimate_options{config_.js_full_rows};
  for (std::size_t start = 0; start < out.examples.size(); start += kScoringChunk) {
    const std::size_t stop = std::min(start + kScoringChunk, out.examples.size());
    std::vector<const RolloutExample*> chunk;
    for (std::size_t i = start; i < stop; ++i) chunk.push_back(&out.examples[i]);
    const ResponseRows rr = response_rows(chunk, policy_.config().pad_token);
    const Tensor lp_theta = policy_.forward_logprobs(rr.batch);
    const Tensor lp_ref = reference_.forward_logprobs(rr.batch);
    const Tensor values = value_.forward_values(rr.batch);
    const auto theta = lp_theta.data(), ref = lp_ref.data(), val = values.data();
    std::size_t k = 0;
    for (std::size_t i = start; i < stop; ++i) {
      RolloutExample& e = out.examples[i];
      const std::size_t len = e.response.size();
      e.logp_old.resize(len);
      e.logp_ref.resize(len);
      e.values.resize(len);
      e.kl_terms.resize(len);
      for (std::size_t j = 0; j < len; ++j, ++k) {
        const std::size_t row = rr.rows[k];
        const auto row_theta = theta.subspan(row * vocab, vocab);
        const auto row_ref = ref.subspan(row * vocab, vocab);
        const int y = rr.targets[k];
        e.logp_old[j] = row_theta[static_cast<std::size_t>(y)];
        e.logp_ref[j] = row_ref[static_cast<std::size_t>(y)];
        e.values[j] = val[row];
        TokenDivInput x{e.logp_old[j], e.logp_ref[j], {}, {}};
        if (config_.js_full_rows) {
          x.row_theta = row_theta;
          x.row_ref = row_ref;
        }
        e.kl_terms[j] = estimate(config_.divergence, x, estimate_options);
        if (i < monitored) e.exact_kl_sum += exact_kl(row_theta, row_ref);
      }
      e.shaped_rewards = shape_rewards(e.reward, e.kl_terms, config_.beta);
      const std::vector<double> v(e.values.begin(), e.values.end());
      GaeResult g = gae(e.shaped_rewards, v, config_.gamma, config_.lambda);
      e.advantages = std::move(g.advantages);
      e.returns = std::move(g.returns);
      if (i < monitored) {
        out.monitored_kl_sum += e.exact_kl_sum;
        out.monitored_tokens += len;
      }
    }
  }
  if (config_.whiten_advantages) whiten(out.examples);
  return out;
}

OptimizeStats PPOTrainer::optimize_minibatch(const RolloutBatch& batch,
                                             std::span<const std::size_t> members, Rng& rng) {
  std::vector<const RolloutExample*> chosen;
  std::vector<float> old_lp, adv, ret;
  for (std::size_t m : members) {
    const RolloutExample& e = batch.examples[m];
    chosen.push_back(&e);
    old_lp.insert(old_lp.end(), e.logp_old.begin(), e.logp_old.end());
    for (double a : e.advantages) adv.push_back(static_cast<float>(a));
    for (double r : e.returns) ret.push_back(static_cast<float>(r));
  }
  const ResponseRows rr = response_rows(chosen, policy_.config().pad_token);
  OptimizeStats stats;

  Rng dropout_rng = rng.fork(rng.next_u64());
  const ForwardOptions train{true, &dropout_rng};
  policy_opt_.zero_grad();
  const Tensor lp = select_rows(policy_.forward_logprobs(rr.batch, train), rr.rows);
  const Tensor lp_new = gather_columns(lp, rr.targets);
  const Tensor ploss = surrogate_loss(lp_new, old_lp, adv, config_.clip_epsilon);
  ploss.backward();
  policy_opt_.step();
  policy_opt_.zero_grad();
  stats.policy_loss = ploss.item();
  std::size_t clipped = 0;
  const auto lpn = lp_new.data();
  for (std::size_t i = 0; i < lpn.size(); ++i) {
    const double ratio = std::exp(static_cast<double>(lpn[i]) - old_lp[i]);
    clipped += std::abs(ratio - 1.0) > config_.clip_epsilon ? 1 : 0;
  }
  stats.clip_fraction = static_cast<double>(clipped) / static_cast<double>(lpn.size());

  if (!value_opt_.slots().empty()) {
    value_opt_.zero_grad();
    const Tensor values = select_rows(value_.forward_values(rr.batch, train), rr.rows);
    const Tensor vloss = value_loss(values, ret);
    stats.value_loss = vloss.item();
    scale(vloss, static_cast<float>(config_.value_loss_weight)).backward();
    value_opt_.step();
    value_opt_.zero_grad();
  }
  stats.updates = 1;
  return stats;
}

OptimizeStats PPOTrainer::optimize(const RolloutBatch& batch, Rng& rng) {
  OptimizeStats total;
  const std::size_t n = batch.examples.size();
  if (n == 0) return total;
  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 0; epoch < config_.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t start = 0; start < n; start += config_.update_batch) {
      const std::size_t stop = std::min(start + config_.update_batch, n);
      const OptimizeStats s = optimize_minibatch(
          batch, std::span<const std::size_t>(order).subspan(start, stop - start), rng);
      total.policy_loss += s.policy_loss;
      total.value_loss += s.value_loss;
      total.clip_fraction += s.clip_fraction;
      total.updates += s.updates;
    }
  }
  const double k = static_cast<double>(total.updates);
  total.policy_loss /= k;
  total.value_loss /= k;
  total.clip_fraction /= k;
  return total;
}

MetricsRecord PPOTrainer::summarize(const RolloutBatch& batch) const {
  MetricsRecord m;
  m.step = steps_;
  double reward = 0.0, length = 0.0, estimator = 0.0;
  for (const auto& e : batch.examples) {
    reward += e.reward;
    length += static_cast<double>(e.response.size());
    for (double k : e.kl_terms) estimator += k;
  }
  const double n = static_cast<double>(batch.examples.size());
  m.mean_reward = reward / n;
  m.response_length = length / n;
  m.estimator_mean = estimator / static_cast<double>(batch.token_count());
  m.kl = batch.monitored_tokens == 0
             ? 0.0
             : batch.monitored_kl_sum / static_cast<double>(batch.monitored_tokens);
  m.dropped = batch.dropped;
  return m;
}

MetricsRecord PPOTrainer::measure(const std::vector<std::vector<int>>& prompts, Rng& rng) {
  const auto start = std::chrono::steady_clock::now();
  MetricsRecord m = summarize(collect(prompts, rng));
  m.wall_clock =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return m;
}

MetricsRecord PPOTrainer::step(const std::vector<std::vector<int>>& prompts, Rng& rng) {
  if (prompts.size() != config_.rollout_batch) {
    throw InputError("ppo step: " + std::to_string(prompts.size()) + " prompts for rollout " +
                     std::to_string(config_.rollout_batch));
  }
  const auto start = std::chrono::steady_clock::now();
  const RolloutBatch batch = collect(prompts, rng);
  const OptimizeStats stats = optimize(batch, rng);
  MetricsRecord m = summarize(batch);
  m.policy_loss = stats.policy_loss;
  m.value_loss = stats.value_loss;
  m.clip_fraction = stats.clip_fraction;
  m.optimizer_updates = stats.updates;
  m.wall_clock =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  ++steps_;
  return m;
}

}  // namespace lab
