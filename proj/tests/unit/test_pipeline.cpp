#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "lab/numcore/errors.hpp"
#include "lab/numcore/ops.hpp"
#include "lab/pipeline/pipeline.hpp"

using namespace lab;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("lab_pipeline_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

TokenBatch random_batch(Rng& rng, std::size_t batch, std::size_t len) {
  std::vector<std::vector<int>> seqs(batch);
  for (auto& s : seqs) {
    for (std::size_t t = 0; t < 1 + rng.below(len); ++t) s.push_back(1 + static_cast<int>(rng.below(63)));
  }
  return TokenBatch::pack(seqs, 0);
}

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0;
}

LabConfig tiny_config() {
  LabConfig c;
  c.seed = 5;
  c.splits = {64, 64, 64, 16};
  c.sft.steps = 20;
  c.sft.batch_size = 8;
  c.rm.pairs = 40;
  c.rm.epochs = 1;
  c.rm.batch_size = 8;
  c.ppo.rollout_batch = 16;
  c.ppo.update_batch = 8;
  c.ppo.total_steps = 3;
  c.ppo.max_new_tokens = 8;
  c.eval.interval = 2;
  c.eval.bootstrap = 50;
  c.eval.kl_samples = 8;
  return c;
}

}  // namespace

TEST(Config, JsonRoundTrip) {
  LabConfig c = tiny_config();
  apply_preset(c, "plain_kl");
  c.ppo.beta = 0.05f;
  c.placement.maps = {true, false, true, false};
  const LabConfig back = config_from_json(config_to_json(c));
  EXPECT_EQ(config_to_json(back), config_to_json(c));
  EXPECT_EQ(back.ppo.divergence, DivergenceKind::kPlainKL);
}

TEST(Config, RejectsUnknownKeys) {
  EXPECT_THROW(config_from_json({{"sed", 1}}), ConfigError);
  EXPECT_THROW(config_from_json({{"ppo", {{"betta", 0.1}}}}), ConfigError);
  EXPECT_THROW(config_from_json({{"preset", "no_such_preset"}}), ConfigError);
}

TEST(Config, PresetThenExplicitFields) {
  const LabConfig c = config_from_json({{"preset", "none"}});
  EXPECT_EQ(c.ppo.divergence, DivergenceKind::kNoRegularization);
  EXPECT_EQ(c.ppo.beta, 0.0f);
  const LabConfig d = config_from_json({{"preset", "clamped_kl"}, {"ppo", {{"beta", 0.1}}}});
  EXPECT_FLOAT_EQ(d.ppo.beta, 0.1f);
  const LabConfig e = config_from_json({{"preset", "dropout_only"}});
  EXPECT_FLOAT_EQ(e.lora.dropout, 0.5f);
  EXPECT_EQ(e.ppo.beta, 0.0f);
}

TEST(Config, LoadMissingFileIsIoError) {
  EXPECT_THROW(load_config("/nonexistent/config.json"), IoError);
}

TEST(Checkpoint, RoundTripForwardIsBitwise) {
  Rng rng(3);
  PolicyModel model(ModelConfig{}, rng);
  model.trunk().attach_adapters(LoraConfig{}, AdapterPlacement{}, rng);
  // Nonzero B so adapters contribute.
  for (auto& p : model.trunk().adapter_parameters()) {
    for (float& v : p.tensor.mutable_data()) v = static_cast<float>(rng.normal()) * 0.02f;
  }
  const auto dir = temp_dir("ckpt");
  save_checkpoint(dir / "m.ckpt", snapshot_policy(model, "test", 7, 3));
  const Checkpoint c = load_checkpoint(dir / "m.ckpt");
  EXPECT_EQ(c.step, 7);
  EXPECT_EQ(c.tag, "test");
  const PolicyModel loaded = policy_from_checkpoint(c);
  NoGradGuard no_grad;
  for (int i = 0; i < 100; ++i) {
    const TokenBatch b = random_batch(rng, 2, 12);
    ASSERT_TRUE(same_bits(model.forward_logprobs(b), loaded.forward_logprobs(b))) << i;
  }
}

TEST(Checkpoint, AdapterCheckpointBindsToBaseHash) {
  Rng rng(4);
  PolicyModel base(ModelConfig{}, rng);
  const Checkpoint base_ckpt = snapshot_policy(base, "sft", 0, 4);
  PolicyModel tuned = base.clone();
  tuned.trunk().attach_adapters(LoraConfig{}, AdapterPlacement{}, rng);
  for (auto& p : tuned.trunk().adapter_parameters()) {
    for (float& v : p.tensor.mutable_data()) v = static_cast<float>(rng.normal()) * 0.02f;
  }
  const auto dir = temp_dir("adapter");
  save_checkpoint(dir / "a.adapter",
                  snapshot_adapters(tuned, base_ckpt.content_hash(), "ppo", 20, 4));
  const Checkpoint adapters = load_checkpoint(dir / "a.adapter");
  const PolicyModel restored = apply_adapter_checkpoint(base_ckpt, adapters);
  const TokenBatch b = random_batch(rng, 3, 10);
  NoGradGuard no_grad;
  EXPECT_TRUE(same_bits(tuned.forward_logprobs(b), restored.forward_logprobs(b)));

  PolicyModel other(ModelConfig{}, rng);
  EXPECT_THROW(apply_adapter_checkpoint(snapshot_policy(other, "x", 0, 0), adapters), IoError);
}

TEST(Checkpoint, MalformedFilesAreIoErrors) {
  const auto dir = temp_dir("bad");
  EXPECT_THROW(load_checkpoint(dir / "missing"), IoError);
  {
    std::ofstream out(dir / "junk", std::ios::binary);
    out << "not a checkpoint at all";
  }
  EXPECT_THROW(load_checkpoint(dir / "junk"), IoError);
  Rng rng(1);
  save_checkpoint(dir / "ok", snapshot_policy(PolicyModel(ModelConfig{}, rng), "", 0, 0));
  std::filesystem::resize_file(dir / "ok", std::filesystem::file_size(dir / "ok") - 4);
  EXPECT_THROW(load_checkpoint(dir / "ok"), IoError);
}

TEST(RewardModel, PreferenceLossValues) {
  const Tensor c = Tensor::from_vector({1}, {2.0f});
  const Tensor r = Tensor::from_vector({1}, {0.0f});
  EXPECT_NEAR(preference_loss(c, r).item(), std::log1p(std::exp(-2.0)), 1e-6);
  EXPECT_NEAR(std::log1p(std::exp(-2.0)), 0.1269, 1e-4);
  EXPECT_NEAR(preference_loss(r, r).item(), std::log(2.0), 1e-6);
}

TEST(RewardModel, PreferenceLossGradient) {
  const Tensor c = Tensor::from_vector({2}, {0.5f, -1.0f}, true);
  const Tensor r = Tensor::from_vector({2}, {0.0f, 1.0f}, true);
  preference_loss(c, r).backward();
  for (std::size_t i = 0; i < 2; ++i) {
    const double z = r.data()[i] - c.data()[i];
    const double s = 1.0 / (1.0 + std::exp(-z)) / 2.0;
    EXPECT_NEAR(r.grad()[i], s, 1e-6);
    EXPECT_NEAR(c.grad()[i], -s, 1e-6);
  }
}

TEST(RewardModel, AllTiesIsTrainingError) {
  Rng rng(2);
  RewardModel rm{Transformer(ModelConfig{}, rng)};
  PreferencePair p;
  p.prompt = {1, 4, 9, 2};
  p.response_a = {9, 3};
  p.response_b = {9, 3};
  p.margin = 0.0;
  EXPECT_THROW(train_reward_model(rm, {p, p}, RewardModelConfig{}, rng), TrainingDivergence);
}

TEST(RewardModel, ScoreIsDeterministic) {
  Rng rng(2);
  RewardModel rm{Transformer(ModelConfig{}, rng)};
  const std::vector<int> prompt{1, 4, 9, 10, 2};
  EXPECT_EQ(rm.score(prompt, {9, 10, 3}), rm.score(prompt, {9, 10, 3}));
}

TEST(RewardModel, HeldOutAccuracyOnCopyTask) {
  const LabConfig config;
  const Splits data = generate_data(config);
  PolicyModel sft = initial_policy(config);
  Rng sft_rng(config.seed, 2);
  train_sft(sft, data.sft, config.sft, sft_rng);
  sft.set_base_trainable(false);
  const PreferenceSet prefs = sample_preferences(sft, data.rm, config);
  RewardModel rm = initial_reward_model(sft);
  Rng rm_rng(config.seed, 4);
  const RewardModelReport report = train_reward_model(rm, prefs.pairs, config.rm, rm_rng);
  EXPECT_GE(report.heldout_accuracy, 0.7);
}

TEST(Sft, OverfitsSingleEpisode) {
  TaskSpec spec;
  spec.seed = 1;
  const Episode e = generate_episode(spec, 0);
  Rng rng(8);
  PolicyModel model(ModelConfig{}, rng);
  SftConfig config;
  config.steps = 500;
  config.batch_size = 1;
  const SftReport report = train_sft(model, {e}, config, rng);
  std::size_t first_below = report.losses.size();
  for (std::size_t i = 0; i < report.losses.size(); ++i) {
    if (report.losses[i] < 0.01) {
      first_below = i;
      break;
    }
  }
  EXPECT_LT(first_below, 500u);
}

TEST(Sft, PromptPositionsGetZeroGradient) {
  Rng rng(9);
  PolicyModel model(ModelConfig{}, rng);
  const std::vector<std::vector<int>> prompts{{1, 4, 9, 10, 2}, {1, 4, 11, 2}};
  const std::vector<std::vector<int>> golds{{9, 10, 3}, {11, 3}};
  const ResponseRows rows = response_rows(prompts, golds, 0);
  Tensor logprobs;
  {
    NoGradGuard no_grad;
    logprobs = model.forward_logprobs(rows.batch);
  }
  const Tensor leaf = Tensor::from_vector(logprobs.shape(),
                                          {logprobs.data().begin(), logprobs.data().end()}, true);
  masked_nll(leaf, rows).backward();
  const std::size_t v = leaf.dim(1);
  std::vector<bool> is_response(leaf.dim(0), false);
  for (std::size_t r : rows.rows) is_response[r] = true;
  std::size_t nonzero_response_rows = 0;
  for (std::size_t r = 0; r < leaf.dim(0); ++r) {
    bool any = false;
    for (std::size_t j = 0; j < v; ++j) any = any || leaf.grad()[r * v + j] != 0.0f;
    if (is_response[r]) {
      nonzero_response_rows += any ? 1 : 0;
    } else {
      EXPECT_FALSE(any) << "row " << r;
    }
  }
  EXPECT_EQ(nonzero_response_rows, rows.rows.size());
  EXPECT_EQ(rows.rows.size(), 5u);
}

TEST(Sft, SameSeedSameFinalLoss) {
  TaskSpec spec;
  std::vector<Episode> episodes;
  for (int i = 0; i < 16; ++i) episodes.push_back(generate_episode(spec, i));
  SftConfig config;
  config.steps = 5;
  config.batch_size = 4;
  auto run = [&] {
    Rng rng(21);
    PolicyModel model(ModelConfig{}, rng);
    return train_sft(model, episodes, config, rng).final_loss;
  };
  EXPECT_EQ(run(), run());
}

TEST(WinRate, SelfIsExactlyHalf) {
  TaskSpec spec;
  std::vector<Episode> episodes;
  for (int i = 0; i < 12; ++i) episodes.push_back(generate_episode(spec, i));
  Rng rng(1);
  PolicyModel model(ModelConfig{}, rng);
  const WinRate w = evaluate_winrate(model, model, episodes, 8, 100, rng);
  EXPECT_EQ(w.rate, 0.5);
  EXPECT_EQ(w.ties, episodes.size());
}

TEST(WinRate, PerfectBeatsEmpty) {
  TaskSpec spec;
  std::vector<double> perfect, empty;
  for (int i = 0; i < 20; ++i) {
    const Episode e = generate_episode(spec, i);
    perfect.push_back(oracle_score(e, e.gold));
    empty.push_back(oracle_score(e, {}));
  }
  Rng rng(1);
  const WinRate w = winrate_from_scores(perfect, empty, 100, rng);
  EXPECT_EQ(w.rate, 1.0);
  EXPECT_EQ(w.standard_error, 0.0);
}

TEST(WinRate, Antisymmetric) {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(900);
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = static_cast<double>(rng.below(4)) / 3.0;
      b[i] = static_cast<double>(rng.below(4)) / 3.0;
    }
    const double ab = winrate_from_scores(a, b, 2, rng).rate;
    const double ba = winrate_from_scores(b, a, 2, rng).rate;
    ASSERT_EQ(ab + ba, 1.0) << n;
  }
}

TEST(WinRate, BootstrapMatchesBinomialStandardError) {
  // 805 outcomes with p = 0.5: sqrt(p(1-p)/n) = 0.01762.
  std::vector<double> outcomes(805);
  for (std::size_t i = 0; i < outcomes.size(); ++i) outcomes[i] = i < 402 ? 1.0 : 0.0;
  Rng rng(5);
  const double se = bootstrap_standard_error(outcomes, 1000, rng);
  const double p = 402.0 / 805.0;
  EXPECT_NEAR(se, std::sqrt(p * (1 - p) / 805.0), 0.0015);
  EXPECT_NEAR(se, 0.018, 0.0015);
}

TEST(WinRate, EmptyEvalSetIsInputError) {
  Rng rng(1);
  PolicyModel model(ModelConfig{}, rng);
  EXPECT_THROW(evaluate_winrate(model, model, {}, 8, 100, rng), InputError);
}

TEST(Analysis, PerfectSqrtRelationship) {
  std::vector<MetricsRecord> records;
  for (int s = 0; s < 20; ++s) {
    MetricsRecord r;
    r.step = s;
    r.kl = 0.01 * s * s + 0.001 * s;
    r.mean_reward = 2.0 * std::sqrt(r.kl);
    r.response_length = 5;
    records.push_back(r);
  }
  const RunAnalysis a = analyze_run(records);
  ASSERT_TRUE(a.sqrt_kl_reward);
  EXPECT_NEAR(*a.sqrt_kl_reward, 1.0, 1e-12);
  EXPECT_FALSE(a.kl_length);  // constant length
}

TEST(Analysis, ConstantSeriesIsUndefined) {
  std::vector<MetricsRecord> records(12);
  for (int s = 0; s < 12; ++s) {
    records[s].step = s;
    records[s].kl = 0.3;
    records[s].mean_reward = s;
  }
  const RunAnalysis a = analyze_run(records);
  EXPECT_FALSE(a.sqrt_kl_reward);
  EXPECT_NE(analysis_report(a).find("undefined"), std::string::npos);
}

TEST(Analysis, TooFewRecordsIsInputError) {
  EXPECT_THROW(analyze_run(std::vector<MetricsRecord>(9)), InputError);
}

TEST(Metrics, JsonlRoundTrip) {
  std::vector<MetricsRecord> records(3);
  for (int s = 0; s < 3; ++s) {
    records[s].step = s;
    records[s].kl = 0.1 * s;
    records[s].mean_reward = 0.3 + s;
    records[s].wall_clock = 1.5 * s;
  }
  records[2].win_rate = 0.625;
  records[2].win_rate_se = 0.03;
  std::stringstream io;
  for (const auto& r : records) io << metrics_to_json(r).dump() << '\n';
  const auto back = read_metrics_jsonl(io);
  ASSERT_EQ(back.size(), 3u);
  for (int s = 0; s < 3; ++s) EXPECT_TRUE(same_metrics(records[s], back[s]));
  EXPECT_EQ(back[2].win_rate, 0.625);
  EXPECT_FALSE(back[1].win_rate);
}

TEST(Metrics, NonIncreasingStepRejected) {
  std::stringstream io;
  MetricsRecord r;
  io << metrics_to_json(r).dump() << '\n' << metrics_to_json(r).dump() << '\n';
  EXPECT_THROW(read_metrics_jsonl(io), InputError);
}

TEST(RunLock, SecondLockFails) {
  const auto dir = temp_dir("lock");
  {
    RunLock lock(dir);
    EXPECT_THROW(RunLock again(dir), IoError);
  }
  RunLock after(dir);
}

TEST(RunPpo, SmallRunWritesMetricsAndKeepsReferenceFrozen) {
  const LabConfig config = tiny_config();
  const Splits data = generate_data(config);
  PolicyModel sft = initial_policy(config);
  Rng rng(config.seed, 2);
  train_sft(sft, data.sft, config.sft, rng);
  sft.set_base_trainable(false);
  const auto dir = temp_dir("run");
  const PpoRunResult r = run_ppo(sft, oracle_reward(), data, config, dir);
  EXPECT_EQ(r.reference_hash_before, r.reference_hash_after);
  ASSERT_EQ(r.metrics.size(), config.ppo.total_steps + 1);
  EXPECT_TRUE(r.metrics[0].win_rate);
  EXPECT_EQ(*r.metrics[0].win_rate, 0.5);
  EXPECT_NEAR(*r.metrics[0].eval_kl, 0.0, 1e-6);
  EXPECT_FALSE(r.metrics[1].win_rate);
  EXPECT_TRUE(r.metrics[2].win_rate);
  const auto on_disk = read_metrics_file(dir / "metrics.jsonl");
  ASSERT_EQ(on_disk.size(), r.metrics.size());
  for (std::size_t i = 0; i < on_disk.size(); ++i) {
    EXPECT_TRUE(same_metrics(on_disk[i], r.metrics[i]));
    EXPECT_GE(on_disk[i].kl, 0.0);
  }
  EXPECT_TRUE(std::filesystem::exists(dir / "checkpoints" / "step_0002.adapter"));
}

TEST(RunPipeline, SameSeedSameMetrics) {
  const LabConfig config = tiny_config();
  const PipelineResult a = run_pipeline(config);
  const PipelineResult b = run_pipeline(config);
  ASSERT_EQ(a.ppo.metrics.size(), b.ppo.metrics.size());
  for (std::size_t i = 0; i < a.ppo.metrics.size(); ++i) {
    EXPECT_TRUE(same_metrics(a.ppo.metrics[i], b.ppo.metrics[i])) << i;
  }
}
