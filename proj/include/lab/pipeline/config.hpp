#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"
#include "lab/lora/lora.hpp"
#include "lab/model/config.hpp"
#include "lab/ppo/ppo.hpp"
#include "lab/tasks/tasks.hpp"

namespace lab {

struct SftConfig {
  std::size_t steps = 100;
  std::size_t batch_size = 32;
  float learning_rate = 1e-3f;
};

struct RewardModelConfig {
  std::size_t pairs = 8000;
  std::size_t epochs = 4;
  std::size_t batch_size = 16;
  float learning_rate = 3e-4f;
  double heldout_fraction = 0.2;
  // Temperature of the SFT policy when sampling candidate responses.
  float sample_temperature = 1.0f;
};

struct EvalConfig {
  std::size_t interval = 20;  // PPO steps between evaluations
  std::size_t bootstrap = 1000;
  std::size_t kl_samples = 256;  // eval prompts used for the grid KL
};

// Every tunable of a run. Loaded from JSON; unknown keys are rejected.
struct LabConfig {
  std::uint64_t seed = 0;
  TaskSpec task;
  SplitCounts splits;
  ModelConfig model;
  LoraConfig lora;
  AdapterPlacement placement;
  SftConfig sft;
  RewardModelConfig rm;
  PPOConfig ppo;
  EvalConfig eval;
  std::string reward_source = "oracle";  // or "learned"
  std::string preset;                    // named PPO configuration, if any

  void validate() const;
};

// Names accepted by apply_preset: clamped_kl, plain_kl, bregman, squared_error,
// jensen_shannon, none, negative_kl, dropout_only.
void apply_preset(LabConfig& config, const std::string& name);

LabConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const LabConfig& config);
LabConfig load_config(const std::filesystem::path& path);

}  // namespace lab
