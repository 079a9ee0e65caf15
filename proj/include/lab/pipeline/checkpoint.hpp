#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lab/lora/lora.hpp"
#include "lab/model/transformer.hpp"

namespace lab {

constexpr std::uint32_t kCheckpointVersion = 1;

struct AdapterMeta {
  LoraConfig lora;
  AdapterPlacement placement;
};

// On disk: 8-byte magic, u32 version, u64 header length, JSON header, then
// each parameter's float32 data little-endian in header order.
struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string kind;  // policy, value, reward or adapter
  std::string tag;
  ModelConfig config;
  std::vector<NamedParameter> parameters;
  std::optional<AdapterMeta> adapters;
  long step = 0;
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> base_hash;  // adapter-only checkpoints

  // FNV-1a over names, shapes and raw parameter bytes.
  std::uint64_t content_hash() const;
};

std::uint64_t parameters_hash(const std::vector<NamedParameter>& parameters);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Snapshots deep-copy the tensors.
Checkpoint snapshot_policy(const PolicyModel& model, std::string tag, long step,
                           std::uint64_t seed);
Checkpoint snapshot_value(const ValueModel& model, std::string tag, long step,
                          std::uint64_t seed);
// Adapter tensors only, bound to the checkpoint of the frozen base.
Checkpoint snapshot_adapters(const PolicyModel& model, std::uint64_t base_hash,
                             std::string tag, long step, std::uint64_t seed);

PolicyModel policy_from_checkpoint(const Checkpoint& checkpoint);
ValueModel value_from_checkpoint(const Checkpoint& checkpoint);
// Attaches the adapters to `base`, which must match the checkpoint's base hash.
PolicyModel apply_adapter_checkpoint(const Checkpoint& base, const Checkpoint& adapters);

// Copies values by name into `targets`. Throws IoError on a missing name or a
// shape mismatch.
void assign_parameters(const std::vector<NamedParameter>& targets,
                       const std::vector<NamedParameter>& source);

}  // namespace lab
