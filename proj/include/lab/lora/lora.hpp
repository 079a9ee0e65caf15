#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "lab/model/config.hpp"
#include "lab/numcore/rng.hpp"
#include "lab/numcore/tensor.hpp"

namespace lab {

struct LoraConfig {
  std::size_t rank = 8;
  float alpha = 64.0f;
  float dropout = 0.1f;

  float scale() const { return alpha / static_cast<float>(rank); }
  // The "dropout only" preset: adapter dropout raised to 0.5.
  static LoraConfig dropout_only() {
    LoraConfig c;
    c.dropout = 0.5f;
    return c;
  }
};

// Trainable low-rank pair attached to a frozen map W [d_out x d_in]:
// A [k x d_in], B [d_out x k]. B starts at zero, A ~ U(-1/sqrt(d_in), 1/sqrt(d_in)).
class LoraAdapter {
 public:
  LoraAdapter(std::size_t d_in, std::size_t d_out, const LoraConfig& config,
              Rng& rng);
  LoraAdapter(Tensor a, Tensor b, float alpha, float dropout);

  const Tensor& a() const noexcept { return a_; }
  const Tensor& b() const noexcept { return b_; }
  std::size_t rank() const noexcept { return a_.dim(0); }
  float alpha() const noexcept { return alpha_; }
  void set_alpha(float alpha) { alpha_ = alpha; }
  float dropout() const noexcept { return dropout_; }
  void set_dropout(float p);
  float scale() const noexcept { return alpha_ / static_cast<float>(rank()); }

 private:
  Tensor a_;
  Tensor b_;
  float alpha_;
  float dropout_;
};

// W.h + (alpha/k) B (A drop(h)) for h [rows x d_in]. Dropout is applied only
// when training; W never receives a gradient from this path.
Tensor lora_forward(const Tensor& w, const LoraAdapter& adapter, const Tensor& h,
                    bool training, Rng* rng);

// W + (alpha/k) B A as a plain tensor without gradient history.
Tensor merge_adapter(const Tensor& w, const LoraAdapter& adapter);

enum class ProjectionMap { kQuery = 0, kKey = 1, kValue = 2, kOutput = 3 };
const char* projection_name(ProjectionMap map);

struct AdapterPlacement {
  std::array<bool, 4> maps = {true, true, true, true};  // q, k, v, o
  bool adapt_policy = true;
  bool adapt_value = true;
  bool full_tune_value_head = true;

  bool targets(ProjectionMap map) const {
    return maps[static_cast<std::size_t>(map)];
  }
  std::size_t maps_per_layer() const;
};

struct TrainableCount {
  std::uint64_t adapter_parameters = 0;
  std::uint64_t value_head_parameters = 0;
  std::uint64_t total() const { return adapter_parameters + value_head_parameters; }
};

// Pure arithmetic over the geometry: 2*d*k per adapted map, per adapted
// model, plus d + 1 for a fully tuned value head.
TrainableCount count_trainable(const ModelConfig& config,
                               const AdapterPlacement& placement,
                               const LoraConfig& lora);

// Flat description of one adapter for adapter-only export.
struct AdapterRecord {
  std::string name;  // e.g. "layers.0.wq"
  std::size_t rank;
  float alpha;
  Tensor a;
  Tensor b;
};

}  // namespace lab
