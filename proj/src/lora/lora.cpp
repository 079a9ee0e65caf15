#include "lab/lora/lora.hpp"

#include <cmath>

#include "lab/numcore/errors.hpp"
#include "lab/numcore/kernels.hpp"
#include "lab/numcore/ops.hpp"

namespace lab {

LoraAdapter::LoraAdapter(std::size_t d_in, std::size_t d_out,
                         const LoraConfig& config, Rng& rng)
    : alpha_(config.alpha), dropout_(0.0f) {
  if (config.rank == 0 || config.rank >= std::min(d_in, d_out)) {
    throw ConfigError("lora rank " + std::to_string(config.rank) +
                      " must satisfy 0 < k < " + std::to_string(std::min(d_in, d_out)));
  }
  if (!(config.alpha > 0.0f)) throw ConfigError("lora alpha must be positive");
  set_dropout(config.dropout);
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
  std::vector<float> a(config.rank * d_in);
  for (float& x : a) x = static_cast<float>(rng.uniform(-bound, bound));
  a_ = Tensor::from_vector({config.rank, d_in}, std::move(a), true);
  b_ = Tensor::zeros({d_out, config.rank}, true);
}

LoraAdapter::LoraAdapter(Tensor a, Tensor b, float alpha, float dropout)
    : a_(std::move(a)), b_(std::move(b)), alpha_(alpha), dropout_(0.0f) {
  if (a_.rank() != 2 || b_.rank() != 2 || b_.dim(1) != a_.dim(0)) {
    throw DimensionError("lora: A " + shape_to_string(a_.shape()) +
                         " and B " + shape_to_string(b_.shape()) +
                         " do not form a low-rank pair");
  }
  if (!(alpha > 0.0f)) throw ConfigError("lora alpha must be positive");
  set_dropout(dropout);
}

void LoraAdapter::set_dropout(float p) {
  if (!(p >= 0.0f && p < 1.0f)) throw ConfigError("lora dropout must lie in [0, 1)");
  dropout_ = p;
}

Tensor lora_forward(const Tensor& w, const LoraAdapter& adapter, const Tensor& h,
                    bool training, Rng* rng) {
  if (w.rank() != 2 || w.dim(1) != adapter.a().dim(1) ||
      w.dim(0) != adapter.b().dim(0)) {
    throw DimensionError("lora_forward: W " + shape_to_string(w.shape()) +
                         " does not match A " + shape_to_string(adapter.a().shape()) +
                         " / B " + shape_to_string(adapter.b().shape()));
  }
  const Tensor base = linear(h, w.requires_grad() ? w.detach() : w);
  Tensor input = h;
  if (training && adapter.dropout() > 0.0f) {
    if (rng == nullptr) throw InputError("lora_forward: training dropout needs an rng");
    input = dropout(h, adapter.dropout(), *rng);
  }
  const Tensor low = linear(linear(input, adapter.a()), adapter.b());
  return add_scaled(base, low, adapter.scale());
}

Tensor merge_adapter(const Tensor& w, const LoraAdapter& adapter) {
  const std::size_t out = w.dim(0), in = w.dim(1), k = adapter.rank();
  if (adapter.a().dim(1) != in || adapter.b().dim(0) != out) {
    throw DimensionError("merge_adapter: W " + shape_to_string(w.shape()) +
                         " does not match the adapter");
  }
  const float s = adapter.scale();
  const float* pa = adapter.a().data().data();
  const float* pb = adapter.b().data().data();
  std::vector<float> merged(w.data().begin(), w.data().end());
  std::vector<float> column(k);
  for (std::size_t j = 0; j < in; ++j) {
    for (std::size_t r = 0; r < k; ++r) column[r] = pa[r * in + j];
    for (std::size_t i = 0; i < out; ++i) {
      merged[i * in + j] += s * kernels::dot(pb + i * k, column.data(), k);
    }
  }
  return Tensor::from_vector(w.shape(), std::move(merged));
}

const char* projection_name(ProjectionMap map) {
  switch (map) {
    case ProjectionMap::kQuery: return "wq";
    case ProjectionMap::kKey: return "wk";
    case ProjectionMap::kValue: return "wv";
    case ProjectionMap::kOutput: return "wo";
  }
  return "?";
}

std::size_t AdapterPlacement::maps_per_layer() const {
  std::size_t n = 0;
  for (bool m : maps) n += m ? 1 : 0;
  return n;
}

TrainableCount count_trainable(const ModelConfig& config,
                               const AdapterPlacement& placement,
                               const LoraConfig& lora) {
  const std::uint64_t d = config.d_model;
  const std::uint64_t per_model =
      config.n_layers * placement.maps_per_layer() * 2 * d * lora.rank;
  const std::uint64_t models =
      (placement.adapt_policy ? 1 : 0) + (placement.adapt_value ? 1 : 0);
  TrainableCount count;
  count.adapter_parameters = per_model * models;
  if (placement.full_tune_value_head) count.value_head_parameters = d + 1;
  return count;
}

}  // namespace lab
