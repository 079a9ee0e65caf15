#include "lab/numcore/adam.hpp"

#include <cmath>

#include "lab/numcore/errors.hpp"

namespace lab {

void adam_step(std::span<float> params, std::span<const float> grads,
               std::span<float> first_moment, std::span<float> second_moment,
               long step, const AdamOptions& options) {
  if (grads.size() != params.size() || first_moment.size() != params.size() ||
      second_moment.size() != params.size()) {
    throw DimensionError("adam_step: parameter, gradient and moment sizes differ");
  }
  if (step < 1) throw InputError("adam_step: step index starts at 1");
  const double bias1 = 1.0 - std::pow(static_cast<double>(options.beta1), step);
  const double bias2 = 1.0 - std::pow(static_cast<double>(options.beta2), step);
  const float step_size = static_cast<float>(options.learning_rate / bias1);
  const float inv_sqrt_bias2 = static_cast<float>(1.0 / std::sqrt(bias2));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const float g = grads[i];
    first_moment[i] = options.beta1 * first_moment[i] + (1.0f - options.beta1) * g;
    second_moment[i] =
        options.beta2 * second_moment[i] + (1.0f - options.beta2) * g * g;
    const float denom = std::sqrt(second_moment[i]) * inv_sqrt_bias2 + options.eps;
    params[i] -= step_size * first_moment[i] / denom;
  }
}

Adam::Adam(AdamOptions options) : options_(options) {}

void Adam::add_parameter(std::string name, Tensor param) {
  if (!param.requires_grad()) {
    throw InputError("Adam: parameter '" + name + "' does not require grad");
  }
  const std::size_t n = param.numel();
  slots_.push_back(Slot{std::move(name), std::move(param),
                        std::vector<float>(n, 0.0f), std::vector<float>(n, 0.0f)});
}

void Adam::step() {
  double norm_sq = 0.0;
  for (const Slot& slot : slots_) {
    for (float g : slot.param.grad()) {
      if (!std::isfinite(g)) {
        throw TrainingDivergence("non-finite gradient for parameter '" +
                                     slot.name + "'",
                                 slot.name, step_ + 1);
      }
      norm_sq += static_cast<double>(g) * g;
    }
  }
  last_grad_norm_ = std::sqrt(norm_sq);
  float clip = 1.0f;
  if (options_.max_grad_norm > 0.0f && last_grad_norm_ > options_.max_grad_norm) {
    clip = static_cast<float>(options_.max_grad_norm / last_grad_norm_);
  }
  ++step_;
  std::vector<float> scaled;
  for (Slot& slot : slots_) {
    if (!slot.param.has_grad()) continue;
    std::span<const float> grads = slot.param.grad();
    if (clip != 1.0f) {
      scaled.assign(grads.begin(), grads.end());
      for (float& g : scaled) g *= clip;
      grads = scaled;
    }
    adam_step(slot.param.mutable_data(), grads, slot.first_moment,
              slot.second_moment, step_, options_);
  }
}

void Adam::zero_grad() {
  for (Slot& slot : slots_) slot.param.clear_grad();
}

}  // namespace lab
