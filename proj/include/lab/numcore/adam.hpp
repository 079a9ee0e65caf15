#pragma once

#include <span>
#include <string>
#include <vector>

#include "lab/numcore/tensor.hpp"

namespace lab {

struct AdamOptions {
  float learning_rate = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  // Global L2 gradient-norm cap applied before the update; 0 disables it.
  float max_grad_norm = 0.0f;
};

// One bias-corrected adaptive-moment update on raw arrays. `step` is the
// 1-based index of this update.
void adam_step(std::span<float> params, std::span<const float> grads,
               std::span<float> first_moment, std::span<float> second_moment,
               long step, const AdamOptions& options);

// Adam over a named parameter list. Parameters that received no gradient in
// the current accumulation window are left untouched.
class Adam {
 public:
  struct Slot {
    std::string name;
    Tensor param;
    std::vector<float> first_moment;
    std::vector<float> second_moment;
  };

  explicit Adam(AdamOptions options = {});

  void add_parameter(std::string name, Tensor param);
  // Throws TrainingDivergence naming the first parameter whose gradient holds
  // a non-finite value; no parameter is modified in that case.
  void step();
  void zero_grad();

  long step_count() const noexcept { return step_; }
  const AdamOptions& options() const noexcept { return options_; }
  void set_learning_rate(float lr) { options_.learning_rate = lr; }
  const std::vector<Slot>& slots() const noexcept { return slots_; }
  // L2 norm of the gradient before clipping, from the last step().
  double last_grad_norm() const noexcept { return last_grad_norm_; }

 private:
  AdamOptions options_;
  std::vector<Slot> slots_;
  long step_ = 0;
  double last_grad_norm_ = 0.0;
};

}  // namespace lab
