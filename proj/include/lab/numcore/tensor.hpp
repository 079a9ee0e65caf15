#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace lab {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

class Tensor;

namespace detail {

struct Node;

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;
};

}  // namespace detail

// Receives the gradient of the op's output and accumulates into the inputs
// that require it (via Tensor::accumulate_grad).
using BackwardFn =
    std::function<void(std::span<const float> grad_out, std::span<Tensor> inputs)>;

// Dense row-major float32 array with an optional gradient slot. Copies share
// storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from_vector(Shape shape, std::vector<float> values,
                            bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const float> data() const;
  // Writes bypass the graph; only for leaves (optimizer updates, loading).
  std::span<float> mutable_data();
  float item() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const float> grad() const;
  // Adds `g` into the gradient slot, allocating it on first use.
  void accumulate_grad(std::span<const float> g) const;
  std::span<float> grad_slot() const;
  void zero_grad();
  void clear_grad();

  bool is_leaf() const;
  // Reverse-mode sweep from this scalar.
  void backward() const;
  // Deep copy with no graph history; keeps requires_grad.
  Tensor clone() const;
  // Deep copy that never requires grad.
  Tensor detach() const {
    Tensor t = clone();
    t.set_requires_grad(false);
    return t;
  }

  detail::TensorImpl* impl() const noexcept { return impl_.get(); }
  bool same_storage(const Tensor& other) const noexcept {
    return impl_ == other.impl_;
  }

 private:
  friend Tensor make_result(Shape, std::vector<float>, std::vector<Tensor>,
                            BackwardFn, const char*);
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}

  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

struct Node {
  const char* name = "";
  std::vector<Tensor> inputs;
  BackwardFn backward;
};

}  // namespace detail

// Builds the output of a differentiable op. A graph node is attached only when
// gradient recording is on and some input requires grad. Throws
// TrainingDivergence if `data` holds a non-finite value.
Tensor make_result(Shape shape, std::vector<float> data,
                   std::vector<Tensor> inputs, BackwardFn backward,
                   const char* name);

// Thread-local switch for graph recording.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Topologically ordered view of the graph below a root: every entry's inputs
// appear before it.
class ComputeGraph {
 public:
  static ComputeGraph trace(const Tensor& root);

  const std::vector<Tensor>& order() const noexcept { return order_; }
  // Seeds d(root)/d(root) = 1 and runs each node's backward rule in reverse
  // order. Intermediate gradients are released afterwards; leaves keep theirs.
  void backward();

 private:
  std::vector<Tensor> order_;
};

}  // namespace lab
