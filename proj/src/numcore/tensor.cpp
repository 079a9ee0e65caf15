#include "lab/numcore/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include "lab/numcore/errors.hpp"

namespace lab {
namespace {

thread_local bool g_grad_enabled = true;

void check_finite(std::span<const float> values, const char* name) {
  for (float v : values) {
    if (!std::isfinite(v)) {
      throw TrainingDivergence(std::string("non-finite value produced by ") + name);
    }
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0f, requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from_vector(std::move(shape), std::vector<float>(n, value),
                     requires_grad);
}

Tensor Tensor::from_vector(Shape shape, std::vector<float> values,
                           bool requires_grad) {
  for (std::size_t extent : shape) {
    if (extent == 0) throw DimensionError("tensor extents must be positive");
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_to_string(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  check_finite(values, "Tensor::from_vector");
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return from_vector({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_to_string(impl_->shape));
  }
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }

std::span<const float> Tensor::data() const { return impl_->data; }

std::span<float> Tensor::mutable_data() { return impl_->data; }

float Tensor::item() const {
  if (numel() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_to_string(shape()));
  }
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

void Tensor::set_requires_grad(bool value) { impl_->requires_grad = value; }

bool Tensor::has_grad() const { return !impl_->grad.empty(); }

std::span<const float> Tensor::grad() const { return impl_->grad; }

std::span<float> Tensor::grad_slot() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
  return impl_->grad;
}

void Tensor::accumulate_grad(std::span<const float> g) const {
  auto slot = grad_slot();
  if (g.size() != slot.size()) {
    throw DimensionError("gradient size mismatch for " + shape_to_string(shape()));
  }
  for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

void Tensor::clear_grad() {
  impl_->grad.clear();
  impl_->grad.shrink_to_fit();
}

bool Tensor::is_leaf() const { return impl_->grad_fn == nullptr; }

void Tensor::backward() const {
  if (numel() != 1) {
    throw DimensionError("backward() needs a scalar, got " +
                         shape_to_string(shape()));
  }
  ComputeGraph::trace(*this).backward();
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  impl->requires_grad = impl_->requires_grad;
  return Tensor(std::move(impl));
}

Tensor make_result(Shape shape, std::vector<float> data,
                   std::vector<Tensor> inputs, BackwardFn backward,
                   const char* name) {
  check_finite(data, name);
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  const bool track =
      g_grad_enabled &&
      std::any_of(inputs.begin(), inputs.end(),
                  [](const Tensor& t) { return t.defined() && t.requires_grad(); });
  if (track) {
    impl->requires_grad = true;
    auto node = std::make_shared<detail::Node>();
    node->name = name;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
    impl->grad_fn = std::move(node);
  }
  return Tensor(std::move(impl));
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

ComputeGraph ComputeGraph::trace(const Tensor& root) {
  ComputeGraph graph;
  std::unordered_set<const detail::TensorImpl*> visited;
  // Iterative post-order DFS; a node is emitted after all of its inputs.
  std::vector<std::pair<Tensor, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root.impl());
  while (!stack.empty()) {
    auto& [tensor, next_input] = stack.back();
    const auto& fn = tensor.impl()->grad_fn;
    if (fn && next_input < fn->inputs.size()) {
      const Tensor& child = fn->inputs[next_input++];
      if (child.defined() && child.requires_grad() &&
          visited.insert(child.impl()).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    graph.order_.push_back(tensor);
    stack.pop_back();
  }
  return graph;
}

void ComputeGraph::backward() {
  if (order_.empty()) return;
  const Tensor& root = order_.back();
  if (!root.requires_grad()) {
    throw InputError("backward() on a tensor that does not require grad");
  }
  std::vector<float> seed(root.numel(), 1.0f);
  root.accumulate_grad(seed);
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    Tensor& t = *it;
    auto& fn = t.impl()->grad_fn;
    if (!fn || !t.has_grad()) continue;
    fn->backward(t.grad(), fn->inputs);
    t.clear_grad();
  }
}

}  // namespace lab
