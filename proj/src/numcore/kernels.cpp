#include "lab/numcore/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace lab::kernels {

float dot(const float* a, const float* b, std::size_t n) {
  constexpr std::size_t kLanes = 16;
  float acc[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    for (std::size_t l = 0; l < kLanes; ++l) acc[l] += a[i + l] * b[i + l];
  }
  float tail = 0.0f;
  for (; i < n; ++i) tail += a[i] * b[i];
  for (std::size_t width = kLanes / 2; width > 0; width /= 2) {
    for (std::size_t l = 0; l < width; ++l) acc[l] += acc[l + width];
  }
  return acc[0] + tail;
}

void axpy(float alpha, const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void linear(const float* x, std::size_t rows, std::size_t in, const float* w,
            std::size_t out, float* y) {
  for (std::size_t i = 0; i < rows; ++i) {
    const float* xi = x + i * in;
    float* yi = y + i * out;
    for (std::size_t j = 0; j < out; ++j) yi[j] = dot(xi, w + j * in, in);
  }
}

float rms_norm_row(const float* x, const float* gain, std::size_t n, float eps,
                   float* y) {
  const float mean_sq = dot(x, x, n) / static_cast<float>(n);
  const float inv = 1.0f / std::sqrt(mean_sq + eps);
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] * inv * gain[i];
  return inv;
}

namespace {
constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715f;
}  // namespace

float gelu(float x) {
  const float t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  return 0.5f * x * (1.0f + t);
}

float gelu_grad(float x) {
  const float t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  const float dt = (1.0f - t * t) * kGeluC * (1.0f + 3.0f * kGeluA * x * x);
  return 0.5f * (1.0f + t) + 0.5f * x * dt;
}

void attend(const float* q, const float* k, const float* v, std::size_t n_keys,
            std::size_t head_dim, std::size_t stride, float scale, float* probs,
            float* out) {
  float max_score = -INFINITY;
  for (std::size_t u = 0; u < n_keys; ++u) {
    probs[u] = dot(q, k + u * stride, head_dim) * scale;
    max_score = std::max(max_score, probs[u]);
  }
  float total = 0.0f;
  for (std::size_t u = 0; u < n_keys; ++u) {
    probs[u] = std::exp(probs[u] - max_score);
    total += probs[u];
  }
  const float inv_total = 1.0f / total;
  std::fill(out, out + head_dim, 0.0f);
  for (std::size_t u = 0; u < n_keys; ++u) {
    probs[u] *= inv_total;
    axpy(probs[u], v + u * stride, out, head_dim);
  }
}

void log_softmax_row(const float* x, std::size_t n, float* y) {
  const float max_value = *std::max_element(x, x + n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    total += std::exp(static_cast<double>(x[i]) - max_value);
  }
  const double log_z = static_cast<double>(max_value) + std::log(total);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = static_cast<float>(static_cast<double>(x[i]) - log_z);
  }
}

}  // namespace lab::kernels
