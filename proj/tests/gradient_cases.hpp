#pragma once

// Table of differentiable numcore ops with double-precision references, shared
// by the unit suite and the acceptance gate.

#include <vector>

#include "gradcheck.hpp"

namespace lab::testing {

struct GradCase {
  const char* name;
  ImplFn fn;
  RefFn reference;
  std::vector<Shape> shapes;
};

inline std::vector<GradCase> numcore_gradient_cases() {
  namespace ref = lab::testing::ref;
  const std::vector<int> ids = {3, 0, 5, 3, 1};
  const std::vector<int> cols = {1, 0, 3, 2};
  const std::vector<std::size_t> rows = {2, 0, 2};
  const std::vector<float> weights = {0.5f, -1.0f, 2.0f, 0.25f, 1.5f, -0.75f};
  auto elementwise = [](auto op) {
    return [op](const std::vector<Vec>& in) {
      Vec y(in[0].size());
      for (std::size_t i = 0; i < y.size(); ++i)
        y[i] = op(in[0][i], in.size() > 1 ? in[1][i] : 0.0);
      return y;
    };
  };
  return {
      {"matmul", [](const auto& in) { return matmul(in[0], in[1]); },
       [](const auto& in) { return ref::matmul(in[0], in[1], 4, 6, 3); },
       {{4, 6}, {6, 3}}},
      {"linear", [](const auto& in) { return linear(in[0], in[1]); },
       [](const auto& in) { return ref::linear(in[0], in[1], 4, 6, 5); },
       {{4, 6}, {5, 6}}},
      {"add", [](const auto& in) { return add(in[0], in[1]); },
       elementwise([](double a, double b) { return a + b; }), {{3, 4}, {3, 4}}},
      {"sub", [](const auto& in) { return sub(in[0], in[1]); },
       elementwise([](double a, double b) { return a - b; }), {{3, 4}, {3, 4}}},
      {"mul", [](const auto& in) { return mul(in[0], in[1]); },
       elementwise([](double a, double b) { return a * b; }), {{3, 4}, {3, 4}}},
      {"scale", [](const auto& in) { return scale(in[0], -2.5f); },
       elementwise([](double a, double) { return -2.5 * a; }), {{3, 4}}},
      {"add_scaled", [](const auto& in) { return add_scaled(in[0], in[1], 8.0f); },
       elementwise([](double a, double b) { return a + 8.0 * b; }), {{3, 4}, {3, 4}}},
      {"add_bias", [](const auto& in) { return add_bias(in[0], in[1]); },
       [](const auto& in) {
         Vec y(in[0]);
         for (std::size_t i = 0; i < y.size(); ++i) y[i] += in[1][i % 4];
         return y;
       },
       {{3, 4}, {4}}},
      {"gelu", [](const auto& in) { return gelu(in[0]); },
       elementwise([](double a, double) { return ref::gelu(a); }), {{3, 5}}},
      {"rms_norm", [](const auto& in) { return rms_norm(in[0], in[1]); },
       [](const auto& in) { return ref::rms_norm(in[0], in[1], 3, 8); },
       {{3, 8}, {8}}},
      {"embedding", [=](const auto& in) { return embedding(in[0], ids); },
       [=](const auto& in) {
         Vec y;
         for (int id : ids)
           for (std::size_t j = 0; j < 4; ++j) y.push_back(in[0][id * 4 + j]);
         return y;
       },
       {{6, 4}}},
      {"causal_attention",
       [](const auto& in) { return causal_attention(in[0], in[1], in[2], 2, 3, 2); },
       [](const auto& in) { return ref::causal_attention(in[0], in[1], in[2], 2, 3, 2, 4); },
       {{6, 4}, {6, 4}, {6, 4}}},
      {"softmax_logprobs", [](const auto& in) { return softmax_logprobs(in[0]); },
       [](const auto& in) { return ref::log_softmax(in[0], 6); }, {{3, 6}}},
      {"gather_columns", [=](const auto& in) { return gather_columns(in[0], cols); },
       [=](const auto& in) {
         Vec y;
         for (std::size_t r = 0; r < 4; ++r) y.push_back(in[0][r * 5 + cols[r]]);
         return y;
       },
       {{4, 5}}},
      {"select_rows", [=](const auto& in) { return select_rows(in[0], rows); },
       [=](const auto& in) {
         Vec y;
         for (std::size_t r : rows)
           for (std::size_t j = 0; j < 4; ++j) y.push_back(in[0][r * 4 + j]);
         return y;
       },
       {{3, 4}}},
      {"dropout",
       [](const auto& in) {
         Rng mask_rng(99);
         return dropout(in[0], 0.3f, mask_rng);
       },
       [](const auto& in) {
         Rng mask_rng(99);
         Vec y(in[0].size());
         for (std::size_t i = 0; i < y.size(); ++i)
           y[i] = mask_rng.uniform() >= 0.3f ? in[0][i] / 0.7 : 0.0;
         return y;
       },
       {{4, 5}}},
      {"reshape", [](const auto& in) { return reshape(in[0], {6, 2}); },
       [](const auto& in) { return in[0]; }, {{3, 4}}},
      {"sum", [](const auto& in) { return sum(in[0]); },
       [](const auto& in) {
         double t = 0.0;
         for (double v : in[0]) t += v;
         return Vec{t};
       },
       {{3, 4}}},
      {"mean", [](const auto& in) { return mean(in[0]); },
       [](const auto& in) {
         double t = 0.0;
         for (double v : in[0]) t += v;
         return Vec{t / static_cast<double>(in[0].size())};
       },
       {{3, 4}}},
      {"weighted_sum", [=](const auto& in) { return weighted_sum(in[0], weights); },
       [=](const auto& in) {
         double t = 0.0;
         for (std::size_t i = 0; i < in[0].size(); ++i) t += weights[i] * in[0][i];
         return Vec{t};
       },
       {{2, 3}}},
  };
}

}  // namespace lab::testing
