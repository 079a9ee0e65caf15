#pragma once

#include <cstddef>
#include <span>

#include "lab/numcore/rng.hpp"
#include "lab/numcore/tensor.hpp"

// Differentiable operations. Every op validates shapes (DimensionError naming
// the offending shapes) and records a backward rule when gradients are on.
namespace lab {

// [m x k] . [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b);
// x [m x in], w [out x in] -> x . w^T [m x out]
Tensor linear(const Tensor& x, const Tensor& w);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
// a + s * b
Tensor add_scaled(const Tensor& a, const Tensor& b, float s);
// x [m x n] + bias [n] broadcast over rows.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor gelu(const Tensor& x);
Tensor rms_norm(const Tensor& x, const Tensor& gain, float eps = 1e-5f);
// Rows of `table` [V x d] selected by ids. Throws VocabularyError.
Tensor embedding(const Tensor& table, std::span<const int> ids);
// Multi-head causal self-attention over `batch` right-padded sequences of
// length `seq`. q, k, v, result: [batch*seq x d].
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::size_t batch, std::size_t seq, std::size_t heads);
// Log-probabilities along the last axis (extent >= 2).
Tensor softmax_logprobs(const Tensor& logits);
// out[i] = x[i, index[i]] for x [m x n].
Tensor gather_columns(const Tensor& x, std::span<const int> index);
// Rows of x [m x n] in the given order -> [r x n].
Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows);
// Inverted dropout with keep-probability 1 - p. p == 0 returns x.
Tensor dropout(const Tensor& x, float p, Rng& rng);
Tensor reshape(const Tensor& x, Shape shape);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// sum_i weights[i] * x[i]
Tensor weighted_sum(const Tensor& x, std::span<const float> weights);

}  // namespace lab
