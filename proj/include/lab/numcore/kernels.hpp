#pragma once

#include <cstddef>

// Row-level float kernels shared by the autograd ops and the incremental
// decoder. Both paths call these same functions, so a token's logits are
// bitwise identical whether computed in a padded batch or one step at a time.
namespace lab::kernels {

// Fixed-order dot product (16 interleaved partial sums, pairwise combined).
float dot(const float* a, const float* b, std::size_t n);

// y += alpha * x
void axpy(float alpha, const float* x, float* y, std::size_t n);

// y[i, j] = dot(x[i, :], w[j, :]) for x [rows x in], w [out x in].
void linear(const float* x, std::size_t rows, std::size_t in, const float* w,
            std::size_t out, float* y);

// Returns the inverse RMS used for the row.
float rms_norm_row(const float* x, const float* gain, std::size_t n, float eps,
                   float* y);

float gelu(float x);
float gelu_grad(float x);

// Single causal attention query over `n_keys` cached keys/values. `k` and `v`
// point at the head's column block of row 0 and advance by `stride` per key.
// Writes the attention weights into `probs` (length n_keys) and the head
// output into `out` (length head_dim).
void attend(const float* q, const float* k, const float* v, std::size_t n_keys,
            std::size_t head_dim, std::size_t stride, float scale, float* probs,
            float* out);

// Max-subtracted log-softmax of one row.
void log_softmax_row(const float* x, std::size_t n, float* y);

}  // namespace lab::kernels
