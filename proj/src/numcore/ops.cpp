#include "lab/numcore/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

#include "lab/numcore/errors.hpp"
#include "lab/numcore/kernels.hpp"

namespace lab {
namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got " +
                         shape_to_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
}

template <typename F>
Tensor elementwise_binary(const Tensor& a, const Tensor& b, const char* name,
                          F f, float da_sign, float db_sign) {
  require_same_shape(a, b, name);
  const auto x = a.data();
  const auto y = b.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[i]);
  return make_result(
      a.shape(), std::move(out), {a, b},
      [da_sign, db_sign](std::span<const float> g, std::span<Tensor> in) {
        for (int side = 0; side < 2; ++side) {
          if (!in[side].requires_grad()) continue;
          const float sign = side == 0 ? da_sign : db_sign;
          auto slot = in[side].grad_slot();
          for (std::size_t i = 0; i < g.size(); ++i) slot[i] += sign * g[i];
        }
      },
      name);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents differ, " +
                         shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
  }
  const float* pa = a.data().data();
  const float* pb = b.data().data();
  std::vector<float> out(m * n, 0.0f);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      kernels::axpy(pa[i * k + p], pb + p * n, out.data() + i * n, n);
    }
  }
  return make_result(
      {m, n}, std::move(out), {a, b},
      [m, k, n](std::span<const float> g, std::span<Tensor> in) {
        const float* pa = in[0].data().data();
        const float* pb = in[1].data().data();
        if (in[0].requires_grad()) {
          float* ga = in[0].grad_slot().data();
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              ga[i * k + p] += kernels::dot(g.data() + i * n, pb + p * n, n);
            }
          }
        }
        if (in[1].requires_grad()) {
          float* gb = in[1].grad_slot().data();
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              kernels::axpy(pa[i * k + p], g.data() + i * n, gb + p * n, n);
            }
          }
        }
      },
      "matmul");
}

Tensor linear(const Tensor& x, const Tensor& w) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  const std::size_t m = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
  if (w.dim(1) != in) {
    throw DimensionError("linear: input " + shape_to_string(x.shape()) +
                         " incompatible with weight " +
                         shape_to_string(w.shape()));
  }
  std::vector<float> out(m * out_dim);
  kernels::linear(x.data().data(), m, in, w.data().data(), out_dim, out.data());
  return make_result(
      {m, out_dim}, std::move(out), {x, w},
      [m, in, out_dim](std::span<const float> g, std::span<Tensor> inputs) {
        const float* px = inputs[0].data().data();
        const float* pw = inputs[1].data().data();
        if (inputs[0].requires_grad()) {
          float* gx = inputs[0].grad_slot().data();
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < out_dim; ++j) {
              kernels::axpy(g[i * out_dim + j], pw + j * in, gx + i * in, in);
            }
          }
        }
        if (inputs[1].requires_grad()) {
          float* gw = inputs[1].grad_slot().data();
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < out_dim; ++j) {
              kernels::axpy(g[i * out_dim + j], px + i * in, gw + j * in, in);
            }
          }
        }
      },
      "linear");
}

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise_binary(a, b, "add", [](float x, float y) { return x + y; },
                            1.0f, 1.0f);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise_binary(a, b, "sub", [](float x, float y) { return x - y; },
                            1.0f, -1.0f);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto x = a.data();
  const auto y = b.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result(
      a.shape(), std::move(out), {a, b},
      [](std::span<const float> g, std::span<Tensor> in) {
        for (int side = 0; side < 2; ++side) {
          if (!in[side].requires_grad()) continue;
          const auto other = in[1 - side].data();
          auto slot = in[side].grad_slot();
          for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i] * other[i];
        }
      },
      "mul");
}

Tensor scale(const Tensor& a, float s) {
  const auto x = a.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * x[i];
  return make_result(
      a.shape(), std::move(out), {a},
      [s](std::span<const float> g, std::span<Tensor> in) {
        auto slot = in[0].grad_slot();
        for (std::size_t i = 0; i < g.size(); ++i) slot[i] += s * g[i];
      },
      "scale");
}

Tensor add_scaled(const Tensor& a, const Tensor& b, float s) {
  require_same_shape(a, b, "add_scaled");
  const auto x = a.data();
  const auto y = b.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + s * y[i];
  return make_result(
      a.shape(), std::move(out), {a, b},
      [s](std::span<const float> g, std::span<Tensor> in) {
        if (in[0].requires_grad()) in[0].accumulate_grad(g);
        if (in[1].requires_grad()) {
          auto slot = in[1].grad_slot();
          for (std::size_t i = 0; i < g.size(); ++i) slot[i] += s * g[i];
        }
      },
      "add_scaled");
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_bias");
  require_rank(bias, 1, "add_bias");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (bias.dim(0) != n) {
    throw DimensionError("add_bias: " + shape_to_string(x.shape()) + " + " +
                         shape_to_string(bias.shape()));
  }
  const auto px = x.data();
  const auto pb = bias.data();
  std::vector<float> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = px[i * n + j] + pb[j];
  }
  return make_result(
      x.shape(), std::move(out), {x, bias},
      [m, n](std::span<const float> g, std::span<Tensor> in) {
        if (in[0].requires_grad()) in[0].accumulate_grad(g);
        if (in[1].requires_grad()) {
          auto slot = in[1].grad_slot();
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) slot[j] += g[i * n + j];
          }
        }
      },
      "add_bias");
}

Tensor gelu(const Tensor& x) {
  const auto px = x.data();
  std::vector<float> out(px.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = kernels::gelu(px[i]);
  return make_result(
      x.shape(), std::move(out), {x},
      [](std::span<const float> g, std::span<Tensor> in) {
        const auto px = in[0].data();
        auto slot = in[0].grad_slot();
        for (std::size_t i = 0; i < g.size(); ++i) {
          slot[i] += g[i] * kernels::gelu_grad(px[i]);
        }
      },
      "gelu");
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, float eps) {
  require_rank(x, 2, "rms_norm");
  require_rank(gain, 1, "rms_norm");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (gain.dim(0) != n) {
    throw DimensionError("rms_norm: " + shape_to_string(x.shape()) +
                         " with gain " + shape_to_string(gain.shape()));
  }
  std::vector<float> out(m * n);
  auto inv = std::make_shared<std::vector<float>>(m);
  const float* px = x.data().data();
  const float* pg = gain.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    (*inv)[i] = kernels::rms_norm_row(px + i * n, pg, n, eps, out.data() + i * n);
  }
  return make_result(
      x.shape(), std::move(out), {x, gain},
      [m, n, inv](std::span<const float> g, std::span<Tensor> in) {
        const float* px = in[0].data().data();
        const float* pg = in[1].data().data();
        if (in[0].requires_grad()) {
          float* gx = in[0].grad_slot().data();
          for (std::size_t i = 0; i < m; ++i) {
            const float r = (*inv)[i];
            const float* xi = px + i * n;
            const float* gi = g.data() + i * n;
            float proj = 0.0f;
            for (std::size_t j = 0; j < n; ++j) proj += gi[j] * pg[j] * xi[j];
            const float coeff = r * r * r * proj / static_cast<float>(n);
            for (std::size_t j = 0; j < n; ++j) {
              gx[i * n + j] += gi[j] * pg[j] * r - coeff * xi[j];
            }
          }
        }
        if (in[1].requires_grad()) {
          float* gg = in[1].grad_slot().data();
          for (std::size_t i = 0; i < m; ++i) {
            const float r = (*inv)[i];
            for (std::size_t j = 0; j < n; ++j) {
              gg[j] += g[i * n + j] * px[i * n + j] * r;
            }
          }
        }
      },
      "rms_norm");
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_rank(table, 2, "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw InputError("embedding: empty id list");
  std::vector<int> idx(ids.begin(), ids.end());
  std::vector<float> out(idx.size() * d);
  const float* pt = table.data().data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= vocab) {
      throw VocabularyError("token id " + std::to_string(idx[i]) +
                            " outside vocabulary of size " + std::to_string(vocab));
    }
    std::copy_n(pt + static_cast<std::size_t>(idx[i]) * d, d, out.data() + i * d);
  }
  const std::size_t rows = idx.size();
  return make_result(
      {rows, d}, std::move(out), {table},
      [idx = std::move(idx), d](std::span<const float> g, std::span<Tensor> in) {
        float* gt = in[0].grad_slot().data();
        for (std::size_t i = 0; i < idx.size(); ++i) {
          kernels::axpy(1.0f, g.data() + i * d,
                        gt + static_cast<std::size_t>(idx[i]) * d, d);
        }
      },
      "embedding");
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::size_t batch, std::size_t seq, std::size_t heads) {
  require_rank(q, 2, "causal_attention");
  require_same_shape(q, k, "causal_attention");
  require_same_shape(q, v, "causal_attention");
  const std::size_t d = q.dim(1);
  if (q.dim(0) != batch * seq || heads == 0 || d % heads != 0) {
    throw DimensionError("causal_attention: " + shape_to_string(q.shape()) +
                         " does not split into batch " + std::to_string(batch) +
                         ", seq " + std::to_string(seq) + ", heads " +
                         std::to_string(heads));
  }
  const std::size_t hd = d / heads;
  const float scale_factor = 1.0f / std::sqrt(static_cast<float>(hd));
  auto probs = std::make_shared<std::vector<float>>(batch * heads * seq * seq, 0.0f);
  std::vector<float> out(batch * seq * d);
  const float* pq = q.data().data();
  const float* pk = k.data().data();
  const float* pv = v.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t col = h * hd;
      const float* kb = pk + b * seq * d + col;
      const float* vb = pv + b * seq * d + col;
      for (std::size_t t = 0; t < seq; ++t) {
        const std::size_t row = b * seq + t;
        kernels::attend(pq + row * d + col, kb, vb, t + 1, hd, d, scale_factor,
                        probs->data() + ((b * heads + h) * seq + t) * seq,
                        out.data() + row * d + col);
      }
    }
  }
  return make_result(
      q.shape(), std::move(out), {q, k, v},
      [=](std::span<const float> g, std::span<Tensor> in) {
        const float* pq = in[0].data().data();
        const float* pk = in[1].data().data();
        const float* pv = in[2].data().data();
        // Gradients for all three are needed by the chain below; buffers for
        // inputs that do not require grad are discarded.
        std::vector<float> gq(batch * seq * d, 0.0f), gk(gq.size(), 0.0f),
            gv(gq.size(), 0.0f);
        std::vector<float> dp(seq);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t col = h * hd;
            for (std::size_t t = 0; t < seq; ++t) {
              const std::size_t row = b * seq + t;
              const float* p = probs->data() + ((b * heads + h) * seq + t) * seq;
              const float* go = g.data() + row * d + col;
              float weighted = 0.0f;
              for (std::size_t u = 0; u <= t; ++u) {
                const std::size_t key_row = b * seq + u;
                dp[u] = kernels::dot(go, pv + key_row * d + col, hd);
                kernels::axpy(p[u], go, gv.data() + key_row * d + col, hd);
                weighted += p[u] * dp[u];
              }
              for (std::size_t u = 0; u <= t; ++u) {
                const std::size_t key_row = b * seq + u;
                const float ds = p[u] * (dp[u] - weighted) * scale_factor;
                kernels::axpy(ds, pk + key_row * d + col, gq.data() + row * d + col, hd);
                kernels::axpy(ds, pq + row * d + col, gk.data() + key_row * d + col, hd);
              }
            }
          }
        }
        if (in[0].requires_grad()) in[0].accumulate_grad(gq);
        if (in[1].requires_grad()) in[1].accumulate_grad(gk);
        if (in[2].requires_grad()) in[2].accumulate_grad(gv);
      },
      "causal_attention");
}

Tensor softmax_logprobs(const Tensor& logits) {
  if (logits.rank() == 0) throw DimensionError("softmax_logprobs: rank 0 input");
  const std::size_t n = logits.shape().back();
  if (n < 2) {
    throw DimensionError("softmax_logprobs: last extent must be >= 2, got " +
                         shape_to_string(logits.shape()));
  }
  const std::size_t rows = logits.numel() / n;
  std::vector<float> out(logits.numel());
  const float* px = logits.data().data();
  for (std::size_t i = 0; i < rows; ++i) {
    kernels::log_softmax_row(px + i * n, n, out.data() + i * n);
  }
  auto saved = std::make_shared<std::vector<float>>(out);
  return make_result(
      logits.shape(), std::move(out), {logits},
      [rows, n, saved](std::span<const float> g, std::span<Tensor> in) {
        float* gx = in[0].grad_slot().data();
        for (std::size_t i = 0; i < rows; ++i) {
          const float* gi = g.data() + i * n;
          const float* yi = saved->data() + i * n;
          float total = 0.0f;
          for (std::size_t j = 0; j < n; ++j) total += gi[j];
          for (std::size_t j = 0; j < n; ++j) {
            gx[i * n + j] += gi[j] - std::exp(yi[j]) * total;
          }
        }
      },
      "softmax_logprobs");
}

Tensor gather_columns(const Tensor& x, std::span<const int> index) {
  require_rank(x, 2, "gather_columns");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (index.size() != m) {
    throw DimensionError("gather_columns: " + std::to_string(index.size()) +
                         " indices for " + shape_to_string(x.shape()));
  }
  std::vector<int> idx(index.begin(), index.end());
  std::vector<float> out(m);
  const auto px = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= n) {
      throw VocabularyError("gather_columns: column " + std::to_string(idx[i]) +
                            " outside " + std::to_string(n));
    }
    out[i] = px[i * n + static_cast<std::size_t>(idx[i])];
  }
  return make_result(
      {m}, std::move(out), {x},
      [idx = std::move(idx), n](std::span<const float> g, std::span<Tensor> in) {
        auto slot = in[0].grad_slot();
        for (std::size_t i = 0; i < idx.size(); ++i) {
          slot[i * n + static_cast<std::size_t>(idx[i])] += g[i];
        }
      },
      "gather_columns");
}

Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_rank(x, 2, "select_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (rows.empty()) throw InputError("select_rows: empty selection");
  std::vector<std::size_t> sel(rows.begin(), rows.end());
  std::vector<float> out(sel.size() * n);
  const float* px = x.data().data();
  for (std::size_t r = 0; r < sel.size(); ++r) {
    if (sel[r] >= m) {
      throw DimensionError("select_rows: row " + std::to_string(sel[r]) +
                           " outside " + shape_to_string(x.shape()));
    }
    std::copy_n(px + sel[r] * n, n, out.data() + r * n);
  }
  const std::size_t count = sel.size();
  return make_result(
      {count, n}, std::move(out), {x},
      [sel = std::move(sel), n](std::span<const float> g, std::span<Tensor> in) {
        float* gx = in[0].grad_slot().data();
        for (std::size_t r = 0; r < sel.size(); ++r) {
          kernels::axpy(1.0f, g.data() + r * n, gx + sel[r] * n, n);
        }
      },
      "select_rows");
}

Tensor dropout(const Tensor& x, float p, Rng& rng) {
  if (p < 0.0f || p >= 1.0f) throw InputError("dropout: p must lie in [0, 1)");
  if (p == 0.0f) return x;
  const float keep_scale = 1.0f / (1.0f - p);
  auto mask = std::make_shared<std::vector<float>>(x.numel());
  const auto px = x.data();
  std::vector<float> out(px.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = rng.uniform() >= p ? keep_scale : 0.0f;
    out[i] = px[i] * (*mask)[i];
  }
  return make_result(
      x.shape(), std::move(out), {x},
      [mask](std::span<const float> g, std::span<Tensor> in) {
        auto slot = in[0].grad_slot();
        for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i] * (*mask)[i];
      },
      "dropout");
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_to_string(x.shape()) + " -> " +
                         shape_to_string(shape));
  }
  const auto px = x.data();
  return make_result(
      std::move(shape), std::vector<float>(px.begin(), px.end()), {x},
      [](std::span<const float> g, std::span<Tensor> in) {
        in[0].accumulate_grad(g);
      },
      "reshape");
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (float v : x.data()) total += v;
  return make_result(
      {1}, {static_cast<float>(total)}, {x},
      [](std::span<const float> g, std::span<Tensor> in) {
        auto slot = in[0].grad_slot();
        for (float& s : slot) s += g[0];
      },
      "sum");
}

Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0f / static_cast<float>(x.numel()));
}

Tensor weighted_sum(const Tensor& x, std::span<const float> weights) {
  if (weights.size() != x.numel()) {
    throw DimensionError("weighted_sum: " + std::to_string(weights.size()) +
                         " weights for " + shape_to_string(x.shape()));
  }
  std::vector<float> w(weights.begin(), weights.end());
  double total = 0.0;
  const auto px = x.data();
  for (std::size_t i = 0; i < w.size(); ++i) {
    total += static_cast<double>(w[i]) * px[i];
  }
  return make_result(
      {1}, {static_cast<float>(total)}, {x},
      [w = std::move(w)](std::span<const float> g, std::span<Tensor> in) {
        auto slot = in[0].grad_slot();
        for (std::size_t i = 0; i < w.size(); ++i) slot[i] += g[0] * w[i];
      },
      "weighted_sum");
}

}  // namespace lab
