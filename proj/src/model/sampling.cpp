#include "lab/model/sampling.hpp"

#include <algorithm>
#include <cmath>

#include "lab/numcore/errors.hpp"
#include "lab/numcore/kernels.hpp"

namespace lab {

IncrementalDecoder::IncrementalDecoder(const PolicyModel& model) : model_(model) {
  const ModelConfig& c = model.config();
  keys_.assign(c.n_layers, std::vector<float>(c.max_seq_len * c.d_model));
  values_.assign(c.n_layers, std::vector<float>(c.max_seq_len * c.d_model));
  x_.resize(c.d_model);
  normed_.resize(c.d_model);
  q_.resize(c.d_model);
  attn_.resize(c.d_model);
  proj_.resize(c.d_model);
  low_out_.resize(c.d_model);
  ff_.resize(c.d_ff);
  probs_.resize(c.max_seq_len);
  logits_.resize(c.vocab_size);
  logprobs_.resize(c.vocab_size);
}

// Mirrors linear / lora_forward for a single row.
void IncrementalDecoder::project(const float* x, const TransformerLayer& layer,
                                 ProjectionMap map, float* y) {
  const std::size_t d = model_.config().d_model;
  kernels::linear(x, 1, d, layer.weight(map).data().data(), d, y);
  const auto& adapter = layer.adapter(map);
  if (!adapter) return;
  const std::size_t k = adapter->rank();
  low_.resize(k);
  kernels::linear(x, 1, d, adapter->a().data().data(), k, low_.data());
  kernels::linear(low_.data(), 1, k, adapter->b().data().data(), d, low_out_.data());
  const float s = adapter->scale();
  for (std::size_t i = 0; i < d; ++i) y[i] = y[i] + s * low_out_[i];
}

std::span<const float> IncrementalDecoder::step(int token) {
  const ModelConfig& c = model_.config();
  const Transformer& trunk = model_.trunk();
  const std::size_t d = c.d_model, t = position_;
  if (t >= c.max_seq_len) {
    throw LengthError("decoder position " + std::to_string(t) +
                      " exceeds maximum " + std::to_string(c.max_seq_len));
  }
  if (token < 0 || static_cast<std::size_t>(token) >= c.vocab_size) {
    throw VocabularyError("token id " + std::to_string(token) +
                          " outside vocabulary of size " + std::to_string(c.vocab_size));
  }
  const float* tok = trunk.token_embedding().data().data() + static_cast<std::size_t>(token) * d;
  const float* pos = trunk.position_embedding().data().data() + t * d;
  for (std::size_t i = 0; i < d; ++i) x_[i] = tok[i] + pos[i];

  const std::size_t hd = d / c.n_heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const TransformerLayer& layer = trunk.layers()[l];
    kernels::rms_norm_row(x_.data(), layer.attn_norm.data().data(), d, kNormEps,
                          normed_.data());
    float* k_row = keys_[l].data() + t * d;
    float* v_row = values_[l].data() + t * d;
    project(normed_.data(), layer, ProjectionMap::kQuery, q_.data());
    project(normed_.data(), layer, ProjectionMap::kKey, k_row);
    project(normed_.data(), layer, ProjectionMap::kValue, v_row);
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      const std::size_t col = h * hd;
      kernels::attend(q_.data() + col, keys_[l].data() + col, values_[l].data() + col,
                      t + 1, hd, d, scale, probs_.data(), attn_.data() + col);
    }
    project(attn_.data(), layer, ProjectionMap::kOutput, proj_.data());
    for (std::size_t i = 0; i < d; ++i) x_[i] = x_[i] + proj_[i];

    kernels::rms_norm_row(x_.data(), layer.ffn_norm.data().data(), d, kNormEps,
                          normed_.data());
    kernels::linear(normed_.data(), 1, d, layer.w1.data().data(), c.d_ff, ff_.data());
    const float* b1 = layer.b1.data().data();
    for (std::size_t j = 0; j < c.d_ff; ++j) ff_[j] = kernels::gelu(ff_[j] + b1[j]);
    kernels::linear(ff_.data(), 1, c.d_ff, layer.w2.data().data(), d, proj_.data());
    const float* b2 = layer.b2.data().data();
    for (std::size_t i = 0; i < d; ++i) proj_[i] = proj_[i] + b2[i];
    for (std::size_t i = 0; i < d; ++i) x_[i] = x_[i] + proj_[i];
  }
  kernels::rms_norm_row(x_.data(), trunk.final_norm().data().data(), d, kNormEps,
                        normed_.data());
  kernels::linear(normed_.data(), 1, d, model_.unembedding().data().data(), c.vocab_size,
                  logits_.data());
  kernels::log_softmax_row(logits_.data(), c.vocab_size, logprobs_.data());
  ++position_;
  return logprobs_;
}

SampledResponse sample_response(const PolicyModel& model, const std::vector<int>& prompt,
                                Rng& rng, const SampleOptions& options) {
  const ModelConfig& c = model.config();
  if (options.max_new < 1) throw InputError("sample_response: max_new must be >= 1");
  if (!(options.temperature > 0.0f)) {
    throw InputError("sample_response: temperature must be positive");
  }
  if (prompt.empty()) throw InputError("sample_response: empty prompt");
  if (prompt.size() >= c.max_seq_len) {
    throw LengthError("prompt length " + std::to_string(prompt.size()) +
                      " leaves no room below maximum " + std::to_string(c.max_seq_len));
  }
  IncrementalDecoder decoder(model);
  std::span<const float> row;
  for (int token : prompt) row = decoder.step(token);

  SampledResponse out;
  std::vector<float> tempered(c.vocab_size), tempered_lp(c.vocab_size);
  while (true) {
    int next;
    if (options.greedy) {
      next = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    } else if (options.temperature == 1.0f) {
      next = static_cast<int>(rng.categorical_from_logprobs(row));
    } else {
      for (std::size_t i = 0; i < row.size(); ++i) tempered[i] = row[i] / options.temperature;
      kernels::log_softmax_row(tempered.data(), row.size(), tempered_lp.data());
      next = static_cast<int>(rng.categorical_from_logprobs(tempered_lp));
    }
    out.tokens.push_back(next);
    out.logprobs.push_back(row[static_cast<std::size_t>(next)]);
    if (next == c.eos_token || out.tokens.size() >= options.max_new ||
        decoder.position() + 1 >= c.max_seq_len) {
      break;
    }
    row = decoder.step(next);
  }
  return out;
}

}  // namespace lab
