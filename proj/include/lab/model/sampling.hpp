#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "lab/model/transformer.hpp"
#include "lab/numcore/rng.hpp"

namespace lab {

// Key/value-cached single-sequence decoder. Uses the same row kernels as the
// batched forward, so step(t) returns exactly row t of forward_logprobs.
class IncrementalDecoder {
 public:
  explicit IncrementalDecoder(const PolicyModel& model);

  // Feeds the token at the next position and returns the log-distribution
  // over the token that follows it. The span is valid until the next call.
  std::span<const float> step(int token);
  std::size_t position() const noexcept { return position_; }

 private:
  void project(const float* x, const TransformerLayer& layer, ProjectionMap map,
               float* y);

  const PolicyModel& model_;
  std::size_t position_ = 0;
  std::vector<std::vector<float>> keys_;
  std::vector<std::vector<float>> values_;
  std::vector<float> x_, normed_, q_, k_, v_, attn_, proj_, low_, low_out_, ff_,
      probs_, logits_, logprobs_;
};

struct SampleOptions {
  std::size_t max_new = 16;
  float temperature = 1.0f;
  bool greedy = false;
};

struct SampledResponse {
  std::vector<int> tokens;       // includes the end-of-sequence token if emitted
  std::vector<float> logprobs;   // temperature-1 log-probability of each token
};

// Ancestral sampling until the end-of-sequence token, max_new tokens or the
// context limit. Greedy takes the first arg-max.
SampledResponse sample_response(const PolicyModel& model, const std::vector<int>& prompt,
                                Rng& rng, const SampleOptions& options);

}  // namespace lab
