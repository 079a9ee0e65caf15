#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "lab/lora/lora.hpp"
#include "lab/model/config.hpp"
#include "lab/numcore/rng.hpp"
#include "lab/numcore/tensor.hpp"

namespace lab {

constexpr float kNormEps = 1e-5f;

// Right-padded batch of token sequences, flattened row-major [batch x seq_len].
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<int> ids;
  std::vector<std::size_t> lengths;

  static TokenBatch pack(const std::vector<std::vector<int>>& sequences,
                         int pad_token = 0);
  std::size_t row(std::size_t b, std::size_t t) const { return b * seq_len + t; }
};

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

struct ForwardOptions {
  bool training = false;  // enables adapter dropout
  Rng* rng = nullptr;     // dropout masks; required when training
};

struct TransformerLayer {
  Tensor attn_norm;
  std::array<Tensor, 4> proj;  // wq, wk, wv, wo, each [d x d]
  Tensor ffn_norm;
  Tensor w1, b1, w2, b2;
  std::array<std::optional<LoraAdapter>, 4> adapters;

  const Tensor& weight(ProjectionMap m) const { return proj[static_cast<std::size_t>(m)]; }
  const std::optional<LoraAdapter>& adapter(ProjectionMap m) const {
    return adapters[static_cast<std::size_t>(m)];
  }
};

// Pre-norm causal transformer trunk with learned absolute positions and a
// GELU feed-forward. Produces final-normed hidden states.
class Transformer {
 public:
  Transformer(const ModelConfig& config, Rng& rng);

  const ModelConfig& config() const noexcept { return config_; }
  // [batch*seq_len x d]
  Tensor hidden(const TokenBatch& batch, const ForwardOptions& options = {}) const;

  void attach_adapters(const LoraConfig& lora, const AdapterPlacement& placement,
                       Rng& rng);
  bool has_adapters() const;
  void set_adapter_dropout(float p);
  void set_adapter_alpha(float alpha);
  // Folds every adapter into its base map and removes it.
  void merge_adapters();
  // Replaces the adapter on one map, e.g. when loading.
  void set_adapter(std::size_t layer, ProjectionMap map, LoraAdapter adapter);

  std::vector<NamedParameter> base_parameters(const std::string& prefix = "") const;
  std::vector<NamedParameter> adapter_parameters(const std::string& prefix = "") const;
  std::vector<AdapterRecord> adapter_records() const;
  void set_base_trainable(bool trainable);

  const Tensor& token_embedding() const noexcept { return tok_emb_; }
  const Tensor& position_embedding() const noexcept { return pos_emb_; }
  const Tensor& final_norm() const noexcept { return final_norm_; }
  const std::vector<TransformerLayer>& layers() const noexcept { return layers_; }

  // Deep copy: no storage is shared with the source.
  Transformer clone() const;

 private:
  Tensor project(const Tensor& x, const TransformerLayer& layer, ProjectionMap map,
                 const ForwardOptions& options) const;

  ModelConfig config_;
  Tensor tok_emb_;
  Tensor pos_emb_;
  std::vector<TransformerLayer> layers_;
  Tensor final_norm_;
};

class PolicyModel {
 public:
  PolicyModel(const ModelConfig& config, Rng& rng);
  PolicyModel(Transformer trunk, Tensor unembed);

  const ModelConfig& config() const noexcept { return trunk_.config(); }
  Transformer& trunk() noexcept { return trunk_; }
  const Transformer& trunk() const noexcept { return trunk_; }
  const Tensor& unembedding() const noexcept { return unembed_; }

  Tensor logits(const TokenBatch& batch, const ForwardOptions& options = {}) const;
  // Row b*seq_len + t is the log-distribution of the token at t+1.
  Tensor forward_logprobs(const TokenBatch& batch,
                          const ForwardOptions& options = {}) const;
  // Single sequence -> [T x V].
  Tensor forward_logprobs(const std::vector<int>& tokens) const;

  std::vector<NamedParameter> parameters() const;  // base then adapters
  std::vector<NamedParameter> trainable_parameters() const;
  void set_base_trainable(bool trainable);
  PolicyModel clone() const;

 private:
  Transformer trunk_;
  Tensor unembed_;  // [V x d]
};

// Separate trunk with a scalar head applied at every position.
class ValueModel {
 public:
  ValueModel(const ModelConfig& config, Rng& rng);
  // Zero-initialized head on an existing trunk.
  explicit ValueModel(Transformer trunk);

  const ModelConfig& config() const noexcept { return trunk_.config(); }
  Transformer& trunk() noexcept { return trunk_; }
  const Transformer& trunk() const noexcept { return trunk_; }
  const Tensor& head_weight() const noexcept { return head_w_; }
  const Tensor& head_bias() const noexcept { return head_b_; }

  // [batch*seq_len x 1]
  Tensor forward_values(const TokenBatch& batch,
                        const ForwardOptions& options = {}) const;
  // Head applied to precomputed hidden states [n x d] -> [n x 1].
  Tensor apply_head(const Tensor& hidden) const;

  std::vector<NamedParameter> parameters() const;
  std::vector<NamedParameter> trainable_parameters() const;
  void set_base_trainable(bool trainable);
  void set_head_trainable(bool trainable);
  ValueModel clone() const;

 private:
  Transformer trunk_;
  Tensor head_w_;  // [1 x d]
  Tensor head_b_;  // [1]
};

}  // namespace lab
