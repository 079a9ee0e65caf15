#include "lab/model/transformer.hpp"

#include <cmath>

#include "lab/numcore/errors.hpp"
#include "lab/numcore/ops.hpp"

namespace lab {

void ModelConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("vocab_size must be at least 2");
  if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0 || max_seq_len == 0) {
    throw ConfigError("model extents must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) +
                      " is not divisible by n_heads " + std::to_string(n_heads));
  }
  if (pad_token < 0 || static_cast<std::size_t>(pad_token) >= vocab_size ||
      eos_token < 0 || static_cast<std::size_t>(eos_token) >= vocab_size) {
    throw ConfigError("pad/eos tokens must lie inside the vocabulary");
  }
}

TokenBatch TokenBatch::pack(const std::vector<std::vector<int>>& sequences,
                            int pad_token) {
  if (sequences.empty()) throw InputError("TokenBatch: no sequences");
  TokenBatch batch;
  batch.batch = sequences.size();
  for (const auto& s : sequences) {
    if (s.empty()) throw InputError("TokenBatch: empty sequence");
    batch.seq_len = std::max(batch.seq_len, s.size());
    batch.lengths.push_back(s.size());
  }
  batch.ids.assign(batch.batch * batch.seq_len, pad_token);
  for (std::size_t b = 0; b < batch.batch; ++b) {
    std::copy(sequences[b].begin(), sequences[b].end(),
              batch.ids.begin() + static_cast<std::ptrdiff_t>(b * batch.seq_len));
  }
  return batch;
}

namespace {

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  std::vector<float> v(shape_numel(shape));
  for (float& x : v) x = static_cast<float>(stddev * rng.normal());
  return Tensor::from_vector(std::move(shape), std::move(v), true);
}

LoraAdapter clone_adapter(const LoraAdapter& a) {
  return LoraAdapter(a.a().clone(), a.b().clone(), a.alpha(), a.dropout());
}

}  // namespace

Transformer::Transformer(const ModelConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  const std::size_t d = config.d_model, f = config.d_ff;
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  tok_emb_ = normal_tensor({config.vocab_size, d}, 1.0, rng);
  pos_emb_ = normal_tensor({config.max_seq_len, d}, 1.0, rng);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    TransformerLayer layer;
    layer.attn_norm = Tensor::full({d}, 1.0f, true);
    for (std::size_t m = 0; m < 4; ++m) {
      layer.proj[m] = normal_tensor({d, d}, m == 3 ? proj_std * residual_scale : proj_std, rng);
    }
    layer.ffn_norm = Tensor::full({d}, 1.0f, true);
    layer.w1 = normal_tensor({f, d}, proj_std, rng);
    layer.b1 = Tensor::zeros({f}, true);
    layer.w2 = normal_tensor({d, f}, residual_scale / std::sqrt(static_cast<double>(f)), rng);
    layer.b2 = Tensor::zeros({d}, true);
    layers_.push_back(std::move(layer));
  }
  final_norm_ = Tensor::full({d}, 1.0f, true);
}

Tensor Transformer::project(const Tensor& x, const TransformerLayer& layer,
                            ProjectionMap map, const ForwardOptions& options) const {
  const auto& adapter = layer.adapter(map);
  if (!adapter) return linear(x, layer.weight(map));
  return lora_forward(layer.weight(map), *adapter, x, options.training, options.rng);
}

Tensor Transformer::hidden(const TokenBatch& batch, const ForwardOptions& options) const {
  if (batch.batch == 0 || batch.seq_len == 0) throw InputError("hidden: empty batch");
  if (batch.seq_len > config_.max_seq_len) {
    throw LengthError("sequence length " + std::to_string(batch.seq_len) +
                      " exceeds maximum " + std::to_string(config_.max_seq_len));
  }
  if (batch.ids.size() != batch.batch * batch.seq_len) {
    throw DimensionError("hidden: token batch holds " + std::to_string(batch.ids.size()) +
                         " ids for " + std::to_string(batch.batch) + "x" +
                         std::to_string(batch.seq_len));
  }
  std::vector<int> positions(batch.ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    positions[i] = static_cast<int>(i % batch.seq_len);
  }
  Tensor x = add(embedding(tok_emb_, batch.ids), embedding(pos_emb_, positions));
  for (const auto& layer : layers_) {
    const Tensor h = rms_norm(x, layer.attn_norm, kNormEps);
    const Tensor q = project(h, layer, ProjectionMap::kQuery, options);
    const Tensor k = project(h, layer, ProjectionMap::kKey, options);
    const Tensor v = project(h, layer, ProjectionMap::kValue, options);
    const Tensor a = causal_attention(q, k, v, batch.batch, batch.seq_len, config_.n_heads);
    x = add(x, project(a, layer, ProjectionMap::kOutput, options));
    const Tensor g = rms_norm(x, layer.ffn_norm, kNormEps);
    const Tensor inner = gelu(add_bias(linear(g, layer.w1), layer.b1));
    x = add(x, add_bias(linear(inner, layer.w2), layer.b2));
  }
  return rms_norm(x, final_norm_, kNormEps);
}

void Transformer::attach_adapters(const LoraConfig& lora,
                                  const AdapterPlacement& placement, Rng& rng) {
  const std::size_t d = config_.d_model;
  for (auto& layer : layers_) {
    for (std::size_t m = 0; m < 4; ++m) {
      if (!placement.maps[m]) continue;
      if (layer.adapters[m]) throw ConfigError("a map already carries an adapter");
      layer.adapters[m].emplace(d, d, lora, rng);
    }
  }
}

bool Transformer::has_adapters() const {
  for (const auto& layer : layers_)
    for (const auto& a : layer.adapters)
      if (a) return true;
  return false;
}

void Transformer::set_adapter_dropout(float p) {
  for (auto& layer : layers_)
    for (auto& a : layer.adapters)
      if (a) a->set_dropout(p);
}

void Transformer::set_adapter_alpha(float alpha) {
  for (auto& layer : layers_)
    for (auto& a : layer.adapters)
      if (a) a->set_alpha(alpha);
}

void Transformer::merge_adapters() {
  for (auto& layer : layers_) {
    for (std::size_t m = 0; m < 4; ++m) {
      if (!layer.adapters[m]) continue;
      const bool trainable = layer.proj[m].requires_grad();
      layer.proj[m] = merge_adapter(layer.proj[m], *layer.adapters[m]);
      layer.proj[m].set_requires_grad(trainable);
      layer.adapters[m].reset();
    }
  }
}

void Transformer::set_adapter(std::size_t layer, ProjectionMap map, LoraAdapter adapter) {
  if (layer >= layers_.size()) throw InputError("set_adapter: layer out of range");
  const std::size_t d = config_.d_model;
  if (adapter.a().dim(1) != d || adapter.b().dim(0) != d) {
    throw DimensionError("set_adapter: adapter does not match d_model");
  }
  layers_[layer].adapters[static_cast<std::size_t>(map)].emplace(std::move(adapter));
}

std::vector<NamedParameter> Transformer::base_parameters(const std::string& prefix) const {
  std::vector<NamedParameter> out;
  out.push_back({prefix + "tok_emb", tok_emb_});
  out.push_back({prefix + "pos_emb", pos_emb_});
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& layer = layers_[l];
    const std::string p = prefix + "layers." + std::to_string(l) + ".";
    out.push_back({p + "attn_norm", layer.attn_norm});
    for (std::size_t m = 0; m < 4; ++m) {
      out.push_back({p + projection_name(static_cast<ProjectionMap>(m)), layer.proj[m]});
    }
    out.push_back({p + "ffn_norm", layer.ffn_norm});
    out.push_back({p + "w1", layer.w1});
    out.push_back({p + "b1", layer.b1});
    out.push_back({p + "w2", layer.w2});
    out.push_back({p + "b2", layer.b2});
  }
  out.push_back({prefix + "final_norm", final_norm_});
  return out;
}

std::vector<NamedParameter> Transformer::adapter_parameters(const std::string& prefix) const {
  std::vector<NamedParameter> out;
  for (const auto& record : adapter_records()) {
    out.push_back({prefix + record.name + ".lora_a", record.a});
    out.push_back({prefix + record.name + ".lora_b", record.b});
  }
  return out;
}

std::vector<AdapterRecord> Transformer::adapter_records() const {
  std::vector<AdapterRecord> out;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    for (std::size_t m = 0; m < 4; ++m) {
      const auto& a = layers_[l].adapters[m];
      if (!a) continue;
      out.push_back({"layers." + std::to_string(l) + "." +
                         projection_name(static_cast<ProjectionMap>(m)),
                     a->rank(), a->alpha(), a->a(), a->b()});
    }
  }
  return out;
}

void Transformer::set_base_trainable(bool trainable) {
  for (auto& p : base_parameters()) p.tensor.set_requires_grad(trainable);
}

Transformer Transformer::clone() const {
  Transformer copy = *this;
  copy.tok_emb_ = tok_emb_.clone();
  copy.pos_emb_ = pos_emb_.clone();
  copy.final_norm_ = final_norm_.clone();
  for (auto& layer : copy.layers_) {
    layer.attn_norm = layer.attn_norm.clone();
    for (auto& w : layer.proj) w = w.clone();
    layer.ffn_norm = layer.ffn_norm.clone();
    layer.w1 = layer.w1.clone();
    layer.b1 = layer.b1.clone();
    layer.w2 = layer.w2.clone();
    layer.b2 = layer.b2.clone();
    for (auto& a : layer.adapters)
      if (a) a = clone_adapter(*a);
  }
  return copy;
}

PolicyModel::PolicyModel(const ModelConfig& config, Rng& rng)
    : trunk_(config, rng),
      unembed_(normal_tensor({config.vocab_size, config.d_model},
                             1.0 / std::sqrt(static_cast<double>(config.d_model)), rng)) {}

PolicyModel::PolicyModel(Transformer trunk, Tensor unembed)
    : trunk_(std::move(trunk)), unembed_(std::move(unembed)) {
  if (unembed_.rank() != 2 || unembed_.dim(0) != config().vocab_size ||
      unembed_.dim(1) != config().d_model) {
    throw DimensionError("unembedding " + shape_to_string(unembed_.shape()) +
                         " does not match the model config");
  }
}

Tensor PolicyModel::logits(const TokenBatch& batch, const ForwardOptions& options) const {
  return linear(trunk_.hidden(batch, options), unembed_);
}

Tensor PolicyModel::forward_logprobs(const TokenBatch& batch,
                                     const ForwardOptions& options) const {
  return softmax_logprobs(logits(batch, options));
}

Tensor PolicyModel::forward_logprobs(const std::vector<int>& tokens) const {
  return forward_logprobs(TokenBatch::pack({tokens}, config().pad_token));
}

std::vector<NamedParameter> PolicyModel::parameters() const {
  auto out = trunk_.base_parameters();
  out.push_back({"unembed", unembed_});
  for (auto& p : trunk_.adapter_parameters()) out.push_back(std::move(p));
  return out;
}

std::vector<NamedParameter> PolicyModel::trainable_parameters() const {
  std::vector<NamedParameter> out;
  for (auto& p : parameters())
    if (p.tensor.requires_grad()) out.push_back(std::move(p));
  return out;
}

void PolicyModel::set_base_trainable(bool trainable) {
  trunk_.set_base_trainable(trainable);
  unembed_.set_requires_grad(trainable);
}

PolicyModel PolicyModel::clone() const {
  return PolicyModel(trunk_.clone(), unembed_.clone());
}

ValueModel::ValueModel(const ModelConfig& config, Rng& rng)
    : ValueModel(Transformer(config, rng)) {}

ValueModel::ValueModel(Transformer trunk)
    : trunk_(std::move(trunk)),
      head_w_(Tensor::zeros({1, trunk_.config().d_model}, true)),
      head_b_(Tensor::zeros({1}, true)) {}

Tensor ValueModel::apply_head(const Tensor& hidden) const {
  return add_bias(linear(hidden, head_w_), head_b_);
}

Tensor ValueModel::forward_values(const TokenBatch& batch,
                                  const ForwardOptions& options) const {
  return apply_head(trunk_.hidden(batch, options));
}

std::vector<NamedParameter> ValueModel::parameters() const {
  auto out = trunk_.base_parameters();
  out.push_back({"value_head.weight", head_w_});
  out.push_back({"value_head.bias", head_b_});
  for (auto& p : trunk_.adapter_parameters()) out.push_back(std::move(p));
  return out;
}

std::vector<NamedParameter> ValueModel::trainable_parameters() const {
  std::vector<NamedParameter> out;
  for (auto& p : parameters())
    if (p.tensor.requires_grad()) out.push_back(std::move(p));
  return out;
}

void ValueModel::set_base_trainable(bool trainable) { trunk_.set_base_trainable(trainable); }

void ValueModel::set_head_trainable(bool trainable) {
  head_w_.set_requires_grad(trainable);
  head_b_.set_requires_grad(trainable);
}

ValueModel ValueModel::clone() const {
  ValueModel copy(trunk_.clone());
  copy.head_w_ = head_w_.clone();
  copy.head_b_ = head_b_.clone();
  return copy;
}

}  // namespace lab
