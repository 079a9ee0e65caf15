#include "lab/pipeline/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

#include "json.hpp"
#include "lab/numcore/errors.hpp"

namespace lab {
namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'L', 'A', 'B', 'C', 'K', 'P', 'T', '\0'};

std::uint64_t fnv1a(std::uint64_t h, const unsigned char* p, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

void put_le(std::string& out, std::uint64_t value, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

std::uint64_t get_le(const unsigned char* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void append_floats(std::string& out, std::span<const float> values) {
  for (float f : values) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof bits);
    put_le(out, bits, 4);
  }
}

json config_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},     {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},       {"max_seq_len", c.max_seq_len}, {"d_ff", c.d_ff},
          {"pad_token", c.pad_token},   {"eos_token", c.eos_token}};
}

ModelConfig config_from(const json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.pad_token = j.at("pad_token").get<int>();
  c.eos_token = j.at("eos_token").get<int>();
  return c;
}

std::vector<NamedParameter> deep_copy(const std::vector<NamedParameter>& params) {
  std::vector<NamedParameter> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back({p.name, p.tensor.clone()});
  return out;
}

std::optional<AdapterMeta> adapter_meta(const Transformer& trunk) {
  if (!trunk.has_adapters()) return std::nullopt;
  AdapterMeta meta;
  meta.placement.maps = {false, false, false, false};
  const auto& layer = trunk.layers().front();
  for (std::size_t m = 0; m < 4; ++m) {
    const auto& a = layer.adapters[m];
    if (!a) continue;
    meta.placement.maps[m] = true;
    meta.lora.rank = a->rank();
    meta.lora.alpha = a->alpha();
    meta.lora.dropout = a->dropout();
  }
  return meta;
}

void attach(Transformer& trunk, const AdapterMeta& meta) {
  Rng unused(0);
  trunk.attach_adapters(meta.lora, meta.placement, unused);
}

}  // namespace

std::uint64_t parameters_hash(const std::vector<NamedParameter>& parameters) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  std::string buffer;
  for (const auto& p : parameters) {
    buffer.clear();
    buffer += p.name;
    buffer.push_back('\0');
    for (std::size_t d : p.tensor.shape()) put_le(buffer, d, 8);
    append_floats(buffer, p.tensor.data());
    h = fnv1a(h, reinterpret_cast<const unsigned char*>(buffer.data()), buffer.size());
  }
  return h;
}

std::uint64_t Checkpoint::content_hash() const { return parameters_hash(parameters); }

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  json header = {{"kind", c.kind},   {"tag", c.tag},   {"model_config", config_json(c.config)},
                 {"step", c.step},   {"seed", c.seed}, {"parameters", json::array()}};
  if (c.base_hash) header["base_hash"] = *c.base_hash;
  if (c.adapters) {
    header["adapters"] = {{"rank", c.adapters->lora.rank},
                          {"alpha", c.adapters->lora.alpha},
                          {"dropout", c.adapters->lora.dropout},
                          {"maps", c.adapters->placement.maps}};
  }
  for (const auto& p : c.parameters) {
    header["parameters"].push_back({{"name", p.name},
                                    {"shape", p.tensor.shape()},
                                    {"trainable", p.tensor.requires_grad()}});
  }
  const std::string text = header.dump();
  std::string bytes(kMagic, sizeof kMagic);
  put_le(bytes, c.version, 4);
  put_le(bytes, text.size(), 8);
  bytes += text;
  for (const auto& p : c.parameters) append_floats(bytes, p.tensor.data());

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write on checkpoint " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw IoError(path.string() + " is not a checkpoint");
  }
  Checkpoint c;
  c.version = static_cast<std::uint32_t>(get_le(p + 8, 4));
  if (c.version != kCheckpointVersion) {
    throw IoError(path.string() + ": unsupported checkpoint version " + std::to_string(c.version));
  }
  const std::uint64_t header_len = get_le(p + 12, 8);
  if (header_len > bytes.size() - 20) throw IoError(path.string() + ": truncated header");
  std::size_t offset = 20 + header_len;
  try {
    const json header = json::parse(bytes.substr(20, header_len));
    c.kind = header.at("kind").get<std::string>();
    c.tag = header.at("tag").get<std::string>();
    c.config = config_from(header.at("model_config"));
    c.step = header.at("step").get<long>();
    c.seed = header.at("seed").get<std::uint64_t>();
    if (header.contains("base_hash")) c.base_hash = header.at("base_hash").get<std::uint64_t>();
    if (header.contains("adapters")) {
      const json& a = header.at("adapters");
      AdapterMeta meta;
      meta.lora.rank = a.at("rank").get<std::size_t>();
      meta.lora.alpha = a.at("alpha").get<float>();
      meta.lora.dropout = a.at("dropout").get<float>();
      meta.placement.maps = a.at("maps").get<std::array<bool, 4>>();
      c.adapters = meta;
    }
    for (const auto& entry : header.at("parameters")) {
      Shape shape = entry.at("shape").get<Shape>();
      const std::size_t n = shape_numel(shape);
      if (n * 4 > bytes.size() - offset) throw IoError(path.string() + ": truncated payload");
      std::vector<float> values(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto bits = static_cast<std::uint32_t>(get_le(p + offset + 4 * i, 4));
        std::memcpy(&values[i], &bits, sizeof bits);
      }
      offset += 4 * n;
      c.parameters.push_back({entry.at("name").get<std::string>(),
                              Tensor::from_vector(std::move(shape), std::move(values),
                                                  entry.at("trainable").get<bool>())});
    }
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": malformed checkpoint header: " + e.what());
  }
  if (offset != bytes.size()) throw IoError(path.string() + ": trailing bytes after payload");
  return c;
}

Checkpoint snapshot_policy(const PolicyModel& model, std::string tag, long step,
                           std::uint64_t seed) {
  Checkpoint c;
  c.kind = "policy";
  c.tag = std::move(tag);
  c.config = model.config();
  c.parameters = deep_copy(model.parameters());
  c.adapters = adapter_meta(model.trunk());
  c.step = step;
  c.seed = seed;
  return c;
}

Checkpoint snapshot_value(const ValueModel& model, std::string tag, long step,
                          std::uint64_t seed) {
  Checkpoint c;
  c.kind = "value";
  c.tag = std::move(tag);
  c.config = model.config();
  c.parameters = deep_copy(model.parameters());
  c.adapters = adapter_meta(model.trunk());
  c.step = step;
  c.seed = seed;
  return c;
}

Checkpoint snapshot_adapters(const PolicyModel& model, std::uint64_t base_hash, std::string tag,
                             long step, std::uint64_t seed) {
  if (!model.trunk().has_adapters()) throw InputError("snapshot_adapters: model has no adapters");
  Checkpoint c;
  c.kind = "adapter";
  c.tag = std::move(tag);
  c.config = model.config();
  c.parameters = deep_copy(model.trunk().adapter_parameters());
  c.adapters = adapter_meta(model.trunk());
  c.step = step;
  c.seed = seed;
  c.base_hash = base_hash;
  return c;
}

void assign_parameters(const std::vector<NamedParameter>& targets,
                       const std::vector<NamedParameter>& source) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& p : source) by_name[p.name] = &p.tensor;
  if (by_name.size() != targets.size()) {
    throw IoError("checkpoint holds " + std::to_string(by_name.size()) +
                  " parameters, model expects " + std::to_string(targets.size()));
  }
  for (const auto& t : targets) {
    const auto it = by_name.find(t.name);
    if (it == by_name.end()) throw IoError("checkpoint lacks parameter " + t.name);
    const Tensor& src = *it->second;
    if (src.shape() != t.tensor.shape()) {
      throw IoError("checkpoint parameter " + t.name + " has shape " +
                    shape_to_string(src.shape()) + ", model expects " +
                    shape_to_string(t.tensor.shape()));
    }
    Tensor target = t.tensor;
    std::copy(src.data().begin(), src.data().end(), target.mutable_data().begin());
    target.set_requires_grad(src.requires_grad());
  }
}

PolicyModel policy_from_checkpoint(const Checkpoint& c) {
  if (c.kind != "policy") throw IoError("expected a policy checkpoint, found '" + c.kind + "'");
  Rng unused(0);
  PolicyModel model(c.config, unused);
  if (c.adapters) attach(model.trunk(), *c.adapters);
  assign_parameters(model.parameters(), c.parameters);
  return model;
}

ValueModel value_from_checkpoint(const Checkpoint& c) {
  if (c.kind != "value") throw IoError("expected a value checkpoint, found '" + c.kind + "'");
  Rng unused(0);
  ValueModel model(c.config, unused);
  if (c.adapters) attach(model.trunk(), *c.adapters);
  assign_parameters(model.parameters(), c.parameters);
  return model;
}

PolicyModel apply_adapter_checkpoint(const Checkpoint& base, const Checkpoint& adapters) {
  if (adapters.kind != "adapter" || !adapters.base_hash || !adapters.adapters) {
    throw IoError("expected an adapter checkpoint");
  }
  if (base.content_hash() != *adapters.base_hash) {
    throw IoError("adapter checkpoint was trained on a different base model");
  }
  PolicyModel model = policy_from_checkpoint(base);
  if (model.trunk().has_adapters()) throw IoError("base checkpoint already carries adapters");
  attach(model.trunk(), *adapters.adapters);
  assign_parameters(model.trunk().adapter_parameters(), adapters.parameters);
  return model;
}

}  // namespace lab
