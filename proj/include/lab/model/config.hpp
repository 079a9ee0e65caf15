#pragma once

#include <cstddef>
#include <string>

namespace lab {

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t max_seq_len = 128;
  std::size_t d_ff = 256;
  int pad_token = 0;
  int eos_token = 3;

  // Geometry of LLaMA-7B. Used for parameter counting only.
  static ModelConfig llama7b() {
    ModelConfig c;
    c.vocab_size = 32000;
    c.d_model = 4096;
    c.n_layers = 32;
    c.n_heads = 32;
    c.max_seq_len = 2048;
    c.d_ff = 11008;
    return c;
  }

  // Throws ConfigError describing the first violated constraint.
  void validate() const;
};

}  // namespace lab
