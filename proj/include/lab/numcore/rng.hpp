#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>

namespace lab {

// Counter-based generator (Philox4x32-10). The output sequence depends only on
// (seed, stream, number of draws), never on the platform's <random>
// implementation, so fork()ed streams reproduce under any scheduling.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0);

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }

  std::uint32_t next_u32();
  std::uint64_t next_u64();

  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  // Uniform on [lo, hi).
  double uniform(double lo, double hi);
  // Standard normal via Box-Muller.
  double normal();
  // Uniform integer in [0, n). n must be positive.
  std::size_t below(std::size_t n);
  // Draws an index from a row of natural-log probabilities.
  std::size_t categorical_from_logprobs(std::span<const float> logprobs);
  // Independent child stream; the same id always yields the same child.
  Rng fork(std::uint64_t id) const;

 private:
  void refill();

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> buffer_{};
  int buffered_ = 0;
};

}  // namespace lab
