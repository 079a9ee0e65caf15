#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "lab/numcore/rng.hpp"

namespace lab {

// Token layout shared by every task.
namespace tokens {
constexpr int kPad = 0;
constexpr int kBos = 1;
constexpr int kSep = 2;
constexpr int kEos = 3;
constexpr int kFirstMarker = 4;  // one marker per task kind, 4..7
constexpr int kFirstContent = 8;
}  // namespace tokens

enum class TaskKind { kCopy = 0, kReverse = 1, kPattern = 2, kLengthTarget = 3 };

const char* task_name(TaskKind kind);
TaskKind parse_task(std::string_view name);  // throws ConfigError

struct TaskSpec {
  TaskKind kind = TaskKind::kCopy;
  // Payload length shown in the prompt. For the pattern task this is the
  // period; for length-target it is the number of distractor tokens.
  std::size_t prompt_min = 3;
  std::size_t prompt_max = 5;
  // Length-target only: range of requested response lengths.
  std::size_t response_min = 2;
  std::size_t response_max = 8;
  // Content tokens are drawn from [content_first, content_last].
  int content_first = tokens::kFirstContent;
  int content_last = 63;
  std::uint64_t seed = 0;

  std::size_t content_size() const {
    return static_cast<std::size_t>(content_last - content_first + 1);
  }
  // Throws ConfigError.
  void validate() const;
};

struct Episode {
  TaskKind kind = TaskKind::kCopy;
  std::vector<int> prompt;
  std::vector<int> gold;  // ends with the end-of-sequence token
};

struct SplitCounts {
  std::size_t sft = 1000;
  std::size_t rm = 1000;
  std::size_t ppo = 2000;
  std::size_t eval = 256;
};

struct Splits {
  std::vector<Episode> sft;
  std::vector<Episode> rm;
  std::vector<Episode> ppo;
  std::vector<Episode> eval;
};

// Episode number `index` of the stream defined by (spec, seed).
Episode generate_episode(const TaskSpec& spec, std::uint64_t index);

// Deterministic splits, pairwise disjoint by prompt. Throws ConfigError when
// the spec cannot produce enough distinct prompts.
Splits generate_split(const TaskSpec& spec, const SplitCounts& counts);

// Tokens before the first end-of-sequence token.
std::vector<int> response_content(const std::vector<int>& response);

// Score in [0, 1]. Any token sequence is accepted.
double oracle_score(TaskKind kind, const std::vector<int>& prompt,
                    const std::vector<int>& response);
double oracle_score(const Episode& episode, const std::vector<int>& response);

struct PreferencePair {
  TaskKind kind = TaskKind::kCopy;
  std::vector<int> prompt;
  std::vector<int> response_a;
  std::vector<int> response_b;
  int label = 0;  // 0: a preferred, 1: b preferred
  double margin = 0.0;

  const std::vector<int>& chosen() const { return label == 0 ? response_a : response_b; }
  const std::vector<int>& rejected() const { return label == 0 ? response_b : response_a; }
};

// Produces one response for a prompt.
using ResponseSampler =
    std::function<std::vector<int>(const std::vector<int>& prompt, Rng& rng)>;

constexpr double kTieMargin = 1e-6;

struct PreferenceSet {
  std::vector<PreferencePair> pairs;
  std::size_t skipped = 0;  // pairs abandoned after the retry cap
};

// Pair i uses episode i mod |episodes| and an Rng stream forked from `rng` by
// i, so the result does not depend on evaluation order.
PreferenceSet make_preferences(const std::vector<Episode>& episodes,
                               const ResponseSampler& sampler, std::size_t n_pairs,
                               const Rng& rng, std::size_t retry_cap = 8);

// FNV-1a over the label vector.
std::uint64_t label_checksum(const std::vector<PreferencePair>& pairs);

// One JSON object per line: {"task", "prompt", "gold"}.
void write_episodes_jsonl(std::ostream& out, const std::vector<Episode>& episodes);
std::vector<Episode> read_episodes_jsonl(std::istream& in);

}  // namespace lab
