#include "lab/tasks/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <set>

#include "json.hpp"
#include "lab/numcore/errors.hpp"

namespace lab {
namespace {

int marker(TaskKind kind) { return tokens::kFirstMarker + static_cast<int>(kind); }

// Prompt tokens strictly between the task marker and the separator.
std::vector<int> payload_of(const std::vector<int>& prompt) {
  if (prompt.size() < 3) return {};
  const auto sep = std::find(prompt.begin() + 2, prompt.end(), tokens::kSep);
  return {prompt.begin() + 2, sep};
}

// Position-wise matches against `target`, normalized by the longer length.
double match_fraction(const std::vector<int>& target, const std::vector<int>& content) {
  const std::size_t denom = std::max(target.size(), content.size());
  if (denom == 0) return 1.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < std::min(target.size(), content.size()); ++i) {
    hits += target[i] == content[i] ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(denom);
}

// Number of distinct prompts the spec can produce, saturating at 2^62.
double prompt_capacity(const TaskSpec& spec) {
  const double c = static_cast<double>(spec.content_size());
  double total = 0.0;
  for (std::size_t n = spec.prompt_min; n <= spec.prompt_max; ++n) {
    total += std::pow(c, static_cast<double>(n));
  }
  if (spec.kind == TaskKind::kLengthTarget) {
    total *= static_cast<double>(spec.response_max - spec.response_min + 1);
  }
  return std::min(total, std::ldexp(1.0, 62));
}

}  // namespace

const char* task_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::kCopy: return "copy";
    case TaskKind::kReverse: return "reverse";
    case TaskKind::kPattern: return "pattern";
    case TaskKind::kLengthTarget: return "length_target";
  }
  return "?";
}

TaskKind parse_task(std::string_view name) {
  for (auto kind : {TaskKind::kCopy, TaskKind::kReverse, TaskKind::kPattern,
                    TaskKind::kLengthTarget}) {
    if (name == task_name(kind)) return kind;
  }
  throw ConfigError("unknown task kind '" + std::string(name) + "'");
}

void TaskSpec::validate() const {
  if (prompt_min == 0 || prompt_min > prompt_max) {
    throw ConfigError("task prompt length range must satisfy 1 <= min <= max");
  }
  if (content_first < tokens::kFirstContent || content_last <= content_first) {
    throw ConfigError("task content tokens must start at " +
                      std::to_string(tokens::kFirstContent) + " and span at least 2 ids");
  }
  if (kind == TaskKind::kLengthTarget) {
    if (response_min == 0 || response_min > response_max) {
      throw ConfigError("length-target range must satisfy 1 <= min <= max");
    }
    if (content_first + static_cast<int>(response_max) > content_last) {
      throw ConfigError("vocabulary too small to encode length target " +
                        std::to_string(response_max));
    }
  }
}

Episode generate_episode(const TaskSpec& spec, std::uint64_t index) {
  Rng rng = Rng(spec.seed, 1 + static_cast<std::uint64_t>(spec.kind)).fork(index);
  const std::size_t n = spec.prompt_min + rng.below(spec.prompt_max - spec.prompt_min + 1);
  std::vector<int> payload(n);
  for (int& t : payload) t = spec.content_first + static_cast<int>(rng.below(spec.content_size()));

  Episode e;
  e.kind = spec.kind;
  e.prompt = {tokens::kBos, marker(spec.kind)};
  switch (spec.kind) {
    case TaskKind::kCopy:
      e.prompt.insert(e.prompt.end(), payload.begin(), payload.end());
      e.gold = payload;
      break;
    case TaskKind::kReverse:
      e.prompt.insert(e.prompt.end(), payload.begin(), payload.end());
      e.gold.assign(payload.rbegin(), payload.rend());
      break;
    case TaskKind::kPattern:
      e.prompt.insert(e.prompt.end(), payload.begin(), payload.end());
      e.prompt.insert(e.prompt.end(), payload.begin(), payload.end());
      e.gold = payload;
      break;
    case TaskKind::kLengthTarget: {
      const std::size_t target =
          spec.response_min + rng.below(spec.response_max - spec.response_min + 1);
      e.prompt.push_back(spec.content_first + static_cast<int>(target));
      e.prompt.insert(e.prompt.end(), payload.begin(), payload.end());
      e.gold.assign(target, spec.content_first);
      break;
    }
  }
  e.prompt.push_back(tokens::kSep);
  e.gold.push_back(tokens::kEos);
  return e;
}

Splits generate_split(const TaskSpec& spec, const SplitCounts& counts) {
  spec.validate();
  if (counts.sft == 0 || counts.rm == 0 || counts.ppo == 0 || counts.eval == 0) {
    throw ConfigError("split counts must be positive");
  }
  const std::size_t total = counts.sft + counts.rm + counts.ppo + counts.eval;
  if (prompt_capacity(spec) < 2.0 * static_cast<double>(total)) {
    throw ConfigError("vocabulary too small: the task spec cannot produce " +
                      std::to_string(total) + " distinct prompts");
  }
  Splits splits;
  std::vector<Episode>* targets[] = {&splits.sft, &splits.rm, &splits.ppo, &splits.eval};
  const std::size_t wanted[] = {counts.sft, counts.rm, counts.ppo, counts.eval};
  std::set<std::vector<int>> seen;
  std::size_t part = 0;
  const std::uint64_t attempt_cap = 50 * total + 1000;
  for (std::uint64_t index = 0; part < 4; ++index) {
    if (index >= attempt_cap) {
      throw ConfigError("could not draw " + std::to_string(total) + " distinct prompts");
    }
    Episode e = generate_episode(spec, index);
    if (!seen.insert(e.prompt).second) continue;
    targets[part]->push_back(std::move(e));
    while (part < 4 && targets[part]->size() == wanted[part]) ++part;
  }
  return splits;
}

std::vector<int> response_content(const std::vector<int>& response) {
  const auto eos = std::find(response.begin(), response.end(), tokens::kEos);
  return {response.begin(), eos};
}

double oracle_score(TaskKind kind, const std::vector<int>& prompt,
                    const std::vector<int>& response) {
  const std::vector<int> content = response_content(response);
  const std::vector<int> payload = payload_of(prompt);
  switch (kind) {
    case TaskKind::kCopy:
      if (payload.empty()) return 0.0;
      return match_fraction(payload, content);
    case TaskKind::kReverse:
      if (payload.empty()) return 0.0;
      return match_fraction({payload.rbegin(), payload.rend()}, content);
    case TaskKind::kPattern: {
      const std::size_t period = payload.size() / 2;
      if (period == 0) return 0.0;
      return match_fraction({payload.begin(), payload.begin() + static_cast<long>(period)},
                            content);
    }
    case TaskKind::kLengthTarget: {
      if (payload.empty()) return 0.0;
      const int target = payload[0] - tokens::kFirstContent;
      if (target <= 0) return 0.0;
      const double miss = std::abs(static_cast<double>(content.size()) - target) / target;
      return std::clamp(1.0 - miss, 0.0, 1.0);
    }
  }
  return 0.0;
}

double oracle_score(const Episode& episode, const std::vector<int>& response) {
  return oracle_score(episode.kind, episode.prompt, response);
}

PreferenceSet make_preferences(const std::vector<Episode>& episodes,
                               const ResponseSampler& sampler, std::size_t n_pairs,
                               const Rng& rng, std::size_t retry_cap) {
  if (episodes.empty()) throw InputError("make_preferences: no episodes");
  PreferenceSet out;
  for (std::size_t i = 0; i < n_pairs; ++i) {
    const Episode& e = episodes[i % episodes.size()];
    Rng stream = rng.fork(i);
    bool placed = false;
    for (std::size_t attempt = 0; attempt < retry_cap && !placed; ++attempt) {
      std::vector<int> a = sampler(e.prompt, stream);
      std::vector<int> b = sampler(e.prompt, stream);
      const double sa = oracle_score(e, a), sb = oracle_score(e, b);
      if (std::abs(sa - sb) < kTieMargin) continue;
      PreferencePair pair;
      pair.kind = e.kind;
      pair.prompt = e.prompt;
      pair.label = sa > sb ? 0 : 1;
      pair.margin = std::abs(sa - sb);
      pair.response_a = std::move(a);
      pair.response_b = std::move(b);
      out.pairs.push_back(std::move(pair));
      placed = true;
    }
    if (!placed) ++out.skipped;
  }
  return out;
}

std::uint64_t label_checksum(const std::vector<PreferencePair>& pairs) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& p : pairs) {
    h ^= static_cast<std::uint64_t>(p.label);
    h *= 0x100000001b3ull;
  }
  return h;
}

void write_episodes_jsonl(std::ostream& out, const std::vector<Episode>& episodes) {
  for (const auto& e : episodes) {
    nlohmann::json j;
    j["task"] = task_name(e.kind);
    j["prompt"] = e.prompt;
    j["gold"] = e.gold;
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("failed writing episode records");
}

std::vector<Episode> read_episodes_jsonl(std::istream& in) {
  std::vector<Episode> episodes;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Episode e;
      e.kind = parse_task(j.at("task").get<std::string>());
      e.prompt = j.at("prompt").get<std::vector<int>>();
      e.gold = j.at("gold").get<std::vector<int>>();
      episodes.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw InputError("episode record " + std::to_string(line_no) + ": " + ex.what());
    }
  }
  return episodes;
}

}  // namespace lab
