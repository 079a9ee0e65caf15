#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lab/numcore/rng.hpp"

namespace lab {

enum class DivergenceKind {
  kClampedKL,
  kPlainKL,
  kBregman,
  kSquaredError,
  kJensenShannon,
  kNoRegularization,
  kNegativeKL,  // analysis probe: rewards drifting away from the reference
};

const char* divergence_name(DivergenceKind kind);
// Accepts the names produced by divergence_name. Throws ConfigError.
DivergenceKind parse_divergence(std::string_view name);
std::vector<DivergenceKind> all_divergence_kinds();

// Log-probabilities are clamped here before any ratio is formed.
constexpr double kLogProbFloor = -30.0;

// Natural-log probabilities of the sampled token under the trained policy
// and the reference, plus optional full rows over the vocabulary.
struct TokenDivInput {
  double logp_theta = 0.0;
  double logp_ref = 0.0;
  std::span<const float> row_theta = {};
  std::span<const float> row_ref = {};
};

struct EstimateOptions {
  // JensenShannon only: evaluate the divergence against the mixture over the
  // full rows instead of at the sampled token. Rows are then required.
  bool js_full_rows = false;
};

// Per-token penalty of the given kind.
double estimate(DivergenceKind kind, const TokenDivInput& x,
                const EstimateOptions& options = {});

// Full-vocabulary KL(theta || ref) of two log-probability rows. Throws
// InputError when a row does not normalize within 1e-6.
double exact_kl(std::span<const float> logrow_theta, std::span<const float> logrow_ref);
double exact_kl(std::span<const double> logrow_theta, std::span<const double> logrow_ref);
// Full-vocabulary Jensen-Shannon divergence against the mixture.
double exact_js(std::span<const double> logrow_theta, std::span<const double> logrow_ref);

// Exact expectation of the estimator under y ~ theta for the JS kind is the
// full-row JS; for every other kind it is KL (NegativeKL: -KL, none: 0).
double exact_target(DivergenceKind kind, std::span<const double> logrow_theta,
                    std::span<const double> logrow_ref);

struct DistributionPair {
  std::vector<double> logrow_theta;
  std::vector<double> logrow_ref;
};

enum class PairFamily {
  kRandom,      // independent random logits
  kNearby,      // reference logits perturbed from theta's (low KL)
  kPeakedFlat,  // one sharply peaked row against a nearly flat one
};

// Random pair of normalized log-probability rows over `vocab` outcomes.
DistributionPair make_pair(PairFamily family, std::size_t vocab, Rng& rng,
                           double spread = 1.0);

struct CalibrationResult {
  DivergenceKind kind = DivergenceKind::kPlainKL;
  std::size_t vocab = 0;
  std::size_t samples = 0;
  std::uint64_t seed = 0;
  double exact = 0.0;
  double mc_mean = 0.0;
  double mc_variance = 0.0;
  double standard_error = 0.0;
  double bias = 0.0;
  double clamp_bind_probability = 0.0;  // P(logp_theta < logp_ref) under theta
  bool ok = true;
  std::string failure;
};

// Draws N tokens y ~ theta, evaluates the estimator per draw and compares the
// sample mean with the exact target. Degenerate inputs are reported through
// ok/failure instead of throwing. Throws InputError for N < 1000.
CalibrationResult calibrate(DivergenceKind kind, const DistributionPair& pair,
                            std::size_t samples, Rng& rng);

std::string calibration_csv_header();
std::string calibration_csv_row(const CalibrationResult& result);

}  // namespace lab
