#include "lab/divergence/divergence.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "lab/numcore/errors.hpp"

namespace lab {
namespace {

constexpr double kNormalizationTolerance = 1e-6;

double floored(double logp) { return std::max(logp, kLogProbFloor); }

// log(0.5 * (e^a + e^b)) without overflow.
double log_mixture(double a, double b) {
  if (a == b) return a;
  const double hi = std::max(a, b), lo = std::min(a, b);
  return hi + std::log1p(std::exp(lo - hi)) - std::numbers::ln2;
}

template <typename T>
void require_normalized(std::span<const T> row, const char* what) {
  if (row.empty()) throw InputError(std::string(what) + " row is empty");
  double total = 0.0;
  for (T x : row) total += std::exp(static_cast<double>(x));
  if (!(std::abs(total - 1.0) <= kNormalizationTolerance)) {
    throw InputError(std::string(what) + " row sums to " + std::to_string(total) +
                     ", not 1");
  }
}

template <typename T>
double kl_rows(std::span<const T> theta, std::span<const T> ref) {
  if (theta.size() != ref.size()) {
    throw InputError("exact_kl: rows of length " + std::to_string(theta.size()) +
                     " and " + std::to_string(ref.size()));
  }
  require_normalized(theta, "theta");
  require_normalized(ref, "reference");
  double kl = 0.0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double p = std::exp(static_cast<double>(theta[i]));
    if (p == 0.0) continue;
    kl += p * (floored(theta[i]) - floored(ref[i]));
  }
  return std::max(kl, 0.0);
}

std::vector<double> log_softmax(const std::vector<double>& logits) {
  const double hi = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double x : logits) total += std::exp(x - hi);
  const double log_z = hi + std::log(total);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = logits[i] - log_z;
  return out;
}

}  // namespace

const char* divergence_name(DivergenceKind kind) {
  switch (kind) {
    case DivergenceKind::kClampedKL: return "clamped_kl";
    case DivergenceKind::kPlainKL: return "plain_kl";
    case DivergenceKind::kBregman: return "bregman";
    case DivergenceKind::kSquaredError: return "squared_error";
    case DivergenceKind::kJensenShannon: return "jensen_shannon";
    case DivergenceKind::kNoRegularization: return "none";
    case DivergenceKind::kNegativeKL: return "negative_kl";
  }
  return "?";
}

std::vector<DivergenceKind> all_divergence_kinds() {
  return {DivergenceKind::kClampedKL,      DivergenceKind::kPlainKL,
          DivergenceKind::kBregman,        DivergenceKind::kSquaredError,
          DivergenceKind::kJensenShannon,  DivergenceKind::kNoRegularization,
          DivergenceKind::kNegativeKL};
}

DivergenceKind parse_divergence(std::string_view name) {
  for (DivergenceKind kind : all_divergence_kinds()) {
    if (name == divergence_name(kind)) return kind;
  }
  throw ConfigError("unknown divergence kind '" + std::string(name) + "'");
}

double estimate(DivergenceKind kind, const TokenDivInput& x,
                const EstimateOptions& options) {
  const double lt = floored(x.logp_theta);
  const double lr = floored(x.logp_ref);
  const double log_ratio = lt - lr;
  switch (kind) {
    case DivergenceKind::kClampedKL:
      return std::max(0.0, log_ratio);
    case DivergenceKind::kPlainKL:
      return log_ratio;
    case DivergenceKind::kBregman:
      return std::expm1(-log_ratio) + log_ratio;
    case DivergenceKind::kSquaredError:
      return 0.5 * log_ratio * log_ratio;
    case DivergenceKind::kJensenShannon: {
      if (options.js_full_rows) {
        if (x.row_theta.empty() || x.row_ref.empty()) {
          throw InputError("jensen_shannon: full-row mode needs both rows");
        }
        std::vector<double> t(x.row_theta.begin(), x.row_theta.end());
        std::vector<double> r(x.row_ref.begin(), x.row_ref.end());
        return exact_js(t, r);
      }
      const double lm = log_mixture(lt, lr);
      return 0.5 * std::max(0.0, lt - lm) + 0.5 * std::max(0.0, lr - lm);
    }
    case DivergenceKind::kNoRegularization:
      return 0.0;
    case DivergenceKind::kNegativeKL:
      return -log_ratio;
  }
  return 0.0;
}

double exact_kl(std::span<const float> logrow_theta, std::span<const float> logrow_ref) {
  return kl_rows(logrow_theta, logrow_ref);
}

double exact_kl(std::span<const double> logrow_theta, std::span<const double> logrow_ref) {
  return kl_rows(logrow_theta, logrow_ref);
}

double exact_js(std::span<const double> logrow_theta, std::span<const double> logrow_ref) {
  if (logrow_theta.size() != logrow_ref.size()) {
    throw InputError("exact_js: rows differ in length");
  }
  require_normalized(logrow_theta, "theta");
  require_normalized(logrow_ref, "reference");
  double js = 0.0;
  for (std::size_t i = 0; i < logrow_theta.size(); ++i) {
    const double lt = floored(logrow_theta[i]), lr = floored(logrow_ref[i]);
    const double lm = log_mixture(lt, lr);
    js += 0.5 * std::exp(lt) * (lt - lm) + 0.5 * std::exp(lr) * (lr - lm);
  }
  return std::max(js, 0.0);
}

double exact_target(DivergenceKind kind, std::span<const double> logrow_theta,
                    std::span<const double> logrow_ref) {
  switch (kind) {
    case DivergenceKind::kJensenShannon:
      return exact_js(logrow_theta, logrow_ref);
    case DivergenceKind::kNoRegularization:
      return 0.0;
    case DivergenceKind::kNegativeKL:
      return -exact_kl(logrow_theta, logrow_ref);
    default:
      return exact_kl(logrow_theta, logrow_ref);
  }
}

DistributionPair make_pair(PairFamily family, std::size_t vocab, Rng& rng, double spread) {
  if (vocab < 2) throw InputError("make_pair: vocabulary must have at least 2 outcomes");
  std::vector<double> a(vocab), b(vocab);
  switch (family) {
    case PairFamily::kRandom:
      for (auto& x : a) x = spread * rng.normal();
      for (auto& x : b) x = spread * rng.normal();
      break;
    case PairFamily::kNearby:
      for (auto& x : a) x = rng.normal();
      for (std::size_t i = 0; i < vocab; ++i) b[i] = a[i] + spread * rng.normal();
      break;
    case PairFamily::kPeakedFlat: {
      for (auto& x : a) x = 0.1 * rng.normal();
      for (auto& x : b) x = 0.1 * rng.normal();
      a[rng.below(vocab)] += 5.0 * spread;
      if (rng.uniform() < 0.5) std::swap(a, b);
      break;
    }
  }
  return {log_softmax(a), log_softmax(b)};
}

CalibrationResult calibrate(DivergenceKind kind, const DistributionPair& pair,
                            std::size_t samples, Rng& rng) {
  if (samples < 1000) throw InputError("calibrate: at least 1000 samples required");
  CalibrationResult result;
  result.kind = kind;
  result.vocab = pair.logrow_theta.size();
  result.samples = samples;
  result.seed = rng.seed();
  const auto& theta = pair.logrow_theta;
  const auto& ref = pair.logrow_ref;
  if (theta.size() != ref.size() || theta.empty()) {
    result.ok = false;
    result.failure = "rows differ in length";
    return result;
  }
  for (std::size_t i = 0; i < theta.size(); ++i) {
    if (std::isnan(theta[i]) || std::isnan(ref[i])) {
      result.ok = false;
      result.failure = "row holds NaN";
      return result;
    }
    if (std::exp(theta[i]) > 0.0 && std::isinf(ref[i])) {
      result.ok = false;
      result.failure = "support mismatch at outcome " + std::to_string(i) +
                       ": reference probability is zero";
      return result;
    }
  }
  try {
    result.exact = exact_target(kind, theta, ref);
  } catch (const InputError& e) {
    result.ok = false;
    result.failure = e.what();
    return result;
  }

  std::vector<double> cdf(theta.size());
  double running = 0.0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double p = std::exp(theta[i]);
    running += p;
    cdf[i] = running;
    if (theta[i] < ref[i]) result.clamp_bind_probability += p;
  }
  std::vector<double> per_outcome(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    per_outcome[i] = estimate(kind, {theta[i], ref[i]});
  }
  // Welford accumulation.
  double mean = 0.0, m2 = 0.0;
  for (std::size_t n = 1; n <= samples; ++n) {
    const double u = rng.uniform() * running;
    std::size_t y = static_cast<std::size_t>(
        std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    y = std::min(y, cdf.size() - 1);
    const double value = per_outcome[y];
    const double delta = value - mean;
    mean += delta / static_cast<double>(n);
    m2 += delta * (value - mean);
  }
  result.mc_mean = mean;
  result.mc_variance = m2 / static_cast<double>(samples - 1);
  result.standard_error = std::sqrt(result.mc_variance / static_cast<double>(samples));
  result.bias = result.mc_mean - result.exact;
  return result;
}

std::string calibration_csv_header() {
  return "kind,V,exact,mc_mean,mc_variance,bias,N,seed,ok";
}

std::string calibration_csv_row(const CalibrationResult& r) {
  std::ostringstream out;
  out.precision(10);
  out << divergence_name(r.kind) << ',' << r.vocab << ',' << r.exact << ',' << r.mc_mean
      << ',' << r.mc_variance << ',' << r.bias << ',' << r.samples << ',' << r.seed << ','
      << (r.ok ? "1" : "0");
  return out.str();
}

}  // namespace lab
