#include "fprb/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fprb/errors.hpp"
#include "fprb/parallel.hpp"
#include "fprb/rng.hpp"

namespace fprb {

double mean(std::span<const double> values) {
  require(!values.empty(), "mean of empty sequence");
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

double median(std::span<const double> values) { return percentile(values, 0.5); }

double percentile(std::span<const double> values, double q) {
  require(!values.empty(), "percentile of empty sequence");
  require(q >= 0.0 && q <= 1.0, "percentile rank outside [0, 1]");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

void to_json(nlohmann::json& j, const CiRecord& ci) {
  j = nlohmann::json{{"point", ci.point}, {"lower", ci.lower}, {"upper", ci.upper},
                     {"level", ci.level}, {"resamples", ci.resamples}, {"seed", ci.seed},
                     {"n", ci.n}};
  if (ci.n_cos != 0) j["n_cos"] = ci.n_cos;
}

namespace {

template <typename Statistic>
CiRecord percentile_bootstrap(std::size_t n, double point, const BootstrapOptions& options,
                              Statistic&& statistic) {
  require(n >= 1, "bootstrap requires at least one case");
  require(options.resamples >= 1, "bootstrap requires at least one resample");
  std::vector<double> stats(options.resamples);
  parallel_for(options.resamples, options.workers, [&](std::size_t b) {
    Stream stream(options.seed, options.tag, b);
    std::vector<std::size_t> idx(n);
    for (auto& i : idx) i = static_cast<std::size_t>(stream.below(n));
    stats[b] = statistic(idx);
  });
  const double alpha = (1.0 - options.level) / 2.0;
  CiRecord ci;
  ci.point = point;
  ci.lower = percentile(stats, alpha);
  ci.upper = percentile(stats, 1.0 - alpha);
  ci.level = options.level;
  ci.resamples = options.resamples;
  ci.seed = options.seed;
  ci.n = n;
  return ci;
}

}  // namespace

CiRecord bootstrap_ci(std::span<const double> values, const BootstrapOptions& options) {
  require(!values.empty(), "bootstrap_ci: empty input");
  return percentile_bootstrap(values.size(), mean(values), options, [&](const std::vector<std::size_t>& idx) {
    double s = 0.0;
    for (auto i : idx) s += values[i];
    return s / static_cast<double>(idx.size());
  });
}

CiRecord bootstrap_ratio_ci(std::span<const double> numerators, std::span<const double> denominators,
                            const BootstrapOptions& options) {
  require(!numerators.empty(), "bootstrap_ratio_ci: empty input");
  require(numerators.size() == denominators.size(), "bootstrap_ratio_ci: length mismatch");
  const double total_den = std::accumulate(denominators.begin(), denominators.end(), 0.0);
  require(total_den > 0.0, "bootstrap_ratio_ci: zero denominator");
  const double point = std::accumulate(numerators.begin(), numerators.end(), 0.0) / total_den;
  return percentile_bootstrap(numerators.size(), point, options, [&](const std::vector<std::size_t>& idx) {
    double num = 0.0, den = 0.0;
    for (auto i : idx) {
      num += numerators[i];
      den += denominators[i];
    }
    return den > 0.0 ? num / den : 0.0;
  });
}

double binomial_coefficient(unsigned n, unsigned k) {
  if (k > n) return 0.0;
  k = std::min(k, n - k);
  double c = 1.0;
  for (unsigned i = 1; i <= k; ++i) c = c * static_cast<double>(n - k + i) / static_cast<double>(i);
  return std::round(c);
}

}  // namespace fprb
