#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace fprb {

double mean(std::span<const double> values);
double median(std::span<const double> values);

// Linear interpolation between closest ranks (numpy's default), q in [0, 1].
double percentile(std::span<const double> values, double q);

// Percentile-bootstrap confidence interval.
struct CiRecord {
  double point = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  double level = 0.95;
  std::size_t resamples = 0;
  std::uint64_t seed = 0;
  std::size_t n = 0;      // cases contributing to the point estimate
  std::size_t n_cos = 0;  // cases with a defined cosine (paired records only)
};

void to_json(nlohmann::json& j, const CiRecord& ci);

struct BootstrapOptions {
  std::size_t resamples = 2000;
  std::uint64_t seed = 0;
  double level = 0.95;
  unsigned workers = 1;
  std::string_view tag = "bootstrap";
};

// Resamples cases with replacement and takes the resample mean.
CiRecord bootstrap_ci(std::span<const double> values, const BootstrapOptions& options);

// Case-clustered ratio: resample cases, statistic = sum(num) / sum(den).
CiRecord bootstrap_ratio_ci(std::span<const double> numerators, std::span<const double> denominators,
                            const BootstrapOptions& options);

// C(n, k) in floating point; exact for the small n used in tests.
double binomial_coefficient(unsigned n, unsigned k);

}  // namespace fprb
