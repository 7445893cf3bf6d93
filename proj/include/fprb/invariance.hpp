#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fprb/actstore.hpp"
#include "fprb/behavior.hpp"
#include "fprb/features.hpp"
#include "fprb/pooling.hpp"
#include "fprb/sae.hpp"
#include "fprb/stats.hpp"

namespace fprb {

constexpr double kSmapeFloor = 1e-8;

// Pooled activations of a feature subset over one token mask.
struct PooledVector {
  std::vector<FeatureId> ids;
  Eigen::VectorXd values;
  PoolMode mode = PoolMode::max;
  TokenSpan mask;
};

PooledVector pool(const ActivationDump& dump, const Sae& sae, std::span<const FeatureId> subset, PoolMode mode,
                  const TokenSpan& mask);

// Picks a subset out of an all-feature profile.
PooledVector select(const FeatureProfile& profile, std::span<const FeatureId> subset);

// Mean over entries of |a - b| / max((|a| + |b|) / 2, floor).
template <typename DA, typename DB>
double smape(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b, double floor = kSmapeFloor) {
  require(a.size() == b.size(), "smape: vectors differ in length");
  require(a.size() > 0, "smape: empty vectors");
  const Eigen::ArrayXd ad = a.template cast<double>().array();
  const Eigen::ArrayXd bd = b.template cast<double>().array();
  const Eigen::ArrayXd denom = ((ad.abs() + bd.abs()) / 2.0).max(floor);
  return ((ad - bd).abs() / denom).mean();
}

// Cosine similarity; nullopt when either side is the zero vector.
template <typename DA, typename DB>
std::optional<double> cosine(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  require(a.size() == b.size(), "cosine: vectors differ in length");
  const Eigen::VectorXd ad = a.template cast<double>();
  const Eigen::VectorXd bd = b.template cast<double>();
  const double na = ad.norm(), nb = bd.norm();
  if (na == 0.0 || nb == 0.0) return std::nullopt;
  return std::clamp(ad.dot(bd) / (na * nb), -1.0, 1.0);
}

double smape(const PooledVector& a, const PooledVector& b);
std::optional<double> cosine(const PooledVector& a, const PooledVector& b);

struct PairStats {
  double smape = 0.0;
  std::optional<double> cos;
};

PairStats compare(const PooledVector& a, const PooledVector& b);

struct MetricDelta {
  double d_smape = 0.0;
  std::optional<double> d_cos;  // undefined when either cosine is
};

// Medical statistic minus random statistic.
MetricDelta delta_medical_random(const PooledVector& medical_a, const PooledVector& medical_b,
                                 const PooledVector& random_a, const PooledVector& random_b);

// Per-case result for one layer.
struct CaseInvariance {
  std::string case_id;
  PairStats medical;
  PairStats random;  // averaged over random draws when several are given
  MetricDelta delta;
};

// Pairs NL and NF dumps by case id and compares pooled content-range
// activations. Each entry of `random_draws` is one random subset; with several
// the random statistic is their mean (cosine over draws where defined).
std::vector<CaseInvariance> case_invariance(std::span<const ActivationDump> nl, std::span<const ActivationDump> nf,
                                            const Sae& sae, std::span<const FeatureId> medical,
                                            const std::vector<std::vector<FeatureId>>& random_draws,
                                            PoolMode mode = PoolMode::max, unsigned workers = 1);

struct StratumRow {
  std::string stratum;  // stratum name or "all"
  std::size_t n = 0;
  CiRecord d_smape;
  std::optional<CiRecord> d_cos;  // absent when no case has a defined cosine
};

// Case-bootstrap CIs of the medical-minus-random deltas, per stratum and overall.
std::vector<StratumRow> stratum_table(std::span<const CaseInvariance> cases,
                                      const std::map<std::string, Stratum>& strata, const BootstrapOptions& options);

// Per-case per-feature columns of the NL and NF pooled activations over a pool.
struct PairedPool {
  std::vector<FeatureId> ids;
  Eigen::MatrixXd nl;  // cases x |ids|
  Eigen::MatrixXd nf;
};

struct ResampleResult {
  double medical_mean = 0.0;
  double p = 1.0;
  bool below_resolution = false;  // no draw at or below the medical mean
  double band_lo = 0.0;           // 5th percentile of draw means
  double band_hi = 0.0;           // 95th percentile
  double draw_mean = 0.0;
  std::size_t draws = 0;
  std::size_t draw_size = 0;
  bool exhaustive = false;  // every subset enumerated
  std::uint64_t seed = 0;

  // "<0.001" style text when below resolution.
  std::string p_text() const;
};

// One-sided resampling test: fraction of random draws whose mean sMAPE does
// not exceed the medical mean. Enumerates all subsets when there are at most
// `draws` of them.
ResampleResult resample_permutation_p(double medical_mean, const PairedPool& pool, std::size_t draw_size,
                                      std::size_t draws, std::uint64_t seed, unsigned workers = 1);

PairedPool paired_pool(std::span<const ActivationDump> nl, std::span<const ActivationDump> nf, const Sae& sae,
                       std::span<const FeatureId> ids, PoolMode mode = PoolMode::max, unsigned workers = 1);

// Per-case sMAPE under each token mask. The scaffold mask exists only on the
// multiple-choice side, so it has no free-text counterpart.
struct MaskRow {
  std::string mask;
  std::optional<double> medical;  // mean over cases; absent when not applicable
  std::optional<double> random;
  std::size_t n = 0;
};

std::vector<MaskRow> mask_decomposition(std::span<const ActivationDump> nl, std::span<const ActivationDump> nf,
                                        const Sae& sae, std::span<const FeatureId> medical,
                                        std::span<const FeatureId> random, PoolMode mode = PoolMode::max);

enum class MaskKind { vignette, scaffold, content };

struct PeakLocation {
  std::size_t inside = 0;
  std::size_t counted = 0;  // (case, feature) pairs whose feature fires somewhere in content
  std::optional<double> fraction() const;
};

// Where subset features peak within the content range, checked against a mask.
PeakLocation peak_location_fraction(std::span<const ActivationDump> dumps, const Sae& sae,
                                    std::span<const FeatureId> subset, MaskKind mask = MaskKind::vignette);

void to_json(nlohmann::json& j, const CaseInvariance& c);
void to_json(nlohmann::json& j, const StratumRow& r);
void to_json(nlohmann::json& j, const ResampleResult& r);
void to_json(nlohmann::json& j, const MaskRow& r);

}  // namespace fprb
