#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "fprb/actstore.hpp"
#include "fprb/features.hpp"
#include "fprb/sae.hpp"
#include "json.hpp"

namespace fprb {

enum class Aggregation { full_mean, length_controlled_mean, max_pool };

std::string_view to_string(Aggregation a);
Aggregation parse_aggregation(std::string_view text);

// Mean NL-minus-NF residual difference over paired cases.
struct FormatDirection {
  Eigen::VectorXd delta;
  Aggregation aggregation = Aggregation::full_mean;
  std::size_t cases = 0;
  int layer = 0;
};

// full_mean: per-case mean residual over each side's content range.
// length_controlled_mean: only content tokens inside the shared token prefix.
// max_pool: sum_f (peak_nl_f - peak_nf_f) * W_dec[f, :]; needs `sae`.
FormatDirection format_direction(std::span<const ActivationDump> nl, std::span<const ActivationDump> nf,
                                 Aggregation aggregation, const Sae* sae = nullptr, unsigned workers = 1);

struct AlignmentRank {
  FeatureId feature = 0;
  double abs_cos = 0.0;
  double rank = 0.0;        // 1-based, ties share their average rank
  double percentile = 0.0;  // (rank - 1) / F; 0 = most aligned
};

// |cos(delta, W_enc[:, f])| over all features; results for `subset` in subset
// order (all features when empty).
std::vector<AlignmentRank> encoder_alignment_ranks(const Eigen::VectorXd& delta, const Sae& sae,
                                                   std::span<const FeatureId> subset = {});

// Features ordered by descending |cos|, ties toward lower id.
std::vector<FeatureId> top_aligned_features(const Eigen::VectorXd& delta, const Sae& sae, std::size_t n);

struct AblationReport {
  Eigen::VectorXd delta_norms;     // per token in span
  Eigen::VectorXd residual_norms;  // per token in span
  double mean_norm = 0.0;
  double peak_norm = 0.0;
  std::int64_t peak_token = -1;
  double mean_residual_norm = 0.0;
  double mean_fraction = 0.0;  // mean_norm / mean_residual_norm
  double peak_fraction = 0.0;  // peak_norm / residual norm at the peak token
};

// Per-token SAE reconstruction delta of `features`: sum_f a_f(t) * W_dec[f, :].
// Covers every token unless a span is given.
AblationReport ablation_deltas(const ActivationDump& dump, const Sae& sae, std::span<const FeatureId> features,
                               std::optional<TokenSpan> span = std::nullopt);

struct SteeringVector {
  Eigen::VectorXd v;
  double norm = 0.0;
  int layer = 0;
};

SteeringVector steering_vector(const FormatDirection& direction);

// alpha * |v| / residual_norm
double steering_perturbation(double vector_norm, double alpha, double residual_norm);
double steering_perturbation(const SteeringVector& v, double alpha, double residual_norm);

constexpr double kSteeringAlphas[] = {0.0, 0.5, 1.0, 2.0, 4.0};

// Stored in the dump framing with a JSON descriptor for the generation harness.
void write_direction(const std::filesystem::path& path, const FormatDirection& d);
FormatDirection read_direction(const std::filesystem::path& path);
void write_steering(const std::filesystem::path& path, const SteeringVector& v);
SteeringVector read_steering(const std::filesystem::path& path);

void to_json(nlohmann::json& j, const AlignmentRank& r);
void to_json(nlohmann::json& j, const AblationReport& r);

}  // namespace fprb
