#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fprb/actstore.hpp"
#include "fprb/sae.hpp"
#include "json.hpp"

namespace fprb {

using FeatureId = Eigen::Index;

struct ContrastScore {
  FeatureId feature = 0;
  double score = 0.0;  // mean medical peak - mean non-medical peak
  double med_fire_rate = 0.0;
  double non_fire_rate = 0.0;
};

constexpr double kFiringThreshold = 1.0;

// Rows are prompts, columns features; entries are per-prompt peak activations.
std::vector<ContrastScore> contrast_scores(const Eigen::MatrixXd& medical_peaks, const Eigen::MatrixXd& non_medical_peaks,
                                           double threshold = kFiringThreshold);

// Both prompt sets must share model, layer, and templating metadata.
void check_contrast_sets(std::span<const ActivationDump> medical, std::span<const ActivationDump> non_medical);

// Scores every feature from max-pooled content activations.
std::vector<ContrastScore> contrast_scores(std::span<const ActivationDump> medical,
                                           std::span<const ActivationDump> non_medical, const Sae& sae,
                                           double threshold = kFiringThreshold, unsigned workers = 1);

struct SelectivityFilter {
  std::size_t k = 3;
  double med_rate_min = 0.70;
  double non_rate_max = 0.10;
};

struct MedicalSelection {
  std::vector<FeatureId> ids;  // by descending score, ties toward lower id
  std::vector<ContrastScore> scores;
  std::size_t requested_k = 0;
  std::size_t qualifying = 0;  // features passing the selectivity filter
  bool truncated() const { return ids.size() < requested_k; }
};

MedicalSelection select_medical(std::span<const ContrastScore> scores, const SelectivityFilter& filter = {});

// Re-selects at each K (3, 5, 10, 20 by default).
std::vector<MedicalSelection> k_sweep(std::span<const ContrastScore> scores,
                                      std::span<const std::size_t> ks = std::span<const std::size_t>{},
                                      SelectivityFilter filter = {});

// Non-medical features whose corpus-mean activation lies in
// [0.5 * min(medical means), 2.0 * max(medical means)]. Throws when empty.
std::vector<FeatureId> magnitude_matched_pool(std::span<const FeatureId> medical, const Eigen::VectorXd& mean_activations);

// Per-feature mean of max-pooled content activations across prompts.
Eigen::VectorXd corpus_mean_activations(const Eigen::MatrixXd& peaks);

// Pool members whose peak exceeds `threshold` on at least `fraction` of prompts.
std::vector<FeatureId> restricted_pool(std::span<const FeatureId> pool, const Eigen::MatrixXd& peaks,
                                       double fraction = 0.25, double threshold = kFiringThreshold);

// Uniform sample without replacement, returned in ascending id order. `draw`
// selects an independent stream for repeated draws under one seed.
std::vector<FeatureId> sample_random_features(std::span<const FeatureId> pool, std::size_t n, std::uint64_t seed,
                                              std::uint64_t draw = 0);

struct FeatureSelection {
  std::vector<FeatureId> medical;
  std::vector<ContrastScore> medical_scores;
  std::size_t k = 0;
  std::vector<FeatureId> random_pool;
  std::vector<FeatureId> restricted_pool;
  std::vector<FeatureId> random_sample;
  std::uint64_t seed = 0;
  std::vector<std::string> warnings;
};

void to_json(nlohmann::json& j, const ContrastScore& s);
void to_json(nlohmann::json& j, const FeatureSelection& s);
// Accepts full selection files and hand-made ones carrying only "medical".
FeatureSelection selection_from_json(const nlohmann::json& j);

}  // namespace fprb
