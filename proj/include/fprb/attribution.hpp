#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "fprb/actstore.hpp"
#include "fprb/behavior.hpp"
#include "fprb/features.hpp"
#include "fprb/sae.hpp"
#include "json.hpp"

namespace fprb {

// Unembedding matrix (D x V) and the vocabulary ids of the four answer letters.
struct Unembedding {
  Eigen::MatrixXf weights;
  std::array<Eigen::Index, 4> letter_ids{};

  void validate() const;
  Eigen::Index letter_id(Label letter) const;
};

// Tensor file whose descriptor carries {"letter_token_ids": {"A": id, ...}}.
Unembedding load_unembedding(const std::filesystem::path& path);
void save_unembedding(const Unembedding& u, const std::filesystem::path& path);

enum class FeatureCategory { medical, scaffold, other };

std::string_view to_string(FeatureCategory c);
FeatureCategory parse_feature_category(std::string_view text);
constexpr std::array<FeatureCategory, 3> kAllCategories{FeatureCategory::medical, FeatureCategory::scaffold,
                                                         FeatureCategory::other};

using CategoryMap = std::map<FeatureId, FeatureCategory>;

// {"<feature id>": "medical" | "scaffold" | "other", ...}
CategoryMap category_map_from_json(const nlohmann::json& j);
nlohmann::json to_json(const CategoryMap& m);

// Medical ids, then scaffold ids (skipping any already medical); rest default to other.
CategoryMap build_category_map(std::span<const FeatureId> medical, std::span<const FeatureId> scaffold);

// a_f(decision token) * (W_dec[f, :] . W_U[:, letter])
double logit_contrib(const ActivationDump& dump, const Sae& sae, const Unembedding& unembed, FeatureId feature,
                     Label letter);

struct CategoryShare {
  double abs_fraction = 0.0;
  std::optional<double> margin_share;  // absent when the total margin is zero
  double signed_total = 0.0;           // contribution to the predicted letter
  std::size_t features = 0;            // active features in this category
};

struct LetterBreakdown {
  Label letter = Label::A;
  double total = 0.0;
  std::map<FeatureCategory, double> by_category;
};

struct CategoryAttribution {
  std::string case_id;
  Label predicted = Label::A;
  Label runner_up = Label::A;
  double margin = 0.0;  // linear predicted-minus-runner-up margin over active features
  std::size_t active = 0;
  std::map<FeatureCategory, CategoryShare> shares;
  std::vector<LetterBreakdown> letters;
};

// `predicted` comes from the recorded generation, not from the linear projection.
CategoryAttribution category_attribution(const ActivationDump& dump, const Sae& sae, const Unembedding& unembed,
                                         const CategoryMap& categories, Label predicted);

// Highest activations at the decision token, ties toward lower id.
std::vector<FeatureId> top_k_decision_features(const ActivationDump& dump, const Sae& sae, std::size_t k = 20);

// |A & B| / |A | B|; 1 when both sets are empty.
double jaccard(std::span<const FeatureId> a, std::span<const FeatureId> b);

enum class PeakSite { vignette, scaffold, other_content, outside_content, none };

std::string_view to_string(PeakSite s);

// Location of each feature's argmax over the whole dump (earliest on ties).
std::vector<PeakSite> peak_classification(const ActivationDump& dump, const Sae& sae,
                                          std::span<const FeatureId> features);

struct DecisionOverlap {
  std::string case_id;
  std::vector<FeatureId> nl_top;
  std::vector<FeatureId> nf_top;
  double jaccard = 0.0;
  std::size_t nl_only = 0;
  std::size_t nl_only_scaffold = 0;  // NL-only features peaking outside the vignette
  std::size_t medical_in_top = 0;    // medical ids in either top set
};

DecisionOverlap decision_overlap(const ActivationDump& nl, const ActivationDump& nf, const Sae& sae,
                                 std::span<const FeatureId> medical, std::size_t k = 20);

void to_json(nlohmann::json& j, const CategoryAttribution& a);
void to_json(nlohmann::json& j, const DecisionOverlap& d);

}  // namespace fprb
