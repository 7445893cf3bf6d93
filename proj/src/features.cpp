#include "fprb/features.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "fprb/errors.hpp"
#include "fprb/pooling.hpp"
#include "fprb/rng.hpp"

namespace fprb {

std::vector<ContrastScore> contrast_scores(const Eigen::MatrixXd& med, const Eigen::MatrixXd& non, double threshold) {
  require(med.rows() > 0, "contrast_scores: empty medical prompt set");
  require(non.rows() > 0, "contrast_scores: empty non-medical prompt set");
  require(med.cols() == non.cols(), "contrast_scores: feature counts differ");
  std::vector<ContrastScore> out(static_cast<std::size_t>(med.cols()));
  for (Eigen::Index f = 0; f < med.cols(); ++f) {
    auto& s = out[static_cast<std::size_t>(f)];
    s.feature = f;
    s.score = med.col(f).mean() - non.col(f).mean();
    s.med_fire_rate = static_cast<double>((med.col(f).array() > threshold).count()) / static_cast<double>(med.rows());
    s.non_fire_rate = static_cast<double>((non.col(f).array() > threshold).count()) / static_cast<double>(non.rows());
  }
  return out;
}

void check_contrast_sets(std::span<const ActivationDump> medical, std::span<const ActivationDump> non_medical) {
  require(!medical.empty(), "contrast_scores: empty medical prompt set");
  require(!non_medical.empty(), "contrast_scores: empty non-medical prompt set");
  const auto& ref = medical.front();
  const auto templating = [](const ActivationDump& d) {
    auto it = d.metadata.find("templating");
    return it == d.metadata.end() ? std::string{} : it->second;
  };
  auto check = [&](const ActivationDump& d) {
    require(d.layer == ref.layer, "contrast_scores: layer mismatch", d.case_id);
    require(d.model_id == ref.model_id, "contrast_scores: model mismatch", d.case_id);
    require(templating(d) == templating(ref), "contrast_scores: chat templating differs within the contrast run",
            d.case_id);
  };
  for (const auto& d : medical) check(d);
  for (const auto& d : non_medical) check(d);
}

std::vector<ContrastScore> contrast_scores(std::span<const ActivationDump> medical,
                                           std::span<const ActivationDump> non_medical, const Sae& sae,
                                           double threshold, unsigned workers) {
  check_contrast_sets(medical, non_medical);
  return contrast_scores(peak_matrix(medical, sae, workers), peak_matrix(non_medical, sae, workers), threshold);
}

namespace {

bool better(const ContrastScore& a, const ContrastScore& b) {
  return a.score > b.score || (a.score == b.score && a.feature < b.feature);
}

}  // namespace

MedicalSelection select_medical(std::span<const ContrastScore> scores, const SelectivityFilter& filter) {
  std::vector<ContrastScore> passing;
  for (const auto& s : scores)
    if (s.med_fire_rate >= filter.med_rate_min && s.non_fire_rate <= filter.non_rate_max) passing.push_back(s);
  std::sort(passing.begin(), passing.end(), better);
  MedicalSelection sel;
  sel.requested_k = filter.k;
  sel.qualifying = passing.size();
  passing.resize(std::min(passing.size(), filter.k));
  for (const auto& s : passing) sel.ids.push_back(s.feature);
  sel.scores = std::move(passing);
  return sel;
}

std::vector<MedicalSelection> k_sweep(std::span<const ContrastScore> scores, std::span<const std::size_t> ks,
                                      SelectivityFilter filter) {
  static constexpr std::size_t kDefault[] = {3, 5, 10, 20};
  if (ks.empty()) ks = kDefault;
  std::vector<MedicalSelection> out;
  for (auto k : ks) {
    filter.k = k;
    out.push_back(select_medical(scores, filter));
  }
  return out;
}

std::vector<FeatureId> magnitude_matched_pool(std::span<const FeatureId> medical, const Eigen::VectorXd& means) {
  require(!medical.empty(), "magnitude_matched_pool: empty medical selection");
  double lo = INFINITY, hi = -INFINITY;
  for (auto f : medical) {
    require(f >= 0 && f < means.size(), "magnitude_matched_pool: medical id out of range");
    lo = std::min(lo, means(f));
    hi = std::max(hi, means(f));
  }
  const double band_lo = 0.5 * lo, band_hi = 2.0 * hi;
  const std::set<FeatureId> excluded(medical.begin(), medical.end());
  std::vector<FeatureId> pool;
  for (Eigen::Index f = 0; f < means.size(); ++f)
    if (!excluded.contains(f) && means(f) >= band_lo && means(f) <= band_hi) pool.push_back(f);
  require(!pool.empty(), "magnitude_matched_pool: no non-medical feature in the band [" + std::to_string(band_lo) +
                             ", " + std::to_string(band_hi) + "]");
  return pool;
}

Eigen::VectorXd corpus_mean_activations(const Eigen::MatrixXd& peaks) {
  require(peaks.rows() > 0, "corpus_mean_activations: no prompts");
  return peaks.colwise().mean().transpose();
}

std::vector<FeatureId> restricted_pool(std::span<const FeatureId> pool, const Eigen::MatrixXd& peaks, double fraction,
                                       double threshold) {
  require(!pool.empty(), "restricted_pool: empty pool");
  require(peaks.rows() > 0, "restricted_pool: no prompts");
  // count / n >= fraction, evaluated in integers to keep 30/120 at 0.25 inside.
  const auto n = static_cast<double>(peaks.rows());
  const auto needed = static_cast<Eigen::Index>(std::ceil(fraction * n - 1e-9));
  std::vector<FeatureId> out;
  for (auto f : pool) {
    require(f >= 0 && f < peaks.cols(), "restricted_pool: feature id out of range");
    if ((peaks.col(f).array() > threshold).count() >= needed) out.push_back(f);
  }
  return out;
}

std::vector<FeatureId> sample_random_features(std::span<const FeatureId> pool, std::size_t n, std::uint64_t seed,
                                              std::uint64_t draw) {
  require(pool.size() >= n, "sample_random_features: pool of " + std::to_string(pool.size()) +
                                " is smaller than the requested " + std::to_string(n));
  std::vector<FeatureId> ids(pool.begin(), pool.end());
  std::sort(ids.begin(), ids.end());
  Stream stream(seed, "random_features", draw);
  for (std::size_t i = 0; i < n; ++i) {
    const auto j = i + static_cast<std::size_t>(stream.below(ids.size() - i));
    std::swap(ids[i], ids[j]);
  }
  ids.resize(n);
  std::sort(ids.begin(), ids.end());
  return ids;
}

void to_json(nlohmann::json& j, const ContrastScore& s) {
  j = nlohmann::json{{"feature", s.feature},
                     {"score", s.score},
                     {"med_fire_rate", s.med_fire_rate},
                     {"non_fire_rate", s.non_fire_rate}};
}

void to_json(nlohmann::json& j, const FeatureSelection& s) {
  j = nlohmann::json{{"medical", s.medical},           {"medical_scores", s.medical_scores},
                     {"k", s.k},                       {"random_pool", s.random_pool},
                     {"restricted_pool", s.restricted_pool}, {"random_sample", s.random_sample},
                     {"seed", s.seed},                 {"warnings", s.warnings}};
}

FeatureSelection selection_from_json(const nlohmann::json& j) {
  FeatureSelection s;
  try {
    s.medical = j.at("medical").get<std::vector<FeatureId>>();
    s.k = j.value("k", s.medical.size());
    s.random_pool = j.value("random_pool", std::vector<FeatureId>{});
    s.restricted_pool = j.value("restricted_pool", std::vector<FeatureId>{});
    s.random_sample = j.value("random_sample", std::vector<FeatureId>{});
    s.seed = j.value("seed", std::uint64_t{0});
    s.warnings = j.value("warnings", std::vector<std::string>{});
    if (j.contains("medical_scores"))
      for (const auto& e : j["medical_scores"])
        s.medical_scores.push_back({e.at("feature").get<FeatureId>(), e.at("score").get<double>(),
                                    e.at("med_fire_rate").get<double>(), e.at("non_fire_rate").get<double>()});
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("malformed feature selection: ") + e.what());
  }
  require(!s.medical.empty(), "feature selection lists no medical features");
  return s;
}

}  // namespace fprb
