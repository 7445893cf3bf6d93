#include "fprb/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

#include "fprb/errors.hpp"
#include "fprb/pooling.hpp"

namespace fprb {

void Unembedding::validate() const {
  require(weights.rows() > 0 && weights.cols() > 0, "unembedding is empty");
  std::set<Eigen::Index> distinct;
  for (auto id : letter_ids) {
    require(id >= 0 && id < weights.cols(), "letter token id outside the vocabulary");
    distinct.insert(id);
  }
  require(distinct.size() == 4, "letter token ids must be distinct");
}

Eigen::Index Unembedding::letter_id(Label letter) const {
  require(is_letter(letter), "attribution needs a letter A-D");
  return letter_ids[static_cast<std::size_t>(tier(letter))];
}

Unembedding load_unembedding(const std::filesystem::path& path) {
  const auto t = read_tensor(path);
  Unembedding u;
  u.weights = t.values;
  try {
    const auto& ids = t.header.at("letter_token_ids");
    for (int i = 0; i < 4; ++i)
      u.letter_ids[static_cast<std::size_t>(i)] = ids.at(std::string(to_string(static_cast<Label>(i)))).get<Eigen::Index>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "unembedding descriptor lacks letter token ids: " + std::string(e.what()), path.string());
  }
  u.validate();
  return u;
}

void save_unembedding(const Unembedding& u, const std::filesystem::path& path) {
  u.validate();
  nlohmann::json ids;
  for (int i = 0; i < 4; ++i)
    ids[std::string(to_string(static_cast<Label>(i)))] = u.letter_ids[static_cast<std::size_t>(i)];
  write_tensor(path, u.weights, {{"object", "unembedding"}, {"letter_token_ids", ids}});
}

std::string_view to_string(FeatureCategory c) {
  switch (c) {
    case FeatureCategory::medical: return "medical";
    case FeatureCategory::scaffold: return "scaffold";
    case FeatureCategory::other: return "other";
  }
  return "?";
}

FeatureCategory parse_feature_category(std::string_view text) {
  if (text == "medical") return FeatureCategory::medical;
  if (text == "scaffold") return FeatureCategory::scaffold;
  if (text == "other") return FeatureCategory::other;
  fail(ErrorKind::validation, "unknown feature category '" + std::string(text) + "'");
}

CategoryMap category_map_from_json(const nlohmann::json& j) {
  require(j.is_object(), "category map must be a JSON object");
  CategoryMap m;
  for (auto it = j.begin(); it != j.end(); ++it) {
    FeatureId id = 0;
    try {
      std::size_t used = 0;
      id = static_cast<FeatureId>(std::stoll(it.key(), &used));
      require(used == it.key().size(), "bad feature id '" + it.key() + "' in category map");
    } catch (const std::logic_error&) {
      fail(ErrorKind::validation, "bad feature id '" + it.key() + "' in category map");
    }
    m[id] = parse_feature_category(it.value().get<std::string>());
  }
  return m;
}

nlohmann::json to_json(const CategoryMap& m) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [id, c] : m) j[std::to_string(id)] = to_string(c);
  return j;
}

CategoryMap build_category_map(std::span<const FeatureId> medical, std::span<const FeatureId> scaffold) {
  CategoryMap m;
  for (auto f : medical) m[f] = FeatureCategory::medical;
  for (auto f : scaffold) m.emplace(f, FeatureCategory::scaffold);
  return m;
}

namespace {

Eigen::VectorXd decision_activations(const ActivationDump& dump, const Sae& sae) {
  require(dump.decision_index >= 0 && dump.decision_index < dump.token_count(), "decision index outside the dump",
          dump.case_id);
  return token_activations(dump, sae, dump.decision_index);
}

// W_dec[f, :] . W_U[:, t_l] for the four letters.
Eigen::Vector4d letter_projection(const Sae& sae, const Unembedding& u, FeatureId f) {
  Eigen::Vector4d p;
  const Eigen::VectorXd row = sae.decoder.row(f).cast<double>().transpose();
  for (int l = 0; l < 4; ++l) p(l) = row.dot(u.weights.col(u.letter_ids[static_cast<std::size_t>(l)]).cast<double>());
  return p;
}

}  // namespace

double logit_contrib(const ActivationDump& dump, const Sae& sae, const Unembedding& unembed, FeatureId feature,
                     Label letter) {
  require(unembed.weights.rows() == sae.dim(), "unembedding rows differ from SAE dim");
  require(feature >= 0 && feature < sae.features(), "feature id out of range", dump.case_id);
  const auto id = unembed.letter_id(letter);
  const double a = decision_activations(dump, sae)(feature);
  if (a == 0.0) return 0.0;
  return a * sae.decoder.row(feature).cast<double>().dot(unembed.weights.col(id).cast<double>().transpose());
}

CategoryAttribution category_attribution(const ActivationDump& dump, const Sae& sae, const Unembedding& unembed,
                                         const CategoryMap& categories, Label predicted) {
  require(is_letter(predicted), "predicted answer must be a letter", dump.case_id);
  require(unembed.weights.rows() == sae.dim(), "unembedding rows differ from SAE dim");
  unembed.validate();
  const Eigen::VectorXd acts = decision_activations(dump, sae);

  struct Active {
    FeatureCategory category;
    Eigen::Vector4d contrib;
  };
  std::vector<Active> active;
  for (Eigen::Index f = 0; f < acts.size(); ++f) {
    if (!(acts(f) > 0.0)) continue;
    auto it = categories.find(f);
    active.push_back({it == categories.end() ? FeatureCategory::other : it->second,
                      acts(f) * letter_projection(sae, unembed, f)});
  }
  if (active.empty()) fail(ErrorKind::validation, "no active features at the decision token", dump.case_id);

  CategoryAttribution out;
  out.case_id = dump.case_id;
  out.predicted = predicted;
  out.active = active.size();
  Eigen::Vector4d totals = Eigen::Vector4d::Zero();
  for (const auto& a : active) totals += a.contrib;
  const int p = tier(predicted);
  int runner = -1;
  for (int l = 0; l < 4; ++l)
    if (l != p && (runner < 0 || totals(l) > totals(runner))) runner = l;
  out.runner_up = static_cast<Label>(runner);
  out.margin = totals(p) - totals(runner);

  double abs_total = 0.0;
  for (const auto& a : active) abs_total += std::abs(a.contrib(p));
  if (!(abs_total > 0.0))
    fail(ErrorKind::validation, "active features contribute nothing to the predicted letter", dump.case_id);

  for (auto c : kAllCategories) out.shares[c] = {};
  std::map<FeatureCategory, double> margin_parts;
  for (const auto& a : active) {
    auto& s = out.shares[a.category];
    s.abs_fraction += std::abs(a.contrib(p));
    s.signed_total += a.contrib(p);
    ++s.features;
    margin_parts[a.category] += a.contrib(p) - a.contrib(runner);
  }
  for (auto& [c, s] : out.shares) {
    s.abs_fraction /= abs_total;
    if (out.margin != 0.0) s.margin_share = margin_parts[c] / out.margin;
  }
  for (int l = 0; l < 4; ++l) {
    LetterBreakdown b;
    b.letter = static_cast<Label>(l);
    b.total = totals(l);
    for (auto c : kAllCategories) b.by_category[c] = 0.0;
    for (const auto& a : active) b.by_category[a.category] += a.contrib(l);
    out.letters.push_back(std::move(b));
  }
  return out;
}

std::vector<FeatureId> top_k_decision_features(const ActivationDump& dump, const Sae& sae, std::size_t k) {
  const Eigen::VectorXd acts = decision_activations(dump, sae);
  std::vector<FeatureId> ids;
  for (Eigen::Index f = 0; f < acts.size(); ++f)
    if (acts(f) > 0.0) ids.push_back(f);
  std::stable_sort(ids.begin(), ids.end(), [&](FeatureId a, FeatureId b) { return acts(a) > acts(b); });
  ids.resize(std::min(ids.size(), k));
  return ids;
}

double jaccard(std::span<const FeatureId> a, std::span<const FeatureId> b) {
  const std::set<FeatureId> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  if (sa.empty() && sb.empty()) return 1.0;
  std::size_t common = 0;
  for (auto f : sa) common += sb.count(f);
  return static_cast<double>(common) / static_cast<double>(sa.size() + sb.size() - common);
}

std::string_view to_string(PeakSite s) {
  switch (s) {
    case PeakSite::vignette: return "vignette";
    case PeakSite::scaffold: return "scaffold";
    case PeakSite::other_content: return "other_content";
    case PeakSite::outside_content: return "outside_content";
    case PeakSite::none: return "none";
  }
  return "?";
}

std::vector<PeakSite> peak_classification(const ActivationDump& dump, const Sae& sae,
                                          std::span<const FeatureId> features) {
  if (is_multiple_choice(dump.condition) && !dump.scaffold_mask)
    fail(ErrorKind::validation, "multiple-choice dump lacks a scaffold mask", dump.case_id);
  const auto p = profile(dump, sae, TokenSpan{0, dump.token_count()});
  std::vector<PeakSite> out;
  for (auto f : features) {
    require(f >= 0 && f < sae.features(), "feature id out of range", dump.case_id);
    const auto t = p.peak_token[static_cast<std::size_t>(f)];
    if (t < 0)
      out.push_back(PeakSite::none);
    else if (dump.vignette_mask.contains(t))
      out.push_back(PeakSite::vignette);
    else if (dump.scaffold_mask && dump.scaffold_mask->contains(t))
      out.push_back(PeakSite::scaffold);
    else if (dump.content_range.contains(t))
      out.push_back(PeakSite::other_content);
    else
      out.push_back(PeakSite::outside_content);
  }
  return out;
}

DecisionOverlap decision_overlap(const ActivationDump& nl, const ActivationDump& nf, const Sae& sae,
                                 std::span<const FeatureId> medical, std::size_t k) {
  require(nl.case_id == nf.case_id, "decision_overlap: case ids differ", nl.case_id);
  DecisionOverlap d;
  d.case_id = nl.case_id;
  d.nl_top = top_k_decision_features(nl, sae, k);
  d.nf_top = top_k_decision_features(nf, sae, k);
  d.jaccard = jaccard(d.nl_top, d.nf_top);
  const std::set<FeatureId> nf_set(d.nf_top.begin(), d.nf_top.end());
  std::vector<FeatureId> nl_only;
  for (auto f : d.nl_top)
    if (!nf_set.contains(f)) nl_only.push_back(f);
  d.nl_only = nl_only.size();
  // Outside the shared vignette counts as scaffold-driven.
  for (auto site : peak_classification(nl, sae, nl_only))
    if (site != PeakSite::vignette && site != PeakSite::none) ++d.nl_only_scaffold;
  std::set<FeatureId> both(d.nl_top.begin(), d.nl_top.end());
  both.insert(d.nf_top.begin(), d.nf_top.end());
  for (auto f : medical) d.medical_in_top += both.count(f);
  return d;
}

void to_json(nlohmann::json& j, const CategoryAttribution& a) {
  j = nlohmann::json{{"case_id", a.case_id},
                     {"predicted", to_string(a.predicted)},
                     {"runner_up", to_string(a.runner_up)},
                     {"margin", a.margin},
                     {"active", a.active}};
  nlohmann::json shares = nlohmann::json::object();
  for (const auto& [c, s] : a.shares)
    shares[std::string(to_string(c))] = {
        {"abs_fraction", s.abs_fraction},
        {"margin_share", s.margin_share ? nlohmann::json(*s.margin_share) : nlohmann::json(nullptr)},
        {"signed_total", s.signed_total},
        {"features", s.features}};
  j["categories"] = shares;
  nlohmann::json letters = nlohmann::json::object();
  for (const auto& b : a.letters) {
    nlohmann::json by = nlohmann::json::object();
    for (const auto& [c, v] : b.by_category) by[std::string(to_string(c))] = v;
    letters[std::string(to_string(b.letter))] = {{"total", b.total}, {"by_category", by}};
  }
  j["letters"] = letters;
}

void to_json(nlohmann::json& j, const DecisionOverlap& d) {
  j = nlohmann::json{{"case_id", d.case_id},         {"nl_top", d.nl_top},
                     {"nf_top", d.nf_top},           {"jaccard", d.jaccard},
                     {"nl_only", d.nl_only},         {"nl_only_scaffold", d.nl_only_scaffold},
                     {"medical_in_top", d.medical_in_top}};
}

}  // namespace fprb
