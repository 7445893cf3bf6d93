#include "fprb/direction.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "fprb/errors.hpp"
#include "fprb/parallel.hpp"
#include "fprb/pooling.hpp"

namespace fprb {

std::string_view to_string(Aggregation a) {
  switch (a) {
    case Aggregation::full_mean: return "full_mean";
    case Aggregation::length_controlled_mean: return "length_controlled_mean";
    case Aggregation::max_pool: return "max_pool";
  }
  return "?";
}

Aggregation parse_aggregation(std::string_view text) {
  if (text == "full_mean") return Aggregation::full_mean;
  if (text == "length_controlled_mean") return Aggregation::length_controlled_mean;
  if (text == "max_pool") return Aggregation::max_pool;
  fail(ErrorKind::validation, "unknown aggregation '" + std::string(text) + "'");
}

namespace {

Eigen::VectorXd mean_rows(const ActivationDump& d, const TokenSpan& span) {
  return d.residuals.middleRows(span.start, span.length()).cast<double>().colwise().mean().transpose();
}

}  // namespace

FormatDirection format_direction(std::span<const ActivationDump> nl, std::span<const ActivationDump> nf,
                                 Aggregation aggregation, const Sae* sae, unsigned workers) {
  const auto pairs = pair_dumps(nl, nf);
  require(!pairs.empty(), "format_direction: no paired cases");
  const auto D = pairs.front().first->dim();
  if (aggregation == Aggregation::max_pool) {
    require(sae != nullptr, "format_direction: max_pool aggregation needs an SAE");
    require(sae->dim() == D, "format_direction: SAE dim differs from dump dim");
  }
  std::vector<Eigen::VectorXd> per_case(pairs.size());
  parallel_for(pairs.size(), workers, [&](std::size_t i) {
    const auto& [a, b] = pairs[i];
    require(a->dim() == D && b->dim() == D, "format_direction: dumps differ in dim", a->case_id);
    switch (aggregation) {
      case Aggregation::full_mean:
        per_case[i] = mean_rows(*a, a->content_range) - mean_rows(*b, b->content_range);
        break;
      case Aggregation::length_controlled_mean: {
        const auto prefix = static_cast<std::int64_t>(shared_prefix_length(*a, *b).length);
        const TokenSpan span{std::max(a->content_range.start, b->content_range.start),
                             std::min({a->content_range.end, b->content_range.end, prefix})};
        if (span.empty()) fail(ErrorKind::validation, "no shared content tokens for a length-controlled mean", a->case_id);
        per_case[i] = mean_rows(*a, span) - mean_rows(*b, span);
        break;
      }
      case Aggregation::max_pool: {
        const Eigen::VectorXd peaks = profile(*a, *sae, a->content_range).values - profile(*b, *sae, b->content_range).values;
        per_case[i] = sae->decoder.cast<double>().transpose() * peaks;
        break;
      }
    }
  });
  FormatDirection d;
  d.aggregation = aggregation;
  d.cases = pairs.size();
  d.layer = pairs.front().first->layer;
  d.delta = Eigen::VectorXd::Zero(D);
  for (const auto& v : per_case) d.delta += v;
  d.delta /= static_cast<double>(pairs.size());
  require(d.delta.allFinite(), "format_direction: non-finite direction");
  return d;
}

namespace {

Eigen::VectorXd abs_cosines(const Eigen::VectorXd& delta, const Sae& sae) {
  require(delta.size() == sae.dim(), "alignment: direction length differs from SAE dim");
  const double dn = delta.norm();
  if (!(dn > 0.0)) fail(ErrorKind::validation, "alignment: zero direction");
  const Eigen::MatrixXd enc = sae.encoder.cast<double>();
  Eigen::VectorXd out(sae.features());
  for (Eigen::Index f = 0; f < enc.cols(); ++f) {
    const double cn = enc.col(f).norm();
    out(f) = cn > 0.0 ? std::min(1.0, std::abs(enc.col(f).dot(delta)) / (cn * dn)) : 0.0;
  }
  return out;
}

std::vector<FeatureId> order_by_alignment(const Eigen::VectorXd& c) {
  std::vector<FeatureId> order(static_cast<std::size_t>(c.size()));
  std::iota(order.begin(), order.end(), FeatureId{0});
  std::stable_sort(order.begin(), order.end(), [&](FeatureId a, FeatureId b) { return c(a) > c(b); });
  return order;
}

}  // namespace

std::vector<AlignmentRank> encoder_alignment_ranks(const Eigen::VectorXd& delta, const Sae& sae,
                                                   std::span<const FeatureId> subset) {
  const Eigen::VectorXd c = abs_cosines(delta, sae);
  const auto F = c.size();
  const auto order = order_by_alignment(c);
  Eigen::VectorXd rank(F);
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && c(order[j + 1]) == c(order[i])) ++j;
    const double avg = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (auto k = i; k <= j; ++k) rank(order[k]) = avg;
    i = j + 1;
  }
  std::vector<FeatureId> ids(subset.begin(), subset.end());
  if (ids.empty()) {
    ids.resize(static_cast<std::size_t>(F));
    std::iota(ids.begin(), ids.end(), FeatureId{0});
  }
  std::vector<AlignmentRank> out;
  for (auto f : ids) {
    require(f >= 0 && f < F, "alignment: feature id out of range");
    out.push_back({f, c(f), rank(f), (rank(f) - 1.0) / static_cast<double>(F)});
  }
  return out;
}

std::vector<FeatureId> top_aligned_features(const Eigen::VectorXd& delta, const Sae& sae, std::size_t n) {
  auto order = order_by_alignment(abs_cosines(delta, sae));
  order.resize(std::min(order.size(), n));
  return order;
}

AblationReport ablation_deltas(const ActivationDump& dump, const Sae& sae, std::span<const FeatureId> features,
                               std::optional<TokenSpan> span) {
  const TokenSpan s = span.value_or(TokenSpan{0, dump.token_count()});
  require(!s.empty() && s.start >= 0 && s.end <= dump.token_count(), "ablation: span outside the dump", dump.case_id);
  require(dump.dim() == sae.dim(), "ablation: dump dim differs from SAE dim", dump.case_id);
  for (auto f : features) require(f >= 0 && f < sae.features(), "ablation: feature id out of range", dump.case_id);
  const auto rows = dump.residuals.middleRows(s.start, s.length());
  const Eigen::MatrixXd acts = encode_rows(rows, sae).cast<double>();
  const Eigen::MatrixXd dec = sae.decoder.cast<double>();
  Eigen::MatrixXd delta = Eigen::MatrixXd::Zero(s.length(), sae.dim());
  for (auto f : features) delta += acts.col(f) * dec.row(f);

  AblationReport r;
  r.delta_norms = delta.rowwise().norm();
  r.residual_norms = rows.cast<double>().rowwise().norm();
  r.mean_norm = r.delta_norms.mean();
  r.mean_residual_norm = r.residual_norms.mean();
  Eigen::Index peak = 0;
  r.peak_norm = r.delta_norms.maxCoeff(&peak);
  r.peak_token = s.start + peak;
  r.mean_fraction = r.mean_residual_norm > 0.0 ? r.mean_norm / r.mean_residual_norm : 0.0;
  const double at_peak = r.residual_norms(peak);
  r.peak_fraction = at_peak > 0.0 ? r.peak_norm / at_peak : 0.0;
  return r;
}

SteeringVector steering_vector(const FormatDirection& direction) {
  SteeringVector v;
  v.v = direction.delta;
  v.norm = direction.delta.norm();
  v.layer = direction.layer;
  return v;
}

double steering_perturbation(double vector_norm, double alpha, double residual_norm) {
  if (!(residual_norm > 0.0)) fail(ErrorKind::validation, "steering: residual norm must be positive");
  require(vector_norm >= 0.0, "steering: negative vector norm");
  return alpha * vector_norm / residual_norm;
}

double steering_perturbation(const SteeringVector& v, double alpha, double residual_norm) {
  return steering_perturbation(v.norm, alpha, residual_norm);
}

void write_direction(const std::filesystem::path& path, const FormatDirection& d) {
  write_tensor(path, d.delta.cast<float>(),
               {{"object", "format_direction"},
                {"layer", d.layer},
                {"aggregation", std::string(to_string(d.aggregation))},
                {"cases", d.cases}});
}

FormatDirection read_direction(const std::filesystem::path& path) {
  const auto t = read_tensor(path);
  if (t.header.value("object", std::string{}) != "format_direction" || t.values.cols() != 1)
    fail(ErrorKind::format, "not a format direction: " + path.string(), path.string());
  FormatDirection d;
  d.delta = t.values.col(0).cast<double>();
  try {
    d.layer = t.header.at("layer").get<int>();
    d.aggregation = parse_aggregation(t.header.at("aggregation").get<std::string>());
    d.cases = t.header.at("cases").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "bad direction descriptor in " + path.string() + ": " + e.what(), path.string());
  }
  return d;
}

void write_steering(const std::filesystem::path& path, const SteeringVector& v) {
  write_tensor(path, v.v.cast<float>(), {{"object", "steering_vector"}, {"layer", v.layer}, {"norm", v.norm}});
}

SteeringVector read_steering(const std::filesystem::path& path) {
  const auto t = read_tensor(path);
  if (t.header.value("object", std::string{}) != "steering_vector" || t.values.cols() != 1)
    fail(ErrorKind::format, "not a steering vector: " + path.string(), path.string());
  SteeringVector v;
  v.v = t.values.col(0).cast<double>();
  v.norm = v.v.norm();
  v.layer = t.header.value("layer", 0);
  return v;
}

void to_json(nlohmann::json& j, const AlignmentRank& r) {
  j = nlohmann::json{{"feature", r.feature}, {"abs_cos", r.abs_cos}, {"rank", r.rank}, {"percentile", r.percentile}};
}

void to_json(nlohmann::json& j, const AblationReport& r) {
  j = nlohmann::json{{"mean_norm", r.mean_norm},
                     {"peak_norm", r.peak_norm},
                     {"peak_token", r.peak_token},
                     {"mean_residual_norm", r.mean_residual_norm},
                     {"mean_fraction", r.mean_fraction},
                     {"peak_fraction", r.peak_fraction}};
}

}  // namespace fprb
