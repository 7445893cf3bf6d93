#include "fprb/pooling.hpp"

#include <string>

#include "fprb/errors.hpp"
#include "fprb/parallel.hpp"

namespace fprb {

std::string_view to_string(PoolMode mode) { return mode == PoolMode::max ? "max" : "mean"; }

PoolMode parse_pool_mode(std::string_view text) {
  if (text == "max") return PoolMode::max;
  if (text == "mean") return PoolMode::mean;
  fail(ErrorKind::validation, "unknown pooling mode '" + std::string(text) + "'");
}

FeatureProfile profile(const ActivationDump& dump, const Sae& sae, const TokenSpan& span, PoolMode mode) {
  require(!span.empty(), "pool: empty token mask", dump.case_id);
  require(span.start >= 0 && span.end <= dump.token_count(), "pool: mask outside the dump", dump.case_id);
  require(dump.dim() == sae.dim(), "pool: dump dim differs from SAE dim", dump.case_id);
  const auto acts = encode_rows(dump.residuals.middleRows(span.start, span.length()), sae);
  const auto F = sae.features();
  FeatureProfile p;
  p.mode = mode;
  p.span = span;
  p.values = Eigen::VectorXd::Zero(F);
  p.peak_token.assign(static_cast<std::size_t>(F), -1);
  for (Eigen::Index f = 0; f < F; ++f) {
    double best = 0.0, total = 0.0;
    std::int64_t where = -1;
    for (Eigen::Index t = 0; t < acts.rows(); ++t) {
      const double a = acts(t, f);
      total += a;
      if (a > best) {
        best = a;
        where = span.start + t;
      }
    }
    p.values(f) = mode == PoolMode::max ? best : total / static_cast<double>(acts.rows());
    p.peak_token[static_cast<std::size_t>(f)] = where;
  }
  return p;
}

Eigen::VectorXd token_activations(const ActivationDump& dump, const Sae& sae, std::int64_t token) {
  require(token >= 0 && token < dump.token_count(), "token index outside the dump", dump.case_id);
  require(dump.dim() == sae.dim(), "dump dim differs from SAE dim", dump.case_id);
  return encode_rows(dump.residuals.row(token), sae).row(0).transpose().cast<double>();
}

Eigen::MatrixXd peak_matrix(std::span<const ActivationDump> dumps, const Sae& sae, unsigned workers) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(dumps.size()), sae.features());
  parallel_for(dumps.size(), workers, [&](std::size_t i) {
    out.row(static_cast<Eigen::Index>(i)) = profile(dumps[i], sae, dumps[i].content_range).values.transpose();
  });
  return out;
}

}  // namespace fprb
