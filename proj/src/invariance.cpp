#include "fprb/invariance.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "fprb/errors.hpp"
#include "fprb/parallel.hpp"
#include "fprb/rng.hpp"

namespace fprb {

PooledVector select(const FeatureProfile& profile, std::span<const FeatureId> subset) {
  PooledVector v;
  v.ids.assign(subset.begin(), subset.end());
  v.values.resize(static_cast<Eigen::Index>(subset.size()));
  for (std::size_t i = 0; i < subset.size(); ++i) {
    require(subset[i] >= 0 && subset[i] < profile.values.size(), "feature id out of range");
    v.values(static_cast<Eigen::Index>(i)) = profile.values(subset[i]);
  }
  v.mode = profile.mode;
  v.mask = profile.span;
  return v;
}

PooledVector pool(const ActivationDump& dump, const Sae& sae, std::span<const FeatureId> subset, PoolMode mode,
                  const TokenSpan& mask) {
  return select(profile(dump, sae, mask, mode), subset);
}

double smape(const PooledVector& a, const PooledVector& b) {
  require(a.ids == b.ids, "smape: feature subsets differ");
  return smape(a.values, b.values);
}

std::optional<double> cosine(const PooledVector& a, const PooledVector& b) {
  require(a.ids == b.ids, "cosine: feature subsets differ");
  return cosine(a.values, b.values);
}

PairStats compare(const PooledVector& a, const PooledVector& b) { return {smape(a, b), cosine(a, b)}; }

MetricDelta delta_medical_random(const PooledVector& medical_a, const PooledVector& medical_b,
                                 const PooledVector& random_a, const PooledVector& random_b) {
  require(medical_a.mode == random_a.mode && medical_b.mode == random_b.mode,
          "delta_medical_random: pools use different pooling modes");
  require(medical_a.mask == random_a.mask && medical_b.mask == random_b.mask,
          "delta_medical_random: pools use different token masks");
  const auto m = compare(medical_a, medical_b);
  const auto r = compare(random_a, random_b);
  MetricDelta d;
  d.d_smape = m.smape - r.smape;
  if (m.cos && r.cos) d.d_cos = *m.cos - *r.cos;
  return d;
}

std::vector<CaseInvariance> case_invariance(std::span<const ActivationDump> nl, std::span<const ActivationDump> nf,
                                            const Sae& sae, std::span<const FeatureId> medical,
                                            const std::vector<std::vector<FeatureId>>& random_draws, PoolMode mode,
                                            unsigned workers) {
  require(!medical.empty(), "case_invariance: empty medical subset");
  require(!random_draws.empty(), "case_invariance: no random subset");
  const auto pairs = pair_dumps(nl, nf);
  std::vector<CaseInvariance> out(pairs.size());
  parallel_for(pairs.size(), workers, [&](std::size_t i) {
    const auto& [a, b] = pairs[i];
    const auto pa = profile(*a, sae, a->content_range, mode);
    const auto pb = profile(*b, sae, b->content_range, mode);
    CaseInvariance c;
    c.case_id = a->case_id;
    c.medical = compare(select(pa, medical), select(pb, medical));
    double smape_sum = 0.0, cos_sum = 0.0;
    std::size_t cos_n = 0;
    for (const auto& draw : random_draws) {
      const auto r = compare(select(pa, draw), select(pb, draw));
      smape_sum += r.smape;
      if (r.cos) {
        cos_sum += *r.cos;
        ++cos_n;
      }
    }
    c.random.smape = smape_sum / static_cast<double>(random_draws.size());
    if (cos_n > 0) c.random.cos = cos_sum / static_cast<double>(cos_n);
    c.delta.d_smape = c.medical.smape - c.random.smape;
    if (c.medical.cos && c.random.cos) c.delta.d_cos = *c.medical.cos - *c.random.cos;
    out[i] = std::move(c);
  });
  return out;
}

std::vector<StratumRow> stratum_table(std::span<const CaseInvariance> cases,
                                      const std::map<std::string, Stratum>& strata, const BootstrapOptions& options) {
  require(!cases.empty(), "stratum_table: no cases");
  auto row_for = [&](const std::string& name, const std::vector<const CaseInvariance*>& members) {
    StratumRow row;
    row.stratum = name;
    row.n = members.size();
    std::vector<double> ds, dc;
    for (const auto* c : members) {
      ds.push_back(c->delta.d_smape);
      if (c->delta.d_cos) dc.push_back(*c->delta.d_cos);
    }
    auto opts = options;
    const std::string smape_tag = "stratum/" + name + "/smape";
    const std::string cos_tag = "stratum/" + name + "/cos";
    opts.tag = smape_tag;
    row.d_smape = bootstrap_ci(ds, opts);
    row.d_smape.n_cos = dc.size();
    if (!dc.empty()) {
      opts.tag = cos_tag;
      row.d_cos = bootstrap_ci(dc, opts);
      row.d_cos->n = members.size();
      row.d_cos->n_cos = dc.size();
    }
    return row;
  };
  std::vector<StratumRow> rows;
  for (auto s : kAllStrata) {
    std::vector<const CaseInvariance*> members;
    for (const auto& c : cases) {
      auto it = strata.find(c.case_id);
      if (it == strata.end()) fail(ErrorKind::validation, "no outcome for case " + c.case_id, c.case_id);
      if (it->second == s) members.push_back(&c);
    }
    if (!members.empty()) rows.push_back(row_for(std::string(to_string(s)), members));
  }
  std::vector<const CaseInvariance*> all;
  for (const auto& c : cases) all.push_back(&c);
  rows.push_back(row_for("all", all));
  return rows;
}

PairedPool paired_pool(std::span<const ActivationDump> nl, std::span<const ActivationDump> nf, const Sae& sae,
                       std::span<const FeatureId> ids, PoolMode mode, unsigned workers) {
  const auto pairs = pair_dumps(nl, nf);
  PairedPool p;
  p.ids.assign(ids.begin(), ids.end());
  const auto n = static_cast<Eigen::Index>(pairs.size());
  const auto k = static_cast<Eigen::Index>(ids.size());
  p.nl.resize(n, k);
  p.nf.resize(n, k);
  parallel_for(pairs.size(), workers, [&](std::size_t i) {
    const auto& [a, b] = pairs[i];
    p.nl.row(static_cast<Eigen::Index>(i)) = select(profile(*a, sae, a->content_range, mode), ids).values.transpose();
    p.nf.row(static_cast<Eigen::Index>(i)) = select(profile(*b, sae, b->content_range, mode), ids).values.transpose();
  });
  return p;
}

std::string ResampleResult::p_text() const {
  char buf[64];
  if (below_resolution)
    std::snprintf(buf, sizeof buf, "<%.3g", 1.0 / static_cast<double>(draws));
  else
    std::snprintf(buf, sizeof buf, "%.3f", p);
  return buf;
}

ResampleResult resample_permutation_p(double medical_mean, const PairedPool& pool, std::size_t draw_size,
                                      std::size_t draws, std::uint64_t seed, unsigned workers) {
  const auto n = pool.ids.size();
  require(draw_size >= 1, "resample: draw size must be positive");
  require(draws >= 1, "resample: need at least one draw");
  require(n >= draw_size, "resample: pool of " + std::to_string(n) + " features is smaller than the draw size " +
                              std::to_string(draw_size));
  require(pool.nl.rows() > 0 && pool.nl.rows() == pool.nf.rows(), "resample: pool has no cases");
  require(pool.nl.cols() == static_cast<Eigen::Index>(n) && pool.nf.cols() == static_cast<Eigen::Index>(n),
          "resample: pool matrix width differs from id count");

  // Mean sMAPE of a draw = mean over its features of the per-feature case-mean term.
  const Eigen::ArrayXXd a = pool.nl.array(), b = pool.nf.array();
  const Eigen::ArrayXXd terms = (a - b).abs() / ((a.abs() + b.abs()) / 2.0).max(kSmapeFloor);
  const Eigen::VectorXd per_feature = terms.colwise().mean().transpose();

  ResampleResult r;
  r.medical_mean = medical_mean;
  r.draw_size = draw_size;
  r.seed = seed;
  std::vector<double> means;
  const double combos = binomial_coefficient(static_cast<unsigned>(n), static_cast<unsigned>(draw_size));
  if (combos <= static_cast<double>(draws)) {
    r.exhaustive = true;
    std::vector<std::size_t> idx(draw_size);
    std::iota(idx.begin(), idx.end(), 0);
    for (;;) {
      double s = 0.0;
      for (auto i : idx) s += per_feature(static_cast<Eigen::Index>(i));
      means.push_back(s / static_cast<double>(draw_size));
      std::size_t pos = draw_size;
      while (pos > 0 && idx[pos - 1] == n - draw_size + pos - 1) --pos;
      if (pos == 0) break;
      ++idx[pos - 1];
      for (auto j = pos; j < draw_size; ++j) idx[j] = idx[j - 1] + 1;
    }
  } else {
    means.resize(draws);
    parallel_for(draws, workers, [&](std::size_t d) {
      Stream stream(seed, "resample_draw", d);
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), 0);
      double s = 0.0;
      for (std::size_t i = 0; i < draw_size; ++i) {
        const auto j = i + static_cast<std::size_t>(stream.below(n - i));
        std::swap(order[i], order[j]);
        s += per_feature(static_cast<Eigen::Index>(order[i]));
      }
      means[d] = s / static_cast<double>(draw_size);
    });
  }
  r.draws = means.size();
  const auto hits = std::count_if(means.begin(), means.end(), [&](double m) { return m <= medical_mean; });
  r.p = static_cast<double>(hits) / static_cast<double>(means.size());
  r.below_resolution = hits == 0;
  r.band_lo = percentile(means, 0.05);
  r.band_hi = percentile(means, 0.95);
  r.draw_mean = mean(means);
  return r;
}

std::vector<MaskRow> mask_decomposition(std::span<const ActivationDump> nl, std::span<const ActivationDump> nf,
                                        const Sae& sae, std::span<const FeatureId> medical,
                                        std::span<const FeatureId> random, PoolMode mode) {
  const auto pairs = pair_dumps(nl, nf);
  require(!pairs.empty(), "mask_decomposition: no cases");
  double vm = 0, vr = 0, cm = 0, cr = 0;
  for (const auto& [a, b] : pairs) {
    if (a->vignette_mask.empty() || b->vignette_mask.empty())
      fail(ErrorKind::validation, "missing vignette mask", a->case_id);
    const auto va = profile(*a, sae, a->vignette_mask, mode), vb = profile(*b, sae, b->vignette_mask, mode);
    const auto ca = profile(*a, sae, a->content_range, mode), cb = profile(*b, sae, b->content_range, mode);
    vm += smape(select(va, medical), select(vb, medical));
    vr += smape(select(va, random), select(vb, random));
    cm += smape(select(ca, medical), select(cb, medical));
    cr += smape(select(ca, random), select(cb, random));
  }
  const auto n = static_cast<double>(pairs.size());
  return {MaskRow{"vignette", vm / n, vr / n, pairs.size()},
          MaskRow{"scaffold", std::nullopt, std::nullopt, 0},
          MaskRow{"full_content", cm / n, cr / n, pairs.size()}};
}

std::optional<double> PeakLocation::fraction() const {
  if (counted == 0) return std::nullopt;
  return static_cast<double>(inside) / static_cast<double>(counted);
}

PeakLocation peak_location_fraction(std::span<const ActivationDump> dumps, const Sae& sae,
                                    std::span<const FeatureId> subset, MaskKind mask) {
  require(!subset.empty(), "peak_location_fraction: empty feature subset");
  PeakLocation loc;
  for (const auto& d : dumps) {
    TokenSpan target;
    switch (mask) {
      case MaskKind::vignette: target = d.vignette_mask; break;
      case MaskKind::content: target = d.content_range; break;
      case MaskKind::scaffold:
        if (!d.scaffold_mask) fail(ErrorKind::validation, "dump has no scaffold mask", d.case_id);
        target = *d.scaffold_mask;
        break;
    }
    const auto p = profile(d, sae, d.content_range, PoolMode::max);
    for (auto f : subset) {
      require(f >= 0 && f < sae.features(), "peak_location_fraction: feature id out of range", d.case_id);
      const auto t = p.peak_token[static_cast<std::size_t>(f)];
      if (t < 0) continue;
      ++loc.counted;
      if (target.contains(t)) ++loc.inside;
    }
  }
  return loc;
}

namespace {

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

}  // namespace

void to_json(nlohmann::json& j, const CaseInvariance& c) {
  j = nlohmann::json{{"case_id", c.case_id},
                     {"medical_smape", c.medical.smape},
                     {"medical_cos", opt_json(c.medical.cos)},
                     {"random_smape", c.random.smape},
                     {"random_cos", opt_json(c.random.cos)},
                     {"d_smape", c.delta.d_smape},
                     {"d_cos", opt_json(c.delta.d_cos)}};
}

void to_json(nlohmann::json& j, const StratumRow& r) {
  j = nlohmann::json{{"stratum", r.stratum}, {"n", r.n}, {"d_smape", r.d_smape}};
  j["d_cos"] = r.d_cos ? nlohmann::json(*r.d_cos) : nlohmann::json(nullptr);
  j["n_cos"] = r.d_cos ? r.d_cos->n_cos : 0;
}

void to_json(nlohmann::json& j, const ResampleResult& r) {
  j = nlohmann::json{{"medical_mean", r.medical_mean}, {"p", r.p},           {"p_text", r.p_text()},
                     {"band_lo", r.band_lo},           {"band_hi", r.band_hi}, {"draw_mean", r.draw_mean},
                     {"draws", r.draws},               {"draw_size", r.draw_size}, {"exhaustive", r.exhaustive},
                     {"seed", r.seed}};
}

void to_json(nlohmann::json& j, const MaskRow& r) {
  j = nlohmann::json{{"mask", r.mask}, {"medical", opt_json(r.medical)}, {"random", opt_json(r.random)}, {"n", r.n}};
}

}  // namespace fprb
