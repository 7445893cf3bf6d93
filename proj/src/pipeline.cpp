#include "fprb/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "fprb/attribution.hpp"
#include "fprb/direction.hpp"
#include "fprb/errors.hpp"
#include "fprb/invariance.hpp"
#include "fprb/probes.hpp"
#include "fprb/stats.hpp"
#include "fprb/table.hpp"

namespace fprb {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

const std::set<std::string> kConfigKeys{
    "manifest", "sae",       "layer",         "selection",   "contrast",  "outcomes",         "shuffle",
    "unembedding", "categories", "seeds",     "bootstrap",   "resample",  "random_control",   "selection_filter",
    "pool",     "judge",     "attribution",   "ablation",    "probe",     "workers",          "output_dir"};

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key) || j[key].is_null()) return fallback;
  try {
    return j[key].get<T>();
  } catch (const json::exception&) {
    fail(ErrorKind::validation, std::string("config key '") + key + "' has the wrong type");
  }
}

std::pair<Condition, Condition> parse_transition(const std::string& text) {
  const auto arrow = text.find("->");
  require(arrow != std::string::npos, "transition '" + text + "' is not of the form SRC->DST");
  return {parse_condition(text.substr(0, arrow)), parse_condition(text.substr(arrow + 2))};
}

std::string transition_name(const std::pair<Condition, Condition>& t) {
  return std::string(to_string(t.first)) + "->" + std::string(to_string(t.second));
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string(), path.string());
  out << text;
  if (!out) fail(ErrorKind::io, "write failed for " + path.string(), path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open " + path.string(), path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::format, path.string() + ": " + e.what(), path.string());
  }
}

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

RunConfig config_from_json(const json& j, const fs::path& base_dir) {
  require(j.is_object(), "config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    require(kConfigKeys.contains(it.key()), "unknown config key '" + it.key() + "'", it.key());
  RunConfig c;
  c.canonical = j;
  require(j.contains("manifest"), "config lacks 'manifest'");
  c.manifest = resolve(base_dir, get_or<std::string>(j, "manifest", ""));
  c.layer = get_or<int>(j, "layer", 0);
  if (j.contains("sae")) {
    require(j["sae"].is_object(), "config 'sae' must map layers to weight directories");
    for (auto it = j["sae"].begin(); it != j["sae"].end(); ++it) {
      int layer = 0;
      try {
        layer = std::stoi(it.key());
      } catch (const std::logic_error&) {
        fail(ErrorKind::validation, "config 'sae' key '" + it.key() + "' is not a layer number");
      }
      c.sae[layer] = resolve(base_dir, it.value().get<std::string>());
    }
  }
  auto path_opt = [&](const char* key) -> std::optional<fs::path> {
    if (!j.contains(key) || j[key].is_null()) return std::nullopt;
    return resolve(base_dir, get_or<std::string>(j, key, ""));
  };
  c.selection = path_opt("selection");
  c.outcomes = path_opt("outcomes");
  c.shuffle = path_opt("shuffle");
  c.unembedding = path_opt("unembedding");
  c.categories = path_opt("categories");
  if (j.contains("contrast") && !j["contrast"].is_null()) {
    const auto& k = j["contrast"];
    ContrastInputs in;
    require(k.contains("medical_manifest") && k.contains("non_medical_manifest"),
            "config 'contrast' needs medical_manifest and non_medical_manifest");
    in.medical_manifest = resolve(base_dir, get_or<std::string>(k, "medical_manifest", ""));
    in.non_medical_manifest = resolve(base_dir, get_or<std::string>(k, "non_medical_manifest", ""));
    in.condition = parse_condition(get_or<std::string>(k, "condition", "NF"));
    c.contrast = in;
  }
  if (j.contains("seeds")) {
    require(j["seeds"].is_object(), "config 'seeds' must be an object");
    for (auto it = j["seeds"].begin(); it != j["seeds"].end(); ++it) {
      const bool ok = it.value().is_number_unsigned() || (it.value().is_number_integer() && it.value().get<std::int64_t>() >= 0);
      require(ok, "seed '" + it.key() + "' must be a nonnegative integer");
      c.seeds[it.key()] = it.value().get<std::uint64_t>();
    }
  }
  const json empty = json::object();
  const auto& boot = j.value("bootstrap", empty);
  c.bootstrap_resamples = get_or<std::size_t>(boot, "resamples", c.bootstrap_resamples);
  const auto& res = j.value("resample", empty);
  c.resample_draws = get_or<std::size_t>(res, "draws", c.resample_draws);
  c.resample_draw_size = get_or<std::size_t>(res, "draw_size", c.resample_draw_size);
  c.random_draws = get_or<std::size_t>(j.value("random_control", empty), "draws", c.random_draws);
  const auto& filt = j.value("selection_filter", empty);
  c.k = get_or<std::size_t>(filt, "k", c.k);
  c.med_rate_min = get_or<double>(filt, "med_rate_min", c.med_rate_min);
  c.non_rate_max = get_or<double>(filt, "non_rate_max", c.non_rate_max);
  c.pool = parse_pool_mode(get_or<std::string>(j, "pool", "max"));
  c.judge = get_or<std::string>(j, "judge", "");
  const auto& attr = j.value("attribution", empty);
  c.top_k = get_or<std::size_t>(attr, "top_k", c.top_k);
  c.scaffold_features = get_or<std::size_t>(attr, "scaffold_features", c.scaffold_features);
  c.ablation_features = get_or<std::size_t>(j.value("ablation", empty), "features", c.ablation_features);
  const auto& probe = j.value("probe", empty);
  c.probe_layers = get_or<std::vector<int>>(probe, "layers", {});
  for (const auto& t : get_or<std::vector<std::string>>(probe, "transitions", {"NL->NF"}))
    c.transitions.push_back(parse_transition(t));
  c.permutation_iterations = get_or<std::size_t>(probe, "iterations", c.permutation_iterations);
  c.l2 = get_or<double>(probe, "l2", c.l2);
  c.standardize = get_or<bool>(probe, "standardize", c.standardize);
  c.workers = get_or<unsigned>(j, "workers", 1u);
  c.output_dir = resolve(base_dir, get_or<std::string>(j, "output_dir", "reports"));

  require(c.workers >= 1, "workers must be at least 1");
  require(c.bootstrap_resamples >= 1, "bootstrap resamples must be positive");
  require(c.random_draws >= 1, "random_control draws must be positive");
  require(c.k >= 1, "selection k must be positive");
  require(c.l2 > 0.0, "probe l2 strength must be positive");
  return c;
}

RunConfig load_config(const fs::path& path, const json& overrides) {
  json j = read_json(path);
  require(j.is_object(), "config must be a JSON object", path.string());
  j.merge_patch(overrides);
  return config_from_json(j, fs::absolute(path).parent_path());
}

std::string config_hash(const RunConfig& config) {
  json j = config.canonical;
  j.erase("workers");
  j.erase("output_dir");
  const std::string text = j.dump();
  const auto crc = crc32c(std::as_bytes(std::span(text.data(), text.size())));
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x", crc);
  return buf;
}

std::uint64_t seed(const RunConfig& config, const std::string& name) {
  auto it = config.seeds.find(name);
  if (it == config.seeds.end())
    fail(ErrorKind::validation, "config does not set seed '" + name + "' (seeds must be explicit)", name);
  return it->second;
}

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"identify-features", "behavior",  "invariance", "direction",
                                              "attribute",         "shuffle",   "probe"};
  return names;
}

struct Pipeline::Cache {
  std::optional<CorpusManifest> manifest;
  std::map<std::pair<Condition, int>, std::vector<ActivationDump>> dumps;
  std::map<int, Sae> saes;
  std::optional<std::vector<CaseOutcome>> outcomes;
  std::optional<FeatureSelection> selection;
  json contrast_summary;
};

Pipeline::Pipeline(RunConfig config) : config_(std::move(config)), cache_(std::make_unique<Cache>()) {}
Pipeline::~Pipeline() = default;

const std::vector<ActivationDump>& Pipeline::dumps(Condition c, int layer) {
  const auto key = std::make_pair(c, layer);
  auto it = cache_->dumps.find(key);
  if (it != cache_->dumps.end()) return it->second;
  if (!cache_->manifest) cache_->manifest = read_manifest(config_.manifest);
  auto loaded = load_dumps(*cache_->manifest, c, layer);
  if (loaded.empty())
    fail(ErrorKind::validation,
         "manifest has no " + std::string(to_string(c)) + " dumps at layer " + std::to_string(layer),
         config_.manifest.string());
  return cache_->dumps.emplace(key, std::move(loaded)).first->second;
}

const Sae& Pipeline::sae(int layer) {
  auto it = cache_->saes.find(layer);
  if (it != cache_->saes.end()) return it->second;
  auto dir = config_.sae.find(layer);
  if (dir == config_.sae.end())
    fail(ErrorKind::validation, "config has no SAE weights for layer " + std::to_string(layer));
  return cache_->saes.emplace(layer, load_sae(dir->second)).first->second;
}

const std::vector<CaseOutcome>& Pipeline::outcomes() {
  if (!cache_->outcomes) {
    if (!config_.outcomes) fail(ErrorKind::validation, "config has no 'outcomes' file");
    cache_->outcomes = read_outcomes(*config_.outcomes);
  }
  return *cache_->outcomes;
}

Report Pipeline::finish(std::string name, json results, std::string text) const {
  Report r;
  r.name = std::move(name);
  json seeds = json::object();
  for (const auto& [k, v] : config_.seeds) seeds[k] = v;
  r.body = json{{"report", r.name},
                {"version", std::string(kVersion)},
                {"config_hash", config_hash(config_)},
                {"seeds", seeds},
                {"results", std::move(results)}};
  r.text = "# " + r.name + "  (config " + config_hash(config_) + ")\n\n" + text;
  return r;
}

void Pipeline::write(const Report& report) const {
  std::error_code ec;
  fs::create_directories(config_.output_dir, ec);
  if (ec) fail(ErrorKind::io, "cannot create " + config_.output_dir.string(), config_.output_dir.string());
  write_text(config_.output_dir / (report.name + ".json"), report.body.dump(2) + "\n");
  write_text(config_.output_dir / (report.name + ".txt"), report.text);
}

// Medical selection from the contrastive prompt sets.
Report Pipeline::identify_features() {
  if (!config_.contrast) fail(ErrorKind::validation, "config has no 'contrast' inputs");
  const auto& in = *config_.contrast;
  const auto& model = sae(config_.layer);
  const auto med = load_dumps(read_manifest(in.medical_manifest), in.condition, config_.layer);
  const auto non = load_dumps(read_manifest(in.non_medical_manifest), in.condition, config_.layer);
  check_contrast_sets(med, non);
  const Eigen::MatrixXd med_peaks = peak_matrix(med, model, config_.workers);
  const Eigen::MatrixXd non_peaks = peak_matrix(non, model, config_.workers);
  const auto scores = contrast_scores(med_peaks, non_peaks);
  SelectivityFilter filter{config_.k, config_.med_rate_min, config_.non_rate_max};
  const auto chosen = select_medical(scores, filter);
  require(!chosen.ids.empty(), "no feature passes the selectivity filter");

  Eigen::MatrixXd all(med_peaks.rows() + non_peaks.rows(), med_peaks.cols());
  all << med_peaks, non_peaks;
  FeatureSelection sel;
  sel.medical = chosen.ids;
  sel.medical_scores = chosen.scores;
  sel.k = config_.k;
  sel.random_pool = magnitude_matched_pool(sel.medical, corpus_mean_activations(all));
  sel.restricted_pool = restricted_pool(sel.random_pool, all);
  sel.seed = seed(config_, "random_features");
  sel.random_sample = sample_random_features(sel.random_pool, sel.medical.size(), sel.seed);
  if (chosen.truncated())
    sel.warnings.push_back("only " + std::to_string(chosen.ids.size()) + " features pass the filter; requested " +
                           std::to_string(config_.k));
  cache_->selection = sel;

  json sweep = json::array();
  TextTable sweep_table("K sweep", {{"K", 4}, {"qualifying", 10}, {"selected", 40, true}});
  for (const auto& s : k_sweep(scores, {}, filter)) {
    sweep.push_back({{"k", s.requested_k}, {"qualifying", s.qualifying}, {"ids", s.ids}});
    std::string ids;
    for (auto f : s.ids) ids += (ids.empty() ? "" : " ") + std::to_string(f);
    sweep_table.add_row({std::to_string(s.requested_k), std::to_string(s.qualifying), ids});
  }
  json results{{"layer", config_.layer},
               {"medical_prompts", med.size()},
               {"non_medical_prompts", non.size()},
               {"condition", std::string(to_string(in.condition))},
               {"selection", sel},
               {"k_sweep", sweep}};

  TextTable t("Medical features (layer " + std::to_string(config_.layer) + ")",
              {{"feature", 8}, {"score", 10}, {"med_rate", 9}, {"non_rate", 9}});
  for (const auto& s : sel.medical_scores)
    t.add_row({std::to_string(s.feature), fixed(s.score, 4), fixed(s.med_fire_rate, 3), fixed(s.non_fire_rate, 3)});
  std::string text = t.render() + "\n" + sweep_table.render() + "\n";
  text += "magnitude-matched pool: " + std::to_string(sel.random_pool.size()) +
          "  restricted pool: " + std::to_string(sel.restricted_pool.size()) + "\n";
  for (const auto& w : sel.warnings) text += "warning: " + w + "\n";
  return finish("identify-features", std::move(results), std::move(text));
}

const FeatureSelection& Pipeline::selection() {
  if (cache_->selection) return *cache_->selection;
  if (config_.selection) {
    auto sel = selection_from_json(read_json(*config_.selection));
    if (sel.random_pool.empty() || sel.random_sample.empty()) {
      // Derive the control from the analysis corpus itself.
      const auto& model = sae(config_.layer);
      const auto& nl = dumps(Condition::NL, config_.layer);
      const auto& nf = dumps(Condition::NF, config_.layer);
      const Eigen::MatrixXd a = peak_matrix(nl, model, config_.workers), b = peak_matrix(nf, model, config_.workers);
      Eigen::MatrixXd all(a.rows() + b.rows(), a.cols());
      all << a, b;
      if (sel.random_pool.empty()) {
        sel.random_pool = magnitude_matched_pool(sel.medical, corpus_mean_activations(all));
        sel.restricted_pool = restricted_pool(sel.random_pool, all);
      }
      if (sel.random_sample.empty()) {
        sel.seed = seed(config_, "random_features");
        sel.random_sample = sample_random_features(sel.random_pool, sel.medical.size(), sel.seed);
      }
    }
    cache_->selection = std::move(sel);
    return *cache_->selection;
  }
  if (config_.contrast) {
    identify_features();
    return *cache_->selection;
  }
  fail(ErrorKind::validation, "config has neither 'selection' nor 'contrast' inputs");
}

Report Pipeline::invariance() {
  const auto& model = sae(config_.layer);
  const auto& sel = selection();
  const auto& nl = dumps(Condition::NL, config_.layer);
  const auto& nf = dumps(Condition::NF, config_.layer);
  const auto& outs = outcomes();

  std::vector<std::vector<FeatureId>> draws{sel.random_sample};
  if (config_.random_draws > 1) {
    draws.clear();
    for (std::size_t d = 0; d < config_.random_draws; ++d)
      draws.push_back(sample_random_features(sel.random_pool, sel.medical.size(), seed(config_, "random_features"), d));
  }
  const auto cases = case_invariance(nl, nf, model, sel.medical, draws, config_.pool, config_.workers);
  const auto strata = stratify(outs);
  BootstrapOptions boot;
  boot.resamples = config_.bootstrap_resamples;
  boot.seed = seed(config_, "bootstrap");
  boot.workers = config_.workers;
  const auto table = stratum_table(cases, strata, boot);

  json results{{"layer", config_.layer},
               {"pool", std::string(to_string(config_.pool))},
               {"medical", sel.medical},
               {"random_draws", draws.size()},
               {"cases", cases},
               {"strata", table}};

  TextTable st("Medical minus random, layer " + std::to_string(config_.layer),
               {{"stratum", 16, true}, {"n", 4}, {"dSMAPE", 8}, {"95% CI", 18}, {"dcos", 8}, {"95% CI", 18}, {"n_cos", 5}});
  for (const auto& r : table)
    st.add_row({r.stratum, std::to_string(r.n), fixed(r.d_smape.point), interval(r.d_smape.lower, r.d_smape.upper),
                r.d_cos ? fixed(r.d_cos->point) : "n/a", r.d_cos ? interval(r.d_cos->lower, r.d_cos->upper) : "n/a",
                std::to_string(r.d_cos ? r.d_cos->n_cos : 0)});
  std::string text = st.render() + "\n";

  // Resampling control over the restricted pool, falling back to the full pool.
  const auto& pool_ids = sel.restricted_pool.size() >= config_.resample_draw_size ? sel.restricted_pool : sel.random_pool;
  const std::string pool_name = &pool_ids == &sel.restricted_pool ? "restricted" : "magnitude_matched";
  if (pool_ids.size() >= config_.resample_draw_size) {
    std::vector<double> med_smape;
    for (const auto& c : cases) med_smape.push_back(c.medical.smape);
    const auto pp = paired_pool(nl, nf, model, pool_ids, config_.pool, config_.workers);
    const auto rr = resample_permutation_p(mean(med_smape), pp, config_.resample_draw_size, config_.resample_draws,
                                           seed(config_, "resample"), config_.workers);
    results["resample"] = rr;
    results["resample"]["pool"] = pool_name;
    results["resample"]["pool_size"] = pool_ids.size();
    text += "resample (" + pool_name + " pool, " + std::to_string(pool_ids.size()) + " features): medical " +
            fixed(rr.medical_mean) + ", draws " + fixed(rr.draw_mean) + " [5-95%: " + fixed(rr.band_lo) + ", " +
            fixed(rr.band_hi) + "], p " + rr.p_text() + "\n\n";
  } else {
    results["resample"] = json{{"skipped", "pool of " + std::to_string(pool_ids.size()) +
                                               " features is smaller than the draw size " +
                                               std::to_string(config_.resample_draw_size)}};
    text += "resample: skipped (pool smaller than draw size)\n\n";
  }

  const auto masks = mask_decomposition(nl, nf, model, sel.medical, sel.random_sample, config_.pool);
  results["masks"] = masks;
  TextTable mt("Per-mask sMAPE (medical / random)", {{"mask", 14, true}, {"medical", 8}, {"random", 8}, {"n", 4}});
  for (const auto& m : masks) mt.add_row({m.mask, fixed(m.medical), fixed(m.random), std::to_string(m.n)});
  text += mt.render() + "\n";

  const auto loc_nl = peak_location_fraction(nl, model, sel.medical);
  const auto loc_nf = peak_location_fraction(nf, model, sel.medical);
  results["peak_in_vignette"] = {{"NL", {{"fraction", opt(loc_nl.fraction())}, {"counted", loc_nl.counted}}},
                                 {"NF", {{"fraction", opt(loc_nf.fraction())}, {"counted", loc_nf.counted}}}};
  text += "medical peaks in vignette: NL " + (loc_nl.fraction() ? percent(*loc_nl.fraction()) : "n/a") + ", NF " +
          (loc_nf.fraction() ? percent(*loc_nf.fraction()) : "n/a") + "\n";

  std::size_t prefix_ok = 0;
  double worst = 0.0;
  for (const auto& [a, b] : pair_dumps(nl, nf)) {
    const auto noise = check_prefix_noise(*a, *b);
    prefix_ok += noise.ok() ? 1 : 0;
    worst = std::max(worst, noise.max_relative_l2);
  }
  results["prefix_check"] = {{"passing", prefix_ok}, {"cases", nl.size()}, {"max_relative_l2", worst}};
  text += "shared-prefix check: " + std::to_string(prefix_ok) + "/" + std::to_string(nl.size()) + " cases pass\n";
  return finish("invariance", std::move(results), std::move(text));
}

Report Pipeline::direction() {
  const auto& model = sae(config_.layer);
  const auto& nl = dumps(Condition::NL, config_.layer);
  const auto& nf = dumps(Condition::NF, config_.layer);
  std::error_code ec;
  fs::create_directories(config_.output_dir, ec);

  json results{{"layer", config_.layer}, {"direction_source", "invariance dumps, same layer"}};
  std::optional<FeatureSelection> sel;
  if (config_.selection || config_.contrast || cache_->selection) sel = selection();

  std::string text;
  TextTable at("Encoder alignment of medical features", {{"aggregation", 24, true}, {"|dr|", 12}, {"median pct", 10}});
  json aggs = json::object();
  std::optional<FormatDirection> full;
  for (auto agg : {Aggregation::full_mean, Aggregation::length_controlled_mean, Aggregation::max_pool}) {
    json entry;
    FormatDirection d;
    try {
      d = format_direction(nl, nf, agg, &model, config_.workers);
    } catch (const Error& e) {
      if (agg != Aggregation::length_controlled_mean || e.kind() != ErrorKind::validation) throw;
      aggs[std::string(to_string(agg))] = {{"skipped", e.what()}};
      at.add_row({std::string(to_string(agg)), "n/a", "n/a"});
      continue;
    }
    write_direction(config_.output_dir / ("direction_" + std::string(to_string(agg)) + ".fprb"), d);
    entry["norm"] = d.delta.norm();
    entry["cases"] = d.cases;
    std::string median_text = "n/a";
    if (sel && d.delta.norm() > 0.0) {
      const auto ranks = encoder_alignment_ranks(d.delta, model, sel->medical);
      std::vector<double> pct;
      for (const auto& r : ranks) pct.push_back(r.percentile);
      entry["medical_ranks"] = ranks;
      entry["median_percentile"] = median(pct);
      median_text = percent(median(pct));
    }
    if (d.delta.norm() > 0.0) entry["top_aligned"] = top_aligned_features(d.delta, model, config_.scaffold_features);
    at.add_row({std::string(to_string(agg)), fixed(d.delta.norm(), 4), median_text});
    aggs[std::string(to_string(agg))] = entry;
    if (agg == Aggregation::full_mean) full = d;
  }
  results["aggregations"] = aggs;
  text += at.render() + "\n";

  // Steering vector and interventions from the full-content direction.
  const auto v = steering_vector(*full);
  write_steering(config_.output_dir / ("steering_L" + std::to_string(config_.layer) + ".fprb"), v);
  if (v.norm > 0.0) {
    const auto ablate = top_aligned_features(full->delta, model, config_.ablation_features);
    std::vector<FeatureId> control;
    if (sel && sel->random_pool.size() >= config_.ablation_features)
      control = sample_random_features(sel->random_pool, config_.ablation_features, seed(config_, "ablation_control"));
    json per_case = json::array();
    double residual_sum = 0.0;
    TextTable bt("Ablation of top format-direction features " + [&] {
      std::string s;
      for (auto f : ablate) s += (s.empty() ? "" : ",") + std::to_string(f);
      return "(" + s + ")";
    }(), {{"case", 10, true}, {"mean", 10}, {"peak", 10}, {"mean %", 8}, {"peak %", 8}, {"ctrl mean %", 11}});
    for (const auto& d : nl) {
      const auto r = ablation_deltas(d, model, ablate);
      json e{{"case_id", d.case_id}, {"format", r}};
      std::string ctrl = "n/a";
      if (!control.empty()) {
        const auto c = ablation_deltas(d, model, control);
        e["control"] = c;
        ctrl = percent(c.mean_fraction, 2);
      }
      per_case.push_back(e);
      residual_sum += r.mean_residual_norm;
      bt.add_row({d.case_id, fixed(r.mean_norm, 2), fixed(r.peak_norm, 2), percent(r.mean_fraction, 2),
                  percent(r.peak_fraction, 2), ctrl});
    }
    const double residual_norm = residual_sum / static_cast<double>(nl.size());
    json steer = json::array();
    TextTable sv("Steering perturbation (|v| = " + fixed(v.norm, 4) + ", mean residual norm " + fixed(residual_norm, 4) +
                     ")",
                 {{"alpha", 6}, {"fraction", 10}});
    for (double alpha : kSteeringAlphas) {
      const double frac = steering_perturbation(v, alpha, residual_norm);
      steer.push_back({{"alpha", alpha}, {"fraction", frac}});
      sv.add_row({fixed(alpha, 1), percent(frac, 2)});
    }
    results["ablation"] = {{"features", ablate}, {"control_features", control}, {"cases", per_case}};
    results["steering"] = {{"norm", v.norm}, {"residual_norm", residual_norm}, {"alphas", steer}};
    text += bt.render() + "\n" + sv.render();
  }
  return finish("direction", std::move(results), std::move(text));
}

Report Pipeline::attribute() {
  if (!config_.unembedding) fail(ErrorKind::validation, "config has no 'unembedding' file");
  const auto& model = sae(config_.layer);
  const auto unembed = load_unembedding(*config_.unembedding);
  const auto& sel = selection();
  const auto& nl = dumps(Condition::NL, config_.layer);
  const auto& nf = dumps(Condition::NF, config_.layer);
  std::map<std::string, const CaseOutcome*> by_case;
  for (const auto& o : outcomes()) by_case[o.case_id] = &o;

  CategoryMap categories;
  std::string category_source;
  if (config_.categories) {
    categories = category_map_from_json(read_json(*config_.categories));
    category_source = "file";
  } else {
    const auto d = format_direction(nl, nf, Aggregation::full_mean, &model, config_.workers);
    std::vector<FeatureId> scaffold;
    if (d.delta.norm() > 0.0) scaffold = top_aligned_features(d.delta, model, config_.scaffold_features);
    categories = build_category_map(sel.medical, scaffold);
    category_source = "medical selection + top " + std::to_string(config_.scaffold_features) + " direction-aligned";
  }

  json cases = json::array(), skipped = json::array();
  std::map<FeatureCategory, double> abs_sum, margin_sum;
  std::map<FeatureCategory, std::size_t> margin_n;
  std::size_t n = 0;
  for (const auto& d : nl) {
    auto it = by_case.find(d.case_id);
    if (it == by_case.end()) fail(ErrorKind::validation, "no outcome for case " + d.case_id, d.case_id);
    auto letter = it->second->letters.find(Condition::NL);
    if (letter == it->second->letters.end() || !letter->second) {
      skipped.push_back({{"case_id", d.case_id}, {"reason", "no NL letter"}});
      continue;
    }
    const auto a = category_attribution(d, model, unembed, categories, *letter->second);
    for (const auto& [c, s] : a.shares) {
      abs_sum[c] += s.abs_fraction;
      if (s.margin_share) {
        margin_sum[c] += *s.margin_share;
        ++margin_n[c];
      }
    }
    ++n;
    cases.push_back(a);
  }
  require(n > 0, "attribution: no case has an NL letter");

  TextTable ct("Decision-token logit attribution (" + std::to_string(n) + " cases)",
               {{"category", 10, true}, {"abs-fraction", 12}, {"margin-share", 12}});
  json summary = json::object();
  for (auto c : kAllCategories) {
    const double abs_mean = abs_sum[c] / static_cast<double>(n);
    std::optional<double> margin_mean;
    if (margin_n[c] > 0) margin_mean = margin_sum[c] / static_cast<double>(margin_n[c]);
    summary[std::string(to_string(c))] = {{"abs_fraction", abs_mean}, {"margin_share", opt(margin_mean)}};
    ct.add_row({std::string(to_string(c)), percent(abs_mean), margin_mean ? percent(*margin_mean) : "n/a"});
  }

  json overlaps = json::array();
  double jac = 0.0;
  std::size_t nl_only = 0, nl_only_scaffold = 0, medical_in_top = 0;
  for (const auto& [a, b] : pair_dumps(nl, nf)) {
    const auto o = decision_overlap(*a, *b, model, sel.medical, config_.top_k);
    jac += o.jaccard;
    nl_only += o.nl_only;
    nl_only_scaffold += o.nl_only_scaffold;
    medical_in_top += o.medical_in_top;
    overlaps.push_back(o);
  }
  const double mean_jaccard = jac / static_cast<double>(overlaps.size());
  std::optional<double> scaffold_frac;
  if (nl_only > 0) scaffold_frac = static_cast<double>(nl_only_scaffold) / static_cast<double>(nl_only);

  json results{{"layer", config_.layer},
               {"category_source", category_source},
               {"caveat", "linear projection through the unembedding; ignores final normalization and later layers"},
               {"summary", summary},
               {"cases", cases},
               {"skipped", skipped},
               {"decision_top_k",
                {{"k", config_.top_k},
                 {"mean_jaccard", mean_jaccard},
                 {"nl_only", nl_only},
                 {"nl_only_scaffold_fraction", opt(scaffold_frac)},
                 {"medical_in_top", medical_in_top},
                 {"cases", overlaps}}}};
  std::string text = ct.render() + "\n";
  text += "top-" + std::to_string(config_.top_k) + " decision features: mean Jaccard NL/NF " + fixed(mean_jaccard) +
          ", NL-only peaking outside the vignette " + (scaffold_frac ? percent(*scaffold_frac) : "n/a") +
          ", medical features in top sets " + std::to_string(medical_in_top) + "\n";
  text += "note: linear projection through the unembedding; ignores final normalization and later layers\n";
  return finish("attribute", std::move(results), std::move(text));
}

Report Pipeline::behavior() {
  const auto& outs = outcomes();
  require(!outs.empty(), "outcomes file has no records");
  const ScoringRule rule{config_.judge};
  std::set<Condition> present;
  for (const auto& o : outs) {
    for (const auto& [c, l] : o.letters) present.insert(c);
    for (const auto& [c, l] : o.judges) present.insert(c);
  }

  json acc = json::object();
  TextTable at("Accuracy (" + std::to_string(outs.size()) + " cases)",
               {{"condition", 9, true}, {"accuracy", 9}, {"under", 6}, {"over", 6}, {"unresolved", 10}});
  for (auto c : present) {
    const double a = score_condition(outs, c, rule);
    const auto dir = triage_error_direction(outs, c);
    json e{{"accuracy", a},
           {"under_triage", dir.under},
           {"over_triage", dir.over},
           {"unresolved", dir.unresolved}};
    if (!is_multiple_choice(c)) {
      json per = json::object();
      for (const auto& name : judge_names(outs, c)) per[name] = score_condition(outs, c, ScoringRule::single(name));
      e["per_judge"] = per;
    }
    acc[std::string(to_string(c))] = e;
    at.add_row({std::string(to_string(c)), percent(a), std::to_string(dir.under), std::to_string(dir.over),
                std::to_string(dir.unresolved)});
  }
  std::string text = at.render() + "\n";

  json tests = json::array();
  TextTable mt("Exact McNemar", {{"pair", 12, true}, {"a only", 6}, {"b only", 6}, {"p", 9}});
  const std::pair<Condition, Condition> pairs[] = {{Condition::SL, Condition::NL},    {Condition::SF, Condition::NF},
                                                   {Condition::NL, Condition::NF},    {Condition::SL, Condition::SF},
                                                   {Condition::NL_CF, Condition::NF}, {Condition::SL_CF, Condition::SF}};
  for (const auto& [a, b] : pairs) {
    if (!present.contains(a) || !present.contains(b)) continue;
    const auto ca = correctness(outs, a, rule), cb = correctness(outs, b, rule);
    const auto r = mcnemar(ca, cb);
    const auto name = std::string(to_string(a)) + " vs " + std::string(to_string(b));
    tests.push_back({{"pair", name}, {"a_only", r.only_a}, {"b_only", r.only_b}, {"p", r.p}});
    mt.add_row({name, std::to_string(r.only_a), std::to_string(r.only_b), fixed(r.p, 6)});
  }
  text += mt.render() + "\n";
  json results{{"cases", outs.size()}, {"accuracy", acc}, {"mcnemar", tests}};

  if (present.contains(Condition::NL) && present.contains(Condition::NF)) {
    const auto g = gap_decompose(outs);
    json counts = json::object();
    TextTable gt("NL/NF strata", {{"stratum", 16, true}, {"n", 4}});
    for (auto s : kAllStrata) {
      counts[std::string(to_string(s))] = g.counts.at(s);
      gt.add_row({std::string(to_string(s)), std::to_string(g.counts.at(s))});
    }
    results["gap"] = {{"counts", counts},
                      {"nf_only_adjacent", g.nf_only_adjacent},
                      {"nf_only_measured", g.nf_only_measured},
                      {"nl_only_adjacent", g.nl_only_adjacent},
                      {"nl_only_measured", g.nl_only_measured},
                      {"five_way_available", g.five_way_available},
                      {"unanimous_deferred", g.unanimous_deferred},
                      {"deferred_in_gap_min", g.deferred_in_gap_min},
                      {"deferred_in_gap_max", g.deferred_in_gap_max},
                      {"nf_only_cases", g.nf_only_cases},
                      {"nl_only_cases", g.nl_only_cases}};
    text += gt.render() + "\n";

    const auto names = judge_names(outs, Condition::NF);
    if (names.size() >= 2) {
      std::vector<Label> a, b;
      for (const auto& o : outs)
        for (const auto& [n, l] : o.judges.at(Condition::NF)) {
          if (n == names[0]) a.push_back(l);
          if (n == names[1]) b.push_back(l);
        }
      if (a.size() == outs.size() && b.size() == outs.size())
        results["judge_kappa_4way"] = opt(cohen_kappa(a, b));
    }
    if (g.five_way_available) {
      const auto r = rescore_five_way(outs);
      json judges = json::array();
      for (const auto& j : r.judges)
        judges.push_back({{"judge", j.judge},
                          {"four_way_accuracy", j.four_way_accuracy},
                          {"five_way_accuracy", j.five_way_accuracy},
                          {"deferred", j.deferred}});
      results["five_way"] = {{"judges", judges},
                             {"both_four_way_accuracy", r.both_four_way_accuracy},
                             {"both_five_way_accuracy", r.both_five_way_accuracy},
                             {"unanimous_deferred", r.unanimous_deferred},
                             {"split_deferred", r.split_deferred},
                             {"agreement", r.five_way_agreement}};
      text += "five-way: both-judge accuracy " + percent(r.both_four_way_accuracy) + " -> " +
              percent(r.both_five_way_accuracy) + ", unanimous DEFERRED " +
              std::to_string(r.unanimous_deferred.size()) + ", agreement " + percent(r.five_way_agreement) + "\n";
    }
  }
  return finish("behavior", std::move(results), std::move(text));
}

Report Pipeline::shuffle() {
  if (!config_.shuffle) fail(ErrorKind::validation, "config has no 'shuffle' records");
  const auto records = read_shuffle_records(*config_.shuffle);
  ShuffleOptions opts;
  opts.bootstrap.resamples = config_.bootstrap_resamples;
  opts.bootstrap.seed = seed(config_, "bootstrap");
  opts.bootstrap.workers = config_.workers;
  opts.bootstrap.tag = "shuffle";
  const auto a = shuffle_analysis(records, outcomes(), opts);
  json issues = json::array();
  for (const auto& [c, d] : a.coverage_issues) issues.push_back({{"case_id", c}, {"issue", d}});
  json results{{"cases", a.cases},
               {"records", a.records},
               {"same_letter", a.same_letter},
               {"same_content", a.same_content},
               {"shuffled_accuracy", a.shuffled_accuracy},
               {"er_now_content", a.er_now_content},
               {"er_now_count", a.er_now_count},
               {"coverage_issues", issues}};
  TextTable t("Option-order shuffle (" + std::to_string(a.cases) + " cases, " + std::to_string(a.records) +
                  " prompts)",
              {{"statistic", 18, true}, {"rate", 8}, {"95% CI", 18}});
  auto row = [&](const char* name, const CiRecord& ci) {
    t.add_row({name, percent(ci.point), "[" + percent(ci.lower) + ", " + percent(ci.upper) + "]"});
  };
  row("same letter", a.same_letter);
  row("same content", a.same_content);
  row("shuffled accuracy", a.shuffled_accuracy);
  row("emergency content", a.er_now_content);
  std::string text = t.render();
  if (!a.coverage_issues.empty())
    text += std::to_string(a.coverage_issues.size()) + " coverage issues (see JSON)\n";
  return finish("shuffle", std::move(results), std::move(text));
}

Report Pipeline::probe() {
  const auto& outs = outcomes();
  const std::vector<int> layers = config_.probe_layers.empty() ? std::vector<int>{config_.layer} : config_.probe_layers;
  ProbeOptions opts;
  opts.l2 = config_.l2;
  opts.standardize = config_.standardize;
  opts.workers = config_.workers;
  const auto s = seed(config_, "probe");
  json runs = json::array();
  TextTable t("Flip-prediction probes (LOOCV, " + std::to_string(config_.permutation_iterations) + " permutations)",
              {{"layer", 5}, {"transition", 12, true}, {"n", 4}, {"flips", 5}, {"ROC-AUC", 8}, {"p", 7},
               {"PR-AUC", 7}, {"base", 6}, {"p", 7}});
  for (int layer : layers)
    for (const auto& tr : config_.transitions) {
      const auto data = assemble_probe_dataset(dumps(tr.first, layer), outs, tr.first, tr.second, ScoringRule{config_.judge});
      const auto pos = data.positives(), neg = data.y.size() - pos;
      if (pos < 2 || neg < 2) {
        runs.push_back({{"layer", layer},
                        {"transition", transition_name(tr)},
                        {"n", data.y.size()},
                        {"positives", pos},
                        {"degenerate", "each class needs at least two cases"}});
        t.add_row({std::to_string(layer), transition_name(tr), std::to_string(data.y.size()), std::to_string(pos),
                   "n/a", "n/a", "n/a", "n/a", "n/a"});
        continue;
      }
      const auto r = permutation_test(data, config_.permutation_iterations, s, opts);
      runs.push_back(r);
      t.add_row({std::to_string(layer), transition_name(tr), std::to_string(r.n), std::to_string(r.positives),
                 fixed(r.roc_auc), fixed(r.p_roc), fixed(r.pr_auc), fixed(r.prevalence), fixed(r.p_pr)});
    }
  return finish("probe", json{{"runs", runs}}, t.render());
}

Report Pipeline::bundle() {
  std::vector<Report> reports;
  json skipped = json::object();
  const bool has_selection = config_.selection || config_.contrast;
  auto run = [&](const std::string& name, bool ready, const char* missing, auto&& stage) {
    if (!ready) {
      skipped[name] = missing;
      return;
    }
    reports.push_back(stage());
    write(reports.back());
  };
  run("identify-features", config_.contrast.has_value(), "no contrast inputs", [&] { return identify_features(); });
  run("behavior", config_.outcomes.has_value(), "no outcomes", [&] { return behavior(); });
  run("invariance", has_selection && config_.outcomes.has_value(), "needs a feature selection and outcomes",
      [&] { return invariance(); });
  run("direction", true, "", [&] { return direction(); });
  run("attribute", has_selection && config_.outcomes && config_.unembedding,
      "needs a feature selection, outcomes, and an unembedding", [&] { return attribute(); });
  run("shuffle", config_.shuffle && config_.outcomes, "needs shuffle records and outcomes", [&] { return shuffle(); });
  run("probe", config_.outcomes.has_value(), "no outcomes", [&] { return probe(); });

  json seeds = json::object();
  for (const auto& [k, v] : config_.seeds) seeds[k] = v;
  json all = json::object();
  std::string text;
  for (const auto& r : reports) {
    all[r.name] = r.body;
    text += r.text + "\n";
  }
  Report b;
  b.name = "bundle";
  b.body = json{{"provenance",
                 {{"tool", "fprb"},
                  {"version", std::string(kVersion)},
                  {"config_hash", config_hash(config_)},
                  {"config", config_.canonical},
                  {"seeds", seeds},
                  {"stages", stage_names()}}},
                {"reports", all},
                {"skipped", skipped}};
  b.body["provenance"]["config"].erase("workers");
  b.body["provenance"]["config"].erase("output_dir");
  b.text = text;
  write(b);
  return b;
}

}  // namespace fprb
