#include "fixture.hpp"

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <fstream>
#include <map>

#include "fprb/attribution.hpp"
#include "fprb/behavior.hpp"
#include "json.hpp"

namespace fprb::testing {

namespace fs = std::filesystem;
using nlohmann::json;

Sae random_sae(Stream& rng, Eigen::Index dim, Eigen::Index features, SaeVariant variant, Eigen::Index k) {
  Sae s;
  s.variant = variant;
  s.encoder.resize(dim, features);
  s.decoder.resize(features, dim);
  s.encoder_bias.resize(features);
  s.decoder_bias.resize(dim);
  for (Eigen::Index i = 0; i < s.encoder.size(); ++i) s.encoder.data()[i] = float(rng.normal() / std::sqrt(dim));
  for (Eigen::Index i = 0; i < s.decoder.size(); ++i) s.decoder.data()[i] = float(rng.normal() / std::sqrt(dim));
  for (Eigen::Index f = 0; f < features; ++f) s.encoder_bias(f) = float(0.1 * rng.normal());
  for (Eigen::Index d = 0; d < dim; ++d) s.decoder_bias(d) = float(0.1 * rng.normal());
  if (variant == SaeVariant::jump_relu) {
    s.threshold.resize(features);
    for (Eigen::Index f = 0; f < features; ++f) s.threshold(f) = float(0.5 * rng.uniform());
    s.subtract_decoder_bias = true;
  } else {
    s.k = k;
    s.subtract_decoder_bias = false;
  }
  return s;
}

Sae identity_sae(Eigen::Index dim, float threshold) {
  Sae s;
  s.variant = SaeVariant::jump_relu;
  s.encoder = Eigen::MatrixXf::Identity(dim, dim);
  s.decoder = Eigen::MatrixXf::Identity(dim, dim);
  s.encoder_bias = Eigen::VectorXf::Zero(dim);
  s.decoder_bias = Eigen::VectorXf::Zero(dim);
  s.threshold = Eigen::VectorXf::Constant(dim, threshold);
  return s;
}

ActivationDump random_dump(Stream& rng, const std::string& case_id, Condition condition, std::int64_t tokens,
                           std::int64_t dim, int layer) {
  ActivationDump d;
  d.case_id = case_id;
  d.condition = condition;
  d.model_id = "toy";
  d.layer = layer;
  d.residuals.resize(tokens, dim);
  for (Eigen::Index i = 0; i < d.residuals.size(); ++i) d.residuals.data()[i] = float(rng.normal());
  d.token_ids.resize(static_cast<std::size_t>(tokens));
  for (auto& t : d.token_ids) t = static_cast<std::int32_t>(rng.below(50000));
  const std::int64_t start = tokens > 2 ? 1 : 0;
  const std::int64_t end = tokens > 2 ? tokens - 1 : tokens;
  d.content_range = {start, end};
  const std::int64_t mid = start + (end - start) / 2;
  d.vignette_mask = {start, mid};
  if (is_multiple_choice(condition)) d.scaffold_mask = TokenSpan{mid, end};
  d.decision_index = tokens - 1;
  d.metadata = {{"templating", "chat"}};
  return d;
}

ActivationDump make_dump(const std::string& case_id, Condition condition, const ResidualMatrix& residuals,
                         TokenSpan vignette, std::optional<TokenSpan> scaffold) {
  ActivationDump d;
  d.case_id = case_id;
  d.condition = condition;
  d.model_id = "toy";
  d.residuals = residuals;
  d.token_ids.resize(static_cast<std::size_t>(residuals.rows()));
  for (std::size_t i = 0; i < d.token_ids.size(); ++i) d.token_ids[i] = static_cast<std::int32_t>(i);
  d.content_range = {0, residuals.rows()};
  d.vignette_mask = vignette;
  if (is_multiple_choice(condition)) d.scaffold_mask = scaffold.value_or(TokenSpan{vignette.end, residuals.rows()});
  d.decision_index = residuals.rows() - 1;
  return d;
}

TempDir::TempDir(const std::string& stem) {
  static std::atomic<int> counter{0};
  path_ = fs::temp_directory_path() /
          (stem + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter.fetch_add(1)));
  fs::remove_all(path_);
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

namespace {

constexpr Eigen::Index kScaffoldNL[5] = {10, 11, 12, 13, 14};
constexpr Eigen::Index kInstructionNF[3] = {15, 16, 17};
constexpr Eigen::Index kLetterFeature = 40;  // + tier

struct CaseSpec {
  const char* id;
  const char* gold;
  const char* nl;
  const char* sl;  // nullptr: abstention
  const char* nf[2];
  const char* nf5[2];
};

// judges are (claude, gpt)
constexpr CaseSpec kCases[Corpus::kCases] = {
    {"c01", "B", "B", "B", {"B", "B"}, {"B", "B"}},
    {"c02", "C", "C", "C", {"C", "C"}, {"C", "C"}},
    {"c03", "A", "A", "B", {"A", "A"}, {"A", "A"}},
    {"c04", "D", "D", "D", {"D", "D"}, {"D", "D"}},
    {"c05", "C", "B", "B", {"B", "B"}, {"B", "B"}},
    {"c06", "B", "C", nullptr, {"C", "C"}, {"DEFERRED", "C"}},
    {"c07", "D", "C", "C", {"D", "D"}, {"D", "DEFERRED"}},
    {"c08", "C/D", "B", "B", {"C", "C"}, {"C", "C"}},
    {"c09", "A", "B", "A", {"A", "A"}, {"A", "A"}},
    {"c10", "B", "B", "B", {"C", "C"}, {"DEFERRED", "DEFERRED"}},
    {"c11", "C", "C", "C", {"C", "B"}, {"C", "B"}},
    {"c12", "D", "A", "A", {"D", "C"}, {"D", "C"}},
};

bool flips(const CaseSpec& c) {
  const auto gold = parse_gold(c.gold);
  const bool nl = gold.matches(parse_label(c.nl));
  const bool nf = gold.matches(parse_label(c.nf[0])) && gold.matches(parse_label(c.nf[1]));
  return nl != nf;
}

std::vector<Eigen::Index> generic_features() {
  std::vector<Eigen::Index> out;
  for (Eigen::Index f = Corpus::kGenericBegin; f < 94; ++f)
    if (f != Corpus::kFlip && (f < kLetterFeature || f > kLetterFeature + 3)) out.push_back(f);
  return out;
}

class Builder {
 public:
  Builder(std::uint64_t seed) : seed_(seed), generic_(generic_features()) {
    Stream rng(seed, "fixture/sae", 0);
    Eigen::MatrixXd g(Corpus::kDim, Corpus::kFeatures);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    basis_ = qr.householderQ() * Eigen::MatrixXd::Identity(Corpus::kDim, Corpus::kFeatures);
  }

  Sae sae() const {
    Sae s;
    s.variant = SaeVariant::jump_relu;
    s.encoder = basis_.cast<float>();
    s.decoder = basis_.transpose().cast<float>();
    s.encoder_bias = Eigen::VectorXf::Zero(Corpus::kFeatures);
    s.decoder_bias = Eigen::VectorXf::Zero(Corpus::kDim);
    s.threshold = Eigen::VectorXf::Constant(Corpus::kFeatures, 0.25f);
    return s;
  }

  const Eigen::MatrixXd& basis() const { return basis_; }

  // Residual row for a feature coefficient vector plus isotropic noise.
  Eigen::RowVectorXd row(const Eigen::VectorXd& coef, Stream& rng, double noise = 0.02) const {
    Eigen::RowVectorXd r = (basis_ * coef).transpose();
    for (Eigen::Index d = 0; d < r.size(); ++d) r(d) += noise * rng.normal();
    return r;
  }

  void add_generic(Eigen::VectorXd& coef, Stream& rng, int count) const {
    for (int i = 0; i < count; ++i) {
      const auto f = generic_[rng.below(generic_.size())];
      coef(f) = std::max(coef(f), 1.0 + 3.0 * rng.uniform());
    }
  }

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::vector<Eigen::Index> generic_;
  Eigen::MatrixXd basis_;
};

ActivationDump base_dump(const std::string& id, Condition c, const ResidualMatrix& rows) {
  ActivationDump d;
  d.case_id = id;
  d.condition = c;
  d.model_id = "toy-4l";
  d.layer = Corpus::kLayer;
  d.residuals = rows;
  d.metadata = {{"templating", "chat"}};
  return d;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  out << j.dump(2) << '\n';
}

ManifestEntry entry_for(const ActivationDump& d, const fs::path& root, const fs::path& rel) {
  write_dump(d, root / rel);
  return {d.case_id, d.condition, d.layer, rel, file_crc32c(root / rel)};
}

// Analysis corpus: NL has 22 tokens, NF 18; the first 12 (template plus vignette) are shared.
std::pair<ActivationDump, ActivationDump> analysis_pair(const Builder& b, int index, const CaseSpec& spec) {
  Stream rng(b.seed(), "fixture/case", static_cast<std::uint64_t>(index));
  const auto F = Corpus::kFeatures;
  std::vector<Eigen::RowVectorXd> shared;
  for (int t = 0; t < 12; ++t) {
    Eigen::VectorXd coef = Eigen::VectorXd::Zero(F);
    if (t == 0) coef(95) = 5.0;
    if (t == 1) coef(94) = 2.0;
    if (t >= 2) {
      for (auto f : Corpus::kMedical)
        if (rng.uniform() < 0.5) coef(f) = 2.0 + 3.0 * rng.uniform();
      if (rng.uniform() < 0.3) coef(Corpus::kLeaky) = 1.0 + 2.0 * rng.uniform();
      b.add_generic(coef, rng, 3);
    }
    shared.push_back(b.row(coef, rng));
  }
  const bool flip = flips(spec);
  auto tail = [&](bool letter, std::int64_t length, std::int64_t instruction) {
    std::vector<Eigen::RowVectorXd> rows;
    for (std::int64_t t = 0; t < length; ++t) {
      Eigen::VectorXd coef = Eigen::VectorXd::Zero(F);
      if (t < instruction) {
        if (letter) {
          coef(kScaffoldNL[rng.below(5)]) = 2.0 + 4.0 * rng.uniform();
          coef(kScaffoldNL[rng.below(5)]) = 2.0 + 4.0 * rng.uniform();
        } else {
          coef(kInstructionNF[rng.below(3)]) = 2.0 + 3.0 * rng.uniform();
        }
        b.add_generic(coef, rng, 2);
      } else if (t == length - 1) {
        if (letter) {
          for (auto f : kScaffoldNL) coef(f) = 3.0;
          coef(kLetterFeature + tier(parse_label(spec.nl))) = 4.0;
        } else {
          for (auto f : kInstructionNF) coef(f) = 2.5;
        }
        if (flip) coef(Corpus::kFlip) = 3.0;
        b.add_generic(coef, rng, 2);
      } else {
        coef(93) = 1.5;
      }
      rows.push_back(b.row(coef, rng));
    }
    return rows;
  };
  auto assemble = [&](Condition c, const std::vector<Eigen::RowVectorXd>& rest, std::int64_t content_end) {
    ResidualMatrix m(static_cast<Eigen::Index>(12 + rest.size()), Corpus::kDim);
    for (int t = 0; t < 12; ++t) {
      Eigen::RowVectorXd r = shared[static_cast<std::size_t>(t)];
      for (Eigen::Index d = 0; d < r.size(); ++d) r(d) += 0.0005 * rng.normal();
      m.row(t) = r.cast<float>();
    }
    for (std::size_t t = 0; t < rest.size(); ++t) m.row(static_cast<Eigen::Index>(12 + t)) = rest[t].cast<float>();
    auto d = base_dump(spec.id, c, m);
    d.token_ids = {1, 2};
    for (int t = 2; t < 12; ++t) d.token_ids.push_back(100 + index * 10 + t);
    const bool letter = is_multiple_choice(c);
    for (std::int64_t t = 12; t < content_end; ++t) d.token_ids.push_back(static_cast<std::int32_t>((letter ? 50 : 70) + t));
    while (d.token_ids.size() < static_cast<std::size_t>(m.rows())) d.token_ids.push_back(3);
    d.content_range = {2, content_end};
    d.vignette_mask = {2, 12};
    if (letter) d.scaffold_mask = TokenSpan{12, content_end};
    d.decision_index = m.rows() - 1;
    return d;
  };
  auto nl = assemble(Condition::NL, tail(true, 10, 8), 20);
  auto nf = assemble(Condition::NF, tail(false, 6, 4), 16);
  return {std::move(nl), std::move(nf)};
}

ActivationDump contrast_prompt(const Builder& b, bool medical, int index) {
  Stream rng(b.seed(), medical ? "fixture/medical" : "fixture/non_medical", static_cast<std::uint64_t>(index));
  const auto F = Corpus::kFeatures;
  const bool patchy = medical && rng.uniform() < 0.4;
  ResidualMatrix m(12, Corpus::kDim);
  for (int t = 0; t < 12; ++t) {
    Eigen::VectorXd coef = Eigen::VectorXd::Zero(F);
    if (t == 0) coef(95) = 5.0;
    if (t >= 1 && t < 11) {
      if (medical)
        for (auto f : Corpus::kMedical)
          if (rng.uniform() < 0.45) coef(f) = 2.0 + 3.0 * rng.uniform();
      if (rng.uniform() < (medical ? 0.3 : 0.1)) coef(Corpus::kLeaky) = 2.0 + 2.0 * rng.uniform();
      if (patchy && rng.uniform() < 0.5) coef(Corpus::kPatchy) = 2.0 + 2.0 * rng.uniform();
      b.add_generic(coef, rng, 6);
    }
    if (t == 11) coef(93) = 1.5;
    m.row(t) = b.row(coef, rng).cast<float>();
  }
  char id[8];
  std::snprintf(id, sizeof id, "%c%02d", medical ? 'm' : 'n', index + 1);
  auto d = base_dump(id, Condition::NF, m);
  for (int t = 0; t < 12; ++t) d.token_ids.push_back(static_cast<std::int32_t>(1000 * (medical ? 1 : 2) + index * 20 + t));
  d.content_range = {1, 11};
  d.vignette_mask = {1, 11};
  d.decision_index = 11;
  return d;
}

json outcome_json(const CaseSpec& c, bool drop_judges) {
  json letters{{"NL", c.nl}, {"SL", c.sl ? json(c.sl) : json(nullptr)}};
  json o{{"case_id", c.id}, {"gold", c.gold}, {"acuity", parse_gold(c.gold).lo() >= 2 ? "urgent" : "routine"},
         {"letters", letters}};
  if (!drop_judges) {
    o["judges"] = {{"NF", {{"claude", c.nf[0]}, {"gpt", c.nf[1]}}}};
    o["judges_5way"] = {{"NF", {{"claude", c.nf5[0]}, {"gpt", c.nf5[1]}}}};
  }
  return o;
}

}  // namespace

Corpus write_corpus(const fs::path& dir, std::uint64_t seed) {
  fs::create_directories(dir / "corpus");
  fs::create_directories(dir / "contrast");
  const Builder b(seed);
  save_sae(b.sae(), dir / "sae");

  CorpusManifest manifest;
  manifest.gold_labels = "outcomes.jsonl";
  for (int i = 0; i < Corpus::kCases; ++i) {
    auto [nl, nf] = analysis_pair(b, i, kCases[i]);
    const std::string id = kCases[i].id;
    manifest.entries.push_back(entry_for(nl, dir / "corpus", id + "_NL_L2.fprb"));
    manifest.entries.push_back(entry_for(nf, dir / "corpus", id + "_NF_L2.fprb"));
  }
  write_manifest(manifest, dir / "corpus" / "manifest.json");

  for (bool medical : {true, false}) {
    CorpusManifest m;
    for (int i = 0; i < Corpus::kContrastPrompts; ++i) {
      const auto d = contrast_prompt(b, medical, i);
      m.entries.push_back(entry_for(d, dir / "contrast", d.case_id + ".fprb"));
    }
    write_manifest(m, dir / "contrast" / (medical ? "medical.json" : "non_medical.json"));
  }

  {
    std::ofstream good(dir / "outcomes.jsonl");
    std::ofstream bad(dir / "outcomes_missing_judges.jsonl");
    for (const auto& c : kCases) {
      good << outcome_json(c, false).dump() << '\n';
      bad << outcome_json(c, std::string(c.id) == "c05").dump() << '\n';
    }
  }

  {
    std::ofstream out(dir / "shuffle.jsonl");
    const auto& perms = enumerate_permutations();
    for (int i = 0; i < Corpus::kCases; ++i) {
      const auto canonical = tier(parse_label(kCases[i].nl));
      for (int p = 1; p <= 23; ++p) {
        Stream rng(seed, "fixture/shuffle", static_cast<std::uint64_t>(i * 100 + p));
        const auto& perm = perms[static_cast<std::size_t>(p - 1)];
        json r{{"case_id", kCases[i].id}, {"permutation", p}};
        const double u = rng.uniform();
        if (i == 0 && p == 5) {
          r["picked_letter"] = nullptr;
          r["picked_content"] = nullptr;
        } else if (u < 0.6) {
          r["picked_content"] = canonical;
          r["picked_letter"] = to_string(perm[static_cast<std::size_t>(canonical)]);
        } else if (u < 0.85) {
          const auto letter = static_cast<Label>(canonical);
          const auto j = std::find(perm.begin(), perm.end(), letter) - perm.begin();
          r["picked_letter"] = to_string(letter);
          r["picked_content"] = j;
        } else {
          const auto j = static_cast<int>(rng.below(4));
          r["picked_content"] = j;
          if (rng.uniform() < 0.5) r["picked_letter"] = to_string(perm[static_cast<std::size_t>(j)]);
        }
        out << r.dump() << '\n';
      }
    }
  }

  {
    Stream rng(seed, "fixture/unembedding", 0);
    Unembedding u;
    u.weights.resize(Corpus::kDim, 40);
    for (Eigen::Index i = 0; i < u.weights.size(); ++i) u.weights.data()[i] = float(rng.normal() / std::sqrt(Corpus::kDim));
    u.letter_ids = {11, 17, 23, 29};
    for (int l = 0; l < 4; ++l)
      u.weights.col(u.letter_ids[static_cast<std::size_t>(l)]) += (0.5 * b.basis().col(kLetterFeature + l)).cast<float>();
    save_unembedding(u, dir / "unembedding.fprb");
  }

  json config{
      {"manifest", "corpus/manifest.json"},
      {"sae", {{std::to_string(Corpus::kLayer), "sae"}}},
      {"layer", Corpus::kLayer},
      {"contrast", {{"medical_manifest", "contrast/medical.json"}, {"non_medical_manifest", "contrast/non_medical.json"}, {"condition", "NF"}}},
      {"outcomes", "outcomes.jsonl"},
      {"shuffle", "shuffle.jsonl"},
      {"unembedding", "unembedding.fprb"},
      {"seeds", {{"random_features", 12}, {"bootstrap", 11}, {"resample", 13}, {"ablation_control", 15}, {"probe", 14}}},
      {"bootstrap", {{"resamples", 500}}},
      {"resample", {{"draws", 200}, {"draw_size", 10}}},
      {"attribution", {{"top_k", 10}, {"scaffold_features", 5}}},
      {"probe", {{"layers", {Corpus::kLayer}}, {"transitions", {"NL->NF"}}, {"iterations", 99}}},
      {"output_dir", "reports"},
  };
  write_json(dir / "config.json", config);
  config["outcomes"] = "outcomes_missing_judges.jsonl";
  write_json(dir / "config_missing_judges.json", config);

  Corpus c;
  c.dir = dir;
  c.config = dir / "config.json";
  c.missing_judges_config = dir / "config_missing_judges.json";
  c.missing_judges_case = "c05";
  return c;
}

}  // namespace fprb::testing
