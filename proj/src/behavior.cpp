#include "fprb/behavior.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "fprb/errors.hpp"

namespace fprb {

std::string_view to_string(Label l) {
  switch (l) {
    case Label::A: return "A";
    case Label::B: return "B";
    case Label::C: return "C";
    case Label::D: return "D";
    case Label::deferred: return "DEFERRED";
  }
  return "?";
}

Label parse_label(std::string_view text) {
  if (text == "A") return Label::A;
  if (text == "B") return Label::B;
  if (text == "C") return Label::C;
  if (text == "D") return Label::D;
  if (text == "DEFERRED" || text == "deferred") return Label::deferred;
  fail(ErrorKind::validation, "unknown label '" + std::string(text) + "'");
}

int GoldLabel::lo() const { return secondary ? std::min(tier(primary), tier(*secondary)) : tier(primary); }
int GoldLabel::hi() const { return secondary ? std::max(tier(primary), tier(*secondary)) : tier(primary); }

GoldLabel parse_gold(std::string_view text) {
  GoldLabel g;
  const auto slash = text.find('/');
  g.primary = parse_label(text.substr(0, slash));
  require(is_letter(g.primary), "gold label must be a letter");
  if (slash != std::string_view::npos) {
    g.secondary = parse_label(text.substr(slash + 1));
    require(is_letter(*g.secondary), "gold label must be a letter");
    require(std::abs(tier(g.primary) - tier(*g.secondary)) == 1, "dual gold labels must be adjacent tiers");
  }
  return g;
}

std::string to_string(const GoldLabel& g) {
  std::string s(to_string(g.primary));
  if (g.secondary) s += "/" + std::string(to_string(*g.secondary));
  return s;
}

namespace {

JudgeLabels judges_from_json(const nlohmann::json& j, bool allow_deferred, const std::string& case_id) {
  JudgeLabels out;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const Label l = parse_label(it.value().get<std::string>());
    require(allow_deferred || is_letter(l), "DEFERRED is only valid in five-way labels", case_id);
    out.emplace_back(it.key(), l);
  }
  std::sort(out.begin(), out.end());
  return out;
}

nlohmann::json judges_to_json(const JudgeLabels& labels) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, l] : labels) j[name] = to_string(l);
  return j;
}

const JudgeLabels& judges_for(const CaseOutcome& o, Condition c, bool five_way) {
  const auto& table = five_way ? o.judges_5way : o.judges;
  auto it = table.find(c);
  if (it == table.end() || it->second.empty())
    fail(ErrorKind::validation,
         std::string("missing ") + (five_way ? "five-way " : "") + "judge labels for " + std::string(to_string(c)) +
             " on case " + o.case_id,
         o.case_id);
  return it->second;
}

}  // namespace

CaseOutcome outcome_from_json(const nlohmann::json& j) {
  CaseOutcome o;
  try {
    o.case_id = j.at("case_id").get<std::string>();
    o.gold = parse_gold(j.at("gold").get<std::string>());
    o.acuity = j.value("acuity", std::string{});
    if (j.contains("letters"))
      for (auto it = j["letters"].begin(); it != j["letters"].end(); ++it) {
        const Condition c = parse_condition(it.key());
        std::optional<Label> l;
        if (!it.value().is_null()) {
          l = parse_label(it.value().get<std::string>());
          require(is_letter(*l), "multiple-choice picks must be letters", o.case_id);
        }
        o.letters[c] = l;
      }
    if (j.contains("judges"))
      for (auto it = j["judges"].begin(); it != j["judges"].end(); ++it)
        o.judges[parse_condition(it.key())] = judges_from_json(it.value(), false, o.case_id);
    if (j.contains("judges_5way"))
      for (auto it = j["judges_5way"].begin(); it != j["judges_5way"].end(); ++it)
        o.judges_5way[parse_condition(it.key())] = judges_from_json(it.value(), true, o.case_id);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("malformed outcome record: ") + e.what(), o.case_id);
  }
  return o;
}

nlohmann::json to_json(const CaseOutcome& o) {
  nlohmann::json j{{"case_id", o.case_id}, {"gold", to_string(o.gold)}, {"acuity", o.acuity}};
  nlohmann::json letters = nlohmann::json::object();
  for (const auto& [c, l] : o.letters)
    letters[std::string(to_string(c))] = l ? nlohmann::json(to_string(*l)) : nlohmann::json(nullptr);
  j["letters"] = letters;
  nlohmann::json judges = nlohmann::json::object(), judges5 = nlohmann::json::object();
  for (const auto& [c, labels] : o.judges) judges[std::string(to_string(c))] = judges_to_json(labels);
  for (const auto& [c, labels] : o.judges_5way) judges5[std::string(to_string(c))] = judges_to_json(labels);
  j["judges"] = judges;
  j["judges_5way"] = judges5;
  return j;
}

std::vector<CaseOutcome> read_outcomes(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open outcomes file " + path.string(), path.string());
  std::vector<CaseOutcome> out;
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::format, path.string() + ":" + std::to_string(line_no) + ": " + e.what(), path.string());
    }
    auto o = outcome_from_json(j);
    require(seen.insert(o.case_id).second, "duplicate outcome record for case " + o.case_id, o.case_id);
    out.push_back(std::move(o));
  }
  return out;
}

bool is_correct(const CaseOutcome& o, Condition c, const ScoringRule& rule) {
  if (is_multiple_choice(c)) {
    auto it = o.letters.find(c);
    if (it == o.letters.end())
      fail(ErrorKind::validation, "missing " + std::string(to_string(c)) + " prediction for case " + o.case_id,
           o.case_id);
    return it->second && o.gold.matches(*it->second);
  }
  const auto& labels = judges_for(o, c, false);
  if (rule.judge.empty()) {
    require(labels.size() >= 2, "both-judge scoring needs at least two judges on case " + o.case_id, o.case_id);
    return std::all_of(labels.begin(), labels.end(), [&](const auto& p) { return o.gold.matches(p.second); });
  }
  for (const auto& [name, l] : labels)
    if (name == rule.judge) return o.gold.matches(l);
  fail(ErrorKind::validation, "judge '" + rule.judge + "' has no label on case " + o.case_id, o.case_id);
}

std::vector<bool> correctness(std::span<const CaseOutcome> outcomes, Condition c, const ScoringRule& rule) {
  std::vector<bool> out;
  out.reserve(outcomes.size());
  for (const auto& o : outcomes) out.push_back(is_correct(o, c, rule));
  return out;
}

double score_condition(std::span<const CaseOutcome> outcomes, Condition c, const ScoringRule& rule) {
  require(!outcomes.empty(), "score_condition: no outcomes");
  const auto v = correctness(outcomes, c, rule);
  return static_cast<double>(std::count(v.begin(), v.end(), true)) / static_cast<double>(v.size());
}

std::vector<std::string> judge_names(std::span<const CaseOutcome> outcomes, Condition c) {
  std::set<std::string> names;
  for (const auto& o : outcomes)
    for (const auto& [name, l] : judges_for(o, c, false)) names.insert(name);
  return {names.begin(), names.end()};
}

std::optional<Label> consensus_label(const CaseOutcome& o, Condition c) {
  if (is_multiple_choice(c)) {
    auto it = o.letters.find(c);
    return it == o.letters.end() ? std::nullopt : it->second;
  }
  const auto& labels = judges_for(o, c, false);
  const Label first = labels.front().second;
  for (const auto& [name, l] : labels)
    if (l != first) return std::nullopt;
  return first;
}

double mcnemar_exact(std::uint64_t b, std::uint64_t c) {
  const auto n = b + c;
  if (n == 0) return 1.0;
  const auto k = std::min(b, c);
  // Sum of binomial(n, 1/2) probabilities for i <= k, in log space.
  const long double log_half_n = -static_cast<long double>(n) * std::log(2.0L);
  long double tail = 0.0L;
  for (std::uint64_t i = 0; i <= k; ++i) {
    const long double log_c = std::lgamma(static_cast<long double>(n) + 1) - std::lgamma(static_cast<long double>(i) + 1) -
                              std::lgamma(static_cast<long double>(n - i) + 1);
    tail += std::exp(log_c + log_half_n);
  }
  return static_cast<double>(std::min(1.0L, 2.0L * tail));
}

McNemarResult mcnemar(const std::vector<bool>& a, const std::vector<bool>& b) {
  require(a.size() == b.size(), "mcnemar: paired vectors differ in length");
  McNemarResult r;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] && !b[i]) ++r.only_a;
    if (!a[i] && b[i]) ++r.only_b;
  }
  r.p = mcnemar_exact(r.only_a, r.only_b);
  return r;
}

TriageDirection triage_error_direction(std::span<const CaseOutcome> outcomes, Condition c) {
  TriageDirection d;
  for (const auto& o : outcomes) {
    const auto l = consensus_label(o, c);
    if (!l) {
      ++d.unresolved;
    } else if (*l == Label::deferred) {
      ++d.deferred;
    } else if (tier(*l) < o.gold.lo()) {
      ++d.under;
    } else if (tier(*l) > o.gold.hi()) {
      ++d.over;
    } else {
      ++d.correct;
    }
  }
  return d;
}

std::optional<int> adjacency(Label a, Label b) {
  if (!is_letter(a) || !is_letter(b)) return std::nullopt;
  return std::abs(tier(a) - tier(b));
}

std::string_view to_string(Stratum s) {
  switch (s) {
    case Stratum::both_right: return "both_right";
    case Stratum::both_wrong: return "both_wrong";
    case Stratum::nf_only_right: return "nf_only_right";
    case Stratum::nl_only_right: return "nl_only_right";
    case Stratum::judges_disagree: return "judges_disagree";
  }
  return "?";
}

std::map<std::string, Stratum> stratify(std::span<const CaseOutcome> outcomes, Condition letter, Condition free_text) {
  std::map<std::string, Stratum> out;
  for (const auto& o : outcomes) {
    const bool letter_right = is_correct(o, letter);
    const auto& labels = judges_for(o, free_text, false);
    require(labels.size() >= 2, "stratify needs two judges on case " + o.case_id, o.case_id);
    const bool first = o.gold.matches(labels[0].second);
    const bool second = o.gold.matches(labels[1].second);
    Stratum s;
    if (first != second)
      s = Stratum::judges_disagree;
    else if (letter_right && first)
      s = Stratum::both_right;
    else if (!letter_right && !first)
      s = Stratum::both_wrong;
    else
      s = first ? Stratum::nf_only_right : Stratum::nl_only_right;
    out[o.case_id] = s;
  }
  return out;
}

GapDecomposition gap_decompose(std::span<const CaseOutcome> outcomes, Condition letter, Condition free_text) {
  GapDecomposition g;
  for (auto s : kAllStrata) g.counts[s] = 0;
  const auto strata = stratify(outcomes, letter, free_text);
  g.five_way_available = std::all_of(outcomes.begin(), outcomes.end(), [&](const CaseOutcome& o) {
    auto it = o.judges_5way.find(free_text);
    return it != o.judges_5way.end() && !it->second.empty();
  });
  for (const auto& o : outcomes) {
    const Stratum s = strata.at(o.case_id);
    ++g.counts[s];
    const bool gap_driver = s == Stratum::nf_only_right || s == Stratum::nl_only_right;
    if (gap_driver) {
      const auto a = consensus_label(o, letter);
      const auto b = consensus_label(o, free_text);
      const auto dist = (a && b) ? adjacency(*a, *b) : std::nullopt;
      auto& measured = s == Stratum::nf_only_right ? g.nf_only_measured : g.nl_only_measured;
      auto& adjacent = s == Stratum::nf_only_right ? g.nf_only_adjacent : g.nl_only_adjacent;
      if (dist) {
        ++measured;
        if (*dist == 1) ++adjacent;
      }
      (s == Stratum::nf_only_right ? g.nf_only_cases : g.nl_only_cases).push_back(o.case_id);
    }
    if (g.five_way_available) {
      const auto& labels5 = o.judges_5way.at(free_text);
      const bool unanimous = std::all_of(labels5.begin(), labels5.end(),
                                         [](const auto& p) { return p.second == Label::deferred; });
      if (unanimous) {
        ++g.unanimous_deferred;
        if (gap_driver) ++g.deferred_in_gap_min;
        if (gap_driver || s == Stratum::judges_disagree) ++g.deferred_in_gap_max;
      }
    }
  }
  return g;
}

FiveWayRescore rescore_five_way(std::span<const CaseOutcome> outcomes, Condition free_text) {
  require(!outcomes.empty(), "rescore_five_way: no outcomes");
  FiveWayRescore r;
  std::set<std::string> names;
  for (const auto& o : outcomes)
    for (const auto& [name, l] : judges_for(o, free_text, true)) names.insert(name);
  const auto n = static_cast<double>(outcomes.size());
  for (const auto& name : names) {
    JudgeRescore jr;
    jr.judge = name;
    std::size_t right4 = 0, right5 = 0;
    for (const auto& o : outcomes) {
      std::optional<Label> l4, l5;
      for (const auto& [jn, l] : judges_for(o, free_text, false))
        if (jn == name) l4 = l;
      for (const auto& [jn, l] : judges_for(o, free_text, true))
        if (jn == name) l5 = l;
      if (!l4 || !l5) fail(ErrorKind::validation, "judge '" + name + "' lacks labels on case " + o.case_id, o.case_id);
      if (o.gold.matches(*l4)) ++right4;
      if (*l5 == Label::deferred)
        ++jr.deferred;
      else if (o.gold.matches(*l5))
        ++right5;
    }
    jr.four_way_accuracy = static_cast<double>(right4) / n;
    jr.five_way_accuracy = static_cast<double>(right5) / n;
    r.judges.push_back(jr);
  }
  std::size_t both4 = 0, both5 = 0, agree = 0;
  for (const auto& o : outcomes) {
    const auto& l4 = judges_for(o, free_text, false);
    const auto& l5 = judges_for(o, free_text, true);
    if (std::all_of(l4.begin(), l4.end(), [&](const auto& p) { return o.gold.matches(p.second); })) ++both4;
    if (std::all_of(l5.begin(), l5.end(), [&](const auto& p) { return o.gold.matches(p.second); })) ++both5;
    const auto deferrals = std::count_if(l5.begin(), l5.end(), [](const auto& p) { return p.second == Label::deferred; });
    if (deferrals == static_cast<std::ptrdiff_t>(l5.size()))
      r.unanimous_deferred.push_back(o.case_id);
    else if (deferrals > 0)
      r.split_deferred.push_back(o.case_id);
    if (std::all_of(l5.begin(), l5.end(), [&](const auto& p) { return p.second == l5.front().second; })) ++agree;
  }
  r.both_four_way_accuracy = static_cast<double>(both4) / n;
  r.both_five_way_accuracy = static_cast<double>(both5) / n;
  r.five_way_agreement = static_cast<double>(agree) / n;
  return r;
}

std::optional<double> cohen_kappa(std::span<const Label> a, std::span<const Label> b) {
  require(a.size() == b.size(), "cohen_kappa: label lists differ in length");
  require(!a.empty(), "cohen_kappa: empty label lists");
  constexpr std::size_t K = 5;
  std::array<double, K> ma{}, mb{};
  double observed = 0.0;
  const auto n = static_cast<double>(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma[static_cast<std::size_t>(a[i])] += 1.0;
    mb[static_cast<std::size_t>(b[i])] += 1.0;
    if (a[i] == b[i]) observed += 1.0;
  }
  observed /= n;
  double expected = 0.0;
  for (std::size_t k = 0; k < K; ++k) expected += (ma[k] / n) * (mb[k] / n);
  if (expected >= 1.0 - 1e-15) return std::nullopt;
  return (observed - expected) / (1.0 - expected);
}

const std::vector<Permutation>& enumerate_permutations() {
  static const std::vector<Permutation> perms = [] {
    std::vector<Permutation> out;
    // Starting from the identity, next_permutation never emits it.
    Permutation p{Label::A, Label::B, Label::C, Label::D};
    while (std::next_permutation(p.begin(), p.end())) out.push_back(p);
    return out;
  }();
  return perms;
}

ShuffleRecord shuffle_record_from_json(const nlohmann::json& j) {
  ShuffleRecord r;
  try {
    r.case_id = j.at("case_id").get<std::string>();
    r.permutation = j.at("permutation").get<int>();
    if (j.contains("picked_letter") && !j["picked_letter"].is_null()) {
      r.picked_letter = parse_label(j["picked_letter"].get<std::string>());
      require(is_letter(*r.picked_letter), "shuffle picks must be letters", r.case_id);
    }
    if (j.contains("picked_content") && !j["picked_content"].is_null()) r.picked_content = j["picked_content"].get<int>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("malformed shuffle record: ") + e.what(), r.case_id);
  }
  require(r.permutation >= 1 && r.permutation <= 23, "permutation id outside 1..23", r.case_id);
  if (r.picked_content) require(*r.picked_content >= 0 && *r.picked_content <= 3, "picked_content outside 0..3", r.case_id);
  const auto& perm = enumerate_permutations()[static_cast<std::size_t>(r.permutation - 1)];
  if (r.picked_letter) {
    const auto content = static_cast<int>(std::find(perm.begin(), perm.end(), *r.picked_letter) - perm.begin());
    if (r.picked_content)
      require(*r.picked_content == content, "picked_content disagrees with picked_letter under the permutation",
              r.case_id);
    r.picked_content = content;
  } else if (r.picked_content) {
    r.picked_letter = perm[static_cast<std::size_t>(*r.picked_content)];
  }
  return r;
}

std::vector<ShuffleRecord> read_shuffle_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open shuffle records " + path.string(), path.string());
  std::vector<ShuffleRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(shuffle_record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::format, path.string() + ":" + std::to_string(line_no) + ": " + e.what(), path.string());
    }
  }
  return out;
}

ShuffleAnalysis shuffle_analysis(std::span<const ShuffleRecord> records, std::span<const CaseOutcome> outcomes,
                                 const ShuffleOptions& options) {
  std::map<std::string, const CaseOutcome*> by_case;
  for (const auto& o : outcomes) by_case[o.case_id] = &o;
  std::map<std::string, std::vector<const ShuffleRecord*>> grouped;
  for (const auto& r : records) grouped[r.case_id].push_back(&r);
  require(!grouped.empty(), "shuffle_analysis: no records");

  ShuffleAnalysis a;
  std::vector<double> same_letter, same_content, accurate, er_now, totals;
  for (const auto& [case_id, recs] : grouped) {
    auto it = by_case.find(case_id);
    if (it == by_case.end()) fail(ErrorKind::validation, "shuffle records for unknown case " + case_id, case_id);
    const CaseOutcome& o = *it->second;

    std::array<int, 24> seen{};
    for (const auto* r : recs) ++seen[static_cast<std::size_t>(r->permutation)];
    for (int id = 1; id <= 23; ++id) {
      if (seen[static_cast<std::size_t>(id)] == 0)
        a.coverage_issues.emplace_back(case_id, "missing permutation " + std::to_string(id));
      else if (seen[static_cast<std::size_t>(id)] > 1)
        a.coverage_issues.emplace_back(case_id, "duplicate permutation " + std::to_string(id));
    }

    const auto canon = consensus_label(o, options.canonical);
    double sl = 0, sc = 0, acc = 0, er = 0;
    for (const auto* r : recs) {
      if (!r->picked_content) continue;
      const int content = *r->picked_content;
      if (canon && r->picked_letter == canon) sl += 1;
      if (canon && content == tier(*canon)) sc += 1;
      if (o.gold.matches(static_cast<Label>(content))) acc += 1;
      if (content == options.er_now_option) er += 1;
    }
    same_letter.push_back(sl);
    same_content.push_back(sc);
    accurate.push_back(acc);
    er_now.push_back(er);
    totals.push_back(static_cast<double>(recs.size()));
    a.records += recs.size();
    a.er_now_count += static_cast<std::size_t>(er);
  }
  a.cases = grouped.size();
  a.same_letter = bootstrap_ratio_ci(same_letter, totals, options.bootstrap);
  a.same_content = bootstrap_ratio_ci(same_content, totals, options.bootstrap);
  a.shuffled_accuracy = bootstrap_ratio_ci(accurate, totals, options.bootstrap);
  a.er_now_content = bootstrap_ratio_ci(er_now, totals, options.bootstrap);
  return a;
}

}  // namespace fprb
