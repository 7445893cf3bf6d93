#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fprb/actstore.hpp"
#include "fprb/stats.hpp"
#include "json.hpp"

namespace fprb {

// Triage tiers on the acuity scale A < B < C < D, plus the five-way DEFERRED.
enum class Label : std::uint8_t { A = 0, B = 1, C = 2, D = 3, deferred = 4 };

std::string_view to_string(Label l);
Label parse_label(std::string_view text);
inline bool is_letter(Label l) { return l != Label::deferred; }
inline int tier(Label l) { return static_cast<int>(l); }

struct GoldLabel {
  Label primary = Label::A;
  std::optional<Label> secondary;  // dual gold, adjacent to primary

  bool matches(Label l) const { return l == primary || (secondary && l == *secondary); }
  int lo() const;
  int hi() const;
};

// "C" or "C/D"
GoldLabel parse_gold(std::string_view text);
std::string to_string(const GoldLabel& g);

// Judge name -> label, ordered by judge name.
using JudgeLabels = std::vector<std::pair<std::string, Label>>;

struct CaseOutcome {
  std::string case_id;
  GoldLabel gold;
  std::string acuity;
  // Multiple-choice picks; nullopt records an abstention (no extractable letter).
  std::map<Condition, std::optional<Label>> letters;
  std::map<Condition, JudgeLabels> judges;       // four-way adjudication
  std::map<Condition, JudgeLabels> judges_5way;  // with DEFERRED
};

// One JSON object per line; see README for the field layout.
std::vector<CaseOutcome> read_outcomes(const std::filesystem::path& path);
CaseOutcome outcome_from_json(const nlohmann::json& j);
nlohmann::json to_json(const CaseOutcome& o);

// Free-text correctness: every judge must match gold (headline rule) or one named judge.
struct ScoringRule {
  std::string judge;  // empty = all judges agree on correct
  static ScoringRule both() { return {}; }
  static ScoringRule single(std::string name) { return {std::move(name)}; }
};

bool is_correct(const CaseOutcome& o, Condition c, const ScoringRule& rule = {});
std::vector<bool> correctness(std::span<const CaseOutcome> outcomes, Condition c, const ScoringRule& rule = {});
double score_condition(std::span<const CaseOutcome> outcomes, Condition c, const ScoringRule& rule = {});

// Judge names present for a free-text condition (throws when missing on any case).
std::vector<std::string> judge_names(std::span<const CaseOutcome> outcomes, Condition c);

// Letter the case settled on in a condition: the multiple-choice pick, or the
// judges' common four-way label. nullopt for abstentions or split judges.
std::optional<Label> consensus_label(const CaseOutcome& o, Condition c);

// Exact two-sided binomial test on discordant pair counts.
double mcnemar_exact(std::uint64_t b, std::uint64_t c);

struct McNemarResult {
  std::uint64_t only_a = 0;  // a correct, b wrong
  std::uint64_t only_b = 0;
  double p = 1.0;
};

McNemarResult mcnemar(const std::vector<bool>& a, const std::vector<bool>& b);

struct TriageDirection {
  std::size_t under = 0;
  std::size_t over = 0;
  std::size_t correct = 0;
  std::size_t deferred = 0;
  std::size_t unresolved = 0;  // abstentions and split judges
};

TriageDirection triage_error_direction(std::span<const CaseOutcome> outcomes, Condition c);

// |tier(a) - tier(b)|; nullopt when either side is DEFERRED.
std::optional<int> adjacency(Label a, Label b);

enum class Stratum { both_right, both_wrong, nf_only_right, nl_only_right, judges_disagree };

std::string_view to_string(Stratum s);
constexpr std::array<Stratum, 5> kAllStrata{Stratum::both_right, Stratum::both_wrong, Stratum::nf_only_right,
                                            Stratum::nl_only_right, Stratum::judges_disagree};

// Joint correctness of a multiple-choice and a free-text condition per case.
std::map<std::string, Stratum> stratify(std::span<const CaseOutcome> outcomes, Condition letter = Condition::NL,
                                        Condition free_text = Condition::NF);

struct GapDecomposition {
  std::map<Stratum, std::size_t> counts;
  std::size_t unanimous_deferred = 0;
  std::size_t deferred_in_gap_min = 0;
  std::size_t deferred_in_gap_max = 0;
  std::size_t nf_only_adjacent = 0;
  std::size_t nf_only_measured = 0;
  std::size_t nl_only_adjacent = 0;
  std::size_t nl_only_measured = 0;
  bool five_way_available = false;
  std::vector<std::string> nf_only_cases;
  std::vector<std::string> nl_only_cases;
};

GapDecomposition gap_decompose(std::span<const CaseOutcome> outcomes, Condition letter = Condition::NL,
                               Condition free_text = Condition::NF);

struct JudgeRescore {
  std::string judge;
  double four_way_accuracy = 0.0;
  double five_way_accuracy = 0.0;
  std::size_t deferred = 0;
};

struct FiveWayRescore {
  std::vector<JudgeRescore> judges;
  double both_four_way_accuracy = 0.0;
  double both_five_way_accuracy = 0.0;
  std::vector<std::string> unanimous_deferred;
  std::vector<std::string> split_deferred;
  double five_way_agreement = 0.0;
};

FiveWayRescore rescore_five_way(std::span<const CaseOutcome> outcomes, Condition free_text = Condition::NF);

// Cohen's kappa with empirical marginals; nullopt when chance agreement is 1.
std::optional<double> cohen_kappa(std::span<const Label> a, std::span<const Label> b);

// Letter shown for canonical option i is perm[i]; identity is (A, B, C, D).
using Permutation = std::array<Label, 4>;

// The 23 non-identity permutations in lexicographic order; id = index + 1.
const std::vector<Permutation>& enumerate_permutations();

struct ShuffleRecord {
  std::string case_id;
  int permutation = 0;                // 1..23
  std::optional<Label> picked_letter;  // nullopt: no extractable letter
  std::optional<int> picked_content;   // canonical option index 0..3
};

std::vector<ShuffleRecord> read_shuffle_records(const std::filesystem::path& path);
ShuffleRecord shuffle_record_from_json(const nlohmann::json& j);

struct ShuffleAnalysis {
  CiRecord same_letter;
  CiRecord same_content;
  CiRecord shuffled_accuracy;
  CiRecord er_now_content;
  std::size_t records = 0;
  std::size_t er_now_count = 0;
  std::size_t cases = 0;
  std::vector<std::pair<std::string, std::string>> coverage_issues;  // case id, description
};

struct ShuffleOptions {
  Condition canonical = Condition::NL;
  int er_now_option = 3;  // canonical index of the emergency-tier option text
  BootstrapOptions bootstrap{};
};

ShuffleAnalysis shuffle_analysis(std::span<const ShuffleRecord> records, std::span<const CaseOutcome> outcomes,
                                 const ShuffleOptions& options = {});

}  // namespace fprb
