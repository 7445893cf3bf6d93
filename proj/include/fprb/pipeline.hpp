#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fprb/actstore.hpp"
#include "fprb/behavior.hpp"
#include "fprb/features.hpp"
#include "fprb/pooling.hpp"
#include "fprb/sae.hpp"
#include "json.hpp"

namespace fprb {

inline constexpr std::string_view kVersion = "0.3.0";

struct ContrastInputs {
  std::filesystem::path medical_manifest;
  std::filesystem::path non_medical_manifest;
  Condition condition = Condition::NF;
};

struct RunConfig {
  std::filesystem::path manifest;
  std::map<int, std::filesystem::path> sae;  // layer -> weight directory
  int layer = 0;
  std::optional<std::filesystem::path> selection;
  std::optional<ContrastInputs> contrast;
  std::optional<std::filesystem::path> outcomes;
  std::optional<std::filesystem::path> shuffle;
  std::optional<std::filesystem::path> unembedding;
  std::optional<std::filesystem::path> categories;
  std::map<std::string, std::uint64_t> seeds;

  std::size_t bootstrap_resamples = 2000;
  std::size_t resample_draws = 1000;
  std::size_t resample_draw_size = 30;
  std::size_t random_draws = 1;  // 1 = one fixed draw; more = average over draws
  std::size_t k = 3;
  double med_rate_min = 0.70;
  double non_rate_max = 0.10;
  PoolMode pool = PoolMode::max;
  std::string judge;  // empty: every judge must be correct

  std::size_t top_k = 20;
  std::size_t scaffold_features = 30;
  std::size_t ablation_features = 3;

  std::vector<int> probe_layers;
  std::vector<std::pair<Condition, Condition>> transitions;
  std::size_t permutation_iterations = 1000;
  double l2 = 1.0;
  bool standardize = true;

  unsigned workers = 1;
  std::filesystem::path output_dir = "reports";

  nlohmann::json canonical;  // effective config, paths as written
};

// Reads a JSON config, applies `overrides` (a JSON merge patch built from
// command-line flags), and resolves relative paths against the config file's
// directory. Flag paths should already be absolute.
RunConfig load_config(const std::filesystem::path& path, const nlohmann::json& overrides = nlohmann::json::object());
RunConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);

// CRC-32C of the canonical config, ignoring keys that cannot change results
// (worker count, output directory).
std::string config_hash(const RunConfig& config);

// Named seed; throws when the config does not set it.
std::uint64_t seed(const RunConfig& config, const std::string& name);

struct Report {
  std::string name;
  nlohmann::json body;
  std::string text;
};

class Pipeline {
 public:
  explicit Pipeline(RunConfig config);
  ~Pipeline();

  Report identify_features();
  Report invariance();
  Report direction();
  Report attribute();
  Report behavior();
  Report shuffle();
  Report probe();

  // Runs every stage whose inputs are configured and writes bundle.json/.txt.
  Report bundle();

  // Writes <name>.json and <name>.txt under the output directory.
  void write(const Report& report) const;

  const RunConfig& config() const { return config_; }

 private:
  struct Cache;

  Report finish(std::string name, nlohmann::json results, std::string text) const;
  const std::vector<ActivationDump>& dumps(Condition c, int layer);
  const Sae& sae(int layer);
  const std::vector<CaseOutcome>& outcomes();
  const FeatureSelection& selection();

  RunConfig config_;
  std::unique_ptr<Cache> cache_;
};

// Stage names in bundle order.
const std::vector<std::string>& stage_names();

}  // namespace fprb
