#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fprb/actstore.hpp"
#include "fprb/rng.hpp"
#include "fprb/sae.hpp"

namespace fprb::testing {

// Dense Gaussian SAE with small random biases.
Sae random_sae(Stream& rng, Eigen::Index dim, Eigen::Index features, SaeVariant variant, Eigen::Index k = 0);

// JumpReLU SAE with identity encoder and decoder and zero biases, so token
// activations are the residual entries above `threshold`.
Sae identity_sae(Eigen::Index dim, float threshold = 0.0f);

// Valid dump with Gaussian residuals. Multiple-choice conditions get a scaffold mask.
ActivationDump random_dump(Stream& rng, const std::string& case_id, Condition condition, std::int64_t tokens,
                           std::int64_t dim, int layer = 0);

// Hand-built dump over explicit residual rows; the content range spans every
// token and the vignette covers [vignette_start, vignette_end).
ActivationDump make_dump(const std::string& case_id, Condition condition, const ResidualMatrix& residuals,
                         TokenSpan vignette, std::optional<TokenSpan> scaffold = std::nullopt);

// Unique scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& stem);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

// Layout of the synthetic corpus.
struct Corpus {
  static constexpr int kLayer = 2;
  static constexpr Eigen::Index kDim = 128;
  static constexpr Eigen::Index kFeatures = 96;
  static constexpr int kCases = 12;
  static constexpr int kContrastPrompts = 16;
  // Feature roles.
  static constexpr Eigen::Index kMedical[3] = {0, 1, 2};
  static constexpr Eigen::Index kLeaky = 3;    // fires on non-medical prompts too
  static constexpr Eigen::Index kPatchy = 4;   // fires on too few medical prompts
  static constexpr Eigen::Index kFlip = 30;    // decision-token feature of flipping cases
  static constexpr Eigen::Index kGenericBegin = 20;

  std::filesystem::path dir;
  std::filesystem::path config;
  std::filesystem::path missing_judges_config;  // outcomes lacking one case's judge labels
  std::string missing_judges_case;
};

// Writes SAE weights, NL/NF dumps, contrast sets, outcomes, shuffle records,
// unembedding and configs under `dir`. Fully determined by `seed`.
Corpus write_corpus(const std::filesystem::path& dir, std::uint64_t seed = 20240611);

}  // namespace fprb::testing
