#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fprb/actstore.hpp"
#include "fprb/behavior.hpp"
#include "json.hpp"

namespace fprb {

// Last-token hidden states of one source condition and layer, with flip labels.
struct ProbeDataset {
  Eigen::MatrixXd X;  // cases x dim
  std::vector<int> y;
  std::vector<std::string> case_ids;
  int layer = 0;
  std::string transition;  // e.g. "NL->NF"

  std::size_t positives() const;
  void validate() const;
};

// y_i = 1 iff correctness differs between the two conditions.
std::vector<int> build_flip_labels(const std::vector<bool>& source, const std::vector<bool>& target);
std::vector<int> build_flip_labels(std::span<const CaseOutcome> outcomes, Condition source, Condition target,
                                   const ScoringRule& rule = {});

// Decision-token rows of `dumps`, labelled from `outcomes` (matched by case id).
ProbeDataset assemble_probe_dataset(std::span<const ActivationDump> dumps, std::span<const CaseOutcome> outcomes,
                                    Condition source, Condition target, const ScoringRule& rule = {});

struct ProbeOptions {
  double l2 = 1.0;  // penalty (l2 / 2) * |w|^2, intercept unpenalized
  bool balanced = true;
  bool standardize = true;  // per-dimension, fit on each training fold
  double tolerance = 1e-8;  // gradient norm
  int max_iterations = 100;
  unsigned workers = 1;
};

// Fold designs depend only on X, so permutation runs reuse them.
class LoocvProbe {
 public:
  LoocvProbe(const Eigen::MatrixXd& X, const ProbeOptions& options);

  // Out-of-fold decision values for labels y.
  Eigen::VectorXd scores(std::span<const int> y) const;

  std::size_t size() const { return folds_.size(); }

 private:
  struct Fold {
    Eigen::MatrixXd design;  // training rows in the solver basis
    Eigen::VectorXd test;    // held-out row in the same basis
  };
  std::vector<Fold> folds_;
  ProbeOptions options_;
};

// Weighted L2 logistic regression by damped Newton; returns (intercept, weights).
Eigen::VectorXd fit_logistic(const Eigen::MatrixXd& Z, std::span<const int> y, std::span<const double> weights,
                             double l2, double tolerance = 1e-8, int max_iterations = 100);

double roc_auc(std::span<const double> scores, std::span<const int> y);
// Step integration of the interpolated (upper envelope) precision-recall curve.
double pr_auc(std::span<const double> scores, std::span<const int> y);

struct ProbeResult {
  int layer = 0;
  std::string transition;
  std::size_t n = 0;
  std::size_t positives = 0;
  std::vector<double> scores;
  double roc_auc = 0.5;
  double pr_auc = 0.0;
  double prevalence = 0.0;
  double p_roc = 1.0;
  double p_pr = 1.0;
  std::size_t iterations = 0;
  std::uint64_t seed = 0;
  double l2 = 1.0;
  bool standardized = true;
};

ProbeResult train_loocv(const ProbeDataset& data, const ProbeOptions& options = {}, std::uint64_t seed = 0);

// Permutes labels and reruns LOOCV; p = (1 + #{perm >= observed}) / (iterations + 1).
ProbeResult permutation_test(const ProbeDataset& data, std::size_t iterations, std::uint64_t seed,
                             const ProbeOptions& options = {});

void to_json(nlohmann::json& j, const ProbeResult& r);

}  // namespace fprb
