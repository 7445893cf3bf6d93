#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "fprb/actstore.hpp"
#include "fprb/sae.hpp"

namespace fprb {

enum class PoolMode { max, mean };

std::string_view to_string(PoolMode mode);
PoolMode parse_pool_mode(std::string_view text);

// Pooled activation of every SAE feature over one token span, plus the token
// where each feature peaks (earliest on ties, -1 when it never fires).
struct FeatureProfile {
  Eigen::VectorXd values;
  std::vector<std::int64_t> peak_token;
  PoolMode mode = PoolMode::max;
  TokenSpan span;
};

FeatureProfile profile(const ActivationDump& dump, const Sae& sae, const TokenSpan& span, PoolMode mode = PoolMode::max);

// Gated activations of one token (length F).
Eigen::VectorXd token_activations(const ActivationDump& dump, const Sae& sae, std::int64_t token);

// Per-prompt max-pooled activations over each dump's content range, one row per dump.
Eigen::MatrixXd peak_matrix(std::span<const ActivationDump> dumps, const Sae& sae, unsigned workers = 1);

}  // namespace fprb
