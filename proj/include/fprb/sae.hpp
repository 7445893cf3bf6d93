#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "fprb/errors.hpp"

namespace fprb {

enum class SaeVariant { jump_relu, top_k };

std::string to_string(SaeVariant v);
SaeVariant parse_sae_variant(const std::string& text);

// Sparse autoencoder weights. Shapes: encoder D x F, decoder F x D.
template <typename Scalar>
struct SaeParams {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  SaeVariant variant = SaeVariant::jump_relu;
  Matrix encoder;
  Vector encoder_bias;
  Matrix decoder;
  Vector decoder_bias;
  Vector threshold;  // JumpReLU only
  Eigen::Index k = 0;  // TopK only
  bool subtract_decoder_bias = true;

  Eigen::Index dim() const { return encoder.rows(); }
  Eigen::Index features() const { return encoder.cols(); }

  void validate() const {
    const auto D = dim(), F = features();
    require(D > 0 && F > 0, "SAE has empty encoder");
    require(encoder_bias.size() == F, "SAE encoder bias length differs from feature count");
    require(decoder.rows() == F && decoder.cols() == D, "SAE decoder shape is not F x D");
    require(decoder_bias.size() == D, "SAE decoder bias length differs from model dim");
    if (variant == SaeVariant::jump_relu) {
      require(threshold.size() == F, "JumpReLU SAE needs one threshold per feature");
      require((threshold.array() >= Scalar(0)).all(), "JumpReLU thresholds must be nonnegative");
    } else {
      require(threshold.size() == 0, "TopK SAE must not carry thresholds");
      require(k >= 1 && k <= F, "TopK k must lie in [1, F]");
    }
  }

  template <typename Other>
  SaeParams<Other> cast() const {
    SaeParams<Other> out;
    out.variant = variant;
    out.encoder = encoder.template cast<Other>();
    out.encoder_bias = encoder_bias.template cast<Other>();
    out.decoder = decoder.template cast<Other>();
    out.decoder_bias = decoder_bias.template cast<Other>();
    out.threshold = threshold.template cast<Other>();
    out.k = k;
    out.subtract_decoder_bias = subtract_decoder_bias;
    return out;
  }
};

using Sae = SaeParams<float>;

// Active features of one token, sorted by feature id; every value > 0.
template <typename Scalar>
struct SparseActivations {
  std::vector<std::pair<Eigen::Index, Scalar>> entries;
  Eigen::Index features = 0;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }

  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dense() const {
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> out = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Zero(features);
    for (auto [id, v] : entries) out(id) = v;
    return out;
  }
};

namespace detail {

// Applies the variant's gate to one row of pre-activations in place.
template <typename Scalar, typename Row>
void gate_row(const SaeParams<Scalar>& params, Row&& z) {
  const auto F = params.features();
  if (params.variant == SaeVariant::jump_relu) {
    for (Eigen::Index f = 0; f < F; ++f)
      if (!(z(f) > params.threshold(f))) z(f) = Scalar(0);
    return;
  }
  std::vector<Eigen::Index> order;
  order.reserve(static_cast<std::size_t>(F));
  for (Eigen::Index f = 0; f < F; ++f)
    if (z(f) > Scalar(0)) order.push_back(f);
  const auto keep = static_cast<std::size_t>(params.k);
  if (order.size() > keep) {
    auto before = [&z](Eigen::Index a, Eigen::Index b) { return z(a) > z(b) || (z(a) == z(b) && a < b); };
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(), before);
    order.resize(keep);
  }
  std::vector<char> kept(static_cast<std::size_t>(F), 0);
  for (auto f : order) kept[static_cast<std::size_t>(f)] = 1;
  for (Eigen::Index f = 0; f < F; ++f)
    if (!kept[static_cast<std::size_t>(f)]) z(f) = Scalar(0);
}

}  // namespace detail

// Encoder pre-activations z = (x - b_dec?) W_enc + b_enc for one token.
template <typename Scalar, typename Derived>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> pre_activations(const Eigen::MatrixBase<Derived>& x,
                                                         const SaeParams<Scalar>& params) {
  require(x.size() == params.dim(), "encode: input length differs from SAE dim");
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> xin = x.template cast<Scalar>();
  require(xin.allFinite(), "encode: non-finite input");
  if (params.subtract_decoder_bias) xin -= params.decoder_bias;
  return params.encoder.transpose() * xin + params.encoder_bias;
}

template <typename Scalar, typename Derived>
SparseActivations<Scalar> encode(const Eigen::MatrixBase<Derived>& x, const SaeParams<Scalar>& params) {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> z = pre_activations(x, params);
  detail::gate_row(params, z);
  SparseActivations<Scalar> out;
  out.features = params.features();
  for (Eigen::Index f = 0; f < z.size(); ++f)
    if (z(f) > Scalar(0)) out.entries.emplace_back(f, z(f));
  return out;
}

// Dense gated activations for every row of a token x dim matrix (T x F).
template <typename Scalar, typename Derived>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> encode_rows(const Eigen::MatrixBase<Derived>& rows,
                                                                  const SaeParams<Scalar>& params) {
  require(rows.cols() == params.dim(), "encode: input width differs from SAE dim");
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> x = rows.template cast<Scalar>();
  require(x.allFinite(), "encode: non-finite input");
  if (params.subtract_decoder_bias) x.rowwise() -= params.decoder_bias.transpose();
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> z = x * params.encoder;
  z.rowwise() += params.encoder_bias.transpose();
  for (Eigen::Index t = 0; t < z.rows(); ++t) detail::gate_row(params, z.row(t));
  return z;
}

template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> decode(const SparseActivations<Scalar>& a, const SaeParams<Scalar>& params) {
  require(a.features == params.features(), "decode: activation width differs from SAE feature count");
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> out = params.decoder_bias;
  for (auto [id, v] : a.entries) {
    require(id >= 0 && id < params.features(), "decode: feature id out of range");
    out += v * params.decoder.row(id).transpose();
  }
  return out;
}

// ||x - decode(encode(x))|| / ||x||
template <typename Scalar, typename Derived>
double reconstruction_error(const Eigen::MatrixBase<Derived>& x, const SaeParams<Scalar>& params) {
  const Eigen::VectorXd xd = x.template cast<double>();
  const double norm = xd.norm();
  require(norm > 0.0, "reconstruction_error: zero-norm input");
  const Eigen::VectorXd rec = decode(encode(x, params), params).template cast<double>();
  return (xd - rec).norm() / norm;
}

template <typename Scalar, typename Derived>
std::size_t l0(const Eigen::MatrixBase<Derived>& x, const SaeParams<Scalar>& params) {
  return encode(x, params).size();
}

struct SaeDiagnostics {
  std::size_t tokens = 0;
  double error_mean = 0.0;
  double error_median = 0.0;
  double l0_mean = 0.0;
  double l0_median = 0.0;
  double l0_p5 = 0.0;
  double l0_p95 = 0.0;
  double residual_norm_mean = 0.0;
  double residual_norm_median = 0.0;
};

// Corpus aggregation over all rows of the given token matrices.
SaeDiagnostics diagnose(const std::vector<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>*>& token_sets,
                        const Sae& params);

// Weight directory: sae.json descriptor plus one tensor file per parameter.
Sae load_sae(const std::filesystem::path& dir);
void save_sae(const Sae& params, const std::filesystem::path& dir);

}  // namespace fprb
