#include "fprb/sae.hpp"

#include <fstream>

#include "fprb/actstore.hpp"
#include "fprb/stats.hpp"

namespace fprb {

std::string to_string(SaeVariant v) { return v == SaeVariant::jump_relu ? "jump_relu" : "top_k"; }

SaeVariant parse_sae_variant(const std::string& text) {
  if (text == "jump_relu" || text == "JumpReLU") return SaeVariant::jump_relu;
  if (text == "top_k" || text == "TopK") return SaeVariant::top_k;
  fail(ErrorKind::validation, "unknown SAE variant '" + text + "'");
}

SaeDiagnostics diagnose(const std::vector<const ResidualMatrix*>& token_sets, const Sae& params) {
  std::vector<double> errors, l0s, norms;
  for (const auto* rows : token_sets) {
    const auto acts = encode_rows(*rows, params);
    for (Eigen::Index t = 0; t < rows->rows(); ++t) {
      const Eigen::VectorXd x = rows->row(t).cast<double>().transpose();
      const double norm = x.norm();
      if (norm == 0.0) continue;
      Eigen::VectorXd rec = params.decoder_bias.cast<double>();
      std::size_t active = 0;
      for (Eigen::Index f = 0; f < acts.cols(); ++f) {
        const double a = acts(t, f);
        if (a > 0.0) {
          rec += a * params.decoder.row(f).cast<double>().transpose();
          ++active;
        }
      }
      errors.push_back((x - rec).norm() / norm);
      l0s.push_back(static_cast<double>(active));
      norms.push_back(norm);
    }
  }
  require(!errors.empty(), "diagnose: no nonzero tokens");
  SaeDiagnostics d;
  d.tokens = errors.size();
  d.error_mean = mean(errors);
  d.error_median = median(errors);
  d.l0_mean = mean(l0s);
  d.l0_median = median(l0s);
  d.l0_p5 = percentile(l0s, 0.05);
  d.l0_p95 = percentile(l0s, 0.95);
  d.residual_norm_mean = mean(norms);
  d.residual_norm_median = median(norms);
  return d;
}

namespace {

Eigen::VectorXf as_vector(const Tensor& t, const std::filesystem::path& path) {
  if (t.values.cols() != 1) fail(ErrorKind::format, "expected a column vector in " + path.string(), path.string());
  return t.values.col(0);
}

}  // namespace

Sae load_sae(const std::filesystem::path& dir) {
  const auto descriptor_path = dir / "sae.json";
  std::ifstream in(descriptor_path);
  if (!in) fail(ErrorKind::io, "cannot open SAE descriptor " + descriptor_path.string(), descriptor_path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "malformed SAE descriptor: " + std::string(e.what()), descriptor_path.string());
  }
  Sae p;
  p.variant = parse_sae_variant(j.at("variant").get<std::string>());
  p.subtract_decoder_bias = j.value("subtract_decoder_bias_on_encode", p.variant == SaeVariant::jump_relu);
  p.encoder = read_tensor(dir / "W_enc.fprb").values;
  p.encoder_bias = as_vector(read_tensor(dir / "b_enc.fprb"), dir / "b_enc.fprb");
  p.decoder = read_tensor(dir / "W_dec.fprb").values;
  p.decoder_bias = as_vector(read_tensor(dir / "b_dec.fprb"), dir / "b_dec.fprb");
  if (p.variant == SaeVariant::jump_relu)
    p.threshold = as_vector(read_tensor(dir / "threshold.fprb"), dir / "threshold.fprb");
  else
    p.k = j.at("k").get<Eigen::Index>();
  if (j.contains("d_model")) require(j["d_model"].get<Eigen::Index>() == p.dim(), "SAE descriptor d_model mismatch");
  if (j.contains("d_sae")) require(j["d_sae"].get<Eigen::Index>() == p.features(), "SAE descriptor d_sae mismatch");
  p.validate();
  return p;
}

void save_sae(const Sae& p, const std::filesystem::path& dir) {
  p.validate();
  std::filesystem::create_directories(dir);
  nlohmann::json j{{"variant", to_string(p.variant)},
                   {"d_model", p.dim()},
                   {"d_sae", p.features()},
                   {"subtract_decoder_bias_on_encode", p.subtract_decoder_bias}};
  if (p.variant == SaeVariant::top_k) j["k"] = p.k;
  write_tensor(dir / "W_enc.fprb", p.encoder, {{"name", "W_enc"}});
  write_tensor(dir / "b_enc.fprb", p.encoder_bias, {{"name", "b_enc"}});
  write_tensor(dir / "W_dec.fprb", p.decoder, {{"name", "W_dec"}});
  write_tensor(dir / "b_dec.fprb", p.decoder_bias, {{"name", "b_dec"}});
  if (p.variant == SaeVariant::jump_relu) write_tensor(dir / "threshold.fprb", p.threshold, {{"name", "threshold"}});
  std::ofstream out(dir / "sae.json");
  if (!out) fail(ErrorKind::io, "cannot write SAE descriptor", (dir / "sae.json").string());
  out << j.dump(2) << '\n';
}

}  // namespace fprb
