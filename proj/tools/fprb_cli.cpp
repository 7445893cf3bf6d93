#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fprb/errors.hpp"
#include "fprb/pipeline.hpp"
#include "json.hpp"

namespace {

int report_error(const char* kind, const std::string& message, const std::string& subject, int code) {
  nlohmann::json rec{{"error", kind}, {"message", message}, {"exit_code", code}};
  if (!subject.empty()) rec["subject"] = subject;
  std::cerr << rec.dump() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Format-invariance analysis engine for SAE activation dumps"};
  app.set_version_flag("--version", std::string(fprb::kVersion));
  app.require_subcommand(1);

  std::string config_path, out_dir, judge, selection;
  std::optional<unsigned> workers;
  std::optional<int> layer;
  std::optional<std::size_t> resamples, iterations;
  std::optional<double> l2;
  std::vector<std::string> seeds;
  bool raw_probe = false;

  for (const auto& name : fprb::stage_names()) {
    auto* sub = app.add_subcommand(name);
    (void)sub;
  }
  app.add_subcommand("report-bundle", "run every configured stage and write bundle.json");
  for (auto* sub : app.get_subcommands({})) {
    sub->add_option("-c,--config", config_path, "run config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("-o,--out", out_dir, "output directory (overrides config)");
    sub->add_option("-j,--workers", workers, "worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--layer", layer, "SAE layer to analyse");
    sub->add_option("--seed", seeds, "NAME=VALUE, repeatable");
    sub->add_option("--bootstrap-resamples", resamples, "bootstrap resamples");
    sub->add_option("--permutation-iterations", iterations, "probe permutation iterations");
    sub->add_option("--l2", l2, "probe L2 strength");
    sub->add_flag("--raw-probe", raw_probe, "fit probes on unstandardized hidden states");
    sub->add_option("--judge", judge, "score free text with one judge instead of requiring all");
    sub->add_option("--selection", selection, "feature selection JSON (overrides config)");
  }
  for (const auto& name : fprb::stage_names()) app.get_subcommand(name)->description("run the " + name + " stage");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    namespace fs = std::filesystem;
    nlohmann::json overrides = nlohmann::json::object();
    if (!out_dir.empty()) overrides["output_dir"] = fs::absolute(out_dir).string();
    if (workers) overrides["workers"] = *workers;
    if (layer) overrides["layer"] = *layer;
    if (resamples) overrides["bootstrap"]["resamples"] = *resamples;
    if (iterations) overrides["probe"]["iterations"] = *iterations;
    if (l2) overrides["probe"]["l2"] = *l2;
    if (raw_probe) overrides["probe"]["standardize"] = false;
    if (!judge.empty()) overrides["judge"] = judge;
    if (!selection.empty()) overrides["selection"] = fs::absolute(selection).string();
    for (const auto& s : seeds) {
      const auto eq = s.find('=');
      fprb::require(eq != std::string::npos && eq > 0, "--seed expects NAME=VALUE, got '" + s + "'");
      std::uint64_t value = 0;
      try {
        std::size_t used = 0;
        value = std::stoull(s.substr(eq + 1), &used);
        fprb::require(used == s.size() - eq - 1, "bad seed value in '" + s + "'");
      } catch (const std::logic_error&) {
        fprb::fail(fprb::ErrorKind::validation, "bad seed value in '" + s + "'");
      }
      overrides["seeds"][s.substr(0, eq)] = value;
    }

    fprb::Pipeline pipeline(fprb::load_config(config_path, overrides));
    const std::string name = app.get_subcommands().front()->get_name();
    fprb::Report report;
    if (name == "report-bundle") {
      report = pipeline.bundle();
    } else {
      if (name == "identify-features") report = pipeline.identify_features();
      else if (name == "invariance") report = pipeline.invariance();
      else if (name == "direction") report = pipeline.direction();
      else if (name == "attribute") report = pipeline.attribute();
      else if (name == "behavior") report = pipeline.behavior();
      else if (name == "shuffle") report = pipeline.shuffle();
      else if (name == "probe") report = pipeline.probe();
      pipeline.write(report);
    }
    std::cout << report.text;
    return 0;
  } catch (const fprb::Error& e) {
    return report_error(fprb::to_string(e.kind()), e.what(), e.subject(), e.kind() == fprb::ErrorKind::internal ? 1 : 2);
  } catch (const std::exception& e) {
    return report_error("internal", e.what(), "", 1);
  }
}
