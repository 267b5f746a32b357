#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "nce/nce.hpp"

namespace {

nce::Json read_json(const std::string& path) {
  if (path.empty()) return nce::Json::object();
  std::ifstream in(path);
  if (!in) throw nce::Error(nce::ErrorCode::IoError, "cannot open " + path);
  try {
    return nce::Json::parse(in);
  } catch (const nce::Json::parse_error& e) {
    throw nce::Error(nce::ErrorCode::InvalidArgument, path + ": " + e.what());
  }
}

struct RunArgs {
  std::string experiment;
  std::string config;
  std::string out;
  std::string data;
  std::optional<std::uint64_t> seed;
  std::string model;
  std::vector<std::string> methods;
  std::optional<int> replicates;
  std::optional<int> epochs;
};

int run(const RunArgs& a) {
  const auto kind = nce::parse_experiment(a.experiment);
  nce::ExperimentSpec spec = nce::spec_from_json(read_json(a.config), kind);
  if (a.seed) spec.base_seed = *a.seed;
  if (!a.model.empty()) spec.model = nce::parse_model(a.model);
  if (!a.methods.empty()) {
    spec.methods.clear();
    for (const auto& m : a.methods) spec.methods.push_back(nce::parse_method(m));
  }
  if (a.replicates) spec.replicates = *a.replicates;
  if (a.epochs) spec.train.epochs = *a.epochs;
  if (!a.data.empty()) spec.data_path = a.data;

  const auto t0 = std::chrono::steady_clock::now();
  const nce::ResultTable table = nce::run_experiment(spec);
  nce::emit(table, a.out, spec.experiment);
  {
    std::ofstream cfg(std::filesystem::path(a.out) / "spec.json");
    cfg << nce::to_json(spec).dump(2) << '\n';
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  for (const auto& c : nce::summarize(table)) {
    std::cout << c.variant << ' ' << c.graph << ' ' << c.method;
    if (c.mae) std::cout << " mae=" << c.mae->mean << " se=" << (c.mae->se ? *c.mae->se : 0.0);
    if (c.weight_error) std::cout << " weight_error=" << c.weight_error->mean;
    std::cout << " satt=" << c.satt_hat.mean << '\n';
  }
  std::cerr << table.rows.size() << " rows written to " << a.out << " in " << secs << " s\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Nearly invariant causal estimation: experiments and verifiers"};
  app.require_subcommand(1);

  RunArgs ra;
  auto* run_cmd = app.add_subcommand("run", "Run an experiment and write result files");
  run_cmd->add_option("experiment", ra.experiment, "linear, diversity or csv")
      ->required()
      ->check(CLI::IsMember({"linear", "diversity", "csv"}));
  run_cmd->add_option("--config", ra.config, "JSON experiment spec (defaults when omitted)");
  run_cmd->add_option("--out", ra.out, "Output directory")->required();
  run_cmd->add_option("--data", ra.data, "CSV path for the csv experiment");
  run_cmd->add_option("--seed", ra.seed, "Base seed");
  run_cmd->add_option("--model", ra.model, "ols2, tarnet or dragonnet")
      ->check(CLI::IsMember({"ols2", "tarnet", "dragonnet"}));
  run_cmd->add_option("--methods", ra.methods, "Subset of AdjustAll NICE ICP NoAdjust");
  run_cmd->add_option("--replicates", ra.replicates, "Replicate or bootstrap count");
  run_cmd->add_option("--epochs", ra.epochs, "Training epochs");

  auto* verify = app.add_subcommand("verify", "Numerical checks of the theory");
  verify->require_subcommand(1);
  int trials = 1000;
  std::uint64_t vseed = 0;
  auto* collider = verify->add_subcommand("collider", "Coarsening bound on collider bias");
  collider->add_option("--trials", trials, "Random distributions to test")->check(CLI::PositiveNumber);
  collider->add_option("--seed", vseed, "Seed");
  std::string overlap_cfg;
  auto* overlap = verify->add_subcommand("overlap", "Treated rate inside representation bins");
  overlap->add_option("--config", overlap_cfg, "JSON overlap spec");

  std::string standin_path;
  std::uint64_t standin_seed = 0;
  auto* standin = app.add_subcommand("standin", "Write the synthetic stand-in CSV for the csv experiment");
  standin->add_option("path", standin_path, "Output CSV")->required();
  standin->add_option("--seed", standin_seed, "Seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (run_cmd->parsed()) return run(ra);
    if (collider->parsed()) {
      const auto rep = nce::verify_collider_theorem(trials, vseed);
      std::cout << nce::to_json(rep).dump(2) << '\n';
      return rep.passed() ? 0 : 2;
    }
    if (overlap->parsed()) {
      const auto rep = nce::run_overlap_verification(nce::overlap_spec_from_json(read_json(overlap_cfg)));
      std::cout << nce::to_json(rep).dump(2) << '\n';
      return rep.passed() ? 0 : 2;
    }
    if (standin->parsed()) {
      nce::write_standin_csv(standin_path, standin_seed);
      return 0;
    }
  } catch (const nce::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
