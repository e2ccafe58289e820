#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "gpcontract/error.hpp"
#include "gpcontract/pipeline.hpp"

namespace gp = gpcontract;
namespace pl = gpcontract::pipeline;

int main(int argc, char** argv) {
  CLI::App app{"Contraction-metric controller synthesis with derivative GPs"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::string mode;
  bool quiet = false;
  app.add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--out", out_dir, "Output directory");
  app.add_option("--seed", seed, "Random seed");
  app.add_option("--mode", mode, "Synthesis mode")
      ->check(CLI::IsMember({"two-step", "joint", "polytopic"}));
  app.add_flag("--quiet", quiet, "Suppress progress output");

  auto* gen = app.add_subcommand("gen-data", "Sample noisy drift training data");
  auto* learn = app.add_subcommand("learn", "Fit the drift model");
  auto* synth = app.add_subcommand("synth", "Synthesize the controller");
  auto* verify = app.add_subcommand("verify", "Check contraction on a dense grid");
  auto* sim = app.add_subcommand("simulate", "Roll out the closed loop");
  auto* repro = app.add_subcommand("reproduce-oscillator",
                                   "Run the full oscillator pipeline");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(gp::ErrorCode::kInvalidInput);
  }

  try {
    pl::PipelineConfig cfg =
        config_path.empty() ? pl::default_config() : pl::load_config(config_path);
    if (!out_dir.empty()) cfg.out = out_dir;
    if (seed) cfg.seed = *seed;
    if (!mode.empty()) cfg.mode = gp::synthesis_mode_from_string(mode);
    cfg.quiet = quiet;

    if (gen->parsed()) return pl::cmd_gen_data(cfg);
    if (learn->parsed()) return pl::cmd_learn(cfg);
    if (synth->parsed()) return pl::cmd_synth(cfg);
    if (verify->parsed()) return pl::cmd_verify(cfg);
    if (sim->parsed()) return pl::cmd_simulate(cfg);
    if (repro->parsed()) return pl::cmd_reproduce_oscillator(cfg);
  } catch (const gp::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(gp::ErrorCode::kNumericalFailure);
  }
  return 0;
}
