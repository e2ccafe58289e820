#include "gpcontract/pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

namespace gpcontract {
namespace {

namespace fs = std::filesystem;
namespace pl = pipeline;

pl::PipelineConfig small(const std::string& name) {
  pl::PipelineConfig c = pl::default_config();
  c.out = fs::temp_directory_path() / ("gpcontract_pl_" + name);
  fs::remove_all(c.out);
  c.quiet = true;
  c.data_grid = 7;
  c.verify_resolution = 11;
  c.moment_resolution = 5;
  c.steps = 2000;
  c.initial_count = 4;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

TEST(Config, DefaultsAndOverrides) {
  const pl::PipelineConfig d = pl::parse_config(io::json::parse(R"({"version":1})"));
  EXPECT_EQ(d.system, "oscillator");
  EXPECT_EQ(d.data_grid, 11);
  EXPECT_EQ(d.controller_grid, 7);
  EXPECT_EQ(d.seed, 7u);
  EXPECT_EQ(d.synthesis.rho, 10.0);
  ASSERT_TRUE(d.baseline_gain.has_value());
  EXPECT_EQ((*d.baseline_gain)[0], -49.8);
  const auto rows = pl::fixed_rows(d);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].c, Eigen::RowVector2d(0, 1));

  const pl::PipelineConfig c = pl::parse_config(io::json::parse(R"({
    "version": 1,
    "system": {"builtin": "sine1d"},
    "controller": {"mode": "polytopic", "hull": {"subdivisions": 8},
                   "kernel": {"sigma": 0.5}},
    "simulate": {"initial_states": [[1.0], [2.0]]},
    "seed": 11
  })"));
  EXPECT_EQ(c.mode, SynthesisMode::kPolytopic);
  EXPECT_EQ(c.hull.subdivisions, 8);
  EXPECT_EQ(pl::controller_kernel(c).sigma()(0, 0), 0.5);
  EXPECT_EQ(c.initial_states.size(), 2u);
  EXPECT_EQ(c.seed, 11u);
  EXPECT_NO_THROW(pl::validate(c));
}

TEST(Config, Rejections) {
  auto bad = [](const char* text) {
    EXPECT_THROW(pl::validate(pl::parse_config(io::json::parse(text))), Error)
        << text;
  };
  bad(R"({"version": 2})");
  bad(R"({"version": 1, "colour": 1})");
  bad(R"({"version": 1, "data": {"grid": 0}})");
  bad(R"({"version": 1, "controller": {"mode": "fast"}})");
  bad(R"({"version": 1, "controller": {"model": "oracle"}})");
  bad(R"({"version": 1, "stochastic": {"c": 2}})");
  bad(R"({"version": 1, "data": {"domain": {"lower": [0], "upper": [1]}}})");
  bad(R"({"version": 1, "system": {"builtin": "pendulum"}})");
}

TEST(Commands, GenDataNoiselessMatchesVectorField) {
  pl::PipelineConfig c = small("gen0");
  c.sigma_y = 0.0;
  ASSERT_EQ(pl::cmd_gen_data(c), 0);
  const io::CsvTable t = io::read_csv(c.out / "data.csv");
  ASSERT_EQ(t.rows.size(), 49u);
  const SystemModel osc = make_oscillator();
  for (const auto& r : t.rows) {
    const Eigen::Vector2d x(r[0], r[1]);
    const Eigen::Vector2d g = (osc.drift(x) - x) / osc.euler_dt;
    EXPECT_NEAR(r[2], g[0], 1e-12);
    EXPECT_NEAR(r[3], g[1], 1e-12);
  }
}

TEST(Commands, GenDataSeededBytes) {
  pl::PipelineConfig a = small("seed_a"), b = small("seed_b"), d = small("seed_d");
  d.seed = 8;
  ASSERT_EQ(pl::cmd_gen_data(a), 0);
  ASSERT_EQ(pl::cmd_gen_data(b), 0);
  ASSERT_EQ(pl::cmd_gen_data(d), 0);
  EXPECT_EQ(slurp(a.out / "data.csv"), slurp(b.out / "data.csv"));
  EXPECT_NE(slurp(a.out / "data.csv"), slurp(d.out / "data.csv"));
}

TEST(Commands, MissingArtifactsAreInvalidInput) {
  const pl::PipelineConfig c = small("missing");
  try {
    pl::cmd_verify(c);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidInput);
  }
  EXPECT_THROW(pl::cmd_learn(c), Error);
  EXPECT_FALSE(fs::exists(c.out / "drift_model.json"));
}

TEST(Commands, EmptyTrainingData) {
  const pl::PipelineConfig c = small("empty");
  io::write_text_atomic(c.out / "data.csv", "x_1,x_2,y_1,y_2\n");
  EXPECT_THROW(pl::cmd_learn(c), Error);
}

TEST(Commands, LearnedPipelineSmall) {
  const pl::PipelineConfig c = small("learned");
  ASSERT_EQ(pl::cmd_gen_data(c), 0);
  ASSERT_EQ(pl::cmd_learn(c), 0);
  const io::json drift = io::read_json(c.out / "drift_model.json");
  EXPECT_EQ(drift["components"][0]["fixed"]["c"], io::json::parse("[0.0, 1.0]"));
  ASSERT_EQ(pl::cmd_synth(c), 0);
  EXPECT_EQ(pl::cmd_verify(c), 0);
  EXPECT_TRUE(fs::exists(c.out / "moment_ies.json"));
  EXPECT_EQ(pl::cmd_simulate(c), 0);
  const io::json sim = io::read_json(c.out / "simulate.json");
  EXPECT_TRUE(sim["controller"]["all_pass"].get<bool>());
  EXPECT_TRUE(sim.contains("baseline"));
}

TEST(Commands, SimulateFromEquilibriumIsConstant) {
  pl::PipelineConfig c = small("equilibrium");
  c.model_source = "analytic";
  c.initial_states = {Eigen::Vector2d::Zero()};
  c.steps = 100;
  c.baseline_gain.reset();
  ASSERT_EQ(pl::cmd_synth(c), 0);
  ASSERT_EQ(pl::cmd_simulate(c), 0);
  const io::CsvTable t = io::read_csv(c.out / "portrait_controller.csv");
  for (const auto& r : t.rows) {
    EXPECT_EQ(r[2], 0.0);
    EXPECT_EQ(r[3], 0.0);
  }
}

TEST(Commands, InfeasibleSynthesisExitCode) {
  // x_1 expands and is not actuated.
  pl::PipelineConfig c = pl::parse_config(io::json::parse(R"({
    "version": 1,
    "system": {"builtin": "polynomial",
               "components": [[{"coeff": 1.5, "powers": [1, 0]}],
                              [{"coeff": 0.5, "powers": [0, 1]}]],
               "b": [0.0, 1.0], "equilibrium": [0.0, 0.0]},
    "controller": {"model": "analytic", "grid": 3}
  })"));
  c.out = fs::temp_directory_path() / "gpcontract_pl_infeasible";
  fs::remove_all(c.out);
  c.quiet = true;
  EXPECT_EQ(pl::cmd_synth(c), static_cast<int>(ErrorCode::kInfeasible));
  EXPECT_TRUE(fs::exists(c.out / "synthesis_report.json"));
  EXPECT_FALSE(fs::exists(c.out / "controller.json"));
}

}  // namespace
}  // namespace gpcontract
