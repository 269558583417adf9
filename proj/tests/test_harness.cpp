#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "chainfl/harness.hpp"
#include "test_support.hpp"

namespace chainfl {
namespace {

using nlohmann::json;
using testing::TempDir;
using testing::throws_code;

json small_regression() {
  return json{{"seed", 3},
              {"task", {{"kind", "regression"}, {"n_devices", 30}, {"samples_per_device", 12}, {"dim", 3}, {"partition", "iid"}}},
              {"M", 3},
              {"S_d", 5},
              {"E", 2},
              {"B", 4},
              {"mu", 0.05},
              {"eta", 3},
              {"lambda", 2},
              {"termination", {{"max_global_epochs", 3}}}};
}

json small_classification() {
  return json{{"seed", 1},
              {"paradigm", "fedavg"},
              {"task", {{"kind", "classification"}, {"n_devices", 40}, {"samples_per_device", 15}, {"dim", 4},
                        {"n_classes", 3}, {"partition", "iid"}}},
              {"S_d", 10},
              {"E", 2},
              {"B", 5},
              {"mu", 0.1},
              {"termination", {{"max_global_epochs", 15}}}};
}

std::size_t count_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line)) ++n;
  return n;
}

TEST(DefaultRoundTimeout, ThreeTurnarounds) {
  ScenarioConfig c;
  c.E = 5;
  c.compute_delay = 1.0;
  c.latency.intra_shard = {1.0, 2.0};
  EXPECT_DOUBLE_EQ(default_round_timeout(c), 27.0);
}

TEST(BuildWorld, RolesFollowRatiosAndSeed) {
  auto j = small_regression();
  j["M_d"] = 0.2;
  j["straggler_ratio"] = 0.1;
  const auto w = build_world(parse_scenario(j));
  int mal = 0;
  int str = 0;
  for (const auto& d : w.devices) {
    mal += std::holds_alternative<Malicious>(d.behavior);
    str += std::holds_alternative<Straggler>(d.behavior);
  }
  EXPECT_EQ(mal, 6);
  EXPECT_EQ(str, 3);
  const auto again = build_world(parse_scenario(j));
  for (std::size_t i = 0; i < w.devices.size(); ++i) {
    EXPECT_EQ(w.devices[i].behavior.index(), again.devices[i].behavior.index());
    EXPECT_EQ(w.devices[i].profile.dataset, again.devices[i].profile.dataset);
  }
}

TEST(ChainflRun, GradientsGrowBySdTimesEPerEpochWithOneShard) {
  auto j = small_regression();
  j["M"] = 1;
  j["task"]["n_devices"] = 10;
  j["termination"] = {{"max_global_epochs", 4}};
  const auto res = run_chainfl(parse_scenario(j));
  ASSERT_TRUE(res.errors.empty()) << res.errors.front();
  ASSERT_EQ(res.rows.size(), 4u);
  for (std::size_t k = 0; k < res.rows.size(); ++k) {
    EXPECT_EQ(res.rows[k].gradients, (k + 1) * 5u * 2u);
    EXPECT_EQ(res.rows[k].global_epoch, static_cast<int>(k + 1));
  }
}

TEST(ChainflRun, ThreeShardsDoAtLeastOneIterationEachPerEpoch) {
  json j = small_regression();
  j["task"]["n_devices"] = 60;
  j["S_d"] = 10;
  j["E"] = 5;
  j["termination"] = {{"max_global_epochs", 1}};
  const auto res = run_chainfl(parse_scenario(j));
  ASSERT_TRUE(res.errors.empty());
  ASSERT_EQ(res.rows.size(), 1u);
  EXPECT_GE(res.rows[0].gradients, 150u);
  EXPECT_EQ(res.gradients % 5u, 0u);
  EXPECT_EQ(res.gradients, res.trainings * 5u);
}

TEST(ChainflRun, SingleShardGreedyConfigurationMatchesFedAvg) {
  auto j = small_regression();
  j["M"] = 1;
  j["task"]["n_devices"] = 20;
  j["S_d"] = 10;
  j["lambda"] = 1;
  j["eta"] = 2;
  j["F"] = "inf";
  j["a_tau"] = -1e300;
  j["termination"] = {{"max_global_epochs", 6}};
  const auto chain = run_chainfl(parse_scenario(j));
  j["paradigm"] = "fedavg";
  const auto fed = run_fedavg(parse_scenario(j));
  ASSERT_TRUE(chain.errors.empty());
  ASSERT_EQ(chain.rows.size(), fed.rows.size());
  for (std::size_t k = 0; k < chain.rows.size(); ++k) {
    EXPECT_NEAR(chain.rows[k].loss, fed.rows[k].loss, 1e-9 * std::max(1.0, fed.rows[k].loss)) << "epoch " << k + 1;
  }
  for (std::size_t i = 0; i < fed.final_model.dim(); ++i) EXPECT_NEAR(chain.final_model[i], fed.final_model[i], 1e-9);
}

TEST(ChainflRun, SameSeedSameTraceAndMetrics) {
  auto j = small_regression();
  j["M_d"] = 0.2;
  const auto a = run_chainfl(parse_scenario(j));
  const auto b = run_chainfl(parse_scenario(j));
  EXPECT_EQ(a.trace.lines(), b.trace.lines());
  EXPECT_EQ(a.dag_export, b.dag_export);
  ASSERT_EQ(a.rows.size(), b.rows.size());
  for (std::size_t k = 0; k < a.rows.size(); ++k) EXPECT_EQ(a.rows[k].loss, b.rows[k].loss);
  j["seed"] = 4;
  EXPECT_NE(run_chainfl(parse_scenario(j)).trace.lines(), a.trace.lines());
}

TEST(FedAvgRun, GradientsAreExactMultiples) {
  auto j = small_classification();
  j["termination"] = {{"max_global_epochs", 5}};
  const auto res = run_fedavg(parse_scenario(j));
  ASSERT_EQ(res.rows.size(), 5u);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(res.rows[k].gradients, (k + 1) * 10u * 2u);
}

TEST(FedAvgRun, SingleDeviceEpochIsOneLocalTraining) {
  auto j = small_classification();
  j["task"]["n_devices"] = 1;
  j["S_d"] = 1;
  j["termination"] = {{"max_global_epochs", 1}};
  const auto cfg = parse_scenario(j);
  const auto res = run_fedavg(cfg);
  const World w = build_world(cfg);
  Rng rng = training_stream(cfg.seed, w.devices[0]);
  const ParamVector expect = local_train(w.spec.init_params, w.devices[0].profile.dataset, w.spec.hp, w.spec.loss_kind, rng);
  ASSERT_EQ(res.final_model.dim(), expect.dim());
  for (std::size_t i = 0; i < expect.dim(); ++i) EXPECT_NEAR(res.final_model[i], expect[i], 1e-15);
}

TEST(ChainflRun, NoRowsAfterTheStoppingRow) {
  auto j = small_regression();
  j["termination"] = {{"metric", "loss"}, {"threshold", 0.01}};
  const auto res = run_chainfl(parse_scenario(j));
  ASSERT_TRUE(res.stopped);
  ASSERT_FALSE(res.rows.empty());
  EXPECT_LE(res.rows.back().loss, 0.01);
  for (std::size_t k = 0; k + 1 < res.rows.size(); ++k) EXPECT_GT(res.rows[k].loss, 0.01);
  for (std::size_t k = 1; k < res.rows.size(); ++k) EXPECT_GE(res.rows[k].gradients, res.rows[k - 1].gradients);
}

TEST(FedAvgRun, MaliciousDevicesHurtWithoutValidation) {
  int worse = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    auto j = small_classification();
    j["seed"] = seed;
    const double clean = run_fedavg(parse_scenario(j)).rows.back().metric_value;
    j["M_d"] = 0.3;
    const double attacked = run_fedavg(parse_scenario(j)).rows.back().metric_value;
    worse += attacked < clean;
  }
  EXPECT_GE(worse, 8);
}

TEST(AsynflRun, SingleDeviceIsARunningMidpoint) {
  auto j = small_regression();
  j["paradigm"] = "asynfl";
  j["task"]["n_devices"] = 1;
  j["S_d"] = 1;
  j["M"] = 1;
  j["termination"] = {{"max_global_epochs", 5}};
  const auto cfg = parse_scenario(j);
  const auto res = run_asynfl(cfg);
  ASSERT_EQ(res.rows.size(), 5u);

  World w = build_world(cfg);
  DeviceAgent agent = w.devices[0];
  ParamVector global = w.spec.init_params;
  for (int k = 0; k < 5; ++k) {
    Rng rng = training_stream(cfg.seed, agent);
    ++agent.trainings;
    const ParamVector local = local_train(global, agent.profile.dataset, w.spec.hp, w.spec.loss_kind, rng);
    for (std::size_t i = 0; i < global.dim(); ++i) global[i] = 0.5 * (global[i] + local[i]);
    EXPECT_NEAR(res.rows[static_cast<std::size_t>(k)].loss, evaluate_loss(global, w.task.test, w.spec.loss_kind).value,
                1e-12);
  }
  for (std::size_t i = 0; i < global.dim(); ++i) EXPECT_NEAR(res.final_model[i], global[i], 1e-12);
}

TEST(AsynflRun, TraceIsReproducibleAndVersionsAreCausal) {
  auto j = small_regression();
  j["paradigm"] = "asynfl";
  j["termination"] = {{"max_global_epochs", 30}};
  const auto a = run_asynfl(parse_scenario(j));
  const auto b = run_asynfl(parse_scenario(j));
  EXPECT_EQ(a.trace.lines(), b.trace.lines());
  for (const auto& r : a.trace.records_of("arrival")) {
    const int trained_on = r["payload"]["trained_on"].get<int>();
    EXPECT_GE(trained_on, 0);
    EXPECT_LT(trained_on, r["payload"]["epoch"].get<int>());
  }
}

TEST(EmitMetrics, EmptyStreamIsHeaderOnly) {
  TempDir dir("metrics");
  emit_metrics({}, dir.path() / "m.csv");
  std::ifstream in(dir.path() / "m.csv");
  std::stringstream body;
  body << in.rdbuf();
  EXPECT_EQ(body.str(), std::string(kMetricsHeader) + "\n");
}

TEST(EmitMetrics, OneLinePerRow) {
  std::vector<MetricsRow> rows(3);
  rows[1].global_epoch = 2;
  rows[1].metric_value = 0.25;
  std::ostringstream out;
  write_metrics(rows, out);
  std::istringstream lines(out.str());
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) ++n;
  EXPECT_EQ(n, 4);
  EXPECT_NE(out.str().find("chainfl,0,2,0,0,loss,0.25,0"), std::string::npos);
}

TEST(WriteRunOutputs, ChainflWritesAllFourFiles) {
  TempDir dir("outputs");
  auto j = small_regression();
  j["termination"] = {{"max_global_epochs", 1}};
  const auto res = run_chainfl(parse_scenario(j));
  write_run_outputs(res, dir.path());
  for (const char* f : {"metrics.csv", "trace.jsonl", "dag.jsonl", "summary.json"}) {
    EXPECT_TRUE(std::filesystem::exists(dir.path() / f)) << f;
  }
  EXPECT_EQ(count_lines(dir.path() / "metrics.csv"), res.rows.size() + 1);
  EXPECT_EQ(count_lines(dir.path() / "trace.jsonl"), res.trace.lines().size());
}

TEST(Sweep, OneCsvPerPointAndSummary) {
  TempDir dir("sweep");
  auto base = small_regression();
  base["task"]["n_devices"] = 15;
  base["termination"] = {{"max_global_epochs", 2}};
  const auto points = expand_sweep(base, {SweepAxis{"M_d", {0.0, 0.2}}},
                                   {Paradigm::chainfl, Paradigm::fedavg, Paradigm::asynfl});
  ASSERT_EQ(points.size(), 6u);
  const auto results = run_sweep(points, dir.path(), 2);
  std::size_t files = 0;
  std::size_t rows = 0;
  for (const auto& entry : std::filesystem::directory_iterator(dir.path())) files += entry.path().extension() == ".csv";
  for (std::size_t i = 0; i < points.size(); ++i) {
    EXPECT_TRUE(std::filesystem::exists(dir.path() / (points[i].label + ".csv"))) << points[i].label;
    rows += results[i].rows.size();
  }
  EXPECT_EQ(files, 7u);
  EXPECT_EQ(count_lines(dir.path() / "summary.csv"), rows + 1);
  EXPECT_EQ(points[0].label, "chainfl__M_d=0.0");
}

TEST(Sweep, DottedKeysReachNestedFields) {
  const auto points = expand_sweep(small_regression(), {SweepAxis{"task.noise_sd", {0.1, 0.5}}}, {Paradigm::fedavg});
  ASSERT_EQ(points.size(), 2u);
  EXPECT_DOUBLE_EQ(points[1].cfg.task.noise_sd, 0.5);
  EXPECT_EQ(points[1].cfg.paradigm, Paradigm::fedavg);
  EXPECT_TRUE(throws_code([] { (void)expand_sweep(small_regression(), {SweepAxis{"M", {}}}, {Paradigm::chainfl}); },
                          errc::config));
}

// ---------------------------------------------------------------------------
// Configuration parsing

std::string config_error(const json& j) {
  try {
    (void)parse_scenario(j);
  } catch (const error& e) {
    EXPECT_EQ(e.code(), errc::config);
    return e.what();
  }
  return {};
}

TEST(ParseScenario, LambdaMustBeBelowEta) {
  auto j = small_regression();
  j["lambda"] = 3;
  const auto msg = config_error(j);
  EXPECT_NE(msg.find("lambda"), std::string::npos) << msg;
}

TEST(ParseScenario, UnknownKeysNameTheirPath) {
  auto j = small_regression();
  j["bogus"] = 1;
  EXPECT_NE(config_error(j).find("bogus: unknown key"), std::string::npos);
  j = small_regression();
  j["task"]["colour"] = "red";
  EXPECT_NE(config_error(j).find("task.colour"), std::string::npos);
  j = small_regression();
  j["shard"] = {{"heartbeat", 1}};
  EXPECT_NE(config_error(j).find("shard.heartbeat"), std::string::npos);
}

TEST(ParseScenario, FieldLevelRejections) {
  const std::vector<std::pair<json, std::string>> cases{
      {{{"b", 4}}, "b"},
      {{{"M_d", 1.0}}, "M_d"},
      {{{"S_d", 11}}, "S_d"},
      {{{"E", "five"}}, "E"},
      {{{"F", -1}}, "F"},
      {{{"faults", json::array({{{"node", "s0.n0"}}})}}, "faults[0]"},
      {{{"termination", {{"max_global_epochs", nullptr}, {"metric", "accuracy"}, {"threshold", 0.9}}}}, "termination.metric"},
      {{{"latency", {{"intra_shard", json::array({2.0, 1.0})}}}}, "latency"},
  };
  for (const auto& [patch, field] : cases) {
    auto j = small_regression();
    j.merge_patch(patch);
    const auto msg = config_error(j);
    EXPECT_EQ(msg.rfind("config: " + field, 0), 0u) << patch.dump() << " gave '" << msg << "'";
  }
}

TEST(ParseScenario, ShippedConfigsAreValid) {
  for (const auto& entry : std::filesystem::directory_iterator(std::filesystem::path(CHAINFL_SOURCE_DIR) / "configs")) {
    EXPECT_NO_THROW((void)load_scenario(entry.path().string())) << entry.path();
  }
}

TEST(ParseScenario, RoundTripsThroughJson) {
  auto j = small_regression();
  j["a_tau"] = 0.4;
  j["F"] = 12.5;
  j["faults"] = json::array({{{"node", "s1.n0"}, {"crash_at", 10.0}, {"recover_at", 30.0}}});
  const auto cfg = parse_scenario(j);
  const auto again = parse_scenario(json::parse(to_json(cfg).dump()));
  EXPECT_EQ(to_json(again).dump(), to_json(cfg).dump());
  EXPECT_EQ(again.faults.size(), 1u);
  EXPECT_DOUBLE_EQ(*again.F, 12.5);
}

}  // namespace
}  // namespace chainfl
