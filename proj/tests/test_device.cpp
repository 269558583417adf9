#include <gtest/gtest.h>

#include <cmath>

#include "chainfl/device.hpp"
#include "chainfl/subchain.hpp"
#include "test_support.hpp"

namespace chainfl {
namespace {

using testing::throws_code;

DeviceProfile profile_with(LabeledDataset data, std::uint64_t id = 4) {
  DeviceProfile p;
  p.device_id = id;
  p.dataset = std::move(data);
  p.compute_delay = 2.0;
  return p;
}

TaskSpec regression_spec(std::size_t dim, int epochs, int batch) {
  TaskSpec s;
  s.model_dim = dim;
  s.init_params = ParamVector(dim, 0.0);
  s.hp = HyperParams{0.05, epochs, batch};
  return s;
}

TEST(ReportStatus, EligibilityFollowsWillingnessAndThresholds) {
  DeviceProfile p = profile_with(LabeledDataset({Sample{{1.0}, 1.0}}));
  p.battery = 0.9;
  EXPECT_TRUE(report_status(p, 3.0).eligible(0.2, 0.2));
  p.willing = false;
  const StatusRecord st = report_status(p, 3.0);
  EXPECT_FALSE(st.willing);
  EXPECT_FALSE(st.eligible(0.2, 0.2));
  p.willing = true;
  p.battery = 0.1;
  EXPECT_FALSE(report_status(p, 3.0).eligible(0.2, 0.2));
}

TEST(ReportStatus, IsAPureRead) {
  const DeviceProfile p = profile_with(LabeledDataset({Sample{{1.0}, 1.0}, Sample{{2.0}, 0.0}}));
  const StatusRecord a = report_status(p, 5.0);
  const StatusRecord b = report_status(p, 5.0);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.dataset_size, 2u);
  EXPECT_EQ(a.at, 5.0);
}

TEST(WalkStatus, StaysInsideUnitInterval) {
  DeviceProfile p = profile_with(LabeledDataset({Sample{{1.0}, 1.0}}));
  Rng rng(3);
  for (int i = 0; i < 2000; ++i) {
    walk_status(p, 0.3, rng);
    ASSERT_GE(p.battery, 0.0);
    ASSERT_LE(p.battery, 1.0);
    ASSERT_GE(p.network_quality, 0.0);
    ASSERT_LE(p.network_quality, 1.0);
  }
  const DeviceProfile before = p;
  walk_status(p, 0.0, rng);
  EXPECT_EQ(p.battery, before.battery);
}

TEST(RunLocalUpdate, HonestFullBatchEqualsOneSgdStep) {
  const auto task = generate_synthetic_regression(2, 1, 12, 3, 0.1);
  const DeviceProfile p = profile_with(task.pooled);
  const TaskSpec spec = regression_spec(3, 1, static_cast<int>(task.pooled.size()));
  const ParamVector w_brm{0.3, -0.1, 0.2};
  MemoryStore store;
  Rng rng(1);
  const LocalUpdate up = run_local_update(p, Honest{}, w_brm, spec, RoundTicket{"t", 0, 0, 0}, store, rng, 10.0);
  const ParamVector expect = sgd_step(w_brm, task.pooled, 0.05, LossKind::squared);
  const ParamVector got = store.get_params(up.tx.params_hash);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(got[i], expect[i], 1e-14);
  EXPECT_EQ(up.gradients, 1);
  EXPECT_EQ(up.tx.sender_id, "dev4");
  EXPECT_EQ(up.tx.timestamp, 12.0);
  EXPECT_EQ(up.delivery_delay, 2.0);
  EXPECT_FALSE(up.tx.signature.empty());
}

TEST(RunLocalUpdate, SignFlipStoresNegatedTrainedVector) {
  const auto task = generate_synthetic_regression(7, 1, 20, 4, 0.2);
  const DeviceProfile p = profile_with(task.pooled);
  const TaskSpec spec = regression_spec(4, 3, 5);
  MemoryStore store;
  Rng honest_rng(55);
  Rng flip_rng(55);
  const ParamVector w{1.0, 2.0, 3.0, 4.0};
  const auto honest = run_local_update(p, Honest{}, w, spec, {"t", 0, 0, 0}, store, honest_rng, 0.0);
  const auto flipped = run_local_update(p, Malicious{SignFlip{}}, w, spec, {"t", 0, 0, 0}, store, flip_rng, 0.0);
  const ParamVector a = store.get_params(honest.tx.params_hash);
  const ParamVector b = store.get_params(flipped.tx.params_hash);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(b[i], -a[i]);
}

TEST(RunLocalUpdate, ScaleMultipliesTrainedVector) {
  const ParamVector trained{1.5, -2.0};
  Rng rng(0);
  EXPECT_EQ(apply_attack(Scale{4.0}, trained, rng), (ParamVector{6.0, -8.0}));
}

TEST(RunLocalUpdate, GaussianNoiseFailsValidationOnSeparableTask) {
  int rejected = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto task = generate_synthetic_classification(seed, 10, 20, 5, 3, 3.0);
    Rng pre(seed);
    const ParamVector w_brm = local_train(task.spec.init_params, task.pooled, HyperParams{0.1, 5, 10},
                                          LossKind::cross_entropy, pre);
    const double a_tau = accuracy(w_brm, task.test).value;
    TaskSpec spec = task.spec;
    spec.hp = HyperParams{0.05, 1, 10};
    MemoryStore store;
    Rng rng = make_stream(seed, "test.noise");
    const DeviceProfile p = profile_with(task.plan.assignments[0]);
    const auto up = run_local_update(p, Malicious{GaussianNoise{10.0}}, w_brm, spec, {"t", 0, 0, 0}, store, rng, 0.0);
    const auto verdict = validate_tx(up.tx, task.test, a_tau, LossKind::cross_entropy, store);
    rejected += verdict.valid() ? 0 : 1;
  }
  EXPECT_GE(rejected, 9);
}

TEST(RunLocalUpdate, StragglerPayloadMatchesHonestOnlyDelayDiffers) {
  const auto task = generate_synthetic_regression(3, 1, 15, 2, 0.0);
  const DeviceProfile p = profile_with(task.pooled);
  const TaskSpec spec = regression_spec(2, 2, 4);
  MemoryStore store;
  Rng a(8);
  Rng b(8);
  const auto honest = run_local_update(p, Honest{}, ParamVector{0.0, 0.0}, spec, {"t", 1, 1, 0}, store, a, 3.0);
  const auto slow = run_local_update(p, Straggler{25.0}, ParamVector{0.0, 0.0}, spec, {"t", 1, 1, 0}, store, b, 3.0);
  EXPECT_EQ(honest.tx, slow.tx);
  EXPECT_EQ(slow.delivery_delay, honest.delivery_delay + 25.0);
}

TEST(RunLocalUpdate, AttacksKeepDatasetSizeAndRoundNumber) {
  const auto task = generate_synthetic_regression(4, 1, 9, 2, 0.0);
  const DeviceProfile p = profile_with(task.pooled);
  const TaskSpec spec = regression_spec(2, 1, 3);
  MemoryStore store;
  const std::vector<Behavior> behaviors{Honest{}, Straggler{1.0}, Malicious{GaussianNoise{3.0}}, Malicious{SignFlip{}},
                                        Malicious{Scale{-2.0}}};
  for (int round = 0; round < 3; ++round) {
    for (const auto& beh : behaviors) {
      Rng rng(static_cast<std::uint64_t>(round));
      const auto up = run_local_update(p, beh, ParamVector{0.0, 0.0}, spec, {"task-x", 2, round, 1}, store, rng, 0.0);
      EXPECT_EQ(up.tx.dataset_size, 9u);
      EXPECT_EQ(up.tx.round_no, round);
      EXPECT_EQ(up.tx.iteration, 2);
      EXPECT_EQ(up.tx.task_id, "task-x");
      EXPECT_TRUE(store.contains(up.tx.params_hash));
    }
  }
}

TEST(Behavior, InvalidParametersAreConfigErrors) {
  EXPECT_TRUE(throws_code([] { validate(Behavior{Straggler{0.0}}); }, errc::config));
  EXPECT_TRUE(throws_code([] { validate(Behavior{Malicious{GaussianNoise{-1.0}}}); }, errc::config));
  DeviceProfile p;
  p.battery = 1.5;
  EXPECT_TRUE(throws_code([&] { p.validate(); }, errc::config));
}

}  // namespace
}  // namespace chainfl
