/* Copyright 2026 The EdgeCare Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#include <gtest/gtest.h>

#include "edgecare/hash.hpp"
#include "edgecare/transfer.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace edgecare;

namespace {

std::vector<std::uint64_t> layer_hashes(const Model& m) {
  std::vector<std::uint64_t> out;
  for (const auto& layer : m.layers()) {
    Fnv1a h;
    for (const auto& t : layer.params) h.update(t.values());
    out.push_back(h.digest());
  }
  return out;
}

ModelCheckpoint checkpoint_of(Model m) {
  std::vector<std::string> labels;
  for (std::size_t j = 0; j < m.num_classes(); ++j) labels.push_back("c" + std::to_string(j));
  return {kCheckpointVersion, std::move(m), labels, {}};
}

// Three static poses that differ only in elevation, nearly noiseless.
GeneratorSpec separable_spec(std::uint64_t seed) {
  GeneratorSpec spec;
  spec.classes = {{"low", MotionKind::kStatic, 0.8, 7, 0.3, 0.0},
                  {"mid", MotionKind::kStatic, 0.8, 7, 0.3, 0.25},
                  {"high", MotionKind::kStatic, 0.8, 7, 0.3, 0.5}};
  spec.noise_sigma = 0.02;
  spec.seed = seed;
  return spec;
}

}  // namespace

TEST(Budget, MatchesElementEnumerationOnRandomModels) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto g = fixtures::random_grad_case(seed);
    Rng rng(derive_seed(seed, 5));
    FreezePolicy p{FreezeMode::kFreezeBlocks, {}, {}};
    for (int b = 1; b <= 3; ++b) {
      if (rng.below(2)) p.frozen_block_ids.insert(b);
    }
    for (const char* name : {"conv2", "bn3"}) {
      if (rng.below(2)) p.frozen_layer_names.insert(name);
    }
    const auto budget = apply_freeze(g.model, p);
    const auto oracle = oracle::enumerate_budget(g.model, p.frozen_block_ids, p.frozen_layer_names);
    EXPECT_EQ(budget.total, oracle.total) << "seed " << seed;
    EXPECT_EQ(budget.trainable, oracle.trainable) << "seed " << seed;
    EXPECT_EQ(budget.frozen, oracle.total - oracle.trainable);
  }
}

TEST(Budget, PresetCasesShrinkTrainableSet) {
  const Model m = build_model(reference_architecture({1, 16, 16}, 3), 1);
  const auto c1 = apply_freeze(m, preset_policy("case1"));
  const auto c2 = apply_freeze(m, preset_policy("case2"));
  const auto c3 = apply_freeze(m, preset_policy("case3"));
  EXPECT_GT(c1.trainable, c2.trainable);
  EXPECT_GT(c2.trainable, c3.trainable);
  EXPECT_EQ(c1.trainable, c1.total);
  EXPECT_EQ(c1.total, oracle::enumerate_budget(m, {}, {}).total);
  EXPECT_EQ(c3.trainable, oracle::enumerate_budget(m, {1, 2, 3, 4}, {"block5_conv1", "block5_bn1"}).trainable);
}

TEST(Budget, ReportedFractionNearTwentyOnePercent) {
  const auto b = ParameterBudget::from_counts(264369, 1223373);
  EXPECT_NEAR(b.trainable_fraction, 0.2161, 1e-4);
  EXPECT_EQ(b.frozen, 1223373u - 264369u);
  EXPECT_THROW(ParameterBudget::from_counts(2, 1), InvariantError);
}

TEST(Budget, MonotoneInFrozenSet) {
  const Model m = build_model(reference_architecture({1, 16, 16}, 3), 2);
  std::size_t previous = apply_freeze(m, preset_policy("case1")).trainable;
  FreezePolicy p{FreezeMode::kFreezeBlocks, {}, {}};
  for (int b = 1; b <= 5; ++b) {
    p.frozen_block_ids.insert(b);
    const std::size_t now = apply_freeze(m, p).trainable;
    EXPECT_LT(now, previous) << "block " << b;
    previous = now;
  }
}

TEST(Policy, InvalidPoliciesRejected) {
  const Model m = build_model(reference_architecture({1, 16, 16}, 3), 1);
  EXPECT_THROW(preset_policy("case4"), ConfigError);
  EXPECT_THROW(apply_freeze(m, {FreezeMode::kFreezeBlocks, {9}, {}}), ConfigError);
  EXPECT_THROW(apply_freeze(m, {FreezeMode::kFreezeLayers, {}, {"missing"}}), ConfigError);
  EXPECT_THROW(apply_freeze(m, {FreezeMode::kFreezeBlocks, {kHeadBlock}, {}}), ConfigError);
  EXPECT_THROW(apply_freeze(m, {FreezeMode::kNone, {1}, {}}), ConfigError);
  EXPECT_THROW(freeze_policy_from_json(json{{"mode", "thaw"}}), ConfigError);
  const auto p = preset_policy("case3");
  const auto back = freeze_policy_from_json(to_json(p));
  EXPECT_EQ(back.frozen_block_ids, p.frozen_block_ids);
  EXPECT_EQ(back.frozen_layer_names, p.frozen_layer_names);
}

TEST(Realign, SameLabelSpaceKeepsBodyWeights) {
  const auto ck = checkpoint_of(build_model(reference_architecture({1, 16, 16}, 3), 4));
  const Model m = realign_head(ck, ck.label_space, 9);
  const auto a = layer_hashes(m), b = layer_hashes(ck.model);
  for (std::size_t i = 0; i + 1 < a.size(); ++i) EXPECT_EQ(a[i], b[i]) << m.layers()[i].spec.name;
}

TEST(Realign, NewHeadChangesCountByHeadDelta) {
  const auto ck = checkpoint_of(build_model(reference_architecture({1, 16, 16}, 5), 4));
  const Model m = realign_head(ck, {"fall", "call_for_help", "resting"}, 9);
  const std::size_t in = 256;
  EXPECT_EQ(count_parameters(ck.model).total - count_parameters(m).total, (in * 5 + 5) - (in * 3 + 3));
  EXPECT_EQ(forward(m, Tensor({2, 1, 16, 16})).dim(1), 3u);
  EXPECT_THROW(realign_head(ck, {"one"}, 9), ConfigError);
}

TEST(FineTune, ZeroEpochsReturnsInputModel) {
  const auto spec = separable_spec(1);
  const auto data = generate(spec, balanced_segments(3, 4, 8, 1));
  const Model m = build_model(reference_architecture({1, 16, 16}, 3), 3);
  const auto r = fine_tune(m, preset_policy("case3"), data, data, {0, 16, 0.05, 1, {}});
  EXPECT_EQ(layer_hashes(r.best), layer_hashes(m));
  EXPECT_TRUE(r.history.empty());
  EXPECT_EQ(r.best_epoch, 0u);
}

TEST(FineTune, FrozenLayersBitwiseUnchanged) {
  const auto data = generate(default_target_spec(2), balanced_segments(3, 6, 8, 2));
  const auto [train, holdout] = split(data, 0.5, 2);
  const Model m = build_model(reference_architecture({1, 16, 16}, 3), 5);
  for (const char* preset : {"case2", "case3"}) {
    const auto policy = preset_policy(preset);
    const auto r = fine_tune(m, policy, train, holdout, {3, 16, 0.05, 7, {}});
    const auto mask = trainable_mask(m, policy);
    const auto before = layer_hashes(m), after = layer_hashes(r.best);
    bool any_trained_changed = false;
    for (std::size_t i = 0; i < before.size(); ++i) {
      const auto& name = m.layers()[i].spec.name;
      if (!mask.contains(name)) EXPECT_EQ(before[i], after[i]) << preset << " " << name;
      if (mask.contains(name) && before[i] != after[i]) any_trained_changed = true;
    }
    EXPECT_TRUE(any_trained_changed) << preset;
  }
}

TEST(FineTune, SelectsEpochWithLowestHoldoutLoss) {
  const auto data = generate(default_target_spec(3), balanced_segments(3, 6, 8, 3));
  const auto [train, holdout] = split(data, 0.5, 3);
  const Model m = build_model(reference_architecture({1, 16, 16}, 3), 6);
  const auto r = fine_tune(m, preset_policy("case3"), train, holdout, {5, 16, 0.05, 8, {}});
  ASSERT_EQ(r.history.size(), 5u);
  ASSERT_GE(r.best_epoch, 1u);
  for (const auto& h : r.history) EXPECT_LE(r.history[r.best_epoch - 1].holdout_loss, h.holdout_loss);
  EXPECT_DOUBLE_EQ(evaluate_model(r.best, holdout).mean_loss, r.history[r.best_epoch - 1].holdout_loss);
}

TEST(FineTune, DeterministicForEqualInputs) {
  const auto data = generate(default_target_spec(4), balanced_segments(3, 4, 8, 4));
  const auto [train, holdout] = split(data, 0.5, 4);
  const Model m = build_model(reference_architecture({1, 16, 16}, 3), 7);
  const auto a = fine_tune(m, preset_policy("case3"), train, holdout, {2, 16, 0.05, 9, {}});
  const auto b = fine_tune(m, preset_policy("case3"), train, holdout, {2, 16, 0.05, 9, {}});
  EXPECT_EQ(layer_hashes(a.best), layer_hashes(b.best));
  for (std::size_t e = 0; e < 2; ++e) EXPECT_EQ(a.history[e].holdout_loss, b.history[e].holdout_loss);
}

TEST(FineTune, HeadOnlyLearnsSeparableData) {
  const auto train = generate(separable_spec(10), balanced_segments(3, 20, 8, 10));
  const auto holdout = generate(separable_spec(11), balanced_segments(3, 20, 8, 11));
  // A frozen random projection of the pixels followed by a trainable head.
  Rng rng(8);
  const Model m = Model::build({1, 16, 16},
                               {{"project", 1, DenseSpec{256, 32}}, {"relu", 1, ReluSpec{}}, {"head", 2, DenseSpec{32, 3}}},
                               rng);
  const auto r = fine_tune(m, {FreezeMode::kFreezeBlocks, {1}, {}}, train, holdout, {20, 16, 0.05, 1, {}});
  EXPECT_GE(evaluate_model(r.best, holdout).accuracy, 0.9);
}

TEST(FineTune, RejectsBadDatasets) {
  const Model m = build_model(reference_architecture({1, 16, 16}, 3), 1);
  const auto ok = generate(separable_spec(1), balanced_segments(3, 1, 4, 1));
  LabeledStream empty{Tensor({0, 1, 16, 16}), {}, 0};
  EXPECT_THROW(fine_tune(m, preset_policy("case3"), empty, ok, {}), DataError);
  auto bad = ok;
  bad.labels[0] = 3;
  EXPECT_THROW(fine_tune(m, preset_policy("case3"), bad, ok, {}), DataError);
}
