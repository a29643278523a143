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

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "edgecare/checkpoint.hpp"
#include "edgecare/datagen.hpp"
#include "edgecare/random.hpp"
#include "edgecare/transfer.hpp"

namespace edgecare {

// Stage settings shared by the CLI, the simulator and the acceptance suite.

struct CloudTrainingConfig {
  GeneratorSpec source = default_source_spec(0);
  std::size_t segments_per_class = 20;
  std::size_t segment_len = 24;
  double train_fraction = 0.8;
  std::size_t split_window = 8;
  FineTuneConfig train{6, 32, 0.05, 0, {}};
};

struct EdgeFineTuneConfig {
  GeneratorSpec target = default_target_spec(0);
  std::size_t windows_per_class = 60;  // ground-labeled windows recorded in the home
  std::size_t window_len = 8;
  double train_fraction = 0.5;         // 30 windows/class for training by default
  FreezePolicy policy = preset_policy("case3");
  FineTuneConfig tune{20, 16, 0.05, 0, {}};
};

// Salts for deriving per-stage seeds from one run seed.
enum class SeedSalt : std::uint64_t {
  kSourceData = 1,
  kSourceSplit,
  kInit,
  kTrain,
  kTargetData,
  kTargetSplit,
  kHead,
  kFineTune,
  kStream,
};

inline std::uint64_t stage_seed(std::uint64_t seed, SeedSalt salt) {
  return derive_seed(seed, static_cast<std::uint64_t>(salt));
}

inline LabeledStream source_dataset(const CloudTrainingConfig& cfg, std::uint64_t seed) {
  GeneratorSpec spec = cfg.source;
  spec.seed = stage_seed(seed, SeedSalt::kSourceData);
  return generate(spec, balanced_segments(spec.classes.size(), cfg.segments_per_class, cfg.segment_len,
                                          stage_seed(seed, SeedSalt::kSourceData) + 1));
}

struct CloudTrainingResult {
  ModelCheckpoint checkpoint;
  std::vector<TrainStats> history;
  std::size_t best_epoch = 0;
};

// Trains the reference architecture from scratch on synthetic source data and
// keeps the epoch with the lowest held-out loss.
inline CloudTrainingResult cloud_pretrain(const CloudTrainingConfig& cfg, std::uint64_t seed) {
  const LabeledStream data = source_dataset(cfg, seed);
  auto [train, holdout] = split(data, cfg.train_fraction, stage_seed(seed, SeedSalt::kSourceSplit), cfg.split_window);
  const GeneratorSpec& spec = cfg.source;
  Model init = build_model(reference_architecture({spec.channels, spec.frame_h, spec.frame_w}, spec.classes.size()),
                           stage_seed(seed, SeedSalt::kInit));
  FineTuneConfig tc = cfg.train;
  tc.seed = stage_seed(seed, SeedSalt::kTrain);
  auto result = fine_tune(init, preset_policy("case1"), train, holdout, tc);
  ModelCheckpoint ck{kCheckpointVersion, std::move(result.best), spec.class_names(),
                     Provenance{"synthetic-source-" + std::to_string(fingerprint(spec)), result.best_epoch, seed}};
  return {std::move(ck), std::move(result.history), result.best_epoch};
}

// The home's small ground-labeled set: `windows_per_class` single-class
// windows per activity, split window-wise into train and holdout.
inline std::pair<LabeledStream, LabeledStream> edge_labeled_data(const EdgeFineTuneConfig& cfg, std::uint64_t seed) {
  GeneratorSpec spec = cfg.target;
  spec.seed = stage_seed(seed, SeedSalt::kTargetData);
  const auto segs = balanced_segments(spec.classes.size(), cfg.windows_per_class, cfg.window_len,
                                      stage_seed(seed, SeedSalt::kTargetData) + 1);
  return split(generate(spec, segs), cfg.train_fraction, stage_seed(seed, SeedSalt::kTargetSplit), cfg.window_len);
}

struct EdgeFineTuneResult {
  ModelCheckpoint checkpoint;
  FineTuneResult tuning;
  ParameterBudget budget;
};

// Realigns the class head to the home's activities and fine-tunes under the
// configured freeze policy.
inline EdgeFineTuneResult edge_fine_tune(const ModelCheckpoint& pretrained, const EdgeFineTuneConfig& cfg,
                                         const LabeledStream& train, const LabeledStream& holdout, std::uint64_t seed) {
  const auto names = cfg.target.class_names();
  Model model = realign_head(pretrained, names, stage_seed(seed, SeedSalt::kHead));
  const ParameterBudget budget = apply_freeze(model, cfg.policy);
  FineTuneConfig tc = cfg.tune;
  tc.seed = stage_seed(seed, SeedSalt::kFineTune);
  tc.target_classes = names;
  auto tuned = fine_tune(model, cfg.policy, train, holdout, tc);
  ModelCheckpoint ck{kCheckpointVersion, tuned.best, names,
                     Provenance{"home-labeled-" + std::to_string(fingerprint(cfg.target)), tuned.best_epoch, seed}};
  return {std::move(ck), std::move(tuned), budget};
}

inline json to_json(const std::vector<TrainStats>& history) {
  json out = json::array();
  for (const auto& h : history) {
    out.push_back({{"epoch", h.epoch},
                   {"mean_loss", h.mean_loss},
                   {"accuracy", h.accuracy},
                   {"holdout_loss", h.holdout_loss},
                   {"holdout_accuracy", h.holdout_accuracy}});
  }
  return out;
}

inline CloudTrainingConfig cloud_training_config_from_json(const json& j, CloudTrainingConfig base = {}) {
  try {
    if (j.contains("source")) base.source = generator_spec_from_json(j.at("source"));
    base.segments_per_class = j.value("segments_per_class", base.segments_per_class);
    base.segment_len = j.value("segment_len", base.segment_len);
    base.train_fraction = j.value("train_fraction", base.train_fraction);
    base.split_window = j.value("split_window", base.split_window);
    if (j.contains("train")) base.train = fine_tune_config_from_json(j.at("train"), base.train);
    return base;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed cloud training config: ") + e.what());
  }
}

inline EdgeFineTuneConfig edge_fine_tune_config_from_json(const json& j, EdgeFineTuneConfig base = {}) {
  try {
    if (j.contains("target")) base.target = generator_spec_from_json(j.at("target"));
    base.windows_per_class = j.value("windows_per_class", base.windows_per_class);
    base.window_len = j.value("window_len", base.window_len);
    base.train_fraction = j.value("train_fraction", base.train_fraction);
    if (j.contains("policy")) {
      const auto& p = j.at("policy");
      base.policy = p.is_string() ? preset_policy(p.get<std::string>()) : freeze_policy_from_json(p);
    }
    if (j.contains("tune")) base.tune = fine_tune_config_from_json(j.at("tune"), base.tune);
    return base;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed fine-tune config: ") + e.what());
  }
}

inline json to_json(const CloudTrainingConfig& c) {
  return {{"source", to_json(c.source)},
          {"segments_per_class", c.segments_per_class},
          {"segment_len", c.segment_len},
          {"train_fraction", c.train_fraction},
          {"split_window", c.split_window},
          {"train",
           {{"epochs", c.train.epochs}, {"batch_size", c.train.batch_size}, {"learning_rate", c.train.learning_rate}}}};
}

inline json to_json(const EdgeFineTuneConfig& c) {
  return {{"target", to_json(c.target)},
          {"windows_per_class", c.windows_per_class},
          {"window_len", c.window_len},
          {"train_fraction", c.train_fraction},
          {"policy", to_json(c.policy)},
          {"tune",
           {{"epochs", c.tune.epochs}, {"batch_size", c.tune.batch_size}, {"learning_rate", c.tune.learning_rate}}}};
}

}  // namespace edgecare
