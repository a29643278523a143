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

#include <algorithm>
#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "edgecare/checkpoint.hpp"
#include "edgecare/datagen.hpp"
#include "edgecare/error.hpp"
#include "edgecare/nn.hpp"
#include "edgecare/random.hpp"

namespace edgecare {

// ---------------------------------------------------------------------------
// Reference architecture
// ---------------------------------------------------------------------------

inline constexpr int kHeadBlock = 6;

// Five blocks. Blocks 1-4 are conv3x3 -> batchnorm -> relu -> maxpool 2x2
// with widths 16/32/64/128; block 5 is two batchnorm -> relu -> conv3x3
// units (128 -> 256 -> 256). Global average pooling and a dense head
// follow. Needs frames of at least 16x16.
inline Architecture reference_architecture(InputShape input = {1, 16, 16}, std::size_t num_classes = 5) {
  Architecture a{input, {}};
  const std::size_t widths[] = {16, 32, 64, 128};
  std::size_t in = input.channels;
  for (int b = 1; b <= 4; ++b) {
    const std::string p = "block" + std::to_string(b) + "_";
    const std::size_t out = widths[b - 1];
    a.layers.push_back({p + "conv", b, Conv2dSpec{in, out, 3, 3, 1, 1}});
    a.layers.push_back({p + "bn", b, BatchNormSpec{out}});
    a.layers.push_back({p + "relu", b, ReluSpec{}});
    a.layers.push_back({p + "pool", b, MaxPool2dSpec{2, 2}});
    in = out;
  }
  a.layers.push_back({"block5_bn1", 5, BatchNormSpec{128}});
  a.layers.push_back({"block5_relu1", 5, ReluSpec{}});
  a.layers.push_back({"block5_conv1", 5, Conv2dSpec{128, 256, 3, 3, 1, 1}});
  a.layers.push_back({"block5_bn2", 5, BatchNormSpec{256}});
  a.layers.push_back({"block5_relu2", 5, ReluSpec{}});
  a.layers.push_back({"block5_conv2", 5, Conv2dSpec{256, 256, 3, 3, 1, 1}});
  a.layers.push_back({"head_gap", kHeadBlock, GlobalAvgPoolSpec{}});
  a.layers.push_back({"head_dense", kHeadBlock, DenseSpec{256, num_classes}});
  return a;
}

inline Model build_model(const Architecture& arch, std::uint64_t seed) {
  Rng rng(seed);
  return Model::build(arch.input, arch.layers, rng);
}

// ---------------------------------------------------------------------------
// Freeze policies and parameter budgets
// ---------------------------------------------------------------------------

enum class FreezeMode { kNone, kFreezeBlocks, kFreezeLayers };

// A layer is frozen when its block is listed or its name is listed.
struct FreezePolicy {
  FreezeMode mode = FreezeMode::kNone;
  std::set<int> frozen_block_ids;
  std::set<std::string> frozen_layer_names;
};

struct ParameterBudget {
  std::size_t total = 0;
  std::size_t trainable = 0;
  std::size_t frozen = 0;
  double trainable_fraction = 0.0;

  static ParameterBudget from_counts(std::size_t trainable, std::size_t total) {
    if (trainable > total) throw InvariantError("trainable count exceeds total");
    return {total, trainable, total - trainable,
            total > 0 ? static_cast<double>(trainable) / static_cast<double>(total) : 0.0};
  }
};

// Reference counts for the three preset cases, printed next to the computed ones.
struct ReportedBudget {
  const char* policy;
  std::size_t trainable;
  std::size_t total;
};
inline constexpr ReportedBudget kReportedBudgets[] = {
    {"case1", 1223373, 1223373}, {"case2", 497000, 1223373}, {"case3", 264369, 1223373}};

inline FreezePolicy preset_policy(const std::string& name) {
  if (name == "case1") return {FreezeMode::kNone, {}, {}};
  if (name == "case2") return {FreezeMode::kFreezeBlocks, {1, 2, 3, 4}, {}};
  if (name == "case3") {
    return {FreezeMode::kFreezeBlocks, {1, 2, 3, 4}, {"block5_bn1", "block5_relu1", "block5_conv1"}};
  }
  throw ConfigError("unknown freeze preset '" + name + "' (expected case1, case2 or case3)");
}

inline FreezePolicy freeze_policy_from_json(const json& j) {
  try {
    FreezePolicy p;
    const auto mode = j.value("mode", std::string("none"));
    if (mode == "none") {
      p.mode = FreezeMode::kNone;
    } else if (mode == "freeze_blocks") {
      p.mode = FreezeMode::kFreezeBlocks;
    } else if (mode == "freeze_layers") {
      p.mode = FreezeMode::kFreezeLayers;
    } else {
      throw ConfigError("unknown freeze mode '" + mode + "'");
    }
    p.frozen_block_ids = j.value("frozen_block_ids", std::set<int>{});
    p.frozen_layer_names = j.value("frozen_layer_names", std::set<std::string>{});
    return p;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed freeze policy: ") + e.what());
  }
}

inline json to_json(const FreezePolicy& p) {
  const char* mode = p.mode == FreezeMode::kNone ? "none" : p.mode == FreezeMode::kFreezeBlocks ? "freeze_blocks"
                                                                                                : "freeze_layers";
  return {{"mode", mode}, {"frozen_block_ids", p.frozen_block_ids}, {"frozen_layer_names", p.frozen_layer_names}};
}

// Checks the policy against `model` and returns the names of trainable layers.
inline LayerMask trainable_mask(const Model& model, const FreezePolicy& policy) {
  if (policy.mode == FreezeMode::kNone && (!policy.frozen_block_ids.empty() || !policy.frozen_layer_names.empty())) {
    throw ConfigError("freeze mode 'none' cannot list frozen blocks or layers");
  }
  if (policy.mode == FreezeMode::kFreezeLayers && !policy.frozen_block_ids.empty()) {
    throw ConfigError("freeze mode 'freeze_layers' cannot list frozen blocks");
  }
  std::set<int> blocks;
  for (const auto& l : model.layers()) blocks.insert(l.spec.block_id);
  for (int b : policy.frozen_block_ids) {
    if (!blocks.contains(b)) throw ConfigError("freeze policy references unknown block " + std::to_string(b));
  }
  for (const auto& name : policy.frozen_layer_names) {
    if (!model.find(name)) throw ConfigError("freeze policy references unknown layer '" + name + "'");
  }
  LayerMask mask;
  for (const auto& l : model.layers()) {
    const bool frozen =
        policy.frozen_block_ids.contains(l.spec.block_id) || policy.frozen_layer_names.contains(l.spec.name);
    if (!frozen) mask.insert(l.spec.name);
  }
  if (!mask.contains(model.layers().back().spec.name)) {
    throw ConfigError("freeze policy freezes the class head '" + model.layers().back().spec.name + "'");
  }
  return mask;
}

inline ParameterBudget apply_freeze(const Model& model, const FreezePolicy& policy) {
  const LayerMask mask = trainable_mask(model, policy);
  const auto counts = count_parameters(model);
  std::size_t trainable = 0;
  for (const auto& lc : counts.layers) {
    if (mask.contains(lc.name)) trainable += lc.trainable;
  }
  return ParameterBudget::from_counts(trainable, counts.total);
}

// ---------------------------------------------------------------------------
// Head realignment
// ---------------------------------------------------------------------------

// Keeps every layer but the last; the class head becomes a freshly
// initialized dense(in_features -> target_classes.size()).
inline Model realign_head(const ModelCheckpoint& checkpoint, const std::vector<std::string>& target_classes,
                          std::uint64_t seed) {
  if (target_classes.size() < 2) throw ConfigError("realigned head needs at least two classes");
  std::vector<Layer> layers = checkpoint.model.layers();
  Layer& head = layers.back();
  const auto in_features = std::get<DenseSpec>(head.spec.config).in_features;
  head.spec.config = DenseSpec{in_features, target_classes.size()};
  head.params.clear();
  for (const Shape& s : parameter_shapes(head.spec)) head.params.emplace_back(s);
  Rng rng(seed);
  Model::init_layer(head, rng);
  return Model::from_parts(checkpoint.model.input_shape(), std::move(layers));
}

// ---------------------------------------------------------------------------
// Fine-tuning with held-out model selection
// ---------------------------------------------------------------------------

struct FineTuneConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  std::uint64_t seed = 0;
  std::vector<std::string> target_classes;
};

inline FineTuneConfig fine_tune_config_from_json(const json& j, FineTuneConfig base = {}) {
  try {
    base.epochs = j.value("epochs", base.epochs);
    base.batch_size = j.value("batch_size", base.batch_size);
    base.learning_rate = j.value("learning_rate", base.learning_rate);
    base.seed = j.value("seed", base.seed);
    base.target_classes = j.value("target_classes", base.target_classes);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed fine-tune config: ") + e.what());
  }
  if (base.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(base.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  return base;
}

struct TrainStats {
  std::size_t epoch = 0;  // 1-based
  double mean_loss = 0.0;
  double accuracy = 0.0;
  double holdout_loss = 0.0;
  double holdout_accuracy = 0.0;
};

struct FineTuneResult {
  Model best;
  std::vector<TrainStats> history;
  std::size_t best_epoch = 0;  // 0 when no epoch ran
};

struct Evaluation {
  double mean_loss = 0.0;
  double accuracy = 0.0;
};

namespace detail {

inline constexpr std::size_t kEvalChunk = 256;

// Runs layers [first, last) over a dataset in chunks (evaluation mode).
inline Tensor forward_chunked(const Model& model, const Tensor& x, std::size_t first, std::size_t last) {
  const std::size_t n = x.dim(0);
  Tensor out;
  std::vector<double> data;
  Shape shape;
  for (std::size_t b = 0; b < n; b += kEvalChunk) {
    Tensor y = forward_range(model, x.slice_rows(b, std::min(n, b + kEvalChunk)), first, last);
    if (shape.empty()) shape = y.shape();
    data.insert(data.end(), y.values().begin(), y.values().end());
  }
  shape[0] = n;
  return Tensor(std::move(shape), std::move(data));
}

inline Evaluation evaluate_features(const Model& model, const Tensor& features, std::span<const std::size_t> labels,
                                    std::size_t first) {
  const Tensor logits = forward_chunked(model, features, first, model.layers().size());
  const std::size_t c = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (softmax(logits.values().subspan(i * c, c)).argmax() == labels[i]) ++correct;
  }
  return {mean_batch_loss(logits, labels), static_cast<double>(correct) / static_cast<double>(labels.size())};
}

inline void check_dataset(const Model& model, const LabeledStream& data, const char* which) {
  if (data.length() == 0) throw DataError(std::string(which) + " set is empty");
  if (data.frames.dim(0) != data.length()) throw DataError(std::string(which) + " frames and labels disagree");
  for (std::size_t l : data.labels) {
    if (l >= model.num_classes()) {
      throw DataError(std::string(which) + " label " + std::to_string(l) + " out of range for " +
                      std::to_string(model.num_classes()) + " classes");
    }
  }
  const Shape want = model.input_shape().per_sample();
  const Shape got(data.frames.shape().begin() + 1, data.frames.shape().end());
  if (want != got) {
    throw ShapeError(model.layers().front().spec.name,
                     std::string(which) + " frames are " + shape_string(got) + ", model expects " + shape_string(want));
  }
}

}  // namespace detail

inline Evaluation evaluate_model(const Model& model, const LabeledStream& data) {
  detail::check_dataset(model, data, "evaluation");
  return detail::evaluate_features(model, data.frames, data.labels, 0);
}

// Mini-batch SGD on the unfrozen layers, reshuffled each epoch from
// config.seed. After every epoch the model is scored on `holdout`; the epoch
// with the lowest held-out loss is returned. The frozen prefix of the
// network runs in evaluation mode and is computed once up front.
inline FineTuneResult fine_tune(const Model& model, const FreezePolicy& policy, const LabeledStream& train,
                                const LabeledStream& holdout, const FineTuneConfig& config) {
  detail::check_dataset(model, train, "training");
  detail::check_dataset(model, holdout, "holdout");
  if (config.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(config.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  const LayerMask mask = trainable_mask(model, policy);

  FineTuneResult result{model, {}, 0};
  if (config.epochs == 0) return result;

  const auto& layers = model.layers();
  std::size_t first = 0;
  while (!mask.contains(layers[first].spec.name)) ++first;
  const Tensor train_features = first ? detail::forward_chunked(model, train.frames, 0, first) : train.frames;
  const Tensor holdout_features = first ? detail::forward_chunked(model, holdout.frames, 0, first) : holdout.frames;

  Model current = model;
  double best_loss = std::numeric_limits<double>::infinity();
  const std::size_t n = train.length();
  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(config.seed, epoch));
    rng.shuffle(order);

    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < n;) {
      std::size_t e = std::min(n, b + config.batch_size);
      if (n - e == 1) e = n;  // no single-sample tail batch
      std::span<const std::size_t> idx(order.data() + b, e - b);
      std::vector<std::size_t> labels;
      for (std::size_t i : idx) labels.push_back(train.labels[i]);
      const Gradients g = backward(current, train_features.gather_rows(idx), labels, mask, first);
      sgd_step(current, g, config.learning_rate, mask);
      loss_sum += g.mean_loss * static_cast<double>(e - b);
      correct += g.correct;
      b = e;
    }
    const Evaluation held = detail::evaluate_features(current, holdout_features, holdout.labels, first);
    result.history.push_back({epoch, loss_sum / static_cast<double>(n),
                              static_cast<double>(correct) / static_cast<double>(n), held.mean_loss, held.accuracy});
    if (held.mean_loss < best_loss) {
      best_loss = held.mean_loss;
      result.best = current;
      result.best_epoch = epoch;
    }
  }
  return result;
}

}  // namespace edgecare
