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
#include <vector>

#include "edgecare/nn.hpp"
#include "edgecare/random.hpp"
#include "oracles.hpp"

namespace fixtures {

using namespace edgecare;

struct GradCase {
  Model model;
  Tensor batch;
  std::vector<std::size_t> labels;
};

// A small random network that exercises every layer kind, with a random
// batch and labels. Geometry varies with the seed.
inline GradCase random_grad_case(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 77));
  const std::size_t in_c = 1 + rng.below(2);
  const std::size_t side = 6 + rng.below(3);
  const std::size_t k = rng.below(2) ? 3 : 1;
  const std::size_t stride = 1 + rng.below(2);
  const std::size_t pad = k == 3 ? rng.below(2) : 0;
  const std::size_t c1 = 2 + rng.below(3), c2 = 2 + rng.below(3), hidden = 3 + rng.below(3);
  const std::size_t classes = 2 + rng.below(3);

  std::vector<LayerSpec> specs{
      {"conv1", 1, Conv2dSpec{in_c, c1, k, k, stride, pad}},
      {"bn1", 1, BatchNormSpec{c1}},
      {"relu1", 1, ReluSpec{}},
      {"pool1", 1, MaxPool2dSpec{2, 2}},
      {"conv2", 2, Conv2dSpec{c1, c2, 3, 3, 1, 1}},
      {"bn2", 2, BatchNormSpec{c2}},
      {"relu2", 2, ReluSpec{}},
      {"gap", 3, GlobalAvgPoolSpec{}},
      {"fc1", 3, DenseSpec{c2, hidden}},
      {"bn3", 3, BatchNormSpec{hidden}},
      {"relu3", 3, ReluSpec{}},
      {"fc2", 4, DenseSpec{hidden, classes}},
  };
  Rng init(derive_seed(seed, 78));
  GradCase g{Model::build({in_c, side, side}, specs, init), Tensor({4, in_c, side, side}), {}};
  // Non-trivial batchnorm scale/shift and running statistics.
  for (auto& layer : g.model.mutable_layers()) {
    if (layer.spec.kind() != LayerKind::kBatchNorm) continue;
    for (double& v : layer.params[0].values()) v = rng.uniform(0.5, 1.5);
    for (double& v : layer.params[1].values()) v = rng.uniform(-0.5, 0.5);
    for (double& v : layer.params[2].values()) v = rng.uniform(-0.2, 0.2);
    for (double& v : layer.params[3].values()) v = rng.uniform(0.5, 2.0);
  }
  for (double& v : g.batch.values()) v = rng.normal();
  for (std::size_t b = 0; b < 4; ++b) g.labels.push_back(static_cast<std::size_t>(rng.below(classes)));
  return g;
}

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst;  // "layer/tensor[index]"
  std::size_t checked = 0;
};

// Compares backward() against central differences for every learnable scalar,
// with all layers in training mode.
inline GradCheckResult check_gradients(GradCase& g, double h = 1e-5) {
  const LayerMask all = g.model.all_layer_names();
  const Gradients grads = backward(g.model, g.batch, g.labels, all);
  auto loss = [&] { return mean_batch_loss(forward(g.model, g.batch, all), g.labels); };
  GradCheckResult r;
  for (auto& layer : g.model.mutable_layers()) {
    const std::size_t n = trainable_tensor_count(layer.spec.kind());
    for (std::size_t k = 0; k < n; ++k) {
      const auto numeric = oracle::numeric_gradient(layer.params[k], loss, h);
      const Tensor& analytic = grads.layers.at(layer.spec.name).params[k];
      for (std::size_t i = 0; i < numeric.size(); ++i) {
        const double e = oracle::relative_error(analytic[i], numeric[i]);
        ++r.checked;
        if (e > r.max_relative_error) {
          r.max_relative_error = e;
          r.worst = layer.spec.name + "/" + std::to_string(k) + "[" + std::to_string(i) + "]";
        }
      }
    }
  }
  return r;
}

}  // namespace fixtures
