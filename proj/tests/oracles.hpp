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

// Slow, obviously-correct reference implementations used to check the
// optimized code paths. Nothing here calls into the code under test except
// for plain data accessors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "edgecare/nn.hpp"
#include "edgecare/stream_infer.hpp"
#include "edgecare/transfer.hpp"

namespace oracle {

using edgecare::Tensor;

// Seven nested loops, zero padding by bounds check.
inline Tensor conv2d(const edgecare::Conv2dSpec& c, const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t n = x.dim(0), ih = x.dim(2), iw = x.dim(3);
  const std::size_t oh = (ih + 2 * c.padding - c.kernel_h) / c.stride + 1;
  const std::size_t ow = (iw + 2 * c.padding - c.kernel_w) / c.stride + 1;
  Tensor y({n, c.out_channels, oh, ow});
  for (std::size_t bi = 0; bi < n; ++bi)
    for (std::size_t o = 0; o < c.out_channels; ++o)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double acc = b[o];
          for (std::size_t i = 0; i < c.in_channels; ++i)
            for (std::size_t ky = 0; ky < c.kernel_h; ++ky)
              for (std::size_t kx = 0; kx < c.kernel_w; ++kx) {
                const long y0 = static_cast<long>(oy * c.stride + ky) - static_cast<long>(c.padding);
                const long x0 = static_cast<long>(ox * c.stride + kx) - static_cast<long>(c.padding);
                if (y0 < 0 || x0 < 0 || y0 >= static_cast<long>(ih) || x0 >= static_cast<long>(iw)) continue;
                acc += w[((o * c.in_channels + i) * c.kernel_h + ky) * c.kernel_w + kx] *
                       x[((bi * c.in_channels + i) * ih + static_cast<std::size_t>(y0)) * iw + static_cast<std::size_t>(x0)];
              }
          y[((bi * c.out_channels + o) * oh + oy) * ow + ox] = acc;
        }
  return y;
}

// Counts trainable scalars one element at a time. A layer is frozen when its
// block or its name is listed.
struct EnumeratedBudget {
  std::size_t total = 0;
  std::size_t trainable = 0;
};

inline EnumeratedBudget enumerate_budget(const edgecare::Model& model, const std::set<int>& frozen_blocks,
                                         const std::set<std::string>& frozen_names) {
  EnumeratedBudget out;
  for (const auto& layer : model.layers()) {
    std::size_t learnable_tensors = 0;
    switch (layer.spec.kind()) {
      case edgecare::LayerKind::kConv2d:
      case edgecare::LayerKind::kDense:
      case edgecare::LayerKind::kBatchNorm: learnable_tensors = 2; break;
      default: break;
    }
    const bool frozen = frozen_blocks.count(layer.spec.block_id) || frozen_names.count(layer.spec.name);
    for (std::size_t k = 0; k < learnable_tensors; ++k) {
      for (std::size_t i = 0; i < layer.params[k].size(); ++i) {
        ++out.total;
        if (!frozen) ++out.trainable;
      }
    }
  }
  return out;
}

// Precision at every cut-off, then for each positive the best precision at
// any later-or-equal cut-off. Quadratic.
inline double average_precision(const std::vector<double>& scores, const std::vector<int>& positive) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> order;
  std::vector<bool> used(n, false);
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t best = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (!used[i] && (best == n || scores[i] > scores[best])) best = i;
    }
    used[best] = true;
    order.push_back(best);
  }
  std::size_t total_pos = 0;
  for (int p : positive) total_pos += p != 0;
  double sum = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    if (!positive[order[k]]) continue;
    double best = 0.0;
    for (std::size_t j = k; j < n; ++j) {
      std::size_t hits = 0;
      for (std::size_t q = 0; q <= j; ++q) hits += positive[order[q]] != 0;
      best = std::max(best, static_cast<double>(hits) / static_cast<double>(j + 1));
    }
    sum += best;
  }
  return sum / static_cast<double>(total_pos);
}

// Every start s in [0, T-W] that is a stride multiple, plus T-W itself.
inline std::vector<std::size_t> covering_starts(std::size_t t, std::size_t w, std::size_t s) {
  std::vector<std::size_t> starts;
  for (std::size_t st = 0; st + w <= t; ++st) {
    if (st % s == 0 || st + w == t) starts.push_back(st);
  }
  return starts;
}

// Frame score = plain average over covering windows, visited in ascending start.
inline std::vector<std::vector<double>> frame_scores(const std::vector<std::pair<std::size_t, std::vector<double>>>& windows,
                                                     std::size_t t, std::size_t w) {
  std::vector<std::vector<double>> out;
  for (std::size_t f = 0; f < t; ++f) {
    std::vector<double> acc;
    std::size_t count = 0;
    for (std::size_t st = 0; st < t; ++st) {
      for (const auto& [start, probs] : windows) {
        if (start != st || f < start || f >= start + w) continue;
        if (acc.empty()) acc.assign(probs.size(), 0.0);
        for (std::size_t j = 0; j < probs.size(); ++j) acc[j] += probs[j];
        ++count;
      }
    }
    for (double& v : acc) v /= static_cast<double>(count);
    out.push_back(acc);
  }
  return out;
}

// Central differences of `loss` with respect to every element of `param`.
inline std::vector<double> numeric_gradient(Tensor& param, const std::function<double()>& loss, double h = 1e-5) {
  std::vector<double> g(param.size());
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double keep = param[i];
    param[i] = keep + h;
    const double up = loss();
    param[i] = keep - h;
    const double down = loss();
    param[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// Symmetric relative error with a floor that keeps near-zero gradients from
// dominating on round-off.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

}  // namespace oracle
