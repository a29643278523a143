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
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <variant>
#include <vector>

#include "edgecare/error.hpp"
#include "edgecare/random.hpp"
#include "edgecare/tensor.hpp"

namespace edgecare {

// ---------------------------------------------------------------------------
// Layer specifications
// ---------------------------------------------------------------------------

enum class LayerKind { kConv2d, kBatchNorm, kRelu, kMaxPool2d, kGlobalAvgPool, kDense };

inline const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::kConv2d: return "conv2d";
    case LayerKind::kBatchNorm: return "batchnorm";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kMaxPool2d: return "maxpool2d";
    case LayerKind::kGlobalAvgPool: return "globalavgpool";
    case LayerKind::kDense: return "dense";
  }
  return "unknown";
}

struct Conv2dSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel_h = 3;
  std::size_t kernel_w = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
  friend bool operator==(const Conv2dSpec&, const Conv2dSpec&) = default;
};

struct BatchNormSpec {
  std::size_t num_features = 0;
  double epsilon = 1e-5;
  double momentum = 0.1;
  friend bool operator==(const BatchNormSpec&, const BatchNormSpec&) = default;
};

struct ReluSpec {
  friend bool operator==(const ReluSpec&, const ReluSpec&) = default;
};

struct MaxPool2dSpec {
  std::size_t kernel = 2;
  std::size_t stride = 2;
  friend bool operator==(const MaxPool2dSpec&, const MaxPool2dSpec&) = default;
};

struct GlobalAvgPoolSpec {
  friend bool operator==(const GlobalAvgPoolSpec&, const GlobalAvgPoolSpec&) = default;
};

struct DenseSpec {
  std::size_t in_features = 0;
  std::size_t out_features = 0;
  friend bool operator==(const DenseSpec&, const DenseSpec&) = default;
};

using LayerConfig =
    std::variant<Conv2dSpec, BatchNormSpec, ReluSpec, MaxPool2dSpec, GlobalAvgPoolSpec, DenseSpec>;

struct LayerSpec {
  std::string name;
  int block_id = 0;
  LayerConfig config;

  LayerKind kind() const { return static_cast<LayerKind>(config.index()); }
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

// Shape of one sample: {channels, height, width}.
struct InputShape {
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  Shape per_sample() const { return {channels, height, width}; }
  friend bool operator==(const InputShape&, const InputShape&) = default;
};

// Number of leading parameter tensors updated by SGD. Batchnorm carries two
// more (running mean, running variance) that are state, not parameters.
inline std::size_t trainable_tensor_count(LayerKind kind) {
  switch (kind) {
    case LayerKind::kConv2d:
    case LayerKind::kBatchNorm:
    case LayerKind::kDense: return 2;
    default: return 0;
  }
}

// Shapes of every parameter tensor of a layer, trainable ones first.
inline std::vector<Shape> parameter_shapes(const LayerSpec& spec) {
  return std::visit(
      [](const auto& c) -> std::vector<Shape> {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, Conv2dSpec>) {
          return {{c.out_channels, c.in_channels, c.kernel_h, c.kernel_w}, {c.out_channels}};
        } else if constexpr (std::is_same_v<T, BatchNormSpec>) {
          return {{c.num_features}, {c.num_features}, {c.num_features}, {c.num_features}};
        } else if constexpr (std::is_same_v<T, DenseSpec>) {
          return {{c.out_features, c.in_features}, {c.out_features}};
        } else {
          return {};
        }
      },
      spec.config);
}

// Per-sample output shape of a layer, or ShapeError naming the layer.
inline Shape output_shape(const LayerSpec& spec, const Shape& in) {
  auto fail = [&](const std::string& what) { throw ShapeError(spec.name, what + ", got input " + shape_string(in)); };
  return std::visit(
      [&](const auto& c) -> Shape {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, Conv2dSpec>) {
          if (in.size() != 3 || in[0] != c.in_channels) fail("expected [" + std::to_string(c.in_channels) + ",H,W]");
          if (c.stride == 0) fail("stride must be positive");
          if (in[1] + 2 * c.padding < c.kernel_h || in[2] + 2 * c.padding < c.kernel_w) fail("kernel larger than input");
          return {c.out_channels, (in[1] + 2 * c.padding - c.kernel_h) / c.stride + 1,
                  (in[2] + 2 * c.padding - c.kernel_w) / c.stride + 1};
        } else if constexpr (std::is_same_v<T, BatchNormSpec>) {
          if (in.empty() || in[0] != c.num_features) fail("expected " + std::to_string(c.num_features) + " features");
          if (in.size() != 1 && in.size() != 3) fail("batchnorm takes [F] or [C,H,W]");
          return in;
        } else if constexpr (std::is_same_v<T, ReluSpec>) {
          return in;
        } else if constexpr (std::is_same_v<T, MaxPool2dSpec>) {
          if (in.size() != 3) fail("expected [C,H,W]");
          if (c.kernel == 0 || c.stride == 0 || in[1] < c.kernel || in[2] < c.kernel) fail("pool window does not fit");
          return {in[0], (in[1] - c.kernel) / c.stride + 1, (in[2] - c.kernel) / c.stride + 1};
        } else if constexpr (std::is_same_v<T, GlobalAvgPoolSpec>) {
          if (in.size() != 3) fail("expected [C,H,W]");
          return {in[0]};
        } else {
          if (element_count(in) != c.in_features) fail("expected " + std::to_string(c.in_features) + " input features");
          return {c.out_features};
        }
      },
      spec.config);
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct Layer {
  LayerSpec spec;
  std::vector<Tensor> params;  // trainable tensors first, then running state
};

// Set of layer names. Used both for "layers trained this step" and for
// "layers that run batchnorm in training mode".
using LayerMask = std::set<std::string>;

class Model {
 public:
  Model() = default;

  // Validates the layer chain and initializes weights from `rng`:
  // Glorot-uniform weights, zero biases, unit batchnorm scale.
  static Model build(InputShape input, std::vector<LayerSpec> specs, Rng& rng) {
    Model m;
    m.input_ = input;
    for (auto& spec : specs) {
      Layer layer{std::move(spec), {}};
      for (const Shape& s : parameter_shapes(layer.spec)) layer.params.emplace_back(s);
      init_layer(layer, rng);
      m.layers_.push_back(std::move(layer));
    }
    m.validate();
    return m;
  }

  // Builds from explicit parameter tensors (checkpoint loading). Shapes are checked.
  static Model from_parts(InputShape input, std::vector<Layer> layers) {
    Model m;
    m.input_ = input;
    m.layers_ = std::move(layers);
    m.validate();
    for (const auto& layer : m.layers_) {
      const auto shapes = parameter_shapes(layer.spec);
      if (shapes.size() != layer.params.size()) {
        throw ShapeError(layer.spec.name, "expected " + std::to_string(shapes.size()) + " parameter tensors");
      }
      for (std::size_t i = 0; i < shapes.size(); ++i) {
        if (layer.params[i].shape() != shapes[i]) {
          throw ShapeError(layer.spec.name, "parameter " + std::to_string(i) + " has shape " +
                                                shape_string(layer.params[i].shape()) + ", expected " +
                                                shape_string(shapes[i]));
        }
      }
    }
    return m;
  }

  const InputShape& input_shape() const noexcept { return input_; }
  const std::vector<Layer>& layers() const noexcept { return layers_; }
  std::vector<Layer>& mutable_layers() noexcept { return layers_; }
  std::size_t num_classes() const { return std::get<DenseSpec>(layers_.back().spec.config).out_features; }

  std::optional<std::size_t> find(const std::string& name) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (layers_[i].spec.name == name) return i;
    }
    return std::nullopt;
  }

  LayerMask all_layer_names() const {
    LayerMask names;
    for (const auto& l : layers_) names.insert(l.spec.name);
    return names;
  }

  // Per-sample shape entering each layer; entry i is the input of layer i,
  // the final entry is the model output.
  std::vector<Shape> activation_shapes() const {
    std::vector<Shape> shapes{input_.per_sample()};
    for (const auto& l : layers_) shapes.push_back(output_shape(l.spec, shapes.back()));
    return shapes;
  }

  static void init_layer(Layer& layer, Rng& rng) {
    auto glorot = [&rng](Tensor& w, double fan_in, double fan_out) {
      const double limit = std::sqrt(6.0 / (fan_in + fan_out));
      for (double& v : w.values()) v = rng.uniform(-limit, limit);
    };
    std::visit(
        [&](const auto& c) {
          using T = std::decay_t<decltype(c)>;
          if constexpr (std::is_same_v<T, Conv2dSpec>) {
            const double k = static_cast<double>(c.kernel_h * c.kernel_w);
            glorot(layer.params[0], k * c.in_channels, k * c.out_channels);
            std::fill(layer.params[1].values().begin(), layer.params[1].values().end(), 0.0);
          } else if constexpr (std::is_same_v<T, DenseSpec>) {
            glorot(layer.params[0], static_cast<double>(c.in_features), static_cast<double>(c.out_features));
            std::fill(layer.params[1].values().begin(), layer.params[1].values().end(), 0.0);
          } else if constexpr (std::is_same_v<T, BatchNormSpec>) {
            auto fill = [](Tensor& t, double v) { std::fill(t.values().begin(), t.values().end(), v); };
            fill(layer.params[0], 1.0);
            fill(layer.params[1], 0.0);
            fill(layer.params[2], 0.0);
            fill(layer.params[3], 1.0);
          }
        },
        layer.spec.config);
  }

 private:
  void validate() const {
    if (layers_.empty()) throw ConfigError("model has no layers");
    std::unordered_set<std::string> names;
    for (const auto& l : layers_) {
      if (l.spec.name.empty()) throw ConfigError("layer with empty name");
      if (!names.insert(l.spec.name).second) throw ConfigError("duplicate layer name '" + l.spec.name + "'");
      if (l.spec.block_id < 0) throw ConfigError("negative block id on layer '" + l.spec.name + "'");
    }
    if (layers_.back().spec.kind() != LayerKind::kDense) {
      throw ConfigError("final layer '" + layers_.back().spec.name + "' must be dense");
    }
    (void)activation_shapes();
  }

  InputShape input_;
  std::vector<Layer> layers_;
};

// ---------------------------------------------------------------------------
// Softmax and loss
// ---------------------------------------------------------------------------

struct ProbabilityVector {
  std::vector<double> probs;

  std::size_t size() const noexcept { return probs.size(); }
  double operator[](std::size_t i) const { return probs[i]; }

  // Lowest index among maximal entries.
  std::size_t argmax() const {
    return static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
  }

  bool is_valid(double tolerance = 1e-9) const {
    double sum = 0.0;
    for (double p : probs) {
      if (!(p >= 0.0 && p <= 1.0)) return false;
      sum += p;
    }
    return !probs.empty() && std::abs(sum - 1.0) <= tolerance;
  }
};

inline ProbabilityVector softmax(std::span<const double> logits) {
  ProbabilityVector out{std::vector<double>(logits.size())};
  if (logits.empty()) return out;
  const double peak = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    out.probs[j] = std::exp(logits[j] - peak);
    sum += out.probs[j];
  }
  for (double& p : out.probs) p /= sum;
  return out;
}

inline constexpr double kLogClamp = 1e-12;

inline double cross_entropy_loss(const ProbabilityVector& pred, std::size_t label) {
  if (label >= pred.size()) {
    throw DataError("label " + std::to_string(label) + " out of range for " + std::to_string(pred.size()) + " classes");
  }
  return -std::log(std::max(pred[label], kLogClamp));
}

// Mean loss over a [B, C] logits batch.
inline double mean_batch_loss(const Tensor& logits, std::span<const std::size_t> labels) {
  const std::size_t batch = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    total += cross_entropy_loss(softmax(logits.values().subspan(b * classes, classes)), labels[b]);
  }
  return total / static_cast<double>(batch);
}

// d(mean loss)/d(logits) = (softmax - onehot) / B.
inline Tensor softmax_cross_entropy_grad(const Tensor& logits, std::span<const std::size_t> labels) {
  const std::size_t batch = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  if (labels.size() != batch) throw DataError("label count does not match batch size");
  Tensor grad(logits.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    auto p = softmax(logits.values().subspan(b * classes, classes));
    if (labels[b] >= classes) throw DataError("label " + std::to_string(labels[b]) + " out of range");
    for (std::size_t j = 0; j < classes; ++j) {
      grad[b * classes + j] = (p[j] - (j == labels[b] ? 1.0 : 0.0)) / static_cast<double>(batch);
    }
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Forward / backward kernels
// ---------------------------------------------------------------------------

namespace detail {

struct BatchNormCache {
  std::vector<double> mean, var, inv_std;
  Tensor normalized;
  bool train = false;
};

struct LayerCache {
  Tensor input;
  std::vector<double> col;
  BatchNormCache bn;
  std::vector<std::size_t> argmax;
};

// Convolution as a matrix product. Columns are (sample, output pixel) pairs;
// rows are (input channel, kernel tap) pairs restricted to taps that touch
// the unpadded input for at least one output pixel.
struct ConvGeometry {
  std::size_t batch, in_c, in_h, in_w, out_c, out_h, out_w, kh, kw;
  std::ptrdiff_t stride, pad;
  std::vector<std::size_t> taps;  // ki * kw + kj

  std::size_t pixels() const { return out_h * out_w; }
  std::size_t cols() const { return batch * pixels(); }
  std::size_t rows() const { return in_c * taps.size(); }
};

inline ConvGeometry conv_geometry(const Conv2dSpec& c, const Shape& x) {
  ConvGeometry g{x[0], c.in_channels, x[2], x[3], c.out_channels,
                 (x[2] + 2 * c.padding - c.kernel_h) / c.stride + 1,
                 (x[3] + 2 * c.padding - c.kernel_w) / c.stride + 1,
                 c.kernel_h, c.kernel_w, static_cast<std::ptrdiff_t>(c.stride),
                 static_cast<std::ptrdiff_t>(c.padding), {}};
  auto touches = [&](std::size_t k, std::size_t out, std::size_t in) {
    for (std::size_t o = 0; o < out; ++o) {
      const std::ptrdiff_t i = static_cast<std::ptrdiff_t>(o) * g.stride - g.pad + static_cast<std::ptrdiff_t>(k);
      if (i >= 0 && i < static_cast<std::ptrdiff_t>(in)) return true;
    }
    return false;
  };
  for (std::size_t ki = 0; ki < g.kh; ++ki) {
    for (std::size_t kj = 0; kj < g.kw; ++kj) {
      if (touches(ki, g.out_h, g.in_h) && touches(kj, g.out_w, g.in_w)) g.taps.push_back(ki * g.kw + kj);
    }
  }
  return g;
}

// Calls f(row, col, input offset) for every in-bounds (row, col) entry.
template <typename F>
inline void for_each_patch_entry(const ConvGeometry& g, F&& f) {
  const std::size_t P = g.pixels();
  for (std::size_t ic = 0; ic < g.in_c; ++ic) {
    for (std::size_t t = 0; t < g.taps.size(); ++t) {
      const std::size_t row = ic * g.taps.size() + t;
      const auto ki = static_cast<std::ptrdiff_t>(g.taps[t] / g.kw);
      const auto kj = static_cast<std::ptrdiff_t>(g.taps[t] % g.kw);
      for (std::size_t b = 0; b < g.batch; ++b) {
        const std::size_t plane = (b * g.in_c + ic) * g.in_h * g.in_w;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh) * g.stride - g.pad + ki;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow) * g.stride - g.pad + kj;
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
            f(row, b * P + oh * g.out_w + ow,
              plane + static_cast<std::size_t>(ih) * g.in_w + static_cast<std::size_t>(iw));
          }
        }
      }
    }
  }
}

inline std::vector<double> im2col(const ConvGeometry& g, const Tensor& x) {
  std::vector<double> col(g.rows() * g.cols(), 0.0);
  const std::size_t n = g.cols();
  for_each_patch_entry(g, [&](std::size_t r, std::size_t c, std::size_t i) { col[r * n + c] = x[i]; });
  return col;
}

// Weights restricted to the active taps, [out_c, rows].
inline std::vector<double> gather_weights(const ConvGeometry& g, const Tensor& w) {
  const std::size_t k = g.kh * g.kw, rows = g.rows();
  std::vector<double> out(g.out_c * rows);
  for (std::size_t oc = 0; oc < g.out_c; ++oc) {
    for (std::size_t ic = 0; ic < g.in_c; ++ic) {
      for (std::size_t t = 0; t < g.taps.size(); ++t) {
        out[oc * rows + ic * g.taps.size() + t] = w[(oc * g.in_c + ic) * k + g.taps[t]];
      }
    }
  }
  return out;
}

inline Tensor conv2d_forward(const Conv2dSpec& c, const Tensor& x, const Tensor& w, const Tensor& bias,
                             std::vector<double>* col_cache) {
  const ConvGeometry g = conv_geometry(c, x.shape());
  const std::vector<double> col = im2col(g, x);
  const std::vector<double> wv = gather_weights(g, w);
  const std::size_t rows = g.rows(), n = g.cols(), P = g.pixels();
  std::vector<double> out(g.out_c * n);
  std::size_t oc = 0;
  for (; oc + 4 <= g.out_c; oc += 4) {
    double* o0 = &out[oc * n];
    double* o1 = o0 + n;
    double* o2 = o1 + n;
    double* o3 = o2 + n;
    for (std::size_t j = 0; j < n; ++j) {
      o0[j] = bias[oc];
      o1[j] = bias[oc + 1];
      o2[j] = bias[oc + 2];
      o3[j] = bias[oc + 3];
    }
    for (std::size_t r = 0; r < rows; ++r) {
      const double w0 = wv[oc * rows + r], w1 = wv[(oc + 1) * rows + r];
      const double w2 = wv[(oc + 2) * rows + r], w3 = wv[(oc + 3) * rows + r];
      const double* cr = &col[r * n];
      for (std::size_t j = 0; j < n; ++j) {
        const double v = cr[j];
        o0[j] += w0 * v;
        o1[j] += w1 * v;
        o2[j] += w2 * v;
        o3[j] += w3 * v;
      }
    }
  }
  for (; oc < g.out_c; ++oc) {
    double* o = &out[oc * n];
    for (std::size_t j = 0; j < n; ++j) o[j] = bias[oc];
    for (std::size_t r = 0; r < rows; ++r) {
      const double wr = wv[oc * rows + r];
      const double* cr = &col[r * n];
      for (std::size_t j = 0; j < n; ++j) o[j] += wr * cr[j];
    }
  }
  Tensor y({g.batch, g.out_c, g.out_h, g.out_w});
  for (std::size_t o = 0; o < g.out_c; ++o) {
    for (std::size_t b = 0; b < g.batch; ++b) {
      std::copy_n(&out[o * n + b * P], P, y.data() + (b * g.out_c + o) * P);
    }
  }
  if (col_cache) *col_cache = std::move(col);
  return y;
}

// Accumulates weight and bias gradients; returns the input gradient when requested.
inline Tensor conv2d_backward(const Conv2dSpec& c, const Tensor& x, const Tensor& w, const Tensor& dy,
                              const std::vector<double>& col, Tensor* dw, Tensor* db, bool need_dx) {
  const ConvGeometry g = conv_geometry(c, x.shape());
  const std::size_t rows = g.rows(), n = g.cols(), P = g.pixels(), k = g.kh * g.kw;
  std::vector<double> dout(g.out_c * n);
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t o = 0; o < g.out_c; ++o) {
      std::copy_n(dy.data() + (b * g.out_c + o) * P, P, &dout[o * n + b * P]);
    }
  }
  if (db) {
    for (std::size_t o = 0; o < g.out_c; ++o) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += dout[o * n + j];
      (*db)[o] += s;
    }
  }
  if (dw) {
    for (std::size_t o = 0; o < g.out_c; ++o) {
      const double* go = &dout[o * n];
      for (std::size_t r = 0; r < rows; ++r) {
        const double* cr = &col[r * n];
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += go[j] * cr[j];
        const std::size_t ic = r / g.taps.size(), t = r % g.taps.size();
        (*dw)[(o * g.in_c + ic) * k + g.taps[t]] += s;
      }
    }
  }
  if (!need_dx) return Tensor();
  const std::vector<double> wv = gather_weights(g, w);
  std::vector<double> dcol(rows * n, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double* dr = &dcol[r * n];
    std::size_t o = 0;
    for (; o + 4 <= g.out_c; o += 4) {
      const double w0 = wv[o * rows + r], w1 = wv[(o + 1) * rows + r];
      const double w2 = wv[(o + 2) * rows + r], w3 = wv[(o + 3) * rows + r];
      const double *g0 = &dout[o * n], *g1 = g0 + n, *g2 = g1 + n, *g3 = g2 + n;
      for (std::size_t j = 0; j < n; ++j) dr[j] += w0 * g0[j] + w1 * g1[j] + w2 * g2[j] + w3 * g3[j];
    }
    for (; o < g.out_c; ++o) {
      const double wo = wv[o * rows + r];
      const double* go = &dout[o * n];
      for (std::size_t j = 0; j < n; ++j) dr[j] += wo * go[j];
    }
  }
  Tensor dx(x.shape());
  for_each_patch_entry(g, [&](std::size_t r, std::size_t cidx, std::size_t i) { dx[i] += dcol[r * n + cidx]; });
  return dx;
}

// Splits an activation tensor into (batch, features, spatial) for batchnorm.
inline void bn_geometry(const Tensor& x, std::size_t& batch, std::size_t& features, std::size_t& spatial) {
  batch = x.dim(0);
  features = x.dim(1);
  spatial = x.size() / (batch * features);
}

inline Tensor batchnorm_forward(const BatchNormSpec& c, const Tensor& x, const std::vector<Tensor>& p, bool train,
                                BatchNormCache* cache) {
  std::size_t batch, features, spatial;
  bn_geometry(x, batch, features, spatial);
  const double n = static_cast<double>(batch * spatial);
  std::vector<double> mean(features), var(features), inv_std(features);
  for (std::size_t f = 0; f < features; ++f) {
    if (train) {
      double s = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* v = x.data() + (b * features + f) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) s += v[i];
      }
      mean[f] = s / n;
      double ss = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* v = x.data() + (b * features + f) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) ss += (v[i] - mean[f]) * (v[i] - mean[f]);
      }
      var[f] = ss / n;
    } else {
      mean[f] = p[2][f];
      var[f] = p[3][f];
    }
    inv_std[f] = 1.0 / std::sqrt(var[f] + c.epsilon);
  }
  Tensor y(x.shape());
  Tensor normalized = cache ? Tensor(x.shape()) : Tensor();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t f = 0; f < features; ++f) {
      const std::size_t off = (b * features + f) * spatial;
      for (std::size_t i = 0; i < spatial; ++i) {
        const double xhat = (x[off + i] - mean[f]) * inv_std[f];
        if (cache) normalized[off + i] = xhat;
        y[off + i] = p[0][f] * xhat + p[1][f];
      }
    }
  }
  if (cache) {
    cache->mean = std::move(mean);
    cache->var = std::move(var);
    cache->inv_std = std::move(inv_std);
    cache->normalized = std::move(normalized);
    cache->train = train;
  }
  return y;
}

inline Tensor batchnorm_backward(const Tensor& dy, const std::vector<Tensor>& p, const BatchNormCache& cache,
                                 Tensor* dgamma, Tensor* dbeta, bool need_dx) {
  std::size_t batch, features, spatial;
  bn_geometry(dy, batch, features, spatial);
  const double n = static_cast<double>(batch * spatial);
  Tensor dx = need_dx ? Tensor(dy.shape()) : Tensor();
  for (std::size_t f = 0; f < features; ++f) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t off = (b * features + f) * spatial;
      for (std::size_t i = 0; i < spatial; ++i) {
        sum_dy += dy[off + i];
        sum_dy_xhat += dy[off + i] * cache.normalized[off + i];
      }
    }
    if (dgamma) (*dgamma)[f] += sum_dy_xhat;
    if (dbeta) (*dbeta)[f] += sum_dy;
    if (!need_dx) continue;
    const double gamma = p[0][f];
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t off = (b * features + f) * spatial;
      for (std::size_t i = 0; i < spatial; ++i) {
        if (cache.train) {
          dx[off + i] = gamma * cache.inv_std[f] / n *
                        (n * dy[off + i] - sum_dy - cache.normalized[off + i] * sum_dy_xhat);
        } else {
          dx[off + i] = gamma * cache.inv_std[f] * dy[off + i];
        }
      }
    }
  }
  return dx;
}

inline Tensor maxpool_forward(const MaxPool2dSpec& c, const Tensor& x, std::vector<std::size_t>* argmax) {
  const std::size_t batch = x.dim(0), ch = x.dim(1), in_h = x.dim(2), in_w = x.dim(3);
  const std::size_t out_h = (in_h - c.kernel) / c.stride + 1, out_w = (in_w - c.kernel) / c.stride + 1;
  Tensor y({batch, ch, out_h, out_w});
  if (argmax) argmax->assign(y.size(), 0);
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < batch * ch; ++plane) {
    const std::size_t base = plane * in_h * in_w;
    for (std::size_t oh = 0; oh < out_h; ++oh) {
      for (std::size_t ow = 0; ow < out_w; ++ow, ++o) {
        std::size_t best = base + (oh * c.stride) * in_w + ow * c.stride;
        for (std::size_t ki = 0; ki < c.kernel; ++ki) {
          for (std::size_t kj = 0; kj < c.kernel; ++kj) {
            const std::size_t idx = base + (oh * c.stride + ki) * in_w + ow * c.stride + kj;
            if (x[idx] > x[best]) best = idx;
          }
        }
        y[o] = x[best];
        if (argmax) (*argmax)[o] = best;
      }
    }
  }
  return y;
}

inline Tensor dense_forward(const DenseSpec& c, const Tensor& x, const Tensor& w, const Tensor& bias) {
  const std::size_t batch = x.dim(0);
  Tensor y({batch, c.out_features});
  for (std::size_t b = 0; b < batch; ++b) {
    const double* in = x.data() + b * c.in_features;
    for (std::size_t o = 0; o < c.out_features; ++o) {
      const double* row = w.data() + o * c.in_features;
      double s = bias[o];
      for (std::size_t i = 0; i < c.in_features; ++i) s += row[i] * in[i];
      y[b * c.out_features + o] = s;
    }
  }
  return y;
}

inline Tensor layer_forward(const Layer& layer, const Tensor& x, bool train, LayerCache* cache) {
  const auto& p = layer.params;
  return std::visit(
      [&](const auto& c) -> Tensor {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, Conv2dSpec>) {
          return conv2d_forward(c, x, p[0], p[1], cache ? &cache->col : nullptr);
        } else if constexpr (std::is_same_v<T, BatchNormSpec>) {
          return batchnorm_forward(c, x, p, train, cache ? &cache->bn : nullptr);
        } else if constexpr (std::is_same_v<T, ReluSpec>) {
          Tensor y = x;
          for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
          return y;
        } else if constexpr (std::is_same_v<T, MaxPool2dSpec>) {
          return maxpool_forward(c, x, cache ? &cache->argmax : nullptr);
        } else if constexpr (std::is_same_v<T, GlobalAvgPoolSpec>) {
          const std::size_t batch = x.dim(0), ch = x.dim(1), spatial = x.size() / (batch * ch);
          Tensor y({batch, ch});
          for (std::size_t i = 0; i < batch * ch; ++i) {
            double s = 0.0;
            for (std::size_t k = 0; k < spatial; ++k) s += x[i * spatial + k];
            y[i] = s / static_cast<double>(spatial);
          }
          return y;
        } else {
          return dense_forward(c, x.reshaped({x.dim(0), c.in_features}), p[0], p[1]);
        }
      },
      layer.spec.config);
}

// Returns dL/dx (empty when !need_dx); parameter gradients go to `grads`.
inline Tensor layer_backward(const Layer& layer, const LayerCache& cache, const Tensor& dy,
                             std::vector<Tensor>* grads, bool need_dx) {
  const auto& p = layer.params;
  const Tensor& x = cache.input;
  return std::visit(
      [&](const auto& c) -> Tensor {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, Conv2dSpec>) {
          return conv2d_backward(c, x, p[0], dy, cache.col, grads ? &(*grads)[0] : nullptr, grads ? &(*grads)[1] : nullptr,
                                 need_dx);
        } else if constexpr (std::is_same_v<T, BatchNormSpec>) {
          return batchnorm_backward(dy, p, cache.bn, grads ? &(*grads)[0] : nullptr, grads ? &(*grads)[1] : nullptr,
                                    need_dx);
        } else if constexpr (std::is_same_v<T, ReluSpec>) {
          if (!need_dx) return Tensor();
          Tensor dx = dy;
          for (std::size_t i = 0; i < dx.size(); ++i) {
            if (!(x[i] > 0.0)) dx[i] = 0.0;
          }
          return dx;
        } else if constexpr (std::is_same_v<T, MaxPool2dSpec>) {
          if (!need_dx) return Tensor();
          Tensor dx(x.shape());
          for (std::size_t o = 0; o < dy.size(); ++o) dx[cache.argmax[o]] += dy[o];
          return dx;
        } else if constexpr (std::is_same_v<T, GlobalAvgPoolSpec>) {
          if (!need_dx) return Tensor();
          const std::size_t spatial = x.size() / dy.size();
          Tensor dx(x.shape());
          for (std::size_t i = 0; i < dy.size(); ++i) {
            for (std::size_t k = 0; k < spatial; ++k) dx[i * spatial + k] = dy[i] / static_cast<double>(spatial);
          }
          return dx;
        } else {
          const std::size_t batch = x.dim(0);
          const double* in = x.data();
          if (grads) {
            Tensor& dw = (*grads)[0];
            Tensor& db = (*grads)[1];
            for (std::size_t b = 0; b < batch; ++b) {
              for (std::size_t o = 0; o < c.out_features; ++o) {
                const double g = dy[b * c.out_features + o];
                db[o] += g;
                double* row = dw.data() + o * c.in_features;
                const double* xin = in + b * c.in_features;
                for (std::size_t i = 0; i < c.in_features; ++i) row[i] += g * xin[i];
              }
            }
          }
          if (!need_dx) return Tensor();
          Tensor dx(x.shape());
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t o = 0; o < c.out_features; ++o) {
              const double g = dy[b * c.out_features + o];
              const double* row = p[0].data() + o * c.in_features;
              double* dxb = dx.data() + b * c.in_features;
              for (std::size_t i = 0; i < c.in_features; ++i) dxb[i] += g * row[i];
            }
          }
          return dx;
        }
      },
      layer.spec.config);
}

inline void check_batch(const Model& model, std::size_t first_layer, const Tensor& batch) {
  const auto shapes = model.activation_shapes();
  const Shape& expected = shapes.at(first_layer);
  Shape got(batch.shape().begin() + (batch.rank() ? 1 : 0), batch.shape().end());
  if (batch.rank() == 0 || batch.dim(0) == 0 || got != expected) {
    const std::string name = first_layer < model.layers().size() ? model.layers()[first_layer].spec.name : "output";
    throw ShapeError(name, "expected batch of " + shape_string(expected) + ", got " + shape_string(batch.shape()));
  }
}

}  // namespace detail

// Runs layers [first, last) on `batch`, which must have the activation shape
// entering layer `first`. Batchnorm layers named in `train_mode` use batch
// statistics; all others use running statistics.
inline Tensor forward_range(const Model& model, const Tensor& batch, std::size_t first, std::size_t last,
                            const LayerMask& train_mode = {}) {
  detail::check_batch(model, first, batch);
  Tensor x = batch;
  for (std::size_t i = first; i < last; ++i) {
    const Layer& layer = model.layers()[i];
    x = detail::layer_forward(layer, x, train_mode.contains(layer.spec.name), nullptr);
  }
  return x;
}

// Logits [B, num_classes]. Evaluation mode unless layers are listed in `train_mode`.
inline Tensor forward(const Model& model, const Tensor& batch, const LayerMask& train_mode = {}) {
  return forward_range(model, batch, 0, model.layers().size(), train_mode);
}

// Batch statistics observed by a training-mode batchnorm layer.
struct BatchStats {
  std::vector<double> mean;
  std::vector<double> var;  // biased
  std::size_t count = 0;    // values per feature
};

struct LayerGradients {
  std::vector<Tensor> params;
  std::optional<BatchStats> batch_stats;
};

struct Gradients {
  std::map<std::string, LayerGradients> layers;
  double mean_loss = 0.0;
  std::size_t correct = 0;
};

// Gradient of the mean softmax cross-entropy over the batch with respect to
// every parameter of the layers in `trainable`. Those layers run in training
// mode; the rest are treated as frozen (evaluation mode, no gradients).
// `first_layer` lets callers start from a cached activation; the batch must
// then match the shape entering that layer.
inline Gradients backward(const Model& model, const Tensor& batch, std::span<const std::size_t> labels,
                          const LayerMask& trainable, std::size_t first_layer = 0) {
  const auto& layers = model.layers();
  for (const auto& name : trainable) {
    if (!model.find(name)) throw ConfigError("unknown layer '" + name + "' in trainable mask");
  }
  detail::check_batch(model, first_layer, batch);
  if (labels.size() != batch.dim(0)) throw DataError("label count does not match batch size");

  std::size_t earliest = layers.size();
  for (std::size_t i = first_layer; i < layers.size(); ++i) {
    if (trainable.contains(layers[i].spec.name)) {
      earliest = i;
      break;
    }
  }

  std::vector<detail::LayerCache> caches(layers.size());
  Tensor x = batch;
  for (std::size_t i = first_layer; i < layers.size(); ++i) {
    const bool train = trainable.contains(layers[i].spec.name);
    const bool keep = i >= earliest;
    if (keep) caches[i].input = x;
    x = detail::layer_forward(layers[i], x, train, keep ? &caches[i] : nullptr);
  }

  Gradients out;
  out.mean_loss = mean_batch_loss(x, labels);
  const std::size_t classes = x.dim(1);
  for (std::size_t b = 0; b < labels.size(); ++b) {
    if (softmax(x.values().subspan(b * classes, classes)).argmax() == labels[b]) ++out.correct;
  }
  if (earliest == layers.size()) return out;

  Tensor grad = softmax_cross_entropy_grad(x, labels);
  for (std::size_t i = layers.size(); i-- > earliest;) {
    const Layer& layer = layers[i];
    std::vector<Tensor>* param_grads = nullptr;
    if (trainable.contains(layer.spec.name)) {
      auto& lg = out.layers[layer.spec.name];
      const auto shapes = parameter_shapes(layer.spec);
      for (std::size_t k = 0; k < trainable_tensor_count(layer.spec.kind()); ++k) lg.params.emplace_back(shapes[k]);
      if (layer.spec.kind() == LayerKind::kBatchNorm) {
        const Tensor& in = caches[i].input;
        lg.batch_stats = BatchStats{caches[i].bn.mean, caches[i].bn.var, in.size() / in.dim(1)};
      }
      param_grads = &lg.params;
    }
    grad = detail::layer_backward(layer, caches[i], grad, param_grads, i > earliest);
  }
  return out;
}

// theta <- theta - lr * grad for layers in `trainable`; batchnorm running
// statistics of those layers are blended with the recorded batch statistics.
// Everything outside the mask is left untouched.
inline void sgd_step(Model& model, const Gradients& grads, double learning_rate, const LayerMask& trainable) {
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  for (const auto& name : trainable) {
    if (!model.find(name)) throw ConfigError("unknown layer '" + name + "' in trainable mask");
  }
  for (auto& layer : model.mutable_layers()) {
    if (!trainable.contains(layer.spec.name)) continue;
    auto it = grads.layers.find(layer.spec.name);
    if (it == grads.layers.end()) continue;
    const auto& lg = it->second;
    for (std::size_t k = 0; k < lg.params.size(); ++k) {
      auto dst = layer.params[k].values();
      auto g = lg.params[k].values();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] -= learning_rate * g[i];
    }
    if (lg.batch_stats) {
      const auto& bn = std::get<BatchNormSpec>(layer.spec.config);
      const auto& st = *lg.batch_stats;
      const double unbias = st.count > 1 ? static_cast<double>(st.count) / static_cast<double>(st.count - 1) : 1.0;
      for (std::size_t f = 0; f < bn.num_features; ++f) {
        layer.params[2][f] = (1.0 - bn.momentum) * layer.params[2][f] + bn.momentum * st.mean[f];
        layer.params[3][f] = (1.0 - bn.momentum) * layer.params[3][f] + bn.momentum * st.var[f] * unbias;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Parameter counting
// ---------------------------------------------------------------------------

struct LayerParameterCount {
  std::string name;
  int block_id = 0;
  LayerKind kind = LayerKind::kRelu;
  std::size_t trainable = 0;      // weights, biases, batchnorm scale/shift
  std::size_t non_trainable = 0;  // batchnorm running statistics
};

struct ParameterCount {
  std::vector<LayerParameterCount> layers;
  std::size_t total = 0;
  std::size_t non_trainable = 0;
};

inline ParameterCount count_parameters(const Model& model) {
  ParameterCount out;
  for (const auto& layer : model.layers()) {
    LayerParameterCount lc{layer.spec.name, layer.spec.block_id, layer.spec.kind(), 0, 0};
    const auto shapes = parameter_shapes(layer.spec);
    const std::size_t k_train = trainable_tensor_count(layer.spec.kind());
    for (std::size_t k = 0; k < shapes.size(); ++k) {
      (k < k_train ? lc.trainable : lc.non_trainable) += element_count(shapes[k]);
    }
    out.total += lc.trainable;
    out.non_trainable += lc.non_trainable;
    out.layers.push_back(std::move(lc));
  }
  return out;
}

}  // namespace edgecare
