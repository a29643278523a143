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
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "edgecare/error.hpp"
#include "edgecare/nn.hpp"
#include "edgecare/tensor.hpp"
#include "edgecare/transfer.hpp"

namespace edgecare {

// ---------------------------------------------------------------------------
// Windows
// ---------------------------------------------------------------------------

struct WindowConfig {
  std::size_t window_len = 8;
  std::size_t stride = 4;

  void validate() const {
    if (window_len == 0 || stride == 0) throw ConfigError("window_len and stride must be positive");
    if (stride > window_len) throw ConfigError("stride must not exceed window_len");
  }
};

// Window start frames: 0, S, 2S, ... while the window fits, plus a final
// window anchored at T - W when the regular grid leaves a tail uncovered.
inline std::vector<std::size_t> window_starts(std::size_t length, const WindowConfig& cfg) {
  cfg.validate();
  if (length < cfg.window_len) {
    throw DataError("stream shorter than window (" + std::to_string(length) + " < " + std::to_string(cfg.window_len) +
                    ")");
  }
  std::vector<std::size_t> starts;
  for (std::size_t t = 0; t + cfg.window_len <= length; t += cfg.stride) starts.push_back(t);
  if (starts.back() + cfg.window_len < length) starts.push_back(length - cfg.window_len);
  return starts;
}

struct Window {
  std::size_t start = 0;
  Tensor frames;  // [W, channels, H, W]
};

inline std::vector<Window> extract_windows(const Tensor& stream, const WindowConfig& cfg) {
  std::vector<Window> out;
  for (std::size_t t : window_starts(stream.dim(0), cfg)) {
    out.push_back({t, stream.slice_rows(t, t + cfg.window_len)});
  }
  return out;
}

struct WindowScore {
  std::size_t start = 0;
  ProbabilityVector score;
};

// Scores each frame once, then gives each window the softmax of the mean of
// its frames' logits.
inline std::vector<WindowScore> score_windows(const Model& model, const Tensor& stream, const WindowConfig& cfg) {
  const auto starts = window_starts(stream.dim(0), cfg);
  const Tensor logits = detail::forward_chunked(model, stream, 0, model.layers().size());
  const std::size_t c = logits.dim(1);
  std::vector<WindowScore> out;
  out.reserve(starts.size());
  for (std::size_t t1 : starts) {
    std::vector<double> mean(c, 0.0);
    for (std::size_t f = t1; f < t1 + cfg.window_len; ++f) {
      for (std::size_t j = 0; j < c; ++j) mean[j] += logits[f * c + j];
    }
    for (double& v : mean) v /= static_cast<double>(cfg.window_len);
    out.push_back({t1, softmax(mean)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Frame-level aggregation
// ---------------------------------------------------------------------------

struct FrameScore {
  std::size_t frame_index = 0;
  ProbabilityVector score;
  std::size_t num_windows = 0;
  std::size_t predicted_class = 0;
};

// Each frame's score is the mean of the scores of every window covering it.
// Window contributions are summed in ascending start order.
inline std::vector<FrameScore> score_frames(std::vector<WindowScore> window_scores, const WindowConfig& cfg,
                                            std::size_t length) {
  cfg.validate();
  if (window_scores.empty()) throw InvariantError("no window scores");
  std::stable_sort(window_scores.begin(), window_scores.end(),
                   [](const WindowScore& a, const WindowScore& b) { return a.start < b.start; });
  const std::size_t c = window_scores.front().score.size();
  std::vector<FrameScore> frames(length);
  for (std::size_t i = 0; i < length; ++i) {
    frames[i].frame_index = i;
    frames[i].score.probs.assign(c, 0.0);
  }
  for (const auto& ws : window_scores) {
    if (ws.score.size() != c) throw InvariantError("window scores disagree on class count");
    if (ws.start + cfg.window_len > length) throw InvariantError("window extends past the stream");
    for (std::size_t f = ws.start; f < ws.start + cfg.window_len; ++f) {
      for (std::size_t j = 0; j < c; ++j) frames[f].score.probs[j] += ws.score[j];
      ++frames[f].num_windows;
    }
  }
  for (auto& fs : frames) {
    if (fs.num_windows == 0) {
      throw InvariantError("frame " + std::to_string(fs.frame_index) + " is covered by no window");
    }
    for (double& p : fs.score.probs) p /= static_cast<double>(fs.num_windows);
    fs.predicted_class = fs.score.argmax();
  }
  return frames;
}

// ---------------------------------------------------------------------------
// Inference events
// ---------------------------------------------------------------------------

enum class Category { kAlert, kServiceRequest, kInfo };

inline const char* to_string(Category c) {
  switch (c) {
    case Category::kAlert: return "ALERT";
    case Category::kServiceRequest: return "SERVICE_REQUEST";
    case Category::kInfo: return "INFO";
  }
  return "INFO";
}

inline Category category_from_string(const std::string& s) {
  if (s == "ALERT") return Category::kAlert;
  if (s == "SERVICE_REQUEST") return Category::kServiceRequest;
  if (s == "INFO") return Category::kInfo;
  throw ConfigError("unknown category '" + s + "'");
}

// Class name -> category. Explicit entries win; otherwise names starting with
// "fall" are alerts, "call"/"request" are service requests, the rest info.
struct CategoryMap {
  std::map<std::string, Category> overrides;

  Category lookup(const std::string& activity) const {
    if (auto it = overrides.find(activity); it != overrides.end()) return it->second;
    auto starts = [&](const char* p) { return activity.rfind(p, 0) == 0; };
    if (starts("fall")) return Category::kAlert;
    if (starts("call") || starts("request")) return Category::kServiceRequest;
    return Category::kInfo;
  }
};

inline CategoryMap category_map_from_json(const json& j) {
  CategoryMap m;
  for (auto it = j.begin(); it != j.end(); ++it) m.overrides[it.key()] = category_from_string(it.value());
  return m;
}

// A pixel-free record of one recognized activity span.
struct InferenceEvent {
  std::string stream_id;
  std::size_t start = 0;  // inclusive
  std::size_t end = 0;    // inclusive
  std::string activity;
  double confidence = 0.0;
  Category category = Category::kInfo;
  std::uint64_t tick = 0;

  friend bool operator==(const InferenceEvent&, const InferenceEvent&) = default;
};

// One JSON object, no trailing newline. Confidence has six decimals.
inline std::string to_json_line(const InferenceEvent& e) {
  char conf[32];
  std::snprintf(conf, sizeof conf, "%.6f", e.confidence);
  return std::string("{\"stream_id\":") + json(e.stream_id).dump() + ",\"start\":" + std::to_string(e.start) +
         ",\"end\":" + std::to_string(e.end) + ",\"activity\":" + json(e.activity).dump() + ",\"confidence\":" + conf +
         ",\"category\":\"" + to_string(e.category) + "\",\"tick\":" + std::to_string(e.tick) + "}";
}

// Runs of equal predicted class become one event each.
inline std::vector<InferenceEvent> segment_events(const std::vector<FrameScore>& frames,
                                                  const std::vector<std::string>& class_names,
                                                  const CategoryMap& categories, const std::string& stream_id,
                                                  std::uint64_t tick) {
  std::vector<InferenceEvent> events;
  std::size_t i = 0;
  while (i < frames.size()) {
    const std::size_t cls = frames[i].predicted_class;
    if (cls >= class_names.size()) throw InvariantError("predicted class has no name");
    std::size_t j = i;
    double conf = 0.0;
    while (j < frames.size() && frames[j].predicted_class == cls) {
      conf += frames[j].score[cls];
      ++j;
    }
    events.push_back({stream_id, i, j - 1, class_names[cls], conf / static_cast<double>(j - i),
                      categories.lookup(class_names[cls]), tick});
    i = j;
  }
  return events;
}

inline std::vector<InferenceEvent> run_stream(const Model& model, const Tensor& stream, const WindowConfig& cfg,
                                              const std::vector<std::string>& class_names,
                                              const CategoryMap& categories, const std::string& stream_id = "stream0",
                                              std::uint64_t tick = 0) {
  if (class_names.size() != model.num_classes()) {
    throw ConfigError("model has " + std::to_string(model.num_classes()) + " classes but " +
                      std::to_string(class_names.size()) + " class names were given");
  }
  auto frames = score_frames(score_windows(model, stream, cfg), cfg, stream.dim(0));
  return segment_events(frames, class_names, categories, stream_id, tick);
}

// ---------------------------------------------------------------------------
// Frame-level evaluation
// ---------------------------------------------------------------------------

struct EvaluationReport {
  std::vector<std::string> class_names;
  std::vector<std::optional<double>> per_class_ap;  // nullopt: class absent from ground truth
  double mean_ap = 0.0;
  double frame_accuracy = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<std::string> undefined_ap_classes;
};

// Average precision of one ranking with all-points interpolation: frames are
// ranked by descending score (ties by frame index) and each positive
// contributes the best precision reached at its recall level or beyond.
inline std::optional<double> average_precision(std::span<const double> scores, std::span<const std::uint8_t> positive) {
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<double> precision(order.size());
  std::size_t hits = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (positive[order[k]]) ++hits;
    precision[k] = static_cast<double>(hits) / static_cast<double>(k + 1);
  }
  if (hits == 0) return std::nullopt;
  for (std::size_t k = order.size() - 1; k-- > 0;) precision[k] = std::max(precision[k], precision[k + 1]);
  double sum = 0.0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (positive[order[k]]) sum += precision[k];
  }
  return sum / static_cast<double>(hits);
}

inline EvaluationReport evaluate(const std::vector<FrameScore>& frames, std::span<const std::size_t> labels,
                                 std::vector<std::string> class_names = {}) {
  if (frames.size() != labels.size()) throw DataError("frame scores and labels differ in length");
  if (frames.empty()) throw DataError("nothing to evaluate");
  const std::size_t c = frames.front().score.size();
  if (class_names.empty()) {
    for (std::size_t j = 0; j < c; ++j) class_names.push_back("class" + std::to_string(j));
  }
  if (class_names.size() != c) throw ConfigError("class name count does not match score width");
  for (std::size_t l : labels) {
    if (l >= c) throw DataError("label " + std::to_string(l) + " out of range");
  }

  EvaluationReport r;
  r.class_names = class_names;
  r.confusion.assign(c, std::vector<std::size_t>(c, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const std::size_t pred = frames[i].score.argmax();
    ++r.confusion[labels[i]][pred];
    if (pred == labels[i]) ++correct;
  }
  r.frame_accuracy = static_cast<double>(correct) / static_cast<double>(frames.size());

  std::vector<double> scores(frames.size());
  std::vector<std::uint8_t> pos(frames.size());
  double ap_sum = 0.0;
  std::size_t defined = 0;
  for (std::size_t j = 0; j < c; ++j) {
    for (std::size_t i = 0; i < frames.size(); ++i) {
      scores[i] = frames[i].score[j];
      pos[i] = labels[i] == j;
    }
    auto ap = average_precision(scores, pos);
    r.per_class_ap.push_back(ap);
    if (ap) {
      ap_sum += *ap;
      ++defined;
    } else {
      r.undefined_ap_classes.push_back(class_names[j]);
    }
  }
  r.mean_ap = defined ? ap_sum / static_cast<double>(defined) : 0.0;
  return r;
}

inline json to_json(const EvaluationReport& r) {
  json ap = json::object();
  for (std::size_t j = 0; j < r.class_names.size(); ++j) {
    ap[r.class_names[j]] = r.per_class_ap[j] ? json(*r.per_class_ap[j]) : json(nullptr);
  }
  return {{"per_class_ap", ap},
          {"mean_ap", r.mean_ap},
          {"frame_accuracy", r.frame_accuracy},
          {"class_names", r.class_names},
          {"confusion", r.confusion},
          {"undefined_ap_classes", r.undefined_ap_classes}};
}

}  // namespace edgecare
