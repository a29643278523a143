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
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "edgecare/checkpoint.hpp"
#include "edgecare/error.hpp"
#include "edgecare/hash.hpp"
#include "edgecare/random.hpp"
#include "edgecare/tensor.hpp"

namespace edgecare {

enum class MotionKind { kStatic, kLinearDrift, kOscillation, kCollapse };

inline const char* to_string(MotionKind m) {
  switch (m) {
    case MotionKind::kStatic: return "static";
    case MotionKind::kLinearDrift: return "linear_drift";
    case MotionKind::kOscillation: return "oscillation";
    case MotionKind::kCollapse: return "collapse";
  }
  return "unknown";
}

inline MotionKind motion_from_string(const std::string& s) {
  if (s == "static") return MotionKind::kStatic;
  if (s == "linear_drift") return MotionKind::kLinearDrift;
  if (s == "oscillation") return MotionKind::kOscillation;
  if (s == "collapse") return MotionKind::kCollapse;
  throw ConfigError("unknown motion kind '" + s + "'");
}

struct ActivityClass {
  std::string name;
  MotionKind motion = MotionKind::kStatic;
  double intensity = 1.0;      // (0, 1]
  std::size_t blob_size = 6;   // pixels
  double aspect = 1.0;         // height/width of a static pose
  double elevation = 0.0;      // support height above the floor (bed, chair), fraction of frame height
};

// Channel count stands in for the sensor modality: 1 for depth- or
// thermal-like frames, 3 for RGB-like frames.
struct GeneratorSpec {
  std::vector<ActivityClass> classes;
  std::size_t frame_h = 16;
  std::size_t frame_w = 16;
  std::size_t channels = 1;
  double background = 0.15;
  double noise_sigma = 0.05;
  double intensity_jitter = 0.0;  // per-segment brightness scale drawn from [1 - jitter, 1]
  std::uint64_t seed = 0;

  std::vector<std::string> class_names() const {
    std::vector<std::string> names;
    for (const auto& c : classes) names.push_back(c.name);
    return names;
  }
};

struct Segment {
  std::size_t class_index = 0;
  std::size_t duration = 0;
};

struct LabeledStream {
  Tensor frames;                    // [T, channels, H, W], values in [0, 1]
  std::vector<std::size_t> labels;  // length T
  std::uint64_t spec_fingerprint = 0;

  std::size_t length() const noexcept { return labels.size(); }
};

inline json to_json(const GeneratorSpec& spec) {
  json classes = json::array();
  for (const auto& c : spec.classes) {
    classes.push_back({{"name", c.name},
                       {"motion_kind", to_string(c.motion)},
                       {"intensity", c.intensity},
                       {"blob_size", c.blob_size},
                       {"aspect", c.aspect},
                       {"elevation", c.elevation}});
  }
  return {{"classes", classes},       {"frame_h", spec.frame_h},         {"frame_w", spec.frame_w},
          {"channels", spec.channels}, {"background", spec.background}, {"noise_sigma", spec.noise_sigma},
          {"intensity_jitter", spec.intensity_jitter}, {"seed", spec.seed}};
}

inline void validate(const GeneratorSpec& spec) {
  if (spec.classes.size() < 2) throw ConfigError("generator needs at least two classes");
  if (spec.frame_h < 16 || spec.frame_w < 16) throw ConfigError("frame dimensions must be at least 16");
  if (spec.channels != 1 && spec.channels != 3) throw ConfigError("channels must be 1 or 3");
  if (spec.noise_sigma < 0.0) throw ConfigError("noise_sigma must be non-negative");
  if (!(spec.intensity_jitter >= 0.0 && spec.intensity_jitter < 1.0)) {
    throw ConfigError("intensity_jitter must lie in [0, 1)");
  }
  std::vector<std::string> names;
  for (const auto& c : spec.classes) {
    if (!(c.intensity > 0.0 && c.intensity <= 1.0)) throw ConfigError("class '" + c.name + "' intensity outside (0,1]");
    if (c.blob_size == 0) throw ConfigError("class '" + c.name + "' blob_size must be positive");
    if (!(c.aspect > 0.0)) throw ConfigError("class '" + c.name + "' aspect must be positive");
    if (!(c.elevation >= 0.0 && c.elevation < 1.0)) throw ConfigError("class '" + c.name + "' elevation outside [0,1)");
    if (std::find(names.begin(), names.end(), c.name) != names.end()) {
      throw ConfigError("duplicate class name '" + c.name + "'");
    }
    names.push_back(c.name);
  }
}

inline GeneratorSpec generator_spec_from_json(const json& j) {
  try {
    GeneratorSpec spec;
    for (const auto& c : j.at("classes")) {
      spec.classes.push_back(ActivityClass{c.at("name"), motion_from_string(c.at("motion_kind")),
                                           c.value("intensity", 1.0), c.value("blob_size", std::size_t{6}),
                                           c.value("aspect", 1.0), c.value("elevation", 0.0)});
    }
    spec.frame_h = j.value("frame_h", std::size_t{16});
    spec.frame_w = j.value("frame_w", std::size_t{16});
    spec.channels = j.value("channels", std::size_t{1});
    spec.background = j.value("background", 0.15);
    spec.noise_sigma = j.value("noise_sigma", 0.05);
    spec.intensity_jitter = j.value("intensity_jitter", 0.0);
    spec.seed = j.value("seed", std::uint64_t{0});
    validate(spec);
    return spec;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed generator spec: ") + e.what());
  }
}

inline std::uint64_t fingerprint(const GeneratorSpec& spec) { return fnv1a(to_json(spec).dump()); }

// Five source activities for cloud pre-training, recorded across many rooms.
inline GeneratorSpec default_source_spec(std::uint64_t seed) {
  GeneratorSpec spec;
  spec.classes = {{"stand", MotionKind::kStatic, 0.85, 7, 2.5, 0.0},
                  {"walk", MotionKind::kLinearDrift, 0.8, 8, 1.0, 0.0},
                  {"sit", MotionKind::kStatic, 0.8, 7, 1.0, 0.2},
                  {"lie", MotionKind::kStatic, 0.8, 8, 0.3, 0.3},
                  {"fall", MotionKind::kCollapse, 0.85, 8, 1.0, 0.0}};
  spec.seed = seed;
  spec.noise_sigma = 0.15;
  spec.intensity_jitter = 0.3;
  return spec;
}

// Three in-home activities for edge fine-tuning. Waving for help is absent
// from the source set and the bed sits higher than in the source rooms.
inline GeneratorSpec default_target_spec(std::uint64_t seed) {
  GeneratorSpec spec;
  spec.classes = {{"fall", MotionKind::kCollapse, 0.8, 8, 1.0, 0.0},
                  {"call_for_help", MotionKind::kOscillation, 0.8, 7, 1.0, 0.0},
                  {"resting", MotionKind::kStatic, 0.8, 8, 0.3, 0.4}};
  spec.seed = seed;
  spec.noise_sigma = 0.15;
  spec.intensity_jitter = 0.3;
  return spec;
}

namespace detail {

struct BlobPose {
  double cy, cx;          // center
  double half_h, half_w;  // semi-axes
};

// Pose of the body blob at frame `t` of a segment. Bodies rest on a floor
// line at `floor`; `start_x`, `direction` and `phase` are drawn per segment.
inline BlobPose blob_pose(const ActivityClass& cls, std::size_t t, std::size_t duration, double floor,
                          double start_x, double direction, double phase, std::size_t w) {
  const double s = static_cast<double>(cls.blob_size);
  const double u = duration > 1 ? static_cast<double>(t) / static_cast<double>(duration - 1) : 0.0;
  auto on_floor = [&](double x, double half_h, double half_w) { return BlobPose{floor - half_h, x, half_h, half_w}; };
  switch (cls.motion) {
    case MotionKind::kStatic: {
      const double r = std::sqrt(cls.aspect);
      return on_floor(start_x, 0.5 * s * r, 0.5 * s / r);
    }
    case MotionKind::kLinearDrift: {
      const double span = 0.5 * static_cast<double>(w);
      return on_floor(start_x + direction * span * (u - 0.5), 0.75 * s, 0.3 * s);
    }
    case MotionKind::kOscillation: {
      const double angle = 2.0 * std::numbers::pi * static_cast<double>(t) / 8.0 + phase;
      return on_floor(start_x, 0.7 * s, 0.3 * s * (1.6 + 0.8 * std::abs(std::sin(angle))));
    }
    case MotionKind::kCollapse:
      return on_floor(start_x, s * (0.75 - 0.45 * u), s * (0.3 + 0.35 * u));
  }
  return on_floor(start_x, 0.5 * s, 0.5 * s);
}

inline constexpr double kChannelTint[3] = {1.0, 0.85, 0.7};

}  // namespace detail

// Renders a moving intensity blob per segment on a noisy background.
// Deterministic in (spec, segments).
inline LabeledStream generate(const GeneratorSpec& spec, const std::vector<Segment>& segments) {
  validate(spec);
  std::size_t total = 0;
  for (const auto& seg : segments) {
    if (seg.class_index >= spec.classes.size()) {
      throw DataError("segment class index " + std::to_string(seg.class_index) + " out of range");
    }
    if (seg.duration == 0) throw DataError("segment duration must be positive");
    total += seg.duration;
  }
  const std::size_t h = spec.frame_h, w = spec.frame_w, ch = spec.channels;
  LabeledStream out{Tensor({total, ch, h, w}), {}, fingerprint(spec)};
  out.labels.reserve(total);
  Rng noise(derive_seed(spec.seed, 0x6e6f697365ULL));
  std::size_t frame = 0;
  for (std::size_t si = 0; si < segments.size(); ++si) {
    const auto& seg = segments[si];
    const auto& cls = spec.classes[seg.class_index];
    Rng placement(derive_seed(spec.seed, 1000 + si));
    const double s = static_cast<double>(cls.blob_size);
    const double floor = static_cast<double>(h) - 1.5 - placement.uniform(0.0, 2.0) - cls.elevation * static_cast<double>(h);
    const double margin = std::min(0.5 * s, w / 2.0);
    const double start_x = placement.uniform(margin, static_cast<double>(w) - margin);
    const double direction = placement.uniform() < 0.5 ? -1.0 : 1.0;
    const double phase = placement.uniform(0.0, 2.0 * std::numbers::pi);
    const double intensity = std::clamp(cls.intensity * placement.uniform(1.0 - spec.intensity_jitter, 1.0), 0.0, 1.0);
    for (std::size_t t = 0; t < seg.duration; ++t, ++frame) {
      const auto pose = detail::blob_pose(cls, t, seg.duration, floor, start_x, direction, phase, w);
      const double edge = std::max(1.0, std::min(pose.half_h, pose.half_w));
      for (std::size_t c = 0; c < ch; ++c) {
        const double tint = ch == 3 ? detail::kChannelTint[c] : 1.0;
        double* px = out.frames.data() + ((frame * ch + c) * h) * w;
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t x = 0; x < w; ++x) {
            const double dy = (static_cast<double>(y) - pose.cy) / pose.half_h;
            const double dx = (static_cast<double>(x) - pose.cx) / pose.half_w;
            const double r = std::sqrt(dy * dy + dx * dx);
            const double cover = std::clamp((1.0 - r) * edge + 0.5, 0.0, 1.0);
            double v = (spec.background + cover * (intensity - spec.background)) * tint;
            if (spec.noise_sigma > 0.0) v += spec.noise_sigma * noise.normal();
            px[y * w + x] = std::clamp(v, 0.0, 1.0);
          }
        }
      }
      out.labels.push_back(seg.class_index);
    }
  }
  return out;
}

// `count` segments of uniformly drawn class and duration in [min_len, max_len].
inline std::vector<Segment> random_segments(std::size_t num_classes, std::size_t count, std::size_t min_len,
                                            std::size_t max_len, std::uint64_t seed) {
  if (min_len == 0 || max_len < min_len) throw ConfigError("invalid segment duration range");
  Rng rng(seed);
  std::vector<Segment> segs;
  for (std::size_t i = 0; i < count; ++i) {
    segs.push_back({static_cast<std::size_t>(rng.below(num_classes)),
                    min_len + static_cast<std::size_t>(rng.below(max_len - min_len + 1))});
  }
  return segs;
}

// `per_class` segments of each class, each `duration` frames long, in a
// seeded random order.
inline std::vector<Segment> balanced_segments(std::size_t num_classes, std::size_t per_class, std::size_t duration,
                                              std::uint64_t seed) {
  std::vector<Segment> segs;
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) segs.push_back({c, duration});
  }
  Rng rng(seed);
  rng.shuffle(segs);
  return segs;
}

inline std::vector<std::size_t> label_histogram(std::span<const std::size_t> labels, std::size_t num_classes) {
  std::vector<std::size_t> hist(num_classes, 0);
  for (std::size_t l : labels) {
    if (l >= hist.size()) hist.resize(l + 1, 0);
    ++hist[l];
  }
  return hist;
}

// Concatenates the listed frame ranges [begin, end) of a stream.
inline LabeledStream select_ranges(const LabeledStream& stream,
                                   const std::vector<std::pair<std::size_t, std::size_t>>& ranges) {
  std::vector<std::size_t> rows;
  for (auto [b, e] : ranges) {
    for (std::size_t i = b; i < e; ++i) rows.push_back(i);
  }
  LabeledStream out{stream.frames.gather_rows(rows), {}, stream.spec_fingerprint};
  for (std::size_t r : rows) out.labels.push_back(stream.labels[r]);
  return out;
}

// Window-level stratified split. The stream is tiled into consecutive
// windows of `window_len` frames (the last may be shorter); each window goes
// whole to one side, so no window straddles the split. Windows are grouped
// by majority label and each group is split by `train_fraction`.
inline std::pair<LabeledStream, LabeledStream> split(const LabeledStream& stream, double train_fraction,
                                                     std::uint64_t seed, std::size_t window_len = 8) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train_fraction must be in (0, 1)");
  if (window_len == 0) throw ConfigError("window_len must be positive");
  const std::size_t n = stream.length();
  std::size_t num_classes = 0;
  for (std::size_t l : stream.labels) num_classes = std::max(num_classes, l + 1);

  std::map<std::size_t, std::vector<std::size_t>> by_label;
  const std::size_t num_windows = (n + window_len - 1) / window_len;
  for (std::size_t wi = 0; wi < num_windows; ++wi) {
    const std::size_t b = wi * window_len, e = std::min(n, b + window_len);
    auto hist = label_histogram(std::span(stream.labels).subspan(b, e - b), num_classes);
    by_label[static_cast<std::size_t>(std::max_element(hist.begin(), hist.end()) - hist.begin())].push_back(wi);
  }
  if (by_label.size() < 2) throw DataError("stream holds a single class; generate a longer, mixed stream");

  Rng rng(seed);
  std::vector<std::size_t> train_windows, holdout_windows;
  for (auto& [label, windows] : by_label) {
    if (windows.size() < 2) {
      throw DataError("class " + std::to_string(label) + " has " + std::to_string(windows.size()) +
                      " window(s); one side of the split would lack it, generate a larger stream");
    }
    rng.shuffle(windows);
    auto k = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(windows.size())));
    k = std::clamp<std::size_t>(k, 1, windows.size() - 1);
    train_windows.insert(train_windows.end(), windows.begin(), windows.begin() + static_cast<std::ptrdiff_t>(k));
    holdout_windows.insert(holdout_windows.end(), windows.begin() + static_cast<std::ptrdiff_t>(k), windows.end());
  }
  auto to_ranges = [&](std::vector<std::size_t>& ws) {
    std::sort(ws.begin(), ws.end());
    std::vector<std::pair<std::size_t, std::size_t>> ranges;
    for (std::size_t wi : ws) ranges.emplace_back(wi * window_len, std::min(n, (wi + 1) * window_len));
    return ranges;
  };
  auto train = select_ranges(stream, to_ranges(train_windows));
  auto holdout = select_ranges(stream, to_ranges(holdout_windows));

  const auto whole = label_histogram(stream.labels, num_classes);
  const auto a = label_histogram(train.labels, num_classes);
  const auto b = label_histogram(holdout.labels, num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (whole[c] > 0 && (a[c] == 0 || b[c] == 0)) {
      throw DataError("class " + std::to_string(c) + " would be empty on one side of the split; use a larger stream");
    }
  }
  return {std::move(train), std::move(holdout)};
}

// ---------------------------------------------------------------------------
// TLDS stream files
// ---------------------------------------------------------------------------

inline constexpr char kStreamMagic[4] = {'T', 'L', 'D', 'S'};
inline constexpr std::uint32_t kStreamVersion = 1;

inline std::vector<std::uint8_t> encode_stream(const LabeledStream& stream) {
  const auto& f = stream.frames;
  std::vector<std::uint8_t> out(std::begin(kStreamMagic), std::end(kStreamMagic));
  detail::put_u32(out, kStreamVersion);
  for (std::size_t d = 0; d < 4; ++d) detail::put_u32(out, static_cast<std::uint32_t>(f.dim(d)));
  for (std::size_t l : stream.labels) {
    if (l > 0xffff) throw DataError("label does not fit in 16 bits");
    out.push_back(static_cast<std::uint8_t>(l & 0xff));
    out.push_back(static_cast<std::uint8_t>(l >> 8));
  }
  for (double v : f.values()) out.push_back(static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v, 0.0, 1.0))));
  return out;
}

// Frames come back dequantized to multiples of 1/255.
inline LabeledStream decode_stream(std::span<const std::uint8_t> bytes) {
  detail::ByteReader in(bytes);
  if (!in.has(4) || std::memcmp(bytes.data(), kStreamMagic, 4) != 0) {
    throw FormatError(CheckpointErrorCode::kBadMagic, "not a TLDS stream file");
  }
  in.take(4, "magic");
  const auto version = in.uint(4, "version");
  if (version != kStreamVersion) {
    throw FormatError(CheckpointErrorCode::kVersionMismatch, "stream version " + std::to_string(version));
  }
  Shape shape(4);
  for (auto& d : shape) d = static_cast<std::size_t>(in.uint(4, "dimension"));
  LabeledStream out;
  out.labels.resize(shape[0]);
  for (auto& l : out.labels) l = static_cast<std::size_t>(in.uint(2, "labels"));
  const std::size_t count = element_count(shape);
  auto raw = in.take(count, "frame data");
  if (in.remaining() != 0) throw FormatError(CheckpointErrorCode::kShapeMismatch, "trailing bytes after frames");
  std::vector<double> data(count);
  for (std::size_t i = 0; i < count; ++i) data[i] = static_cast<double>(raw[i]) / 255.0;
  out.frames = Tensor(shape, std::move(data));
  return out;
}

inline void save_stream(const LabeledStream& stream, const std::filesystem::path& path) {
  detail::write_file_atomic(path, encode_stream(stream));
}

inline LabeledStream load_stream(const std::filesystem::path& path) { return decode_stream(detail::read_file(path)); }

}  // namespace edgecare
