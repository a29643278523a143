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

#include <algorithm>
#include <filesystem>

#include <gtest/gtest.h>

#include "edgecare/datagen.hpp"
#include "edgecare/transfer.hpp"

using namespace edgecare;

namespace {

GeneratorSpec quiet(GeneratorSpec spec) {
  spec.noise_sigma = 0.0;
  spec.intensity_jitter = 0.0;
  return spec;
}

// Rows whose brightest pixel clears the midpoint between background and body.
std::size_t blob_height(const LabeledStream& s, std::size_t frame, double threshold) {
  const std::size_t h = s.frames.dim(2), w = s.frames.dim(3);
  std::size_t top = h, bottom = 0;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (s.frames[(frame * h + y) * w + x] > threshold) {
        top = std::min(top, y);
        bottom = std::max(bottom, y);
      }
    }
  }
  return top == h ? 0 : bottom - top + 1;
}

}  // namespace

TEST(Datagen, StaticNoiselessSegmentRepeatsOneFrame) {
  auto spec = quiet(default_target_spec(3));
  const std::size_t resting = 2;
  ASSERT_EQ(spec.classes[resting].motion, MotionKind::kStatic);
  const auto s = generate(spec, {{resting, 5}});
  const std::size_t per = s.frames.size() / 5;
  for (std::size_t t = 1; t < 5; ++t) {
    EXPECT_TRUE(std::equal(s.frames.data(), s.frames.data() + per, s.frames.data() + t * per));
  }
}

TEST(Datagen, DeterministicForEqualSpecs) {
  const auto spec = default_source_spec(11);
  const auto segs = random_segments(spec.classes.size(), 6, 4, 12, 5);
  const auto a = generate(spec, segs), b = generate(spec, segs);
  EXPECT_EQ(a.frames, b.frames);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.spec_fingerprint, b.spec_fingerprint);
  EXPECT_NE(generate(default_source_spec(12), segs).frames, a.frames);
  EXPECT_NE(fingerprint(default_source_spec(12)), fingerprint(spec));
}

TEST(Datagen, ValuesStayInUnitInterval) {
  auto spec = default_target_spec(4);
  spec.noise_sigma = 0.8;
  spec.channels = 3;
  const auto s = generate(spec, random_segments(3, 5, 3, 9, 2));
  EXPECT_EQ(s.frames.dim(1), 3u);
  for (double v : s.frames.values()) {
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 1.0);
  }
}

TEST(Datagen, CollapseEndsShorterThanItStarts) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto spec = quiet(default_target_spec(seed));
    const std::size_t fall = 0;
    ASSERT_EQ(spec.classes[fall].motion, MotionKind::kCollapse);
    const auto s = generate(spec, {{fall, 12}});
    const double threshold = 0.5 * (spec.background + spec.classes[fall].intensity);
    EXPECT_LT(blob_height(s, 11, threshold), blob_height(s, 0, threshold)) << "seed " << seed;
  }
}

TEST(Datagen, LabelsFollowSegments) {
  const auto spec = default_target_spec(1);
  const auto s = generate(spec, {{2, 3}, {0, 2}});
  EXPECT_EQ(s.labels, (std::vector<std::size_t>{2, 2, 2, 0, 0}));
  EXPECT_EQ(s.frames.shape(), (Shape{5, 1, 16, 16}));
}

TEST(Datagen, RejectsInvalidInput) {
  const auto spec = default_target_spec(1);
  EXPECT_THROW(generate(spec, {{3, 4}}), DataError);
  EXPECT_THROW(generate(spec, {{0, 0}}), DataError);
  auto bad = spec;
  bad.classes.resize(1);
  EXPECT_THROW(generate(bad, {{0, 1}}), ConfigError);
  bad = spec;
  bad.frame_h = 8;
  EXPECT_THROW(generate(bad, {{0, 1}}), ConfigError);
  bad = spec;
  bad.channels = 2;
  EXPECT_THROW(generate(bad, {{0, 1}}), ConfigError);
  bad = spec;
  bad.classes[1].name = bad.classes[0].name;
  EXPECT_THROW(validate(bad), ConfigError);
}

TEST(Datagen, SpecJsonRoundTrip) {
  const auto spec = default_source_spec(42);
  const auto back = generator_spec_from_json(to_json(spec));
  EXPECT_EQ(fingerprint(back), fingerprint(spec));
  EXPECT_THROW(generator_spec_from_json(json{{"classes", 1}}), ConfigError);
}

TEST(Split, BalancedTwoClassCase) {
  auto spec = default_target_spec(1);
  spec.classes.resize(2);
  // 100 windows of 8 frames, alternating classes.
  std::vector<Segment> segs;
  for (std::size_t i = 0; i < 100; ++i) segs.push_back({i % 2, 8});
  const auto s = generate(spec, segs);
  const auto [train, holdout] = split(s, 0.5, 3, 8);
  EXPECT_EQ(train.length(), 400u);
  EXPECT_EQ(holdout.length(), 400u);
  for (const auto* part : {&train, &holdout}) {
    const auto hist = label_histogram(part->labels, 2);
    EXPECT_EQ(hist[0], 200u);
    EXPECT_EQ(hist[1], 200u);
  }
}

TEST(Split, HistogramsOfPartsSumToWhole) {
  const auto spec = default_source_spec(2);
  const auto s = generate(spec, random_segments(5, 40, 3, 30, 8));
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto [train, holdout] = split(s, 0.7, seed, 8);
    const auto whole = label_histogram(s.labels, 5);
    const auto a = label_histogram(train.labels, 5), b = label_histogram(holdout.labels, 5);
    for (std::size_t c = 0; c < 5; ++c) {
      EXPECT_EQ(a[c] + b[c], whole[c]);
      if (whole[c] > 0) {
        EXPECT_GT(a[c], 0u);
        EXPECT_GT(b[c], 0u);
      }
    }
  }
}

TEST(Split, WindowsStayWhole) {
  // Every frame carries its own index as a pixel value, so frames can be traced.
  LabeledStream s{Tensor({64, 1, 1, 1}), {}, 0};
  for (std::size_t i = 0; i < 64; ++i) {
    s.frames[i] = static_cast<double>(i);
    s.labels.push_back((i / 8) % 2);
  }
  const auto [train, holdout] = split(s, 0.5, 1, 8);
  for (const auto* part : {&train, &holdout}) {
    for (std::size_t i = 0; i < part->length(); i += 8) {
      const auto first = static_cast<std::size_t>(part->frames[i]);
      EXPECT_EQ(first % 8, 0u);
      for (std::size_t k = 1; k < 8; ++k) EXPECT_EQ(part->frames[i + k], static_cast<double>(first + k));
    }
  }
}

TEST(Split, DegenerateInputsRejected) {
  const auto spec = default_target_spec(1);
  EXPECT_THROW(split(generate(spec, {{0, 40}}), 0.5, 1), DataError);
  EXPECT_THROW(split(generate(spec, {{0, 40}, {1, 8}}), 0.5, 1), DataError);
  EXPECT_THROW(split(generate(spec, {{0, 40}, {1, 40}}), 1.0, 1), ConfigError);
  EXPECT_THROW(split(generate(spec, {{0, 40}, {1, 40}}), 0.0, 1), ConfigError);
}

TEST(StreamFile, RoundTripQuantizesToEightBits) {
  const auto s = generate(default_target_spec(5), random_segments(3, 4, 2, 6, 1));
  const auto back = decode_stream(encode_stream(s));
  EXPECT_EQ(back.labels, s.labels);
  ASSERT_EQ(back.frames.shape(), s.frames.shape());
  for (std::size_t i = 0; i < s.frames.size(); ++i) {
    EXPECT_EQ(back.frames[i], std::round(255.0 * s.frames[i]) / 255.0);
  }
  // Header: magic, version, T, C, H, W; then u16 labels and u8 frames.
  const auto bytes = encode_stream(s);
  EXPECT_EQ(bytes.size(), 4 + 4 + 16 + 2 * s.length() + s.frames.size());
  EXPECT_EQ(encode_stream(back), bytes);
}

TEST(StreamFile, CorruptionIsReported) {
  const auto bytes = encode_stream(generate(default_target_spec(5), {{0, 2}}));
  auto bad = bytes;
  bad[1] = 'X';
  EXPECT_THROW(decode_stream(bad), FormatError);
  auto short_file = bytes;
  short_file.resize(bytes.size() - 1);
  EXPECT_THROW(decode_stream(short_file), FormatError);
  const auto dir = std::filesystem::temp_directory_path() / "edgecare_tlds_test";
  std::filesystem::create_directories(dir);
  const auto s = generate(default_target_spec(5), {{0, 2}});
  save_stream(s, dir / "s.tlds");
  EXPECT_EQ(encode_stream(load_stream(dir / "s.tlds")), encode_stream(s));
  std::filesystem::remove_all(dir);
}

TEST(Learnability, LinearProbeSeparatesDefaultTargetClasses) {
  // Dense HW -> C probe on 200 frames per class.
  auto spec = default_target_spec(31);
  const auto train = generate(spec, balanced_segments(3, 25, 8, 1));
  spec.seed = 32;
  const auto holdout = generate(spec, balanced_segments(3, 25, 8, 2));
  ASSERT_EQ(label_histogram(train.labels, 3), (std::vector<std::size_t>{200, 200, 200}));
  Rng rng(3);
  Model probe = Model::build({1, 16, 16}, {{"probe", 0, DenseSpec{256, 3}}}, rng);
  const auto result = fine_tune(probe, preset_policy("case1"), train, holdout, {40, 16, 0.05, 4, {}});
  EXPECT_GE(evaluate_model(result.best, holdout).accuracy, 0.80);
}
