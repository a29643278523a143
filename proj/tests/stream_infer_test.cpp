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

#include "edgecare/stream_infer.hpp"
#include "oracles.hpp"

using namespace edgecare;

namespace {

std::vector<FrameScore> frames_from_predictions(const std::vector<std::size_t>& preds, std::size_t classes) {
  std::vector<FrameScore> out;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    FrameScore f{i, {std::vector<double>(classes, 0.1)}, 1, preds[i]};
    f.score.probs[preds[i]] = 1.0 - 0.1 * static_cast<double>(classes - 1);
    out.push_back(f);
  }
  return out;
}

std::vector<WindowScore> random_window_scores(const std::vector<std::size_t>& starts, std::size_t classes, Rng& rng) {
  std::vector<WindowScore> out;
  for (std::size_t s : starts) {
    std::vector<double> z(classes);
    for (double& v : z) v = rng.normal() * 3.0;
    out.push_back({s, softmax(z)});
  }
  return out;
}

}  // namespace

TEST(Windows, TailWindowAnchoredAtEnd) {
  EXPECT_EQ(window_starts(9, {4, 3}), (std::vector<std::size_t>{0, 3, 5}));
  EXPECT_EQ(window_starts(12, {4, 4}), (std::vector<std::size_t>{0, 4, 8}));
  EXPECT_EQ(window_starts(4, {4, 2}), (std::vector<std::size_t>{0}));
  EXPECT_THROW(window_starts(3, {4, 2}), DataError);
  EXPECT_THROW(window_starts(10, {4, 5}), ConfigError);
  EXPECT_THROW(window_starts(10, {0, 0}), ConfigError);
}

TEST(Windows, StartsMatchEnumerationAndCoverEveryFrame) {
  Rng rng(4);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t w = 1 + rng.below(16), s = 1 + rng.below(w), t = w + rng.below(50);
    const auto starts = window_starts(t, {w, s});
    EXPECT_EQ(starts, oracle::covering_starts(t, w, s)) << t << " " << w << " " << s;
    std::vector<int> covered(t, 0);
    for (std::size_t st : starts) {
      for (std::size_t f = st; f < st + w; ++f) covered[f] = 1;
    }
    EXPECT_EQ(std::count(covered.begin(), covered.end(), 1), static_cast<long>(t));
  }
}

TEST(Windows, ExtractedFramesMatchStream) {
  Tensor stream({7, 1, 1, 2});
  for (std::size_t i = 0; i < stream.size(); ++i) stream[i] = static_cast<double>(i);
  const auto windows = extract_windows(stream, {3, 2});
  ASSERT_EQ(windows.size(), 3u);
  EXPECT_EQ(windows[2].start, 4u);
  EXPECT_EQ(windows[2].frames.shape(), (Shape{3, 1, 1, 2}));
  EXPECT_EQ(windows[2].frames[0], 8.0);
}

TEST(FrameScores, SingleWindowCopiesItsScore) {
  const std::vector<WindowScore> ws{{0, softmax(std::vector<double>{0.3, -1.0, 2.0})}};
  const auto frames = score_frames(ws, {5, 5}, 5);
  for (const auto& f : frames) {
    EXPECT_EQ(f.num_windows, 1u);
    EXPECT_EQ(f.score.probs, ws[0].score.probs);
  }
}

TEST(FrameScores, TwoWindowMean) {
  const std::vector<WindowScore> ws{{0, {{1.0, 0.0, 0.0}}}, {1, {{0.0, 1.0, 0.0}}}};
  const auto frames = score_frames(ws, {2, 1}, 3);
  EXPECT_EQ(frames[1].score.probs, (std::vector<double>{0.5, 0.5, 0.0}));
  EXPECT_EQ(frames[1].num_windows, 2u);
  EXPECT_EQ(frames[0].score.probs, (std::vector<double>{1.0, 0.0, 0.0}));
}

TEST(FrameScores, EqualBruteForceCoveringAverage) {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t w = 1 + rng.below(16), s = 1 + rng.below(w), t = w + rng.below(64 - w + 1);
    const std::size_t c = 2 + rng.below(3);
    auto ws = random_window_scores(window_starts(t, {w, s}), c, rng);
    std::vector<std::pair<std::size_t, std::vector<double>>> plain;
    for (const auto& x : ws) plain.emplace_back(x.start, x.score.probs);
    const auto expected = oracle::frame_scores(plain, t, w);
    // Input order must not matter.
    rng.shuffle(ws);
    const auto frames = score_frames(ws, {w, s}, t);
    for (std::size_t f = 0; f < t; ++f) ASSERT_EQ(frames[f].score.probs, expected[f]) << "frame " << f;
  }
}

TEST(FrameScores, UncoveredFrameIsInvariantViolation) {
  const std::vector<WindowScore> ws{{0, {{1.0, 0.0}}}};
  EXPECT_THROW(score_frames(ws, {2, 2}, 4), InvariantError);
}

TEST(Events, RunLengthSegmentation) {
  const auto frames = frames_from_predictions({0, 0, 1, 1, 1, 0}, 2);
  const auto events = segment_events(frames, {"fall", "resting"}, {}, "s", 7);
  ASSERT_EQ(events.size(), 3u);
  EXPECT_EQ(events[0].start, 0u);
  EXPECT_EQ(events[0].end, 1u);
  EXPECT_EQ(events[0].activity, "fall");
  EXPECT_EQ(events[0].category, Category::kAlert);
  EXPECT_EQ(events[1].start, 2u);
  EXPECT_EQ(events[1].end, 4u);
  EXPECT_EQ(events[1].category, Category::kInfo);
  EXPECT_EQ(events[2].start, 5u);
  EXPECT_EQ(events[2].end, 5u);
  EXPECT_NEAR(events[0].confidence, 0.9, 1e-15);
  EXPECT_EQ(events[2].tick, 7u);
}

TEST(Events, SinglePredictionGivesOneEvent) {
  const auto events = segment_events(frames_from_predictions({2, 2, 2, 2}, 3), {"a", "b", "c"}, {}, "s", 0);
  ASSERT_EQ(events.size(), 1u);
  EXPECT_EQ(events[0].start, 0u);
  EXPECT_EQ(events[0].end, 3u);
}

TEST(Events, CategoryMapOverridesDefaults) {
  EXPECT_EQ(CategoryMap{}.lookup("fall"), Category::kAlert);
  EXPECT_EQ(CategoryMap{}.lookup("call_for_help"), Category::kServiceRequest);
  EXPECT_EQ(CategoryMap{}.lookup("resting"), Category::kInfo);
  const auto m = category_map_from_json(json{{"resting", "ALERT"}});
  EXPECT_EQ(m.lookup("resting"), Category::kAlert);
  EXPECT_THROW(category_map_from_json(json{{"x", "PANIC"}}), ConfigError);
}

TEST(Events, JsonLineFormat) {
  const InferenceEvent e{"sensor0/3", 4, 9, "fall", 0.5, Category::kAlert, 12};
  EXPECT_EQ(to_json_line(e),
            "{\"stream_id\":\"sensor0/3\",\"start\":4,\"end\":9,\"activity\":\"fall\",\"confidence\":0.500000,"
            "\"category\":\"ALERT\",\"tick\":12}");
}

TEST(AveragePrecision, HandComputedCase) {
  // Positives rank 1, 2 and 4: envelope precisions 1, 1, 3/4.
  const std::vector<double> scores{0.9, 0.8, 0.7, 0.6, 0.55, 0.2};
  const std::vector<std::uint8_t> positive{1, 1, 0, 1, 0, 0};
  EXPECT_NEAR(*average_precision(scores, positive), 11.0 / 12.0, 1e-15);
}

TEST(AveragePrecision, MatchesBruteForceEnvelope) {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(50);
    std::vector<double> scores(n);
    std::vector<std::uint8_t> pos(n);
    std::vector<int> pos_int(n);
    // Coarse scores force ties.
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = static_cast<double>(rng.below(6)) / 5.0;
      pos[i] = static_cast<std::uint8_t>(rng.below(2));
      pos_int[i] = pos[i];
    }
    const auto ap = average_precision(scores, pos);
    if (std::count(pos.begin(), pos.end(), 1) == 0) {
      EXPECT_FALSE(ap.has_value());
      continue;
    }
    EXPECT_NEAR(*ap, oracle::average_precision(scores, pos_int), 1e-12);
  }
}

TEST(Evaluate, PerfectPredictions) {
  const std::vector<std::size_t> labels{0, 1, 2, 2, 1, 0, 0};
  const auto r = evaluate(frames_from_predictions(labels, 3), labels);
  EXPECT_EQ(r.mean_ap, 1.0);
  EXPECT_EQ(r.frame_accuracy, 1.0);
  EXPECT_EQ(r.confusion[2][2], 2u);
}

TEST(Evaluate, AbsentClassExcludedAndFlagged) {
  const std::vector<std::size_t> labels{0, 0, 1, 1};
  const auto r = evaluate(frames_from_predictions(labels, 3), labels, {"a", "b", "c"});
  EXPECT_FALSE(r.per_class_ap[2].has_value());
  EXPECT_EQ(r.undefined_ap_classes, (std::vector<std::string>{"c"}));
  EXPECT_EQ(r.mean_ap, 1.0);
}

TEST(Evaluate, IndependentScoresGiveChanceAccuracy) {
  Rng rng(33);
  const std::size_t t = 10000;
  std::vector<FrameScore> frames;
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < t; ++i) {
    const double p = rng.uniform();
    frames.push_back({i, {{p, 1.0 - p}}, 1, 0});
    labels.push_back(i % 2);
  }
  EXPECT_NEAR(evaluate(frames, labels).frame_accuracy, 0.5, 0.05);
}

TEST(Evaluate, RejectsMismatchedInput) {
  const auto frames = frames_from_predictions({0, 1}, 2);
  EXPECT_THROW(evaluate(frames, std::vector<std::size_t>{0}), DataError);
  EXPECT_THROW(evaluate(frames, std::vector<std::size_t>{0, 2}), DataError);
  EXPECT_THROW(evaluate(frames, std::vector<std::size_t>{0, 1}, {"only"}), ConfigError);
}
