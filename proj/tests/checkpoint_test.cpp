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

#include <cstring>
#include <filesystem>

#include <gtest/gtest.h>

#include "edgecare/checkpoint.hpp"
#include "edgecare/transfer.hpp"
#include "fixtures.hpp"

using namespace edgecare;

namespace {

ModelCheckpoint sample_checkpoint() {
  auto g = fixtures::random_grad_case(12);
  std::vector<std::string> labels;
  for (std::size_t j = 0; j < g.model.num_classes(); ++j) labels.push_back("c" + std::to_string(j));
  return {kCheckpointVersion, g.model, labels, {"unit-test", 3, 99}};
}

std::uint32_t read_u32(const std::vector<std::uint8_t>& b, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[at + i]) << (8 * i);
  return v;
}

CheckpointErrorCode decode_error(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_checkpoint(bytes);
  } catch (const FormatError& e) {
    return e.code();
  }
  ADD_FAILURE() << "decode succeeded";
  return CheckpointErrorCode::kIo;
}

}  // namespace

TEST(Checkpoint, RoundTripIsLossless) {
  const auto ck = sample_checkpoint();
  const auto back = decode_checkpoint(encode_checkpoint(ck));
  EXPECT_EQ(back.label_space, ck.label_space);
  EXPECT_EQ(back.provenance, ck.provenance);
  EXPECT_EQ(back.model.input_shape(), ck.model.input_shape());
  ASSERT_EQ(back.model.layers().size(), ck.model.layers().size());
  for (std::size_t i = 0; i < ck.model.layers().size(); ++i) {
    EXPECT_EQ(back.model.layers()[i].spec, ck.model.layers()[i].spec);
    EXPECT_EQ(back.model.layers()[i].params, ck.model.layers()[i].params);
  }
  EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(ck));
}

TEST(Checkpoint, ByteLayoutMatchesSizeFormula) {
  const auto ck = sample_checkpoint();
  const auto bytes = encode_checkpoint(ck);
  ASSERT_EQ(std::memcmp(bytes.data(), "TLEC", 4), 0);
  EXPECT_EQ(read_u32(bytes, 4), 1u);
  std::size_t expected = 12 + read_u32(bytes, 8);
  for (const auto& layer : ck.model.layers()) {
    for (const auto& t : layer.params) expected += 8 + 8 * t.size();
  }
  EXPECT_EQ(bytes.size(), expected);
  // Metadata is the architecture plus label space, provenance and batchnorm settings.
  const auto meta = json::parse(bytes.begin() + 12, bytes.begin() + 12 + read_u32(bytes, 8));
  for (const char* key : {"input", "layers", "label_space", "provenance", "batchnorm"}) EXPECT_TRUE(meta.contains(key)) << key;
}

TEST(Checkpoint, DistinctErrorsForDistinctCorruption) {
  const auto good = encode_checkpoint(sample_checkpoint());

  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_EQ(decode_error(bad_magic), CheckpointErrorCode::kBadMagic);

  auto bad_version = good;
  bad_version[4] = 2;
  EXPECT_EQ(decode_error(bad_version), CheckpointErrorCode::kVersionMismatch);

  auto truncated = good;
  truncated.resize(good.size() - 5);
  EXPECT_EQ(decode_error(truncated), CheckpointErrorCode::kTruncated);
  EXPECT_EQ(decode_error({good.begin(), good.begin() + 6}), CheckpointErrorCode::kTruncated);

  auto trailing = good;
  trailing.push_back(0);
  EXPECT_EQ(decode_error(trailing), CheckpointErrorCode::kShapeMismatch);

  // First tensor count no longer matches the declared layer shape.
  auto wrong_count = good;
  wrong_count[12 + read_u32(good, 8)] ^= 1;
  EXPECT_EQ(decode_error(wrong_count), CheckpointErrorCode::kShapeMismatch);
}

TEST(Checkpoint, LabelSpaceMustMatchHead) {
  auto ck = sample_checkpoint();
  ck.label_space.pop_back();
  EXPECT_THROW(encode_checkpoint(ck), DataError);
}

TEST(Checkpoint, FileRoundTripAndMissingFile) {
  const auto dir = std::filesystem::temp_directory_path() / "edgecare_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto ck = sample_checkpoint();
  save_checkpoint(ck, dir / "m.tlec");
  EXPECT_EQ(encode_checkpoint(load_checkpoint(dir / "m.tlec")), encode_checkpoint(ck));
  EXPECT_FALSE(std::filesystem::exists(dir / "m.tlec.tmp"));
  try {
    load_checkpoint(dir / "absent.tlec");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.code(), CheckpointErrorCode::kIo);
  }
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, ArchitectureJsonRoundTrip) {
  const auto arch = reference_architecture({1, 16, 16}, 3);
  const auto back = architecture_from_json(architecture_to_json(arch.input, arch.layers));
  EXPECT_EQ(back.input, arch.input);
  EXPECT_EQ(back.layers, arch.layers);
  EXPECT_THROW(architecture_from_json(json{{"input", 3}}), ConfigError);
}
