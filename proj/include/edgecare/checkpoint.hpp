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

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <json.hpp>

#include "edgecare/error.hpp"
#include "edgecare/nn.hpp"

namespace edgecare {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Architecture <-> JSON
// ---------------------------------------------------------------------------

inline json layer_to_json(const LayerSpec& spec) {
  json j{{"name", spec.name}, {"block_id", spec.block_id}, {"kind", to_string(spec.kind())}};
  std::visit(
      [&](const auto& c) {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, Conv2dSpec>) {
          j["in_channels"] = c.in_channels;
          j["out_channels"] = c.out_channels;
          j["kernel_h"] = c.kernel_h;
          j["kernel_w"] = c.kernel_w;
          j["stride"] = c.stride;
          j["padding"] = c.padding;
        } else if constexpr (std::is_same_v<T, BatchNormSpec>) {
          j["num_features"] = c.num_features;
          j["epsilon"] = c.epsilon;
          j["momentum"] = c.momentum;
        } else if constexpr (std::is_same_v<T, MaxPool2dSpec>) {
          j["kernel"] = c.kernel;
          j["stride"] = c.stride;
        } else if constexpr (std::is_same_v<T, DenseSpec>) {
          j["in_features"] = c.in_features;
          j["out_features"] = c.out_features;
        }
      },
      spec.config);
  return j;
}

inline LayerSpec layer_from_json(const json& j) {
  try {
    LayerSpec spec;
    spec.name = j.at("name").get<std::string>();
    spec.block_id = j.value("block_id", 0);
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "conv2d") {
      spec.config = Conv2dSpec{j.at("in_channels"), j.at("out_channels"), j.value("kernel_h", 3u),
                               j.value("kernel_w", 3u), j.value("stride", 1u), j.value("padding", 0u)};
    } else if (kind == "batchnorm") {
      spec.config = BatchNormSpec{j.at("num_features"), j.value("epsilon", 1e-5), j.value("momentum", 0.1)};
    } else if (kind == "relu") {
      spec.config = ReluSpec{};
    } else if (kind == "maxpool2d") {
      spec.config = MaxPool2dSpec{j.value("kernel", 2u), j.value("stride", 2u)};
    } else if (kind == "globalavgpool") {
      spec.config = GlobalAvgPoolSpec{};
    } else if (kind == "dense") {
      spec.config = DenseSpec{j.at("in_features"), j.at("out_features")};
    } else {
      throw ConfigError("unknown layer kind '" + kind + "'");
    }
    return spec;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed layer spec: ") + e.what());
  }
}

inline json architecture_to_json(const InputShape& input, const std::vector<LayerSpec>& specs) {
  json layers = json::array();
  for (const auto& s : specs) layers.push_back(layer_to_json(s));
  return json{{"input", {{"channels", input.channels}, {"height", input.height}, {"width", input.width}}},
              {"layers", layers}};
}

struct Architecture {
  InputShape input;
  std::vector<LayerSpec> layers;
};

inline Architecture architecture_from_json(const json& j) {
  try {
    Architecture a;
    const auto& in = j.at("input");
    a.input = InputShape{in.at("channels"), in.at("height"), in.at("width")};
    for (const auto& l : j.at("layers")) a.layers.push_back(layer_from_json(l));
    return a;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed architecture: ") + e.what());
  }
}

inline std::vector<LayerSpec> layer_specs(const Model& model) {
  std::vector<LayerSpec> specs;
  for (const auto& l : model.layers()) specs.push_back(l.spec);
  return specs;
}

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[4] = {'T', 'L', 'E', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Provenance {
  std::string trained_on;
  std::uint64_t epochs = 0;
  std::uint64_t seed = 0;
  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct ModelCheckpoint {
  std::uint32_t format_version = kCheckpointVersion;
  Model model;
  std::vector<std::string> label_space;
  Provenance provenance;
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  bool has(std::size_t n) const { return bytes_.size() - pos_ >= n; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::uint64_t uint(int width, const char* what) {
    if (!has(static_cast<std::size_t>(width))) throw FormatError(CheckpointErrorCode::kTruncated, what);
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (!has(n)) throw FormatError(CheckpointErrorCode::kTruncated, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(CheckpointErrorCode::kIo, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Writes to a sibling temp file and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(CheckpointErrorCode::kIo, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError(CheckpointErrorCode::kIo, "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

inline json checkpoint_metadata(const ModelCheckpoint& ck) {
  json meta = architecture_to_json(ck.model.input_shape(), layer_specs(ck.model));
  meta["label_space"] = ck.label_space;
  meta["provenance"] = {{"trained_on", ck.provenance.trained_on},
                        {"epochs", ck.provenance.epochs},
                        {"seed", ck.provenance.seed}};
  json bn = json::array();
  for (const auto& l : ck.model.layers()) {
    if (const auto* c = std::get_if<BatchNormSpec>(&l.spec.config)) {
      bn.push_back({{"layer", l.spec.name}, {"epsilon", c->epsilon}, {"momentum", c->momentum}});
    }
  }
  meta["batchnorm"] = bn;
  return meta;
}

inline std::vector<std::uint8_t> encode_checkpoint(const ModelCheckpoint& ck) {
  if (ck.label_space.size() != ck.model.num_classes()) {
    throw DataError("label space has " + std::to_string(ck.label_space.size()) + " entries but model has " +
                    std::to_string(ck.model.num_classes()) + " classes");
  }
  const std::string meta = checkpoint_metadata(ck).dump();
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  detail::put_u32(out, ck.format_version);
  detail::put_u32(out, static_cast<std::uint32_t>(meta.size()));
  out.insert(out.end(), meta.begin(), meta.end());
  for (const auto& layer : ck.model.layers()) {
    for (const auto& t : layer.params) {
      detail::put_u64(out, t.size());
      for (double v : t.values()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
  }
  return out;
}

inline ModelCheckpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader in(bytes);
  if (!in.has(4) || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw FormatError(CheckpointErrorCode::kBadMagic, "not a TLEC checkpoint");
  }
  in.take(4, "magic");
  ModelCheckpoint ck;
  ck.format_version = static_cast<std::uint32_t>(in.uint(4, "format version"));
  if (ck.format_version != kCheckpointVersion) {
    throw FormatError(CheckpointErrorCode::kVersionMismatch,
                      "file version " + std::to_string(ck.format_version) + ", reader supports " +
                          std::to_string(kCheckpointVersion));
  }
  const auto meta_len = static_cast<std::size_t>(in.uint(4, "metadata length"));
  auto meta_bytes = in.take(meta_len, "metadata");
  json meta;
  try {
    meta = json::parse(meta_bytes.begin(), meta_bytes.end());
  } catch (const json::exception& e) {
    throw FormatError(CheckpointErrorCode::kTruncated, std::string("unreadable metadata: ") + e.what());
  }
  Architecture arch = architecture_from_json(meta);
  std::vector<Layer> layers;
  for (auto& spec : arch.layers) {
    Layer layer{spec, {}};
    for (const Shape& shape : parameter_shapes(spec)) {
      const std::uint64_t count = in.uint(8, "tensor element count");
      if (count != element_count(shape)) {
        throw FormatError(CheckpointErrorCode::kShapeMismatch,
                          "layer '" + spec.name + "' blob holds " + std::to_string(count) + " elements, expected " +
                              shape_string(shape));
      }
      if (!in.has(count * 8)) throw FormatError(CheckpointErrorCode::kTruncated, "tensor data of '" + spec.name + "'");
      std::vector<double> data(count);
      for (auto& v : data) v = std::bit_cast<double>(in.uint(8, "tensor element"));
      layer.params.emplace_back(shape, std::move(data));
    }
    layers.push_back(std::move(layer));
  }
  if (in.remaining() != 0) {
    throw FormatError(CheckpointErrorCode::kShapeMismatch,
                      std::to_string(in.remaining()) + " bytes follow the last tensor");
  }
  try {
    ck.model = Model::from_parts(arch.input, std::move(layers));
  } catch (const ShapeError& e) {
    throw FormatError(CheckpointErrorCode::kShapeMismatch, e.what());
  } catch (const ConfigError& e) {
    throw FormatError(CheckpointErrorCode::kShapeMismatch, e.what());
  }
  ck.label_space = meta.value("label_space", std::vector<std::string>{});
  if (ck.label_space.size() != ck.model.num_classes()) {
    throw FormatError(CheckpointErrorCode::kShapeMismatch, "label space length does not match the class head");
  }
  const auto& prov = meta.value("provenance", json::object());
  ck.provenance = Provenance{prov.value("trained_on", ""), prov.value("epochs", std::uint64_t{0}),
                             prov.value("seed", std::uint64_t{0})};
  return ck;
}

inline void save_checkpoint(const ModelCheckpoint& ck, const std::filesystem::path& path) {
  detail::write_file_atomic(path, encode_checkpoint(ck));
}

inline ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path));
}

}  // namespace edgecare
