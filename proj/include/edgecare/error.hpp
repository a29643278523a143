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

#include <stdexcept>
#include <string>

namespace edgecare {

// Error hierarchy. The CLI maps each family onto a distinct exit code.

// Bad user input: malformed config, unknown layer/block, invalid flags.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad data: shape mismatches, corrupted files, labels out of range.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A shape contract between two layers (or a layer and its input) is broken.
class ShapeError : public DataError {
 public:
  ShapeError(const std::string& layer, const std::string& what)
      : DataError("shape mismatch at layer '" + layer + "': " + what), layer_(layer) {}
  const std::string& layer() const noexcept { return layer_; }

 private:
  std::string layer_;
};

enum class CheckpointErrorCode { kBadMagic, kVersionMismatch, kTruncated, kShapeMismatch, kIo };

inline const char* to_string(CheckpointErrorCode code) {
  switch (code) {
    case CheckpointErrorCode::kBadMagic: return "bad magic";
    case CheckpointErrorCode::kVersionMismatch: return "version mismatch";
    case CheckpointErrorCode::kTruncated: return "truncated blob";
    case CheckpointErrorCode::kShapeMismatch: return "shape mismatch";
    case CheckpointErrorCode::kIo: return "io error";
  }
  return "unknown";
}

// Raised by binary file loaders (checkpoints and stream files).
class FormatError : public DataError {
 public:
  FormatError(CheckpointErrorCode code, const std::string& detail)
      : DataError(std::string(to_string(code)) + ": " + detail), code_(code) {}
  CheckpointErrorCode code() const noexcept { return code_; }

 private:
  CheckpointErrorCode code_;
};

// An internal consistency check failed. Always a bug.
class InvariantError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace edgecare
