// Copyright 2026 The masf Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "masf/error.hpp"

namespace masf {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kIo: return "IoError";
    case ErrorCode::kMalformedManifest: return "MalformedManifest";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kMissingTensor: return "MissingTensor";
    case ErrorCode::kNonFiniteTensor: return "NonFiniteTensor";
    case ErrorCode::kLengthMismatch: return "LengthMismatch";
    case ErrorCode::kEmptySample: return "EmptySample";
    case ErrorCode::kEmptyVector: return "EmptyVector";
    case ErrorCode::kOutOfRange: return "OutOfRange";
    case ErrorCode::kZeroPValue: return "ZeroPValue";
    case ErrorCode::kFrozenTracker: return "FrozenTracker";
    case ErrorCode::kEmptyBatch: return "EmptyBatch";
    case ErrorCode::kInsufficientData: return "InsufficientData";
    case ErrorCode::kNotFrozen: return "NotFrozen";
    case ErrorCode::kNonFinite: return "NonFinite";
    case ErrorCode::kDimensionMismatch: return "DimensionMismatch";
    case ErrorCode::kDegenerateCovariance: return "DegenerateCovariance";
    case ErrorCode::kArityMismatch: return "ArityMismatch";
    case ErrorCode::kInvalidScheme: return "InvalidScheme";
    case ErrorCode::kInsufficientSamples: return "InsufficientSamples";
    case ErrorCode::kMissingLabels: return "MissingLabels";
    case ErrorCode::kUncalibratedClass: return "UncalibratedClass";
    case ErrorCode::kVersionMismatch: return "VersionMismatch";
    case ErrorCode::kCorrupt: return "Corrupt";
    case ErrorCode::kEmptyScores: return "EmptyScores";
    case ErrorCode::kTooFewSamples: return "TooFewSamples";
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kClockUnavailable: return "ClockUnavailable";
  }
  return "Unknown";
}

}  // namespace masf
