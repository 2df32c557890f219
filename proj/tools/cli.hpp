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

#pragma once

#include <iosfwd>

namespace masf::cli {

/// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;        // IO, corrupt artifact, anything else
inline constexpr int kExitUsage = 2;          // bad or missing flags, invalid scheme
inline constexpr int kExitInsufficient = 3;   // too few or unlabeled samples
inline constexpr int kExitShape = 4;          // record does not match the detector

/// Runs one command line. Regular output goes to `out`, logs and errors to
/// `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace masf::cli
