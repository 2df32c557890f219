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

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "masf/detector.hpp"

namespace masf {

enum class ShiftPattern { kGlobal, kSinglePixel };

std::string_view to_string(ShiftPattern p);
ShiftPattern parse_shift_pattern(std::string_view text);

struct ShiftModel {
  double fraction = 0.0;    // share of each layer's channels that are shifted
  double magnitude = 0.0;   // in units of the channel's pixel sd
  ShiftPattern pattern = ShiftPattern::kGlobal;
};

/// Class-conditional Gaussian feature maps. Pixel (i) of channel j in layer l
/// for a class-c record is
///   mu + sigma * (0.3 g + 0.5 u_j + 0.812 e_i)
/// with g shared by the whole record, u_j by the channel and e_i per pixel,
/// all standard normal; mu ~ N(0,1) and log sigma ~ N(0, 0.25^2) are fixed per
/// (c, l, j) by the seed.
struct SyntheticSpec {
  int num_classes = 2;
  std::vector<LayerDescriptor> layers;
  ShiftModel shift;
  std::uint64_t seed = 0;
};

/// Layers named "l0", "l1", ... from "CxHxW" shapes.
std::vector<LayerDescriptor> make_layers(const std::vector<std::array<std::uint32_t, 3>>& shapes);

/// Deterministic, on-demand record generator. `stream` separates independent
/// draws (calibration vs. test) from the same null model.
class SyntheticSource : public RecordSource {
 public:
  SyntheticSource(SyntheticSpec spec, std::size_t per_class, std::uint64_t stream = 0);

  const std::vector<LayerDescriptor>& layers() const override { return spec_.layers; }
  int num_classes() const override { return spec_.num_classes; }
  std::size_t class_size(ClassId) const override { return per_class_; }
  void visit_class(ClassId c, std::size_t begin, std::size_t end,
                   const std::function<void(const FeatureRecord&)>& fn) const override;

  /// Record `index` of class `c`, shifted per the source's shift model.
  FeatureRecord record(ClassId c, std::size_t index) const;

  /// Channels carrying the shift, per layer.
  const std::vector<std::vector<std::uint32_t>>& shifted_channels() const { return shifted_; }
  const SyntheticSpec& spec() const { return spec_; }

 private:
  SyntheticSpec spec_;
  std::size_t per_class_;
  std::uint64_t stream_;
  std::vector<std::vector<std::vector<float>>> mu_, sigma_;  // [c][l][j]
  std::vector<std::vector<std::uint32_t>> shifted_;
  std::vector<std::vector<bool>> is_shifted_;
};

/// Writes every record of `source` to `dir` as one rank-4 batch file per
/// layer plus "manifest.json"; returns the manifest path. Labels are written
/// when `labeled`; y_hat is always the generating class.
std::filesystem::path write_synthetic(const SyntheticSource& source, const std::filesystem::path& dir,
                                      const std::string& dataset, bool labeled);

}  // namespace masf
