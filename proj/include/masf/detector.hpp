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

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "masf/quantile_store.hpp"
#include "masf/reductions.hpp"
#include "masf/tensor_io.hpp"

namespace masf {

enum class SplitMode { kReuse, kDisjoint };

std::string_view to_string(SplitMode mode);
SplitMode parse_split_mode(std::string_view text);

/// Reductions plus the fixed subset of layers and channels under test.
struct DetectorScheme {
  Scheme reductions;
  std::vector<std::uint32_t> monitored_layers;                // positions in the layer list, ascending
  std::vector<std::vector<std::uint32_t>> channel_masks;      // per monitored layer, ascending
  double sampling_rate = 1.0;
  std::uint64_t seed = 0;

  friend bool operator==(const DetectorScheme&, const DetectorScheme&) = default;
};

/// Per layer, ceil(rate * channels) distinct channels drawn uniformly without
/// replacement. Depends only on (seed, layer id, channel count).
std::vector<std::vector<std::uint32_t>> sample_channels(std::span<const LayerDescriptor> layers, double rate,
                                                        std::uint64_t seed);

/// Scheme over `layers` monitoring `monitored` (all layers when empty) with
/// channels sampled at `rate`.
DetectorScheme make_scheme(const Scheme& reductions, std::span<const LayerDescriptor> layers, double rate,
                           std::uint64_t seed, std::vector<std::uint32_t> monitored = {});

/// Labeled records grouped by class, visited in a fixed order.
class RecordSource {
 public:
  virtual ~RecordSource() = default;

  virtual const std::vector<LayerDescriptor>& layers() const = 0;
  virtual int num_classes() const = 0;
  /// Number of records of class `c`; throws MissingLabels if unlabeled.
  virtual std::size_t class_size(ClassId c) const = 0;
  /// Calls `fn` on records [begin, end) of class `c`, in order.
  virtual void visit_class(ClassId c, std::size_t begin, std::size_t end,
                           const std::function<void(const FeatureRecord&)>& fn) const = 0;
};

class ManifestSource : public RecordSource {
 public:
  explicit ManifestSource(Manifest manifest);

  const std::vector<LayerDescriptor>& layers() const override { return manifest_.layers; }
  int num_classes() const override { return manifest_.num_classes; }
  std::size_t class_size(ClassId c) const override;
  void visit_class(ClassId c, std::size_t begin, std::size_t end,
                   const std::function<void(const FeatureRecord&)>& fn) const override;

  const Manifest& manifest() const { return manifest_; }

 private:
  Manifest manifest_;
  std::vector<std::vector<std::size_t>> by_class_;
  bool unlabeled_ = false;
};

struct CalibrationOptions {
  SplitMode split = SplitMode::kReuse;
  TrackerConfig tracker;
  double table_resolution = 1e-3;    // layer and final tables
  std::optional<double> ridge;       // Mahalanobis ridge; default scales with the covariance
  unsigned threads = 0;              // 0: hardware concurrency
};

struct ClassCalibration {
  std::uint64_t phase1_samples = 0;  // records behind the channel tables / Mahalanobis fit
  std::uint64_t phase2_samples = 0;  // records behind the layer and final tables
};

struct DetectionReport {
  std::string id;
  std::vector<double> q;             // per class
  double q_max = 1.0;
  std::optional<ClassId> y_hat;
  std::optional<double> q_yhat;

  /// Rejects when q_max <= alpha.
  bool reject(double alpha) const { return q_max <= alpha; }
};

/// alpha * accuracy + (1 - accuracy): the type-I error bound of testing only
/// the predicted class.
double adjusted_alpha_bound(double alpha, double accuracy);

class CalibratedDetector {
 public:
  const DetectorScheme& scheme() const { return scheme_; }
  const std::vector<LayerDescriptor>& layers() const { return layers_; }
  int num_classes() const { return static_cast<int>(classes_.size()); }
  SplitMode split() const { return split_; }
  const TrackerConfig& tracker_config() const { return tracker_; }
  const ClassCalibration& calibration(ClassId c) const { return classes_.at(static_cast<std::size_t>(c)).info; }

  /// Table of monitored layer `li` (index into scheme().monitored_layers),
  /// mask position `jpos`.
  const QuantileTable& channel_table(ClassId c, std::size_t li, std::size_t jpos) const;
  const QuantileTable& layer_table(ClassId c, std::size_t li) const;
  const QuantileTable& final_table(ClassId c) const;
  const MahalanobisFit* mahalanobis(std::size_t li) const;
  std::size_t channel_table_count() const;

  /// Class-conditional p-value of `record`.
  double score(const FeatureRecord& record, ClassId c) const;
  DetectionReport score_all_classes(const FeatureRecord& record) const;

  friend bool operator==(const CalibratedDetector&, const CalibratedDetector&);

 private:
  struct ClassTables {
    ClassCalibration info;
    std::vector<std::vector<QuantileTable>> channel;   // [li][jpos]
    std::vector<std::vector<double>> q05;              // delta-star band, [li][jpos]
    std::vector<std::vector<double>> q95;
    std::vector<QuantileTable> layer;                  // [li]
    QuantileTable final;
  };

  struct Scratch {
    std::vector<std::vector<double>> spatial;  // [li][jpos]
    std::vector<double> work;
    std::vector<double> layer_p;
  };

  void check_shape(const FeatureRecord& record) const;
  void spatial_values(const FeatureRecord& record, Scratch& s) const;
  double layer_statistic(ClassId c, std::size_t li, std::span<const double> spatial, Scratch& s) const;
  double final_statistic(ClassId c, Scratch& s) const;
  double score_prepared(ClassId c, Scratch& s) const;
  const ClassTables& tables(ClassId c) const;

  DetectorScheme scheme_;
  std::vector<LayerDescriptor> layers_;
  SplitMode split_ = SplitMode::kReuse;
  TrackerConfig tracker_;
  std::vector<ClassTables> classes_;
  std::vector<std::optional<MahalanobisFit>> maha_;  // [li]

  friend CalibratedDetector calibrate(const RecordSource&, const DetectorScheme&, const CalibrationOptions&);
  friend std::string serialize_detector(const CalibratedDetector&);
  friend CalibratedDetector deserialize_detector(std::string_view);
};

/// Two-phase calibration: phase 1 builds per-channel tables (or the
/// Mahalanobis fit), phase 2 the per-layer and final tables. Under kDisjoint
/// the first half of each class feeds phase 1 and the rest phase 2.
CalibratedDetector calibrate(const RecordSource& source, const DetectorScheme& scheme,
                             const CalibrationOptions& options = {});

inline constexpr char kDetectorMagic[8] = {'M', 'A', 'S', 'F', 'C', 'A', 'L', '1'};
inline constexpr std::uint16_t kDetectorVersion = 1;

std::string serialize_detector(const CalibratedDetector& detector);
CalibratedDetector deserialize_detector(std::string_view bytes);
void save_detector(const CalibratedDetector& detector, const std::filesystem::path& path);
CalibratedDetector load_detector(const std::filesystem::path& path);

}  // namespace masf
