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

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace masf {

enum class LookupMode {
  kStep,    // step eCDF between grid points
  kLinear,  // linear interpolation between grid points
};

struct TrackerConfig {
  std::size_t batch_size = 1000;
  std::vector<double> body_percentiles = {0.025, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.975};
  std::size_t tail_k = 200;     // extremes retained exactly on each side
  std::size_t tail_grid = 10;   // grid points taken from each retained tail
  LookupMode lookup = LookupMode::kStep;

  /// Throws InvalidArgument when the invariants do not hold.
  void validate() const;
};

/// One stored point of a compressed eCDF: `level` is the (+1)-corrected eCDF
/// value at `value`, i.e. (#{s <= value} + 1) / (n + 1).
struct GridPoint {
  double level = 0.0;
  double value = 0.0;

  friend bool operator==(const GridPoint&, const GridPoint&) = default;
};

struct TailProbabilities {
  double right = 1.0;  // P(T >= x)
  double left = 1.0;   // P(T <= x)
};

/// Frozen, compressed empirical distribution of one statistic.
///
/// left_tail(x) follows the step eCDF: the level of the largest stored value
/// <= x, floored at 1/(n+1). right_tail(x) mirrors it conservatively: with v
/// the largest stored value strictly below x, it is (#{s >= x} + 1)/(n + 1)
/// bounded from above by (n - #{s <= v} + 1)/(n + 1). On a grid holding every
/// sample both tails are exact.
class QuantileTable {
 public:
  QuantileTable() = default;
  QuantileTable(std::vector<GridPoint> points, std::uint64_t n_total,
                LookupMode mode = LookupMode::kStep);

  /// Exact eCDF of `sample` compressed to one point per `resolution` of
  /// level, plus the sample extremes.
  static QuantileTable from_sample(std::vector<double> sample, double resolution = 1e-3,
                                   LookupMode mode = LookupMode::kStep);

  bool frozen() const { return n_total_ > 0; }
  std::uint64_t n_total() const { return n_total_; }
  LookupMode mode() const { return mode_; }
  std::span<const GridPoint> points() const { return points_; }

  /// Smallest reportable tail probability, 1/(n+1).
  double floor() const { return 1.0 / (static_cast<double>(n_total_) + 1.0); }

  double left_tail(double x) const;
  double right_tail(double x) const;
  TailProbabilities lookup_tails(double x) const { return {right_tail(x), left_tail(x)}; }

  /// Value at eCDF level `p`, interpolating linearly between stored points.
  double quantile(double p) const;

  friend bool operator==(const QuantileTable&, const QuantileTable&) = default;

 private:
  void require_frozen() const;

  std::vector<GridPoint> points_;
  std::vector<double> values_;  // points_[i].value, for binary search
  std::uint64_t n_total_ = 0;
  LookupMode mode_ = LookupMode::kStep;
};

/// Streaming estimator of one statistic's distribution under a fixed memory
/// budget. Each full batch contributes its order statistics at the body
/// percentiles to a running (size-weighted) mean; the `tail_k` smallest and
/// largest values over the whole stream are kept exactly.
class QuantileTracker {
 public:
  explicit QuantileTracker(TrackerConfig config = {});

  /// Buffers one value; a full buffer is observed as a batch.
  void add(double value);

  /// Observes one batch. Only the final batch may be shorter than batch_size.
  void observe_batch(std::span<const double> values);

  /// Flushes any buffered remainder, freezes the tracker and builds the table.
  QuantileTable finalize();

  bool frozen() const { return frozen_; }
  std::uint64_t n_total() const { return n_total_; }
  std::size_t full_batches() const { return full_batches_; }
  bool saw_short_batch() const { return short_batch_; }

  /// Running mean of the per-batch order statistic for body_percentiles[i].
  double body_estimate(std::size_t i) const { return body_mean_.at(i); }
  std::span<const double> bottom_tail() const { return bottom_; }  // ascending
  std::span<const double> top_tail() const { return top_; }        // descending

  /// The frozen table; throws NotFrozen before finalize().
  const QuantileTable& table() const;

  const TrackerConfig& config() const { return config_; }

 private:
  void ingest(std::span<const double> values);

  TrackerConfig config_;
  std::vector<double> buffer_;
  std::vector<double> scratch_;
  std::vector<double> body_mean_;
  std::vector<std::uint64_t> body_count_;  // summed per-batch #{s <= estimate}
  std::vector<double> bottom_;
  std::vector<double> top_;
  std::uint64_t n_total_ = 0;
  std::size_t full_batches_ = 0;
  bool short_batch_ = false;
  bool frozen_ = false;
  QuantileTable table_;
};

}  // namespace masf
