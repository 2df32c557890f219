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

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "masf/tensor_io.hpp"

namespace masf {

enum class SpatialKind { kMax, kMean, kGramP1, kGramP1DeltaStar, kMaxDeltaStar };
enum class ChannelKind { kSimes, kFisher, kMahalanobisLDA, kMahalanobisGDA, kSum };
enum class LayerKind { kFisher, kSimes };

/// Which end of a statistic's distribution signals an anomaly.
enum class Orientation { kUpper, kLower };

/// A (spatial, channel, layer) reduction triple, written "<spatial>-<channel>-<layer>",
/// e.g. "max-simes-fisher".
struct Scheme {
  SpatialKind spatial = SpatialKind::kMax;
  ChannelKind channel = ChannelKind::kSimes;
  LayerKind layer = LayerKind::kFisher;

  /// Throws InvalidScheme for unknown tokens or unsupported combinations.
  static Scheme parse(std::string_view text);
  std::string to_string() const;

  bool uses_delta_star() const {
    return spatial == SpatialKind::kGramP1DeltaStar || spatial == SpatialKind::kMaxDeltaStar;
  }
  bool uses_mahalanobis() const {
    return channel == ChannelKind::kMahalanobisLDA || channel == ChannelKind::kMahalanobisGDA;
  }
  /// Channel p-values from per-channel tables feed the channel reduction.
  bool uses_channel_pvalues() const {
    return channel == ChannelKind::kSimes || channel == ChannelKind::kFisher;
  }

  friend bool operator==(const Scheme&, const Scheme&) = default;
};

std::string_view to_string(SpatialKind kind);
std::string_view to_string(ChannelKind kind);
std::string_view to_string(LayerKind kind);

// --- spatial reductions --------------------------------------------------

double spatial_max(std::span<const float> map);
double spatial_mean(std::span<const float> map);

/// Row sums of the power-1 Gram matrix G = F F^T of a layer, F the
/// (channels, h*w) flattening: entry j is sum_k <f_j, f_k>. Computed as
/// F (F^T 1) without forming G.
std::vector<double> gram_p1_rowsum(const LayerTensor& layer);

/// Same, restricted to the listed channels (the inner sum still runs over
/// every channel of the layer).
std::vector<double> gram_p1_rowsum(const LayerTensor& layer, std::span<const std::uint32_t> channels);

/// Reference implementation that forms G explicitly, O(channels^2 * h*w).
std::vector<double> gram_p1_rowsum_materialized(const LayerTensor& layer);

/// Deviation of `value` outside the band [q05, q95], relative to the band
/// edge it crossed. A zero edge divides by 1 instead.
double delta_star(double q05, double q95, double value);

/// Spatial statistic of every listed channel. Delta-star kinds return the raw
/// value here (max or Gram row sum); the band is applied by the caller.
void spatial_reduce(SpatialKind kind, const LayerTensor& layer, std::span<const std::uint32_t> channels,
                    std::vector<double>& out);

// --- Mahalanobis ---------------------------------------------------------

/// (x - mean)^T precision (x - mean).
double mahalanobis_sq(const Eigen::VectorXd& x, const Eigen::VectorXd& mean, const Eigen::MatrixXd& precision);

/// Streaming mean and scatter (sum of outer products of deviations).
class MomentAccumulator {
 public:
  explicit MomentAccumulator(std::size_t dim = 0);

  void add(std::span<const double> x);
  void add(const Eigen::VectorXd& x);

  std::size_t dim() const { return static_cast<std::size_t>(mean_.size()); }
  std::uint64_t count() const { return count_; }
  const Eigen::VectorXd& mean() const { return mean_; }
  /// Lower triangle is authoritative until scatter() symmetrizes it.
  Eigen::MatrixXd scatter() const;

 private:
  std::uint64_t count_ = 0;
  Eigen::VectorXd mean_;
  Eigen::MatrixXd m2_;
};

struct MahalanobisFit {
  ChannelKind kind = ChannelKind::kMahalanobisLDA;
  std::vector<Eigen::VectorXd> means;        // one per class
  std::vector<Eigen::MatrixXd> precisions;   // one (LDA) or one per class (GDA)
  std::vector<double> ridges;                // ridge added to each covariance
  std::vector<bool> low_sample;              // per covariance: fewer than 2*dim samples

  std::size_t dim() const { return means.empty() ? 0 : static_cast<std::size_t>(means.front().size()); }
  std::size_t num_classes() const { return means.size(); }
  const Eigen::MatrixXd& precision(std::size_t c) const {
    return precisions.size() == 1 ? precisions.front() : precisions.at(c);
  }
  double distance_sq(std::size_t c, std::span<const double> x) const;
};

/// Shared covariance (1/N) sum_c scatter_c + ridge*I. Without an explicit
/// ridge, 1e-6 * trace/dim is used (1e-3 * trace/dim when N <= dim).
MahalanobisFit fit_lda(std::span<const MomentAccumulator> per_class, std::optional<double> ridge = std::nullopt);

/// Per-class covariance scatter_c / n_c + ridge*I, same ridge rule per class.
MahalanobisFit fit_gda(std::span<const MomentAccumulator> per_class, std::optional<double> ridge = std::nullopt);

// --- channel and layer reductions ---------------------------------------

Orientation orientation_of(ChannelKind kind);
Orientation orientation_of(LayerKind kind);

/// Simes and Fisher take channel p-values; Sum takes delta-star values;
/// the Mahalanobis kinds take raw spatial statistics and need `fit`/`cls`.
double reduce_channels(ChannelKind kind, std::span<const double> inputs, const MahalanobisFit* fit = nullptr,
                       std::size_t cls = 0);

double reduce_layers(LayerKind kind, std::span<const double> layer_pvalues);

/// Maps a statistic so that larger values are more anomalous.
inline double oriented(Orientation o, double value) { return o == Orientation::kLower ? -value : value; }

}  // namespace masf
