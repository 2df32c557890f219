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

#include "masf/reductions.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <string>

#include "masf/error.hpp"
#include "masf/stats.hpp"

namespace masf {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

void require_finite(std::span<const float> map) {
  for (float v : map) {
    if (!std::isfinite(v)) throw Error(ErrorCode::kNonFinite, "non-finite feature value");
  }
}

// Below this reciprocal condition number a covariance counts as singular.
constexpr double kMinRcond = 1e-12;

Eigen::MatrixXd invert_spd(const Eigen::MatrixXd& cov, const std::string& what) {
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success || !(llt.rcond() > kMinRcond)) {
    throw Error(ErrorCode::kDegenerateCovariance, what + " is not positive definite after the ridge");
  }
  Eigen::MatrixXd p = llt.solve(Eigen::MatrixXd::Identity(cov.rows(), cov.cols()));
  return 0.5 * (p + p.transpose());
}

double choose_ridge(const Eigen::MatrixXd& cov, std::uint64_t n, std::optional<double> ridge) {
  if (ridge) {
    if (!(*ridge >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "ridge must be >= 0");
    return *ridge;
  }
  const auto d = static_cast<double>(cov.rows());
  const double scale = cov.trace() / d;
  const double factor = n <= static_cast<std::uint64_t>(cov.rows()) ? 1e-3 : 1e-6;
  return scale > 0.0 ? factor * scale : factor;
}

void check_classes(std::span<const MomentAccumulator> per_class) {
  if (per_class.empty()) throw Error(ErrorCode::kInsufficientData, "no classes to fit");
  const std::size_t d = per_class.front().dim();
  if (d == 0) throw Error(ErrorCode::kDimensionMismatch, "zero-dimensional features");
  for (const auto& acc : per_class) {
    if (acc.dim() != d) throw Error(ErrorCode::kDimensionMismatch, "classes disagree on feature dimension");
    if (acc.count() == 0) throw Error(ErrorCode::kInsufficientData, "class without samples");
  }
}

}  // namespace

// --- scheme --------------------------------------------------------------

std::string_view to_string(SpatialKind kind) {
  switch (kind) {
    case SpatialKind::kMax: return "max";
    case SpatialKind::kMean: return "mean";
    case SpatialKind::kGramP1: return "gramp1";
    case SpatialKind::kGramP1DeltaStar: return "gramp1delta";
    case SpatialKind::kMaxDeltaStar: return "maxdelta";
  }
  return "?";
}

std::string_view to_string(ChannelKind kind) {
  switch (kind) {
    case ChannelKind::kSimes: return "simes";
    case ChannelKind::kFisher: return "fisher";
    case ChannelKind::kMahalanobisLDA: return "mahalanobisLDA";
    case ChannelKind::kMahalanobisGDA: return "mahalanobisGDA";
    case ChannelKind::kSum: return "sum";
  }
  return "?";
}

std::string_view to_string(LayerKind kind) {
  return kind == LayerKind::kFisher ? "fisher" : "simes";
}

Scheme Scheme::parse(std::string_view text) {
  auto bad = [&](const std::string& why) {
    throw Error(ErrorCode::kInvalidScheme, "'" + std::string(text) + "': " + why);
  };
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto dash = text.find('-', start);
    parts.push_back(lower(text.substr(start, dash - start)));
    if (dash == std::string_view::npos) break;
    start = dash + 1;
  }
  if (parts.size() != 3) bad("expected <spatial>-<channel>-<layer>");

  Scheme s;
  if (parts[0] == "max") s.spatial = SpatialKind::kMax;
  else if (parts[0] == "mean") s.spatial = SpatialKind::kMean;
  else if (parts[0] == "gramp1") s.spatial = SpatialKind::kGramP1;
  else if (parts[0] == "gramp1delta") s.spatial = SpatialKind::kGramP1DeltaStar;
  else if (parts[0] == "maxdelta") s.spatial = SpatialKind::kMaxDeltaStar;
  else bad("unknown spatial reduction '" + parts[0] + "'");

  if (parts[1] == "simes") s.channel = ChannelKind::kSimes;
  else if (parts[1] == "fisher") s.channel = ChannelKind::kFisher;
  else if (parts[1] == "mahalanobislda") s.channel = ChannelKind::kMahalanobisLDA;
  else if (parts[1] == "mahalanobisgda") s.channel = ChannelKind::kMahalanobisGDA;
  else if (parts[1] == "sum") s.channel = ChannelKind::kSum;
  else bad("unknown channel reduction '" + parts[1] + "'");

  if (parts[2] == "fisher") s.layer = LayerKind::kFisher;
  else if (parts[2] == "simes") s.layer = LayerKind::kSimes;
  else bad("unknown layer reduction '" + parts[2] + "'");

  if (s.uses_delta_star() != (s.channel == ChannelKind::kSum)) {
    bad("delta-star spatial reductions pair with the sum channel reduction, and only with it");
  }
  return s;
}

std::string Scheme::to_string() const {
  std::string out(masf::to_string(spatial));
  out += '-';
  out += masf::to_string(channel);
  out += '-';
  out += masf::to_string(layer);
  return out;
}

// --- spatial -------------------------------------------------------------

// Both reductions run eight independent lanes so the loop vectorizes; a
// non-finite input turns the v * 0 probe into NaN.
double spatial_max(std::span<const float> map) {
  if (map.empty()) throw Error(ErrorCode::kEmptyVector, "empty feature map");
  constexpr std::size_t kLanes = 8;
  std::array<float, kLanes> best;
  std::array<float, kLanes> probe{};
  best.fill(map[0]);
  std::size_t i = 0;
  for (; i + kLanes <= map.size(); i += kLanes) {
    for (std::size_t k = 0; k < kLanes; ++k) {
      const float v = map[i + k];
      probe[k] += v * 0.0f;
      best[k] = best[k] > v ? best[k] : v;
    }
  }
  for (; i < map.size(); ++i) {
    probe[0] += map[i] * 0.0f;
    best[0] = best[0] > map[i] ? best[0] : map[i];
  }
  float out = best[0];
  float bad = 0.0f;
  for (std::size_t k = 0; k < kLanes; ++k) {
    out = out > best[k] ? out : best[k];
    bad += probe[k];
  }
  if (bad != 0.0f || std::isnan(bad)) throw Error(ErrorCode::kNonFinite, "non-finite feature value");
  return out;
}

double spatial_mean(std::span<const float> map) {
  if (map.empty()) throw Error(ErrorCode::kEmptyVector, "empty feature map");
  constexpr std::size_t kLanes = 8;
  std::array<double, kLanes> sum{};
  std::array<float, kLanes> probe{};
  std::size_t i = 0;
  for (; i + kLanes <= map.size(); i += kLanes) {
    for (std::size_t k = 0; k < kLanes; ++k) {
      probe[k] += map[i + k] * 0.0f;
      sum[k] += map[i + k];
    }
  }
  for (; i < map.size(); ++i) {
    probe[0] += map[i] * 0.0f;
    sum[0] += map[i];
  }
  double total = 0.0;
  float bad = 0.0f;
  for (std::size_t k = 0; k < kLanes; ++k) {
    total += sum[k];
    bad += probe[k];
  }
  if (bad != 0.0f || std::isnan(bad)) throw Error(ErrorCode::kNonFinite, "non-finite feature value");
  return total / static_cast<double>(map.size());
}

std::vector<double> gram_p1_rowsum(const LayerTensor& layer, std::span<const std::uint32_t> channels) {
  const std::size_t hw = layer.spatial_size();
  if (layer.channels == 0 || hw == 0) throw Error(ErrorCode::kEmptyVector, "empty layer");
  require_finite(layer.values);
  // s = F^T 1, the channel-sum map.
  std::vector<double> s(hw, 0.0);
  for (std::size_t k = 0; k < layer.channels; ++k) {
    const auto f = layer.channel(k);
    for (std::size_t i = 0; i < hw; ++i) s[i] += f[i];
  }
  std::vector<double> out;
  out.reserve(channels.size());
  for (auto j : channels) {
    if (j >= layer.channels) throw Error(ErrorCode::kOutOfRange, "channel index out of range");
    const auto f = layer.channel(j);
    double dot = 0.0;
    for (std::size_t i = 0; i < hw; ++i) dot += f[i] * s[i];
    out.push_back(dot);
  }
  return out;
}

std::vector<double> gram_p1_rowsum(const LayerTensor& layer) {
  std::vector<std::uint32_t> all(layer.channels);
  for (std::uint32_t j = 0; j < layer.channels; ++j) all[j] = j;
  return gram_p1_rowsum(layer, all);
}

std::vector<double> gram_p1_rowsum_materialized(const LayerTensor& layer) {
  const auto a = static_cast<Eigen::Index>(layer.channels);
  const auto hw = static_cast<Eigen::Index>(layer.spatial_size());
  if (a == 0 || hw == 0) throw Error(ErrorCode::kEmptyVector, "empty layer");
  require_finite(layer.values);
  const Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> f(
      layer.values.data(), a, hw);
  const Eigen::MatrixXd fd = f.cast<double>();
  const Eigen::MatrixXd g = fd * fd.transpose();
  const Eigen::VectorXd rows = g.rowwise().sum();
  return {rows.data(), rows.data() + rows.size()};
}

double delta_star(double q05, double q95, double value) {
  if (value < q05) return (q05 - value) / (q05 == 0.0 ? 1.0 : std::abs(q05));
  if (value > q95) return (value - q95) / (q95 == 0.0 ? 1.0 : std::abs(q95));
  return 0.0;
}

void spatial_reduce(SpatialKind kind, const LayerTensor& layer, std::span<const std::uint32_t> channels,
                    std::vector<double>& out) {
  out.clear();
  switch (kind) {
    case SpatialKind::kMax:
    case SpatialKind::kMaxDeltaStar:
      for (auto j : channels) out.push_back(spatial_max(layer.channel(j)));
      return;
    case SpatialKind::kMean:
      for (auto j : channels) out.push_back(spatial_mean(layer.channel(j)));
      return;
    case SpatialKind::kGramP1:
    case SpatialKind::kGramP1DeltaStar:
      out = gram_p1_rowsum(layer, channels);
      return;
  }
}

// --- Mahalanobis ---------------------------------------------------------

double mahalanobis_sq(const Eigen::VectorXd& x, const Eigen::VectorXd& mean, const Eigen::MatrixXd& precision) {
  if (x.size() != mean.size() || precision.rows() != x.size() || precision.cols() != x.size()) {
    throw Error(ErrorCode::kDimensionMismatch, "mahalanobis_sq dimensions disagree");
  }
  const Eigen::VectorXd d = x - mean;
  return std::max(0.0, d.dot(precision * d));
}

MomentAccumulator::MomentAccumulator(std::size_t dim)
    : mean_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim))),
      m2_(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim))) {}

void MomentAccumulator::add(const Eigen::VectorXd& x) {
  if (x.size() != mean_.size()) throw Error(ErrorCode::kDimensionMismatch, "sample dimension");
  ++count_;
  const Eigen::VectorXd delta = x - mean_;
  mean_ += delta / static_cast<double>(count_);
  const double w = static_cast<double>(count_ - 1) / static_cast<double>(count_);
  m2_.selfadjointView<Eigen::Lower>().rankUpdate(delta, w);
}

void MomentAccumulator::add(std::span<const double> x) {
  add(Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size())).eval());
}

Eigen::MatrixXd MomentAccumulator::scatter() const {
  Eigen::MatrixXd s = m2_.selfadjointView<Eigen::Lower>();
  return s;
}

double MahalanobisFit::distance_sq(std::size_t c, std::span<const double> x) const {
  if (c >= means.size()) throw Error(ErrorCode::kUncalibratedClass, "class " + std::to_string(c));
  if (x.size() != dim()) {
    throw Error(ErrorCode::kArityMismatch, "expected " + std::to_string(dim()) + " inputs, got " +
                                               std::to_string(x.size()));
  }
  const Eigen::Map<const Eigen::VectorXd> v(x.data(), static_cast<Eigen::Index>(x.size()));
  return mahalanobis_sq(v, means[c], precision(c));
}

MahalanobisFit fit_lda(std::span<const MomentAccumulator> per_class, std::optional<double> ridge) {
  check_classes(per_class);
  const auto d = static_cast<Eigen::Index>(per_class.front().dim());
  MahalanobisFit fit;
  fit.kind = ChannelKind::kMahalanobisLDA;
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
  std::uint64_t n = 0;
  for (const auto& acc : per_class) {
    fit.means.push_back(acc.mean());
    cov += acc.scatter();
    n += acc.count();
  }
  cov /= static_cast<double>(n);
  const double r = choose_ridge(cov, n, ridge);
  cov.diagonal().array() += r;
  fit.precisions.push_back(invert_spd(cov, "pooled covariance"));
  fit.ridges.push_back(r);
  fit.low_sample.push_back(n < 2 * static_cast<std::uint64_t>(d));
  return fit;
}

MahalanobisFit fit_gda(std::span<const MomentAccumulator> per_class, std::optional<double> ridge) {
  check_classes(per_class);
  MahalanobisFit fit;
  fit.kind = ChannelKind::kMahalanobisGDA;
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    const auto& acc = per_class[c];
    fit.means.push_back(acc.mean());
    Eigen::MatrixXd cov = acc.scatter() / static_cast<double>(acc.count());
    const double r = choose_ridge(cov, acc.count(), ridge);
    cov.diagonal().array() += r;
    fit.precisions.push_back(invert_spd(cov, "covariance of class " + std::to_string(c)));
    fit.ridges.push_back(r);
    fit.low_sample.push_back(acc.count() < 2 * acc.dim());
  }
  return fit;
}

// --- channel / layer -----------------------------------------------------

Orientation orientation_of(ChannelKind kind) {
  return kind == ChannelKind::kSimes ? Orientation::kLower : Orientation::kUpper;
}

Orientation orientation_of(LayerKind kind) {
  return kind == LayerKind::kSimes ? Orientation::kLower : Orientation::kUpper;
}

double reduce_channels(ChannelKind kind, std::span<const double> inputs, const MahalanobisFit* fit,
                       std::size_t cls) {
  if (inputs.empty()) throw Error(ErrorCode::kArityMismatch, "no channel inputs");
  switch (kind) {
    case ChannelKind::kSimes: return stats::simes(inputs);
    case ChannelKind::kFisher: return stats::fisher(inputs);
    case ChannelKind::kSum: {
      double sum = 0.0;
      for (double v : inputs) sum += v;
      return sum;
    }
    case ChannelKind::kMahalanobisLDA:
    case ChannelKind::kMahalanobisGDA:
      if (fit == nullptr) throw Error(ErrorCode::kArityMismatch, "Mahalanobis reduction without a fit");
      return fit->distance_sq(cls, inputs);
  }
  return 0.0;
}

double reduce_layers(LayerKind kind, std::span<const double> layer_pvalues) {
  if (layer_pvalues.empty()) throw Error(ErrorCode::kArityMismatch, "no layer p-values");
  return kind == LayerKind::kFisher ? stats::fisher(layer_pvalues) : stats::simes(layer_pvalues);
}

}  // namespace masf
