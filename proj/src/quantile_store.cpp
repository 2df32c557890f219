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

#include "masf/quantile_store.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "masf/error.hpp"

namespace masf {

namespace {

double level_of(std::uint64_t count_le, std::uint64_t n) {
  return static_cast<double>(count_le + 1) / static_cast<double>(n + 1);
}

// Evenly spaced 1-based ranks from 1 to k, `grid` of them (fewer if k < grid).
std::vector<std::size_t> tail_ranks(std::size_t k, std::size_t grid) {
  std::vector<std::size_t> ranks;
  const std::size_t g = std::min(k, grid);
  if (g == 0) return ranks;
  if (g == 1) return {1};
  for (std::size_t i = 0; i < g; ++i) {
    const double pos = static_cast<double>(i) * static_cast<double>(k - 1) / static_cast<double>(g - 1);
    ranks.push_back(1 + static_cast<std::size_t>(std::llround(pos)));
  }
  ranks.erase(std::unique(ranks.begin(), ranks.end()), ranks.end());
  return ranks;
}

// Sort by level, clamp values to be nondecreasing, collapse equal values onto
// their highest level.
std::vector<GridPoint> normalize(std::vector<GridPoint> pts) {
  std::sort(pts.begin(), pts.end(), [](const GridPoint& a, const GridPoint& b) {
    return a.level != b.level ? a.level < b.level : a.value < b.value;
  });
  for (std::size_t i = 1; i < pts.size(); ++i) {
    pts[i].value = std::max(pts[i].value, pts[i - 1].value);
  }
  std::vector<GridPoint> out;
  out.reserve(pts.size());
  for (const auto& p : pts) {
    if (!out.empty() && out.back().value == p.value) {
      out.back().level = std::max(out.back().level, p.level);
    } else {
      out.push_back(p);
    }
  }
  return out;
}

}  // namespace

void TrackerConfig::validate() const {
  auto bad = [](const std::string& what) { throw Error(ErrorCode::kInvalidArgument, what); };
  if (batch_size < 2) bad("batch_size must be >= 2");
  if (tail_grid < 1) bad("tail_grid must be >= 1");
  if (tail_k < tail_grid) bad("tail_k must be >= tail_grid");
  for (std::size_t i = 0; i < body_percentiles.size(); ++i) {
    const double p = body_percentiles[i];
    if (!(p > 0.0 && p < 1.0)) bad("body percentiles must lie strictly inside (0, 1)");
    if (i > 0 && !(p > body_percentiles[i - 1])) bad("body percentiles must be sorted and unique");
  }
}

QuantileTable::QuantileTable(std::vector<GridPoint> points, std::uint64_t n_total, LookupMode mode)
    : points_(std::move(points)), n_total_(n_total), mode_(mode) {
  if (n_total_ == 0 || points_.empty()) {
    throw Error(ErrorCode::kInsufficientData, "a quantile table needs at least one observation");
  }
  for (std::size_t i = 0; i < points_.size(); ++i) {
    const auto& p = points_[i];
    if (!std::isfinite(p.value) || !(p.level > 0.0 && p.level <= 1.0)) {
      throw Error(ErrorCode::kCorrupt, "invalid grid point");
    }
    if (i > 0 && (p.level < points_[i - 1].level || p.value <= points_[i - 1].value)) {
      throw Error(ErrorCode::kCorrupt, "grid points must be sorted with increasing values");
    }
  }
  values_.reserve(points_.size());
  for (const auto& p : points_) values_.push_back(p.value);
}

QuantileTable QuantileTable::from_sample(std::vector<double> sample, double resolution, LookupMode mode) {
  if (sample.empty()) throw Error(ErrorCode::kInsufficientData, "empty sample");
  if (!(resolution > 0.0 && resolution < 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "resolution must lie in (0, 1)");
  }
  std::sort(sample.begin(), sample.end());
  const std::size_t n = sample.size();
  std::vector<std::size_t> ranks{1, n};
  const auto steps = static_cast<std::size_t>(std::floor(1.0 / resolution + 1e-9));
  for (std::size_t k = 1; k < steps; ++k) {
    const double p = static_cast<double>(k) * resolution;
    const auto r = static_cast<std::size_t>(std::ceil(p * static_cast<double>(n) - 1e-9));
    ranks.push_back(std::clamp<std::size_t>(r, 1, n));
  }
  std::sort(ranks.begin(), ranks.end());
  ranks.erase(std::unique(ranks.begin(), ranks.end()), ranks.end());

  std::vector<GridPoint> pts;
  pts.reserve(ranks.size());
  for (auto r : ranks) {
    const double v = sample[r - 1];
    const auto count = static_cast<std::uint64_t>(std::upper_bound(sample.begin(), sample.end(), v) -
                                                  sample.begin());
    pts.push_back({level_of(count, n), v});
  }
  return QuantileTable(normalize(std::move(pts)), n, mode);
}

void QuantileTable::require_frozen() const {
  if (!frozen()) throw Error(ErrorCode::kNotFrozen, "lookup on an unfrozen quantile table");
}

double QuantileTable::left_tail(double x) const {
  require_frozen();
  const auto it = std::upper_bound(values_.begin(), values_.end(), x);
  if (it == values_.begin()) return floor();
  const std::size_t i = static_cast<std::size_t>(it - values_.begin()) - 1;
  if (mode_ == LookupMode::kLinear && i + 1 < points_.size()) {
    const auto& a = points_[i];
    const auto& b = points_[i + 1];
    return a.level + (b.level - a.level) * (x - a.value) / (b.value - a.value);
  }
  return points_[i].level;
}

double QuantileTable::right_tail(double x) const {
  require_frozen();
  if (mode_ == LookupMode::kLinear) {
    if (x <= values_.front()) return 1.0;
    return std::clamp((1.0 - left_tail(x)) + floor(), floor(), 1.0);
  }
  const auto it = std::lower_bound(values_.begin(), values_.end(), x);
  if (it == values_.begin()) return 1.0;
  const std::size_t i = static_cast<std::size_t>(it - values_.begin()) - 1;
  const double n1 = static_cast<double>(n_total_) + 1.0;
  // Levels are (count + 1) / (n + 1); recovering the count gives the tail in
  // one division instead of two roundings.
  const double scaled = points_[i].level * n1;
  const double count = std::round(scaled) - 1.0;
  if (std::abs(scaled - std::round(scaled)) < 1e-6 && count >= 0.0) {
    return std::clamp((n1 - count) / n1, floor(), 1.0);
  }
  return std::clamp((1.0 - points_[i].level) + floor(), floor(), 1.0);
}

double QuantileTable::quantile(double p) const {
  require_frozen();
  const auto it = std::lower_bound(points_.begin(), points_.end(), p,
                                   [](const GridPoint& g, double level) { return g.level < level; });
  if (it == points_.begin()) return points_.front().value;
  if (it == points_.end()) return points_.back().value;
  const auto& b = *it;
  const auto& a = *(it - 1);
  if (b.level == a.level) return b.value;
  return a.value + (b.value - a.value) * (p - a.level) / (b.level - a.level);
}

QuantileTracker::QuantileTracker(TrackerConfig config) : config_(std::move(config)) {
  config_.validate();
  body_mean_.assign(config_.body_percentiles.size(), 0.0);
  body_count_.assign(config_.body_percentiles.size(), 0);
  buffer_.reserve(config_.batch_size);
}

void QuantileTracker::add(double value) {
  if (frozen_) throw Error(ErrorCode::kFrozenTracker, "add() after finalize()");
  buffer_.push_back(value);
  if (buffer_.size() == config_.batch_size) {
    ingest(buffer_);
    buffer_.clear();
  }
}

void QuantileTracker::observe_batch(std::span<const double> values) {
  if (frozen_) throw Error(ErrorCode::kFrozenTracker, "observe_batch() after finalize()");
  if (values.empty()) throw Error(ErrorCode::kEmptyBatch, "empty batch");
  if (values.size() > config_.batch_size) {
    throw Error(ErrorCode::kLengthMismatch, "batch larger than batch_size");
  }
  if (!buffer_.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "observe_batch() while add() has buffered values");
  }
  ingest(values);
}

void QuantileTracker::ingest(std::span<const double> values) {
  if (short_batch_) throw Error(ErrorCode::kInvalidArgument, "only the final batch may be short");
  for (double v : values) {
    if (!std::isfinite(v)) throw Error(ErrorCode::kNonFinite, "non-finite statistic");
  }

  scratch_.assign(values.begin(), values.end());
  std::sort(scratch_.begin(), scratch_.end());
  const std::size_t b = scratch_.size();
  if (b < config_.batch_size) {
    short_batch_ = true;
  } else {
    ++full_batches_;
  }
  n_total_ += b;

  const double weight = static_cast<double>(b) / static_cast<double>(n_total_);
  for (std::size_t i = 0; i < config_.body_percentiles.size(); ++i) {
    const double p = config_.body_percentiles[i];
    const auto r = std::clamp<long long>(std::llround(p * static_cast<double>(b + 1)) - 1, 1,
                                         static_cast<long long>(b));
    const double v = scratch_[static_cast<std::size_t>(r - 1)];
    body_mean_[i] += (v - body_mean_[i]) * weight;
    body_count_[i] += static_cast<std::uint64_t>(
        std::upper_bound(scratch_.begin(), scratch_.end(), v) - scratch_.begin());
  }

  const std::size_t k = std::min(config_.tail_k, b);
  std::vector<double> merged;
  merged.reserve(bottom_.size() + k);
  std::merge(bottom_.begin(), bottom_.end(), scratch_.begin(), scratch_.begin() + static_cast<std::ptrdiff_t>(k),
             std::back_inserter(merged));
  merged.resize(std::min(merged.size(), config_.tail_k));
  bottom_.swap(merged);

  merged.clear();
  std::merge(top_.begin(), top_.end(), scratch_.rbegin(), scratch_.rbegin() + static_cast<std::ptrdiff_t>(k),
             std::back_inserter(merged), std::greater<>{});
  merged.resize(std::min(merged.size(), config_.tail_k));
  top_.swap(merged);
}

QuantileTable QuantileTracker::finalize() {
  if (frozen_) throw Error(ErrorCode::kFrozenTracker, "finalize() called twice");
  if (!buffer_.empty()) {
    ingest(buffer_);
    buffer_.clear();
  }
  if (full_batches_ == 0) {
    throw Error(ErrorCode::kInsufficientData,
                "need at least one full batch of " + std::to_string(config_.batch_size) + ", have " +
                    std::to_string(n_total_) + " observations");
  }
  const std::uint64_t n = n_total_;
  const bool complete = bottom_.size() == n;

  std::vector<GridPoint> tails;
  double bottom_cover = 0.0;
  double top_cover = 2.0;
  for (auto r : tail_ranks(bottom_.size(), config_.tail_grid)) {
    const double v = bottom_[r - 1];
    // Values tied with the last retained one may continue past the window.
    if (!complete && v == bottom_.back()) continue;
    const auto count = static_cast<std::uint64_t>(std::upper_bound(bottom_.begin(), bottom_.end(), v) -
                                                  bottom_.begin());
    tails.push_back({level_of(count, n), v});
    bottom_cover = std::max(bottom_cover, tails.back().level);
  }
  for (auto r : tail_ranks(top_.size(), config_.tail_grid)) {
    const double v = top_[r - 1];
    if (!complete && v == top_.back()) continue;
    const auto strictly_greater = static_cast<std::uint64_t>(
        std::lower_bound(top_.begin(), top_.end(), v, std::greater<>{}) - top_.begin());
    tails.push_back({level_of(n - strictly_greater, n), v});
    top_cover = std::min(top_cover, tails.back().level);
  }

  std::vector<GridPoint> pts = tails;
  for (std::size_t i = 0; i < body_mean_.size(); ++i) {
    const GridPoint p{level_of(body_count_[i], n), body_mean_[i]};
    if (p.level <= bottom_cover || p.level >= top_cover) continue;
    pts.push_back(p);
  }

  frozen_ = true;
  table_ = QuantileTable(normalize(std::move(pts)), n, config_.lookup);
  return table_;
}

const QuantileTable& QuantileTracker::table() const {
  if (!frozen_) throw Error(ErrorCode::kNotFrozen, "tracker not finalized");
  return table_;
}

}  // namespace masf
