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

#include "masf/detector.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <random>
#include <sstream>
#include <thread>

#include "binary_io.hpp"
#include "masf/error.hpp"
#include "masf/stats.hpp"

namespace masf {

namespace {

using json = nlohmann::json;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Uniform integer in [0, n) by rejection; unlike std::uniform_int_distribution
// the result is the same on every standard library.
std::uint64_t bounded(std::mt19937_64& gen, std::uint64_t n) {
  const std::uint64_t max = std::numeric_limits<std::uint64_t>::max();
  const std::uint64_t limit = max - (max % n + 1) % n;
  std::uint64_t x;
  do {
    x = gen();
  } while (x > limit);
  return x % n;
}

void for_each_class(int k, unsigned threads, const std::function<void(int)>& fn) {
  unsigned n = threads != 0 ? threads : std::max(1u, std::thread::hardware_concurrency());
  n = std::min<unsigned>(n, static_cast<unsigned>(k));
  if (n <= 1) {
    for (int c = 0; c < k; ++c) fn(c);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(k));
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < n; ++t) {
    pool.emplace_back([&] {
      for (int c = next++; c < k; c = next++) {
        try {
          fn(c);
        } catch (...) {
          errors[static_cast<std::size_t>(c)] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

void validate_scheme(const DetectorScheme& s, std::span<const LayerDescriptor> layers) {
  auto bad = [](const std::string& why) { throw Error(ErrorCode::kInvalidArgument, "detector scheme: " + why); };
  if (s.monitored_layers.empty()) bad("no monitored layers");
  if (s.channel_masks.size() != s.monitored_layers.size()) bad("one channel mask per monitored layer required");
  if (!(s.sampling_rate > 0.0 && s.sampling_rate <= 1.0)) bad("sampling rate must lie in (0, 1]");
  for (std::size_t li = 0; li < s.monitored_layers.size(); ++li) {
    const auto l = s.monitored_layers[li];
    if (l >= layers.size()) bad("monitored layer " + std::to_string(l) + " does not exist");
    if (li > 0 && l <= s.monitored_layers[li - 1]) bad("monitored layers must be ascending and unique");
    const auto& mask = s.channel_masks[li];
    if (mask.empty()) bad("empty channel mask for layer " + std::to_string(l));
    for (std::size_t j = 0; j < mask.size(); ++j) {
      if (mask[j] >= layers[l].channels) bad("channel index out of range in layer " + std::to_string(l));
      if (j > 0 && mask[j] <= mask[j - 1]) bad("channel masks must be ascending and unique");
    }
  }
}

bool same_fit(const std::optional<MahalanobisFit>& a, const std::optional<MahalanobisFit>& b) {
  if (a.has_value() != b.has_value()) return false;
  if (!a) return true;
  if (a->kind != b->kind || a->means.size() != b->means.size() || a->precisions.size() != b->precisions.size() ||
      a->ridges != b->ridges || a->low_sample != b->low_sample) {
    return false;
  }
  for (std::size_t i = 0; i < a->means.size(); ++i) {
    if (a->means[i] != b->means[i]) return false;
  }
  for (std::size_t i = 0; i < a->precisions.size(); ++i) {
    if (a->precisions[i] != b->precisions[i]) return false;
  }
  return true;
}

json layers_json(std::span<const LayerDescriptor> layers) {
  json out = json::array();
  for (const auto& l : layers) {
    out.push_back({{"id", l.id}, {"name", l.name}, {"channels", l.channels}, {"height", l.height}, {"width", l.width}});
  }
  return out;
}

enum class TableKind : std::uint8_t { kChannel = 0, kLayer = 1, kFinal = 2 };

void put_table(std::string& out, TableKind kind, std::int32_t cls, std::int32_t layer, std::int32_t channel,
               const QuantileTable& t) {
  detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(kind));
  detail::put_le<std::int32_t>(out, cls);
  detail::put_le<std::int32_t>(out, layer);
  detail::put_le<std::int32_t>(out, channel);
  detail::put_le<std::uint8_t>(out, t.mode() == LookupMode::kStep ? 0 : 1);
  detail::put_le<std::uint64_t>(out, t.n_total());
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.points().size()));
  for (const auto& p : t.points()) {
    detail::put_le<double>(out, p.level);
    detail::put_le<double>(out, p.value);
  }
}

QuantileTable get_table(detail::ByteReader& in, TableKind kind, std::int32_t cls, std::int32_t layer,
                        std::int32_t channel) {
  const auto k = in.read<std::uint8_t>();
  const auto c = in.read<std::int32_t>();
  const auto l = in.read<std::int32_t>();
  const auto j = in.read<std::int32_t>();
  if (k != static_cast<std::uint8_t>(kind) || c != cls || l != layer || j != channel) {
    throw Error(ErrorCode::kCorrupt, "table record out of order");
  }
  const auto mode = in.read<std::uint8_t>();
  if (mode > 1) throw Error(ErrorCode::kCorrupt, "unknown lookup mode");
  const auto n = in.read<std::uint64_t>();
  const auto count = in.read<std::uint32_t>();
  if (count > in.remaining() / 16) throw Error(ErrorCode::kCorrupt, "table length exceeds file");
  std::vector<GridPoint> pts(count);
  for (auto& p : pts) {
    p.level = in.read<double>();
    p.value = in.read<double>();
  }
  return QuantileTable(std::move(pts), n, mode == 0 ? LookupMode::kStep : LookupMode::kLinear);
}

}  // namespace

std::string_view to_string(SplitMode mode) { return mode == SplitMode::kReuse ? "reuse" : "disjoint"; }

SplitMode parse_split_mode(std::string_view text) {
  if (text == "reuse") return SplitMode::kReuse;
  if (text == "disjoint") return SplitMode::kDisjoint;
  throw Error(ErrorCode::kInvalidArgument, "split mode must be 'reuse' or 'disjoint', got '" + std::string(text) + "'");
}

std::vector<std::vector<std::uint32_t>> sample_channels(std::span<const LayerDescriptor> layers, double rate,
                                                        std::uint64_t seed) {
  if (!(rate > 0.0 && rate <= 1.0)) throw Error(ErrorCode::kOutOfRange, "sampling rate must lie in (0, 1]");
  std::vector<std::vector<std::uint32_t>> masks;
  for (const auto& layer : layers) {
    const std::uint32_t a = layer.channels;
    // The small slack keeps e.g. 0.1 * 70 from rounding up to 8.
    const auto m = std::clamp<std::uint32_t>(
        static_cast<std::uint32_t>(std::ceil(rate * static_cast<double>(a) - 1e-9)), 1, a);
    std::vector<std::uint32_t> idx(a);
    for (std::uint32_t j = 0; j < a; ++j) idx[j] = j;
    if (m < a) {
      std::mt19937_64 gen(splitmix64(seed ^ splitmix64(layer.id)));
      for (std::uint32_t i = 0; i < m; ++i) {
        const auto pick = i + static_cast<std::uint32_t>(bounded(gen, a - i));
        std::swap(idx[i], idx[pick]);
      }
      idx.resize(m);
      std::sort(idx.begin(), idx.end());
    }
    masks.push_back(std::move(idx));
  }
  return masks;
}

DetectorScheme make_scheme(const Scheme& reductions, std::span<const LayerDescriptor> layers, double rate,
                           std::uint64_t seed, std::vector<std::uint32_t> monitored) {
  DetectorScheme s;
  s.reductions = reductions;
  s.sampling_rate = rate;
  s.seed = seed;
  if (monitored.empty()) {
    for (std::uint32_t l = 0; l < layers.size(); ++l) monitored.push_back(l);
  }
  std::sort(monitored.begin(), monitored.end());
  monitored.erase(std::unique(monitored.begin(), monitored.end()), monitored.end());
  for (auto l : monitored) {
    if (l >= layers.size()) throw Error(ErrorCode::kOutOfRange, "monitored layer " + std::to_string(l));
  }
  const auto masks = sample_channels(layers, rate, seed);
  s.monitored_layers = monitored;
  for (auto l : monitored) s.channel_masks.push_back(masks[l]);
  return s;
}

// --- ManifestSource ------------------------------------------------------

ManifestSource::ManifestSource(Manifest manifest) : manifest_(std::move(manifest)) {
  by_class_.resize(static_cast<std::size_t>(std::max(0, manifest_.num_classes)));
  for (std::size_t i = 0; i < manifest_.samples.size(); ++i) {
    const auto& y = manifest_.samples[i].y;
    if (!y) {
      unlabeled_ = true;
      continue;
    }
    by_class_.at(static_cast<std::size_t>(*y)).push_back(i);
  }
}

std::size_t ManifestSource::class_size(ClassId c) const {
  if (unlabeled_) throw Error(ErrorCode::kMissingLabels, "calibration requires a label on every sample");
  return by_class_.at(static_cast<std::size_t>(c)).size();
}

void ManifestSource::visit_class(ClassId c, std::size_t begin, std::size_t end,
                                 const std::function<void(const FeatureRecord&)>& fn) const {
  const auto& idx = by_class_.at(static_cast<std::size_t>(c));
  end = std::min(end, idx.size());
  for (std::size_t i = begin; i < end; ++i) fn(load_record(manifest_, idx[i]));
}

double adjusted_alpha_bound(double alpha, double accuracy) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw Error(ErrorCode::kOutOfRange, "alpha must lie in (0, 1)");
  if (!(accuracy >= 0.0 && accuracy <= 1.0)) throw Error(ErrorCode::kOutOfRange, "accuracy must lie in [0, 1]");
  // One rounding: 1 - accuracy is exact for accuracy >= 0.5.
  return std::fma(alpha, accuracy, 1.0 - accuracy);
}

// --- CalibratedDetector --------------------------------------------------

const CalibratedDetector::ClassTables& CalibratedDetector::tables(ClassId c) const {
  if (c < 0 || static_cast<std::size_t>(c) >= classes_.size()) {
    throw Error(ErrorCode::kUncalibratedClass, "class " + std::to_string(c) + " was not calibrated");
  }
  return classes_[static_cast<std::size_t>(c)];
}

const QuantileTable& CalibratedDetector::channel_table(ClassId c, std::size_t li, std::size_t jpos) const {
  return tables(c).channel.at(li).at(jpos);
}

const QuantileTable& CalibratedDetector::layer_table(ClassId c, std::size_t li) const {
  return tables(c).layer.at(li);
}

const QuantileTable& CalibratedDetector::final_table(ClassId c) const { return tables(c).final; }

const MahalanobisFit* CalibratedDetector::mahalanobis(std::size_t li) const {
  const auto& f = maha_.at(li);
  return f ? &*f : nullptr;
}

std::size_t CalibratedDetector::channel_table_count() const {
  std::size_t n = 0;
  for (const auto& c : classes_) {
    for (const auto& l : c.channel) n += l.size();
  }
  return n;
}

void CalibratedDetector::check_shape(const FeatureRecord& record) const {
  if (record.layers.size() != layers_.size()) {
    throw Error(ErrorCode::kShapeMismatch, "record '" + record.id + "' has " + std::to_string(record.layers.size()) +
                                               " layers, detector expects " + std::to_string(layers_.size()));
  }
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& t = record.layers[l];
    const auto& d = layers_[l];
    if (t.channels != d.channels || t.height != d.height || t.width != d.width ||
        t.values.size() != std::size_t{d.channels} * d.height * d.width) {
      throw Error(ErrorCode::kShapeMismatch, "record '" + record.id + "' layer " + std::to_string(l) +
                                                 " does not match (" + std::to_string(d.channels) + "," +
                                                 std::to_string(d.height) + "," + std::to_string(d.width) + ")");
    }
  }
}

void CalibratedDetector::spatial_values(const FeatureRecord& record, Scratch& s) const {
  const auto& mon = scheme_.monitored_layers;
  s.spatial.resize(mon.size());
  for (std::size_t li = 0; li < mon.size(); ++li) {
    spatial_reduce(scheme_.reductions.spatial, record.layers[mon[li]], scheme_.channel_masks[li], s.spatial[li]);
  }
}

double CalibratedDetector::layer_statistic(ClassId c, std::size_t li, std::span<const double> spatial,
                                           Scratch& s) const {
  const auto& t = classes_[static_cast<std::size_t>(c)];
  const ChannelKind kind = scheme_.reductions.channel;
  double stat = 0.0;
  switch (kind) {
    case ChannelKind::kSimes:
    case ChannelKind::kFisher: {
      const auto& tabs = t.channel[li];
      s.work.resize(spatial.size());
      for (std::size_t j = 0; j < spatial.size(); ++j) {
        const auto tails = tabs[j].lookup_tails(spatial[j]);
        s.work[j] = stats::two_sided_pvalue(tails.right, tails.left);
      }
      stat = kind == ChannelKind::kSimes ? stats::simes_inplace(s.work) : stats::fisher(s.work);
      break;
    }
    case ChannelKind::kSum: {
      const auto& lo = t.q05[li];
      const auto& hi = t.q95[li];
      for (std::size_t j = 0; j < spatial.size(); ++j) stat += delta_star(lo[j], hi[j], spatial[j]);
      break;
    }
    case ChannelKind::kMahalanobisLDA:
    case ChannelKind::kMahalanobisGDA:
      stat = maha_[li]->distance_sq(static_cast<std::size_t>(c), spatial);
      break;
  }
  return oriented(orientation_of(kind), stat);
}

double CalibratedDetector::final_statistic(ClassId, Scratch& s) const {
  const LayerKind kind = scheme_.reductions.layer;
  return oriented(orientation_of(kind), reduce_layers(kind, s.layer_p));
}

double CalibratedDetector::score_prepared(ClassId c, Scratch& s) const {
  const auto& t = tables(c);
  s.layer_p.resize(s.spatial.size());
  for (std::size_t li = 0; li < s.spatial.size(); ++li) {
    s.layer_p[li] = t.layer[li].right_tail(layer_statistic(c, li, s.spatial[li], s));
  }
  return t.final.right_tail(final_statistic(c, s));
}

double CalibratedDetector::score(const FeatureRecord& record, ClassId c) const {
  tables(c);
  check_shape(record);
  Scratch s;
  spatial_values(record, s);
  return score_prepared(c, s);
}

DetectionReport CalibratedDetector::score_all_classes(const FeatureRecord& record) const {
  check_shape(record);
  Scratch s;
  spatial_values(record, s);
  DetectionReport r;
  r.id = record.id;
  r.q.reserve(classes_.size());
  for (int c = 0; c < num_classes(); ++c) r.q.push_back(score_prepared(c, s));
  r.q_max = *std::max_element(r.q.begin(), r.q.end());
  r.y_hat = record.y_hat;
  if (r.y_hat) {
    tables(*r.y_hat);
    r.q_yhat = r.q[static_cast<std::size_t>(*r.y_hat)];
  }
  return r;
}

bool operator==(const CalibratedDetector& a, const CalibratedDetector& b) {
  if (!(a.scheme_ == b.scheme_ && a.layers_ == b.layers_ && a.split_ == b.split_ &&
        a.tracker_.batch_size == b.tracker_.batch_size && a.tracker_.body_percentiles == b.tracker_.body_percentiles &&
        a.tracker_.tail_k == b.tracker_.tail_k && a.tracker_.tail_grid == b.tracker_.tail_grid &&
        a.tracker_.lookup == b.tracker_.lookup && a.classes_.size() == b.classes_.size() &&
        a.maha_.size() == b.maha_.size())) {
    return false;
  }
  for (std::size_t c = 0; c < a.classes_.size(); ++c) {
    const auto& x = a.classes_[c];
    const auto& y = b.classes_[c];
    if (x.info.phase1_samples != y.info.phase1_samples || x.info.phase2_samples != y.info.phase2_samples ||
        x.channel != y.channel || x.q05 != y.q05 || x.q95 != y.q95 || x.layer != y.layer || !(x.final == y.final)) {
      return false;
    }
  }
  for (std::size_t li = 0; li < a.maha_.size(); ++li) {
    if (!same_fit(a.maha_[li], b.maha_[li])) return false;
  }
  return true;
}

// --- calibration ---------------------------------------------------------

CalibratedDetector calibrate(const RecordSource& source, const DetectorScheme& scheme,
                             const CalibrationOptions& options) {
  options.tracker.validate();
  if (!(options.table_resolution > 0.0 && options.table_resolution < 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "table resolution must lie in (0, 1)");
  }
  const int k = source.num_classes();
  if (k < 1) throw Error(ErrorCode::kInsufficientSamples, "no classes to calibrate");
  validate_scheme(scheme, source.layers());

  CalibratedDetector d;
  d.scheme_ = scheme;
  d.layers_ = source.layers();
  d.split_ = options.split;
  d.tracker_ = options.tracker;
  d.classes_.resize(static_cast<std::size_t>(k));
  const std::size_t nl = scheme.monitored_layers.size();
  d.maha_.resize(nl);

  // Record ranges per class.
  const std::size_t batch = options.tracker.batch_size;
  std::vector<std::size_t> split_at(static_cast<std::size_t>(k)), total(static_cast<std::size_t>(k));
  for (int c = 0; c < k; ++c) {
    const std::size_t n = source.class_size(c);
    const std::size_t need = options.split == SplitMode::kDisjoint ? 2 * batch : batch;
    if (n < need) {
      throw Error(ErrorCode::kInsufficientSamples,
                  "class " + std::to_string(c) + " has " + std::to_string(n) + " samples, " +
                      std::string(to_string(options.split)) + " calibration needs at least " + std::to_string(need));
    }
    total[static_cast<std::size_t>(c)] = n;
    split_at[static_cast<std::size_t>(c)] = options.split == SplitMode::kDisjoint ? n / 2 : n;
  }
  auto phase1_range = [&](int c) { return std::pair<std::size_t, std::size_t>{0, split_at[static_cast<std::size_t>(c)]}; };
  auto phase2_range = [&](int c) {
    const auto i = static_cast<std::size_t>(c);
    return options.split == SplitMode::kDisjoint ? std::pair<std::size_t, std::size_t>{split_at[i], total[i]}
                                                 : std::pair<std::size_t, std::size_t>{0, total[i]};
  };

  const Scheme& red = scheme.reductions;
  const bool maha = red.uses_mahalanobis();
  std::vector<std::vector<MomentAccumulator>> moments(static_cast<std::size_t>(k));  // [c][li]

  // Phase 1.
  for_each_class(k, options.threads, [&](int c) {
    auto& t = d.classes_[static_cast<std::size_t>(c)];
    const auto [begin, end] = phase1_range(c);
    t.info.phase1_samples = end - begin;
    CalibratedDetector::Scratch s;
    if (maha) {
      auto& acc = moments[static_cast<std::size_t>(c)];
      for (std::size_t li = 0; li < nl; ++li) acc.emplace_back(scheme.channel_masks[li].size());
      source.visit_class(c, begin, end, [&](const FeatureRecord& r) {
        d.check_shape(r);
        d.spatial_values(r, s);
        for (std::size_t li = 0; li < nl; ++li) acc[li].add(std::span<const double>(s.spatial[li]));
      });
      return;
    }
    std::vector<std::vector<QuantileTracker>> trackers(nl);
    for (std::size_t li = 0; li < nl; ++li) {
      trackers[li].assign(scheme.channel_masks[li].size(), QuantileTracker(options.tracker));
    }
    source.visit_class(c, begin, end, [&](const FeatureRecord& r) {
      d.check_shape(r);
      d.spatial_values(r, s);
      for (std::size_t li = 0; li < nl; ++li) {
        for (std::size_t j = 0; j < s.spatial[li].size(); ++j) trackers[li][j].add(s.spatial[li][j]);
      }
    });
    t.channel.resize(nl);
    for (std::size_t li = 0; li < nl; ++li) {
      for (auto& tr : trackers[li]) t.channel[li].push_back(tr.finalize());
      trackers[li].clear();
      trackers[li].shrink_to_fit();
    }
    if (red.uses_delta_star()) {
      t.q05.resize(nl);
      t.q95.resize(nl);
      for (std::size_t li = 0; li < nl; ++li) {
        for (const auto& tab : t.channel[li]) {
          t.q05[li].push_back(tab.quantile(0.05));
          t.q95[li].push_back(tab.quantile(0.95));
        }
      }
    }
  });

  if (maha) {
    for (std::size_t li = 0; li < nl; ++li) {
      std::vector<MomentAccumulator> per_class;
      for (int c = 0; c < k; ++c) per_class.push_back(std::move(moments[static_cast<std::size_t>(c)][li]));
      d.maha_[li] = red.channel == ChannelKind::kMahalanobisLDA ? fit_lda(per_class, options.ridge)
                                                                : fit_gda(per_class, options.ridge);
    }
  }

  // Phase 2.
  for_each_class(k, options.threads, [&](int c) {
    auto& t = d.classes_[static_cast<std::size_t>(c)];
    const auto [begin, end] = phase2_range(c);
    t.info.phase2_samples = end - begin;
    CalibratedDetector::Scratch s;
    std::vector<std::vector<double>> stats(nl);
    for (auto& v : stats) v.reserve(end - begin);
    source.visit_class(c, begin, end, [&](const FeatureRecord& r) {
      d.check_shape(r);
      d.spatial_values(r, s);
      for (std::size_t li = 0; li < nl; ++li) stats[li].push_back(d.layer_statistic(c, li, s.spatial[li], s));
    });
    for (std::size_t li = 0; li < nl; ++li) {
      t.layer.push_back(QuantileTable::from_sample(stats[li], options.table_resolution));
    }
    // Each sample's layer p-values leave the sample itself out of the layer
    // eCDF, as it will be for a test record; otherwise phase-2 samples look
    // more typical than new data and the final p-values come out too small.
    std::vector<std::vector<double>> sorted(nl);
    for (std::size_t li = 0; li < nl; ++li) {
      sorted[li] = stats[li];
      std::sort(sorted[li].begin(), sorted[li].end());
    }
    const std::size_t n = end - begin;
    std::vector<double> finals;
    finals.reserve(n);
    s.layer_p.resize(nl);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t li = 0; li < nl; ++li) {
        const auto& v = sorted[li];
        const auto ge = static_cast<std::size_t>(v.end() - std::lower_bound(v.begin(), v.end(), stats[li][i]));
        s.layer_p[li] = static_cast<double>(ge) / static_cast<double>(n);
      }
      finals.push_back(d.final_statistic(c, s));
    }
    t.final = QuantileTable::from_sample(std::move(finals), options.table_resolution);
  });
  return d;
}

// --- artifact ------------------------------------------------------------

std::string serialize_detector(const CalibratedDetector& d) {
  const auto& s = d.scheme_;
  json meta;
  meta["scheme"] = s.reductions.to_string();
  meta["split"] = std::string(to_string(d.split_));
  meta["sampling_rate"] = s.sampling_rate;
  meta["seed"] = s.seed;
  meta["monitored_layers"] = s.monitored_layers;
  meta["channel_masks"] = s.channel_masks;
  meta["layers"] = layers_json(d.layers_);
  meta["tracker"] = {{"batch_size", d.tracker_.batch_size},
                     {"body_percentiles", d.tracker_.body_percentiles},
                     {"tail_k", d.tracker_.tail_k},
                     {"tail_grid", d.tracker_.tail_grid},
                     {"lookup", d.tracker_.lookup == LookupMode::kStep ? "step" : "linear"},
                     {"tail_tracking", "always"}};
  json classes = json::array();
  for (const auto& c : d.classes_) {
    classes.push_back({{"phase1_samples", c.info.phase1_samples}, {"phase2_samples", c.info.phase2_samples}});
  }
  meta["classes"] = std::move(classes);
  const std::string meta_text = meta.dump();

  std::string out(kDetectorMagic, sizeof(kDetectorMagic));
  detail::put_le<std::uint16_t>(out, kDetectorVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(meta_text.size()));
  out += meta_text;

  std::uint32_t count = 0;
  for (const auto& c : d.classes_) {
    for (const auto& l : c.channel) count += static_cast<std::uint32_t>(l.size());
    count += static_cast<std::uint32_t>(c.layer.size()) + 1;
  }
  detail::put_le<std::uint32_t>(out, count);
  for (std::size_t c = 0; c < d.classes_.size(); ++c) {
    const auto& t = d.classes_[c];
    const auto ci = static_cast<std::int32_t>(c);
    for (std::size_t li = 0; li < t.channel.size(); ++li) {
      const auto layer = static_cast<std::int32_t>(s.monitored_layers[li]);
      for (std::size_t j = 0; j < t.channel[li].size(); ++j) {
        put_table(out, TableKind::kChannel, ci, layer, static_cast<std::int32_t>(s.channel_masks[li][j]),
                  t.channel[li][j]);
      }
    }
    for (std::size_t li = 0; li < t.layer.size(); ++li) {
      put_table(out, TableKind::kLayer, ci, static_cast<std::int32_t>(s.monitored_layers[li]), -1, t.layer[li]);
    }
    put_table(out, TableKind::kFinal, ci, -1, -1, t.final);
  }

  std::uint32_t fits = 0;
  for (const auto& f : d.maha_) fits += f ? 1 : 0;
  detail::put_le<std::uint32_t>(out, fits);
  for (std::size_t li = 0; li < d.maha_.size(); ++li) {
    if (!d.maha_[li]) continue;
    const auto& f = *d.maha_[li];
    detail::put_le<std::int32_t>(out, static_cast<std::int32_t>(s.monitored_layers[li]));
    detail::put_le<std::uint8_t>(out, f.kind == ChannelKind::kMahalanobisLDA ? 0 : 1);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(f.dim()));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(f.means.size()));
    for (const auto& m : f.means) {
      for (Eigen::Index i = 0; i < m.size(); ++i) detail::put_le<double>(out, m(i));
    }
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(f.precisions.size()));
    for (std::size_t p = 0; p < f.precisions.size(); ++p) {
      const auto& m = f.precisions[p];
      for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) detail::put_le<double>(out, m(i, j));
      }
      detail::put_le<double>(out, f.ridges[p]);
      detail::put_le<std::uint8_t>(out, f.low_sample[p] ? 1 : 0);
    }
  }
  detail::put_le<std::uint64_t>(out, detail::fnv1a(out));
  return out;
}

CalibratedDetector deserialize_detector(std::string_view bytes) {
  if (bytes.size() < sizeof(kDetectorMagic) + 2 ||
      bytes.substr(0, sizeof(kDetectorMagic)) != std::string_view(kDetectorMagic, sizeof(kDetectorMagic))) {
    throw Error(ErrorCode::kCorrupt, "not a detector artifact");
  }
  detail::ByteReader in(bytes, ErrorCode::kCorrupt);
  in.read_bytes(sizeof(kDetectorMagic));
  const auto version = in.read<std::uint16_t>();
  if (version > kDetectorVersion) {
    throw Error(ErrorCode::kVersionMismatch, "artifact version " + std::to_string(version) +
                                                 " is newer than supported version " +
                                                 std::to_string(kDetectorVersion));
  }
  if (version == 0) throw Error(ErrorCode::kCorrupt, "invalid version 0");
  if (bytes.size() < in.position() + 8) throw Error(ErrorCode::kCorrupt, "truncated artifact");
  const auto body = bytes.substr(0, bytes.size() - 8);
  const auto stored = detail::get_le<std::uint64_t>(reinterpret_cast<const unsigned char*>(bytes.data() + body.size()));
  if (stored != detail::fnv1a(body)) throw Error(ErrorCode::kCorrupt, "checksum mismatch (truncated or modified)");
  detail::ByteReader r(body, ErrorCode::kCorrupt);
  r.read_bytes(sizeof(kDetectorMagic) + 2);

  CalibratedDetector d;
  try {
    const auto meta_len = r.read<std::uint32_t>();
    const json meta = json::parse(r.read_bytes(meta_len));
    d.scheme_.reductions = Scheme::parse(meta.at("scheme").get<std::string>());
    d.split_ = parse_split_mode(meta.at("split").get<std::string>());
    d.scheme_.sampling_rate = meta.at("sampling_rate").get<double>();
    d.scheme_.seed = meta.at("seed").get<std::uint64_t>();
    d.scheme_.monitored_layers = meta.at("monitored_layers").get<std::vector<std::uint32_t>>();
    d.scheme_.channel_masks = meta.at("channel_masks").get<std::vector<std::vector<std::uint32_t>>>();
    for (const auto& l : meta.at("layers")) {
      d.layers_.push_back({l.at("id").get<std::uint32_t>(), l.at("name").get<std::string>(),
                           l.at("channels").get<std::uint32_t>(), l.at("height").get<std::uint32_t>(),
                           l.at("width").get<std::uint32_t>()});
    }
    const auto& tr = meta.at("tracker");
    d.tracker_.batch_size = tr.at("batch_size").get<std::size_t>();
    d.tracker_.body_percentiles = tr.at("body_percentiles").get<std::vector<double>>();
    d.tracker_.tail_k = tr.at("tail_k").get<std::size_t>();
    d.tracker_.tail_grid = tr.at("tail_grid").get<std::size_t>();
    d.tracker_.lookup = tr.at("lookup").get<std::string>() == "step" ? LookupMode::kStep : LookupMode::kLinear;
    for (const auto& c : meta.at("classes")) {
      CalibratedDetector::ClassTables t;
      t.info.phase1_samples = c.at("phase1_samples").get<std::uint64_t>();
      t.info.phase2_samples = c.at("phase2_samples").get<std::uint64_t>();
      d.classes_.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kCorrupt, std::string("bad metadata: ") + e.what());
  } catch (const Error& e) {
    throw Error(ErrorCode::kCorrupt, std::string("bad metadata: ") + e.what());
  }
  try {
    validate_scheme(d.scheme_, d.layers_);
  } catch (const Error& e) {
    throw Error(ErrorCode::kCorrupt, e.what());
  }
  if (d.classes_.empty()) throw Error(ErrorCode::kCorrupt, "artifact without classes");

  const auto& s = d.scheme_;
  const std::size_t nl = s.monitored_layers.size();
  const bool channel_tables = !s.reductions.uses_mahalanobis();
  r.read<std::uint32_t>();  // table count, implied by the metadata
  for (std::size_t c = 0; c < d.classes_.size(); ++c) {
    auto& t = d.classes_[c];
    const auto ci = static_cast<std::int32_t>(c);
    if (channel_tables) {
      t.channel.resize(nl);
      for (std::size_t li = 0; li < nl; ++li) {
        for (auto j : s.channel_masks[li]) {
          t.channel[li].push_back(get_table(r, TableKind::kChannel, ci, static_cast<std::int32_t>(s.monitored_layers[li]),
                                            static_cast<std::int32_t>(j)));
        }
      }
      if (s.reductions.uses_delta_star()) {
        t.q05.resize(nl);
        t.q95.resize(nl);
        for (std::size_t li = 0; li < nl; ++li) {
          for (const auto& tab : t.channel[li]) {
            t.q05[li].push_back(tab.quantile(0.05));
            t.q95[li].push_back(tab.quantile(0.95));
          }
        }
      }
    }
    for (std::size_t li = 0; li < nl; ++li) {
      t.layer.push_back(get_table(r, TableKind::kLayer, ci, static_cast<std::int32_t>(s.monitored_layers[li]), -1));
    }
    t.final = get_table(r, TableKind::kFinal, ci, -1, -1);
  }

  d.maha_.resize(nl);
  const auto fits = r.read<std::uint32_t>();
  if (fits != (s.reductions.uses_mahalanobis() ? nl : 0)) throw Error(ErrorCode::kCorrupt, "unexpected fit count");
  for (std::size_t li = 0; li < fits; ++li) {
    if (r.read<std::int32_t>() != static_cast<std::int32_t>(s.monitored_layers[li])) {
      throw Error(ErrorCode::kCorrupt, "fit record out of order");
    }
    MahalanobisFit f;
    f.kind = r.read<std::uint8_t>() == 0 ? ChannelKind::kMahalanobisLDA : ChannelKind::kMahalanobisGDA;
    if (f.kind != s.reductions.channel) throw Error(ErrorCode::kCorrupt, "fit kind disagrees with scheme");
    const auto dim = static_cast<Eigen::Index>(r.read<std::uint32_t>());
    if (static_cast<std::size_t>(dim) != s.channel_masks[li].size()) throw Error(ErrorCode::kCorrupt, "fit dimension");
    const auto nm = r.read<std::uint32_t>();
    if (nm != d.classes_.size()) throw Error(ErrorCode::kCorrupt, "fit class count");
    for (std::uint32_t m = 0; m < nm; ++m) {
      Eigen::VectorXd v(dim);
      for (Eigen::Index i = 0; i < dim; ++i) v(i) = r.read<double>();
      f.means.push_back(std::move(v));
    }
    const auto np = r.read<std::uint32_t>();
    if (np != (f.kind == ChannelKind::kMahalanobisLDA ? 1u : nm)) throw Error(ErrorCode::kCorrupt, "precision count");
    for (std::uint32_t p = 0; p < np; ++p) {
      Eigen::MatrixXd m(dim, dim);
      for (Eigen::Index i = 0; i < dim; ++i) {
        for (Eigen::Index j = 0; j < dim; ++j) m(i, j) = r.read<double>();
      }
      f.precisions.push_back(std::move(m));
      f.ridges.push_back(r.read<double>());
      f.low_sample.push_back(r.read<std::uint8_t>() != 0);
    }
    d.maha_[li] = std::move(f);
  }
  if (r.remaining() != 0) throw Error(ErrorCode::kCorrupt, "trailing bytes after the last record");
  return d;
}

void save_detector(const CalibratedDetector& detector, const std::filesystem::path& path) {
  const std::string bytes = serialize_detector(detector);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "write failed for " + path.string());
}

CalibratedDetector load_detector(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize_detector(buf.str());
}

}  // namespace masf
