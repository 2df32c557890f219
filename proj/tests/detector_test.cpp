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

#include <gtest/gtest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <thread>

#include "masf/synthetic.hpp"
#include "test_util.hpp"

namespace masf {
namespace {

using testing::code_of;

SyntheticSpec small_spec(int k = 2, std::uint64_t seed = 11) {
  return {k, make_layers({{8, 4, 4}, {16, 2, 2}, {8, 3, 3}}), {}, seed};
}

CalibrationOptions small_options(SplitMode split = SplitMode::kReuse) {
  CalibrationOptions o;
  o.split = split;
  o.tracker.batch_size = 100;
  o.tracker.tail_k = 20;
  o.threads = 1;
  return o;
}

DetectorScheme masf_scheme(const std::vector<LayerDescriptor>& layers, double rate = 1.0, std::uint64_t seed = 3) {
  return make_scheme(Scheme::parse("max-simes-fisher"), layers, rate, seed);
}

// Records supplied directly, for label and class-count edge cases.
class VectorSource : public RecordSource {
 public:
  VectorSource(std::vector<LayerDescriptor> layers, int k, std::vector<FeatureRecord> records)
      : layers_(std::move(layers)), k_(k), records_(std::move(records)) {}

  const std::vector<LayerDescriptor>& layers() const override { return layers_; }
  int num_classes() const override { return k_; }
  std::size_t class_size(ClassId c) const override {
    return static_cast<std::size_t>(
        std::count_if(records_.begin(), records_.end(), [&](const FeatureRecord& r) { return r.y == c; }));
  }
  void visit_class(ClassId c, std::size_t begin, std::size_t end,
                   const std::function<void(const FeatureRecord&)>& fn) const override {
    std::size_t i = 0;
    for (const auto& r : records_) {
      if (r.y != c) continue;
      if (i >= begin && i < end) fn(r);
      ++i;
    }
  }

 private:
  std::vector<LayerDescriptor> layers_;
  int k_;
  std::vector<FeatureRecord> records_;
};

// Applies `edit` to every record of `inner`.
class EditedSource : public RecordSource {
 public:
  EditedSource(const RecordSource& inner, std::function<void(FeatureRecord&)> edit)
      : inner_(inner), edit_(std::move(edit)) {}

  const std::vector<LayerDescriptor>& layers() const override { return inner_.layers(); }
  int num_classes() const override { return inner_.num_classes(); }
  std::size_t class_size(ClassId c) const override { return inner_.class_size(c); }
  void visit_class(ClassId c, std::size_t begin, std::size_t end,
                   const std::function<void(const FeatureRecord&)>& fn) const override {
    inner_.visit_class(c, begin, end, [&](const FeatureRecord& r) {
      FeatureRecord copy = r;
      edit_(copy);
      fn(copy);
    });
  }

 private:
  const RecordSource& inner_;
  std::function<void(FeatureRecord&)> edit_;
};

TEST(SampleChannels, Examples) {
  const auto layers = make_layers({{64, 1, 1}, {32, 2, 2}, {5, 1, 1}});
  const auto all = sample_channels(layers, 1.0, 9);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    std::vector<std::uint32_t> expect(layers[l].channels);
    std::iota(expect.begin(), expect.end(), 0u);
    EXPECT_EQ(all[l], expect);
  }

  const auto tenth = sample_channels(layers, 0.1, 9);
  EXPECT_EQ(tenth[0].size(), 7u);
  EXPECT_EQ(tenth[1].size(), 4u);
  EXPECT_EQ(tenth[2].size(), 1u);
  for (const auto& m : tenth) {
    EXPECT_TRUE(std::is_sorted(m.begin(), m.end()));
    EXPECT_EQ(std::set<std::uint32_t>(m.begin(), m.end()).size(), m.size());
  }
  EXPECT_EQ(sample_channels(layers, 0.1, 9), tenth);
  const auto other = sample_channels(layers, 0.1, 10);
  EXPECT_NE(other[0], tenth[0]);
  EXPECT_NE(other[1], tenth[1]);
}

TEST(SampleChannels, DependsOnLayerIdNotPosition) {
  auto layers = make_layers({{64, 1, 1}, {64, 1, 1}});
  const auto a = sample_channels(layers, 0.25, 4);
  EXPECT_NE(a[0], a[1]);
  std::swap(layers[0], layers[1]);
  const auto b = sample_channels(layers, 0.25, 4);
  EXPECT_EQ(a[0], b[1]);
  EXPECT_EQ(a[1], b[0]);
}

TEST(SampleChannels, RejectsBadRate) {
  const auto layers = make_layers({{8, 1, 1}});
  EXPECT_EQ(code_of([&] { sample_channels(layers, 0.0, 1); }), ErrorCode::kOutOfRange);
  EXPECT_EQ(code_of([&] { sample_channels(layers, 1.5, 1); }), ErrorCode::kOutOfRange);
}

TEST(AdjustedAlphaBound, Formula) {
  EXPECT_DOUBLE_EQ(adjusted_alpha_bound(0.05, 0.95), 0.0975);
  EXPECT_EQ(adjusted_alpha_bound(0.05, 1.0), 0.05);
  EXPECT_EQ(adjusted_alpha_bound(0.05, 0.0), 1.0);
  EXPECT_EQ(code_of([] { adjusted_alpha_bound(0.0, 0.5); }), ErrorCode::kOutOfRange);
  EXPECT_EQ(code_of([] { adjusted_alpha_bound(0.05, 1.1); }), ErrorCode::kOutOfRange);
}

TEST(SplitMode, Parse) {
  EXPECT_EQ(parse_split_mode("reuse"), SplitMode::kReuse);
  EXPECT_EQ(parse_split_mode("disjoint"), SplitMode::kDisjoint);
  EXPECT_EQ(to_string(SplitMode::kDisjoint), "disjoint");
  EXPECT_EQ(code_of([] { parse_split_mode("half"); }), ErrorCode::kInvalidArgument);
}

TEST(Calibrate, TableCounts) {
  const SyntheticSpec spec{2, make_layers({{8, 2, 2}, {8, 2, 2}, {8, 2, 2}}), {}, 1};
  const SyntheticSource src(spec, 200);
  const auto det = calibrate(src, masf_scheme(spec.layers, 0.5), small_options());
  EXPECT_EQ(det.channel_table_count(), 2u * 3u * 4u);
  EXPECT_EQ(det.num_classes(), 2);
  for (int c = 0; c < 2; ++c) {
    EXPECT_EQ(det.calibration(c).phase1_samples, 200u);
    EXPECT_EQ(det.calibration(c).phase2_samples, 200u);
    for (std::size_t li = 0; li < 3; ++li) {
      EXPECT_TRUE(det.layer_table(c, li).frozen());
      for (std::size_t j = 0; j < 4; ++j) EXPECT_TRUE(det.channel_table(c, li, j).frozen());
    }
    EXPECT_EQ(det.final_table(c).n_total(), 200u);
  }
  EXPECT_EQ(det.mahalanobis(0), nullptr);
}

TEST(Calibrate, DisjointEvenSplit) {
  const auto spec = small_spec();
  const SyntheticSource src(spec, 200);
  const auto det = calibrate(src, masf_scheme(spec.layers), small_options(SplitMode::kDisjoint));
  EXPECT_EQ(det.split(), SplitMode::kDisjoint);
  for (int c = 0; c < 2; ++c) {
    EXPECT_EQ(det.calibration(c).phase1_samples, 100u);
    EXPECT_EQ(det.calibration(c).phase2_samples, 100u);
    EXPECT_EQ(det.channel_table(c, 0, 0).n_total(), 100u);
    EXPECT_EQ(det.layer_table(c, 0).n_total(), 100u);
  }
}

TEST(Calibrate, InsufficientSamples) {
  const auto spec = small_spec();
  const SyntheticSource src(spec, 100);
  CalibrationOptions o;  // batch 1000
  o.threads = 1;
  EXPECT_EQ(code_of([&] { calibrate(src, masf_scheme(spec.layers), o); }), ErrorCode::kInsufficientSamples);
  // Reuse needs one batch, disjoint two.
  const SyntheticSource src150(spec, 150);
  EXPECT_NO_THROW(calibrate(src150, masf_scheme(spec.layers), small_options()));
  EXPECT_EQ(code_of([&] { calibrate(src150, masf_scheme(spec.layers), small_options(SplitMode::kDisjoint)); }),
            ErrorCode::kInsufficientSamples);
}

TEST(Calibrate, NoClasses) {
  const auto layers = make_layers({{4, 1, 1}});
  const VectorSource src(layers, 0, {});
  EXPECT_EQ(code_of([&] { calibrate(src, masf_scheme(layers), small_options()); }), ErrorCode::kInsufficientSamples);
}

TEST(Calibrate, MissingLabels) {
  testing::TempDir dir("missing_labels");
  const auto spec = small_spec();
  const SyntheticSource src(spec, 100);
  const auto manifest = write_synthetic(src, dir.path(), "null", false);
  const ManifestSource ms(read_manifest(manifest));
  EXPECT_EQ(code_of([&] { calibrate(ms, masf_scheme(spec.layers), small_options()); }), ErrorCode::kMissingLabels);
}

TEST(Calibrate, ManifestMatchesInMemorySource) {
  testing::TempDir dir("manifest_source");
  const auto spec = small_spec();
  const SyntheticSource src(spec, 200);
  const ManifestSource ms(read_manifest(write_synthetic(src, dir.path(), "null", true)));
  EXPECT_EQ(ms.class_size(0), 200u);
  EXPECT_EQ(ms.class_size(1), 200u);
  const auto scheme = masf_scheme(spec.layers, 0.5);
  EXPECT_TRUE(calibrate(ms, scheme, small_options()) == calibrate(src, scheme, small_options()));
}

TEST(Calibrate, ThreadCountDoesNotChangeResult) {
  const auto spec = small_spec(3);
  const SyntheticSource src(spec, 200);
  const auto scheme = masf_scheme(spec.layers);
  auto o1 = small_options();
  auto o4 = small_options();
  o4.threads = 4;
  EXPECT_TRUE(calibrate(src, scheme, o1) == calibrate(src, scheme, o4));
}

TEST(Calibrate, SchemeValidation) {
  const auto spec = small_spec();
  const SyntheticSource src(spec, 100);
  auto scheme = masf_scheme(spec.layers);
  scheme.channel_masks[1] = {};
  EXPECT_EQ(code_of([&] { calibrate(src, scheme, small_options()); }), ErrorCode::kInvalidArgument);
  scheme = masf_scheme(spec.layers);
  scheme.channel_masks[0] = {3, 1};
  EXPECT_EQ(code_of([&] { calibrate(src, scheme, small_options()); }), ErrorCode::kInvalidArgument);
  scheme = masf_scheme(spec.layers);
  scheme.channel_masks[0] = {0, 99};
  EXPECT_EQ(code_of([&] { calibrate(src, scheme, small_options()); }), ErrorCode::kInvalidArgument);
  scheme = masf_scheme(spec.layers);
  scheme.monitored_layers.clear();
  scheme.channel_masks.clear();
  EXPECT_EQ(code_of([&] { calibrate(src, scheme, small_options()); }), ErrorCode::kInvalidArgument);
}

class Scored : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    spec_ = new SyntheticSpec(small_spec());
    source_ = new SyntheticSource(*spec_, 300);
    detector_ = new CalibratedDetector(calibrate(*source_, masf_scheme(spec_->layers), small_options()));
  }
  static void TearDownTestSuite() {
    delete detector_;
    delete source_;
    delete spec_;
  }

  static SyntheticSpec* spec_;
  static SyntheticSource* source_;
  static CalibratedDetector* detector_;
};

SyntheticSpec* Scored::spec_ = nullptr;
SyntheticSource* Scored::source_ = nullptr;
CalibratedDetector* Scored::detector_ = nullptr;

TEST_F(Scored, ReportInvariants) {
  const SyntheticSource test(*spec_, 50, 1);
  for (int c = 0; c < 2; ++c) {
    test.visit_class(c, 0, 50, [&](const FeatureRecord& r) {
      const auto rep = detector_->score_all_classes(r);
      ASSERT_EQ(rep.q.size(), 2u);
      EXPECT_EQ(rep.id, r.id);
      EXPECT_EQ(rep.q_max, *std::max_element(rep.q.begin(), rep.q.end()));
      for (int k = 0; k < 2; ++k) {
        EXPECT_GT(rep.q[k], 0.0);
        EXPECT_LE(rep.q[k], 1.0);
        EXPECT_EQ(rep.q[k], detector_->score(r, k));
      }
      ASSERT_TRUE(rep.y_hat.has_value());
      ASSERT_TRUE(rep.q_yhat.has_value());
      EXPECT_EQ(*rep.q_yhat, rep.q[static_cast<std::size_t>(*rep.y_hat)]);
      EXPECT_EQ(rep.reject(rep.q_max), true);
    });
  }
}

TEST_F(Scored, NullCenterRecordIsTypical) {
  for (int c = 0; c < 2; ++c) {
    FeatureRecord r;
    r.id = "center";
    for (std::size_t l = 0; l < spec_->layers.size(); ++l) {
      const auto& d = spec_->layers[l];
      LayerTensor t{d.channels, d.height, d.width, std::vector<float>(std::size_t{d.channels} * d.height * d.width)};
      for (std::uint32_t j = 0; j < d.channels; ++j) {
        const auto median = static_cast<float>(detector_->channel_table(c, l, j).quantile(0.5));
        std::fill(t.channel(j).begin(), t.channel(j).end(), median);
      }
      r.layers.push_back(std::move(t));
    }
    EXPECT_GT(detector_->score(r, c), 0.9) << "class " << c;
  }
}

TEST_F(Scored, Errors) {
  auto r = source_->record(0, 0);
  EXPECT_EQ(code_of([&] { detector_->score(r, 2); }), ErrorCode::kUncalibratedClass);
  EXPECT_EQ(code_of([&] { detector_->score(r, -1); }), ErrorCode::kUncalibratedClass);
  auto short_record = r;
  short_record.layers.pop_back();
  EXPECT_EQ(code_of([&] { detector_->score(short_record, 0); }), ErrorCode::kShapeMismatch);
  auto wrong_shape = r;
  wrong_shape.layers[1].height = 4;
  wrong_shape.layers[1].width = 1;
  EXPECT_EQ(code_of([&] { detector_->score(wrong_shape, 0); }), ErrorCode::kShapeMismatch);
}

TEST_F(Scored, ConcurrentScoringMatchesSequential) {
  const SyntheticSource test(*spec_, 40, 1);
  std::vector<double> expect;
  test.visit_class(1, 0, 40, [&](const FeatureRecord& r) { expect.push_back(detector_->score(r, 0)); });
  std::vector<std::vector<double>> got(4);
  std::vector<std::thread> pool;
  for (auto& g : got) {
    pool.emplace_back([&] { test.visit_class(1, 0, 40, [&](const FeatureRecord& r) { g.push_back(detector_->score(r, 0)); }); });
  }
  for (auto& t : pool) t.join();
  for (const auto& g : got) EXPECT_EQ(g, expect);
}

TEST_F(Scored, RoundTrip) {
  testing::TempDir dir("roundtrip");
  const auto path = dir / "det.masf";
  save_detector(*detector_, path);
  const auto loaded = load_detector(path);
  EXPECT_TRUE(loaded == *detector_);
  EXPECT_EQ(serialize_detector(loaded), serialize_detector(*detector_));

  const SyntheticSource test(*spec_, 50, 7);
  std::size_t n = 0;
  for (int c = 0; c < 2; ++c) {
    test.visit_class(c, 0, 50, [&](const FeatureRecord& r) {
      const auto a = detector_->score_all_classes(r);
      const auto b = loaded.score_all_classes(r);
      for (std::size_t k = 0; k < a.q.size(); ++k) {
        EXPECT_EQ(std::bit_cast<std::uint64_t>(a.q[k]), std::bit_cast<std::uint64_t>(b.q[k]));
      }
      ++n;
    });
  }
  EXPECT_EQ(n, 100u);
}

TEST_F(Scored, TruncatedArtifactIsCorrupt) {
  const auto bytes = serialize_detector(*detector_);
  for (std::size_t cut : {std::size_t{4}, std::size_t{12}, bytes.size() / 2, bytes.size() - 1}) {
    EXPECT_EQ(code_of([&] { deserialize_detector(std::string_view(bytes).substr(0, cut)); }), ErrorCode::kCorrupt)
        << "cut at " << cut;
  }
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x01;
  EXPECT_EQ(code_of([&] { deserialize_detector(flipped); }), ErrorCode::kCorrupt);
  EXPECT_EQ(code_of([&] { deserialize_detector(bytes + "x"); }), ErrorCode::kCorrupt);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_EQ(code_of([&] { deserialize_detector(bad_magic); }), ErrorCode::kCorrupt);
}

TEST_F(Scored, FutureVersionIsRejected) {
  auto bytes = serialize_detector(*detector_);
  ASSERT_EQ(bytes[8], 1);
  bytes[8] = 2;
  EXPECT_EQ(code_of([&] { deserialize_detector(bytes); }), ErrorCode::kVersionMismatch);
}

TEST_F(Scored, LoadMissingFile) {
  EXPECT_EQ(code_of([] { load_detector("/nonexistent/dir/det.masf"); }), ErrorCode::kIo);
}

TEST(Score, SingleClassMaxIsTheClassPValue) {
  const auto spec = small_spec(1);
  const SyntheticSource src(spec, 200);
  const auto det = calibrate(src, masf_scheme(spec.layers), small_options());
  const SyntheticSource test(spec, 30, 1);
  test.visit_class(0, 0, 30, [&](const FeatureRecord& r) {
    const auto rep = det.score_all_classes(r);
    ASSERT_EQ(rep.q.size(), 1u);
    EXPECT_EQ(rep.q_max, rep.q[0]);
  });
}

TEST(Hierarchy, UnmonitoredLayerIsIgnored) {
  const auto spec = small_spec();
  const SyntheticSource src(spec, 200);
  const auto scheme = make_scheme(Scheme::parse("max-simes-fisher"), spec.layers, 1.0, 3, {0, 2});
  const auto det = calibrate(src, scheme, small_options());
  const SyntheticSource test(spec, 20, 1);
  test.visit_class(0, 0, 20, [&](const FeatureRecord& r) {
    auto zeroed = r;
    std::fill(zeroed.layers[1].values.begin(), zeroed.layers[1].values.end(), 0.0f);
    for (int c = 0; c < 2; ++c) EXPECT_EQ(det.score(r, c), det.score(zeroed, c));
  });
}

// Calibrating and scoring on consistently permuted channels yields the same
// p-values, since channel reductions are symmetric in their inputs.
void expect_permutation_invariant(const std::string& scheme_name, double tolerance) {
  const auto spec = small_spec();
  const SyntheticSource src(spec, 200);
  const std::size_t l = 1;
  const std::uint32_t a = spec.layers[l].channels;
  std::vector<std::uint32_t> perm(a);
  std::iota(perm.begin(), perm.end(), 0u);
  std::mt19937_64 gen(5);
  std::shuffle(perm.begin(), perm.end(), gen);
  auto permute = [&](FeatureRecord& r) {
    const LayerTensor orig = r.layers[l];
    for (std::uint32_t j = 0; j < a; ++j) {
      std::copy(orig.channel(perm[j]).begin(), orig.channel(perm[j]).end(), r.layers[l].channel(j).begin());
    }
  };
  const EditedSource permuted(src, permute);
  const auto scheme = make_scheme(Scheme::parse(scheme_name), spec.layers, 1.0, 3);
  const auto det = calibrate(src, scheme, small_options());
  const auto det_p = calibrate(permuted, scheme, small_options());
  const SyntheticSource test(spec, 30, 1);
  test.visit_class(1, 0, 30, [&](const FeatureRecord& r) {
    auto rp = r;
    permute(rp);
    for (int c = 0; c < 2; ++c) EXPECT_NEAR(det.score(r, c), det_p.score(rp, c), tolerance) << scheme_name;
  });
}

TEST(Hierarchy, ChannelPermutationInvariance) {
  expect_permutation_invariant("max-simes-fisher", 0.0);
  expect_permutation_invariant("mean-simes-simes", 0.0);
  // Fisher sums in a different order; allow one table step.
  expect_permutation_invariant("max-fisher-fisher", 1.0 / 201.0 + 1e-12);
}

TEST(Evidence, MedianPValueFallsWithShiftMagnitude) {
  const auto base = small_spec(2, 21);
  const SyntheticSource cal(base, 300);
  const auto det = calibrate(cal, masf_scheme(base.layers), small_options());
  double previous = 1.0;
  for (double magnitude : {0.0, 2.0, 4.0, 8.0, 16.0}) {
    auto spec = base;
    spec.shift = {0.25, magnitude, ShiftPattern::kSinglePixel};
    const SyntheticSource test(spec, 60, 1);
    for (int c = 0; c < 2; ++c) {
      std::vector<double> q;
      test.visit_class(c, 0, 60, [&](const FeatureRecord& r) { q.push_back(det.score(r, c)); });
      std::nth_element(q.begin(), q.begin() + 30, q.end());
      const double median = q[30];
      if (c == 0) {
        EXPECT_LE(median, previous) << "magnitude " << magnitude;
        previous = median;
      }
    }
  }
  EXPECT_LT(previous, 0.05);
}

TEST(SchemeGrid, AllSchemesRunEndToEnd) {
  const auto spec = small_spec();
  const SyntheticSource src(spec, 200);
  const SyntheticSource test(spec, 10, 1);
  const std::vector<std::string> names = {
      "max-simes-fisher",       "max-simes-simes",   "max-fisher-fisher",         "max-fisher-simes",
      "mean-simes-fisher",      "mean-simes-simes",  "mean-fisher-fisher",        "mean-fisher-simes",
      "mean-mahalanobisLDA-fisher", "maxdelta-sum-fisher", "gramp1delta-sum-fisher", "mean-mahalanobisGDA-simes",
      "gramp1-simes-fisher"};
  for (const auto& name : names) {
    SCOPED_TRACE(name);
    const auto scheme = make_scheme(Scheme::parse(name), spec.layers, 1.0, 3);
    for (auto split : {SplitMode::kReuse, SplitMode::kDisjoint}) {
      const auto det = calibrate(src, scheme, small_options(split));
      EXPECT_EQ(det.mahalanobis(0) != nullptr, scheme.reductions.uses_mahalanobis());
      test.visit_class(0, 0, 10, [&](const FeatureRecord& r) {
        const auto rep = det.score_all_classes(r);
        for (double q : rep.q) {
          EXPECT_GT(q, 0.0);
          EXPECT_LE(q, 1.0);
        }
      });
      const auto loaded = deserialize_detector(serialize_detector(det));
      EXPECT_TRUE(loaded == det);
      const auto r = test.record(1, 3);
      EXPECT_EQ(loaded.score(r, 1), det.score(r, 1));
    }
  }
}

TEST(Determinism, SameInputsSameBytes) {
  const auto spec = small_spec();
  const SyntheticSource src(spec, 200);
  const auto scheme = masf_scheme(spec.layers, 0.5, 77);
  EXPECT_EQ(serialize_detector(calibrate(src, scheme, small_options())),
            serialize_detector(calibrate(src, scheme, small_options())));
}

}  // namespace
}  // namespace masf
