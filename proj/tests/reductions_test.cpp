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

#include <gtest/gtest.h>

#include <random>

#include "masf/error.hpp"

namespace masf {
namespace {

template <class Fn>
ErrorCode code_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no masf::Error thrown";
  return ErrorCode::kInvalidArgument;
}

LayerTensor random_layer(std::uint32_t a, std::uint32_t h, std::uint32_t w, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<float> nd;
  LayerTensor t{a, h, w, std::vector<float>(std::size_t{a} * h * w)};
  for (auto& v : t.values) v = nd(gen);
  return t;
}

Eigen::MatrixXd random_matrix(Eigen::Index n, std::mt19937_64& gen) {
  std::normal_distribution<double> nd;
  Eigen::MatrixXd m(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) m(i, j) = nd(gen);
  }
  return m;
}

TEST(Spatial, MaxAndMean) {
  const std::vector<float> m{1, 2, 3, 0};
  EXPECT_EQ(spatial_max(m), 3.0);
  EXPECT_EQ(spatial_mean(m), 1.5);
  const std::vector<float> c(12, 2.5f);
  EXPECT_EQ(spatial_max(c), 2.5);
  EXPECT_EQ(spatial_mean(c), 2.5);
}

TEST(Spatial, RandomMatchesBruteForce) {
  const LayerTensor t = random_layer(1, 7, 5, 3);
  double mx = -1e300;
  double sum = 0.0;
  for (float v : t.values) {
    mx = std::max<double>(mx, v);
    sum += v;
  }
  EXPECT_EQ(spatial_max(t.values), mx);
  EXPECT_NEAR(spatial_mean(t.values), sum / 35.0, 1e-12);
}

TEST(Spatial, NonFinite) {
  const std::vector<float> m{1, std::numeric_limits<float>::infinity()};
  EXPECT_EQ(code_of([&] { spatial_max(m); }), ErrorCode::kNonFinite);
  EXPECT_EQ(code_of([&] { spatial_mean(m); }), ErrorCode::kNonFinite);
}

TEST(GramP1, HandValues) {
  const LayerTensor one{1, 2, 2, {1, 2, 3, 0}};
  EXPECT_EQ(gram_p1_rowsum(one), std::vector<double>{14.0});
  const LayerTensor hot{2, 1, 2, {1, 0, 0, 1}};
  EXPECT_EQ(gram_p1_rowsum(hot), (std::vector<double>{1.0, 1.0}));
}

TEST(GramP1, FactoredMatchesMaterialized) {
  std::mt19937_64 gen(99);
  std::uniform_int_distribution<std::uint32_t> ch(1, 16), side(1, 8);
  for (int rep = 0; rep < 200; ++rep) {
    const std::uint32_t h = side(gen);
    const std::uint32_t w = std::max<std::uint32_t>(1, 64 / (h * side(gen)));
    const LayerTensor t = random_layer(ch(gen), h, w, gen());
    const auto fast = gram_p1_rowsum(t);
    const auto slow = gram_p1_rowsum_materialized(t);
    ASSERT_EQ(fast.size(), slow.size());
    for (std::size_t j = 0; j < fast.size(); ++j) {
      EXPECT_NEAR(fast[j], slow[j], 1e-6 * std::max(1.0, std::abs(slow[j])));
    }
  }
  const LayerTensor t = random_layer(4, 3, 3, 5);
  const auto slow = gram_p1_rowsum_materialized(t);
  const std::vector<std::uint32_t> mask{1, 3};
  const auto part = gram_p1_rowsum(t, mask);
  EXPECT_NEAR(part[0], slow[1], 1e-9);
  EXPECT_NEAR(part[1], slow[3], 1e-9);
}

TEST(DeltaStar, Formula) {
  EXPECT_EQ(delta_star(1, 3, 2), 0.0);
  EXPECT_DOUBLE_EQ(delta_star(1, 3, 4), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(delta_star(-2, 3, -4), 1.0);
  EXPECT_DOUBLE_EQ(delta_star(0, 0, 2), 2.0);
  EXPECT_DOUBLE_EQ(delta_star(0, 0, -0.5), 0.5);
}

TEST(DeltaStar, ContinuousAndIncreasingOutsideBand) {
  const double lo = -1.5, hi = 2.0;
  double prev = delta_star(lo, hi, hi);
  EXPECT_EQ(prev, 0.0);
  for (double v = hi + 0.01; v < 10; v += 0.01) {
    const double d = delta_star(lo, hi, v);
    EXPECT_GT(d, prev);
    prev = d;
  }
  EXPECT_NEAR(delta_star(lo, hi, hi + 1e-9), 0.0, 1e-8);
  EXPECT_NEAR(delta_star(lo, hi, lo - 1e-9), 0.0, 1e-8);
  prev = 0.0;
  for (double v = lo - 0.01; v > -10; v -= 0.01) {
    const double d = delta_star(lo, hi, v);
    EXPECT_GT(d, prev);
    prev = d;
  }
}

TEST(Mahalanobis, HandValues) {
  Eigen::VectorXd x(2), mu = Eigen::VectorXd::Zero(2);
  x << 3, 4;
  EXPECT_DOUBLE_EQ(mahalanobis_sq(x, mu, Eigen::MatrixXd::Identity(2, 2)), 25.0);
  EXPECT_EQ(mahalanobis_sq(x, x, Eigen::MatrixXd::Identity(2, 2)), 0.0);
  EXPECT_EQ(code_of([&] { mahalanobis_sq(x, Eigen::VectorXd::Zero(3), Eigen::MatrixXd::Identity(2, 2)); }),
            ErrorCode::kDimensionMismatch);
}

TEST(Mahalanobis, MatchesSolveOracle) {
  std::mt19937_64 gen(6);
  const Eigen::MatrixXd a = random_matrix(6, gen);
  const Eigen::MatrixXd cov = a * a.transpose() + 0.5 * Eigen::MatrixXd::Identity(6, 6);
  const Eigen::VectorXd x = random_matrix(6, gen).col(0);
  const Eigen::VectorXd mu = random_matrix(6, gen).col(1);
  const double oracle = (x - mu).dot(cov.fullPivLu().solve(x - mu));
  EXPECT_NEAR(mahalanobis_sq(x, mu, cov.inverse()), oracle, 1e-8 * std::max(1.0, oracle));
}

TEST(Mahalanobis, AffineInvariance) {
  std::mt19937_64 gen(8);
  for (int rep = 0; rep < 20; ++rep) {
    const Eigen::MatrixXd b = random_matrix(5, gen);
    const Eigen::MatrixXd cov = b * b.transpose() + Eigen::MatrixXd::Identity(5, 5);
    const Eigen::MatrixXd t = random_matrix(5, gen) + 3.0 * Eigen::MatrixXd::Identity(5, 5);
    const Eigen::VectorXd x = random_matrix(5, gen).col(0);
    const Eigen::VectorXd mu = random_matrix(5, gen).col(0);
    const double d0 = mahalanobis_sq(x, mu, cov.inverse());
    const Eigen::MatrixXd cov_t = t * cov * t.transpose();
    const double d1 = mahalanobis_sq(t * x, t * mu, cov_t.inverse());
    EXPECT_NEAR(d1, d0, 1e-6 * std::max(1.0, d0));
  }
}

TEST(Moments, WelfordMatchesTwoPass) {
  std::mt19937_64 gen(10);
  std::normal_distribution<double> nd;
  const int n = 300, d = 4;
  Eigen::MatrixXd x(n, d);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) x(i, j) = nd(gen) * (j + 1) + 5.0;
  }
  MomentAccumulator acc(d);
  for (int i = 0; i < n; ++i) acc.add(Eigen::VectorXd(x.row(i).transpose()));
  const Eigen::VectorXd mean = x.colwise().mean();
  const Eigen::MatrixXd c = x.rowwise() - mean.transpose();
  const Eigen::MatrixXd scatter = c.transpose() * c;
  EXPECT_LT((acc.mean() - mean).norm(), 1e-12);
  EXPECT_LT((acc.scatter() - scatter).norm(), 1e-9 * scatter.norm());
}

std::vector<MomentAccumulator> isotropic_classes(int k, int n, int d, double sigma, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> nd;
  std::vector<MomentAccumulator> out;
  for (int c = 0; c < k; ++c) {
    MomentAccumulator acc(d);
    Eigen::VectorXd x(d);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < d; ++j) x(j) = 10.0 * c + sigma * nd(gen);
      acc.add(x);
    }
    out.push_back(std::move(acc));
  }
  return out;
}

TEST(FitLda, IsotropicClouds) {
  const auto classes = isotropic_classes(2, 20000, 3, 2.0, 1);
  const MahalanobisFit fit = fit_lda(classes);
  ASSERT_EQ(fit.precisions.size(), 1u);
  const Eigen::MatrixXd cov = fit.precisions[0].inverse();
  EXPECT_LT((cov - 4.0 * Eigen::MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff(), 0.15);
  EXPECT_NEAR(fit.means[1](0), 10.0, 0.1);
  EXPECT_FALSE(fit.low_sample[0]);
  std::vector<double> at_mean(fit.means[1].data(), fit.means[1].data() + 3);
  EXPECT_EQ(reduce_channels(ChannelKind::kMahalanobisLDA, at_mean, &fit, 1), 0.0);
}

TEST(FitLda, SingleSampleUsesRidge) {
  std::vector<MomentAccumulator> classes(2, MomentAccumulator(3));
  classes[0].add(std::vector<double>{1, 2, 3});
  classes[1].add(std::vector<double>{-1, 0, 4});
  const MahalanobisFit fit = fit_lda(classes, 1e-3);
  const Eigen::MatrixXd cov = fit.precisions[0].inverse();
  EXPECT_LT((cov - 1e-3 * Eigen::MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(FitLda, RankDeficientWithoutRidge) {
  auto classes = isotropic_classes(1, 4, 8, 1.0, 3);
  EXPECT_EQ(code_of([&] { fit_lda(classes, 0.0); }), ErrorCode::kDegenerateCovariance);
  EXPECT_NO_THROW(fit_lda(classes));
}

TEST(FitGda, EqualScatterMatchesLda) {
  const auto classes = isotropic_classes(3, 20000, 3, 1.5, 4);
  const MahalanobisFit lda = fit_lda(classes);
  const MahalanobisFit gda = fit_gda(classes);
  ASSERT_EQ(gda.precisions.size(), 3u);
  const Eigen::MatrixXd pooled = lda.precisions[0].inverse();
  for (const auto& p : gda.precisions) {
    EXPECT_LT((p.inverse() - pooled).cwiseAbs().maxCoeff(), 0.1);
  }
}

TEST(FitGda, SingleSampleClassAndLowSampleFlag) {
  std::vector<MomentAccumulator> classes = isotropic_classes(1, 12, 10, 1.0, 5);
  classes.emplace_back(10);
  classes.back().add(std::vector<double>(10, 1.0));
  const MahalanobisFit fit = fit_gda(classes, 1e-2);
  EXPECT_LT((fit.precisions[1].inverse() - 1e-2 * Eigen::MatrixXd::Identity(10, 10)).cwiseAbs().maxCoeff(),
            1e-12);
  EXPECT_TRUE(fit.low_sample[0]);
  const MahalanobisFit def = fit_gda(std::span(classes).first(1));
  std::vector<double> x(10, 0.3);
  EXPECT_TRUE(std::isfinite(def.distance_sq(0, x)));
  EXPECT_TRUE(def.low_sample[0]);
}

TEST(ChannelReduce, Dispatch) {
  EXPECT_NEAR(reduce_channels(ChannelKind::kSimes, std::vector<double>{0.01, 0.04, 0.9}), 0.03, 1e-15);
  EXPECT_EQ(orientation_of(ChannelKind::kSimes), Orientation::kLower);
  EXPECT_EQ(reduce_channels(ChannelKind::kSum, std::vector<double>{0, 0.5, 0.25}), 0.75);
  EXPECT_EQ(orientation_of(ChannelKind::kSum), Orientation::kUpper);
  EXPECT_EQ(orientation_of(ChannelKind::kFisher), Orientation::kUpper);
  EXPECT_EQ(orientation_of(ChannelKind::kMahalanobisGDA), Orientation::kUpper);
  EXPECT_EQ(code_of([] { reduce_channels(ChannelKind::kMahalanobisLDA, std::vector<double>{1.0}); }),
            ErrorCode::kArityMismatch);
  const auto classes = isotropic_classes(1, 50, 3, 1.0, 6);
  const MahalanobisFit fit = fit_lda(classes);
  EXPECT_EQ(code_of([&] { reduce_channels(ChannelKind::kMahalanobisLDA, std::vector<double>{1.0, 2.0}, &fit); }),
            ErrorCode::kArityMismatch);
  EXPECT_EQ(code_of([] { reduce_channels(ChannelKind::kFisher, std::vector<double>{}); }), ErrorCode::kArityMismatch);
  EXPECT_EQ(oriented(Orientation::kLower, 0.25), -0.25);
}

TEST(LayerReduce, Dispatch) {
  const std::vector<double> q{0.05, 0.05};
  EXPECT_NEAR(reduce_layers(LayerKind::kFisher, q), 11.982929094215963, 1e-12);
  EXPECT_DOUBLE_EQ(reduce_layers(LayerKind::kSimes, q), 0.05);
}

TEST(SchemeString, ParseAndPrint) {
  for (const char* s : {"max-simes-fisher", "mean-simes-fisher", "mean-mahalanobisLDA-fisher",
                        "mean-mahalanobisGDA-fisher", "gramp1delta-sum-fisher", "maxdelta-sum-fisher",
                        "max-fisher-simes", "mean-fisher-fisher"}) {
    EXPECT_EQ(Scheme::parse(s).to_string(), s);
  }
  const Scheme masf = Scheme::parse("MAX-Simes-Fisher");
  EXPECT_EQ(masf.spatial, SpatialKind::kMax);
  EXPECT_EQ(masf.channel, ChannelKind::kSimes);
  EXPECT_EQ(masf.layer, LayerKind::kFisher);
  for (const char* s : {"", "max-simes", "max-simes-fisher-x", "min-simes-fisher", "max-sum-fisher",
                        "maxdelta-simes-fisher", "max-simes-bonferroni"}) {
    EXPECT_EQ(code_of([&] { Scheme::parse(s); }), ErrorCode::kInvalidScheme) << s;
  }
}

TEST(SchemeString, TableOneGrid) {
  int count = 0;
  for (const char* l : {"fisher", "simes"}) {
    for (const char* c : {"simes", "fisher"}) {
      for (const char* s : {"max", "mean"}) {
        const std::string text = std::string(s) + "-" + c + "-" + l;
        EXPECT_EQ(Scheme::parse(text).to_string(), text);
        ++count;
      }
    }
  }
  EXPECT_EQ(count, 8);
}

}  // namespace
}  // namespace masf
