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

#include "masf/eval.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "test_util.hpp"

namespace masf {
namespace {

using testing::code_of;

// Reference per-scenario TPR95 of max-simes-fisher, DenseNet rows then ResNet rows.
const std::vector<double> kReferenceMasf = {98.6, 97.9, 99.2, 89.0, 93.4, 96.5, 88.4, 99.8,  100.0,
                                            98.9, 98.1, 99.5, 86.2, 92.7, 94.5, 98.0, 99.9, 100.0};

std::vector<double> uniforms(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = u(gen);
  return v;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

TEST(TprAtTnr, HandExample) {
  const std::vector<double> in = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  const std::vector<double> out = {0.05, 0.5};
  const auto r = tpr_at_tnr(in, out, 0.95);
  EXPECT_EQ(r.threshold, 0.1);
  EXPECT_EQ(r.tpr, 0.5);
}

TEST(TprAtTnr, PerfectSeparation) {
  const auto in = uniforms(1000, 1);
  const std::vector<double> out(50, 0.0);
  EXPECT_EQ(tpr_at_tnr(in, out).tpr, 1.0);
}

TEST(TprAtTnr, SameDistributionGivesFalsePositiveRate) {
  const auto in = uniforms(10000, 2);
  const auto out = uniforms(10000, 3);
  const double se = std::sqrt(0.05 * 0.95 / 10000.0);
  EXPECT_NEAR(tpr_at_tnr(in, out).tpr, 0.05, 3 * se);
}

TEST(TprAtTnr, RespectsFprBudgetWithTies) {
  std::vector<double> in(100, 0.5);
  for (int i = 0; i < 3; ++i) in[static_cast<std::size_t>(i)] = 0.01;
  for (int i = 3; i < 10; ++i) in[static_cast<std::size_t>(i)] = 0.02;
  for (double tnr : {0.9, 0.95, 0.97, 0.99}) {
    const auto r = tpr_at_tnr(in, in, tnr);
    const auto fp = std::count_if(in.begin(), in.end(), [&](double s) { return s < r.threshold; });
    EXPECT_LE(static_cast<double>(fp), (1.0 - tnr) * 100.0 + 1e-9) << tnr;
  }
  EXPECT_EQ(tpr_at_tnr(in, in, 0.95).threshold, 0.02);
  EXPECT_EQ(tpr_at_tnr(in, in, 0.97).threshold, 0.02);
  EXPECT_EQ(tpr_at_tnr(in, in, 0.99).threshold, 0.01);
}

TEST(TprAtTnr, Errors) {
  const std::vector<double> some = {0.5};
  EXPECT_EQ(code_of([&] { tpr_at_tnr({}, some); }), ErrorCode::kEmptyScores);
  EXPECT_EQ(code_of([&] { tpr_at_tnr(some, {}); }), ErrorCode::kEmptyScores);
  EXPECT_EQ(code_of([&] { tpr_at_tnr(some, some, 1.0); }), ErrorCode::kOutOfRange);
}

TEST(Auroc, Examples) {
  EXPECT_EQ(auroc(std::vector<double>{0.9, 0.8}, std::vector<double>{0.1, 0.85}), 0.75);
  EXPECT_EQ(auroc(std::vector<double>{0.6, 0.7}, std::vector<double>{0.1, 0.2}), 1.0);
  EXPECT_EQ(auroc(std::vector<double>{0.5}, std::vector<double>{0.5}), 0.5);
  EXPECT_NEAR(auroc(uniforms(5000, 4), uniforms(5000, 5)), 0.5, 0.02);
  EXPECT_EQ(code_of([] { auroc({}, std::vector<double>{1.0}); }), ErrorCode::kEmptyScores);
}

TEST(Auroc, InvariantUnderMonotoneTransform) {
  auto in = uniforms(300, 6);
  auto out = uniforms(200, 7);
  for (auto& x : out) x *= 0.7;
  const double base = auroc(in, out);
  for (auto& x : in) x = std::log(x) * 3.0 + 1.0;
  for (auto& x : out) x = std::log(x) * 3.0 + 1.0;
  EXPECT_EQ(auroc(in, out), base);
}

TEST(Aggregate, Examples) {
  const auto one = aggregate(std::vector<double>{0.9});
  EXPECT_EQ(one.mean, 0.9);
  EXPECT_EQ(one.sd, 0.0);
  EXPECT_EQ(one.min, 0.9);
  const auto two = aggregate(std::vector<double>{1.0, 0.0}, SdKind::kPopulation);
  EXPECT_EQ(two.mean, 0.5);
  EXPECT_EQ(two.sd, 0.5);
  EXPECT_EQ(two.min, 0.0);
  EXPECT_NEAR(aggregate(std::vector<double>{1.0, 0.0}).sd, std::sqrt(0.5), 1e-15);
  EXPECT_EQ(code_of([] { aggregate({}); }), ErrorCode::kEmptyScores);
}

TEST(Aggregate, ReferenceScenarioRow) {
  ASSERT_EQ(kReferenceMasf.size(), 18u);
  const auto a = aggregate(kReferenceMasf);
  EXPECT_NEAR(a.mean, 96.1, 0.05);
  EXPECT_NEAR(a.sd, 4.4, 0.05);
  EXPECT_EQ(a.min, 86.2);
  // The population SD rounds to 4.3 and does not reproduce the row.
  EXPECT_GT(std::abs(aggregate(kReferenceMasf, SdKind::kPopulation).sd - 4.4), 0.05);
}

TEST(Kolmogorov, ReferenceValues) {
  EXPECT_EQ(kolmogorov_sf(0.0), 1.0);
  EXPECT_NEAR(kolmogorov_sf(1.36), 0.0494, 2e-4);
  EXPECT_NEAR(kolmogorov_sf(1.63), 0.0098, 2e-4);
  EXPECT_NEAR(kolmogorov_sf(0.5), 0.9639, 2e-4);
  // Both series agree where they meet.
  EXPECT_NEAR(kolmogorov_sf(1.18 - 1e-12), kolmogorov_sf(1.18), 1e-10);
}

TEST(KsUniformity, Examples) {
  const std::size_t n = 999;
  std::vector<double> grid(n);
  for (std::size_t i = 0; i < n; ++i) grid[i] = static_cast<double>(i + 1) / static_cast<double>(n + 1);
  EXPECT_LE(ks_uniformity(grid).distance, 1.0 / static_cast<double>(n + 1) + 1e-15);
  EXPECT_NEAR(ks_uniformity(std::vector<double>(50, 0.01)).distance, 0.99, 1e-12);
  EXPECT_EQ(code_of([] { ks_uniformity(std::vector<double>(19, 0.5)); }), ErrorCode::kTooFewSamples);
}

TEST(KsUniformity, TrueUniformsPass) {
  int pass = 0;
  for (std::uint64_t s = 0; s < 100; ++s) pass += ks_uniformity(uniforms(10000, 100 + s)).pvalue > 0.01;
  EXPECT_GE(pass, 98);
}

TEST(KsTest, DetectsShiftedSample) {
  auto v = uniforms(2000, 9);
  for (auto& x : v) x = std::sqrt(x);
  EXPECT_LT(ks_uniformity(v).pvalue, 1e-6);
}

TEST(QqExport, UniformGridOnIdentity) {
  testing::TempDir dir("qq");
  const std::size_t n = 1999;
  std::vector<double> grid(n);
  for (std::size_t i = 0; i < n; ++i) grid[i] = static_cast<double>(i + 1) / static_cast<double>(n + 1);
  qq_export(grid, dir / "qq.csv");
  const auto u = read_csv_column(dir / "qq.csv", "uniform_quantile");
  const auto e = read_csv_column(dir / "qq.csv", "empirical_quantile");
  ASSERT_EQ(u.size(), 999u);
  ASSERT_EQ(e.size(), 999u);
  EXPECT_EQ(u.front(), 0.001);
  EXPECT_EQ(u.back(), 0.999);
  for (std::size_t i = 0; i < u.size(); ++i) EXPECT_LE(std::abs(u[i] - e[i]), 1.0 / (n + 1) + 1e-12);
}

TEST(QqExport, StochasticallyLargerStaysAbove) {
  testing::TempDir dir("qq_large");
  auto v = uniforms(5000, 10);
  for (auto& x : v) x = std::sqrt(x);
  qq_export(v, dir / "qq.csv");
  const auto u = read_csv_column(dir / "qq.csv", "uniform_quantile");
  const auto e = read_csv_column(dir / "qq.csv", "empirical_quantile");
  for (std::size_t i = 0; i < u.size(); ++i) EXPECT_GE(e[i], u[i]);
  EXPECT_EQ(code_of([&] { qq_export(v, "/nonexistent/dir/qq.csv"); }), ErrorCode::kIo);
}

TEST(ScoreCsv, AllClassRule) {
  std::vector<DetectionReport> reports(2);
  reports[0] = {"a", {0.5, 0.04}, 0.5, std::nullopt, std::nullopt};
  reports[1] = {"b", {0.01, 0.03}, 0.03, std::nullopt, std::nullopt};
  EXPECT_EQ(format_score_csv(reports, 2, {}), "id,q_0,q_1,q_max\na,0.5,0.040000000000000001,0.5\n"
                                                "b,0.01,0.029999999999999999,0.029999999999999999\n");
  const auto with_alpha = format_score_csv(reports, 2, {0.05, std::nullopt});
  EXPECT_EQ(with_alpha,
            "id,q_0,q_1,q_max,reject,t1e_bound\n"
            "a,0.5,0.040000000000000001,0.5,0,0.050000000000000003\n"
            "b,0.01,0.029999999999999999,0.029999999999999999,1,0.050000000000000003\n");
}

TEST(ScoreCsv, PredictedClassRule) {
  std::vector<DetectionReport> reports(2);
  reports[0] = {"a", {0.5, 0.04}, 0.5, 1, 0.04};
  reports[1] = {"b", {0.25, 0.75}, 0.75, 0, 0.25};
  const auto csv = format_score_csv(reports, 2, {0.05, 0.95});
  EXPECT_EQ(csv,
            "id,q_0,q_1,q_max,q_yhat,reject,t1e_bound\n"
            "a,0.5,0.040000000000000001,0.5,0.040000000000000001,1,0.097500000000000045\n"
            "b,0.25,0.75,0.75,0.25,0,0.097500000000000045\n");
  // Without an accuracy estimate the q_max rule applies.
  const auto plain = format_score_csv(reports, 2, {0.05, std::nullopt});
  EXPECT_NE(plain.find("a,0.5,0.040000000000000001,0.5,0.040000000000000001,0,0.050000000000000003"),
            std::string::npos);
}

TEST(ScoreCsv, RoundTripsThroughReader) {
  testing::TempDir dir("score_csv");
  std::vector<DetectionReport> reports = {{"r0", {0.1 / 3.0}, 0.1 / 3.0, 0, 0.1 / 3.0}};
  write_score_csv(reports, 1, {}, dir / "s.csv");
  const auto q = read_csv_column(dir / "s.csv", "q_max");
  ASSERT_EQ(q.size(), 1u);
  EXPECT_EQ(q[0], 0.1 / 3.0);
  EXPECT_EQ(code_of([&] { read_csv_column(dir / "s.csv", "nope"); }), ErrorCode::kInvalidArgument);
  EXPECT_EQ(code_of([&] { read_csv_column(dir / "missing.csv", "q_max"); }), ErrorCode::kIo);
}

TEST(ScenarioCsv, Format) {
  testing::TempDir dir("scenario");
  const std::vector<ScenarioRow> rows = {{"F1", 0.5, 0.75}, {"F2", 1.0, 1.0}};
  write_scenario_csv(rows, dir / "s.csv");
  EXPECT_EQ(slurp(dir / "s.csv"), "scenario,tpr95,auroc\nF1,0.5,0.75\nF2,1,1\n");
}

TEST(FormatDouble, RoundTrips) {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, 6.0 / 5001.0}) EXPECT_EQ(std::stod(format_double(v)), v);
}

}  // namespace
}  // namespace masf
