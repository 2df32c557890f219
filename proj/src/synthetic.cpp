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

#include "masf/synthetic.hpp"

#include <cmath>
#include <random>

#include "masf/error.hpp"

namespace masf {

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t key(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x2545f4914f6cdd1dULL;
  for (auto p : parts) h = mix(h ^ mix(p));
  return h;
}

// Portable standard normal (Marsaglia polar) on top of mt19937_64, so the
// generated data does not depend on the standard library.
class Normal {
 public:
  explicit Normal(std::uint64_t seed) : gen_(seed) {}

  double operator()() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
  }

  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }
  std::uint64_t bits() { return gen_(); }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

constexpr double kSampleWeight = 0.3;
constexpr double kChannelWeight = 0.5;
constexpr double kPixelWeight = 0.812;  // sqrt(1 - 0.3^2 - 0.5^2), rounded
constexpr std::uint64_t kShiftSalt = 0x5348494654ULL;

}  // namespace

std::string_view to_string(ShiftPattern p) { return p == ShiftPattern::kGlobal ? "global" : "single-pixel"; }

ShiftPattern parse_shift_pattern(std::string_view text) {
  if (text == "global") return ShiftPattern::kGlobal;
  if (text == "single-pixel") return ShiftPattern::kSinglePixel;
  throw Error(ErrorCode::kInvalidArgument, "shift pattern must be 'global' or 'single-pixel'");
}

std::vector<LayerDescriptor> make_layers(const std::vector<std::array<std::uint32_t, 3>>& shapes) {
  std::vector<LayerDescriptor> out;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    out.push_back({static_cast<std::uint32_t>(i), "l" + std::to_string(i), shapes[i][0], shapes[i][1], shapes[i][2]});
  }
  return out;
}

SyntheticSource::SyntheticSource(SyntheticSpec spec, std::size_t per_class, std::uint64_t stream)
    : spec_(std::move(spec)), per_class_(per_class), stream_(stream) {
  if (spec_.num_classes < 1) throw Error(ErrorCode::kInvalidArgument, "synthetic spec needs k >= 1");
  if (spec_.layers.empty()) throw Error(ErrorCode::kInvalidArgument, "synthetic spec needs layers");
  for (const auto& l : spec_.layers) {
    if (l.channels == 0 || l.height == 0 || l.width == 0) {
      throw Error(ErrorCode::kInvalidArgument, "synthetic layer dims must be >= 1");
    }
  }
  const auto& sh = spec_.shift;
  if (!(sh.fraction >= 0.0 && sh.fraction <= 1.0)) throw Error(ErrorCode::kInvalidArgument, "shift fraction in [0,1]");
  if (!std::isfinite(sh.magnitude)) throw Error(ErrorCode::kInvalidArgument, "shift magnitude must be finite");

  const std::size_t k = static_cast<std::size_t>(spec_.num_classes);
  mu_.resize(k);
  sigma_.resize(k);
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t l = 0; l < spec_.layers.size(); ++l) {
      Normal nd(key({spec_.seed, 0x4d4f444cULL, c, l}));
      std::vector<float> mu(spec_.layers[l].channels), sigma(spec_.layers[l].channels);
      for (std::size_t j = 0; j < mu.size(); ++j) {
        mu[j] = static_cast<float>(nd());
        sigma[j] = static_cast<float>(std::exp(0.25 * nd()));
      }
      mu_[c].push_back(std::move(mu));
      sigma_[c].push_back(std::move(sigma));
    }
  }

  // Same selection rule as detector channel sampling, on a separate seed.
  if (sh.fraction > 0.0) {
    shifted_ = sample_channels(spec_.layers, sh.fraction, key({spec_.seed, kShiftSalt}));
  } else {
    shifted_.assign(spec_.layers.size(), {});
  }
  for (std::size_t l = 0; l < spec_.layers.size(); ++l) {
    std::vector<bool> flags(spec_.layers[l].channels, false);
    for (auto j : shifted_[l]) flags[j] = true;
    is_shifted_.push_back(std::move(flags));
  }
}

FeatureRecord SyntheticSource::record(ClassId c, std::size_t index) const {
  if (c < 0 || c >= spec_.num_classes) throw Error(ErrorCode::kOutOfRange, "class " + std::to_string(c));
  const auto ci = static_cast<std::size_t>(c);
  FeatureRecord r;
  r.id = "c" + std::to_string(c) + "_s" + std::to_string(stream_) + "_" + std::to_string(index);
  r.y = c;
  r.y_hat = c;
  Normal nd(key({spec_.seed, stream_, ci, index}));
  const double g = nd();
  for (std::size_t l = 0; l < spec_.layers.size(); ++l) {
    const auto& d = spec_.layers[l];
    LayerTensor t{d.channels, d.height, d.width, std::vector<float>(std::size_t{d.channels} * d.height * d.width)};
    const std::size_t hw = t.spatial_size();
    for (std::size_t j = 0; j < d.channels; ++j) {
      const double mu = mu_[ci][l][j];
      const double sigma = sigma_[ci][l][j];
      const double base = mu + sigma * (kSampleWeight * g + kChannelWeight * nd());
      auto ch = t.channel(j);
      for (std::size_t i = 0; i < hw; ++i) ch[i] = static_cast<float>(base + sigma * kPixelWeight * nd());
      if (is_shifted_[l][j]) {
        const double delta = spec_.shift.magnitude * sigma;
        if (spec_.shift.pattern == ShiftPattern::kGlobal) {
          for (auto& v : ch) v = static_cast<float>(v + delta);
        } else {
          const auto at = static_cast<std::size_t>(nd.bits() % hw);
          ch[at] = static_cast<float>(ch[at] + delta);
        }
      }
    }
    r.layers.push_back(std::move(t));
  }
  return r;
}

void SyntheticSource::visit_class(ClassId c, std::size_t begin, std::size_t end,
                                  const std::function<void(const FeatureRecord&)>& fn) const {
  end = std::min(end, per_class_);
  for (std::size_t i = begin; i < end; ++i) fn(record(c, i));
}

std::filesystem::path write_synthetic(const SyntheticSource& source, const std::filesystem::path& dir,
                                      const std::string& dataset, bool labeled) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot create " + dir.string() + ": " + ec.message());
  const auto& layers = source.layers();
  const std::size_t per_class = source.class_size(0);
  const std::size_t n = per_class * static_cast<std::size_t>(source.num_classes());

  Manifest m;
  m.dataset = dataset;
  m.num_classes = source.num_classes();
  m.layers = layers;
  std::vector<std::vector<float>> batches(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    batches[l].reserve(n * layers[l].channels * layers[l].height * layers[l].width);
  }
  std::uint32_t index = 0;
  for (int c = 0; c < source.num_classes(); ++c) {
    source.visit_class(c, 0, per_class, [&](const FeatureRecord& r) {
      SampleEntry e;
      e.id = r.id;
      if (labeled) e.y = r.y;
      e.y_hat = r.y_hat;
      for (std::size_t l = 0; l < layers.size(); ++l) {
        batches[l].insert(batches[l].end(), r.layers[l].values.begin(), r.layers[l].values.end());
        e.tensors.push_back({"layer" + std::to_string(layers[l].id) + ".bin", index});
      }
      m.samples.push_back(std::move(e));
      ++index;
    });
  }
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::vector<std::uint32_t> dims{static_cast<std::uint32_t>(n), layers[l].channels, layers[l].height,
                                          layers[l].width};
    write_tensor(dims, batches[l], dir / ("layer" + std::to_string(layers[l].id) + ".bin"));
  }
  const auto path = dir / "manifest.json";
  write_manifest(m, path);
  return path;
}

}  // namespace masf
