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
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace masf {

using ClassId = int;

inline constexpr char kTensorMagic[4] = {'M', 'A', 'S', 'F'};
inline constexpr std::uint16_t kTensorVersion = 1;
inline constexpr std::uint8_t kDtypeFloat32 = 0;

/// Dense float32 tensor as stored in a tensor file.
struct Tensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> values;
};

struct TensorHeader {
  std::uint16_t version = kTensorVersion;
  std::uint8_t dtype = kDtypeFloat32;
  std::vector<std::uint32_t> dims;

  std::size_t header_bytes() const { return 8 + 4 * dims.size(); }
};

/// Writes `values` with shape `dims` in the little-endian tensor layout:
/// "MASF" | u16 version | u8 dtype | u8 rank | rank x u32 dims | f32 payload.
void write_tensor(std::span<const std::uint32_t> dims, std::span<const float> values,
                  const std::filesystem::path& path);

TensorHeader read_tensor_header(const std::filesystem::path& path);
Tensor read_tensor(const std::filesystem::path& path);

/// One layer of one sample: `channels` maps of `height * width` values, row-major.
struct LayerTensor {
  std::uint32_t channels = 0;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::vector<float> values;

  std::size_t spatial_size() const { return std::size_t{height} * width; }
  std::span<const float> channel(std::size_t j) const {
    return std::span<const float>(values).subspan(j * spatial_size(), spatial_size());
  }
  std::span<float> channel(std::size_t j) {
    return std::span<float>(values).subspan(j * spatial_size(), spatial_size());
  }
};

struct FeatureRecord {
  std::string id;
  std::vector<LayerTensor> layers;
  std::optional<ClassId> y;
  std::optional<ClassId> y_hat;
};

struct LayerDescriptor {
  std::uint32_t id = 0;
  std::string name;
  std::uint32_t channels = 0;
  std::uint32_t height = 0;
  std::uint32_t width = 0;

  friend bool operator==(const LayerDescriptor&, const LayerDescriptor&) = default;
};

/// A layer tensor lives either in its own rank-3 file or at `index` inside a
/// rank-4 (N, C, H, W) batch file.
struct TensorRef {
  std::filesystem::path path;
  std::optional<std::uint32_t> index;
};

struct SampleEntry {
  std::string id;
  std::vector<TensorRef> tensors;  // manifest layer order
  std::optional<ClassId> y;
  std::optional<ClassId> y_hat;
};

struct Manifest {
  std::string dataset;
  int num_classes = 0;
  std::vector<LayerDescriptor> layers;
  std::vector<SampleEntry> samples;
  std::filesystem::path base_dir;  // relative tensor paths resolve against this

  std::filesystem::path resolve(const std::filesystem::path& p) const {
    return p.is_absolute() ? p : base_dir / p;
  }
  /// Number of samples carrying label `c`.
  std::size_t class_count(ClassId c) const;
};

/// Parses and validates a manifest, including the header of every referenced
/// tensor file.
Manifest read_manifest(const std::filesystem::path& path);

/// Serializes `manifest` as JSON. Tensor paths are written as given.
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);

/// Loads sample `index` of `manifest`. Throws NonFiniteTensor on NaN/Inf.
FeatureRecord load_record(const Manifest& manifest, std::size_t index);

struct StreamOptions {
  std::optional<ClassId> class_filter;
  /// Skip (and count) records holding non-finite values instead of throwing.
  bool quarantine = false;
};

/// Single-consumer iterator over a manifest's records in manifest order.
class RecordStream {
 public:
  RecordStream(const Manifest& manifest, StreamOptions options = {});

  std::optional<FeatureRecord> next();

  const std::vector<std::string>& quarantined() const { return quarantined_; }

 private:
  const Manifest* manifest_;
  StreamOptions options_;
  std::size_t cursor_ = 0;
  std::vector<std::string> quarantined_;
};

/// Convenience wrapper draining a RecordStream.
std::vector<FeatureRecord> stream_records(const Manifest& manifest, StreamOptions options = {});

bool all_finite(const FeatureRecord& record);

}  // namespace masf
