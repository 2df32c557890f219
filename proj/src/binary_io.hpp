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

// Little-endian encode/decode helpers shared by the tensor and detector formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <type_traits>

#include "masf/error.hpp"

namespace masf::detail {

template <typename T>
  requires std::is_arithmetic_v<T>
void put_le(std::string& out, T value) {
  using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
            std::conditional_t<sizeof(T) == 2, std::uint16_t,
            std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>;
  const U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
  }
}

template <typename T>
  requires std::is_arithmetic_v<T>
T get_le(const unsigned char* p) {
  using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
            std::conditional_t<sizeof(T) == 2, std::uint16_t,
            std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>;
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    bits |= static_cast<U>(static_cast<U>(p[i]) << (8 * i));
  }
  return std::bit_cast<T>(bits);
}

/// Bounds-checked cursor over an in-memory byte buffer. Running off the end
/// raises `overflow_code`.
class ByteReader {
 public:
  ByteReader(std::string_view bytes, ErrorCode overflow_code)
      : bytes_(bytes), code_(overflow_code) {}

  template <typename T>
  T read() {
    require(sizeof(T));
    T v = get_le<T>(reinterpret_cast<const unsigned char*>(bytes_.data() + pos_));
    pos_ += sizeof(T);
    return v;
  }

  std::string_view read_bytes(std::size_t n) {
    require(n);
    auto v = bytes_.substr(pos_, n);
    pos_ += n;
    return v;
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void require(std::size_t n) const {
    if (n > bytes_.size() - pos_) {
      throw Error(code_, "unexpected end of data at byte " + std::to_string(pos_));
    }
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
  ErrorCode code_;
};

/// FNV-1a, 64-bit.
inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace masf::detail
