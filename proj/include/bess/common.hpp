/*
 * Copyright (c) 2026, The BESS-KGE Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

namespace bess {

using EntityId = std::uint32_t;
using RelationId = std::uint32_t;

/// Reserved id of padding rows. Never sampled, updated or predicted.
inline constexpr EntityId kPaddingEntity = std::numeric_limits<EntityId>::max();

/// Base of every error raised by the library. `category()` is a short
/// machine-readable tag ("ingest", "config", "fabric", ...) used by the CLI
/// to build its single-line error reports.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& what)
      : std::runtime_error(what), category_(std::move(category)) {}

  const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

inline void require(bool ok, std::string_view category, const std::string& what) {
  if (!ok) throw Error(std::string(category), what);
}

enum class Precision { Half, Single, Double };

inline std::size_t bytes_per_element(Precision p) {
  switch (p) {
    case Precision::Half: return 2;
    case Precision::Single: return 4;
    case Precision::Double: return 8;
  }
  return 0;
}

inline std::string_view to_string(Precision p) {
  switch (p) {
    case Precision::Half: return "half";
    case Precision::Single: return "single";
    case Precision::Double: return "double";
  }
  return "?";
}

inline Precision parse_precision(std::string_view s) {
  if (s == "half") return Precision::Half;
  if (s == "single") return Precision::Single;
  if (s == "double") return Precision::Double;
  throw Error("config", "unknown precision '" + std::string(s) + "' (expected half|single|double)");
}

inline std::uint16_t to_half_bits(float x) {
  return Eigen::numext::bit_cast<std::uint16_t>(Eigen::half(x));
}

inline float from_half_bits(std::uint16_t bits) {
  return static_cast<float>(Eigen::numext::bit_cast<Eigen::half>(bits));
}

/// Rounds `x` to the nearest value representable at storage precision `p`.
template <class Real>
Real round_to_storage(Real x, Precision p) {
  switch (p) {
    case Precision::Half: return static_cast<Real>(from_half_bits(to_half_bits(static_cast<float>(x))));
    case Precision::Single: return static_cast<Real>(static_cast<float>(x));
    case Precision::Double: return x;
  }
  return x;
}

// ---------------------------------------------------------------------------
// Deterministic random streams.
//
// Every random decision in the engine is keyed by a tuple of integers (run
// seed, step, worker, ...) so that results do not depend on how work is
// scheduled across workers or threads.

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

template <class... Keys>
constexpr std::uint64_t mix_keys(std::uint64_t seed, Keys... keys) {
  std::uint64_t h = splitmix64(seed);
  ((h = splitmix64(h ^ static_cast<std::uint64_t>(keys))), ...);
  return h;
}

template <class... Keys>
std::mt19937_64 derive_rng(std::uint64_t seed, Keys... keys) {
  return std::mt19937_64(mix_keys(seed, keys...));
}

/// Uniform in [0, 1) from a 64-bit hash, 53 bits of mantissa.
inline double hash_to_unit(std::uint64_t h) {
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

// ---------------------------------------------------------------------------
// Row-major dense matrix. Just enough structure for embedding tables and
// projection matrices; rows are exposed as spans.

template <class T>
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> flat() { return data_; }
  std::span<const T> flat() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

template <class To, class From>
Matrix<To> matrix_cast(const Matrix<From>& m) {
  Matrix<To> out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.size(); ++i) out.flat()[i] = static_cast<To>(m.flat()[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Little-endian binary IO shared by the KGT/KGF/KGC formats.

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

class ByteWriter {
 public:
  template <class T>
  void put(const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const std::byte*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  template <class T>
  void put_span(std::span<const T> v) {
    const auto* p = reinterpret_cast<const std::byte*>(v.data());
    bytes_.insert(bytes_.end(), p, p + v.size_bytes());
  }
  void put_magic(std::string_view magic) {
    for (char c : magic) bytes_.push_back(static_cast<std::byte>(c));
  }
  void put_string(std::string_view s) {
    put<std::uint64_t>(s.size());
    for (char c : s) bytes_.push_back(static_cast<std::byte>(c));
  }
  const std::vector<std::byte>& bytes() const { return bytes_; }
  std::vector<std::byte>& bytes() { return bytes_; }

 private:
  std::vector<std::byte> bytes_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::byte> bytes, std::string category)
      : bytes_(bytes), category_(std::move(category)) {}

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

  template <class T>
  T get(std::string_view what) {
    static_assert(std::is_trivially_copyable_v<T>);
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  template <class T>
  void get_span(std::span<T> out, std::string_view what) {
    need(out.size_bytes(), what);
    std::memcpy(out.data(), bytes_.data() + pos_, out.size_bytes());
    pos_ += out.size_bytes();
  }
  void expect_magic(std::string_view magic) {
    need(magic.size(), "magic");
    for (std::size_t i = 0; i < magic.size(); ++i) {
      if (static_cast<char>(bytes_[pos_ + i]) != magic[i]) {
        fail("bad magic, expected \"" + std::string(magic) + "\"");
      }
    }
    pos_ += magic.size();
  }
  std::string get_string(std::string_view what) {
    auto n = get<std::uint64_t>(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  [[noreturn]] void fail(const std::string& msg) const {
    throw Error(category_, msg + " at byte offset " + std::to_string(pos_));
  }

 private:
  void need(std::size_t n, std::string_view what) const {
    if (remaining() < n) fail("truncated " + std::string(what));
  }

  std::span<const std::byte> bytes_;
  std::size_t pos_ = 0;
  std::string category_;
};

inline std::vector<std::byte> read_file_bytes(const std::string& path, std::string_view category) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), category, "cannot open '" + path + "' for reading");
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  std::vector<std::byte> bytes(size);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  require(static_cast<bool>(in) || size == 0, category, "failed reading '" + path + "'");
  return bytes;
}

inline void write_file_bytes(const std::string& path, std::span<const std::byte> bytes,
                             std::string_view category) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), category, "cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), category, "failed writing '" + path + "'");
}

}  // namespace bess
