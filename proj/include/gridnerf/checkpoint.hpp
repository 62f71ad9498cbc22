// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "gridnerf/array.hpp"

namespace gridnerf {

enum class DType : std::uint8_t {
  kFloat32 = 1,
  kFloat64 = 2,
  kInt64 = 3,
  kUInt8 = 4,
};

struct TensorRecord {
  std::string name;
  DType dtype = DType::kFloat32;
  Shape shape;
  std::vector<std::byte> bytes;  // little-endian element data
};

// Named tensor container persisted as:
//   "GRIDNRF1" | u64 record count | records...
//   record = u32 name length | name bytes | u8 dtype | u32 rank | u64 extents[rank] | raw values
// All integers and values are little-endian. Records keep insertion order.
class Checkpoint {
 public:
  static constexpr std::string_view kMagic = "GRIDNRF1";

  void put(std::string name, const Array<float>& a);
  void put(std::string name, const Array<double>& a);
  void put_int64(std::string name, const std::vector<std::int64_t>& values);
  void put_text(std::string name, std::string_view text);

  bool contains(std::string_view name) const;
  // Converts between 32- and 64-bit reals when the stored dtype differs from T.
  template <typename T>
  Array<T> get(std::string_view name) const;
  std::vector<std::int64_t> get_int64(std::string_view name) const;
  std::string get_text(std::string_view name) const;

  const std::vector<TensorRecord>& records() const { return records_; }

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  void insert(TensorRecord record);
  const TensorRecord& find(std::string_view name) const;

  std::vector<TensorRecord> records_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace gridnerf
