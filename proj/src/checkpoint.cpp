// SPDX-License-Identifier: Apache-2.0
#include "gridnerf/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "gridnerf/errors.hpp"

namespace gridnerf {

namespace {

template <typename T>
void append_le(std::vector<std::byte>& out, T value) {
  std::byte raw[sizeof(T)];
  std::memcpy(raw, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
  out.insert(out.end(), raw, raw + sizeof(T));
}

template <typename T>
T read_le(const std::byte* p) {
  std::byte raw[sizeof(T)];
  std::memcpy(raw, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
  T value;
  std::memcpy(&value, raw, sizeof(T));
  return value;
}

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::kFloat32: return 4;
    case DType::kFloat64: return 8;
    case DType::kInt64: return 8;
    case DType::kUInt8: return 1;
  }
  throw DataError("unknown dtype code " + std::to_string(static_cast<int>(d)));
}

template <typename T>
std::vector<std::byte> encode_values(std::span<const T> values) {
  std::vector<std::byte> out;
  out.reserve(values.size() * sizeof(T));
  for (const T v : values) append_le(out, v);
  return out;
}

template <typename T>
std::vector<T> decode_values(const TensorRecord& r) {
  const std::size_t n = r.bytes.size() / sizeof(T);
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = read_le<T>(r.bytes.data() + i * sizeof(T));
  return out;
}

class Reader {
 public:
  explicit Reader(std::vector<std::byte> bytes) : bytes_(std::move(bytes)) {}

  const std::byte* take(std::size_t n) {
    if (n > bytes_.size() - pos_) throw DataError("checkpoint truncated");
    const std::byte* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  template <typename T>
  T get() {
    return read_le<T>(take(sizeof(T)));
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::vector<std::byte> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void Checkpoint::insert(TensorRecord record) {
  if (auto it = index_.find(record.name); it != index_.end()) {
    records_[it->second] = std::move(record);
    return;
  }
  index_.emplace(record.name, records_.size());
  records_.push_back(std::move(record));
}

void Checkpoint::put(std::string name, const Array<float>& a) {
  insert({std::move(name), DType::kFloat32, a.shape(), encode_values(a.data())});
}

void Checkpoint::put(std::string name, const Array<double>& a) {
  insert({std::move(name), DType::kFloat64, a.shape(), encode_values(a.data())});
}

void Checkpoint::put_int64(std::string name, const std::vector<std::int64_t>& values) {
  insert({std::move(name), DType::kInt64, Shape{values.size()},
          encode_values(std::span<const std::int64_t>(values))});
}

void Checkpoint::put_text(std::string name, std::string_view text) {
  std::vector<std::byte> bytes(text.size());
  std::memcpy(bytes.data(), text.data(), text.size());
  insert({std::move(name), DType::kUInt8, Shape{text.size()}, std::move(bytes)});
}

bool Checkpoint::contains(std::string_view name) const { return index_.contains(std::string(name)); }

const TensorRecord& Checkpoint::find(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw DataError("checkpoint has no record named '" + std::string(name) + "'");
  return records_[it->second];
}

template <typename T>
Array<T> Checkpoint::get(std::string_view name) const {
  const TensorRecord& r = find(name);
  std::vector<T> values;
  if (r.dtype == DType::kFloat32) {
    auto raw = decode_values<float>(r);
    values.assign(raw.begin(), raw.end());
  } else if (r.dtype == DType::kFloat64) {
    auto raw = decode_values<double>(r);
    values.assign(raw.begin(), raw.end());
  } else {
    throw DataError("record '" + r.name + "' is not a real-valued tensor");
  }
  return Array<T>(r.shape, std::move(values));
}

template Array<float> Checkpoint::get<float>(std::string_view) const;
template Array<double> Checkpoint::get<double>(std::string_view) const;

std::vector<std::int64_t> Checkpoint::get_int64(std::string_view name) const {
  const TensorRecord& r = find(name);
  if (r.dtype != DType::kInt64) throw DataError("record '" + r.name + "' is not int64");
  return decode_values<std::int64_t>(r);
}

std::string Checkpoint::get_text(std::string_view name) const {
  const TensorRecord& r = find(name);
  if (r.dtype != DType::kUInt8) throw DataError("record '" + r.name + "' is not text");
  return std::string(reinterpret_cast<const char*>(r.bytes.data()), r.bytes.size());
}

void Checkpoint::save(const std::filesystem::path& path) const {
  std::vector<std::byte> out;
  for (const char c : kMagic) out.push_back(static_cast<std::byte>(c));
  append_le<std::uint64_t>(out, records_.size());
  for (const TensorRecord& r : records_) {
    append_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
    for (const char c : r.name) out.push_back(static_cast<std::byte>(c));
    out.push_back(static_cast<std::byte>(r.dtype));
    append_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.shape.size()));
    for (const std::size_t d : r.shape) append_le<std::uint64_t>(out, d);
    out.insert(out.end(), r.bytes.begin(), r.bytes.end());
  }
  // Write to a sibling file first so a failed write never clobbers a good checkpoint.
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp.string() + " for writing");
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  std::vector<std::byte> bytes(raw.size());
  std::memcpy(bytes.data(), raw.data(), raw.size());

  Reader in(std::move(bytes));
  const std::byte* magic = in.take(kMagic.size());
  if (std::memcmp(magic, kMagic.data(), kMagic.size()) != 0) {
    throw DataError(path.string() + " is not a checkpoint (bad magic)");
  }
  Checkpoint ckpt;
  const auto count = in.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    TensorRecord r;
    const auto name_len = in.get<std::uint32_t>();
    const std::byte* name = in.take(name_len);
    r.name.assign(reinterpret_cast<const char*>(name), name_len);
    r.dtype = static_cast<DType>(in.get<std::uint8_t>());
    const std::size_t elem = dtype_size(r.dtype);
    const auto rank = in.get<std::uint32_t>();
    for (std::uint32_t d = 0; d < rank; ++d) r.shape.push_back(in.get<std::uint64_t>());
    const std::size_t nbytes = shape_size(r.shape) * elem;
    const std::byte* data = in.take(nbytes);
    r.bytes.assign(data, data + nbytes);
    ckpt.insert(std::move(r));
  }
  if (!in.done()) throw DataError("trailing bytes after checkpoint records in " + path.string());
  return ckpt;
}

}  // namespace gridnerf
