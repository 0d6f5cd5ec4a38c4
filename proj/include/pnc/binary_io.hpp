#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pnc/tensor.hpp"

namespace pnc {

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t v);

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Little-endian encoder over an in-memory buffer.
class ByteWriter {
 public:
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void raw(std::string_view bytes) { buf_.append(bytes); }
  /// u32 length prefix followed by the bytes.
  void blob(std::string_view bytes);
  /// u32 count, then per tensor: name blob, ndim u32, dims u32 x ndim, f64 payload.
  void tensors(const NamedTensors& named);

  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

/// Little-endian decoder; every read is bounds checked and reports the
/// file context on truncation.
class ByteReader {
 public:
  ByteReader(std::string_view data, std::string context) : data_(data), context_(std::move(context)) {}

  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::string_view raw(std::size_t n);
  std::string blob();
  NamedTensors tensors();

  std::size_t remaining() const { return data_.size() - pos_; }
  void expect_end() const;

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
  std::string context_;
};

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace pnc
