#include "pnc/binary_io.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "pnc/errors.hpp"

namespace pnc {

namespace {
constexpr std::uint32_t kMaxRank = 8;
constexpr std::uint32_t kMaxName = 4096;
}  // namespace

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void ByteWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::blob(std::string_view bytes) {
  if (bytes.size() > std::numeric_limits<std::uint32_t>::max()) throw ContractError("blob too large");
  u32(static_cast<std::uint32_t>(bytes.size()));
  raw(bytes);
}

void ByteWriter::tensors(const NamedTensors& named) {
  u32(static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, t] : named) {
    blob(name);
    u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.dims()) u32(static_cast<std::uint32_t>(d));
    for (double v : t.data()) f64(v);
  }
}

std::string_view ByteReader::raw(std::size_t n) {
  if (n > remaining()) {
    throw FormatError(context_ + ": truncated (needed " + std::to_string(n) + " bytes at offset " +
                      std::to_string(pos_) + ", " + std::to_string(remaining()) + " left)");
  }
  auto out = data_.substr(pos_, n);
  pos_ += n;
  return out;
}

std::uint32_t ByteReader::u32() {
  auto b = raw(4);
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[i]);
  return v;
}

std::uint64_t ByteReader::u64() {
  auto b = raw(8);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[i]);
  return v;
}

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::string ByteReader::blob() {
  const auto n = u32();
  return std::string(raw(n));
}

NamedTensors ByteReader::tensors() {
  const auto count = u32();
  NamedTensors out;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto name_len = u32();
    if (name_len == 0 || name_len > kMaxName) throw FormatError(context_ + ": bad tensor name length");
    std::string name(raw(name_len));
    const auto rank = u32();
    if (rank > kMaxRank) throw FormatError(context_ + ": tensor '" + name + "' has rank " + std::to_string(rank));
    Dims dims;
    std::uint64_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const auto d = u32();
      if (d == 0) throw FormatError(context_ + ": tensor '" + name + "' has a zero extent");
      if (n > std::numeric_limits<std::uint64_t>::max() / d) {
        throw FormatError(context_ + ": tensor '" + name + "' dims overflow");
      }
      n *= d;
      dims.push_back(d);
    }
    if (n > remaining() / sizeof(double)) {
      throw FormatError(context_ + ": tensor '" + name + "' payload exceeds file (" + std::to_string(n) +
                        " values, dims " + dims_str(dims) + ")");
    }
    std::vector<double> values(n);
    for (auto& v : values) v = f64();
    out.emplace_back(std::move(name), Tensor(std::move(dims), std::move(values)));
  }
  return out;
}

void ByteReader::expect_end() const {
  if (remaining() != 0) {
    throw FormatError(context_ + ": " + std::to_string(remaining()) + " trailing bytes");
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

}  // namespace pnc
