#pragma once

// Little-endian framing shared by every binary artifact: 4-byte magic, body,
// trailing CRC32 of all preceding bytes. Digests are SHA-256 hex strings.

#include <openssl/evp.h>
#include <zlib.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <string_view>
#include <unistd.h>
#include <vector>

#include "mfno/tensor.hpp"

namespace mfno {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

enum class FileFault { bad_magic, truncated, crc_mismatch, unknown_version, digest_mismatch, io };

class FileError : public DataError {
 public:
  FileError(FileFault fault, const std::string& path, const std::string& detail)
      : DataError(describe(fault) + " in " + path + (detail.empty() ? "" : ": " + detail)), fault_(fault) {}
  FileFault fault() const noexcept { return fault_; }

  static std::string describe(FileFault f) {
    switch (f) {
      case FileFault::bad_magic: return "bad magic";
      case FileFault::truncated: return "truncated file";
      case FileFault::crc_mismatch: return "CRC mismatch";
      case FileFault::unknown_version: return "unknown version";
      case FileFault::digest_mismatch: return "digest mismatch";
      case FileFault::io: return "I/O failure";
    }
    return "file error";
  }

 private:
  FileFault fault_;
};

struct TruncatedRead {};

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = crc32(crc, bytes.data() + off, chunk);
    off += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

inline std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
    throw DataError("sha256 failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

inline std::string sha256_hex(std::string_view s) {
  return sha256_hex(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void f64(double v) { raw(&v, 8); }
  void magic(std::string_view m) { raw(m.data(), m.size()); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  void crc() { u32(crc32_of(bytes_)); }

  const std::vector<std::uint8_t>& bytes() const { return bytes_; }
  std::vector<std::uint8_t>&& take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes, std::size_t pos = 0) : bytes_(bytes), pos_(pos) {}

  std::uint8_t u8() { return get<std::uint8_t>(); }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  double f64() { return get<double>(); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void raw(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  template <class V>
  V get() {
    V v;
    raw(&v, sizeof(V));
    return v;
  }
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw TruncatedRead{};
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_;
};

// ---------------------------------------------------------------------------
// Tensor blocks: ndim u32, dims u32 x ndim, dtype u8, little-endian payload.

template <class T>
void write_tensor_block(ByteWriter& w, const Tensor<T>& t) {
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  w.u8(dtype_code<T>());
  w.raw(t.data().data(), t.size() * sizeof(T));
}

inline std::size_t tensor_block_bytes(const Shape& shape, std::size_t scalar_bytes) {
  return 4 + 4 * shape.size() + 1 + scalar_bytes * shape_size(shape);
}

/// Reads a block, converting to T if stored in the other precision.
template <class T>
Tensor<T> read_tensor_block(ByteReader& r) {
  const std::uint32_t ndim = r.u32();
  if (ndim > 16) throw DataError("tensor block rank " + std::to_string(ndim) + " out of range");
  Shape shape(ndim);
  for (auto& d : shape) d = r.u32();
  const std::uint8_t code = r.u8();
  const std::size_t n = shape_size(shape);
  if (r.remaining() < n * (code == 0 ? 4 : 8)) throw TruncatedRead{};
  if (code == dtype_code<T>()) {
    std::vector<T> data(n);
    r.raw(data.data(), n * sizeof(T));
    return Tensor<T>(std::move(shape), std::move(data));
  }
  if (code == 0) {
    std::vector<float> data(n);
    r.raw(data.data(), n * sizeof(float));
    return Tensor<T>(std::move(shape), std::vector<T>(data.begin(), data.end()));
  }
  if (code == 1) {
    std::vector<double> data(n);
    r.raw(data.data(), n * sizeof(double));
    return Tensor<T>(std::move(shape), std::vector<T>(data.begin(), data.end()));
  }
  throw DataError("unknown dtype code " + std::to_string(code));
}

// ---------------------------------------------------------------------------
// Files.

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError(FileFault::io, path.string(), "cannot open");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

/// Writes through a temporary sibling and renames, so readers never observe partial files.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp" + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FileError(FileFault::io, tmp.string(), "cannot create");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FileError(FileFault::io, tmp.string(), "write failed");
  }
  std::filesystem::rename(tmp, path);
}

inline void write_file_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::string file_digest(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

/// Validates magic and CRC of a framed file, then runs `parse` on the body
/// (positioned just past the magic). `parse` must consume the body exactly.
/// Truncation is told apart from corruption by attempting the structural
/// parse when the CRC does not match.
inline void parse_framed(std::span<const std::uint8_t> bytes, std::string_view magic, const std::string& path,
                         const std::function<void(ByteReader&)>& parse) {
  if (bytes.size() < magic.size() + 4) throw FileError(FileFault::truncated, path, "file too short");
  if (std::memcmp(bytes.data(), magic.data(), magic.size()) != 0)
    throw FileError(FileFault::bad_magic, path, "expected \"" + std::string(magic) + "\"");
  const auto body = bytes.first(bytes.size() - 4);
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
  const std::uint32_t actual = crc32_of(body);
  if (stored != actual) {
    // A structurally short file is reported as truncated, anything else as corruption.
    try {
      ByteReader probe(bytes, magic.size());
      parse(probe);
      if (probe.remaining() < 4) throw TruncatedRead{};
    } catch (const TruncatedRead&) {
      throw FileError(FileFault::truncated, path, "file ends before its declared contents");
    } catch (const FileError& e) {
      if (e.fault() == FileFault::truncated) throw;
    } catch (const std::exception&) {
    }
    throw FileError(FileFault::crc_mismatch, path, "stored " + std::to_string(stored) + ", computed " +
                                                       std::to_string(actual));
  }
  ByteReader reader(body, magic.size());
  try {
    parse(reader);
  } catch (const TruncatedRead&) {
    throw FileError(FileFault::truncated, path, "body shorter than declared");
  }
  if (reader.remaining() != 0)
    throw FileError(FileFault::crc_mismatch, path, std::to_string(reader.remaining()) + " trailing bytes");
}

}  // namespace mfno
