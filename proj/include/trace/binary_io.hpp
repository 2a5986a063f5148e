#pragma once

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "trace/error.hpp"

namespace trace::io {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts need byte swapping");

/// Appends little-endian primitives to a byte buffer.
class ByteWriter {
 public:
  void magic(std::string_view m) { raw(m.data(), m.size()); }
  void u8(std::uint8_t v) { pod(v); }
  void u16(std::uint16_t v) { pod(v); }
  void u32(std::uint32_t v) { pod(v); }
  void u64(std::uint64_t v) { pod(v); }
  void f32(float v) { pod(v); }
  void f32s(std::span<const float> v) { raw(v.data(), v.size_bytes()); }
  void bytes(std::string_view s) { raw(s.data(), s.size()); }

  const std::vector<char>& buffer() const noexcept { return buf_; }
  std::vector<char>& buffer() noexcept { return buf_; }
  std::size_t size() const noexcept { return buf_.size(); }
  void clear() { buf_.clear(); }

  void patch_u32(std::size_t offset, std::uint32_t v) { std::memcpy(buf_.data() + offset, &v, 4); }

 private:
  template <typename T>
  void pod(T v) {
    raw(&v, sizeof(T));
  }
  void raw(const void* p, std::size_t n) {
    const char* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }

  std::vector<char> buf_;
};

/// Reads little-endian primitives from a byte span; running past the end
/// raises TruncatedFile.
class ByteReader {
 public:
  explicit ByteReader(std::span<const char> data) : data_(data) {}

  std::uint8_t u8() { return pod<std::uint8_t>(); }
  std::uint16_t u16() { return pod<std::uint16_t>(); }
  std::uint32_t u32() { return pod<std::uint32_t>(); }
  std::uint64_t u64() { return pod<std::uint64_t>(); }
  float f32() { return pod<float>(); }

  void f32s(std::span<float> out) { std::memcpy(out.data(), take(out.size_bytes()), out.size_bytes()); }

  std::string bytes(std::size_t n) {
    const char* p = take(n);
    return std::string(p, n);
  }

  void expect_magic(std::string_view m) {
    const std::size_t n = std::min(remaining(), m.size());
    if (std::memcmp(data_.data() + pos_, m.data(), n) != 0) {
      fail(ErrorCode::BadMagic, "expected magic \"" + std::string(m) + "\"");
    }
    if (n < m.size()) {
      fail(ErrorCode::TruncatedFile, "file ends inside the magic");
    }
    pos_ += m.size();
  }

  std::size_t position() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }
  std::span<const char> rest() const noexcept { return data_.subspan(pos_); }

 private:
  template <typename T>
  T pod() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }

  const char* take(std::size_t n) {
    if (n > remaining()) {
      fail(ErrorCode::TruncatedFile, "need " + std::to_string(n) + " bytes at offset " +
                                         std::to_string(pos_) + ", " +
                                         std::to_string(remaining()) + " available");
    }
    const char* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::span<const char> data_;
  std::size_t pos_ = 0;
};

/// CRC-32 (IEEE 802.3, as implemented by zlib). Chainable via `prior`.
inline std::uint32_t crc32(std::span<const char> data, std::uint32_t prior = 0) {
  uLong crc = prior;
  const auto* p = reinterpret_cast<const Bytef*>(data.data());
  std::size_t left = data.size();
  while (left > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(left, 1u << 30));
    crc = ::crc32(crc, p, chunk);
    p += chunk;
    left -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) {
    fail(ErrorCode::FileNotFound, path.string());
  }
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  const auto size = static_cast<std::size_t>(in.tellg());
  std::vector<char> data(size);
  in.seekg(0);
  if (size > 0 && !in.read(data.data(), static_cast<std::streamsize>(size))) {
    fail(ErrorCode::IoError, "read failed: " + path.string());
  }
  return data;
}

/// Streams a file out in pieces; used for large bank files so the payload is
/// never held in memory at once.
class FileSink {
 public:
  explicit FileSink(const std::filesystem::path& path)
      : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) fail(ErrorCode::IoError, "cannot open for writing: " + path.string());
  }

  void write(std::span<const char> data) {
    out_.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out_) fail(ErrorCode::IoError, "write failed: " + path_.string());
  }

  void write_at(std::size_t offset, std::span<const char> data) {
    const auto end = out_.tellp();
    out_.seekp(static_cast<std::streamoff>(offset));
    write(data);
    out_.seekp(end);
  }

  void close() {
    out_.close();
    if (!out_) fail(ErrorCode::IoError, "close failed: " + path_.string());
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

inline void write_file(const std::filesystem::path& path, std::span<const char> data) {
  FileSink sink(path);
  sink.write(data);
  sink.close();
}

}  // namespace trace::io
