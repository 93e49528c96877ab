#pragma once

// Little-endian byte streams, FNV-1a checksums and atomic file writes shared by
// every on-disk format in the toolkit.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <unistd.h>

#include "ecr/error.hpp"

namespace ecr::io {

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t hash = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

class ByteWriter {
 public:
  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T value) {
    using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
              std::conditional_t<sizeof(T) == 2, std::uint16_t,
              std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>;
    U bits = std::bit_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      buf_.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
    }
  }

  void put_bytes(std::string_view bytes) { buf_.append(bytes); }

  void put_string(std::string_view s) {
    put(static_cast<std::uint32_t>(s.size()));
    buf_.append(s);
  }

  const std::string& bytes() const { return buf_; }
  std::string take() { return std::move(buf_); }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(std::string_view bytes, std::string module)
      : bytes_(bytes), module_(std::move(module)) {}

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get() {
    using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
              std::conditional_t<sizeof(T) == 2, std::uint16_t,
              std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>;
    require(sizeof(T));
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      bits |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return std::bit_cast<T>(bits);
  }

  std::string_view get_bytes(std::size_t n) {
    require(n);
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::string get_string() {
    auto n = get<std::uint32_t>();
    return std::string(get_bytes(n));
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  void require(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(module_, "truncated input: need " + std::to_string(n) +
                                     " bytes at offset " + std::to_string(pos_) + ", have " +
                                     std::to_string(bytes_.size() - pos_));
    }
  }

  std::string_view bytes_;
  std::string module_;
  std::size_t pos_ = 0;
};

/// Appends the FNV-1a checksum of `payload` as a trailing little-endian u64.
inline std::string seal(std::string payload) {
  ByteWriter w;
  w.put(fnv1a(payload));
  payload += w.bytes();
  return payload;
}

/// Verifies and strips the trailing checksum written by seal().
inline std::string_view unseal(std::string_view file, const std::string& module) {
  if (file.size() < 8) {
    throw ChecksumError(module, "file too short to carry a checksum");
  }
  auto payload = file.substr(0, file.size() - 8);
  ByteReader r(file.substr(file.size() - 8), module);
  if (r.get<std::uint64_t>() != fnv1a(payload)) {
    throw ChecksumError(module, "checksum mismatch (file truncated or corrupted)");
  }
  return payload;
}

inline std::string read_file(const std::filesystem::path& path, const std::string& module) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error(module, "cannot open " + path.string());
  }
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

/// Writes to a sibling temp file then renames over `path`.
inline void atomic_write(const std::filesystem::path& path, std::string_view bytes,
                         const std::string& module) {
  auto tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw Error(module, "cannot write " + tmp.string());
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
      throw Error(module, "write failed for " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw Error(module, "cannot rename into " + path.string() + ": " + ec.message());
  }
}

}  // namespace ecr::io
