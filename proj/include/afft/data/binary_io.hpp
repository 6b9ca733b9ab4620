#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "afft/core/error.hpp"

namespace afft::data {

/// Why a binary file could not be read.
class FormatError : public DataError {
 public:
  enum class Kind { kBadMagic, kVersionMismatch, kTruncated, kInvalid };
  FormatError(Kind kind, const std::string& what) : DataError(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// Little-endian writer over an ostream.
class ByteWriter {
 public:
  explicit ByteWriter(std::ostream& os) : os_(os) {}

  template <typename U>
  void put(U value) {
    static_assert(std::is_trivially_copyable_v<U>);
    unsigned char bytes[sizeof(U)];
    std::memcpy(bytes, &value, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
    os_.write(reinterpret_cast<const char*>(bytes), sizeof(U));
  }
  void put_bytes(const std::string& s) { os_.write(s.data(), static_cast<std::streamsize>(s.size())); }
  template <typename U>
  void put_array(const U* values, std::size_t n) {
    if constexpr (std::endian::native == std::endian::little) {
      os_.write(reinterpret_cast<const char*>(values), static_cast<std::streamsize>(n * sizeof(U)));
    } else {
      for (std::size_t i = 0; i < n; ++i) put(values[i]);
    }
  }
  std::uint64_t position() const { return static_cast<std::uint64_t>(os_.tellp()); }
  bool good() const { return os_.good(); }

 private:
  std::ostream& os_;
};

/// Little-endian reader; short reads raise FormatError(kTruncated).
class ByteReader {
 public:
  explicit ByteReader(std::istream& is) : is_(is) {}

  template <typename U>
  U get() {
    unsigned char bytes[sizeof(U)];
    read_raw(reinterpret_cast<char*>(bytes), sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
    U value;
    std::memcpy(&value, bytes, sizeof(U));
    return value;
  }
  std::string get_bytes(std::size_t n) {
    std::string s(n, '\0');
    read_raw(s.data(), n);
    return s;
  }
  template <typename U>
  void get_array(U* out, std::size_t n) {
    if constexpr (std::endian::native == std::endian::little) {
      read_raw(reinterpret_cast<char*>(out), n * sizeof(U));
    } else {
      for (std::size_t i = 0; i < n; ++i) out[i] = get<U>();
    }
  }
  bool at_end() { return is_.peek() == std::char_traits<char>::eof(); }

 private:
  void read_raw(char* dst, std::size_t n) {
    is_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) throw FormatError(FormatError::Kind::kTruncated, "truncated payload");
  }
  std::istream& is_;
};

}  // namespace afft::data
