#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "endonet/common/error.hpp"

// Little-endian primitives shared by the ENDT/ENDF/ENDC containers. Readers
// throw Corrupt on short reads.
namespace endonet::binary {

inline void write_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }

inline void write_u16(std::ostream& os, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  os.write(b, 2);
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  write_u32(os, static_cast<std::uint32_t>(v & 0xffffffffULL));
  write_u32(os, static_cast<std::uint32_t>(v >> 32));
}
inline void write_f32(std::ostream& os, float v) { write_u32(os, std::bit_cast<std::uint32_t>(v)); }

inline void write_bytes(std::ostream& os, const std::string& s) {
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline void write_str16(std::ostream& os, const std::string& s) {
  if (s.size() > 0xffff) throw Error(ErrorCode::InvalidArgument, "string too long for u16 prefix: " + s.substr(0, 32));
  write_u16(os, static_cast<std::uint16_t>(s.size()));
  write_bytes(os, s);
}

inline void read_exact(std::istream& is, char* dst, std::size_t n, const char* what) {
  is.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) {
    throw Error(ErrorCode::Corrupt, std::string("truncated input while reading ") + what);
  }
}

inline std::uint8_t read_u8(std::istream& is, const char* what) {
  char b;
  read_exact(is, &b, 1, what);
  return static_cast<std::uint8_t>(b);
}

inline std::uint16_t read_u16(std::istream& is, const char* what) {
  unsigned char b[2];
  read_exact(is, reinterpret_cast<char*>(b), 2, what);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

inline std::uint32_t read_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  read_exact(is, reinterpret_cast<char*>(b), 4, what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t read_u64(std::istream& is, const char* what) {
  const std::uint64_t lo = read_u32(is, what);
  return lo | (static_cast<std::uint64_t>(read_u32(is, what)) << 32);
}
inline float read_f32(std::istream& is, const char* what) {
  return std::bit_cast<float>(read_u32(is, what));
}

inline std::string read_string(std::istream& is, std::size_t n, const char* what) {
  std::string s(n, '\0');
  if (n) read_exact(is, s.data(), n, what);
  return s;
}

inline std::string read_str16(std::istream& is, const char* what) {
  return read_string(is, read_u16(is, what), what);
}

inline void expect_magic(std::istream& is, const char (&magic)[5], const char* what) {
  char got[4];
  is.read(got, 4);
  if (is.gcount() != 4 || std::memcmp(got, magic, 4) != 0) {
    throw Error(ErrorCode::Corrupt, std::string("bad magic for ") + what + " (expected " + magic + ")");
  }
}

}  // namespace endonet::binary
