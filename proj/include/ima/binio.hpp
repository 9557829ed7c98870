#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <string>

#include "ima/error.hpp"

// Little-endian primitives shared by the binary file formats
// (feature files, pool sidecars, model checkpoints).

namespace ima::binio {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  const char bytes[4] = {
      static_cast<char>(v & 0xff),
      static_cast<char>((v >> 8) & 0xff),
      static_cast<char>((v >> 16) & 0xff),
      static_cast<char>((v >> 24) & 0xff),
  };
  os.write(bytes, 4);
}

inline std::uint32_t read_u32(std::istream& is, const char* what) {
  unsigned char bytes[4];
  is.read(reinterpret_cast<char*>(bytes), 4);
  if (!is) fail(ErrorKind::Truncated, std::string("unexpected end of file reading ") + what);
  return static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
         (static_cast<std::uint32_t>(bytes[2]) << 16) | (static_cast<std::uint32_t>(bytes[3]) << 24);
}

inline void write_f64(std::ostream& os, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  os.write(bytes, 8);
}

inline double read_f64(std::istream& is, const char* what) {
  unsigned char bytes[8];
  is.read(reinterpret_cast<char*>(bytes), 8);
  if (!is) fail(ErrorKind::Truncated, std::string("unexpected end of file reading ") + what);
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

inline void write_f64_span(std::ostream& os, std::span<const double> values) {
  for (const double v : values) write_f64(os, v);
}

inline void read_f64_span(std::istream& is, std::span<double> values, const char* what) {
  for (double& v : values) v = read_f64(is, what);
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, const char* what) {
  const std::uint32_t len = read_u32(is, what);
  if (len > (1u << 24)) fail(ErrorKind::Overflow, std::string("unreasonable string length in ") + what);
  std::string s(len, '\0');
  is.read(s.data(), static_cast<std::streamsize>(len));
  if (!is) fail(ErrorKind::Truncated, std::string("unexpected end of file reading ") + what);
  return s;
}

inline void expect_magic(std::istream& is, const char* magic, const char* what) {
  char buf[4];
  is.read(buf, 4);
  if (!is || std::string(buf, 4) != magic) {
    fail(ErrorKind::BadMagic, std::string("not a ") + what + " file (magic mismatch)");
  }
}

}  // namespace ima::binio
