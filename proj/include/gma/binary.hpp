#pragma once

// Little-endian primitive I/O shared by the weight containers and the .flo codec.

#include <array>
#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>

#include "gma/core.hpp"

namespace gma {

class BinaryWriter {
public:
  explicit BinaryWriter(std::ostream& os) : os_(os) {}

  void magic(std::string_view tag) {
    detail::require(tag.size() == 4, "magic tag must be 4 bytes");
    os_.write(tag.data(), 4);
    check();
  }

  void u32(std::uint32_t x) { put_le(x); }
  void i32(std::int32_t x) { put_le(static_cast<std::uint32_t>(x)); }
  void f32(float x) { put_le(std::bit_cast<std::uint32_t>(x)); }
  void f64(double x) { put_le(std::bit_cast<std::uint64_t>(x)); }

  void f64s(std::span<const double> xs) {
    for (double x : xs) f64(x);
  }

private:
  template <typename U>
  void put_le(U x) {
    std::array<char, sizeof(U)> bytes{};
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((x >> (8 * i)) & 0xFF);
    os_.write(bytes.data(), bytes.size());
    check();
  }

  void check() {
    if (!os_) throw IoError("write failed");
  }

  std::ostream& os_;
};

class BinaryReader {
public:
  explicit BinaryReader(std::istream& is) : is_(is) {}

  std::string magic() {
    std::string tag(4, '\0');
    is_.read(tag.data(), 4);
    if (is_.gcount() != 4) throw IoError("truncated header: missing magic");
    return tag;
  }

  // Reads and checks a 4-byte tag; a mismatch is a validation error, not I/O.
  void expect_magic(std::string_view tag) {
    const auto got = magic();
    if (got != tag) detail::fail("bad magic: expected '", tag, "', got '", got, "'");
  }

  std::uint32_t u32() { return get_le<std::uint32_t>(); }
  std::int32_t i32() { return static_cast<std::int32_t>(get_le<std::uint32_t>()); }
  float f32() { return std::bit_cast<float>(get_le<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(get_le<std::uint64_t>()); }

  void f64s(std::span<double> out) {
    for (double& x : out) x = f64();
  }

private:
  template <typename U>
  U get_le() {
    std::array<unsigned char, sizeof(U)> bytes{};
    is_.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
    if (static_cast<std::size_t>(is_.gcount()) != bytes.size()) throw IoError("truncated payload");
    U x = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) x |= static_cast<U>(bytes[i]) << (8 * i);
    return x;
  }

  std::istream& is_;
};

}  // namespace gma
