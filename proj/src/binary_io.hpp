#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "dfq/error.hpp"

// Little-endian packing shared by the model, quant-table and dataset formats.
namespace dfq::detail {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& os) : os_(os) {}

  void bytes(const void* p, std::size_t n) {
    os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!os_) throw FormatError(FormatError::Kind::Io, "write failed");
  }
  void tag(const char (&t)[5]) { bytes(t, 4); }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u16(std::uint16_t v) { bytes(&v, 2); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void f32(float v) { bytes(&v, 4); }
  void f64(double v) { bytes(&v, 8); }
  void f32s(const float* p, std::size_t n) { bytes(p, n * sizeof(float)); }

 private:
  std::ostream& os_;
};

class BinaryReader {
 public:
  BinaryReader(std::istream& is, std::string what) : is_(is), what_(std::move(what)) {}

  void bytes(void* p, std::size_t n) {
    is_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) {
      throw FormatError(FormatError::Kind::Truncated, what_ + ": file truncated (needed " + std::to_string(n) +
                                                          " bytes, got " + std::to_string(is_.gcount()) + ")");
    }
  }
  std::array<char, 4> tag() {
    std::array<char, 4> t{};
    bytes(t.data(), 4);
    return t;
  }
  std::uint8_t u8() { return read<std::uint8_t>(); }
  std::uint16_t u16() { return read<std::uint16_t>(); }
  std::uint32_t u32() { return read<std::uint32_t>(); }
  float f32() { return read<float>(); }
  double f64() { return read<double>(); }
  void f32s(float* p, std::size_t n) { bytes(p, n * sizeof(float)); }

  bool at_end() { return is_.peek() == std::char_traits<char>::eof(); }
  const std::string& what() const { return what_; }

 private:
  template <typename T>
  T read() {
    T v{};
    bytes(&v, sizeof(T));
    return v;
  }

  std::istream& is_;
  std::string what_;
};

inline bool tag_equals(const std::array<char, 4>& got, const char (&want)[5]) {
  return std::memcmp(got.data(), want, 4) == 0;
}

}  // namespace dfq::detail
