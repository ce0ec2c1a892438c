#ifndef LIRR_IO_HPP
#define LIRR_IO_HPP

// Byte-level helpers shared by the checkpoint and dataset formats.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace lirr::detail {

template <class T>
void write_le(std::ostream& os, std::span<const T> values) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  std::vector<char> buf(values.size() * sizeof(T));
  for (std::size_t i = 0; i < values.size(); ++i) {
    U u = std::bit_cast<U>(values[i]);
    for (std::size_t b = 0; b < sizeof(T); ++b) buf[i * sizeof(T) + b] = static_cast<char>((u >> (8 * b)) & 0xff);
  }
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

template <class T>
void read_le(std::istream& is, std::span<T> values, const std::string& what) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  std::vector<unsigned char> buf(values.size() * sizeof(T));
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(is.gcount()) != buf.size()) throw std::runtime_error(what + ": truncated data");
  for (std::size_t i = 0; i < values.size(); ++i) {
    U u = 0;
    for (std::size_t b = 0; b < sizeof(T); ++b) u |= static_cast<U>(buf[i * sizeof(T) + b]) << (8 * b);
    values[i] = std::bit_cast<T>(u);
  }
}

inline std::uint32_t crc32_of(std::span<const char> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  crc = ::crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

}  // namespace lirr::detail

#endif  // LIRR_IO_HPP
