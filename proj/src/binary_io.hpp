#pragma once

// Little-endian scalar encoding shared by the dataset and checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>

namespace fedmae::detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                         static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(bytes, 4);
}

inline bool get_u32(std::istream& is, std::uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
      (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return true;
}

inline void put_f32(std::ostream& os, double v) {
  put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

inline bool get_f32(std::istream& is, double& v) {
  std::uint32_t u;
  if (!get_u32(is, u)) return false;
  v = static_cast<double>(std::bit_cast<float>(u));
  return true;
}

inline void put_i32(std::ostream& os, std::int32_t v) {
  put_u32(os, static_cast<std::uint32_t>(v));
}

inline bool get_i32(std::istream& is, std::int32_t& v) {
  std::uint32_t u;
  if (!get_u32(is, u)) return false;
  v = static_cast<std::int32_t>(u);
  return true;
}

}  // namespace fedmae::detail
