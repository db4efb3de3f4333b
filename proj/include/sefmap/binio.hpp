// SPDX-License-Identifier: Apache-2.0
//
// Little-endian stream helpers shared by the scenario and checkpoint formats.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

#include "sefmap/errors.hpp"

namespace sefmap::binio {

template <typename T>
void put(std::ostream& out, T value) {
  static_assert(std::is_arithmetic_v<T>);
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                  std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>>;
  U bits;
  std::memcpy(&bits, &value, sizeof(T));
  char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xFFu);
  out.write(buf, sizeof(T));
}

template <typename T>
T get(std::istream& in, const char* what) {
  static_assert(std::is_arithmetic_v<T>);
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                  std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>>;
  unsigned char buf[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(T))) {
    throw ConfigError(std::string("truncated file while reading ") + what);
  }
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<U>(buf[i]) << (8 * i);
  T value;
  std::memcpy(&value, &bits, sizeof(T));
  return value;
}

inline void put_bytes(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_bytes(std::istream& in, const char* what, std::size_t limit = std::size_t(1) << 28) {
  const auto n = get<std::uint32_t>(in, what);
  if (n > limit) throw ConfigError(std::string("implausible length for ") + what);
  std::string s(n, '\0');
  if (n > 0 && !in.read(s.data(), n)) throw ConfigError(std::string("truncated file while reading ") + what);
  return s;
}

inline void expect_magic(std::istream& in, const char (&magic)[5], const std::string& path) {
  char buf[4];
  if (!in.read(buf, 4) || std::memcmp(buf, magic, 4) != 0) {
    throw ConfigError(path + ": not a " + std::string(magic, 4) + " file");
  }
}

}  // namespace sefmap::binio
