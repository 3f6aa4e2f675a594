#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace capslu::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename V>
void put(std::ostream& os, V v) {
  char buf[sizeof(V)];
  std::memcpy(buf, &v, sizeof(V));
  os.write(buf, sizeof(V));
}

template <typename V>
V get(std::istream& is) {
  char buf[sizeof(V)];
  if (!is.read(buf, sizeof(V))) throw FormatError("unexpected end of file");
  V v;
  std::memcpy(&v, buf, sizeof(V));
  return v;
}

inline void put_magic(std::ostream& os, const char (&magic)[5]) { os.write(magic, 4); }

inline std::string get_magic(std::istream& is) {
  char buf[4];
  if (!is.read(buf, 4)) throw FormatError("file too short for header");
  return std::string(buf, 4);
}

inline void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is) {
  const auto n = get<std::uint32_t>(is);
  if (n > (1u << 20)) throw FormatError("string length out of range");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw FormatError("unexpected end of file in string");
  return s;
}

}  // namespace capslu::io
