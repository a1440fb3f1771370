#pragma once

#include <cstring>
#include <fstream>
#include <string>
#include <type_traits>

#include "bica/errors.hpp"

namespace bica::detail {

// fixed-width little-endian scalar io (host is little-endian; memcpy keeps
// the bit pattern and sidesteps aliasing)

template <class V>
void write_pod(std::ostream& f, V v) {
  static_assert(std::is_trivially_copyable_v<V>);
  char buf[sizeof(V)];
  std::memcpy(buf, &v, sizeof(V));
  f.write(buf, sizeof(V));
}

template <class V>
V read_pod(std::istream& f) {
  char buf[sizeof(V)];
  f.read(buf, sizeof(V));
  if (!f) throw io_error("binary read: truncated file");
  V v;
  std::memcpy(&v, buf, sizeof(V));
  return v;
}

inline void write_str(std::ostream& f, const std::string& s) {
  write_pod<uint32_t>(f, static_cast<uint32_t>(s.size()));
  f.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_str(std::istream& f) {
  const auto n = read_pod<uint32_t>(f);
  std::string s(n, '\0');
  f.read(s.data(), static_cast<std::streamsize>(n));
  if (!f) throw io_error("binary read: truncated string");
  return s;
}

}  // namespace bica::detail
