#pragma once

// Little-endian framing shared by the feature, datastore and checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ragcap {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CorruptionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace binary {

template <typename T>
void write(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.write(buf, sizeof(T));
}

inline void write_doubles(std::ostream& out, std::span<const double> values) {
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
}

inline void write_bytes(std::ostream& out, std::string_view bytes) {
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline void read_exact(std::istream& in, char* dst, std::size_t n, const std::string& what) {
  in.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) throw CorruptionError(what + ": truncated file");
}

template <typename T>
T read(std::istream& in, const std::string& what) {
  char buf[sizeof(T)];
  read_exact(in, buf, sizeof(T), what);
  T value;
  std::memcpy(&value, buf, sizeof(T));
  return value;
}

inline std::vector<double> read_doubles(std::istream& in, std::size_t count, const std::string& what) {
  std::vector<double> values(count);
  read_exact(in, reinterpret_cast<char*>(values.data()), count * sizeof(double), what);
  return values;
}

inline std::string read_string(std::istream& in, std::size_t size, const std::string& what) {
  std::string s(size, '\0');
  read_exact(in, s.data(), size, what);
  return s;
}

inline void expect_magic(std::istream& in, std::string_view magic, const std::string& what) {
  std::string got(magic.size(), '\0');
  in.read(got.data(), static_cast<std::streamsize>(magic.size()));
  if (static_cast<std::size_t>(in.gcount()) != magic.size() || got != magic) {
    throw FormatError(what + ": bad magic bytes (expected '" + std::string(magic) + "')");
  }
}

// Bytes left between the current read position and the end of the stream.
inline std::uint64_t remaining(std::istream& in) {
  const auto here = in.tellg();
  in.seekg(0, std::ios::end);
  const auto end = in.tellg();
  in.seekg(here);
  return static_cast<std::uint64_t>(end - here);
}

}  // namespace binary

// FNV-1a 64-bit.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace ragcap
