#pragma once

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "mkd/errors.hpp"
#include "mkd/tensor.hpp"

namespace mkd::io {

// Little-endian hosts only; checkpoints are not meant to move across
// architectures.
class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}

  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T v) {
    os_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void put_string(const std::string& s) {
    put<std::uint64_t>(s.size());
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void put_doubles(const std::vector<double>& v) {
    put<std::uint64_t>(v.size());
    os_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  void put_tensor(const Tensor& t) {
    put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) put<std::int32_t>(d);
    os_.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  Reader(std::istream& is, std::string source) : is_(is), source_(std::move(source)) {}

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get() {
    T v{};
    read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
  }
  std::string get_string(std::size_t max_len = 1 << 24) {
    const auto n = get<std::uint64_t>();
    if (n > max_len) fail("string length out of range");
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  std::vector<double> get_doubles(std::size_t max_len = std::size_t{1} << 28) {
    const auto n = get<std::uint64_t>();
    if (n > max_len) fail("array length out of range");
    std::vector<double> v(n);
    read(reinterpret_cast<char*>(v.data()), n * sizeof(double));
    return v;
  }
  Tensor get_tensor() {
    const auto rank = get<std::uint32_t>();
    if (rank > 8) fail("tensor rank out of range");
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = get<std::int32_t>();
      if (d < 0 || d > (1 << 24)) fail("tensor dimension out of range");
      n *= static_cast<std::size_t>(d);
    }
    if (n > (std::size_t{1} << 28)) fail("tensor too large");
    std::vector<double> v(n);
    read(reinterpret_cast<char*>(v.data()), n * sizeof(double));
    return Tensor(std::move(shape), std::move(v));
  }

  [[noreturn]] void fail(const std::string& what) const { throw LoadError(source_ + ": " + what); }

 private:
  void read(char* dst, std::size_t n) {
    is_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) fail("unexpected end of file (truncated)");
  }

  std::istream& is_;
  std::string source_;
};

}  // namespace mkd::io
