#pragma once

#include <bit>
#include <cstring>
#include <string>

#include "ctdg/checkpoint.hpp"

namespace ctdg::detail {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
void put_array(std::string& out, const T* data, size_t count) {
  out.append(reinterpret_cast<const char*>(data), count * sizeof(T));
}

/// Bounds-checked little-endian reader; truncation raises FormatError naming
/// the offset.
class ByteReader {
 public:
  ByteReader(const std::string& bytes, const char* container) : bytes_(bytes), container_(container) {}

  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  template <class T>
  void get_array(T* out, size_t count, const char* what) {
    if (count > (bytes_.size() - pos_) / sizeof(T)) need(bytes_.size() - pos_ + 1, what);
    std::memcpy(out, bytes_.data() + pos_, count * sizeof(T));
    pos_ += count * sizeof(T);
  }

  std::string take(size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(std::string(container_) + " truncated at offset " + std::to_string(pos_) + " while reading " +
                        what);
    }
  }

  const std::string& bytes_;
  const char* container_;
  size_t pos_ = 0;
};

}  // namespace ctdg::detail
