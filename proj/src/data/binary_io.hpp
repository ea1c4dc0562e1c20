#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace dast::io {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Little-endian byte builder.
class ByteWriter {
 public:
  void bytes(const void* data, std::size_t n);
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);

  const std::vector<unsigned char>& buffer() const { return buf_; }
  // Writes atomically via a temporary file and rename.
  void write_file(const std::string& path) const;

 private:
  std::vector<unsigned char> buf_;
};

// Little-endian reader; every read past the end throws FormatError.
class ByteReader {
 public:
  explicit ByteReader(std::vector<unsigned char> data) : buf_(std::move(data)) {}
  static ByteReader from_file(const std::string& path);

  void bytes(void* out, std::size_t n);
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::string string(std::size_t n);
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  std::vector<unsigned char> buf_;
  std::size_t pos_ = 0;
};

}  // namespace dast::io
