#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mabn/errors.hpp"

namespace mabn {

/// Little-endian binary writer with a running CRC-32. All multi-byte
/// values are written LSB first regardless of host order, so files are
/// bit-exact across platforms.
class BinWriter {
 public:
  void u8(uint8_t v);
  void u32(uint32_t v);
  void i32(int32_t v);
  void u64(uint64_t v);
  void f64(double v);
  void bytes(std::span<const uint8_t> data);
  void str(const std::string& s);  // u32 length + raw bytes
  void f64_array(std::span<const double> xs);
  void i32_array(std::span<const int> xs);

  uint32_t crc() const { return crc_; }
  const std::vector<uint8_t>& buffer() const { return buf_; }

  /// Appends the running CRC-32 as the final u32 (not itself checksummed)
  /// and writes the buffer to `path` atomically (tmp file + rename).
  void finish_to_file(const std::string& path);

 private:
  std::vector<uint8_t> buf_;
  uint32_t crc_ = 0;
};

/// Reader mirroring BinWriter; throws TruncatedFile on short reads and
/// verifies the trailing CRC-32 via check_crc().
class BinReader {
 public:
  explicit BinReader(std::vector<uint8_t> data);
  static BinReader from_file(const std::string& path);

  uint8_t u8();
  uint32_t u32();
  int32_t i32();
  uint64_t u64();
  double f64();
  std::string str();
  std::vector<double> f64_array(size_t n);
  std::vector<int> i32_array(size_t n);

  /// Consumes the trailing u32 checksum and compares against the CRC of
  /// everything read so far; CorruptFile on mismatch. Also rejects
  /// trailing garbage.
  void check_crc_and_eof();

  size_t remaining() const { return buf_.size() - pos_; }

 private:
  void need(size_t n) const;
  std::vector<uint8_t> buf_;
  size_t pos_ = 0;
  uint32_t crc_ = 0;
};

uint32_t crc32_update(uint32_t crc, const uint8_t* data, size_t len);

}  // namespace mabn
