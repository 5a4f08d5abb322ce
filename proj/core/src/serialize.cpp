#include "mabn/serialize.hpp"

#include <zlib.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace mabn {

uint32_t crc32_update(uint32_t crc, const uint8_t* data, size_t len) {
  return static_cast<uint32_t>(::crc32(crc, data, static_cast<uInt>(len)));
}

// ----------------------------------------------------------------------
// BinWriter
// ----------------------------------------------------------------------

void BinWriter::bytes(std::span<const uint8_t> data) {
  buf_.insert(buf_.end(), data.begin(), data.end());
  crc_ = crc32_update(crc_, data.data(), data.size());
}

void BinWriter::u8(uint8_t v) { bytes({&v, 1}); }

void BinWriter::u32(uint32_t v) {
  uint8_t b[4] = {static_cast<uint8_t>(v), static_cast<uint8_t>(v >> 8),
                  static_cast<uint8_t>(v >> 16), static_cast<uint8_t>(v >> 24)};
  bytes(b);
}

void BinWriter::i32(int32_t v) { u32(static_cast<uint32_t>(v)); }

void BinWriter::u64(uint64_t v) {
  u32(static_cast<uint32_t>(v));
  u32(static_cast<uint32_t>(v >> 32));
}

void BinWriter::f64(double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  u64(bits);
}

void BinWriter::str(const std::string& s) {
  u32(static_cast<uint32_t>(s.size()));
  bytes({reinterpret_cast<const uint8_t*>(s.data()), s.size()});
}

void BinWriter::f64_array(std::span<const double> xs) {
  for (double x : xs) f64(x);
}

void BinWriter::i32_array(std::span<const int> xs) {
  for (int x : xs) i32(x);
}

void BinWriter::finish_to_file(const std::string& path) {
  const uint32_t checksum = crc_;
  u32(checksum);  // updates crc_, but nothing follows
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp + "' for writing");
    out.write(reinterpret_cast<const char*>(buf_.data()),
              static_cast<std::streamsize>(buf_.size()));
    if (!out) throw IoError("short write to '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename '" + tmp + "' to '" + path + "': " + ec.message());
}

// ----------------------------------------------------------------------
// BinReader
// ----------------------------------------------------------------------

BinReader::BinReader(std::vector<uint8_t> data) : buf_(std::move(data)) {}

BinReader BinReader::from_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open '" + path + "'");
  const auto size = in.tellg();
  in.seekg(0);
  std::vector<uint8_t> data(static_cast<size_t>(size));
  in.read(reinterpret_cast<char*>(data.data()), size);
  if (!in) throw IoError("TruncatedFile: short read from '" + path + "'");
  return BinReader(std::move(data));
}

void BinReader::need(size_t n) const {
  if (pos_ + n > buf_.size()) {
    throw IoError("TruncatedFile: wanted " + std::to_string(n) + " bytes, " +
                  std::to_string(buf_.size() - pos_) + " left");
  }
}

uint8_t BinReader::u8() {
  need(1);
  crc_ = crc32_update(crc_, buf_.data() + pos_, 1);
  return buf_[pos_++];
}

uint32_t BinReader::u32() {
  need(4);
  crc_ = crc32_update(crc_, buf_.data() + pos_, 4);
  uint32_t v = static_cast<uint32_t>(buf_[pos_]) | (static_cast<uint32_t>(buf_[pos_ + 1]) << 8) |
               (static_cast<uint32_t>(buf_[pos_ + 2]) << 16) |
               (static_cast<uint32_t>(buf_[pos_ + 3]) << 24);
  pos_ += 4;
  return v;
}

int32_t BinReader::i32() { return static_cast<int32_t>(u32()); }

uint64_t BinReader::u64() {
  uint64_t lo = u32();
  uint64_t hi = u32();
  return lo | (hi << 32);
}

double BinReader::f64() {
  uint64_t bits = u64();
  double v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

std::string BinReader::str() {
  uint32_t n = u32();
  need(n);
  crc_ = crc32_update(crc_, buf_.data() + pos_, n);
  std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
  pos_ += n;
  return s;
}

std::vector<double> BinReader::f64_array(size_t n) {
  std::vector<double> out(n);
  for (size_t i = 0; i < n; ++i) out[i] = f64();
  return out;
}

std::vector<int> BinReader::i32_array(size_t n) {
  std::vector<int> out(n);
  for (size_t i = 0; i < n; ++i) out[i] = i32();
  return out;
}

void BinReader::check_crc_and_eof() {
  const uint32_t computed = crc_;
  need(4);
  uint32_t stored = static_cast<uint32_t>(buf_[pos_]) |
                    (static_cast<uint32_t>(buf_[pos_ + 1]) << 8) |
                    (static_cast<uint32_t>(buf_[pos_ + 2]) << 16) |
                    (static_cast<uint32_t>(buf_[pos_ + 3]) << 24);
  pos_ += 4;
  if (stored != computed) {
    throw IoError("CorruptFile: checksum mismatch (stored " + std::to_string(stored) +
                  ", computed " + std::to_string(computed) + ")");
  }
  if (pos_ != buf_.size()) {
    throw IoError("CorruptFile: " + std::to_string(buf_.size() - pos_) +
                  " trailing bytes after checksum");
  }
}

}  // namespace mabn
