#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace rffi {

// Little-endian binary serialization into a memory buffer. All on-disk
// formats (checkpoints, keys, feature caches, IQ files) go through these so
// the byte layout is identical on every platform.

class BinWriter {
 public:
  void u8(uint8_t v) { buf_.push_back(v); }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  void i32(int32_t v) { u32(static_cast<uint32_t>(v)); }
  void u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  void f32(float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void f64(double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }
  void bytes(const void* p, size_t n) {
    const uint8_t* b = static_cast<const uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void f32_array(const float* p, size_t n) {
    for (size_t i = 0; i < n; ++i) f32(p[i]);
  }
  const std::vector<uint8_t>& data() const { return buf_; }

 private:
  std::vector<uint8_t> buf_;
};

class BinReader {
 public:
  BinReader(const uint8_t* data, size_t size) : p_(data), end_(data + size) {}
  explicit BinReader(const std::vector<uint8_t>& v) : BinReader(v.data(), v.size()) {}

  uint8_t u8() { return *take(1); }
  uint32_t u32() {
    const uint8_t* p = take(4);
    return uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) | (uint32_t(p[3]) << 24);
  }
  int32_t i32() { return static_cast<int32_t>(u32()); }
  uint64_t u64() {
    uint64_t lo = u32();
    uint64_t hi = u32();
    return lo | (hi << 32);
  }
  float f32() {
    uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double f64() {
    uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str() {
    uint32_t n = u32();
    const uint8_t* p = take(n);
    return std::string(reinterpret_cast<const char*>(p), n);
  }
  void f32_array(float* out, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = f32();
  }
  size_t remaining() const { return static_cast<size_t>(end_ - p_); }
  size_t offset_from(const uint8_t* base) const { return static_cast<size_t>(p_ - base); }

 private:
  const uint8_t* take(size_t n) {
    if (p_ + n > end_) throw std::runtime_error("binio: truncated input");
    const uint8_t* r = p_;
    p_ += n;
    return r;
  }
  const uint8_t* p_;
  const uint8_t* end_;
};

inline void write_file(const std::string& path, const std::vector<uint8_t>& data) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw std::runtime_error("cannot open for read: " + path);
  auto size = f.tellg();
  f.seekg(0);
  std::vector<uint8_t> data(static_cast<size_t>(size));
  f.read(reinterpret_cast<char*>(data.data()), size);
  if (!f) throw std::runtime_error("read failed: " + path);
  return data;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << text;
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline std::string read_text_file(const std::string& path) {
  auto v = read_file(path);
  return std::string(v.begin(), v.end());
}

uint32_t crc32_of(const uint8_t* data, size_t len);

}  // namespace rffi
