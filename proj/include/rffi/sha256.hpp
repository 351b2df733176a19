#pragma once

#include <cstdint>
#include <cstddef>
#include <string>

namespace rffi {

// Minimal SHA-256 used for config/content digests (cache keys, artifact audit).
class Sha256 {
 public:
  Sha256();
  void update(const void* data, size_t len);
  void update(const std::string& s) { update(s.data(), s.size()); }
  // finalizes and returns lowercase hex; object must not be reused afterwards
  std::string hex_digest();

 private:
  void process_block(const uint8_t* block);
  uint32_t h_[8];
  uint8_t buf_[64];
  size_t buf_len_ = 0;
  uint64_t total_len_ = 0;
};

std::string sha256_hex(const std::string& data);

}  // namespace rffi
