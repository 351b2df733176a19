#include "rffi/binio.hpp"

#include <zlib.h>

namespace rffi {

uint32_t crc32_of(const uint8_t* data, size_t len) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  crc = ::crc32(crc, data, static_cast<uInt>(len));
  return static_cast<uint32_t>(crc);
}

}  // namespace rffi
