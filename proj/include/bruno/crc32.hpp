#pragma once

#include <cstddef>
#include <cstdint>

namespace bruno {

// IEEE reflected CRC-32 (poly 0xEDB88320); crc32("123456789") == 0xCBF43926.
std::uint32_t crc32(const std::uint8_t* data, std::size_t n,
                    std::uint32_t seed = 0);

}  // namespace bruno
