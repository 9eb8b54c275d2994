#pragma once

#include <cstddef>
#include <string>

#include "ipa/bytes.hpp"

namespace ipa {

// Lowercase hex SHA-256 digest.
std::string sha256_hex(const unsigned char* data, std::size_t len);

inline std::string sha256_hex(const ByteBuf& bytes) {
    return sha256_hex(bytes.data(), bytes.size());
}

}  // namespace ipa
