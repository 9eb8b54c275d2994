#pragma once

#include <bit>
#include <cstdint>
#include <vector>

namespace ipa {

using ByteBuf = std::vector<unsigned char>;

// All container payloads are little-endian regardless of host order.
inline void append_u32_le(ByteBuf& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline void append_u64_le(ByteBuf& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline void append_f64_le(ByteBuf& out, double d) {
    append_u64_le(out, std::bit_cast<std::uint64_t>(d));
}

inline std::uint32_t read_u32_le(const unsigned char* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
}

inline std::uint64_t read_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

inline double read_f64_le(const unsigned char* p) {
    return std::bit_cast<double>(read_u64_le(p));
}

}  // namespace ipa
