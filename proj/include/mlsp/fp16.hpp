#pragma once

#include <bit>
#include <cstdint>

namespace mlsp {

// IEEE-754 binary16 conversion. Encoding rounds to nearest, ties to even.
// Magnitudes that would round to infinity are clamped to +-65504 instead and
// counted through the optional overflow counter; features are finite by
// contract, so an overflow is a data problem worth surfacing, not a NaN.

constexpr float kHalfMax = 65504.0f;
constexpr uint16_t kHalfMaxBits = 0x7bff;

inline uint16_t fp16_encode(float value, uint64_t* overflow_count = nullptr) {
    const uint32_t bits = std::bit_cast<uint32_t>(value);
    const uint16_t sign = static_cast<uint16_t>((bits >> 16) & 0x8000u);
    const uint32_t mag = bits & 0x7fffffffu;

    if (mag >= 0x7f800000u) {
        if (mag > 0x7f800000u) return static_cast<uint16_t>(sign | 0x7e00u);  // NaN
        if (overflow_count) ++*overflow_count;                                // Inf
        return static_cast<uint16_t>(sign | kHalfMaxBits);
    }
    if (mag >= 0x477ff000u) {  // >= 65520: would round to infinity
        if (overflow_count) ++*overflow_count;
        return static_cast<uint16_t>(sign | kHalfMaxBits);
    }
    if (mag >= 0x38800000u) {  // normal half range, >= 2^-14
        const uint32_t exp = (mag >> 23) - 112;  // rebias 127 -> 15
        const uint32_t man = mag & 0x7fffffu;
        uint32_t h = (exp << 10) | (man >> 13);
        const uint32_t rem = man & 0x1fffu;
        if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) ++h;  // carry may bump the exponent
        return static_cast<uint16_t>(sign | h);
    }
    if (mag > 0x33000000u) {  // (2^-25, 2^-14): subnormal half
        const int32_t exp = static_cast<int32_t>(mag >> 23);
        const uint32_t man = (mag & 0x7fffffu) | 0x800000u;
        const uint32_t shift = static_cast<uint32_t>(126 - exp);  // 14..23
        uint32_t h = man >> shift;
        const uint32_t rem = man & ((1u << shift) - 1u);
        const uint32_t halfway = 1u << (shift - 1);
        if (rem > halfway || (rem == halfway && (h & 1u))) ++h;  // may carry to min normal
        return static_cast<uint16_t>(sign | h);
    }
    return sign;  // magnitude <= 2^-25 rounds to (signed) zero
}

inline float fp16_decode(uint16_t h) {
    const uint32_t sign = static_cast<uint32_t>(h & 0x8000u) << 16;
    const uint32_t exp = (h >> 10) & 0x1fu;
    const uint32_t man = h & 0x3ffu;
    uint32_t bits;
    if (exp == 0) {
        if (man == 0) {
            bits = sign;
        } else {
            const int top = 31 - std::countl_zero(man);  // 0..9
            bits = sign | (static_cast<uint32_t>(top + 103) << 23) |
                   ((man << (23 - top)) & 0x7fffffu);
        }
    } else if (exp == 31) {
        bits = sign | 0x7f800000u | (man << 13);
    } else {
        bits = sign | ((exp + 112) << 23) | (man << 13);
    }
    return std::bit_cast<float>(bits);
}

inline bool fp16_is_finite(uint16_t h) { return ((h >> 10) & 0x1fu) != 0x1fu; }
inline bool fp16_is_nan(uint16_t h) { return ((h >> 10) & 0x1fu) == 0x1fu && (h & 0x3ffu) != 0; }

}  // namespace mlsp
