#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

namespace fedmgp {

// FNV-1a over raw bytes; used for freeze contracts and round ledgers where
// byte-level equality is the requirement.
inline std::uint64_t fnv1a64(std::span<const unsigned char> bytes,
                             std::uint64_t state = 0xcbf29ce484222325ULL) {
    for (unsigned char b : bytes) {
        state ^= b;
        state *= 0x100000001b3ULL;
    }
    return state;
}

inline std::uint64_t fnv1a64(std::span<const double> values,
                             std::uint64_t state = 0xcbf29ce484222325ULL) {
    return fnv1a64(std::span<const unsigned char>(
                       reinterpret_cast<const unsigned char*>(values.data()),
                       values.size() * sizeof(double)),
                   state);
}

inline std::uint64_t fnv1a64(const std::string& text,
                             std::uint64_t state = 0xcbf29ce484222325ULL) {
    return fnv1a64(std::span<const unsigned char>(
                       reinterpret_cast<const unsigned char*>(text.data()), text.size()),
                   state);
}

}  // namespace fedmgp
