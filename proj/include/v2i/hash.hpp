#pragma once

#include <cstdint>
#include <span>
#include <string_view>

namespace v2i {

inline std::uint64_t fnv1a64(std::span<const unsigned char> bytes,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    return fnv1a64({reinterpret_cast<const unsigned char*>(s.data()), s.size()}, h);
}

// Stateless mixer used to derive independent RNG streams from a root seed.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream) {
    return splitmix64(root ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

}  // namespace v2i
