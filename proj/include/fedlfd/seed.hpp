#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace fedlfd {

// Seed splitting. Every random stream in a run is keyed by
// (master_seed, entity_kind, entity_id, round) and nothing else, so the order
// in which workers pick up node jobs cannot change any draw.

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

// FNV-1a over the kind label; stable across platforms and compilers.
inline constexpr std::uint64_t hash_kind(std::string_view kind) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (char c : kind) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ULL;
    }
    return h;
}

inline constexpr std::uint64_t derive_seed(std::uint64_t master, std::string_view kind,
                                           std::uint64_t entity_id, std::uint64_t round = 0) {
    std::uint64_t h = splitmix64(master);
    h = splitmix64(h ^ hash_kind(kind));
    h = splitmix64(h ^ entity_id);
    h = splitmix64(h ^ round);
    return h;
}

// Packs up to three small ids into one entity id for derive_seed.
inline constexpr std::uint64_t pack_ids(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
    return (a << 42) ^ (b << 21) ^ c;
}

using Rng = std::mt19937_64;

}  // namespace fedlfd
