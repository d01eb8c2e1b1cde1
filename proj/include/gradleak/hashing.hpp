#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace gradleak {

inline uint64_t fnv1a64(std::string_view bytes, uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string fnv1a64_hex(std::string_view bytes);
std::string hash_file(const std::filesystem::path& path);

} // namespace gradleak
