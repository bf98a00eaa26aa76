#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace bua {

namespace detail {

inline void format_into(std::ostringstream&) {}

template <class T, class... Rest>
void format_into(std::ostringstream& os, const T& head, const Rest&... rest) {
    os << head;
    format_into(os, rest...);
}

}  // namespace detail

template <class... Args>
std::string str_cat(const Args&... args) {
    std::ostringstream os;
    detail::format_into(os, args...);
    return os.str();
}

template <class... Args>
[[noreturn]] void fail(const Args&... args) {
    throw std::runtime_error(str_cat(args...));
}

template <class... Args>
void require(bool cond, const Args&... args) {
    if (!cond) fail(args...);
}

// FNV-1a, used for label hashing and content digests (not cryptographic).
inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace bua
