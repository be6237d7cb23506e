#include "lol/rng.hpp"

#include <sstream>
#include <stdexcept>

namespace lol {

std::uint64_t split_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

std::string Rng::state_hex() const {
    std::ostringstream os;
    os << engine_ << ' ' << normal_;
    const std::string text = os.str();
    static constexpr char digits[] = "0123456789abcdef";
    std::string hex;
    hex.reserve(text.size() * 2);
    for (unsigned char c : text) {
        hex.push_back(digits[c >> 4]);
        hex.push_back(digits[c & 0xF]);
    }
    return hex;
}

void Rng::restore_hex(const std::string& hex) {
    if (hex.size() % 2 != 0) throw std::invalid_argument("rng state: odd hex length");
    auto nibble = [](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'a' && c <= 'f') return c - 'a' + 10;
        if (c >= 'A' && c <= 'F') return c - 'A' + 10;
        throw std::invalid_argument("rng state: bad hex digit");
    };
    std::string text;
    text.reserve(hex.size() / 2);
    for (std::size_t i = 0; i < hex.size(); i += 2)
        text.push_back(static_cast<char>(nibble(hex[i]) * 16 + nibble(hex[i + 1])));
    std::istringstream is(text);
    is >> engine_ >> normal_;
    if (!is) throw std::invalid_argument("rng state: malformed");
}

}  // namespace lol
