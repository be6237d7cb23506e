#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace lol {

// Derives an independent 64-bit seed for stream `stream` of a run seeded with
// `seed` (splitmix64 finalizer over a counter).
std::uint64_t split_seed(std::uint64_t seed, std::uint64_t stream);

// Named sub-streams used across the project; changing these values changes
// every generated dataset and trace.
namespace stream {
inline constexpr std::uint64_t directions = 1;
inline constexpr std::uint64_t train_data = 2;
inline constexpr std::uint64_t test_data = 3;
inline constexpr std::uint64_t init = 4;
inline constexpr std::uint64_t grad_noise = 5;
inline constexpr std::uint64_t act_noise = 6;
inline constexpr std::uint64_t probes = 7;
}  // namespace stream

// Deterministic generator with serializable state.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    double normal() { return normal_(engine_); }
    double normal(double stddev) { return stddev * normal_(engine_); }
    double uniform() { return std::generate_canonical<double, 64>(engine_); }
    // Uniform on (0, 1].
    double uniform_pos() { return 1.0 - uniform(); }
    bool coin() { return (engine_() >> 63) != 0; }
    std::uint64_t bits() { return engine_(); }

    // Hex encoding of the full engine + distribution state.
    std::string state_hex() const;
    void restore_hex(const std::string& hex);

    bool operator==(const Rng& other) const {
        return engine_ == other.engine_ && normal_ == other.normal_;
    }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace lol
