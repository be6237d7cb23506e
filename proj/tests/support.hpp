#pragma once

#include "lol/distribution.hpp"
#include "lol/network.hpp"
#include "lol/rng.hpp"

#include <cmath>
#include <cstdint>

namespace support {

inline lol::DistributionParams params(int d = 20, double kappa = 0.5, double q0 = 0.3, double r = 0.3,
                                      std::uint64_t seed = 1) {
    lol::ParamOverrides ov;
    ov.r = r;
    return lol::make_params(d, kappa, q0, ov, seed);
}

inline lol::Dataset dataset(const lol::DistributionParams& p, int n, std::uint64_t seed) {
    lol::Rng rng(seed);
    return lol::generate_dataset(p, n, rng);
}

inline lol::Network random_net(int m, int d, double tau0, std::uint64_t seed, int k = 1) {
    lol::Rng rng(seed);
    return lol::init_network(m, d, tau0, rng, k);
}

// Copy of `net` with first-layer weights replaced.
inline lol::Network with_weights(const lol::Network& net, const lol::Weights& w) {
    lol::Network out = net;
    out.weights = w;
    return out;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-12); }

inline bool bitwise_equal(const lol::Matrix& a, const lol::Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    for (lol::Index i = 0; i < a.size(); ++i)
        if (a.data()[i] != b.data()[i]) return false;
    return true;
}

inline bool bitwise_equal(const lol::Weights& a, const lol::Weights& b) {
    return bitwise_equal(a.w, b.w) && bitwise_equal(a.v, b.v);
}

}  // namespace support
