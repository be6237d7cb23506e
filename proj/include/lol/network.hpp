#pragma once

#include "lol/distribution.hpp"
#include "lol/rng.hpp"
#include "lol/types.hpp"

#include "json.hpp"

#include <optional>
#include <span>
#include <vector>

namespace lol {

// First-layer parameters split into the two input blocks. `w` acts on x1
// (the P block), `v` on x2 (the Q block). Each is a filter bank of
// m/(2k) rows by d/k columns that is applied to every one of the k
// non-overlapping patches of its block; k = 1 is the plain block-dense layer
// with W, V in R^{m/2 x d}.
struct Weights {
    Matrix w;
    Matrix v;

    static Weights zeros_like(const Weights& other);
    double squared_norm() const { return w.squaredNorm() + v.squaredNorm(); }
    double norm() const;
    double max_abs() const;
    bool all_finite() const;

    Weights& operator+=(const Weights& o);
    Weights& operator-=(const Weights& o);
    Weights& operator*=(double s);
};

Weights operator+(Weights a, const Weights& b);
Weights operator-(Weights a, const Weights& b);
Weights operator*(double s, Weights a);

// Two-layer ReLU network with a frozen second layer.
//
// Hidden units are ordered branch-major: [0, m/2) belong to the P branch and
// [m/2, m) to the Q branch; inside a branch unit index = patch * channels + channel.
struct Network {
    int m = 0;
    int d = 0;
    int k = 1;
    Vector u;
    Weights weights;

    int half() const { return m / 2; }
    int channels() const { return m / (2 * k); }
    int patch_width() const { return d / k; }
    bool is_dense() const { return k == 1; }

    // Block-structured m x 2d matrix; only defined for k == 1.
    Matrix full_matrix() const { return to_full(weights); }
    Matrix to_full(const Weights& wts) const;
    Weights from_full(const Matrix& U) const;
};

void check_geometry(int m, int d, int k);

// In-block entries ~ N(0, tau0^2); u entries uniform on {-1/sqrt(m), +1/sqrt(m)}.
Network init_network(int m, int d, double tau0, Rng& rng, int k = 1);

// Activation pattern sigma(A x): one bit per hidden unit, 1(<[A]_i, x> >= 0).
std::vector<std::uint8_t> activation_pattern(const Network& net, const Weights& pattern_source,
                                             const Vector& x1, const Vector& x2);

// N_A(u, B; x) = sum_i u_i 1(<[A]_i, x> >= 0) <[B]_i, x> for arbitrary m x 2d matrices.
double forward_pattern(const Vector& u, const Matrix& pattern_source, const Matrix& weights,
                       const Vector& x);
// Structured form: patterns from `pattern_source`, values from `weights`.
double forward_pattern(const Network& net, const Weights& pattern_source, const Weights& weights,
                       const Vector& x1, const Vector& x2);

double forward(const Network& net, const Vector& x1, const Vector& x2);
inline double forward(const Network& net, const Example& ex) { return forward(net, ex.x1, ex.x2); }
// Same as forward; named for the patch-sum reading of the k > 1 model.
inline double conv_forward(const Network& net, const Vector& x1, const Vector& x2) {
    return forward(net, x1, x2);
}

// g(x2) = N_V(v, V; x2), the Q-branch output.
double g_component(const Network& net, const Vector& x2);
// r(x1) = N_W(w, W; x1), the P-branch output.
double r_component(const Network& net, const Vector& x1);

// log(1 + exp(-y f)), overflow safe.
double logistic_loss(double f, Label y);
// d/df of logistic_loss: -y / (1 + exp(y f)).
double loss_derivative(double f, Label y);

// Mean logistic loss over `subset` (all examples when empty optional).
double batch_loss(const Network& net, const Dataset& ds,
                  std::optional<std::span<const int>> subset = std::nullopt);
double regularized_loss(const Network& net, const Dataset& ds, double lambda);

// Gradient of the mean logistic loss with respect to the first layer.
Weights gradient(const Network& net, const Dataset& ds,
                 std::optional<std::span<const int>> subset = std::nullopt);

nlohmann::json weights_to_json(const Network& net, const Weights& wts);
Weights weights_from_json(const Network& net, const nlohmann::json& j);
nlohmann::json network_to_json(const Network& net);
Network network_from_json(const nlohmann::json& j);

}  // namespace lol
