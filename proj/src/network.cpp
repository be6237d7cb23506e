#include "lol/network.hpp"

#include "lol/kernels.hpp"

#include <cmath>

namespace lol {

Weights Weights::zeros_like(const Weights& other) {
    return {Matrix::Zero(other.w.rows(), other.w.cols()), Matrix::Zero(other.v.rows(), other.v.cols())};
}

double Weights::norm() const { return std::sqrt(squared_norm()); }

double Weights::max_abs() const {
    double a = w.size() ? w.cwiseAbs().maxCoeff() : 0.0;
    double b = v.size() ? v.cwiseAbs().maxCoeff() : 0.0;
    return std::max(a, b);
}

bool Weights::all_finite() const { return w.allFinite() && v.allFinite(); }

Weights& Weights::operator+=(const Weights& o) {
    w += o.w;
    v += o.v;
    return *this;
}

Weights& Weights::operator-=(const Weights& o) {
    w -= o.w;
    v -= o.v;
    return *this;
}

Weights& Weights::operator*=(double s) {
    w *= s;
    v *= s;
    return *this;
}

Weights operator+(Weights a, const Weights& b) { return a += b; }
Weights operator-(Weights a, const Weights& b) { return a -= b; }
Weights operator*(double s, Weights a) { return a *= s; }

void check_geometry(int m, int d, int k) {
    if (m < 2 || m % 2 != 0) throw PreconditionError("hidden width m must be even and >= 2");
    if (d < 1) throw PreconditionError("block dimension d must be positive");
    if (k < 1) throw PreconditionError("patch count k must be positive");
    if (d % k != 0) throw PreconditionError("patch count k must divide d");
    if ((m / 2) % k != 0) throw PreconditionError("patch count k must divide m/2");
}

Matrix Network::to_full(const Weights& wts) const {
    if (k != 1) throw PreconditionError("full m x 2d matrix only exists for the block-dense model");
    Matrix U = Matrix::Zero(m, 2 * d);
    U.topLeftCorner(half(), d) = wts.w;
    U.bottomRightCorner(half(), d) = wts.v;
    return U;
}

Weights Network::from_full(const Matrix& U) const {
    if (k != 1) throw PreconditionError("full m x 2d matrix only exists for the block-dense model");
    if (U.rows() != m || U.cols() != 2 * d) throw PreconditionError("U must be m x 2d");
    if ((U.topRightCorner(half(), d).array() != 0.0).any() ||
        (U.bottomLeftCorner(half(), d).array() != 0.0).any())
        throw PreconditionError("U violates the W/V block sparsity");
    return {U.topLeftCorner(half(), d), U.bottomRightCorner(half(), d)};
}

Network init_network(int m, int d, double tau0, Rng& rng, int k) {
    check_geometry(m, d, k);
    if (!(tau0 > 0.0)) throw PreconditionError("tau0 must be positive");
    Network net;
    net.m = m;
    net.d = d;
    net.k = k;
    const int rows = net.channels();
    const int cols = net.patch_width();
    net.weights.w.resize(rows, cols);
    net.weights.v.resize(rows, cols);
    for (Index i = 0; i < net.weights.w.size(); ++i) net.weights.w.data()[i] = rng.normal(tau0);
    for (Index i = 0; i < net.weights.v.size(); ++i) net.weights.v.data()[i] = rng.normal(tau0);
    const double mag = 1.0 / std::sqrt(static_cast<double>(m));
    net.u.resize(m);
    for (int i = 0; i < m; ++i) net.u[i] = rng.coin() ? mag : -mag;
    return net;
}

std::vector<std::uint8_t> activation_pattern(const Network& net, const Weights& src, const Vector& x1,
                                             const Vector& x2) {
    std::vector<std::uint8_t> bits(static_cast<std::size_t>(net.m));
    const int width = net.patch_width();
    const int channels = net.channels();
    for (int b = 0; b < 2; ++b) {
        const Matrix& filters = b == 0 ? src.w : src.v;
        const Vector& x = b == 0 ? x1 : x2;
        for (int p = 0; p < net.k; ++p) {
            const Vector pre = filters * x.segment(p * width, width);
            for (int j = 0; j < channels; ++j)
                bits[static_cast<std::size_t>(b * net.half() + p * channels + j)] = pre[j] >= 0.0 ? 1 : 0;
        }
    }
    return bits;
}

double forward_pattern(const Vector& u, const Matrix& pattern_source, const Matrix& weights, const Vector& x) {
    if (pattern_source.rows() != u.size() || weights.rows() != u.size() || pattern_source.cols() != x.size() ||
        weights.cols() != x.size())
        throw PreconditionError("forward_pattern: shape mismatch");
    const Vector gate = pattern_source * x;
    const Vector val = weights * x;
    double out = 0.0;
    for (Index i = 0; i < u.size(); ++i)
        if (gate[i] >= 0.0) out += u[i] * val[i];
    return out;
}

namespace {

double branch_pattern(const Network& net, const Matrix& src, const Matrix& wts, int b, const Vector& x) {
    const int width = net.patch_width();
    const int channels = net.channels();
    double out = 0.0;
    for (int p = 0; p < net.k; ++p) {
        const auto seg = x.segment(p * width, width);
        const Vector gate = src * seg;
        const Vector val = wts * seg;
        const Index base = static_cast<Index>(b) * net.half() + static_cast<Index>(p) * channels;
        for (int j = 0; j < channels; ++j)
            if (gate[j] >= 0.0) out += net.u[base + j] * val[j];
    }
    return out;
}

void check_block(const Network& net, const Weights& w, const char* what) {
    if (w.w.rows() != net.channels() || w.w.cols() != net.patch_width() || w.v.rows() != net.channels() ||
        w.v.cols() != net.patch_width())
        throw PreconditionError(std::string(what) + ": weight shape does not match the network");
}

}  // namespace

double forward_pattern(const Network& net, const Weights& pattern_source, const Weights& weights,
                       const Vector& x1, const Vector& x2) {
    check_block(net, pattern_source, "forward_pattern");
    check_block(net, weights, "forward_pattern");
    if (x1.size() != net.d || x2.size() != net.d) throw PreconditionError("forward_pattern: input shape mismatch");
    return branch_pattern(net, pattern_source.w, weights.w, 0, x1) +
           branch_pattern(net, pattern_source.v, weights.v, 1, x2);
}

double forward(const Network& net, const Vector& x1, const Vector& x2) {
    return forward_pattern(net, net.weights, net.weights, x1, x2);
}

double g_component(const Network& net, const Vector& x2) {
    return branch_pattern(net, net.weights.v, net.weights.v, 1, x2);
}

double r_component(const Network& net, const Vector& x1) {
    return branch_pattern(net, net.weights.w, net.weights.w, 0, x1);
}

double logistic_loss(double f, Label y) {
    const double t = sign_of(y) * f;
    // log(1 + e^{-t}) = max(-t, 0) + log1p(e^{-|t|})
    return std::max(-t, 0.0) + std::log1p(std::exp(-std::abs(t)));
}

double loss_derivative(double f, Label y) {
    const double ys = sign_of(y);
    const double t = ys * f;
    // s = 1 / (1 + e^{t}) evaluated without overflow
    const double s = t >= 0.0 ? std::exp(-t) / (1.0 + std::exp(-t)) : 1.0 / (1.0 + std::exp(t));
    return -ys * s;
}

double batch_loss(const Network& net, const Dataset& ds, std::optional<std::span<const int>> subset) {
    if (subset && subset->empty()) throw PreconditionError("batch_loss: empty subset");
    if (ds.empty()) throw PreconditionError("batch_loss: empty dataset");
    const CompiledBatch batch = compile_batch(ds, net.k, subset.value_or(std::span<const int>{}));
    BatchEvaluator eval(batch);
    eval.forward(net);
    return mean_logistic_loss(batch, eval.f());
}

double regularized_loss(const Network& net, const Dataset& ds, double lambda) {
    return batch_loss(net, ds) + 0.5 * lambda * net.weights.squared_norm();
}

Weights gradient(const Network& net, const Dataset& ds, std::optional<std::span<const int>> subset) {
    if (subset && subset->empty()) throw PreconditionError("gradient: empty subset");
    const CompiledBatch batch = compile_batch(ds, net.k, subset.value_or(std::span<const int>{}));
    BatchEvaluator eval(batch);
    eval.forward(net);
    return eval.backward(net, loss_coefficients(batch, eval.f()));
}

namespace {

nlohmann::json matrix_rows_to_json(const Matrix& a, const Matrix& b) {
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(a.size() + b.size()));
    flat.insert(flat.end(), a.data(), a.data() + a.size());
    flat.insert(flat.end(), b.data(), b.data() + b.size());
    return flat;
}

}  // namespace

nlohmann::json weights_to_json(const Network& net, const Weights& wts) {
    if (net.is_dense()) {
        const Matrix U = net.to_full(wts);
        return std::vector<double>(U.data(), U.data() + U.size());
    }
    // Conv model: shared filters of the P branch stacked over the Q branch.
    return matrix_rows_to_json(wts.w, wts.v);
}

Weights weights_from_json(const Network& net, const nlohmann::json& j) {
    const auto flat = j.get<std::vector<double>>();
    if (net.is_dense()) {
        if (flat.size() != static_cast<std::size_t>(net.m) * 2 * static_cast<std::size_t>(net.d))
            throw std::invalid_argument("U must hold m * 2d entries");
        const Matrix U = Eigen::Map<const Matrix>(flat.data(), net.m, 2 * net.d);
        return net.from_full(U);
    }
    const Index rows = net.channels();
    const Index cols = net.patch_width();
    if (flat.size() != static_cast<std::size_t>(2 * rows * cols))
        throw std::invalid_argument("conv U must hold 2 * (m/2k) * (d/k) entries");
    Weights w;
    w.w = Eigen::Map<const Matrix>(flat.data(), rows, cols);
    w.v = Eigen::Map<const Matrix>(flat.data() + rows * cols, rows, cols);
    return w;
}

nlohmann::json network_to_json(const Network& net) {
    nlohmann::json j = {{"m", net.m},
                        {"d", net.d},
                        {"u", std::vector<double>(net.u.data(), net.u.data() + net.u.size())},
                        {"U", weights_to_json(net, net.weights)}};
    if (!net.is_dense()) j["k"] = net.k;
    return j;
}

Network network_from_json(const nlohmann::json& j) {
    Network net;
    net.m = j.at("m").get<int>();
    net.d = j.at("d").get<int>();
    net.k = j.value("k", 1);
    check_geometry(net.m, net.d, net.k);
    const auto u = j.at("u").get<std::vector<double>>();
    if (u.size() != static_cast<std::size_t>(net.m)) throw std::invalid_argument("u must hold m entries");
    net.u = Eigen::Map<const Vector>(u.data(), net.m);
    net.weights = weights_from_json(net, j.at("U"));
    return net;
}

}  // namespace lol
