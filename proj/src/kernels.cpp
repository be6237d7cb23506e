#include "lol/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>

namespace lol {

namespace {

constexpr Index kRowChunk = 64;
constexpr Index kChannelChunk = 64;
constexpr double kRankTolerance = 1e-12;

Index chunk_count(Index n, Index chunk) { return (n + chunk - 1) / chunk; }

// Orthonormal basis of the row span, or an empty matrix when the rank
// exceeds max_rank.
Matrix span_basis(const Matrix& rows, Index max_rank) {
    std::vector<Vector> basis;
    for (Index i = 0; i < rows.rows(); ++i) {
        Vector res = rows.row(i).transpose();
        const double scale = res.norm();
        if (scale == 0.0) continue;
        for (int pass = 0; pass < 2; ++pass)
            for (const Vector& q : basis) res -= res.dot(q) * q;
        const double rn = res.norm();
        if (rn > kRankTolerance * scale) {
            if (static_cast<Index>(basis.size()) >= max_rank) return Matrix();
            basis.push_back(res / rn);
        }
    }
    Matrix out(static_cast<Index>(basis.size()), rows.cols());
    for (Index i = 0; i < out.rows(); ++i) out.row(i) = basis[static_cast<std::size_t>(i)].transpose();
    return out;
}

void build_branch(BranchRows& br, const std::vector<const Vector*>& blocks, int k, int b,
                  std::vector<std::uint8_t>& present) {
    const int n = static_cast<int>(blocks.size());
    const int width = blocks.empty() ? 0 : static_cast<int>(blocks[0]->size()) / k;
    br.width = width;
    br.example_begin.assign(static_cast<std::size_t>(n) + 1, 0);
    std::vector<std::pair<int, int>> rows;
    for (int e = 0; e < n; ++e) {
        br.example_begin[static_cast<std::size_t>(e)] = static_cast<int>(rows.size());
        for (int p = 0; p < k; ++p) {
            const bool nz = (blocks[static_cast<std::size_t>(e)]->segment(p * width, width).array() != 0.0).any();
            present[(static_cast<std::size_t>(e) * 2 + b) * k + p] = nz ? 1 : 0;
            if (nz) rows.emplace_back(e, p);
        }
    }
    br.example_begin[static_cast<std::size_t>(n)] = static_cast<int>(rows.size());
    Matrix raw(static_cast<Index>(rows.size()), width);
    br.row_example.resize(rows.size());
    br.row_patch.resize(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto [e, p] = rows[i];
        raw.row(static_cast<Index>(i)) = blocks[static_cast<std::size_t>(e)]->segment(p * width, width).transpose();
        br.row_example[i] = e;
        br.row_patch[i] = p;
    }
    const auto max_rank = static_cast<Index>(kCompressFraction * width);
    Matrix basis = raw.rows() > 0 ? span_basis(raw, max_rank) : Matrix();
    if (basis.rows() > 0) {
        br.compressed = true;
        br.coords = raw * basis.transpose();
        br.basis = std::move(basis);
    } else {
        br.compressed = false;
        br.coords = std::move(raw);
        br.basis.resize(0, width);
    }
}

CompiledBatch compile_blocks(const std::vector<const Vector*>& x1s, const std::vector<const Vector*>& x2s,
                             std::vector<double> ys, int k) {
    CompiledBatch cb;
    cb.n = static_cast<int>(ys.size());
    cb.k = k;
    cb.d = x1s.empty() ? 0 : static_cast<int>(x1s[0]->size());
    if (k < 1 || (cb.d > 0 && cb.d % k != 0)) throw PreconditionError("patch count k must divide d");
    cb.y = std::move(ys);
    cb.present.assign(static_cast<std::size_t>(cb.n) * 2 * static_cast<std::size_t>(k), 0);
    build_branch(cb.branch[0], x1s, k, 0, cb.present);
    build_branch(cb.branch[1], x2s, k, 1, cb.present);
    return cb;
}

inline double relu(double t) { return t >= 0.0 ? t : 0.0; }

}  // namespace

CompiledBatch compile_batch(const Dataset& ds, int k, std::span<const int> subset) {
    std::vector<int> idx;
    if (subset.empty()) {
        idx.resize(ds.size());
        for (std::size_t i = 0; i < ds.size(); ++i) idx[i] = static_cast<int>(i);
    } else {
        idx.assign(subset.begin(), subset.end());
    }
    std::vector<const Vector*> x1s, x2s;
    std::vector<double> ys;
    for (int i : idx) {
        const Example& ex = ds[static_cast<std::size_t>(i)];
        x1s.push_back(&ex.x1);
        x2s.push_back(&ex.x2);
        ys.push_back(sign_of(ex.y));
    }
    CompiledBatch cb = compile_blocks(x1s, x2s, std::move(ys), k);
    cb.source_index = std::move(idx);
    return cb;
}

CompiledBatch compile_inputs(std::span<const Vector> x1s, std::span<const Vector> x2s,
                             std::span<const double> ys, int k) {
    std::vector<const Vector*> p1, p2;
    for (const auto& v : x1s) p1.push_back(&v);
    for (const auto& v : x2s) p2.push_back(&v);
    CompiledBatch cb = compile_blocks(p1, p2, std::vector<double>(ys.begin(), ys.end()), k);
    cb.source_index.resize(static_cast<std::size_t>(cb.n));
    for (int i = 0; i < cb.n; ++i) cb.source_index[static_cast<std::size_t>(i)] = i;
    return cb;
}

BatchEvaluator::BatchEvaluator(const CompiledBatch& batch) : batch_(&batch) {}

void BatchEvaluator::branch_forward(const Network& net, int b) {
    const BranchRows& br = batch_->branch[b];
    const Matrix& filters = b == 0 ? net.weights.w : net.weights.v;
    const Matrix proj = br.compressed ? Matrix(filters * br.basis.transpose()) : filters;
    const Index rows = br.coords.rows();
    pre_[b].resize(rows, filters.rows());
    const Index chunks = chunk_count(rows, kRowChunk);
#pragma omp parallel for schedule(static)
    for (Index c = 0; c < chunks; ++c) {
        const Index a = c * kRowChunk;
        const Index len = std::min(kRowChunk, rows - a);
        pre_[b].middleRows(a, len).noalias() = br.coords.middleRows(a, len) * proj.transpose();
    }
}

void BatchEvaluator::branch_outputs(const Network& net, int b, const Vector* xi, Vector& out) const {
    const BranchRows& br = batch_->branch[b];
    const int channels = net.channels();
    const int k = batch_->k;
    const Index n = batch_->n;
    const double* u = net.u.data();
    const double* noise = xi ? xi->data() : nullptr;
    // Output of a patch that is entirely zero: sum_j u_j relu(xi_j).
    std::vector<double> empty_patch(static_cast<std::size_t>(k), 0.0);
    if (noise) {
        for (int p = 0; p < k; ++p) {
            const Index base = static_cast<Index>(b) * net.half() + static_cast<Index>(p) * channels;
            double s = 0.0;
            for (int j = 0; j < channels; ++j) s += u[base + j] * relu(noise[base + j]);
            empty_patch[static_cast<std::size_t>(p)] = s;
        }
    }
    out.resize(n);
    const Index chunks = chunk_count(n, kRowChunk);
#pragma omp parallel for schedule(static)
    for (Index c = 0; c < chunks; ++c) {
        const Index e_end = std::min(n, (c + 1) * kRowChunk);
        for (Index e = c * kRowChunk; e < e_end; ++e) {
            double total = 0.0;
            int row = br.example_begin[static_cast<std::size_t>(e)];
            const int row_end = br.example_begin[static_cast<std::size_t>(e) + 1];
            for (int p = 0; p < k; ++p) {
                if (row < row_end && br.row_patch[static_cast<std::size_t>(row)] == p) {
                    const Index base = static_cast<Index>(b) * net.half() + static_cast<Index>(p) * channels;
                    const double* pre = pre_[b].row(row).data();
                    double s = 0.0;
                    if (noise) {
                        for (int j = 0; j < channels; ++j) s += u[base + j] * relu(pre[j] + noise[base + j]);
                    } else {
                        for (int j = 0; j < channels; ++j) s += u[base + j] * relu(pre[j]);
                    }
                    total += s;
                    ++row;
                } else if (noise) {
                    total += empty_patch[static_cast<std::size_t>(p)];
                }
            }
            out[e] = total;
        }
    }
}

void BatchEvaluator::forward(const Network& net) {
    if (net.k != batch_->k || net.d != batch_->d)
        throw PreconditionError("network geometry does not match the compiled batch");
    noisy_ = false;
    xi_ = nullptr;
    for (int b = 0; b < 2; ++b) branch_forward(net, b);
    branch_outputs(net, 0, nullptr, r_);
    branch_outputs(net, 1, nullptr, g_);
}

void BatchEvaluator::apply_activation_noise(const Network& net, const Vector& xi) {
    if (xi.size() != net.m) throw PreconditionError("activation noise must have m entries");
    xi_copy_ = xi;
    xi_ = &xi_copy_;
    noisy_ = true;
    branch_outputs(net, 0, xi_, noisy_r_);
    branch_outputs(net, 1, xi_, noisy_g_);
}

Vector BatchEvaluator::active_f() const { return noisy_ ? Vector(noisy_r_ + noisy_g_) : Vector(r_ + g_); }

Matrix BatchEvaluator::branch_backward(const Network& net, int b, const Vector& coeff) {
    const BranchRows& br = batch_->branch[b];
    const int channels = net.channels();
    const Index rows = br.coords.rows();
    const double* u = net.u.data();
    const double* noise = noisy_ ? xi_->data() : nullptr;
    Matrix masked(rows, channels);
    const Index row_chunks = chunk_count(rows, kRowChunk);
#pragma omp parallel for schedule(static)
    for (Index c = 0; c < row_chunks; ++c) {
        const Index end = std::min(rows, (c + 1) * kRowChunk);
        for (Index i = c * kRowChunk; i < end; ++i) {
            const double ce = coeff[br.row_example[static_cast<std::size_t>(i)]];
            const Index base = static_cast<Index>(b) * net.half() +
                               static_cast<Index>(br.row_patch[static_cast<std::size_t>(i)]) * channels;
            const double* pre = pre_[b].row(i).data();
            double* out = masked.row(i).data();
            if (noise) {
                for (int j = 0; j < channels; ++j)
                    out[j] = (pre[j] + noise[base + j] >= 0.0) ? ce * u[base + j] : 0.0;
            } else {
                for (int j = 0; j < channels; ++j) out[j] = (pre[j] >= 0.0) ? ce * u[base + j] : 0.0;
            }
        }
    }
    Matrix h(channels, br.coords.cols());
    const Index ch_chunks = chunk_count(channels, kChannelChunk);
#pragma omp parallel for schedule(static)
    for (Index c = 0; c < ch_chunks; ++c) {
        const Index a = c * kChannelChunk;
        const Index len = std::min(kChannelChunk, static_cast<Index>(channels) - a);
        h.middleRows(a, len).noalias() = masked.middleCols(a, len).transpose() * br.coords;
    }
    if (br.compressed) return h * br.basis;
    return h;
}

Weights BatchEvaluator::backward(const Network& net, const Vector& coeff) {
    if (coeff.size() != batch_->n) throw PreconditionError("one coefficient per example required");
    Weights g;
    g.w = branch_backward(net, 0, coeff);
    g.v = branch_backward(net, 1, coeff);
    return g;
}

double mean_logistic_loss(const CompiledBatch& batch, const Vector& f) {
    double s = 0.0;
    for (int e = 0; e < batch.n; ++e)
        s += logistic_loss(f[e], batch.y[static_cast<std::size_t>(e)] > 0 ? Label::Pos : Label::Neg);
    return s / batch.n;
}

Vector loss_coefficients(const CompiledBatch& batch, const Vector& f) {
    Vector c(batch.n);
    for (int e = 0; e < batch.n; ++e)
        c[e] = loss_derivative(f[e], batch.y[static_cast<std::size_t>(e)] > 0 ? Label::Pos : Label::Neg) /
               batch.n;
    return c;
}

namespace reference {

double branch_output(const Network& net, const Weights& wts, int branch, const Vector& x, const Vector& xi) {
    const Matrix& filters = branch == 0 ? wts.w : wts.v;
    const int width = net.patch_width();
    const int channels = net.channels();
    double out = 0.0;
    for (int p = 0; p < net.k; ++p) {
        for (int j = 0; j < channels; ++j) {
            const int unit = branch * net.half() + p * channels + j;
            double pre = 0.0;
            for (int c = 0; c < width; ++c) pre += filters(j, c) * x[p * width + c];
            if (xi.size() > 0) pre += xi[unit];
            if (pre >= 0.0) out += net.u[unit] * pre;
        }
    }
    return out;
}

double forward(const Network& net, const Weights& wts, const Vector& x1, const Vector& x2, const Vector& xi) {
    return branch_output(net, wts, 0, x1, xi) + branch_output(net, wts, 1, x2, xi);
}

Weights gradient(const Network& net, const Weights& wts, std::span<const Example> examples,
                 std::span<const double> coeff, const Vector& xi) {
    Weights g = Weights::zeros_like(wts);
    const int width = net.patch_width();
    const int channels = net.channels();
    for (std::size_t e = 0; e < examples.size(); ++e) {
        for (int b = 0; b < 2; ++b) {
            const Vector& x = b == 0 ? examples[e].x1 : examples[e].x2;
            const Matrix& filters = b == 0 ? wts.w : wts.v;
            Matrix& out = b == 0 ? g.w : g.v;
            for (int p = 0; p < net.k; ++p) {
                for (int j = 0; j < channels; ++j) {
                    const int unit = b * net.half() + p * channels + j;
                    double pre = 0.0;
                    for (int c = 0; c < width; ++c) pre += filters(j, c) * x[p * width + c];
                    if (xi.size() > 0) pre += xi[unit];
                    if (pre < 0.0) continue;
                    const double s = coeff[e] * net.u[unit];
                    for (int c = 0; c < width; ++c) out(j, c) += s * x[p * width + c];
                }
            }
        }
    }
    return g;
}

double mean_loss(const Network& net, std::span<const Example> examples) {
    double s = 0.0;
    for (const Example& ex : examples) s += logistic_loss(forward(net, net.weights, ex.x1, ex.x2), ex.y);
    return s / static_cast<double>(examples.size());
}

}  // namespace reference

}  // namespace lol
