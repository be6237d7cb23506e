#pragma once

// Batched forward/backward kernels for the two-branch network.
//
// Each input block is cut into k patches; every nonzero patch becomes one
// row of a per-branch patch matrix. When the rows of a branch span a subspace
// of dimension at most width/4 (the Q block lives on span{z, zeta}) the rows
// are stored as coordinates in an orthonormal basis of that span, so the
// pre-activation and gradient products shrink to the span dimension.
//
// Work is split into fixed-size chunks (independent of the thread count) and
// every reduction runs in a fixed order inside one chunk, so results are
// bitwise identical for any OMP_NUM_THREADS.

#include "lol/distribution.hpp"
#include "lol/network.hpp"
#include "lol/types.hpp"

#include <span>
#include <vector>

namespace lol {

struct BranchRows {
    int width = 0;
    bool compressed = false;
    Matrix basis;   // rank x width, orthonormal rows (only when compressed)
    Matrix coords;  // rows x (rank or width)
    std::vector<int> row_example;
    std::vector<int> row_patch;
    std::vector<int> example_begin;  // size n + 1, rows of example e are [begin[e], begin[e+1])
};

struct CompiledBatch {
    int n = 0;
    int d = 0;
    int k = 1;
    std::vector<double> y;
    std::vector<int> source_index;  // dataset index of each compiled example
    BranchRows branch[2];           // 0 = P block (x1), 1 = Q block (x2)
    // present[(e * 2 + b) * k + p] = patch p of block b of example e is nonzero
    std::vector<std::uint8_t> present;

    bool patch_present(int e, int b, int p) const {
        return present[(static_cast<std::size_t>(e) * 2 + b) * k + p] != 0;
    }
};

// Rank threshold fraction above which a branch is stored uncompressed.
inline constexpr double kCompressFraction = 0.25;

CompiledBatch compile_batch(const Dataset& ds, int k,
                            std::span<const int> subset = {});
CompiledBatch compile_inputs(std::span<const Vector> x1s, std::span<const Vector> x2s,
                             std::span<const double> ys, int k);

// Forward and backward passes over a compiled batch. The pre-activation
// buffers from forward() are reused by backward(), so a training step costs
// one forward and one backward product per branch.
class BatchEvaluator {
public:
    explicit BatchEvaluator(const CompiledBatch& batch);

    // Clean forward at `net`. Fills r(), g(), f().
    void forward(const Network& net);
    // Adds pre-activation noise (one value per hidden unit, shared across the
    // batch) on top of the last forward(). Fills noisy_r(), noisy_g().
    void apply_activation_noise(const Network& net, const Vector& xi);
    bool has_noise() const { return noisy_; }

    const Vector& r() const { return r_; }
    const Vector& g() const { return g_; }
    Vector f() const { return r_ + g_; }
    // Outputs used by backward(): noisy when noise was applied, else clean.
    Vector active_f() const;

    // Gradient of sum_e coeff[e] * f_e with respect to the first layer, using
    // the activation masks of the last forward (noisy if applied).
    Weights backward(const Network& net, const Vector& coeff);

    const CompiledBatch& batch() const { return *batch_; }

private:
    void branch_forward(const Network& net, int b);
    void branch_outputs(const Network& net, int b, const Vector* xi, Vector& out) const;
    Matrix branch_backward(const Network& net, int b, const Vector& coeff);

    const CompiledBatch* batch_;
    Matrix pre_[2];
    const Vector* xi_ = nullptr;
    Vector xi_copy_;
    bool noisy_ = false;
    Vector r_, g_, noisy_r_, noisy_g_;
};

// Mean logistic loss and the per-example loss-derivative coefficients
// (l'(f_e) / n) for outputs f over a compiled batch.
double mean_logistic_loss(const CompiledBatch& batch, const Vector& f);
Vector loss_coefficients(const CompiledBatch& batch, const Vector& f);

namespace reference {

// Straightforward per-example implementations used as the test oracle and
// the serial baseline in the benchmark. `xi` may be empty (no noise).
double forward(const Network& net, const Weights& wts, const Vector& x1, const Vector& x2,
               const Vector& xi = Vector());
double branch_output(const Network& net, const Weights& wts, int branch, const Vector& x,
                     const Vector& xi = Vector());
Weights gradient(const Network& net, const Weights& wts, std::span<const Example> examples,
                 std::span<const double> coeff, const Vector& xi = Vector());
double mean_loss(const Network& net, std::span<const Example> examples);

}  // namespace reference

}  // namespace lol
