#pragma once

#include "lol/distribution.hpp"
#include "lol/kernels.hpp"
#include "lol/network.hpp"
#include "lol/trainer.hpp"
#include "lol/types.hpp"

#include <array>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace lol {

// One row of trace.csv. Missing values (empty subsets, span residual not
// evaluated) are NaN.
struct MetricsRecord {
    long t = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double reg_loss = 0.0;
    double loss_m1_r = 0.0;
    double loss_m1bar_g = 0.0;
    double loss_m2bar = 0.0;
    double rho = 0.0;
    double almost_lin = 0.0;
    double u_bar_fro = 0.0;
    double w_bar_fro = 0.0;
    double v_bar_fro = 0.0;
    double hamming_frac = 0.0;
    double test_err = 0.0;
    double test_loss = 0.0;
    double test_err_p_only = 0.0;
    double test_err_q_only = 0.0;
    double test_err_both = 0.0;
    double span_residual = 0.0;
    double alpha_norm = 0.0;

    static constexpr std::size_t kColumns = 20;
    static const std::array<std::string_view, kColumns>& columns();
    // Values in column order; t is returned as a double.
    std::array<double, kColumns> values() const;
    static MetricsRecord from_values(const std::array<double, kColumns>& v);
};

// |g(z + zeta) + g(z - zeta) - 2 g(z)|.
double almost_linearity(const Network& net, const DistributionParams& params);

// (1/N) sum_{j in M2} |l'(f_j)| at the given outputs; N = dataset size.
double rho(const Dataset& ds, const Vector& f);
double rho(const Network& net, const Dataset& ds);

// Mean over the probe of the fraction of hidden units whose activation bit
// differs between pattern sources a and b.
double activation_hamming(const Network& net, const Weights& a, const Weights& b,
                          std::span<const Example> probe);

struct SubsetLosses {
    double loss_m1_r;     // L over M1 of r(x1)
    double loss_m1bar_g;  // L over M1bar of g(x2)
    double loss_m2;       // L over M2 of f
    double loss_m2bar;    // L over M2bar of f
};

// From per-example branch outputs r, g in dataset order.
SubsetLosses subset_losses(const Dataset& ds, const Vector& r, const Vector& g);
SubsetLosses subset_losses(const Network& net, const Dataset& ds);

struct MarginProfile {
    double min = 0.0;
    double median = 0.0;
    double violation_frac = 0.0;  // fraction with y g(x2) <= 0
};

// Statistics of delta * y g(x2) / ||x2||.
MarginProfile margin_profile(const Network& net, std::span<const Example> q_examples, double delta = 1.0);

struct SpanResidual {
    double residual_frac = 0.0;
    Vector alpha;
    double alpha_norm = 0.0;
    bool rank_deficient = false;
};

// Fits h(x) = (r(x) - r(-x)) / 2 on the probe by <alpha, x> with alpha in the
// span of the P-only training inputs.
SpanResidual antisym_span_residual(const Network& net, const Dataset& ds, std::span<const Vector> probe);

// Fresh x1 draws from the P marginal, max(10 |M2bar|, 512) of them.
std::vector<Vector> span_probe(const DistributionParams& params, const Dataset& ds, Rng& rng);

struct EvalResult {
    double test_err = 0.0;
    double test_loss = 0.0;
    double test_err_p_only = 0.0;
    double test_err_q_only = 0.0;
    double test_err_both = 0.0;
};

EvalResult evaluate(const Network& net, const Dataset& test);
EvalResult evaluate(const CompiledBatch& batch, const Dataset& test, const Vector& f);

// Everything needed to turn trainer states into MetricsRecords.
class MetricsContext {
public:
    MetricsContext(const DistributionParams& params, const Dataset& train, const Dataset& test, int k,
                   double lambda, std::uint64_t seed, int span_every);

    // `eval` must hold the clean outputs at state.net over the training set.
    MetricsRecord record(const TrainerState& state, double lr, double train_loss, const BatchEvaluator& eval,
                         bool final);

    static constexpr int kHammingProbe = 64;

private:
    const DistributionParams* params_;
    const Dataset* train_;
    const Dataset* test_;
    CompiledBatch test_batch_;
    std::vector<Example> hamming_probe_;
    std::vector<Vector> span_probe_;
    double lambda_;
    int span_every_;
    long records_ = 0;
};

}  // namespace lol
