#include "lol/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace lol {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kSpanRidge = 1e-10;

Label label_of(double y) { return y > 0 ? Label::Pos : Label::Neg; }

double mean_loss_over(const std::vector<int>& idx, const Dataset& ds, const Vector& out) {
    if (idx.empty()) return kNaN;
    double s = 0.0;
    for (int i : idx) s += logistic_loss(out[i], ds[static_cast<std::size_t>(i)].y);
    return s / static_cast<double>(idx.size());
}

}  // namespace

const std::array<std::string_view, MetricsRecord::kColumns>& MetricsRecord::columns() {
    static const std::array<std::string_view, kColumns> names = {
        "t",          "lr",           "train_loss",      "reg_loss",        "loss_m1_r",
        "loss_m1bar_g", "loss_m2bar", "rho",             "almost_lin",      "u_bar_fro",
        "w_bar_fro",  "v_bar_fro",    "hamming_frac",    "test_err",        "test_loss",
        "test_err_p_only", "test_err_q_only", "test_err_both", "span_residual", "alpha_norm"};
    return names;
}

std::array<double, MetricsRecord::kColumns> MetricsRecord::values() const {
    return {static_cast<double>(t), lr,           train_loss,      reg_loss,        loss_m1_r,
            loss_m1bar_g,           loss_m2bar,   rho,             almost_lin,      u_bar_fro,
            w_bar_fro,              v_bar_fro,    hamming_frac,    test_err,        test_loss,
            test_err_p_only,        test_err_q_only, test_err_both, span_residual,  alpha_norm};
}

MetricsRecord MetricsRecord::from_values(const std::array<double, kColumns>& v) {
    MetricsRecord r;
    r.t = static_cast<long>(v[0]);
    r.lr = v[1];
    r.train_loss = v[2];
    r.reg_loss = v[3];
    r.loss_m1_r = v[4];
    r.loss_m1bar_g = v[5];
    r.loss_m2bar = v[6];
    r.rho = v[7];
    r.almost_lin = v[8];
    r.u_bar_fro = v[9];
    r.w_bar_fro = v[10];
    r.v_bar_fro = v[11];
    r.hamming_frac = v[12];
    r.test_err = v[13];
    r.test_loss = v[14];
    r.test_err_p_only = v[15];
    r.test_err_q_only = v[16];
    r.test_err_both = v[17];
    r.span_residual = v[18];
    r.alpha_norm = v[19];
    return r;
}

double almost_linearity(const Network& net, const DistributionParams& params) {
    const double plus = g_component(net, params.z + params.zeta);
    const double minus = g_component(net, params.z - params.zeta);
    const double center = g_component(net, params.z);
    return std::abs(plus + minus - 2.0 * center);
}

double rho(const Dataset& ds, const Vector& f) {
    if (ds.empty()) return kNaN;
    double s = 0.0;
    for (int j : ds.m2()) s += std::abs(loss_derivative(f[j], ds[static_cast<std::size_t>(j)].y));
    return s / static_cast<double>(ds.size());
}

double rho(const Network& net, const Dataset& ds) {
    const CompiledBatch batch = compile_batch(ds, net.k);
    BatchEvaluator eval(batch);
    eval.forward(net);
    return rho(ds, eval.f());
}

double activation_hamming(const Network& net, const Weights& a, const Weights& b, std::span<const Example> probe) {
    if (probe.empty()) throw PreconditionError("activation_hamming: empty probe");
    double total = 0.0;
    for (const Example& ex : probe) {
        const auto pa = activation_pattern(net, a, ex.x1, ex.x2);
        const auto pb = activation_pattern(net, b, ex.x1, ex.x2);
        int diff = 0;
        for (std::size_t i = 0; i < pa.size(); ++i) diff += pa[i] != pb[i];
        total += static_cast<double>(diff) / static_cast<double>(net.m);
    }
    return total / static_cast<double>(probe.size());
}

SubsetLosses subset_losses(const Dataset& ds, const Vector& r, const Vector& g) {
    const Vector f = r + g;
    return {mean_loss_over(ds.m1(), ds, r), mean_loss_over(ds.m1_bar(), ds, g), mean_loss_over(ds.m2(), ds, f),
            mean_loss_over(ds.m2_bar(), ds, f)};
}

SubsetLosses subset_losses(const Network& net, const Dataset& ds) {
    const CompiledBatch batch = compile_batch(ds, net.k);
    BatchEvaluator eval(batch);
    eval.forward(net);
    return subset_losses(ds, eval.r(), eval.g());
}

MarginProfile margin_profile(const Network& net, std::span<const Example> q_examples, double delta) {
    if (q_examples.empty()) throw PreconditionError("margin_profile: empty example set");
    std::vector<double> ratios;
    ratios.reserve(q_examples.size());
    int violations = 0;
    for (const Example& ex : q_examples) {
        const double n = ex.x2.norm();
        if (n == 0.0) throw PreconditionError("margin_profile: example with x2 = 0");
        const double yg = sign_of(ex.y) * g_component(net, ex.x2);
        if (!(yg > 0.0)) ++violations;
        ratios.push_back(delta * yg / n);
    }
    std::sort(ratios.begin(), ratios.end());
    const std::size_t n = ratios.size();
    MarginProfile mp;
    mp.min = ratios.front();
    mp.median = n % 2 ? ratios[n / 2] : 0.5 * (ratios[n / 2 - 1] + ratios[n / 2]);
    mp.violation_frac = static_cast<double>(violations) / static_cast<double>(n);
    return mp;
}

namespace {

Vector r_outputs(const Network& net, std::span<const Vector> x1s, double sign) {
    std::vector<Vector> xs, zeros;
    xs.reserve(x1s.size());
    for (const Vector& x : x1s) {
        xs.push_back(sign * x);
        zeros.push_back(Vector::Zero(x.size()));
    }
    const std::vector<double> ys(x1s.size(), 1.0);
    const CompiledBatch batch = compile_inputs(xs, zeros, ys, net.k);
    BatchEvaluator eval(batch);
    eval.forward(net);
    return eval.r();
}

}  // namespace

SpanResidual antisym_span_residual(const Network& net, const Dataset& ds, std::span<const Vector> probe) {
    const auto& pidx = ds.m2_bar();
    if (pidx.empty()) throw PreconditionError("antisym_span_residual: no P-only training examples");
    if (probe.size() < 10 * pidx.size())
        throw PreconditionError("antisym_span_residual: probe must hold at least 10 |M2bar| inputs");
    const Index n = static_cast<Index>(probe.size());
    const Index dim = net.d;
    const Index kp = static_cast<Index>(pidx.size());

    const Vector h = 0.5 * (r_outputs(net, probe, 1.0) - r_outputs(net, probe, -1.0));
    SpanResidual out;
    const double hn = h.norm();
    if (hn == 0.0) {
        out.alpha = Vector::Zero(dim);
        return out;
    }
    Matrix basis(kp, dim);
    for (Index i = 0; i < kp; ++i) basis.row(i) = ds[static_cast<std::size_t>(pidx[i])].x1.transpose();
    Matrix x(n, dim);
    for (Index i = 0; i < n; ++i) x.row(i) = probe[static_cast<std::size_t>(i)].transpose();
    const Matrix p = x * basis.transpose();
    out.rank_deficient = Eigen::ColPivHouseholderQR<Matrix>(p).rank() < kp;
    Matrix normal = p.transpose() * p;
    normal.diagonal().array() += kSpanRidge;
    const Vector c = normal.ldlt().solve(p.transpose() * h);
    out.alpha = basis.transpose() * c;
    out.alpha_norm = out.alpha.norm();
    out.residual_frac = (h - p * c).norm() / hn;
    return out;
}

std::vector<Vector> span_probe(const DistributionParams& params, const Dataset& ds, Rng& rng) {
    const std::size_t n = std::max<std::size_t>(10 * ds.m2_bar().size(), 512);
    std::vector<Vector> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const Label y = rng.coin() ? Label::Pos : Label::Neg;
        out.push_back(sample_p(params, y, rng));
    }
    return out;
}

EvalResult evaluate(const CompiledBatch& batch, const Dataset& test, const Vector& f) {
    if (test.empty()) throw PreconditionError("evaluate: empty test set");
    double loss = 0.0;
    int errors = 0;
    int kind_err[3] = {0, 0, 0};
    int kind_n[3] = {0, 0, 0};
    for (int e = 0; e < batch.n; ++e) {
        const Example& ex = test[static_cast<std::size_t>(batch.source_index[static_cast<std::size_t>(e)])];
        const double y = batch.y[static_cast<std::size_t>(e)];
        loss += logistic_loss(f[e], label_of(y));
        const bool wrong = !(y * f[e] > 0.0);
        errors += wrong;
        const int kind = static_cast<int>(ex.kind);
        kind_n[kind] += 1;
        kind_err[kind] += wrong;
    }
    auto rate = [](int a, int b) { return b ? static_cast<double>(a) / b : kNaN; };
    EvalResult r;
    r.test_err = rate(errors, batch.n);
    r.test_loss = loss / batch.n;
    r.test_err_p_only = rate(kind_err[static_cast<int>(ExampleKind::POnly)], kind_n[static_cast<int>(ExampleKind::POnly)]);
    r.test_err_q_only = rate(kind_err[static_cast<int>(ExampleKind::QOnly)], kind_n[static_cast<int>(ExampleKind::QOnly)]);
    r.test_err_both = rate(kind_err[static_cast<int>(ExampleKind::Both)], kind_n[static_cast<int>(ExampleKind::Both)]);
    return r;
}

EvalResult evaluate(const Network& net, const Dataset& test) {
    const CompiledBatch batch = compile_batch(test, net.k);
    BatchEvaluator eval(batch);
    eval.forward(net);
    return evaluate(batch, test, eval.f());
}

MetricsContext::MetricsContext(const DistributionParams& params, const Dataset& train, const Dataset& test, int k,
                               double lambda, std::uint64_t seed, int span_every)
    : params_(&params),
      train_(&train),
      test_(&test),
      test_batch_(compile_batch(test, k)),
      lambda_(lambda),
      span_every_(span_every) {
    const std::size_t probe = std::min<std::size_t>(kHammingProbe, test.size());
    hamming_probe_.assign(test.examples().begin(), test.examples().begin() + static_cast<long>(probe));
    if (!train.m2_bar().empty()) {
        Rng rng(split_seed(seed, stream::probes));
        span_probe_ = span_probe(params, train, rng);
    }
}

MetricsRecord MetricsContext::record(const TrainerState& st, double lr, double train_loss,
                                     const BatchEvaluator& eval, bool final) {
    const Network& net = st.net;
    MetricsRecord m;
    m.t = st.t;
    m.lr = lr;
    m.train_loss = train_loss;
    m.reg_loss = train_loss + 0.5 * lambda_ * net.weights.squared_norm();
    const SubsetLosses sl = subset_losses(*train_, eval.r(), eval.g());
    m.loss_m1_r = sl.loss_m1_r;
    m.loss_m1bar_g = sl.loss_m1bar_g;
    m.loss_m2bar = sl.loss_m2bar;
    m.rho = rho(*train_, eval.f());
    m.almost_lin = almost_linearity(net, *params_);
    m.w_bar_fro = st.u_bar.w.norm();
    m.v_bar_fro = st.u_bar.v.norm();
    m.u_bar_fro = st.u_bar.norm();
    m.hamming_frac = hamming_probe_.empty() ? kNaN : activation_hamming(net, net.weights, st.u_tilde, hamming_probe_);

    BatchEvaluator test_eval(test_batch_);
    test_eval.forward(net);
    const EvalResult ev = evaluate(test_batch_, *test_, test_eval.f());
    m.test_err = ev.test_err;
    m.test_loss = ev.test_loss;
    m.test_err_p_only = ev.test_err_p_only;
    m.test_err_q_only = ev.test_err_q_only;
    m.test_err_both = ev.test_err_both;

    const bool want_span = final || (span_every_ > 0 && records_ % span_every_ == 0);
    if (want_span && !span_probe_.empty()) {
        const SpanResidual sr = antisym_span_residual(net, *train_, span_probe_);
        m.span_residual = sr.residual_frac;
        m.alpha_norm = sr.alpha_norm;
    } else {
        m.span_residual = kNaN;
        m.alpha_norm = kNaN;
    }
    ++records_;
    return m;
}

}  // namespace lol
