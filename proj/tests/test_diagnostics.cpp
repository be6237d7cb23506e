#include "doctest.h"
#include "support.hpp"

#include "lol/diagnostics.hpp"

#include <cmath>
#include <vector>

using namespace lol;

namespace {

Network zero_net(int m, int d) {
    Network net = support::random_net(m, d, 1.0, 5);
    net.weights = Weights::zeros_like(net.weights);
    return net;
}

Dataset without_kind(const Dataset& ds, ExampleKind kind) {
    std::vector<Example> out;
    for (const Example& ex : ds.examples())
        if (ex.kind != kind) out.push_back(ex);
    return Dataset(std::move(out));
}

// Q memorizer on three V units: -relu(<w, x>) - relu(<v, x>) + rho relu(<z, x>)
// with <w, z> < 0 < <w, z - zeta> and <v, z> < 0 < <v, z + zeta>.
struct Memorizer {
    Network net;
    Vector w, v;
};

Memorizer memorizer(const DistributionParams& p) {
    const int m = 8;
    const double s = std::sqrt(static_cast<double>(m));
    const double r2 = p.r * p.r;
    Memorizer out;
    out.w = -0.5 * p.z - p.zeta / r2;
    out.v = -0.5 * p.z + p.zeta / r2;
    Network& net = out.net;
    net.m = m;
    net.d = p.d;
    net.k = 1;
    net.u = Vector::Constant(m, 1.0 / s);
    net.u[4] = -1.0 / s;
    net.u[5] = -1.0 / s;
    net.weights.w = Matrix::Zero(4, p.d);
    net.weights.v = Matrix::Zero(4, p.d);
    net.weights.v.row(0) = s * out.w.transpose();
    net.weights.v.row(1) = s * out.v.transpose();
    net.weights.v.row(2) = s * (0.5 * p.r) * p.z.transpose();
    return out;
}

}  // namespace

TEST_CASE("zero network anchors") {
    const DistributionParams p = support::params(10, 0.5, 0.3, 0.3, 2);
    const Dataset ds = support::dataset(p, 101, 3);
    const Network z = zero_net(8, 10);
    CHECK(almost_linearity(z, p) == 0.0);
    CHECK(rho(z, ds) == static_cast<double>(ds.m2().size()) / (2.0 * static_cast<double>(ds.size())));
    const SubsetLosses sl = subset_losses(z, ds);
    for (double v : {sl.loss_m1_r, sl.loss_m1bar_g, sl.loss_m2, sl.loss_m2bar})
        CHECK(std::abs(v - std::log(2.0)) <= 1e-12);

    std::vector<Example> q;
    for (int i : ds.m2()) q.push_back(ds[static_cast<std::size_t>(i)]);
    const MarginProfile mp = margin_profile(z, q);
    CHECK(mp.min == 0.0);
    CHECK(mp.median == 0.0);
    CHECK(mp.violation_frac == 1.0);

    const EvalResult ev = evaluate(z, ds);
    CHECK(ev.test_err == 1.0);
    CHECK(std::abs(ev.test_loss - std::log(2.0)) <= 1e-12);

    std::vector<Vector> probe;
    Rng rng(4);
    for (int i = 0; i < 10 * static_cast<int>(ds.m2_bar().size()); ++i) probe.push_back(sample_p(p, Label::Pos, rng));
    const SpanResidual sr = antisym_span_residual(z, ds, probe);
    CHECK(sr.residual_frac == 0.0);
    CHECK(sr.alpha_norm == 0.0);
    CHECK((sr.alpha.array() == 0.0).all());
}

TEST_CASE("hand-built Q memorizer") {
    const DistributionParams p = support::params(10, 0.5, 0.3, 0.3, 6);
    const Memorizer mem = memorizer(p);
    const double expect = std::abs(-mem.w.dot(p.z - p.zeta) - mem.v.dot(p.z + p.zeta));
    CHECK(expect > 0.0);
    CHECK(almost_linearity(mem.net, p) == doctest::Approx(expect).epsilon(1e-12));

    const Dataset test = support::dataset(p, 3000, 7);
    const EvalResult ev = evaluate(mem.net, test);
    CHECK(ev.test_err_q_only == 0.0);
    CHECK(ev.test_err_both == 0.0);
    CHECK(ev.test_err_p_only == 1.0);

    std::vector<Example> q;
    for (int i : test.m2()) q.push_back(test[static_cast<std::size_t>(i)]);
    const MarginProfile mp = margin_profile(mem.net, q);
    CHECK(mp.violation_frac == 0.0);
    CHECK(mp.min > 0.0);
}

TEST_CASE("almost_linearity ignores the P block") {
    const DistributionParams p = support::params(10, 0.5, 0.3, 0.3, 2);
    Network net = support::random_net(16, 10, 0.3, 3);
    const double before = almost_linearity(net, p);
    net.weights.w += support::random_net(16, 10, 5.0, 4).weights.w;
    CHECK(almost_linearity(net, p) == before);
}

TEST_CASE("rho bounds and saturation") {
    const DistributionParams p = support::params(10, 0.5, 0.3, 0.3, 2);
    const Dataset ds = support::dataset(p, 200, 3);
    const double n = static_cast<double>(ds.size());
    const double m2 = static_cast<double>(ds.m2().size());
    for (int s = 0; s < 20; ++s) {
        const Network net = support::random_net(16, 10, 0.2 * (s + 1), 10 + s);
        CHECK(rho(net, ds) <= m2 / n);
    }

    Vector yv(static_cast<Index>(ds.size()));
    for (std::size_t i = 0; i < ds.size(); ++i) yv[static_cast<Index>(i)] = sign_of(ds[i].y);
    CHECK(rho(ds, 50.0 * yv) < m2 * 1e-20 / n);

    Rng rng(5);
    for (double c : {1.0, 3.0, 5.0, 8.0, 12.0}) {
        const Vector f = c * yv;
        double loss = 0.0;
        for (std::size_t i = 0; i < ds.size(); ++i) loss += logistic_loss(f[static_cast<Index>(i)], ds[i].y);
        loss /= n;
        if (loss < 0.01) CHECK(rho(ds, f) < 0.01 * m2 / n);
        // Random outputs: |l'| <= l termwise, so rho never exceeds the training loss.
        Vector g(f.size());
        for (Index i = 0; i < g.size(); ++i) g[i] = rng.normal(c);
        double lg = 0.0;
        for (std::size_t i = 0; i < ds.size(); ++i) lg += logistic_loss(g[static_cast<Index>(i)], ds[i].y);
        CHECK(rho(ds, g) <= lg / n);
    }
}

TEST_CASE("activation hamming extremes") {
    const DistributionParams p = support::params(10, 0.5, 0.3, 0.3, 2);
    const Dataset ds = support::dataset(p, 300, 3);
    std::vector<Example> both;
    for (const Example& ex : ds.examples())
        if (ex.kind == ExampleKind::Both) both.push_back(ex);
    REQUIRE(both.size() > 10);
    const Network net = support::random_net(32, 10, 0.3, 4);
    CHECK(activation_hamming(net, net.weights, net.weights, both) == 0.0);
    CHECK(activation_hamming(net, net.weights, -1.0 * net.weights, both) == 1.0);
    const double h = activation_hamming(net, net.weights, support::random_net(32, 10, 0.3, 5).weights, ds.examples());
    CHECK(h >= 0.0);
    CHECK(h <= 1.0);
    CHECK_THROWS_AS(activation_hamming(net, net.weights, net.weights, std::span<const Example>()), PreconditionError);
}

TEST_CASE("subset losses") {
    const DistributionParams p = support::params(10, 0.5, 0.3, 0.3, 2);
    const Dataset ds = support::dataset(p, 200, 3);
    const Network net = support::random_net(16, 10, 0.5, 4);
    const SubsetLosses sl = subset_losses(net, ds);
    CHECK(std::abs(sl.loss_m1bar_g - batch_loss(net, ds, ds.m1_bar())) <= 1e-12);
    CHECK(std::abs(sl.loss_m2bar - batch_loss(net, ds, ds.m2_bar())) <= 1e-12);
    CHECK(std::abs(sl.loss_m2 - batch_loss(net, ds, ds.m2())) <= 1e-12);
    for (double v : {sl.loss_m1_r, sl.loss_m1bar_g, sl.loss_m2, sl.loss_m2bar}) CHECK(v >= 0.0);

    const Dataset no_q = without_kind(ds, ExampleKind::QOnly);
    REQUIRE(no_q.q_emp() == 0.0);
    CHECK(std::isnan(subset_losses(net, no_q).loss_m1bar_g));
}

TEST_CASE("margin ratio does not depend on alpha") {
    const DistributionParams p = support::params(10, 0.5, 0.3, 0.3, 2);
    const Network net = support::random_net(16, 10, 0.5, 4);
    for (QDirection dir : {QDirection::Minus, QDirection::Center, QDirection::Plus}) {
        std::vector<double> ratios;
        for (double a : {0.05, 0.3, 1.0}) {
            Example ex;
            ex.x1 = Vector::Zero(10);
            ex.x2 = q_vector(p, dir, a);
            ex.y = dir == QDirection::Center ? Label::Pos : Label::Neg;
            ex.kind = ExampleKind::QOnly;
            ex.q_direction = dir;
            ex.alpha = a;
            const std::vector<Example> one{ex};
            ratios.push_back(margin_profile(net, one, 2.0).median);
        }
        CHECK(ratios[1] == doctest::Approx(ratios[0]).epsilon(1e-12));
        CHECK(ratios[2] == doctest::Approx(ratios[0]).epsilon(1e-12));
    }
}

TEST_CASE("span residual vanishes for a linear P branch") {
    const int d = 6;
    const DistributionParams p = support::params(d, 0.5, 0.3, 0.3, 2);
    Rng rng(8);
    std::vector<Example> ex;
    for (int i = 0; i < d; ++i) {
        Example e;
        e.y = i % 2 ? Label::Pos : Label::Neg;
        e.x1 = sample_p(p, e.y, rng);
        e.x2 = Vector::Zero(d);
        e.kind = ExampleKind::POnly;
        e.q_direction = QDirection::None;
        ex.push_back(std::move(e));
    }
    const Dataset ds(std::move(ex));

    Network net = support::random_net(8, d, 1.0, 9);
    net.weights = Weights::zeros_like(net.weights);
    net.weights.w(1, 0) = 0.7;
    net.weights.w(1, 3) = -0.4;
    std::vector<Vector> probe;
    while (probe.size() < 10 * ds.m2_bar().size()) {
        Vector x = sample_p(p, Label::Pos, rng);
        if (net.weights.w.row(1).dot(x) < 0.0) x = -x;
        probe.push_back(x);
    }
    const SpanResidual sr = antisym_span_residual(net, ds, probe);
    CHECK(sr.residual_frac < 1e-10);
    CHECK_FALSE(sr.rank_deficient);
    const Vector alpha = 0.5 * net.u[1] * net.weights.w.row(1).transpose();
    CHECK((sr.alpha - alpha).norm() < 1e-8 * alpha.norm());
    CHECK(sr.alpha_norm == doctest::Approx(alpha.norm()).epsilon(1e-8));

    probe.resize(5);
    CHECK_THROWS_AS(antisym_span_residual(net, ds, probe), PreconditionError);
}

TEST_CASE("span probe size") {
    const DistributionParams p = support::params(10, 0.5, 0.3, 0.3, 2);
    const Dataset ds = support::dataset(p, 400, 3);
    Rng rng(1);
    const auto probe = span_probe(p, ds, rng);
    CHECK(probe.size() == std::max<std::size_t>(10 * ds.m2_bar().size(), 512));
}

TEST_CASE("evaluate agrees with subset accounting on the training set") {
    const DistributionParams p = support::params(10, 0.5, 0.3, 0.3, 2);
    const Dataset ds = support::dataset(p, 500, 3);
    const Network net = support::random_net(16, 10, 0.5, 4);
    const EvalResult ev = evaluate(net, ds);
    const SubsetLosses sl = subset_losses(net, ds);
    const double n = static_cast<double>(ds.size());
    const double mixed = (sl.loss_m2 * static_cast<double>(ds.m2().size()) +
                          sl.loss_m2bar * static_cast<double>(ds.m2_bar().size())) / n;
    CHECK(std::abs(ev.test_loss - mixed) <= 1e-12);
    CHECK(std::abs(ev.test_loss - batch_loss(net, ds)) <= 1e-12);

    int wrong_p = 0;
    for (int i : ds.m2_bar()) {
        const Example& ex = ds[static_cast<std::size_t>(i)];
        if (!(sign_of(ex.y) * forward(net, ex) > 0.0)) ++wrong_p;
    }
    CHECK(std::abs(ev.test_err_p_only - wrong_p / static_cast<double>(ds.m2_bar().size())) <= 1e-12);
    for (double e : {ev.test_err, ev.test_err_p_only, ev.test_err_q_only, ev.test_err_both}) {
        CHECK(e >= 0.0);
        CHECK(e <= 1.0);
    }
}

TEST_CASE("metrics record column order") {
    const auto& cols = MetricsRecord::columns();
    const std::vector<std::string_view> expect = {
        "t", "lr", "train_loss", "reg_loss", "loss_m1_r", "loss_m1bar_g", "loss_m2bar", "rho", "almost_lin",
        "u_bar_fro", "w_bar_fro", "v_bar_fro", "hamming_frac", "test_err", "test_loss", "test_err_p_only",
        "test_err_q_only", "test_err_both", "span_residual", "alpha_norm"};
    REQUIRE(cols.size() == expect.size());
    for (std::size_t i = 0; i < cols.size(); ++i) CHECK(cols[i] == expect[i]);

    MetricsRecord r;
    r.t = 42;
    r.rho = 0.25;
    r.alpha_norm = 3.5;
    const MetricsRecord back = MetricsRecord::from_values(r.values());
    CHECK(back.t == 42);
    CHECK(back.rho == 0.25);
    CHECK(back.alpha_norm == 3.5);
}

TEST_CASE("metrics context fills every column") {
    const DistributionParams p = support::params(10, 0.5, 0.3, 0.3, 2);
    const Dataset train = support::dataset(p, 100, 3);
    const Dataset test = support::dataset(p, 200, 4);
    TrainerConfig cfg;
    cfg.m = 16;
    cfg.eta1 = 0.5;
    cfg.eta2 = 0.05;
    cfg.lambda = 1e-3;
    cfg.tau0 = 0.1;
    cfg.epsilon1 = 0.05;
    cfg.epsilon2_prime = 0.3;
    cfg.max_iters = 40;
    cfg.eval_every = 20;
    cfg.seed = 1;
    cfg.algorithm = Algorithm::LargeThenAnneal;
    MetricsContext ctx(p, train, test, 1, cfg.lambda, cfg.seed, 0);
    std::vector<MetricsRecord> rows;
    run(cfg, train, [&](const TrainerState& s, double lr, double loss, const BatchEvaluator& ev, bool final) {
        rows.push_back(ctx.record(s, lr, loss, ev, final));
    });
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].u_bar_fro == 0.0);
    CHECK(rows[0].hamming_frac == 0.0);
    CHECK(std::isnan(rows[0].span_residual));
    CHECK(std::isfinite(rows[2].span_residual));
    for (const MetricsRecord& r : rows) {
        CHECK(r.reg_loss >= r.train_loss);
        CHECK(r.hamming_frac >= 0.0);
        CHECK(r.hamming_frac <= 1.0);
        CHECK(std::isfinite(r.almost_lin));
        CHECK(std::isfinite(r.test_err));
    }
}
