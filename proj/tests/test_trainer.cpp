#include "doctest.h"
#include "support.hpp"

#include "lol/trainer.hpp"

#include <cmath>
#include <vector>

using namespace lol;

namespace {

TrainerConfig small_cfg(Algorithm a) {
    TrainerConfig c;
    c.m = 32;
    c.eta1 = 0.5;
    c.eta2 = 0.05;
    c.lambda = 1e-3;
    c.tau0 = 0.05;
    c.epsilon1 = 0.05;
    c.epsilon2_prime = 0.3;
    c.max_iters = 300;
    c.eval_every = 10;
    c.algorithm = a;
    c.seed = 3;
    return c;
}

struct Fixture {
    DistributionParams params = support::params(12, 0.5, 0.3, 0.4, 2);
    Dataset train = support::dataset(params, 80, 4);
};

struct LogRow {
    long t;
    double lr;
    double loss;
    Phase phase;
    bool final;
    bool operator==(const LogRow&) const = default;
};

struct Log {
    std::vector<LogRow> rows;
    MetricsHook hook() {
        return [this](const TrainerState& s, double lr, double loss, const BatchEvaluator&, bool final) {
            rows.push_back({s.t, lr, loss, s.phase, final});
        };
    }
};

Dataset q_only(const DistributionParams& p, int n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Example> ex;
    for (int i = 0; i < n; ++i) {
        Example e;
        e.y = rng.coin() ? Label::Pos : Label::Neg;
        const QSample q = sample_q(p, e.y, rng);
        e.x1 = Vector::Zero(p.d);
        e.x2 = q.x2;
        e.kind = ExampleKind::QOnly;
        e.q_direction = q.direction;
        e.alpha = q.alpha;
        ex.push_back(std::move(e));
    }
    return Dataset(std::move(ex));
}

}  // namespace

TEST_CASE("solve_noise_std closed form") {
    const double tau = solve_noise_std(0.01, 0.1, 1e-3);
    CHECK(tau == doctest::Approx(1.41418e-3).epsilon(1e-5));
    const double a = 0.1 * 1e-3;
    const double resid = (1.0 - a) * (1.0 - a) * 1e-4 + 0.01 * tau * tau - 1e-4;
    CHECK(std::abs(resid) < 1e-15);
    CHECK(std::abs(resid) <= 1e-12 * 1e-4);

    const double eta1 = 0.5, lam = 2e-6;
    CHECK(solve_noise_std(0.05, eta1, lam) == doctest::Approx(0.05 * std::sqrt(2.0 * lam / eta1)).epsilon(0.01));

    CHECK_THROWS_AS(solve_noise_std(0.05, 1.0, 1.0), PreconditionError);
    CHECK_THROWS_AS(solve_noise_std(0.05, 2.0, 1.0), PreconditionError);
    CHECK_THROWS_AS(solve_noise_std(0.05, 1.0, 0.0), PreconditionError);
}

TEST_CASE("config validation") {
    TrainerConfig c = small_cfg(Algorithm::LargeThenAnneal);
    CHECK_NOTHROW(c.validate());
    c.eta2 = c.eta1;
    CHECK_THROWS_AS(c.validate(), PreconditionError);
    c = small_cfg(Algorithm::LargeThenAnneal);
    c.lambda = 1.0 / c.eta1;
    CHECK_THROWS_AS(c.validate(), PreconditionError);
    c = small_cfg(Algorithm::LargeThenAnneal);
    c.epsilon1 = 0.0;
    CHECK_THROWS_AS(c.validate(), PreconditionError);
}

TEST_CASE("noiseless unregularized step is gradient descent") {
    Network net;
    net.m = 2;
    net.d = 4;
    net.u = Vector::Constant(2, 1.0 / std::sqrt(2.0));
    net.weights.w = Matrix::Zero(1, 4);
    net.weights.v = Matrix::Zero(1, 4);
    net.weights.w(0, 0) = 0.3;
    Example ex;
    ex.x1 = Vector::Zero(4);
    ex.x1[0] = 1.0;
    ex.x2 = Vector::Zero(4);
    ex.y = Label::Pos;
    ex.kind = ExampleKind::POnly;
    ex.q_direction = QDirection::None;
    const Dataset ds({ex});

    TrainerConfig cfg = small_cfg(Algorithm::SmallConstant);
    cfg.lambda = 0.0;
    cfg.tau_xi = 0.0;
    TrainerState st;
    st.net = net;
    st.u_bar = Weights::zeros_like(net.weights);
    st.u_tilde = net.weights;
    double prev = batch_loss(st.net, ds);
    for (int i = 0; i < 200; ++i) {
        step(st, cfg, ds, 0.1);
        const double now = batch_loss(st.net, ds);
        CHECK(now <= prev);
        prev = now;
    }
    CHECK(st.t == 200);
    CHECK(prev < std::log(1.0 + std::exp(-0.3 / std::sqrt(2.0))));
}

TEST_CASE("noise component is stationary and the decomposition holds") {
    const DistributionParams p = support::params(40, 0.5, 0.3, 0.4, 2);
    const Dataset ds = support::dataset(p, 6, 4);
    TrainerConfig cfg = small_cfg(Algorithm::LargeThenAnneal);
    cfg.m = 512;
    cfg.lambda = 0.01;
    TrainerState st = init_state(cfg, p.d);
    for (int i = 0; i < 2000; ++i) step(st, cfg, ds, cfg.eta1);
    const double n = static_cast<double>(st.u_tilde.w.size() + st.u_tilde.v.size());
    const double var = st.u_tilde.squared_norm() / n;
    CHECK(var == doctest::Approx(cfg.tau0 * cfg.tau0).epsilon(0.05));
    CHECK((st.net.weights - (st.u_bar + st.u_tilde)).max_abs() < 1e-9);
}

TEST_CASE("all-Q dataset anneals on the initial iterate") {
    const Fixture f;
    const Dataset ds = q_only(f.params, 40, 5);
    REQUIRE(ds.q_emp() == 1.0);
    TrainerConfig cfg = small_cfg(Algorithm::LargeThenAnneal);
    cfg.max_iters = 20;
    const RunResult res = run_ls(cfg, ds);
    REQUIRE(res.state.t0.has_value());
    CHECK(*res.state.t0 == 0);
    CHECK(res.anneal_threshold == doctest::Approx(cfg.epsilon1 + std::log(2.0)));
}

TEST_CASE("phase I is entered from a near-zero start") {
    const Fixture f;
    TrainerConfig cfg = small_cfg(Algorithm::LargeThenAnneal);
    cfg.max_iters = 0;
    Log log;
    const RunResult res = run_ls(cfg, f.train, log.hook());
    REQUIRE(log.rows.size() == 1);
    CHECK(log.rows[0].loss == doctest::Approx(std::log(2.0)).epsilon(0.02));
    CHECK(res.state.phase == Phase::LargeLR);
    CHECK(res.status == RunStatus::Capped);
}

TEST_CASE("run_s stops immediately when the stop loss is above log 2") {
    const Fixture f;
    TrainerConfig cfg = small_cfg(Algorithm::SmallConstant);
    cfg.epsilon2_prime = std::log(2.0) + 1.0;
    Log log;
    const RunResult res = run_s(cfg, f.train, log.hook());
    CHECK(res.status == RunStatus::Converged);
    CHECK(res.state.t == 0);
    CHECK(res.state.phase == Phase::Done);
    REQUIRE(log.rows.size() == 1);
    CHECK(log.rows[0].final);
}

TEST_CASE("mitigation without activation noise is run_s") {
    const Fixture f;
    TrainerConfig s = small_cfg(Algorithm::SmallConstant);
    TrainerConfig mit = s;
    mit.algorithm = Algorithm::MitigationNoise;
    mit.mitigation.tau_act_init = 0.0;
    Log a, b;
    const RunResult ra = run_s(s, f.train, a.hook());
    const RunResult rb = run_mitigation(mit, f.train, b.hook());
    REQUIRE(a.rows.size() == b.rows.size());
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
        CHECK(a.rows[i].t == b.rows[i].t);
        CHECK(a.rows[i].lr == b.rows[i].lr);
        CHECK(a.rows[i].loss == b.rows[i].loss);
    }
    CHECK(ra.state.t == rb.state.t);
    CHECK(support::bitwise_equal(ra.state.net.weights, rb.state.net.weights));
}

TEST_CASE("noisy forward averages to a stable mean") {
    const Fixture f;
    const Network net = support::random_net(64, 12, 0.2, 9);
    const Example& ex = f.train[0];
    Rng rng(10);
    const double tau = 0.2;
    std::vector<double> means;
    double single_sq = 0.0, single_sum = 0.0;
    int singles = 0;
    for (int rep = 0; rep < 30; ++rep) {
        double s = 0.0;
        for (int i = 0; i < 1000; ++i) {
            Vector xi(64);
            for (int j = 0; j < 64; ++j) xi[j] = rng.normal(tau);
            const double v = reference::forward(net, net.weights, ex.x1, ex.x2, xi);
            s += v;
            single_sum += v;
            single_sq += v * v;
            ++singles;
        }
        means.push_back(s / 1000.0);
    }
    const double mu = single_sum / singles;
    const double sd_single = std::sqrt(single_sq / singles - mu * mu);
    double mm = 0.0, mv = 0.0;
    for (double m : means) mm += m;
    mm /= static_cast<double>(means.size());
    for (double m : means) mv += (m - mm) * (m - mm);
    const double sd_mean = std::sqrt(mv / static_cast<double>(means.size() - 1));
    CHECK(sd_mean < 0.05 * sd_single);
}

TEST_CASE("runs are deterministic and respect schedule invariants") {
    const Fixture f;
    for (Algorithm a : {Algorithm::LargeThenAnneal, Algorithm::SmallConstant, Algorithm::MitigationNoise}) {
        TrainerConfig cfg = small_cfg(a);
        cfg.epsilon2 = 0.2;
        cfg.mitigation.tau_act_init = 0.1;
        cfg.mitigation.anneal_iteration = 100;
        Log x, y;
        const RunResult r1 = run(cfg, f.train, x.hook());
        const RunResult r2 = run(cfg, f.train, y.hook());
        CHECK(x.rows == y.rows);
        CHECK(support::bitwise_equal(r1.state.net.weights, r2.state.net.weights));
        CHECK(r1.status != RunStatus::Aborted);

        int phase_changes = 0;
        for (std::size_t i = 1; i < x.rows.size(); ++i) {
            CHECK(x.rows[i].lr <= x.rows[i - 1].lr);
            CHECK(static_cast<int>(x.rows[i].phase) >= static_cast<int>(x.rows[i - 1].phase));
            if (x.rows[i].phase != x.rows[i - 1].phase && x.rows[i].phase == Phase::Annealed) ++phase_changes;
        }
        CHECK(phase_changes <= 1);
        CHECK((r1.state.net.weights - (r1.state.u_bar + r1.state.u_tilde)).max_abs() < 1e-9);
    }
}

TEST_CASE("checkpoint resume is bitwise identical") {
    const Fixture f;
    for (Algorithm a : {Algorithm::LargeThenAnneal, Algorithm::MitigationNoise}) {
        TrainerConfig cfg = small_cfg(a);
        cfg.max_iters = 200;
        cfg.mitigation.tau_act_init = 0.1;
        cfg.mitigation.anneal_iteration = 150;
        Log full;
        const RunResult whole = run(cfg, f.train, full.hook());

        Log first, second;
        const RunResult paused = run(cfg, f.train, first.hook(), std::nullopt, 77);
        REQUIRE(paused.status == RunStatus::Paused);
        CHECK(paused.state.t == 77);
        const std::string text = checkpoint_to_json(paused.state).dump();
        TrainerState restored = checkpoint_from_json(nlohmann::json::parse(text));
        CHECK(checkpoint_to_json(restored).dump() == text);
        const RunResult resumed = run(cfg, f.train, second.hook(), std::move(restored));

        std::vector<LogRow> joined = first.rows;
        joined.insert(joined.end(), second.rows.begin(), second.rows.end());
        CHECK(joined == full.rows);
        CHECK(resumed.state.t == whole.state.t);
        CHECK(resumed.state.t0 == whole.state.t0);
        CHECK(support::bitwise_equal(resumed.state.net.weights, whole.state.net.weights));
        CHECK(support::bitwise_equal(resumed.state.u_bar, whole.state.u_bar));
        CHECK(support::bitwise_equal(resumed.state.u_tilde, whole.state.u_tilde));
        CHECK(resumed.state.grad_rng == whole.state.grad_rng);
        CHECK(resumed.state.act_rng == whole.state.act_rng);
    }
}

TEST_CASE("conv model with one patch reproduces the dense model") {
    const Fixture f;
    TrainerConfig dense = small_cfg(Algorithm::LargeThenAnneal);
    TrainerConfig conv = dense;
    conv.model = ModelKind::Conv;
    conv.k = 1;
    Log a, b;
    const RunResult ra = run(dense, f.train, a.hook());
    const RunResult rb = run(conv, f.train, b.hook());
    CHECK(a.rows == b.rows);
    CHECK(support::bitwise_equal(ra.state.net.weights, rb.state.net.weights));
}

TEST_CASE("conv model trains with shared filters") {
    ParamOverrides ov;
    ov.r = 0.4;
    ov.q_support = 3;
    const DistributionParams p = make_params(12, 0.5, 0.3, ov, 2);
    const Dataset ds = support::dataset(p, 80, 4);
    TrainerConfig cfg = small_cfg(Algorithm::SmallConstant);
    cfg.model = ModelKind::Conv;
    cfg.k = 4;
    cfg.m = 32;
    const RunResult res = run_s(cfg, ds);
    CHECK(res.status != RunStatus::Aborted);
    CHECK(res.state.net.weights.w.rows() == 4);
    CHECK(res.state.net.weights.w.cols() == 3);
}

TEST_CASE("non-finite updates abort the run") {
    const Fixture f;
    TrainerConfig cfg = small_cfg(Algorithm::SmallConstant);
    cfg.tau_xi = 1e308;
    cfg.eta2 = 0.4;
    Log log;
    const RunResult res = run_s(cfg, f.train, log.hook());
    CHECK(res.status == RunStatus::Aborted);
    CHECK_FALSE(res.abort_reason.empty());
}

TEST_CASE("run entry points check the algorithm") {
    const Fixture f;
    CHECK_THROWS_AS(run_ls(small_cfg(Algorithm::SmallConstant), f.train), PreconditionError);
    CHECK_THROWS_AS(run_s(small_cfg(Algorithm::LargeThenAnneal), f.train), PreconditionError);
    CHECK_THROWS_AS(run_mitigation(small_cfg(Algorithm::SmallConstant), f.train), PreconditionError);
}
