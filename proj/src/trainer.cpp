#include "lol/trainer.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace lol {

const char* to_string(Algorithm a) {
    switch (a) {
        case Algorithm::LargeThenAnneal: return "LargeThenAnneal";
        case Algorithm::SmallConstant: return "SmallConstant";
        case Algorithm::MitigationNoise: return "MitigationNoise";
    }
    return "?";
}

const char* to_string(ModelKind m) {
    switch (m) {
        case ModelKind::BlockDense: return "BlockDense";
        case ModelKind::Conv: return "Conv";
    }
    return "?";
}

const char* to_string(Phase p) {
    switch (p) {
        case Phase::LargeLR: return "LargeLR";
        case Phase::Annealed: return "Annealed";
        case Phase::Done: return "Done";
    }
    return "?";
}

const char* to_string(RunStatus s) {
    switch (s) {
        case RunStatus::Converged: return "converged";
        case RunStatus::Capped: return "capped";
        case RunStatus::Aborted: return "aborted";
        case RunStatus::Paused: return "paused";
    }
    return "?";
}

Algorithm algorithm_from_string(const std::string& s) {
    if (s == "LargeThenAnneal") return Algorithm::LargeThenAnneal;
    if (s == "SmallConstant") return Algorithm::SmallConstant;
    if (s == "MitigationNoise") return Algorithm::MitigationNoise;
    throw std::invalid_argument("unknown algorithm '" + s +
                                "' (expected LargeThenAnneal, SmallConstant or MitigationNoise)");
}

ModelKind model_from_string(const std::string& s) {
    if (s == "BlockDense") return ModelKind::BlockDense;
    if (s == "Conv") return ModelKind::Conv;
    throw std::invalid_argument("unknown model '" + s + "' (expected BlockDense or Conv)");
}

Phase phase_from_string(const std::string& s) {
    if (s == "LargeLR") return Phase::LargeLR;
    if (s == "Annealed") return Phase::Annealed;
    if (s == "Done") return Phase::Done;
    throw std::invalid_argument("unknown phase '" + s + "'");
}

double solve_noise_std(double tau0, double eta1, double lambda) {
    const double a = eta1 * lambda;
    if (!(a > 0.0 && a < 1.0)) throw PreconditionError("solve_noise_std: need 0 < eta1 * lambda < 1");
    // 1 - (1 - a)^2 = a (2 - a), written without cancellation for small a.
    return tau0 * std::sqrt(a * (2.0 - a)) / eta1;
}

double TrainerConfig::noise_std() const { return tau_xi ? *tau_xi : solve_noise_std(tau0, eta1, lambda); }

void TrainerConfig::validate() const {
    if (m < 2 || m % 2 != 0) throw PreconditionError("m must be even and >= 2");
    if (!(eta1 > 0.0) || !(eta2 > 0.0)) throw PreconditionError("learning rates must be positive");
    if (!(eta2 < eta1)) throw PreconditionError("eta2 must be smaller than eta1");
    if (!(lambda > 0.0)) throw PreconditionError("lambda must be positive");
    if (!(lambda * eta1 < 1.0)) throw PreconditionError("lambda * eta1 must be < 1");
    if (!(tau0 > 0.0)) throw PreconditionError("tau0 must be positive");
    if (tau_xi && !(*tau_xi >= 0.0)) throw PreconditionError("tau_xi must be non-negative");
    if (!(epsilon1 > 0.0)) throw PreconditionError("epsilon1 must be positive");
    if (epsilon2 && !(*epsilon2 > 0.0)) throw PreconditionError("epsilon2 must be positive");
    if (!(epsilon2_prime > 0.0)) throw PreconditionError("epsilon2_prime must be positive");
    if (max_iters < 0) throw PreconditionError("max_iters must be non-negative");
    if (eval_every < 1) throw PreconditionError("eval_every must be positive");
    if (span_every < 0) throw PreconditionError("span_every must be non-negative");
    if (!(mitigation.tau_act_init >= 0.0) || !(mitigation.tau_act_final >= 0.0))
        throw PreconditionError("activation noise levels must be non-negative");
    if (model == ModelKind::Conv && k < 1) throw PreconditionError("conv model needs k >= 1");
}

TrainerState init_state(const TrainerConfig& cfg, int d) {
    TrainerState st;
    Rng init_rng(split_seed(cfg.seed, stream::init));
    st.net = init_network(cfg.m, d, cfg.tau0, init_rng, cfg.patches());
    st.u_bar = Weights::zeros_like(st.net.weights);
    st.u_tilde = st.net.weights;
    st.grad_rng = Rng(split_seed(cfg.seed, stream::grad_noise));
    st.act_rng = Rng(split_seed(cfg.seed, stream::act_noise));
    st.phase = cfg.algorithm == Algorithm::SmallConstant ? Phase::Annealed : Phase::LargeLR;
    st.tau_act = cfg.algorithm == Algorithm::MitigationNoise ? cfg.mitigation.tau_act_init : 0.0;
    return st;
}

void apply_update(TrainerState& st, const Weights& grad, double gamma, double lambda, double tau_xi) {
    if (!(gamma > 0.0)) throw PreconditionError("step size must be positive");
    Weights xi = Weights::zeros_like(st.net.weights);
    if (tau_xi > 0.0) {
        for (Index i = 0; i < xi.w.size(); ++i) xi.w.data()[i] = st.grad_rng.normal(tau_xi);
        for (Index i = 0; i < xi.v.size(); ++i) xi.v.data()[i] = st.grad_rng.normal(tau_xi);
    }
    const double decay = 1.0 - gamma * lambda;
    st.net.weights.w = decay * st.net.weights.w - gamma * (grad.w + xi.w);
    st.net.weights.v = decay * st.net.weights.v - gamma * (grad.v + xi.v);
    st.u_bar.w = decay * st.u_bar.w - gamma * grad.w;
    st.u_bar.v = decay * st.u_bar.v - gamma * grad.v;
    st.u_tilde.w = decay * st.u_tilde.w - gamma * xi.w;
    st.u_tilde.v = decay * st.u_tilde.v - gamma * xi.v;
    st.lr_time += gamma;
    ++st.t;
}

void step(TrainerState& st, const TrainerConfig& cfg, const Dataset& ds, double gamma) {
    const CompiledBatch batch = compile_batch(ds, st.net.k);
    BatchEvaluator eval(batch);
    eval.forward(st.net);
    const Weights grad = eval.backward(st.net, loss_coefficients(batch, eval.f()));
    if (!grad.all_finite()) throw std::runtime_error("non-finite gradient");
    apply_update(st, grad, gamma, cfg.lambda, cfg.noise_std());
}

namespace {

constexpr double kDriftTolerance = 1e-9;

double subset_mean_loss(const std::vector<int>& idx, const Vector& out, const CompiledBatch& batch) {
    if (idx.empty()) return std::numeric_limits<double>::quiet_NaN();
    double s = 0.0;
    for (int i : idx)
        s += logistic_loss(out[i], batch.y[static_cast<std::size_t>(i)] > 0 ? Label::Pos : Label::Neg);
    return s / static_cast<double>(idx.size());
}

// max_e sum_p ||patch p of block b of example e||: bounds every gradient row
// of branch b by this value over sqrt(m).
double branch_input_bound(const Dataset& ds, int k, int b) {
    double best = 0.0;
    for (const Example& ex : ds.examples()) {
        const Vector& x = b == 0 ? ex.x1 : ex.x2;
        const Index width = x.size() / k;
        double s = 0.0;
        for (int p = 0; p < k; ++p) s += x.segment(p * width, width).norm();
        best = std::max(best, s);
    }
    return best;
}

double max_row_norm(const Matrix& a) { return a.rows() ? a.rowwise().norm().maxCoeff() : 0.0; }

bool mitigation_rule_fires(const MitigationConfig& mc, long t, double loss) {
    if (mc.anneal_iteration && t >= *mc.anneal_iteration) return true;
    if (mc.anneal_loss && loss <= *mc.anneal_loss) return true;
    return false;
}

}  // namespace

RunResult run(const TrainerConfig& cfg, const Dataset& ds, const MetricsHook& hook,
              std::optional<TrainerState> resume, std::optional<long> pause_at) {
    cfg.validate();
    if (ds.empty()) throw PreconditionError("training set is empty");
    const int d = static_cast<int>(ds[0].x1.size());
    const double tau_xi = cfg.noise_std();
    const double q = ds.q_emp();

    RunResult res;
    res.state = resume ? std::move(*resume) : init_state(cfg, d);
    TrainerState& st = res.state;
    if (st.net.d != d || st.net.m != cfg.m || st.net.k != cfg.patches())
        throw PreconditionError("resumed state does not match the configuration");

    res.anneal_threshold = cfg.epsilon1 + q * std::log(2.0);
    if (cfg.algorithm == Algorithm::LargeThenAnneal)
        res.stop_loss = cfg.epsilon2.value_or(q > 0.0 ? std::sqrt(cfg.epsilon1 / q)
                                                      : std::numeric_limits<double>::infinity());
    else
        res.stop_loss = cfg.epsilon2_prime;

    const CompiledBatch batch = compile_batch(ds, cfg.patches());
    BatchEvaluator eval(batch);
    const double bound_w = branch_input_bound(ds, cfg.patches(), 0);
    const double bound_v = branch_input_bound(ds, cfg.patches(), 1);
    const double sqrt_m = std::sqrt(static_cast<double>(cfg.m));
    Vector act_noise(cfg.m);

    auto abort = [&](std::string why) {
        res.status = RunStatus::Aborted;
        res.abort_reason = std::move(why) + " at t=" + std::to_string(st.t);
        return res;
    };

    while (true) {
        if (pause_at && st.t >= *pause_at) {
            res.status = RunStatus::Paused;
            return res;
        }
        eval.forward(st.net);
        const Vector f = eval.f();
        const double loss = mean_logistic_loss(batch, f);
        if (!std::isfinite(loss)) return abort("non-finite training loss");

        if (!st.q_cross && subset_mean_loss(ds.m1_bar(), eval.g(), batch) < cfg.learned_threshold)
            st.q_cross = st.t;
        if (!st.p_cross && subset_mean_loss(ds.m2_bar(), f, batch) < cfg.learned_threshold) st.p_cross = st.t;

        bool stop = false;
        switch (cfg.algorithm) {
            case Algorithm::LargeThenAnneal:
                if (st.phase == Phase::LargeLR && loss <= res.anneal_threshold) {
                    st.phase = Phase::Annealed;
                    st.t0 = st.t;
                }
                stop = st.phase == Phase::Annealed && loss <= res.stop_loss;
                break;
            case Algorithm::SmallConstant:
                stop = loss <= res.stop_loss;
                break;
            case Algorithm::MitigationNoise:
                if (st.phase == Phase::LargeLR && mitigation_rule_fires(cfg.mitigation, st.t, loss)) {
                    st.phase = Phase::Annealed;
                    st.t0 = st.t;
                    st.tau_act = cfg.mitigation.tau_act_final;
                }
                stop = loss <= res.stop_loss && (st.phase == Phase::Annealed || st.tau_act == 0.0);
                break;
        }
        const bool capped = !stop && st.t >= cfg.max_iters;
        const double lr =
            cfg.algorithm == Algorithm::LargeThenAnneal && st.phase == Phase::LargeLR ? cfg.eta1 : cfg.eta2;

        if (st.t % cfg.eval_every == 0 || stop || capped) {
            const double drift = (st.net.weights - (st.u_bar + st.u_tilde)).max_abs();
            if (!(drift < kDriftTolerance)) return abort("decomposition drift " + std::to_string(drift));
            const double cap = std::min(1.0 / (sqrt_m * cfg.lambda), st.lr_time / sqrt_m) * (1.0 + 1e-9);
            if (max_row_norm(st.u_bar.w) > bound_w * cap || max_row_norm(st.u_bar.v) > bound_v * cap)
                return abort("signal row-norm bound violated");
            if (stop) st.phase = Phase::Done;
            if (hook) hook(st, lr, loss, eval, stop || capped);
        }
        if (stop) {
            st.phase = Phase::Done;
            res.status = RunStatus::Converged;
            return res;
        }
        if (capped) {
            res.status = RunStatus::Capped;
            return res;
        }

        if (st.tau_act > 0.0) {
            for (Index i = 0; i < act_noise.size(); ++i) act_noise[i] = st.act_rng.normal(st.tau_act);
            eval.apply_activation_noise(st.net, act_noise);
        }
        const Weights grad = eval.backward(st.net, loss_coefficients(batch, eval.active_f()));
        if (!grad.all_finite()) return abort("non-finite gradient");
        apply_update(st, grad, lr, cfg.lambda, tau_xi);
        if (!st.net.weights.all_finite()) return abort("non-finite weights");
    }
}

RunResult run_ls(const TrainerConfig& cfg, const Dataset& ds, const MetricsHook& hook) {
    if (cfg.algorithm != Algorithm::LargeThenAnneal) throw PreconditionError("run_ls needs LargeThenAnneal");
    return run(cfg, ds, hook);
}

RunResult run_s(const TrainerConfig& cfg, const Dataset& ds, const MetricsHook& hook) {
    if (cfg.algorithm != Algorithm::SmallConstant) throw PreconditionError("run_s needs SmallConstant");
    return run(cfg, ds, hook);
}

RunResult run_mitigation(const TrainerConfig& cfg, const Dataset& ds, const MetricsHook& hook) {
    if (cfg.algorithm != Algorithm::MitigationNoise)
        throw PreconditionError("run_mitigation needs MitigationNoise");
    return run(cfg, ds, hook);
}

namespace {

nlohmann::json optional_long(const std::optional<long>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

std::optional<long> long_from(const nlohmann::json& j) {
    if (j.is_null()) return std::nullopt;
    return j.get<long>();
}

}  // namespace

nlohmann::json checkpoint_to_json(const TrainerState& st) {
    nlohmann::json j = network_to_json(st.net);
    j["t"] = st.t;
    j["phase"] = to_string(st.phase);
    j["t0"] = optional_long(st.t0);
    j["U_bar"] = weights_to_json(st.net, st.u_bar);
    j["U_tilde"] = weights_to_json(st.net, st.u_tilde);
    j["rng_state"] = {{"grad_noise", st.grad_rng.state_hex()}, {"act_noise", st.act_rng.state_hex()}};
    j["tau_act"] = st.tau_act;
    j["lr_time"] = st.lr_time;
    j["q_cross"] = optional_long(st.q_cross);
    j["p_cross"] = optional_long(st.p_cross);
    return j;
}

TrainerState checkpoint_from_json(const nlohmann::json& j) {
    TrainerState st;
    st.net = network_from_json(j);
    st.t = j.at("t").get<long>();
    st.phase = phase_from_string(j.at("phase").get<std::string>());
    st.t0 = long_from(j.at("t0"));
    st.u_bar = weights_from_json(st.net, j.at("U_bar"));
    st.u_tilde = weights_from_json(st.net, j.at("U_tilde"));
    st.grad_rng.restore_hex(j.at("rng_state").at("grad_noise").get<std::string>());
    st.act_rng.restore_hex(j.at("rng_state").at("act_noise").get<std::string>());
    st.tau_act = j.at("tau_act").get<double>();
    st.lr_time = j.at("lr_time").get<double>();
    st.q_cross = long_from(j.at("q_cross"));
    st.p_cross = long_from(j.at("p_cross"));
    return st;
}

}  // namespace lol
