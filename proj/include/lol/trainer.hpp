#pragma once

#include "lol/distribution.hpp"
#include "lol/kernels.hpp"
#include "lol/network.hpp"
#include "lol/rng.hpp"
#include "lol/types.hpp"

#include "json.hpp"

#include <functional>
#include <optional>
#include <string>

namespace lol {

enum class Algorithm { LargeThenAnneal, SmallConstant, MitigationNoise };
enum class ModelKind { BlockDense, Conv };
enum class Phase { LargeLR, Annealed, Done };

const char* to_string(Algorithm a);
const char* to_string(ModelKind m);
const char* to_string(Phase p);
Algorithm algorithm_from_string(const std::string& s);
ModelKind model_from_string(const std::string& s);
Phase phase_from_string(const std::string& s);

// Pre-activation noise schedule of the mitigation algorithm: tau_act_init
// until the anneal rule fires, tau_act_final afterwards. The rule fires at
// `anneal_iteration` or when the training loss first reaches `anneal_loss`,
// whichever comes first; with neither set the noise never anneals.
struct MitigationConfig {
    double tau_act_init = 0.0;
    double tau_act_final = 0.0;
    std::optional<long> anneal_iteration;
    std::optional<double> anneal_loss;
};

struct TrainerConfig {
    int m = 0;
    double eta1 = 0.0;
    double eta2 = 0.0;
    double lambda = 0.0;
    double tau0 = 0.0;
    std::optional<double> tau_xi;  // default: solve_noise_std(tau0, eta1, lambda)
    double epsilon1 = 0.0;
    std::optional<double> epsilon2;  // default: sqrt(epsilon1 / q_emp)
    double epsilon2_prime = 0.0;
    long max_iters = 200000;
    int eval_every = 50;
    Algorithm algorithm = Algorithm::LargeThenAnneal;
    MitigationConfig mitigation;
    ModelKind model = ModelKind::BlockDense;
    int k = 1;
    std::uint64_t seed = 0;
    // Evaluate the span residual on every n-th metrics record (0: final only).
    int span_every = 0;
    // Loss below which a subset counts as learned (learning-order bookkeeping).
    double learned_threshold = 0.3;

    int patches() const { return model == ModelKind::Conv ? k : 1; }
    double noise_std() const;
    void validate() const;
};

// tau_xi solving (1 - eta1 lambda)^2 tau0^2 + eta1^2 tau_xi^2 = tau0^2.
double solve_noise_std(double tau0, double eta1, double lambda);

struct TrainerState {
    long t = 0;
    Network net;
    Weights u_bar;
    Weights u_tilde;
    Phase phase = Phase::LargeLR;
    std::optional<long> t0;
    Rng grad_rng;
    Rng act_rng;
    double tau_act = 0.0;
    double lr_time = 0.0;  // sum of learning rates applied so far
    std::optional<long> q_cross;  // first t with loss_m1bar_g below the learned threshold
    std::optional<long> p_cross;  // first t with loss_m2bar below the learned threshold
};

// Fresh state: network from the init stream, U_bar = 0, U_tilde = U_0.
TrainerState init_state(const TrainerConfig& cfg, int d);

// One update U <- (1 - gamma lambda) U - gamma (grad + xi) given the gradient,
// with the same recursion applied to U_bar (grad only) and U_tilde (xi only).
void apply_update(TrainerState& state, const Weights& grad, double gamma, double lambda, double tau_xi);

// Full-batch step: clean gradient at U_t plus in-block Gaussian noise.
void step(TrainerState& state, const TrainerConfig& cfg, const Dataset& ds, double gamma);

enum class RunStatus { Converged, Capped, Aborted, Paused };
const char* to_string(RunStatus s);

struct RunResult {
    TrainerState state;
    RunStatus status = RunStatus::Capped;
    std::string abort_reason;
    double stop_loss = 0.0;
    double anneal_threshold = 0.0;
};

// Called at t = 0, every eval_every steps and at the final iterate with the
// state, the current learning rate, the clean training loss and the
// evaluator holding the clean outputs at U_t.
using MetricsHook = std::function<void(const TrainerState&, double lr, double train_loss,
                                       const BatchEvaluator& eval, bool final)>;

RunResult run_ls(const TrainerConfig& cfg, const Dataset& ds, const MetricsHook& hook = {});
RunResult run_s(const TrainerConfig& cfg, const Dataset& ds, const MetricsHook& hook = {});
RunResult run_mitigation(const TrainerConfig& cfg, const Dataset& ds, const MetricsHook& hook = {});
// Dispatches on cfg.algorithm. Starts from `resume` when given and returns
// with status Paused (before evaluating iterate `pause_at`) when requested.
RunResult run(const TrainerConfig& cfg, const Dataset& ds, const MetricsHook& hook = {},
              std::optional<TrainerState> resume = std::nullopt, std::optional<long> pause_at = std::nullopt);

nlohmann::json checkpoint_to_json(const TrainerState& state);
TrainerState checkpoint_from_json(const nlohmann::json& j);

}  // namespace lol
