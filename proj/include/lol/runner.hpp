#pragma once

#include "lol/diagnostics.hpp"
#include "lol/distribution.hpp"
#include "lol/trainer.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace lol {

enum class Profile { Theory, Desk };
const char* to_string(Profile p);

struct DistributionSpec {
    int d = 0;
    double kappa = 0.0;
    double q0 = 0.0;
    ParamOverrides overrides;
    int n_train = 0;
    int n_test = 0;
};

struct ExperimentConfig {
    Profile profile = Profile::Desk;
    DistributionSpec distribution;
    TrainerConfig trainer;
    std::vector<Algorithm> algorithms;
    // Set when `algorithms` was left null and follows trainer.algorithm.
    bool algorithms_follow_trainer = false;
    std::vector<std::uint64_t> seeds;
    std::string output_dir;
    bool write_checkpoint = false;

    // Fully resolved document (profile defaults filled in); parse_config of
    // its dump yields the same configuration.
    nlohmann::json to_json() const;
    std::string hash() const;
};

// Invalid configuration. `what()` is "<source>:<line>: <message>" when the
// offending value can be located.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Parses a config document. `overrides` are "dotted.path=value" strings
// applied before defaults are filled in; value text is read as JSON when
// possible and as a bare string otherwise.
ExperimentConfig parse_config(const std::string& text, const std::string& source,
                              const std::vector<std::string>& overrides = {});
ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

struct Datasets {
    DistributionParams params;
    Dataset train;
    Dataset test;
};

// Directions, training and test sets for one seed.
Datasets make_datasets(const DistributionSpec& spec, std::uint64_t seed);

struct JobResult {
    Algorithm algorithm = Algorithm::LargeThenAnneal;
    std::uint64_t seed = 0;
    RunStatus status = RunStatus::Capped;
    std::string abort_reason;
    std::optional<long> t0;
    std::optional<long> q_cross;
    std::optional<long> p_cross;
    double stop_loss = 0.0;
    double anneal_threshold = 0.0;
    std::vector<MetricsRecord> trace;
    double wall_time_s = 0.0;
    TrainerState state;
    nlohmann::json summary;
};

// Runs one (algorithm, seed) job.
JobResult run_job(const ExperimentConfig& cfg, Algorithm algorithm, std::uint64_t seed);

// Runs every seed x algorithm job on a pool of at most `threads` workers (0:
// LOL_THREADS or the hardware concurrency). Results are ordered by
// algorithm, then seed. Writes outputs under cfg.output_dir when asked.
std::vector<JobResult> run_experiment(const ExperimentConfig& cfg, bool write_outputs, int threads = 0);

// trace.csv text for a list of records (header plus one line per record).
std::string trace_csv(const std::vector<MetricsRecord>& trace);
// Shortest round-trip decimal; NaN as "nan".
std::string format_number(double v);

nlohmann::json record_to_json(const MetricsRecord& r);
MetricsRecord record_from_json(const nlohmann::json& j);

// CLI entry points; each returns the process exit code.
int cli_run(const std::filesystem::path& config, const std::vector<std::string>& overrides);
int cli_compare(const std::vector<std::filesystem::path>& dirs, const std::filesystem::path& out);
int cli_sweep(const std::filesystem::path& config, const std::string& axis, const std::vector<std::string>& values,
              const std::vector<std::string>& overrides);

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNaN = 3;

}  // namespace lol
