#pragma once

#include "lol/rng.hpp"
#include "lol/types.hpp"

#include "json.hpp"

#include <optional>
#include <vector>

namespace lol {

// Generative constants of the two-pattern distribution. x = (x1, x2) with
// x1 (the linearly separable, noisy P pattern) and x2 (the memorizable,
// three-direction Q pattern) each in R^d.
struct DistributionParams {
    int d = 0;
    double kappa = 0.0;
    double p0 = 0.0;
    double q0 = 0.0;
    double gamma0 = 0.0;
    double r = 0.0;
    // z and zeta are supported on the trailing `q_support` coordinates.
    int q_support = 0;
    Vector w_star;
    Vector z;
    Vector zeta;

    // Sample count implied by N/d = 1/kappa^2.
    int implied_n() const;
    void validate() const;
};

struct ParamOverrides {
    std::optional<double> p0;
    std::optional<double> q0;
    std::optional<double> r;
    std::optional<double> gamma0;
    std::optional<int> q_support;
};

// Defaults: p0 = kappa^2/2, r = d^{-3/4}, gamma0 = 1/sqrt(d).
DistributionParams make_params(int d, double kappa, double q0, const ParamOverrides& overrides,
                               std::uint64_t seed);

enum class ExampleKind { POnly, QOnly, Both };
enum class QDirection { Minus, Center, Plus, None };

const char* to_string(ExampleKind k);
const char* to_string(QDirection q);
ExampleKind kind_from_string(const std::string& s);
QDirection qdir_from_string(const std::string& s);

struct Example {
    Vector x1;
    Vector x2;
    Label y = Label::Pos;
    ExampleKind kind = ExampleKind::Both;
    QDirection q_direction = QDirection::None;
    double alpha = 0.0;

    Vector concat() const;
};

struct QSample {
    Vector x2;
    QDirection direction;
    double alpha;
};

Vector sample_p(const DistributionParams& params, Label y, Rng& rng);
QSample sample_q(const DistributionParams& params, Label y, Rng& rng);

// Builds x2 = alpha * (z + b * zeta) for a recorded direction.
Vector q_vector(const DistributionParams& params, QDirection dir, double alpha);

class Dataset {
public:
    Dataset() = default;
    explicit Dataset(std::vector<Example> examples);

    const std::vector<Example>& examples() const { return examples_; }
    const Example& operator[](std::size_t i) const { return examples_[i]; }
    std::size_t size() const { return examples_.size(); }
    bool empty() const { return examples_.empty(); }

    // M1 = {i : x1 != 0}; M2 = {i : x2 != 0}; bars are complements.
    const std::vector<int>& m1() const { return m1_; }
    const std::vector<int>& m1_bar() const { return m1_bar_; }
    const std::vector<int>& m2() const { return m2_; }
    const std::vector<int>& m2_bar() const { return m2_bar_; }
    // p = |M2bar| / N, q = |M1bar| / N.
    double p_emp() const { return p_emp_; }
    double q_emp() const { return q_emp_; }

private:
    std::vector<Example> examples_;
    std::vector<int> m1_, m1_bar_, m2_, m2_bar_;
    double p_emp_ = 0.0;
    double q_emp_ = 0.0;
};

Dataset generate_dataset(const DistributionParams& params, int n, Rng& rng);

nlohmann::json params_to_json(const DistributionParams& params);
DistributionParams params_from_json(const nlohmann::json& j);
nlohmann::json dataset_to_json(const DistributionParams& params, const Dataset& ds);
// Returns the params and dataset stored in a document written by dataset_to_json.
std::pair<DistributionParams, Dataset> dataset_from_json(const nlohmann::json& j);

}  // namespace lol
