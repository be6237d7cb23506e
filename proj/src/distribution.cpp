#include "lol/distribution.hpp"

#include <cmath>
#include <string>

namespace lol {

namespace {

Vector random_unit(int d, int support, Rng& rng) {
    Vector v = Vector::Zero(d);
    for (int i = d - support; i < d; ++i) v[i] = rng.normal();
    return v / v.norm();
}

bool is_zero(const Vector& v) { return v.size() == 0 || (v.array() == 0.0).all(); }

}  // namespace

int DistributionParams::implied_n() const {
    return static_cast<int>(std::lround(static_cast<double>(d) / (kappa * kappa)));
}

void DistributionParams::validate() const {
    if (d < 2) throw PreconditionError("d must be at least 2");
    if (!(kappa > 0.0 && kappa <= 1.0)) throw PreconditionError("kappa must lie in (0, 1]");
    if (!(p0 > 0.0 && p0 < 1.0)) throw PreconditionError("p0 must lie in (0, 1)");
    if (!(q0 > 0.0 && q0 < 1.0)) throw PreconditionError("q0 must lie in (0, 1)");
    if (p0 + q0 >= 1.0) throw PreconditionError("p0 + q0 must be < 1");
    if (!(r > 0.0)) throw PreconditionError("r must be positive");
    if (r >= 1.0) throw PreconditionError("r must be < 1 (zeta must be small relative to z)");
    if (!(gamma0 > 0.0)) throw PreconditionError("gamma0 must be positive");
    if (q_support < 2 || q_support > d) throw PreconditionError("q_support must lie in [2, d]");
}

DistributionParams make_params(int d, double kappa, double q0, const ParamOverrides& overrides,
                               std::uint64_t seed) {
    if (d < 2) throw PreconditionError("d must be at least 2");
    DistributionParams p;
    p.d = d;
    p.kappa = kappa;
    p.p0 = overrides.p0.value_or(kappa * kappa / 2.0);
    p.q0 = overrides.q0.value_or(q0);
    p.r = overrides.r.value_or(std::pow(static_cast<double>(d), -0.75));
    p.gamma0 = overrides.gamma0.value_or(1.0 / std::sqrt(static_cast<double>(d)));
    p.q_support = overrides.q_support.value_or(d);
    p.validate();

    Rng rng(split_seed(seed, stream::directions));
    p.w_star = random_unit(d, d, rng);
    p.z = random_unit(d, p.q_support, rng);
    // zeta = r * unit(g - <g, z> z), re-orthogonalized once more against z.
    Vector g = random_unit(d, p.q_support, rng);
    g -= g.dot(p.z) * p.z;
    g -= g.dot(p.z) * p.z;
    p.zeta = p.r * (g / g.norm());
    return p;
}

const char* to_string(ExampleKind k) {
    switch (k) {
        case ExampleKind::POnly: return "POnly";
        case ExampleKind::QOnly: return "QOnly";
        case ExampleKind::Both: return "Both";
    }
    return "?";
}

const char* to_string(QDirection q) {
    switch (q) {
        case QDirection::Minus: return "Minus";
        case QDirection::Center: return "Center";
        case QDirection::Plus: return "Plus";
        case QDirection::None: return "None";
    }
    return "?";
}

ExampleKind kind_from_string(const std::string& s) {
    if (s == "POnly") return ExampleKind::POnly;
    if (s == "QOnly") return ExampleKind::QOnly;
    if (s == "Both") return ExampleKind::Both;
    throw std::invalid_argument("unknown example kind: " + s);
}

QDirection qdir_from_string(const std::string& s) {
    if (s == "Minus") return QDirection::Minus;
    if (s == "Center") return QDirection::Center;
    if (s == "Plus") return QDirection::Plus;
    if (s == "None") return QDirection::None;
    throw std::invalid_argument("unknown q_direction: " + s);
}

Vector Example::concat() const {
    Vector x(x1.size() + x2.size());
    x << x1, x2;
    return x;
}

Vector sample_p(const DistributionParams& params, Label y, Rng& rng) {
    const int d = params.d;
    const double ys = sign_of(y);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    Vector noise(d);
    for (int i = 0; i < d; ++i) noise[i] = rng.normal(scale);
    // Reflect the w* component onto the label's half-space.
    const double proj = params.w_star.dot(noise);
    if (ys * proj < 0.0) noise -= (2.0 * proj) * params.w_star;
    Vector x1 = (ys * params.gamma0) * params.w_star + noise;
    // Rounding can leave the margin a few ulps short; push it back out.
    for (int attempt = 0; attempt < 8; ++attempt) {
        const double margin = ys * params.w_star.dot(x1);
        if (margin >= params.gamma0) break;
        x1 += ys * (params.gamma0 - margin + 4.0 * std::numeric_limits<double>::epsilon()) *
              params.w_star;
    }
    return x1;
}

Vector q_vector(const DistributionParams& params, QDirection dir, double alpha) {
    switch (dir) {
        case QDirection::Center: return alpha * params.z;
        case QDirection::Plus: return alpha * (params.z + params.zeta);
        case QDirection::Minus: return alpha * (params.z - params.zeta);
        case QDirection::None: return Vector::Zero(params.d);
    }
    return Vector::Zero(params.d);
}

QSample sample_q(const DistributionParams& params, Label y, Rng& rng) {
    // uniform_pos never returns 0, so x2 = 0 only arises from the P-only branch.
    const double alpha = rng.uniform_pos();
    QDirection dir = QDirection::Center;
    if (y == Label::Neg) dir = rng.coin() ? QDirection::Plus : QDirection::Minus;
    return {q_vector(params, dir, alpha), dir, alpha};
}

Dataset::Dataset(std::vector<Example> examples) : examples_(std::move(examples)) {
    for (int i = 0; i < static_cast<int>(examples_.size()); ++i) {
        (is_zero(examples_[i].x1) ? m1_bar_ : m1_).push_back(i);
        (is_zero(examples_[i].x2) ? m2_bar_ : m2_).push_back(i);
    }
    if (!examples_.empty()) {
        const double n = static_cast<double>(examples_.size());
        p_emp_ = static_cast<double>(m2_bar_.size()) / n;
        q_emp_ = static_cast<double>(m1_bar_.size()) / n;
    }
}

Dataset generate_dataset(const DistributionParams& params, int n, Rng& rng) {
    if (n < 1) throw PreconditionError("dataset size must be >= 1");
    std::vector<Example> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        Example ex;
        ex.y = rng.coin() ? Label::Pos : Label::Neg;
        const double u = rng.uniform();
        if (u < params.p0) {
            ex.kind = ExampleKind::POnly;
        } else if (u < params.p0 + params.q0) {
            ex.kind = ExampleKind::QOnly;
        } else {
            ex.kind = ExampleKind::Both;
        }
        if (ex.kind != ExampleKind::QOnly) {
            ex.x1 = sample_p(params, ex.y, rng);
        } else {
            ex.x1 = Vector::Zero(params.d);
        }
        if (ex.kind != ExampleKind::POnly) {
            QSample q = sample_q(params, ex.y, rng);
            ex.x2 = std::move(q.x2);
            ex.q_direction = q.direction;
            ex.alpha = q.alpha;
        } else {
            ex.x2 = Vector::Zero(params.d);
        }
        out.push_back(std::move(ex));
    }
    return Dataset(std::move(out));
}

namespace {

nlohmann::json vec_to_json(const Vector& v) {
    return nlohmann::json(std::vector<double>(v.data(), v.data() + v.size()));
}

Vector vec_from_json(const nlohmann::json& j) {
    const auto values = j.get<std::vector<double>>();
    return Eigen::Map<const Vector>(values.data(), static_cast<Index>(values.size()));
}

}  // namespace

nlohmann::json params_to_json(const DistributionParams& p) {
    return {{"d", p.d},
            {"kappa", p.kappa},
            {"p0", p.p0},
            {"q0", p.q0},
            {"gamma0", p.gamma0},
            {"r", p.r},
            {"q_support", p.q_support},
            {"w_star", vec_to_json(p.w_star)},
            {"z", vec_to_json(p.z)},
            {"zeta", vec_to_json(p.zeta)}};
}

DistributionParams params_from_json(const nlohmann::json& j) {
    DistributionParams p;
    p.d = j.at("d").get<int>();
    p.kappa = j.at("kappa").get<double>();
    p.p0 = j.at("p0").get<double>();
    p.q0 = j.at("q0").get<double>();
    p.gamma0 = j.at("gamma0").get<double>();
    p.r = j.at("r").get<double>();
    p.q_support = j.value("q_support", p.d);
    p.w_star = vec_from_json(j.at("w_star"));
    p.z = vec_from_json(j.at("z"));
    p.zeta = vec_from_json(j.at("zeta"));
    p.validate();
    if (p.w_star.size() != p.d || p.z.size() != p.d || p.zeta.size() != p.d)
        throw std::invalid_argument("params: direction vectors must have length d");
    return p;
}

nlohmann::json dataset_to_json(const DistributionParams& params, const Dataset& ds) {
    nlohmann::json examples = nlohmann::json::array();
    for (const Example& ex : ds.examples()) {
        examples.push_back({{"x1", vec_to_json(ex.x1)},
                            {"x2", vec_to_json(ex.x2)},
                            {"y", static_cast<int>(ex.y)},
                            {"kind", to_string(ex.kind)},
                            {"q_direction", to_string(ex.q_direction)},
                            {"alpha", ex.alpha}});
    }
    return {{"params", params_to_json(params)}, {"examples", std::move(examples)}};
}

std::pair<DistributionParams, Dataset> dataset_from_json(const nlohmann::json& j) {
    DistributionParams params = params_from_json(j.at("params"));
    std::vector<Example> examples;
    for (const auto& e : j.at("examples")) {
        Example ex;
        ex.x1 = vec_from_json(e.at("x1"));
        ex.x2 = vec_from_json(e.at("x2"));
        if (ex.x1.size() != params.d || ex.x2.size() != params.d)
            throw std::invalid_argument("example blocks must have length d");
        ex.y = label_from_int(e.at("y").get<int>());
        ex.kind = kind_from_string(e.at("kind").get<std::string>());
        ex.q_direction = qdir_from_string(e.at("q_direction").get<std::string>());
        ex.alpha = e.at("alpha").get<double>();
        examples.push_back(std::move(ex));
    }
    return {std::move(params), Dataset(std::move(examples))};
}

}  // namespace lol
