#include "lol/runner.hpp"

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace lol {

namespace fs = std::filesystem;
using nlohmann::json;

const char* to_string(Profile p) { return p == Profile::Theory ? "theory" : "desk"; }

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// ---------------------------------------------------------------------------
// Source locations for config values.

// Maps dotted paths ("trainer.eta1", "seeds[2]") to the line where the key or
// array element starts. Assumes the text already parsed as JSON.
class Locator {
public:
    explicit Locator(const std::string& text) : text_(text) {
        skip_ws();
        if (pos_ < text_.size()) value("");
    }

    std::optional<int> line_of(const std::string& path) const {
        auto it = lines_.find(path);
        if (it == lines_.end()) return std::nullopt;
        return it->second;
    }

private:
    void advance() {
        if (text_[pos_] == '\n') ++line_;
        ++pos_;
    }
    void skip_ws() {
        while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) advance();
    }
    std::string string() {
        std::string out;
        advance();  // opening quote
        while (pos_ < text_.size() && text_[pos_] != '"') {
            if (text_[pos_] == '\\') {
                advance();
                if (pos_ >= text_.size()) break;
            }
            out.push_back(text_[pos_]);
            advance();
        }
        if (pos_ < text_.size()) advance();
        return out;
    }
    void value(const std::string& path) {
        skip_ws();
        if (pos_ >= text_.size()) return;
        const char c = text_[pos_];
        if (c == '{') {
            advance();
            skip_ws();
            while (pos_ < text_.size() && text_[pos_] != '}') {
                const int line = line_;
                const std::string key = string();
                const std::string child = path.empty() ? key : path + "." + key;
                lines_.emplace(child, line);
                skip_ws();
                if (pos_ < text_.size() && text_[pos_] == ':') advance();
                value(child);
                skip_ws();
                if (pos_ < text_.size() && text_[pos_] == ',') advance();
                skip_ws();
            }
            if (pos_ < text_.size()) advance();
        } else if (c == '[') {
            advance();
            skip_ws();
            int index = 0;
            while (pos_ < text_.size() && text_[pos_] != ']') {
                const std::string child = path + "[" + std::to_string(index++) + "]";
                lines_.emplace(child, line_);
                value(child);
                skip_ws();
                if (pos_ < text_.size() && text_[pos_] == ',') advance();
                skip_ws();
            }
            if (pos_ < text_.size()) advance();
        } else if (c == '"') {
            string();
        } else {
            while (pos_ < text_.size() && text_[pos_] != ',' && text_[pos_] != '}' && text_[pos_] != ']' &&
                   !std::isspace(static_cast<unsigned char>(text_[pos_])))
                advance();
        }
    }

    const std::string& text_;
    std::size_t pos_ = 0;
    int line_ = 1;
    std::map<std::string, int> lines_;
};

std::vector<std::string> split_path(const std::string& path) {
    std::vector<std::string> parts;
    std::stringstream ss(path);
    std::string part;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    return parts;
}

// ---------------------------------------------------------------------------
// Profiles and schema.

json profile_defaults(Profile profile, int d) {
    const double dd = static_cast<double>(d);
    json dist = {{"d", d},
                 {"kappa", 0.25},
                 {"q0", 0.2},
                 {"p0", nullptr},
                 {"r", nullptr},
                 {"gamma0", nullptr},
                 {"q_support", nullptr},
                 {"n_train", nullptr},
                 {"n_test", 5000}};
    json mitigation = {{"tau_act_init", 0.0},
                       {"tau_act_final", 0.0},
                       {"anneal_iteration", nullptr},
                       {"anneal_loss", nullptr}};
    json trainer = {{"m", 4096},
                    {"eta1", 0.5},
                    {"eta2", 5e-3},
                    {"lambda", 1e-4},
                    {"tau0", 0.05},
                    {"tau_xi", nullptr},
                    {"epsilon1", 0.05},
                    {"epsilon2", nullptr},
                    {"epsilon2_prime", 0.5},
                    {"max_iters", 200000},
                    {"eval_every", 50},
                    {"algorithm", "LargeThenAnneal"},
                    {"model", "BlockDense"},
                    {"k", 1},
                    {"span_every", 0},
                    {"learned_threshold", 0.3},
                    {"mitigation", mitigation}};
    if (profile == Profile::Desk) {
        dist["q0"] = 0.6;
        dist["r"] = 0.4;
        dist["gamma0"] = 0.03;
        trainer["m"] = 256;
        trainer["eta1"] = 10.0;
        trainer["eta2"] = 0.1;
        trainer["lambda"] = 5e-5;
        trainer["epsilon1"] = 0.02;
        trainer["epsilon2"] = 0.18;
        trainer["epsilon2_prime"] = 0.18;
        trainer["max_iters"] = 40000;
        trainer["eval_every"] = 500;
        trainer["mitigation"]["tau_act_init"] = 0.05;
        trainer["mitigation"]["anneal_iteration"] = 20000;
    } else {
        trainer["lambda"] = std::pow(dd, -1.25);
        trainer["eta2"] = 0.5 / dd;
    }
    return {{"profile", to_string(profile)},
            {"output_dir", profile == Profile::Desk ? "runs/desk" : "runs/theory"},
            {"seeds", {1, 2, 3, 4, 5}},
            {"algorithms", nullptr},
            {"write_checkpoint", false},
            {"distribution", dist},
            {"trainer", trainer}};
}

// Adds default keys missing from `doc`; reports keys of `doc` unknown to the
// defaults through `unknown`.
void merge_defaults(json& doc, const json& defaults, const std::string& prefix, std::vector<std::string>& unknown) {
    for (auto it = doc.begin(); it != doc.end(); ++it) {
        const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (!defaults.contains(it.key())) {
            unknown.push_back(path);
            continue;
        }
        const json& def = defaults.at(it.key());
        if (def.is_object() && it->is_object()) merge_defaults(*it, def, path, unknown);
    }
    for (auto it = defaults.begin(); it != defaults.end(); ++it)
        if (!doc.contains(it.key())) doc[it.key()] = it.value();
}

// ---------------------------------------------------------------------------
// Decoding with located errors.

class Decoder {
public:
    Decoder(const json& doc, const Locator& loc, std::string source, std::map<std::string, std::string> set_paths)
        : doc_(doc), loc_(loc), source_(std::move(source)), set_paths_(std::move(set_paths)) {}

    [[noreturn]] void fail(const std::string& path, const std::string& msg) const {
        for (const auto& [p, expr] : set_paths_)
            if (path == p || path.rfind(p + ".", 0) == 0 || path.rfind(p + "[", 0) == 0)
                throw ConfigError("--set " + expr + ": " + path + ": " + msg);
        std::string where = source_;
        std::string probe = path;
        while (true) {
            if (auto line = loc_.line_of(probe)) {
                where += ":" + std::to_string(*line);
                break;
            }
            const auto cut = probe.find_last_of(".[");
            if (cut == std::string::npos) break;
            probe = probe.substr(0, cut);
        }
        throw ConfigError(where + ": " + path + ": " + msg);
    }

    const json& at(const std::string& path) const {
        const json* j = &doc_;
        for (const auto& part : split_path(path)) {
            const auto br = part.find('[');
            j = &j->at(part.substr(0, br));
            if (br != std::string::npos) j = &j->at(std::stoul(part.substr(br + 1)));
        }
        return *j;
    }
    bool is_null(const std::string& path) const { return at(path).is_null(); }

    double number(const std::string& path) const {
        const json& j = at(path);
        if (!j.is_number()) fail(path, "expected a number");
        return j.get<double>();
    }
    std::optional<double> opt_number(const std::string& path) const {
        if (is_null(path)) return std::nullopt;
        return number(path);
    }
    long integer(const std::string& path) const {
        const json& j = at(path);
        if (j.is_number_integer()) return j.get<long>();
        if (j.is_number_float()) {
            const double v = j.get<double>();
            if (std::floor(v) == v && std::abs(v) < 9e15) return static_cast<long>(v);
        }
        fail(path, "expected an integer");
    }
    std::optional<long> opt_integer(const std::string& path) const {
        if (is_null(path)) return std::nullopt;
        return integer(path);
    }
    std::string string(const std::string& path) const {
        const json& j = at(path);
        if (!j.is_string()) fail(path, "expected a string");
        return j.get<std::string>();
    }
    bool boolean(const std::string& path) const {
        const json& j = at(path);
        if (!j.is_boolean()) fail(path, "expected true or false");
        return j.get<bool>();
    }
    double positive(const std::string& path) const {
        const double v = number(path);
        if (!(v > 0.0)) fail(path, "must be positive");
        return v;
    }
    void require(bool ok, const std::string& path, const std::string& msg) const {
        if (!ok) fail(path, msg);
    }

private:
    const json& doc_;
    const Locator& loc_;
    std::string source_;
    std::map<std::string, std::string> set_paths_;
};

json parse_override_value(const std::string& text) {
    try {
        return json::parse(text);
    } catch (const json::parse_error&) {
        return text;
    }
}

void apply_override(json& doc, const std::string& expr) {
    const auto eq = expr.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set " + expr + ": expected path=value");
    const std::string path = expr.substr(0, eq);
    json* j = &doc;
    const auto parts = split_path(path);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!j->is_object()) throw ConfigError("--set " + expr + ": " + parts[i] + " is not an object");
        j = &(*j)[parts[i]];
        if (j->is_null()) *j = json::object();
    }
    if (!j->is_object()) throw ConfigError("--set " + expr + ": parent of the field is not an object");
    (*j)[parts.back()] = parse_override_value(expr.substr(eq + 1));
}

std::pair<int, int> line_col(const std::string& text, std::size_t byte) {
    int line = 1, col = 1;
    for (std::size_t i = 0; i < std::min(byte, text.size()); ++i) {
        if (text[i] == '\n') {
            ++line;
            col = 1;
        } else {
            ++col;
        }
    }
    return {line, col > 1 ? col - 1 : 1};
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(); }
json optional_json(const std::optional<long>& v) { return v ? json(*v) : json(); }
json optional_json(const std::optional<int>& v) { return v ? json(*v) : json(); }

}  // namespace

// ---------------------------------------------------------------------------

ExperimentConfig parse_config(const std::string& text, const std::string& source,
                              const std::vector<std::string>& overrides) {
    json user;
    try {
        user = json::parse(text);
    } catch (const json::parse_error& e) {
        const auto [line, col] = line_col(text, e.byte);
        throw ConfigError(source + ":" + std::to_string(line) + ":" + std::to_string(col) +
                          ": JSON syntax error: " + e.what());
    }
    if (!user.is_object()) throw ConfigError(source + ":1: top level must be an object");
    const Locator loc(text);

    std::map<std::string, std::string> set_paths;
    for (const auto& expr : overrides) {
        apply_override(user, expr);
        set_paths[expr.substr(0, expr.find('='))] = expr;
    }

    // Profile and d pick the defaults.
    Decoder pre(user, loc, source, set_paths);
    Profile profile = Profile::Desk;
    if (user.contains("profile")) {
        const std::string p = pre.string("profile");
        if (p == "desk" || p == "Desk")
            profile = Profile::Desk;
        else if (p == "theory" || p == "Theory")
            profile = Profile::Theory;
        else
            pre.fail("profile", "expected \"desk\" or \"theory\"");
    }
    int d = 100;
    if (user.contains("distribution") && user["distribution"].is_object() && user["distribution"].contains("d"))
        d = static_cast<int>(pre.integer("distribution.d"));

    json doc = user;
    std::vector<std::string> unknown;
    for (const char* section : {"distribution", "trainer"})
        if (doc.contains(section) && !doc[section].is_object())
            pre.fail(section, "expected an object");
    if (doc.contains("trainer") && doc["trainer"].contains("mitigation") && !doc["trainer"]["mitigation"].is_object())
        pre.fail("trainer.mitigation", "expected an object");
    merge_defaults(doc, profile_defaults(profile, d), "", unknown);
    if (!unknown.empty()) pre.fail(unknown.front(), "unknown field");
    doc["profile"] = to_string(profile);

    const Decoder dec(doc, loc, source, set_paths);
    ExperimentConfig cfg;
    cfg.profile = profile;
    cfg.output_dir = dec.string("output_dir");
    cfg.write_checkpoint = dec.boolean("write_checkpoint");

    const json& seeds = dec.at("seeds");
    if (!seeds.is_array() || seeds.empty()) dec.fail("seeds", "expected a nonempty array of integers");
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        const std::string p = "seeds[" + std::to_string(i) + "]";
        if (!seeds[i].is_number_integer() || seeds[i].get<long long>() < 0)
            dec.fail(p, "expected a non-negative integer");
        const auto s = seeds[i].get<std::uint64_t>();
        if (std::find(cfg.seeds.begin(), cfg.seeds.end(), s) != cfg.seeds.end()) dec.fail(p, "duplicate seed");
        cfg.seeds.push_back(s);
    }

    // distribution
    DistributionSpec& ds = cfg.distribution;
    ds.d = d;
    dec.require(d >= 2, "distribution.d", "must be at least 2");
    ds.kappa = dec.number("distribution.kappa");
    dec.require(ds.kappa > 0.0 && ds.kappa <= 1.0, "distribution.kappa", "must lie in (0, 1]");
    ds.q0 = dec.number("distribution.q0");
    dec.require(ds.q0 > 0.0 && ds.q0 < 1.0, "distribution.q0", "must lie in (0, 1)");
    ds.overrides.p0 = dec.opt_number("distribution.p0");
    if (ds.overrides.p0)
        dec.require(*ds.overrides.p0 > 0.0 && *ds.overrides.p0 < 1.0, "distribution.p0", "must lie in (0, 1)");
    const double p0 = ds.overrides.p0.value_or(ds.kappa * ds.kappa / 2.0);
    dec.require(p0 + ds.q0 < 1.0, ds.overrides.p0 ? "distribution.p0" : "distribution.q0", "p0 + q0 must be < 1");
    ds.overrides.r = dec.opt_number("distribution.r");
    if (ds.overrides.r) dec.require(*ds.overrides.r > 0.0 && *ds.overrides.r < 1.0, "distribution.r", "must lie in (0, 1)");
    ds.overrides.gamma0 = dec.opt_number("distribution.gamma0");
    if (ds.overrides.gamma0) dec.require(*ds.overrides.gamma0 > 0.0, "distribution.gamma0", "must be positive");
    if (auto qs = dec.opt_integer("distribution.q_support")) {
        dec.require(*qs >= 2 && *qs <= d, "distribution.q_support", "must lie in [2, d]");
        ds.overrides.q_support = static_cast<int>(*qs);
    }
    if (auto n = dec.opt_integer("distribution.n_train")) {
        dec.require(*n >= 1, "distribution.n_train", "must be positive");
        ds.n_train = static_cast<int>(*n);
    } else {
        ds.n_train = static_cast<int>(std::lround(d / (ds.kappa * ds.kappa)));
    }
    const long n_test = dec.integer("distribution.n_test");
    dec.require(n_test >= 1000, "distribution.n_test", "must be at least 1000");
    ds.n_test = static_cast<int>(n_test);

    // trainer
    TrainerConfig& tc = cfg.trainer;
    const long m = dec.integer("trainer.m");
    dec.require(m >= 2 && m % 2 == 0, "trainer.m", "must be even and at least 2");
    tc.m = static_cast<int>(m);
    tc.eta1 = dec.positive("trainer.eta1");
    tc.eta2 = dec.positive("trainer.eta2");
    dec.require(tc.eta2 < tc.eta1, "trainer.eta2", "must be smaller than eta1");
    tc.lambda = dec.positive("trainer.lambda");
    dec.require(tc.lambda * tc.eta1 < 1.0, "trainer.lambda", "lambda * eta1 must be < 1");
    tc.tau0 = dec.positive("trainer.tau0");
    tc.tau_xi = dec.opt_number("trainer.tau_xi");
    if (tc.tau_xi) dec.require(*tc.tau_xi >= 0.0, "trainer.tau_xi", "must be non-negative");
    tc.epsilon1 = dec.positive("trainer.epsilon1");
    tc.epsilon2 = dec.opt_number("trainer.epsilon2");
    if (tc.epsilon2) dec.require(*tc.epsilon2 > 0.0, "trainer.epsilon2", "must be positive");
    tc.epsilon2_prime = dec.positive("trainer.epsilon2_prime");
    tc.max_iters = dec.integer("trainer.max_iters");
    dec.require(tc.max_iters >= 0, "trainer.max_iters", "must be non-negative");
    const long every = dec.integer("trainer.eval_every");
    dec.require(every >= 1, "trainer.eval_every", "must be positive");
    tc.eval_every = static_cast<int>(every);
    try {
        tc.algorithm = algorithm_from_string(dec.string("trainer.algorithm"));
    } catch (const std::invalid_argument& e) {
        dec.fail("trainer.algorithm", e.what());
    }
    try {
        tc.model = model_from_string(dec.string("trainer.model"));
    } catch (const std::invalid_argument& e) {
        dec.fail("trainer.model", e.what());
    }
    tc.k = static_cast<int>(dec.integer("trainer.k"));
    dec.require(tc.k >= 1, "trainer.k", "must be positive");
    if (tc.model == ModelKind::BlockDense) dec.require(tc.k == 1, "trainer.k", "must be 1 for the BlockDense model");
    dec.require(d % tc.patches() == 0, "trainer.k", "must divide d");
    dec.require((tc.m / 2) % tc.patches() == 0, "trainer.k", "must divide m/2");
    const long span_every = dec.integer("trainer.span_every");
    dec.require(span_every >= 0, "trainer.span_every", "must be non-negative");
    tc.span_every = static_cast<int>(span_every);
    tc.learned_threshold = dec.positive("trainer.learned_threshold");
    tc.mitigation.tau_act_init = dec.number("trainer.mitigation.tau_act_init");
    dec.require(tc.mitigation.tau_act_init >= 0.0, "trainer.mitigation.tau_act_init", "must be non-negative");
    tc.mitigation.tau_act_final = dec.number("trainer.mitigation.tau_act_final");
    dec.require(tc.mitigation.tau_act_final >= 0.0, "trainer.mitigation.tau_act_final", "must be non-negative");
    tc.mitigation.anneal_iteration = dec.opt_integer("trainer.mitigation.anneal_iteration");
    tc.mitigation.anneal_loss = dec.opt_number("trainer.mitigation.anneal_loss");
    if (tc.model == ModelKind::Conv && !ds.overrides.q_support) ds.overrides.q_support = d / tc.k;

    const json& algos = dec.at("algorithms");
    if (algos.is_null()) {
        cfg.algorithms = {tc.algorithm};
        cfg.algorithms_follow_trainer = true;
    } else {
        if (!algos.is_array() || algos.empty()) dec.fail("algorithms", "expected a nonempty array of names");
        for (std::size_t i = 0; i < algos.size(); ++i) {
            const std::string p = "algorithms[" + std::to_string(i) + "]";
            try {
                const Algorithm a = algorithm_from_string(dec.string(p));
                if (std::find(cfg.algorithms.begin(), cfg.algorithms.end(), a) != cfg.algorithms.end())
                    dec.fail(p, "duplicate algorithm");
                cfg.algorithms.push_back(a);
            } catch (const std::invalid_argument& e) {
                dec.fail(p, e.what());
            }
        }
    }
    return cfg;
}

ExperimentConfig load_config(const fs::path& path, const std::vector<std::string>& overrides) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path.string() + ": cannot read config file");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), path.string(), overrides);
}

json ExperimentConfig::to_json() const {
    const DistributionSpec& ds = distribution;
    const TrainerConfig& tc = trainer;
    json algos = json::array();
    for (Algorithm a : algorithms) algos.push_back(lol::to_string(a));
    if (algorithms_follow_trainer) algos = nullptr;
    return {{"profile", lol::to_string(profile)},
            {"output_dir", output_dir},
            {"seeds", seeds},
            {"algorithms", algos},
            {"write_checkpoint", write_checkpoint},
            {"distribution",
             {{"d", ds.d},
              {"kappa", ds.kappa},
              {"q0", ds.q0},
              {"p0", optional_json(ds.overrides.p0)},
              {"r", optional_json(ds.overrides.r)},
              {"gamma0", optional_json(ds.overrides.gamma0)},
              {"q_support", optional_json(ds.overrides.q_support)},
              {"n_train", ds.n_train},
              {"n_test", ds.n_test}}},
            {"trainer",
             {{"m", tc.m},
              {"eta1", tc.eta1},
              {"eta2", tc.eta2},
              {"lambda", tc.lambda},
              {"tau0", tc.tau0},
              {"tau_xi", optional_json(tc.tau_xi)},
              {"epsilon1", tc.epsilon1},
              {"epsilon2", optional_json(tc.epsilon2)},
              {"epsilon2_prime", tc.epsilon2_prime},
              {"max_iters", tc.max_iters},
              {"eval_every", tc.eval_every},
              {"algorithm", lol::to_string(tc.algorithm)},
              {"model", lol::to_string(tc.model)},
              {"k", tc.k},
              {"span_every", tc.span_every},
              {"learned_threshold", tc.learned_threshold},
              {"mitigation",
               {{"tau_act_init", tc.mitigation.tau_act_init},
                {"tau_act_final", tc.mitigation.tau_act_final},
                {"anneal_iteration", optional_json(tc.mitigation.anneal_iteration)},
                {"anneal_loss", optional_json(tc.mitigation.anneal_loss)}}}}}};
}

std::string ExperimentConfig::hash() const {
    // FNV-1a over the canonical dump.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : to_json().dump()) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

Datasets make_datasets(const DistributionSpec& spec, std::uint64_t seed) {
    Datasets out;
    out.params = make_params(spec.d, spec.kappa, spec.q0, spec.overrides, seed);
    Rng train_rng(split_seed(seed, stream::train_data));
    out.train = generate_dataset(out.params, spec.n_train, train_rng);
    Rng test_rng(split_seed(seed, stream::test_data));
    out.test = generate_dataset(out.params, spec.n_test, test_rng);
    return out;
}

// ---------------------------------------------------------------------------
// Output formatting.

std::string format_number(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string trace_csv(const std::vector<MetricsRecord>& trace) {
    std::string out;
    const auto& cols = MetricsRecord::columns();
    for (std::size_t i = 0; i < cols.size(); ++i) {
        if (i) out += ',';
        out += cols[i];
    }
    out += '\n';
    for (const MetricsRecord& r : trace) {
        const auto vals = r.values();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            if (i) out += ',';
            out += format_number(vals[i]);
        }
        out += '\n';
    }
    return out;
}

json record_to_json(const MetricsRecord& r) {
    json j = json::object();
    const auto vals = r.values();
    const auto& cols = MetricsRecord::columns();
    for (std::size_t i = 0; i < cols.size(); ++i) {
        const std::string key(cols[i]);
        if (i == 0)
            j[key] = r.t;
        else if (std::isfinite(vals[i]))
            j[key] = vals[i];
        else
            j[key] = nullptr;
    }
    return j;
}

MetricsRecord record_from_json(const json& j) {
    std::array<double, MetricsRecord::kColumns> vals{};
    const auto& cols = MetricsRecord::columns();
    for (std::size_t i = 0; i < cols.size(); ++i) {
        const json& v = j.at(std::string(cols[i]));
        vals[i] = v.is_null() ? kNaN : v.get<double>();
    }
    return MetricsRecord::from_values(vals);
}

// ---------------------------------------------------------------------------
// Jobs.

JobResult run_job(const ExperimentConfig& cfg, Algorithm algorithm, std::uint64_t seed) {
    const auto start = std::chrono::steady_clock::now();
    const Datasets data = make_datasets(cfg.distribution, seed);
    TrainerConfig tc = cfg.trainer;
    tc.algorithm = algorithm;
    tc.seed = seed;
    MetricsContext ctx(data.params, data.train, data.test, tc.patches(), tc.lambda, seed, tc.span_every);

    JobResult job;
    job.algorithm = algorithm;
    job.seed = seed;
    const MetricsHook hook = [&](const TrainerState& st, double lr, double loss, const BatchEvaluator& eval,
                                 bool final) { job.trace.push_back(ctx.record(st, lr, loss, eval, final)); };
    RunResult res = run(tc, data.train, hook);
    job.status = res.status;
    job.abort_reason = res.abort_reason;
    job.t0 = res.state.t0;
    job.q_cross = res.state.q_cross;
    job.p_cross = res.state.p_cross;
    job.stop_loss = res.stop_loss;
    job.anneal_threshold = res.anneal_threshold;
    job.state = std::move(res.state);
    job.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    json s = {{"algorithm", lol::to_string(algorithm)},
              {"seed", seed},
              {"profile", lol::to_string(cfg.profile)},
              {"config_hash", cfg.hash()},
              {"config", cfg.to_json()},
              {"status", lol::to_string(job.status)},
              {"converged", job.status == RunStatus::Converged},
              {"abort_reason", job.abort_reason},
              {"t0", optional_json(job.t0)},
              {"q_cross", optional_json(job.q_cross)},
              {"p_cross", optional_json(job.p_cross)},
              {"stop_loss", std::isfinite(job.stop_loss) ? json(job.stop_loss) : json()},
              {"anneal_threshold", job.anneal_threshold},
              {"iterations", job.state.t},
              {"p_emp", data.train.p_emp()},
              {"q_emp", data.train.q_emp()},
              {"final", job.trace.empty() ? json() : record_to_json(job.trace.back())},
              {"wall_time_s", job.wall_time_s}};
    job.summary = std::move(s);
    return job;
}

namespace {

int pool_size(int requested) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("LOL_THREADS")) {
        const int v = std::atoi(env);
        if (v > 0) return v;
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

json run_entry(const JobResult& j) {
    return {{"algorithm", lol::to_string(j.algorithm)},
            {"seed", j.seed},
            {"status", lol::to_string(j.status)},
            {"converged", j.status == RunStatus::Converged},
            {"t0", optional_json(j.t0)},
            {"q_cross", optional_json(j.q_cross)},
            {"p_cross", optional_json(j.p_cross)},
            {"final", j.summary.at("final")},
            {"wall_time_s", j.wall_time_s}};
}

}  // namespace

std::vector<JobResult> run_experiment(const ExperimentConfig& cfg, bool write_outputs, int threads) {
    std::vector<std::pair<Algorithm, std::uint64_t>> jobs;
    for (Algorithm a : cfg.algorithms)
        for (std::uint64_t s : cfg.seeds) jobs.emplace_back(a, s);
    std::vector<JobResult> results(jobs.size());
    const int total = pool_size(threads);
    const int workers = std::max(1, std::min<int>(total, static_cast<int>(jobs.size())));
    const int inner = std::max(1, total / workers);
    std::atomic<std::size_t> next{0};
    std::mutex err_mutex;
    std::exception_ptr first_error;

    auto worker = [&] {
        omp_set_num_threads(inner);
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= jobs.size()) return;
            try {
                results[i] = run_job(cfg, jobs[i].first, jobs[i].second);
                if (write_outputs) {
                    const fs::path dir = fs::path(cfg.output_dir) / lol::to_string(jobs[i].first) /
                                         std::to_string(jobs[i].second);
                    fs::create_directories(dir);
                    write_text(dir / "trace.csv", trace_csv(results[i].trace));
                    write_text(dir / "summary.json", results[i].summary.dump(2) + "\n");
                    if (cfg.write_checkpoint)
                        write_text(dir / "checkpoint.json", checkpoint_to_json(results[i].state).dump() + "\n");
                }
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mutex);
                if (!first_error) first_error = std::current_exception();
            }
        }
    };
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (first_error) std::rethrow_exception(first_error);

    if (write_outputs) {
        json runs = json::array();
        for (const JobResult& j : results) runs.push_back(run_entry(j));
        const json summary = {{"config_hash", cfg.hash()},
                              {"profile", lol::to_string(cfg.profile)},
                              {"config", cfg.to_json()},
                              {"runs", runs}};
        fs::create_directories(cfg.output_dir);
        write_text(fs::path(cfg.output_dir) / "summary.json", summary.dump(2) + "\n");
    }
    return results;
}

// ---------------------------------------------------------------------------
// CLI.

namespace {

int exit_code_for(const std::vector<JobResult>& results) {
    for (const JobResult& j : results)
        if (j.status == RunStatus::Aborted) return kExitNaN;
    return kExitOk;
}

void report(const std::vector<JobResult>& results) {
    for (const JobResult& j : results) {
        std::cerr << lol::to_string(j.algorithm) << " seed " << j.seed << ": " << lol::to_string(j.status)
                  << " t=" << j.state.t;
        if (j.t0) std::cerr << " t0=" << *j.t0;
        if (!j.trace.empty()) std::cerr << " test_err=" << format_number(j.trace.back().test_err);
        if (!j.abort_reason.empty()) std::cerr << " (" << j.abort_reason << ")";
        std::cerr << " [" << format_number(std::round(j.wall_time_s * 10) / 10) << "s]\n";
    }
}

}  // namespace

int cli_run(const fs::path& config, const std::vector<std::string>& overrides) {
    ExperimentConfig cfg;
    try {
        cfg = load_config(config, overrides);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
    try {
        const auto results = run_experiment(cfg, true);
        report(results);
        return exit_code_for(results);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
}

int cli_sweep(const fs::path& config, const std::string& axis, const std::vector<std::string>& values,
              const std::vector<std::string>& overrides) {
    if (values.empty()) {
        std::cerr << "error: --values needs at least one value\n";
        return kExitConfig;
    }
    std::vector<ExperimentConfig> cfgs;
    std::string base_dir;
    try {
        base_dir = load_config(config, overrides).output_dir;
        for (const std::string& v : values) {
            const json parsed = parse_override_value(v);
            if (!parsed.is_number()) throw ConfigError("--values " + v + ": sweep values must be numeric");
            std::vector<std::string> ov = overrides;
            ov.push_back(axis + "=" + v);
            ExperimentConfig c = load_config(config, ov);
            // The axis must name a numeric field of the resolved config.
            const json resolved = c.to_json();
            const json* field = &resolved;
            for (const auto& part : split_path(axis)) {
                if (!field->is_object() || !field->contains(part))
                    throw ConfigError("--axis " + axis + ": not a config field");
                field = &field->at(part);
            }
            if (!field->is_number()) throw ConfigError("--axis " + axis + ": not a numeric field");
            c.output_dir = (fs::path(base_dir) / (axis + "=" + v)).string();
            cfgs.push_back(std::move(c));
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
    try {
        std::string csv = "axis,value,algorithm,seed,status,t0,q_cross,p_cross";
        for (const auto& c : MetricsRecord::columns()) csv += "," + std::string(c);
        csv += "\n";
        int code = kExitOk;
        for (std::size_t i = 0; i < cfgs.size(); ++i) {
            const auto results = run_experiment(cfgs[i], true);
            report(results);
            code = std::max(code, exit_code_for(results));
            for (const JobResult& j : results) {
                auto opt = [](const std::optional<long>& v) { return v ? std::to_string(*v) : std::string(); };
                csv += axis + "," + values[i] + "," + lol::to_string(j.algorithm) + "," + std::to_string(j.seed) +
                       "," + lol::to_string(j.status) + "," + opt(j.t0) + "," + opt(j.q_cross) + "," +
                       opt(j.p_cross);
                const MetricsRecord last = j.trace.empty() ? MetricsRecord{} : j.trace.back();
                for (double v : last.values()) csv += "," + format_number(v);
                csv += "\n";
            }
        }
        fs::create_directories(base_dir);
        write_text(fs::path(base_dir) / "sweep.csv", csv);
        return code;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
}

namespace {

struct Stat {
    double mean = kNaN;
    double std = kNaN;
    int count = 0;
};

Stat stat_of(const std::vector<double>& xs) {
    Stat s;
    std::vector<double> v;
    for (double x : xs)
        if (std::isfinite(x)) v.push_back(x);
    s.count = static_cast<int>(v.size());
    if (v.empty()) return s;
    double sum = 0.0;
    for (double x : v) sum += x;
    s.mean = sum / v.size();
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = v.size() > 1 ? std::sqrt(ss / (v.size() - 1)) : 0.0;
    return s;
}

double num_or_nan(const json& j) { return j.is_number() ? j.get<double>() : kNaN; }

// Whether the seed's run shows the learning order its algorithm should show:
// the small-LR runs learn Q first; the annealed run learns Q only after t0.
bool expected_order(const std::string& algo, const json& run) {
    const double q = num_or_nan(run.at("q_cross"));
    const double p = num_or_nan(run.at("p_cross"));
    if (algo == "LargeThenAnneal") {
        const double t0 = num_or_nan(run.at("t0"));
        if (std::isnan(t0)) return false;
        return std::isnan(q) || q >= t0;
    }
    return std::isfinite(q) && (std::isnan(p) || q < p);
}

const char* const kCompareMetrics[] = {"test_err", "test_err_p_only", "test_err_q_only", "test_err_both",
                                       "test_loss", "q_cross", "p_cross", "t0"};

}  // namespace

int cli_compare(const std::vector<fs::path>& dirs, const fs::path& out) {
    if (dirs.size() < 2) {
        std::cerr << "error: compare needs at least two run directories\n";
        return kExitConfig;
    }
    struct Group {
        std::string label;
        std::string algorithm;
        std::map<std::uint64_t, json> runs;
    };
    std::vector<Group> groups;
    json distribution;
    try {
        for (const fs::path& dir : dirs) {
            std::ifstream in(dir / "summary.json");
            if (!in) throw ConfigError((dir / "summary.json").string() + ": cannot read run summary");
            json s;
            try {
                s = json::parse(in);
            } catch (const json::parse_error& e) {
                throw ConfigError((dir / "summary.json").string() + ": " + e.what());
            }
            const json& dist = s.at("config").at("distribution");
            if (distribution.is_null())
                distribution = dist;
            else if (dist != distribution)
                throw ConfigError(dir.string() + ": distribution config differs from " + dirs.front().string());
            std::map<std::string, Group> by_algo;
            for (const json& run : s.at("runs")) {
                const std::string algo = run.at("algorithm").get<std::string>();
                Group& g = by_algo[algo];
                g.algorithm = algo;
                g.label = dir.string() + ":" + algo;
                g.runs[run.at("seed").get<std::uint64_t>()] = run;
            }
            for (auto& [_, g] : by_algo) groups.push_back(std::move(g));
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const json::exception& e) {
        std::cerr << "error: malformed run summary: " << e.what() << "\n";
        return kExitConfig;
    }

    auto metric = [](const json& run, const std::string& name) {
        if (name == "q_cross" || name == "p_cross" || name == "t0") return num_or_nan(run.at(name));
        const json& f = run.at("final");
        return f.is_null() ? kNaN : num_or_nan(f.at(name));
    };

    json report = {{"groups", json::array()}, {"pairs", json::array()}};
    std::string csv = "group,algorithm,seeds";
    for (const char* m : kCompareMetrics) csv += std::string(",") + m + "_mean," + m + "_std";
    csv += ",expected_order_frac\n";
    std::vector<std::map<std::string, Stat>> stats(groups.size());
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        const Group& g = groups[gi];
        json gj = {{"label", g.label}, {"algorithm", g.algorithm}, {"seeds", g.runs.size()}};
        csv += g.label + "," + g.algorithm + "," + std::to_string(g.runs.size());
        for (const char* m : kCompareMetrics) {
            std::vector<double> xs;
            for (const auto& [_, run] : g.runs) xs.push_back(metric(run, m));
            const Stat s = stat_of(xs);
            stats[gi][m] = s;
            gj[m] = {{"mean", std::isfinite(s.mean) ? json(s.mean) : json()},
                     {"std", std::isfinite(s.std) ? json(s.std) : json()},
                     {"count", s.count}};
            csv += "," + format_number(s.mean) + "," + format_number(s.std);
        }
        int ok = 0;
        for (const auto& [_, run] : g.runs) ok += expected_order(g.algorithm, run);
        const double frac = g.runs.empty() ? kNaN : static_cast<double>(ok) / g.runs.size();
        gj["expected_order_frac"] = frac;
        csv += "," + format_number(frac) + "\n";
        report["groups"].push_back(gj);
    }
    for (std::size_t a = 0; a < groups.size(); ++a) {
        for (std::size_t b = a + 1; b < groups.size(); ++b) {
            json pj = {{"a", groups[a].label}, {"b", groups[b].label}};
            json deltas = json::object();
            for (const char* m : kCompareMetrics) {
                const double dlt = stats[b][m].mean - stats[a][m].mean;
                deltas[m] = std::isfinite(dlt) ? json(dlt) : json();
            }
            pj["delta_b_minus_a"] = deltas;
            const Group* ls = nullptr;
            const Group* small = nullptr;
            for (const Group* g : {&groups[a], &groups[b]}) {
                if (g->algorithm == "LargeThenAnneal") ls = g;
                else small = g;
            }
            if (ls && small) {
                int inverted = 0, shared = 0;
                for (const auto& [seed, run] : small->runs) {
                    auto it = ls->runs.find(seed);
                    if (it == ls->runs.end()) continue;
                    ++shared;
                    inverted += expected_order(small->algorithm, run) && expected_order("LargeThenAnneal", it->second);
                }
                pj["seeds_compared"] = shared;
                pj["inversion_seeds"] = inverted;
                pj["learning_order_inversion"] = shared > 0 && 2 * inverted > shared;
            }
            report["pairs"].push_back(pj);
        }
    }
    try {
        fs::create_directories(out);
        write_text(out / "comparison.json", report.dump(2) + "\n");
        write_text(out / "comparison.csv", csv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    std::cout << report.dump(2) << "\n";
    return kExitOk;
}

}  // namespace lol
