#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mobi/common.hpp"
#include "mobi/trainer.hpp"

namespace mobi::bench {

// Raised on malformed configuration; `field` carries the dotted key path.
struct ConfigError : std::runtime_error {
    std::string field;
    ConfigError(std::string f, const std::string& msg)
            : std::runtime_error("config error at " + f + ": " + msg), field(std::move(f)) {}
};

struct RunConfig {
    std::size_t model_dim = 32;
    std::size_t model_depth = 3;
    std::size_t group_size = 128;
    // Toy weight scale, chosen so the per-slice benefit magnitudes sit in the
    // band where the default budget regularizer can steer the router at these
    // dimensions.
    double weight_scale = 0.025;

    std::size_t nsamples = 128;
    std::size_t seqlen = 128;
    double outlier_frac = 0.05;
    double outlier_scale = 8.0;

    std::vector<int> slice_bits{2, 2, 2, 2};

    std::size_t epochs = 20;
    std::size_t batch_size = 1;
    double lr_clip = 5e-3;
    double lr_router = 1e-5;
    double weight_decay = 0.0;
    double gamma_init = 4.0;
    bool stage1_warmup_only = false;

    double b_init = 8.0;
    double b_target = 3.0;
    trainer::ScheduleShape shape = trainer::ScheduleShape::kLogarithmic;
    double reg_weight = 1e-5;

    std::vector<double> target_bits{2, 3, 4, 5, 6, 8};
    double target_ratio = -1.0;  // <0: unset, target_bits drive the sweep
    double top_frac = 0.1;

    std::uint64_t seed = 1;
    std::string out_dir = "runs/out";

    trainer::TrainConfig train_config() const {
        trainer::TrainConfig tc;
        tc.epochs = epochs;
        tc.nsamples = nsamples;
        tc.batch_size = batch_size;
        tc.lr_clip = lr_clip;
        tc.lr_router = lr_router;
        tc.weight_decay = weight_decay;
        tc.gamma_init = gamma_init;
        tc.stage1_warmup_only = stage1_warmup_only;
        tc.slice_bits = slice_bits;
        tc.group_size = group_size;
        tc.seed = seed;
        return tc;
    }

    trainer::BudgetSchedule budget_schedule() const {
        trainer::BudgetSchedule bs;
        bs.b_init = b_init;
        bs.b_target = b_target;
        bs.total_steps = train_config().global_steps();
        bs.shape = shape;
        bs.reg_weight = reg_weight;
        return bs;
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline double parse_double(const std::string& field, const std::string& v) {
    try {
        std::size_t pos = 0;
        double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing characters");
        return d;
    } catch (const std::exception&) {
        throw ConfigError(field, "expected a number, got '" + v + "'");
    }
}

inline std::uint64_t parse_u64(const std::string& field, const std::string& v) {
    try {
        std::size_t pos = 0;
        long long x = std::stoll(v, &pos);
        if (pos != v.size() || x < 0) throw std::invalid_argument("bad");
        return static_cast<std::uint64_t>(x);
    } catch (const std::exception&) {
        throw ConfigError(field, "expected a non-negative integer, got '" + v + "'");
    }
}

inline bool parse_bool(const std::string& field, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(field, "expected a boolean, got '" + v + "'");
}

template <typename T, typename F>
std::vector<T> parse_list(const std::string& field, const std::string& v, F parse_one) {
    std::vector<T> out;
    std::istringstream iss(v);
    std::string tok;
    while (iss >> tok) out.push_back(parse_one(field, tok));
    if (out.empty()) throw ConfigError(field, "expected a non-empty list");
    return out;
}

}  // namespace detail

inline void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
    using namespace detail;
    if (key == "model.dim") cfg.model_dim = parse_u64(key, value);
    else if (key == "model.depth") cfg.model_depth = parse_u64(key, value);
    else if (key == "model.group_size") cfg.group_size = parse_u64(key, value);
    else if (key == "model.weight_scale") cfg.weight_scale = parse_double(key, value);
    else if (key == "calib.nsamples") cfg.nsamples = parse_u64(key, value);
    else if (key == "calib.seqlen") cfg.seqlen = parse_u64(key, value);
    else if (key == "calib.outlier_frac") cfg.outlier_frac = parse_double(key, value);
    else if (key == "calib.outlier_scale") cfg.outlier_scale = parse_double(key, value);
    else if (key == "slice.bits") {
        cfg.slice_bits.clear();
        for (auto b : parse_list<std::uint64_t>(key, value, parse_u64)) {
            if (b < 1 || b > 8) throw ConfigError(key, "slice widths must be in [1,8]");
            cfg.slice_bits.push_back(static_cast<int>(b));
        }
    } else if (key == "train.epochs") cfg.epochs = parse_u64(key, value);
    else if (key == "train.batch_size") cfg.batch_size = parse_u64(key, value);
    else if (key == "train.lr_clip") cfg.lr_clip = parse_double(key, value);
    else if (key == "train.lr_router") cfg.lr_router = parse_double(key, value);
    else if (key == "train.weight_decay") cfg.weight_decay = parse_double(key, value);
    else if (key == "train.gamma_init") cfg.gamma_init = parse_double(key, value);
    else if (key == "train.stage1_warmup_only") cfg.stage1_warmup_only = parse_bool(key, value);
    else if (key == "sched.b_init") cfg.b_init = parse_double(key, value);
    else if (key == "sched.b_target") cfg.b_target = parse_double(key, value);
    else if (key == "sched.shape") {
        try {
            cfg.shape = trainer::shape_from_string(value);
        } catch (const std::exception& e) {
            throw ConfigError(key, e.what());
        }
    } else if (key == "sched.reg_weight") cfg.reg_weight = parse_double(key, value);
    else if (key == "eval.target_bits")
        cfg.target_bits = parse_list<double>(key, value, parse_double);
    else if (key == "eval.target_ratio") cfg.target_ratio = parse_double(key, value);
    else if (key == "eval.top_frac") cfg.top_frac = parse_double(key, value);
    else if (key == "seed") cfg.seed = parse_u64(key, value);
    else if (key == "out") cfg.out_dir = value;
    else throw ConfigError(key, "unknown configuration key");
}

inline void validate_config(const RunConfig& cfg) {
    if (cfg.model_dim == 0) throw ConfigError("model.dim", "must be positive");
    if (cfg.model_depth == 0) throw ConfigError("model.depth", "must be positive");
    if (cfg.nsamples == 0) throw ConfigError("calib.nsamples", "must be positive");
    if (cfg.seqlen == 0) throw ConfigError("calib.seqlen", "must be positive");
    if (cfg.slice_bits.size() < 2) throw ConfigError("slice.bits", "need at least two slices");
    int total = 0;
    for (int b : cfg.slice_bits) total += b;
    if (total > 8) throw ConfigError("slice.bits", "total bits exceed the 8-bit code budget");
    if (cfg.batch_size == 0 || cfg.batch_size > cfg.nsamples)
        throw ConfigError("train.batch_size", "must be in [1, nsamples]");
    if (cfg.outlier_frac < 0.0 || cfg.outlier_frac > 1.0)
        throw ConfigError("calib.outlier_frac", "must be in [0,1]");
    if (cfg.reg_weight < 0.0) throw ConfigError("sched.reg_weight", "must be non-negative");
    if (cfg.epochs == 0) throw ConfigError("train.epochs", "must be positive");
}

inline RunConfig parse_config(std::istream& in) {
    RunConfig cfg;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno), "expected key=value, got '" + t + "'");
        std::string key = detail::trim(t.substr(0, eq));
        std::string value = detail::trim(t.substr(eq + 1));
        apply_config_entry(cfg, key, value);
    }
    validate_config(cfg);
    return cfg;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path, "cannot open config file");
    return parse_config(in);
}

}  // namespace mobi::bench
