#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "mobi/bench/calibset.hpp"
#include "mobi/bench/checkpoint.hpp"
#include "mobi/bench/config.hpp"
#include "mobi/bench/csv.hpp"
#include "mobi/bench/pipeline.hpp"
#include "mobi/trainer.hpp"

namespace {

constexpr const char* kUsage = R"(mobi - elastic mixture-of-bits quantization harness

usage:
  mobi calibrate <config> [--out DIR] [--seed N]
  mobi eval --ckpt FILE --targets B1 [B2 ...] [--out DIR] [--calib-split]
  mobi sweep --ckpt FILE [--out DIR] [--calib-split]
  mobi pack --ckpt FILE [--out DIR]
  mobi grad-check [--seed N] [--out DIR]
  mobi migration --ckpt FILE --bit-a A --bit-b B [--top-frac F] [--out DIR]
  mobi report --dir DIR

The seed is taken from --seed, else the MOBI_SEED environment variable, else
the config file. Exit codes: 0 success, 1 invalid config or runtime failure,
2 usage error.
)";

struct Args {
    std::vector<std::string> positional;
    std::optional<std::string> ckpt;
    std::optional<std::string> out;
    std::optional<std::string> dir;
    std::optional<std::uint64_t> seed;
    std::vector<double> targets;
    std::optional<double> bit_a;
    std::optional<double> bit_b;
    std::optional<double> top_frac;
    bool calib_split = false;
};

int usage_error(const std::string& msg) {
    std::cerr << "error: " << msg << "\n" << kUsage;
    return 2;
}

bool parse_double_arg(const std::string& s, double& out) {
    try {
        std::size_t pos = 0;
        out = std::stod(s, &pos);
        return pos == s.size();
    } catch (const std::exception&) {
        return false;
    }
}

// Returns 0 on success, 2 on a usage problem (message already printed).
int parse_args(int argc, char** argv, Args& args) {
    for (int i = 2; i < argc; ++i) {
        std::string a = argv[i];
        auto need_value = [&](const char* flag) -> const char* {
            if (i + 1 >= argc) {
                usage_error(std::string("missing value for ") + flag);
                return nullptr;
            }
            return argv[++i];
        };
        if (a == "--ckpt") {
            const char* v = need_value("--ckpt");
            if (!v) return 2;
            args.ckpt = v;
        } else if (a == "--out") {
            const char* v = need_value("--out");
            if (!v) return 2;
            args.out = v;
        } else if (a == "--dir") {
            const char* v = need_value("--dir");
            if (!v) return 2;
            args.dir = v;
        } else if (a == "--seed") {
            const char* v = need_value("--seed");
            if (!v) return 2;
            args.seed = std::strtoull(v, nullptr, 10);
        } else if (a == "--targets") {
            while (i + 1 < argc && argv[i + 1][0] != '-') {
                double d;
                if (!parse_double_arg(argv[++i], d)) return usage_error("bad target value");
                args.targets.push_back(d);
            }
            if (args.targets.empty()) return usage_error("--targets needs at least one value");
        } else if (a == "--bit-a") {
            const char* v = need_value("--bit-a");
            if (!v) return 2;
            double d;
            if (!parse_double_arg(v, d)) return usage_error("bad --bit-a value");
            args.bit_a = d;
        } else if (a == "--bit-b") {
            const char* v = need_value("--bit-b");
            if (!v) return 2;
            double d;
            if (!parse_double_arg(v, d)) return usage_error("bad --bit-b value");
            args.bit_b = d;
        } else if (a == "--calib-split") {
            args.calib_split = true;
        } else if (a == "--top-frac") {
            const char* v = need_value("--top-frac");
            if (!v) return 2;
            double d;
            if (!parse_double_arg(v, d)) return usage_error("bad --top-frac value");
            args.top_frac = d;
        } else if (!a.empty() && a[0] == '-') {
            return usage_error("unknown flag '" + a + "'");
        } else {
            args.positional.push_back(a);
        }
    }
    return 0;
}

// Reports land next to the checkpoint unless --out says otherwise.
std::string ckpt_dir(const std::string& ckpt_path) {
    std::filesystem::path p(ckpt_path);
    std::filesystem::path dir = p.parent_path();
    return dir.empty() ? std::string(".") : dir.string();
}

std::optional<std::uint64_t> env_seed() {
    const char* v = std::getenv("MOBI_SEED");
    if (!v) return std::nullopt;
    return std::strtoull(v, nullptr, 10);
}

int cmd_calibrate(const Args& args) {
    if (args.positional.empty()) return usage_error("calibrate needs a config file");
    mobi::bench::RunConfig cfg = mobi::bench::load_config(args.positional[0]);
    if (auto s = args.seed ? args.seed : env_seed()) cfg.seed = *s;
    if (args.out) cfg.out_dir = *args.out;
    mobi::bench::CalibrateOutcome outcome = mobi::bench::run_calibrate(cfg);
    std::cout << "calibrated " << outcome.ckpt.layers.size() << " layers -> " << cfg.out_dir
              << "/checkpoint.mobi\n";
    for (const auto& rep : outcome.reports) {
        std::cout << "  layer " << rep.layer << ": loss " << rep.final_loss << ", avg_bits "
                  << rep.final_avg_bits << ", clamped " << rep.clamp_count << "\n";
        for (const auto& w : rep.warnings) std::cout << "  layer " << rep.layer << " warning: " << w << "\n";
    }
    return 0;
}

int cmd_eval(const Args& args, bool targets_from_config) {
    if (!args.ckpt) return usage_error("--ckpt is required");
    mobi::bench::Checkpoint ckpt = mobi::bench::load_checkpoint(*args.ckpt);
    std::vector<double> targets = args.targets;
    if (targets_from_config || targets.empty()) {
        targets = ckpt.config.target_bits;
        // A configured activation ratio adds its equivalent bit target.
        double ratio = ckpt.config.target_ratio;
        if (ratio >= 0.0 && ratio <= 1.0) {
            double b_msb = ckpt.config.slice_bits[0];
            double resid = 0.0;
            for (std::size_t e = 1; e < ckpt.config.slice_bits.size(); ++e)
                resid += ckpt.config.slice_bits[e];
            targets.push_back(b_msb + ratio * resid);
        }
    }
    if (targets.empty()) return usage_error("no targets given");
    std::string out = args.out ? *args.out : ckpt_dir(*args.ckpt);
    auto rows = mobi::bench::eval_sweep(ckpt, targets, out, args.calib_split);
    for (const auto& r : rows) {
        if (!r.note.empty()) {
            std::cout << "target " << r.target << ": skipped (" << r.note << ")\n";
        } else {
            std::cout << "target " << r.target << ": rho " << r.rho << ", realized "
                      << r.realized_avg_bits << " bits, mse " << r.out_mse << "\n";
        }
    }
    std::cout << "wrote " << out << "/sweep.csv\n";
    return 0;
}

int cmd_pack(const Args& args) {
    if (!args.ckpt) return usage_error("--ckpt is required");
    mobi::bench::Checkpoint ckpt = mobi::bench::load_checkpoint(*args.ckpt);
    std::string out = args.out ? *args.out : ckpt_dir(*args.ckpt);
    mobi::bench::pack_report(ckpt, out);
    std::cout << "wrote " << out << "/pack.csv\n";
    return 0;
}

int cmd_grad_check(const Args& args) {
    std::uint64_t seed = args.seed ? *args.seed : env_seed().value_or(1);
    std::string out = args.out ? *args.out : "runs/gradcheck";
    std::filesystem::create_directories(out);

    using namespace mobi;
    Rng rng(seed);
    const std::size_t d = 16;
    Matrix w(d, d);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.normal() / 4.0;
    trainer::TrainConfig tc;
    tc.slice_bits = {2, 2, 2, 2};
    tc.group_size = d;
    trainer::BudgetSchedule sched;
    sched.total_steps = 1000;
    trainer::QuantLayer layer =
        trainer::QuantLayer::init(w, tc.slice_bits, tc.group_size, sched.total_steps, rng, 2.0);
    for (auto& v : layer.rs.w2.vec()) v = 0.3 * rng.normal();
    for (auto& v : layer.rs.b2) v = 0.1 * rng.normal();
    for (auto& g : layer.clip.gamma_lo) g = rng.uniform(0.5, 3.0);
    for (auto& g : layer.clip.gamma_hi) g = rng.uniform(0.5, 3.0);
    Matrix x(8, d);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
    Matrix y_fp = matmul_nt(x, w);

    trainer::GradCheckReport rep = trainer::grad_check(layer, x, y_fp, sched, 500);
    std::cout << "router params: " << rep.checked_router << " checked, max rel err "
              << rep.max_rel_router << "\n";
    std::cout << "clip params:   " << rep.checked_clip << " checked (" << rep.excluded_clip
              << " near a boundary excluded), max rel err " << rep.max_rel_clip << "\n";
    mobi::bench::CsvWriter csv(out + "/gradcheck.csv",
                               {"param_group", "checked", "excluded", "max_rel_err"});
    csv.row({"router", std::to_string(rep.checked_router), "0",
             mobi::bench::fmt_double(rep.max_rel_router)});
    csv.row({"clip", std::to_string(rep.checked_clip), std::to_string(rep.excluded_clip),
             mobi::bench::fmt_double(rep.max_rel_clip)});
    return 0;
}

int cmd_migration(const Args& args) {
    if (!args.ckpt) return usage_error("--ckpt is required");
    if (!args.bit_a || !args.bit_b) return usage_error("--bit-a and --bit-b are required");
    mobi::bench::Checkpoint ckpt = mobi::bench::load_checkpoint(*args.ckpt);
    std::string out = args.out ? *args.out : ckpt_dir(*args.ckpt);
    double top = args.top_frac ? *args.top_frac : ckpt.config.top_frac;
    auto res = mobi::bench::migration_report(ckpt, *args.bit_a, *args.bit_b, top, out);
    std::cout << "migration overlap (top " << top << "): static " << res.overlap_static
              << ", routed " << res.overlap_routed << "\n";
    std::cout << "wrote " << out << "/migration.csv\n";
    return 0;
}

int cmd_report(const Args& args) {
    if (!args.dir) return usage_error("--dir is required");
    std::string ckpt_path = *args.dir + "/checkpoint.mobi";
    mobi::bench::Checkpoint ckpt = mobi::bench::load_checkpoint(ckpt_path);
    std::cout << "run " << *args.dir << ": " << ckpt.layers.size() << " layers, model_dim "
              << ckpt.config.model_dim << ", slice_bits";
    for (int b : ckpt.config.slice_bits) std::cout << " " << b;
    std::cout << ", seed " << ckpt.config.seed << "\n";
    for (std::size_t i = 0; i < ckpt.layers.size(); ++i) {
        const auto& l = ckpt.layers[i];
        std::cout << "  layer " << i << ": " << l.rows << "x" << l.cols << ", planes "
                  << l.planes.bits << ", threshold " << l.rs.threshold << "\n";
    }
    for (const char* name : {"calibrate_summary.csv", "sweep.csv", "migration.csv"}) {
        std::ifstream f(*args.dir + "/" + name);
        if (!f) continue;
        std::cout << "-- " << name << "\n";
        std::string line;
        while (std::getline(f, line)) std::cout << "   " << line << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) return usage_error("missing subcommand");
    std::string cmd = argv[1];
    if (cmd == "--help" || cmd == "-h" || cmd == "help") {
        std::cout << kUsage;
        return 0;
    }
    Args args;
    int rc = parse_args(argc, argv, args);
    if (rc != 0) return rc;

    try {
        if (cmd == "calibrate") return cmd_calibrate(args);
        if (cmd == "eval") return cmd_eval(args, /*targets_from_config=*/false);
        if (cmd == "sweep") return cmd_eval(args, /*targets_from_config=*/true);
        if (cmd == "pack") return cmd_pack(args);
        if (cmd == "grad-check") return cmd_grad_check(args);
        if (cmd == "migration") return cmd_migration(args);
        if (cmd == "report") return cmd_report(args);
        return usage_error("unknown subcommand '" + cmd + "'");
    } catch (const mobi::bench::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
