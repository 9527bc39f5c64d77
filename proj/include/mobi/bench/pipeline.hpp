#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mobi/bench/calibset.hpp"
#include "mobi/bench/checkpoint.hpp"
#include "mobi/bench/config.hpp"
#include "mobi/bench/csv.hpp"
#include "mobi/bitplane.hpp"
#include "mobi/trainer.hpp"

// End-to-end pipelines behind the CLI: calibration, elastic evaluation sweeps,
// and the outlier-migration analysis. Everything is seeded and written in a
// fixed order so a run directory is byte-reproducible.
namespace mobi::bench {

struct CalibrateOutcome {
    Checkpoint ckpt;
    std::vector<trainer::LayerReport> reports;
};

inline LayerRecord record_from_layer(const trainer::QuantLayer& layer) {
    LayerRecord rec;
    rec.rows = layer.w.rows();
    rec.cols = layer.w.cols();
    rec.group_size = layer.group_size;
    rec.slice_bits = layer.slice_bits;
    qcore::QuantParams base = layer.base_params();
    rec.base_scale = base.scale;
    rec.base_zero = base.zero;
    rec.clip = layer.clip;
    rec.rs = layer.rs;
    slicer::SliceStack st = layer.decompose();
    Codes merged = slicer::merge_codes(st, st.num_slices());
    rec.planes = bitplane::pack_bit_major(merged, st.total_bits());
    return rec;
}

inline CalibrateOutcome run_calibrate(const RunConfig& cfg) {
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);

    std::vector<Matrix> weights = gen_model(cfg);
    CalibSet calib = gen_calibset(cfg);

    std::vector<std::unique_ptr<CsvWriter>> logs(cfg.model_depth);
    auto sink = [&](const trainer::LogRecord& r) {
        if (!logs[r.layer]) {
            logs[r.layer] = std::make_unique<CsvWriter>(
                cfg.out_dir + "/train_layer" + std::to_string(r.layer) + ".csv",
                std::vector<std::string>{"step", "loss", "data_term", "reg_term", "avg_bits",
                                         "b_sched", "tau", "msb_loss"});
        }
        logs[r.layer]->row({std::to_string(r.step), fmt_double(r.loss), fmt_double(r.data_term),
                            fmt_double(r.reg_term), fmt_double(r.avg_bits), fmt_double(r.b_sched),
                            fmt_double(r.tau), fmt_double(r.msb_loss)});
    };

    Rng router_rng(cfg.seed ^ 0xc2b2ae3d27d4eb4fULL);
    trainer::CalibrationResult res = trainer::calibrate_model(
        weights, calib.batches, cfg.train_config(), cfg.budget_schedule(), router_rng, sink);
    logs.clear();  // flush

    CalibrateOutcome outcome;
    outcome.ckpt.config = cfg;
    for (const auto& layer : res.layers) outcome.ckpt.layers.push_back(record_from_layer(layer));
    outcome.reports = res.reports;
    save_checkpoint(cfg.out_dir + "/checkpoint.mobi", outcome.ckpt);

    CsvWriter summary(cfg.out_dir + "/calibrate_summary.csv",
                      {"layer", "final_loss", "final_data_term", "final_avg_bits", "clamp_count",
                       "steps_at_bound", "total_steps", "warnings"});
    for (const auto& rep : res.reports) {
        std::string warn;
        for (const auto& w : rep.warnings) warn += (warn.empty() ? "" : "; ") + w;
        summary.row({std::to_string(rep.layer), fmt_double(rep.final_loss),
                     fmt_double(rep.final_data_term), fmt_double(rep.final_avg_bits),
                     std::to_string(rep.clamp_count), std::to_string(rep.steps_at_bound),
                     std::to_string(rep.total_steps), warn});
    }
    return outcome;
}

// Content-independent gating that fills residual slices in slice-major token
// order until the requested ratio of gates is active. At ratios that map to a
// whole number of slices this is exactly uniform-precision inference.
inline Matrix static_gates(std::size_t tokens, std::size_t n_routed, double rho) {
    Matrix g(tokens, n_routed, 0.0);
    std::size_t total = static_cast<std::size_t>(
        std::floor(rho * static_cast<double>(tokens) * static_cast<double>(n_routed) + 0.5));
    std::size_t full = n_routed == 0 ? 0 : total / tokens;
    std::size_t rem = n_routed == 0 ? 0 : total % tokens;
    for (std::size_t i = 0; i < tokens; ++i) {
        for (std::size_t j = 0; j < n_routed && j < full; ++j) g(i, j) = 1.0;
        if (full < n_routed && i < rem) g(i, full) = 1.0;
    }
    return g;
}

struct EvalResult {
    double rho = 0.0;
    double realized_avg_bits = 0.0;              // mean over layers
    double out_mse = 0.0;                        // final output vs FP reference
    std::vector<double> per_layer_bits;          // block-level precision variation
    std::vector<double> per_layer_delta;
    std::map<int, std::size_t> token_bits_hist;  // precision histogram over (token, layer) pairs
    std::vector<double> per_token_err;           // final-layer L2 error per token
    // Fraction of gate patterns activating a finer slice above an inactive
    // coarser one; pooled quantile gating keeps this at zero only when scores
    // happen to be slice-monotone, so it is reported, not enforced.
    double prefix_violation_rate = 0.0;
};

// Runs hard-gated inference at routing ratio rho. Router mode calibrates each
// layer's threshold as the (1-rho) score quantile over the calibration set;
// static mode uses the content-independent fill above. With calib_split, the
// thresholds come from the first half of the batches and the metrics from the
// held-out second half; the default reuses the full set for both.
inline EvalResult eval_at_ratio(const Checkpoint& ckpt, const std::vector<Matrix>& weights,
                                const std::vector<Matrix>& calib, double rho, bool use_router,
                                bool calib_split = false) {
    EvalResult res;
    res.rho = rho;
    std::vector<Matrix> h_fp = calib;
    std::vector<Matrix> h_q = calib;
    const std::size_t depth = ckpt.layers.size();
    MOBI_CHECK(weights.size() == depth, "eval_at_ratio: weight/layer count mismatch");
    MOBI_CHECK(!calib_split || calib.size() >= 2, "eval_at_ratio: split needs at least two batches");
    const std::size_t measure_from = calib_split ? calib.size() / 2 : 0;

    std::vector<Matrix> y_fp_final, y_q_final;
    for (std::size_t li = 0; li < depth; ++li) {
        const LayerRecord& rec = ckpt.layers[li];
        slicer::SliceStack stack = rec.stack();
        const std::size_t nr = rec.slice_bits.size() - 1;
        const bool last = (li + 1 == depth);

        std::vector<Matrix> scores;
        double delta = 0.0;
        if (use_router) {
            std::vector<double> pooled;
            for (std::size_t i = 0; i < h_q.size(); ++i) {
                Matrix s = router::score(h_q[i], rec.rs);
                if (!calib_split || i < measure_from)
                    pooled.insert(pooled.end(), s.vec().begin(), s.vec().end());
                scores.push_back(std::move(s));
            }
            delta = router::calibrate_threshold(std::move(pooled), rho);
        }
        res.per_layer_delta.push_back(use_router ? delta : 0.0);

        double bits_sum = 0.0;
        std::size_t token_count = 0;
        for (std::size_t i = 0; i < h_q.size(); ++i) {
            Matrix gates = use_router ? router::gate_hard(scores[i], delta)
                                      : static_gates(h_q[i].rows(), nr, rho);
            if (i >= measure_from) {
                for (std::size_t t = 0; t < gates.rows(); ++t) {
                    int bits = rec.slice_bits[0];
                    bool off_seen = false;
                    bool violated = false;
                    for (std::size_t j = 0; j < nr; ++j) {
                        if (gates(t, j) > 0.5) {
                            bits += rec.slice_bits[j + 1];
                            if (off_seen) violated = true;
                        } else {
                            off_seen = true;
                        }
                    }
                    if (violated) res.prefix_violation_rate += 1.0;
                    bits_sum += bits;
                    ++token_count;
                    ++res.token_bits_hist[bits];
                }
            }
            Matrix y_fp = matmul_nt(h_fp[i], weights[li]);
            Matrix y_q = router::forward_elastic(h_q[i], stack, gates, router::GateMode::kHard);
            if (last && i >= measure_from) {
                y_fp_final.push_back(y_fp);
                y_q_final.push_back(y_q);
            }
            h_fp[i] = last ? std::move(y_fp) : trainer::silu_map(y_fp);
            h_q[i] = last ? std::move(y_q) : trainer::silu_map(y_q);
        }
        res.per_layer_bits.push_back(bits_sum / static_cast<double>(token_count));
    }

    double sq = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < y_fp_final.size(); ++i) {
        const Matrix& yf = y_fp_final[i];
        const Matrix& yq = y_q_final[i];
        for (std::size_t t = 0; t < yf.rows(); ++t) {
            double e2 = 0.0;
            for (std::size_t c = 0; c < yf.cols(); ++c) {
                double d = yq(t, c) - yf(t, c);
                e2 += d * d;
            }
            res.per_token_err.push_back(std::sqrt(e2));
            sq += e2;
        }
        n += yf.size();
    }
    res.out_mse = sq / static_cast<double>(n);
    double bits_acc = 0.0;
    for (double b : res.per_layer_bits) bits_acc += b;
    res.realized_avg_bits = bits_acc / static_cast<double>(res.per_layer_bits.size());
    std::size_t pairs = 0;
    for (const auto& [bits, count] : res.token_bits_hist) pairs += count;
    if (pairs) res.prefix_violation_rate /= static_cast<double>(pairs);
    return res;
}

struct SweepRow {
    double target = 0.0;
    double rho = 0.0;
    double realized_avg_bits = 0.0;
    double out_mse = 0.0;
    std::string note;
};

inline std::vector<SweepRow> eval_sweep(const Checkpoint& ckpt, const std::vector<double>& targets,
                                        const std::string& out_dir, bool calib_split = false) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const RunConfig& cfg = ckpt.config;
    std::vector<Matrix> weights = gen_model(cfg);
    CalibSet calib = gen_calibset(cfg);

    double b_msb = static_cast<double>(cfg.slice_bits[0]);
    double b_total = 0.0;
    for (int b : cfg.slice_bits) b_total += b;

    CsvWriter sweep(out_dir + "/sweep.csv",
                    {"target_bits", "rho", "realized_avg_bits", "out_mse",
                     "prefix_violation_rate", "note"});
    CsvWriter block(out_dir + "/block_bits.csv", {"target_bits", "layer", "avg_bits", "delta"});
    CsvWriter hist(out_dir + "/token_hist.csv", {"target_bits", "token_bits", "count"});

    std::vector<SweepRow> rows;
    for (double target : targets) {
        SweepRow row;
        row.target = target;
        if (target < b_msb || target > b_total) {
            row.note = "target outside [" + fmt_double(b_msb) + "," + fmt_double(b_total) + "]";
            sweep.row({fmt_double(target), "", "", "", "", row.note});
            rows.push_back(row);
            continue;
        }
        row.rho = router::ratio_from_target_bits(target, cfg.slice_bits);
        EvalResult er =
            eval_at_ratio(ckpt, weights, calib.batches, row.rho, /*use_router=*/true, calib_split);
        row.realized_avg_bits = er.realized_avg_bits;
        row.out_mse = er.out_mse;
        sweep.row({fmt_double(target), fmt_double(row.rho), fmt_double(row.realized_avg_bits),
                   fmt_double(row.out_mse), fmt_double(er.prefix_violation_rate), ""});
        for (std::size_t li = 0; li < er.per_layer_bits.size(); ++li)
            block.row({fmt_double(target), std::to_string(li), fmt_double(er.per_layer_bits[li]),
                       fmt_double(er.per_layer_delta[li])});
        for (const auto& [bits, count] : er.token_bits_hist)
            hist.row({fmt_double(target), std::to_string(bits), std::to_string(count)});
        rows.push_back(row);
    }
    return rows;
}

struct MigrationOutcome {
    double bit_a = 0.0;
    double bit_b = 0.0;
    double top_frac = 0.0;
    double overlap_static = 0.0;
    double overlap_routed = 0.0;
};

inline void dump_errors(const std::string& path, const std::vector<double>& err) {
    CsvWriter w(path, {"token", "l2_error"});
    for (std::size_t i = 0; i < err.size(); ++i) w.row({std::to_string(i), fmt_double(err[i])});
}

// Per-token output errors at two budgets, under router-driven and static
// gating; the overlap of their top-quantile outlier sets quantifies migration.
inline MigrationOutcome migration_report(const Checkpoint& ckpt, double bit_a, double bit_b,
                                         double top_frac, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const RunConfig& cfg = ckpt.config;
    std::vector<Matrix> weights = gen_model(cfg);
    CalibSet calib = gen_calibset(cfg);

    double rho_a = router::ratio_from_target_bits(bit_a, cfg.slice_bits);
    double rho_b = router::ratio_from_target_bits(bit_b, cfg.slice_bits);

    EvalResult routed_a = eval_at_ratio(ckpt, weights, calib.batches, rho_a, true);
    EvalResult routed_b = eval_at_ratio(ckpt, weights, calib.batches, rho_b, true);
    EvalResult static_a = eval_at_ratio(ckpt, weights, calib.batches, rho_a, false);
    EvalResult static_b = eval_at_ratio(ckpt, weights, calib.batches, rho_b, false);

    dump_errors(out_dir + "/errors_routed_a.csv", routed_a.per_token_err);
    dump_errors(out_dir + "/errors_routed_b.csv", routed_b.per_token_err);
    dump_errors(out_dir + "/errors_static_a.csv", static_a.per_token_err);
    dump_errors(out_dir + "/errors_static_b.csv", static_b.per_token_err);

    MigrationOutcome out;
    out.bit_a = bit_a;
    out.bit_b = bit_b;
    out.top_frac = top_frac;
    out.overlap_routed = slicer::migration_overlap(routed_a.per_token_err, routed_b.per_token_err, top_frac);
    out.overlap_static = slicer::migration_overlap(static_a.per_token_err, static_b.per_token_err, top_frac);

    CsvWriter w(out_dir + "/migration.csv",
                {"bit_a", "bit_b", "top_frac", "overlap_static", "overlap_routed",
                 "realized_bits_routed_a", "realized_bits_routed_b"});
    w.row({fmt_double(bit_a), fmt_double(bit_b), fmt_double(top_frac), fmt_double(out.overlap_static),
           fmt_double(out.overlap_routed), fmt_double(routed_a.realized_avg_bits),
           fmt_double(routed_b.realized_avg_bits)});
    return out;
}

// Packing audit: round-trips every layer's planes and reports sizes.
inline void pack_report(const Checkpoint& ckpt, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    CsvWriter w(out_dir + "/pack.csv",
                {"layer", "out_dim", "in_dim", "bits", "words_per_row", "plane_words", "payload_bytes",
                 "roundtrip_ok"});
    for (std::size_t li = 0; li < ckpt.layers.size(); ++li) {
        const auto& rec = ckpt.layers[li];
        Codes codes = bitplane::unpack(rec.planes);
        bitplane::PackedPlanes repacked = bitplane::pack_bit_major(codes, rec.planes.bits);
        bool ok = repacked.planes == rec.planes.planes;
        std::size_t plane_words = rec.planes.out * rec.planes.words_per_row;
        w.row({std::to_string(li), std::to_string(rec.planes.out), std::to_string(rec.planes.in),
               std::to_string(rec.planes.bits), std::to_string(rec.planes.words_per_row),
               std::to_string(plane_words),
               std::to_string(plane_words * 8 * static_cast<std::size_t>(rec.planes.bits)),
               ok ? "1" : "0"});
    }
}

}  // namespace mobi::bench
