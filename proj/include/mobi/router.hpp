#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <tuple>
#include <vector>

#include "mobi/common.hpp"
#include "mobi/slicer.hpp"

// Token-level bit routing. A 2-layer scorer assigns each token one score per
// residual slice (slice 1 is the always-on shared expert and is never routed).
// During training the scores pass through a temperature-annealed sigmoid that
// hardens into the exact indicator 1(S > 0) at the final step; at inference a
// threshold delta shifts the indicator to trade precision for compute.
namespace mobi::router {

// Logarithmic temperature annealing: tau(1) = 1, tau(t) strictly increasing,
// tau(L) handled as an exact indicator rather than a large float.
struct GateSchedule {
    std::size_t total_steps = 1;

    double tau(std::size_t t) const {
        MOBI_CHECK(t >= 1 && t <= total_steps, "GateSchedule: step " << t << " outside [1," << total_steps << "]");
        MOBI_CHECK(t < total_steps, "GateSchedule: tau(L) is infinite; use the indicator branch");
        double ll = std::log(static_cast<double>(total_steps));
        return ll / (ll - std::log(static_cast<double>(t)));
    }
};

struct RouterState {
    Matrix w1;               // d x h
    std::vector<double> b1;  // h
    Matrix w2;               // h x n_routed
    std::vector<double> b2;  // n_routed
    double threshold = 0.0;  // per-layer delta, default 0
    std::size_t step = 1;    // temperature position t
    std::size_t total_steps = 1;

    std::size_t input_dim() const { return w1.rows(); }
    std::size_t hidden_dim() const { return w1.cols(); }
    std::size_t n_routed() const { return w2.cols(); }

    // Hidden layer seeded at 1/sqrt(d) scale; output layer exactly zero so the
    // initial soft gate is 0.5 everywhere.
    static RouterState init(std::size_t d, std::size_t n_routed, std::size_t total_steps, Rng& rng,
                            std::size_t hidden = 0) {
        RouterState rs;
        std::size_t h = hidden ? hidden : std::max<std::size_t>(1, d / 4);
        rs.w1 = Matrix(d, h);
        double sd = 1.0 / std::sqrt(static_cast<double>(d));
        for (std::size_t i = 0; i < rs.w1.size(); ++i) rs.w1[i] = sd * rng.normal();
        rs.b1.assign(h, 0.0);
        rs.w2 = Matrix(h, n_routed, 0.0);
        rs.b2.assign(n_routed, 0.0);
        rs.total_steps = total_steps;
        return rs;
    }
};

// S = silu(X w1 + b1) w2 + b2, rows are tokens.
inline Matrix score(const Matrix& x, const RouterState& rs) {
    MOBI_CHECK(x.cols() == rs.input_dim(),
               "score: token dim " << x.cols() << " != router input dim " << rs.input_dim());
    for (std::size_t i = 0; i < x.size(); ++i)
        MOBI_CHECK(std::isfinite(x[i]), "score: non-finite input at flat index " << i);
    Matrix hidden = matmul(x, rs.w1);
    for (std::size_t r = 0; r < hidden.rows(); ++r)
        for (std::size_t c = 0; c < hidden.cols(); ++c)
            hidden(r, c) = silu(hidden(r, c) + rs.b1[c]);
    Matrix s = matmul(hidden, rs.w2);
    for (std::size_t r = 0; r < s.rows(); ++r)
        for (std::size_t c = 0; c < s.cols(); ++c) s(r, c) += rs.b2[c];
    return s;
}

// G = sigmoid(tau(t) * S); at t = L the exact indicator 1(S > 0).
inline Matrix gate_soft(const Matrix& s, const GateSchedule& sched, std::size_t t) {
    MOBI_CHECK(t >= 1 && t <= sched.total_steps,
               "gate_soft: step " << t << " outside [1," << sched.total_steps << "]");
    Matrix g(s.rows(), s.cols());
    if (t == sched.total_steps) {
        for (std::size_t i = 0; i < s.size(); ++i) g[i] = s[i] > 0.0 ? 1.0 : 0.0;
        return g;
    }
    double tau = sched.tau(t);
    for (std::size_t i = 0; i < s.size(); ++i) g[i] = sigmoid(tau * s[i]);
    return g;
}

// G = 1((S - delta) > 0).
inline Matrix gate_hard(const Matrix& s, double delta) {
    Matrix g(s.rows(), s.cols());
    for (std::size_t i = 0; i < s.size(); ++i) g[i] = (s[i] - delta) > 0.0 ? 1.0 : 0.0;
    return g;
}

enum class GateMode { kSoft, kHard };

// Y_i = W_1^T X_i + sum_{e>=2} W_e^T (G_{i,e-1} X_i). Gating a slice scales its
// linear response, so the gate multiplies the per-slice output row. Gates that
// are exactly 0 or 1 skip or copy, which makes hard and soft gating bit-equal
// on binary gate matrices.
inline Matrix forward_elastic(const Matrix& x, const slicer::SliceStack& stack, const Matrix& gates,
                              GateMode mode) {
    const std::size_t n_routed = stack.num_slices() - 1;
    MOBI_CHECK(gates.rows() == x.rows() && gates.cols() == n_routed,
               "forward_elastic: gate shape " << gates.rows() << "x" << gates.cols() << " != "
                                              << x.rows() << "x" << n_routed);
    if (mode == GateMode::kHard) {
        for (std::size_t i = 0; i < gates.size(); ++i)
            MOBI_CHECK(gates[i] == 0.0 || gates[i] == 1.0, "forward_elastic: hard gate not binary");
    }
    Matrix w1 = slicer::reconstruct(stack, 1);
    Matrix out = matmul_nt(x, w1);
    for (std::size_t e = 2; e <= stack.num_slices(); ++e) {
        qcore::QuantParams qp = stack.slice_params(e);
        Matrix we = qcore::dequantize_centered(stack.slices[e - 1], qp);
        Matrix pe = matmul_nt(x, we);
        for (std::size_t i = 0; i < x.rows(); ++i) {
            double g = gates(i, e - 2);
            if (g == 0.0) continue;
            if (g == 1.0) {
                for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += pe(i, j);
            } else {
                for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += g * pe(i, j);
            }
        }
    }
    return out;
}

// (1/T) sum_i [ b_1 + sum_j 1(G_{i,j} > 0.5) b_{j+1} ]; slice 1 always counts.
inline double avg_bits(const Matrix& gates, const std::vector<int>& slice_bits) {
    MOBI_CHECK(!slice_bits.empty(), "avg_bits: empty slice_bits");
    MOBI_CHECK(gates.rows() > 0, "avg_bits: no tokens");
    MOBI_CHECK(gates.cols() + 1 == slice_bits.size(),
               "avg_bits: gate columns " << gates.cols() << " != residual slices " << slice_bits.size() - 1);
    for (std::size_t i = 0; i < gates.size(); ++i)
        MOBI_CHECK(gates[i] >= 0.0 && gates[i] <= 1.0, "avg_bits: gate outside [0,1]");
    double total = 0.0;
    for (std::size_t i = 0; i < gates.rows(); ++i) {
        double bits = static_cast<double>(slice_bits[0]);
        for (std::size_t j = 0; j < gates.cols(); ++j)
            if (gates(i, j) > 0.5) bits += static_cast<double>(slice_bits[j + 1]);
        total += bits;
    }
    return total / static_cast<double>(gates.rows());
}

// rho = (target - b_msb) / sum of residual slice bits.
inline double ratio_from_target_bits(double target, const std::vector<int>& slice_bits) {
    MOBI_CHECK(slice_bits.size() >= 2, "ratio_from_target_bits: need at least one residual slice");
    double b_msb = static_cast<double>(slice_bits[0]);
    double resid = 0.0;
    for (std::size_t e = 1; e < slice_bits.size(); ++e) resid += static_cast<double>(slice_bits[e]);
    MOBI_CHECK(target >= b_msb && target <= b_msb + resid,
               "ratio_from_target_bits: target " << target << " outside [" << b_msb << ","
                                                 << b_msb + resid << "]");
    return (target - b_msb) / resid;
}

// delta = (1-rho)-quantile of the pooled scores: the largest floor(rho * N)
// scores sit strictly above it, so the realized active fraction is within 1/N
// of rho (up to ties). rho = 1 returns a threshold below the minimum score.
inline double calibrate_threshold(std::vector<double> scores, double rho) {
    MOBI_CHECK(!scores.empty(), "calibrate_threshold: empty score sample");
    MOBI_CHECK(rho >= 0.0 && rho <= 1.0, "calibrate_threshold: rho " << rho << " outside [0,1]");
    std::sort(scores.begin(), scores.end(), std::greater<double>());
    std::size_t k = static_cast<std::size_t>(std::floor(rho * static_cast<double>(scores.size()) + 1e-9));
    if (k >= scores.size()) return scores.back() - 1.0;
    return scores[k];
}

// Pooled per-layer calibration (default), or per-slice thresholds when the
// per_slice extension flag is set.
inline std::vector<double> calibrate_thresholds(const Matrix& pooled_scores, double rho,
                                                bool per_slice = false) {
    MOBI_CHECK(pooled_scores.size() > 0, "calibrate_thresholds: empty score sample");
    if (!per_slice) {
        std::vector<double> flat(pooled_scores.vec());
        return {calibrate_threshold(std::move(flat), rho)};
    }
    std::vector<double> out;
    for (std::size_t j = 0; j < pooled_scores.cols(); ++j) {
        std::vector<double> col(pooled_scores.rows());
        for (std::size_t i = 0; i < pooled_scores.rows(); ++i) col[i] = pooled_scores(i, j);
        out.push_back(calibrate_threshold(std::move(col), rho));
    }
    return out;
}

}  // namespace mobi::router
