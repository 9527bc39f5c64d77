#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "mobi/common.hpp"
#include "mobi/qcore.hpp"
#include "mobi/router.hpp"
#include "mobi/slicer.hpp"

// Layer-wise two-stage calibration. Stage 1 stabilizes the shared MSB slice by
// matching the full-precision layer output; stage 2 jointly trains the
// clipping parameters and the router against the budget-regularized objective.
// Analytic gradients treat integer codes as locally constant (the floor output
// is a step function of the parameters), which is exactly what central finite
// differences measure away from bin boundaries.
namespace mobi::trainer {

enum class ScheduleShape { kLogarithmic, kLinear, kCosine, kExponential };

inline ScheduleShape shape_from_string(const std::string& s) {
    if (s == "log" || s == "logarithmic") return ScheduleShape::kLogarithmic;
    if (s == "linear") return ScheduleShape::kLinear;
    if (s == "cosine") return ScheduleShape::kCosine;
    if (s == "exp" || s == "exponential") return ScheduleShape::kExponential;
    fail("schedule shape must be one of log|linear|cosine|exp, got '" + s + "'");
}

inline std::string shape_to_string(ScheduleShape s) {
    switch (s) {
        case ScheduleShape::kLogarithmic: return "log";
        case ScheduleShape::kLinear: return "linear";
        case ScheduleShape::kCosine: return "cosine";
        case ScheduleShape::kExponential: return "exp";
    }
    return "?";
}

// Decaying target bit-width b(t) inside the regularizer.
struct BudgetSchedule {
    double b_init = 8.0;
    double b_target = 3.0;
    std::size_t total_steps = 1;
    ScheduleShape shape = ScheduleShape::kLogarithmic;
    double reg_weight = 1e-5;
};

inline double schedule_value(const BudgetSchedule& sched, std::size_t t) {
    MOBI_CHECK(t >= 1 && t <= sched.total_steps,
               "schedule_value: step " << t << " outside [1," << sched.total_steps << "]");
    const double bi = sched.b_init;
    const double bt = sched.b_target;
    const double frac = static_cast<double>(t) / static_cast<double>(sched.total_steps);
    switch (sched.shape) {
        case ScheduleShape::kLogarithmic: {
            if (t == sched.total_steps) return bt;
            double ll = std::log(static_cast<double>(sched.total_steps));
            return bi - (bi - bt) * std::log(static_cast<double>(t)) / ll;
        }
        case ScheduleShape::kLinear:
            return bi - (bi - bt) * frac;
        case ScheduleShape::kCosine:
            return bt + (bi - bt) * (1.0 + std::cos(M_PI * frac)) / 2.0;
        case ScheduleShape::kExponential:
            MOBI_CHECK(bi > 0.0 && bt > 0.0, "schedule_value: exponential shape needs positive bits");
            return bi * std::pow(bt / bi, frac);
    }
    fail("schedule_value: unknown shape");
}

// (AvgBits - b(t)) * ||G||_1 with AvgBits treated as a constant coefficient.
inline double reg_loss(const Matrix& gates, const std::vector<int>& slice_bits,
                       const BudgetSchedule& sched, std::size_t t) {
    double coeff = router::avg_bits(gates, slice_bits) - schedule_value(sched, t);
    double l1 = 0.0;
    for (std::size_t i = 0; i < gates.size(); ++i) l1 += gates[i];
    return coeff * l1;
}

struct TrainConfig {
    std::size_t epochs = 20;
    std::size_t nsamples = 128;
    std::size_t batch_size = 1;
    double lr_clip = 5e-3;
    double lr_router = 1e-5;
    double weight_decay = 0.0;
    double gamma_init = 4.0;  // squash(4) = 0.982, near-identity with live gradient
    bool stage1_warmup_only = false;
    std::vector<int> slice_bits{2, 2, 2, 2};
    std::size_t group_size = qcore::kDefaultGroupSize;
    std::uint64_t seed = 1;

    std::size_t global_steps() const {
        MOBI_CHECK(batch_size >= 1 && nsamples >= batch_size, "TrainConfig: bad nsamples/batch_size");
        return (nsamples / batch_size) * epochs;
    }
};

// Decoupled weight decay Adam over one flat parameter vector.
class AdamW {
public:
    AdamW() = default;
    AdamW(std::size_t n, double lr, double wd = 0.0) : lr_(lr), wd_(wd), m_(n, 0.0), v_(n, 0.0) {}

    void step(std::vector<double>& params, const std::vector<double>& grads) {
        MOBI_CHECK(params.size() == m_.size() && grads.size() == m_.size(), "AdamW: size mismatch");
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
            v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i] * grads[i];
            double mh = m_[i] / bc1;
            double vh = v_[i] / bc2;
            params[i] -= lr_ * (mh / (std::sqrt(vh) + eps_) + wd_ * params[i]);
        }
    }

private:
    double lr_ = 1e-3;
    double wd_ = 0.0;
    double beta1_ = 0.9;
    double beta2_ = 0.999;
    double eps_ = 1e-8;
    std::vector<double> m_;
    std::vector<double> v_;
    std::size_t t_ = 0;
};

// One quantized linear layer under calibration. The pretrained weight and its
// group statistics are frozen; gammas and the router are what training moves.
struct QuantLayer {
    Matrix w;  // out x in, frozen
    std::size_t group_size = qcore::kDefaultGroupSize;
    std::vector<int> slice_bits;
    qcore::GroupStats stats;
    qcore::ClipParams clip;
    router::RouterState rs;

    std::size_t out_dim() const { return w.rows(); }
    std::size_t in_dim() const { return w.cols(); }

    static QuantLayer init(Matrix weight, const std::vector<int>& slice_bits, std::size_t group_size,
                           std::size_t total_steps, Rng& rng, double gamma_init,
                           std::size_t router_hidden = 0) {
        QuantLayer l;
        l.w = std::move(weight);
        l.group_size = group_size;
        l.slice_bits = slice_bits;
        l.stats = qcore::GroupStats::from_weights(l.w, group_size);
        qcore::QuantParams shape;
        shape.rows = l.w.rows();
        shape.cols = l.w.cols();
        shape.group_size = group_size;
        l.clip = qcore::ClipParams::identity_init(shape.num_groups(), gamma_init);
        l.rs = router::RouterState::init(l.w.cols(), slice_bits.size() - 1, total_steps, rng,
                                         router_hidden);
        return l;
    }

    qcore::QuantParams base_params() const {
        return qcore::params_from_clip(w, stats, clip, slice_bits[0], group_size);
    }
    slicer::SliceStack decompose() const { return slicer::decompose(w, base_params(), slice_bits); }
};

inline double mse(const Matrix& a, const Matrix& b) {
    MOBI_CHECK(a.same_shape(b), "mse: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.size());
}

struct JointOptions {
    bool force_gates_on = false;  // ablation: bypass the router, all residuals active
};

// Everything the backward pass needs from one stage-2 forward evaluation.
struct JointForward {
    slicer::SliceStack stack;
    std::vector<Matrix> slice_out;  // P_e = X * dequant(slice e)^T
    Matrix hidden_pre;
    Matrix hidden_act;
    Matrix scores;
    Matrix gates;
    Matrix y_hat;
    double tau = 0.0;
    bool hard = false;
    double data_term = 0.0;
    double reg_term = 0.0;  // unweighted (AvgBits - b(t)) * ||G||_1
    double avg_bits = 0.0;
    double sched_b = 0.0;
    double loss = 0.0;
};

inline JointForward joint_forward(const QuantLayer& layer, const Matrix& x, const Matrix& y_fp,
                                  const BudgetSchedule& sched, std::size_t t,
                                  const JointOptions& opt = {}) {
    MOBI_CHECK(x.cols() == layer.in_dim(), "joint_forward: input dim mismatch");
    MOBI_CHECK(y_fp.rows() == x.rows() && y_fp.cols() == layer.out_dim(),
               "joint_forward: reference output shape mismatch");
    JointForward f;
    f.stack = layer.decompose();
    const std::size_t n_slices = f.stack.num_slices();

    f.slice_out.reserve(n_slices);
    for (std::size_t e = 1; e <= n_slices; ++e) {
        Matrix we = qcore::dequantize_centered(f.stack.slices[e - 1], f.stack.slice_params(e));
        f.slice_out.push_back(matmul_nt(x, we));
    }

    const std::size_t nr = n_slices - 1;
    if (opt.force_gates_on) {
        f.gates = Matrix(x.rows(), nr, 1.0);
        f.scores = Matrix(x.rows(), nr, 0.0);
        f.hidden_pre = Matrix(x.rows(), layer.rs.hidden_dim(), 0.0);
        f.hidden_act = f.hidden_pre;
        f.hard = true;
    } else {
        f.hidden_pre = matmul(x, layer.rs.w1);
        for (std::size_t r = 0; r < f.hidden_pre.rows(); ++r)
            for (std::size_t c = 0; c < f.hidden_pre.cols(); ++c) f.hidden_pre(r, c) += layer.rs.b1[c];
        f.hidden_act = f.hidden_pre;
        for (std::size_t i = 0; i < f.hidden_act.size(); ++i) f.hidden_act[i] = silu(f.hidden_act[i]);
        f.scores = matmul(f.hidden_act, layer.rs.w2);
        for (std::size_t r = 0; r < f.scores.rows(); ++r)
            for (std::size_t c = 0; c < f.scores.cols(); ++c) f.scores(r, c) += layer.rs.b2[c];
        router::GateSchedule gs{sched.total_steps};
        f.hard = (t == sched.total_steps);
        if (!f.hard) f.tau = gs.tau(t);
        f.gates = router::gate_soft(f.scores, gs, t);
    }

    f.y_hat = f.slice_out[0];
    for (std::size_t e = 2; e <= n_slices; ++e) {
        const Matrix& pe = f.slice_out[e - 1];
        for (std::size_t i = 0; i < x.rows(); ++i) {
            double g = f.gates(i, e - 2);
            if (g == 0.0) continue;
            if (g == 1.0) {
                for (std::size_t j = 0; j < f.y_hat.cols(); ++j) f.y_hat(i, j) += pe(i, j);
            } else {
                for (std::size_t j = 0; j < f.y_hat.cols(); ++j) f.y_hat(i, j) += g * pe(i, j);
            }
        }
    }

    f.data_term = mse(f.y_hat, y_fp);
    f.avg_bits = router::avg_bits(f.gates, layer.slice_bits);
    f.sched_b = schedule_value(sched, t);
    double l1 = 0.0;
    for (std::size_t i = 0; i < f.gates.size(); ++i) l1 += f.gates[i];
    f.reg_term = (f.avg_bits - f.sched_b) * l1;
    f.loss = f.data_term + sched.reg_weight * f.reg_term;
    return f;
}

struct JointGrads {
    std::vector<double> d_gamma_lo;
    std::vector<double> d_gamma_hi;
    Matrix d_w1;
    std::vector<double> d_b1;
    Matrix d_w2;
    std::vector<double> d_b2;
};

// Accumulates d(loss)/d(gamma) for the given per-slice dequant cotangents,
// with codes held constant: slice values are affine in (clip_lo, clip_hi)
// through the shared scale, plus the direct clip_lo shift of slice 1.
inline void accumulate_clip_grads(const QuantLayer& layer, const slicer::SliceStack& stack,
                                  const std::vector<Matrix>& d_slice, std::vector<double>& d_lo_gamma,
                                  std::vector<double>& d_hi_gamma) {
    const qcore::QuantParams& base = stack.base;
    const std::size_t n_groups = base.num_groups();
    const double qmax1 = base.qmax();
    std::vector<double> d_lo(n_groups, 0.0), d_hi(n_groups, 0.0);

    for (std::size_t e = 1; e <= stack.num_slices(); ++e) {
        const Codes& codes = stack.slices[e - 1];
        const Matrix& dm = d_slice[e - 1];
        if (dm.size() == 0) continue;
        const double unit = std::ldexp(1.0, -stack.bits_before(e));
        const double mid = e == 1 ? 0.0 : std::ldexp(1.0, stack.slice_bits[e - 1] - 1);
        for (std::size_t r = 0; r < codes.rows(); ++r) {
            for (std::size_t c = 0; c < codes.cols(); ++c) {
                double d = dm(r, c);
                if (d == 0.0) continue;
                std::size_t g = base.group_of(r, c);
                double frame = (codes(r, c) - mid + 0.5) * unit;  // dW_e/ds
                if (e == 1) {
                    // W_1 = s * (c + 0.5) + clip_lo
                    d_hi[g] += d * frame / qmax1;
                    d_lo[g] += d * (1.0 - frame / qmax1);
                } else {
                    d_hi[g] += d * frame / qmax1;
                    d_lo[g] -= d * frame / qmax1;
                }
            }
        }
    }

    d_lo_gamma.assign(n_groups, 0.0);
    d_hi_gamma.assign(n_groups, 0.0);
    for (std::size_t g = 0; g < n_groups; ++g) {
        double lo = qcore::clip_lo_of(layer.stats, layer.clip, g);
        double hi = qcore::clip_hi_of(layer.stats, layer.clip, g);
        bool floored = !((hi - lo) / qmax1 > qcore::kScaleEps);
        if (floored) continue;  // epsilon-pinned scale, handled below
        d_lo_gamma[g] = d_lo[g] * qcore::squash_grad(layer.clip.gamma_lo[g]) *
                        (layer.stats.min[g] - layer.stats.ref[g]);
        d_hi_gamma[g] = d_hi[g] * qcore::squash_grad(layer.clip.gamma_hi[g]) *
                        (layer.stats.max[g] - layer.stats.ref[g]);
    }

    // Epsilon-floored groups: W_1 = eps*(c + 0.5) + clip_lo with constant scale,
    // so only slice 1 moves, by exactly d(clip_lo).
    for (std::size_t g = 0; g < n_groups; ++g) {
        double lo = qcore::clip_lo_of(layer.stats, layer.clip, g);
        double hi = qcore::clip_hi_of(layer.stats, layer.clip, g);
        if ((hi - lo) / qmax1 > qcore::kScaleEps) continue;
        double d1 = 0.0;
        const Matrix& dm = d_slice[0];
        if (dm.size() != 0) {
            for (std::size_t r = 0; r < layer.w.rows(); ++r)
                for (std::size_t c = 0; c < layer.w.cols(); ++c)
                    if (base.group_of(r, c) == g) d1 += dm(r, c);
        }
        d_lo_gamma[g] = d1 * qcore::squash_grad(layer.clip.gamma_lo[g]) *
                        (layer.stats.min[g] - layer.stats.ref[g]);
        d_hi_gamma[g] = 0.0;
    }
}

inline JointGrads joint_backward(const QuantLayer& layer, const JointForward& f, const Matrix& x,
                                 const Matrix& y_fp, const BudgetSchedule& sched) {
    JointGrads g;
    const std::size_t n_slices = f.stack.num_slices();
    const std::size_t nr = n_slices - 1;
    const double inv_n = 1.0 / static_cast<double>(f.y_hat.size());

    Matrix resid(f.y_hat.rows(), f.y_hat.cols());
    for (std::size_t i = 0; i < resid.size(); ++i) resid[i] = 2.0 * inv_n * (f.y_hat[i] - y_fp[i]);

    // Slice cotangents: dL/dW_e = dP_e^T X with dP_e the gate-scaled residual.
    std::vector<Matrix> d_slice;
    d_slice.reserve(n_slices);
    d_slice.push_back(matmul_tn(resid, x));
    for (std::size_t e = 2; e <= n_slices; ++e) {
        Matrix dpe = resid;
        for (std::size_t i = 0; i < dpe.rows(); ++i) {
            double gate = f.gates(i, e - 2);
            for (std::size_t j = 0; j < dpe.cols(); ++j) dpe(i, j) *= gate;
        }
        d_slice.push_back(matmul_tn(dpe, x));
    }
    accumulate_clip_grads(layer, f.stack, d_slice, g.d_gamma_lo, g.d_gamma_hi);

    // Router path. dL/dG = data coupling + reg pressure (AvgBits detached).
    g.d_w1 = Matrix(layer.rs.w1.rows(), layer.rs.w1.cols(), 0.0);
    g.d_b1.assign(layer.rs.b1.size(), 0.0);
    g.d_w2 = Matrix(layer.rs.w2.rows(), layer.rs.w2.cols(), 0.0);
    g.d_b2.assign(layer.rs.b2.size(), 0.0);
    if (f.hard) return g;  // indicator gate: zero gradient almost everywhere

    Matrix d_gate(x.rows(), nr);
    const double reg_coeff = sched.reg_weight * (f.avg_bits - f.sched_b);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        for (std::size_t e = 0; e < nr; ++e) {
            double dot = 0.0;
            const Matrix& pe = f.slice_out[e + 1];
            for (std::size_t j = 0; j < resid.cols(); ++j) dot += resid(i, j) * pe(i, j);
            d_gate(i, e) = dot + reg_coeff;
        }
    }
    Matrix d_score(x.rows(), nr);
    for (std::size_t i = 0; i < d_score.size(); ++i) {
        double gv = f.gates[i];
        d_score[i] = d_gate[i] * f.tau * gv * (1.0 - gv);
    }
    g.d_w2 = matmul_tn(f.hidden_act, d_score);
    for (std::size_t i = 0; i < d_score.rows(); ++i)
        for (std::size_t c = 0; c < d_score.cols(); ++c) g.d_b2[c] += d_score(i, c);
    Matrix d_act = matmul_nt(d_score, layer.rs.w2);
    for (std::size_t i = 0; i < d_act.size(); ++i) d_act[i] *= silu_grad(f.hidden_pre[i]);
    g.d_w1 = matmul_tn(x, d_act);
    for (std::size_t i = 0; i < d_act.rows(); ++i)
        for (std::size_t c = 0; c < d_act.cols(); ++c) g.d_b1[c] += d_act(i, c);
    return g;
}

// Stage-1 forward: MSB-only output and loss.
struct MsbForward {
    slicer::SliceStack stack;  // only slice 1 is materialized
    Matrix y_msb;
    double loss = 0.0;
};

inline MsbForward msb_forward(const QuantLayer& layer, const Matrix& x, const Matrix& y_fp) {
    MsbForward f;
    qcore::QuantParams base = layer.base_params();
    f.stack.slice_bits = {layer.slice_bits[0]};
    f.stack.base = base;
    f.stack.slices.push_back(qcore::quantize_floor(layer.w, base));
    f.stack.clamp_counts.assign(1, 0);
    Matrix w1 = qcore::dequantize_centered(f.stack.slices[0], base);
    f.y_msb = matmul_nt(x, w1);
    f.loss = mse(f.y_msb, y_fp);
    return f;
}

inline void msb_backward(const QuantLayer& layer, const MsbForward& f, const Matrix& x,
                         const Matrix& y_fp, std::vector<double>& d_lo, std::vector<double>& d_hi) {
    const double inv_n = 1.0 / static_cast<double>(f.y_msb.size());
    Matrix resid(f.y_msb.rows(), f.y_msb.cols());
    for (std::size_t i = 0; i < resid.size(); ++i) resid[i] = 2.0 * inv_n * (f.y_msb[i] - y_fp[i]);
    std::vector<Matrix> d_slice;
    d_slice.push_back(matmul_tn(resid, x));
    accumulate_clip_grads(layer, f.stack, d_slice, d_lo, d_hi);
}

// Per-step training record, written to the line-delimited layer log.
struct LogRecord {
    std::size_t layer = 0;
    std::size_t step = 0;
    double loss = 0.0;
    double data_term = 0.0;
    double reg_term = 0.0;
    double avg_bits = 0.0;
    double b_sched = 0.0;
    double tau = 0.0;
    double msb_loss = 0.0;
};
using LogSink = std::function<void(const LogRecord&)>;

struct LayerReport {
    std::size_t layer = 0;
    double final_loss = 0.0;
    double final_data_term = 0.0;
    double final_avg_bits = 0.0;
    std::size_t clamp_count = 0;
    std::size_t steps_at_bound = 0;
    std::size_t total_steps = 0;
    std::vector<std::string> warnings;
};

// Gamma parameters flattened as [gamma_lo..., gamma_hi...] for the optimizer.
inline std::vector<double> flatten_clip(const qcore::ClipParams& cp) {
    std::vector<double> v(cp.gamma_lo);
    v.insert(v.end(), cp.gamma_hi.begin(), cp.gamma_hi.end());
    return v;
}
inline void unflatten_clip(const std::vector<double>& v, qcore::ClipParams& cp) {
    std::size_t n = cp.gamma_lo.size();
    std::copy(v.begin(), v.begin() + n, cp.gamma_lo.begin());
    std::copy(v.begin() + n, v.end(), cp.gamma_hi.begin());
}

inline std::vector<double> flatten_router(const router::RouterState& rs) {
    std::vector<double> v(rs.w1.vec());
    v.insert(v.end(), rs.b1.begin(), rs.b1.end());
    v.insert(v.end(), rs.w2.vec().begin(), rs.w2.vec().end());
    v.insert(v.end(), rs.b2.begin(), rs.b2.end());
    return v;
}
inline void unflatten_router(const std::vector<double>& v, router::RouterState& rs) {
    std::size_t i = 0;
    for (auto& x : rs.w1.vec()) x = v[i++];
    for (auto& x : rs.b1) x = v[i++];
    for (auto& x : rs.w2.vec()) x = v[i++];
    for (auto& x : rs.b2) x = v[i++];
}

// Runs the per-layer calibration loop: every global step does a stage-1 MSB update
// followed by a stage-2 joint update (or stage 1 alone first when the
// warmup-only variant is configured). Throws on divergence, leaving the
// parameters at their last finite-loss state.
class LayerTrainer {
public:
    LayerTrainer(QuantLayer& layer, const TrainConfig& cfg, const BudgetSchedule& sched,
                 std::size_t layer_index = 0, LogSink sink = nullptr)
            : layer_(layer),
              cfg_(cfg),
              sched_(sched),
              index_(layer_index),
              sink_(std::move(sink)),
              adam_clip_(flatten_clip(layer.clip).size(), cfg.lr_clip, cfg.weight_decay),
              adam_router_(flatten_router(layer.rs).size(), cfg.lr_router, cfg.weight_decay) {
        MOBI_CHECK(sched.total_steps == cfg.global_steps(),
                   "LayerTrainer: schedule steps " << sched.total_steps << " != config global steps "
                                                   << cfg.global_steps());
    }

    double stage1_step(const Matrix& x, const Matrix& y_fp) {
        MsbForward f = msb_forward(layer_, x, y_fp);
        check_finite(f.loss, "stage 1");
        std::vector<double> d_lo, d_hi;
        msb_backward(layer_, f, x, y_fp, d_lo, d_hi);
        std::vector<double> params = flatten_clip(layer_.clip);
        std::vector<double> grads(d_lo);
        grads.insert(grads.end(), d_hi.begin(), d_hi.end());
        adam_clip_.step(params, grads);
        unflatten_clip(params, layer_.clip);
        return f.loss;
    }

    double stage2_step(const Matrix& x, const Matrix& y_fp, std::size_t t, double msb_loss = 0.0) {
        JointForward f = joint_forward(layer_, x, y_fp, sched_, t);
        check_finite(f.loss, "stage 2");
        JointGrads g = joint_backward(layer_, f, x, y_fp, sched_);

        std::vector<double> cp = flatten_clip(layer_.clip);
        std::vector<double> cg(g.d_gamma_lo);
        cg.insert(cg.end(), g.d_gamma_hi.begin(), g.d_gamma_hi.end());
        adam_clip_.step(cp, cg);
        unflatten_clip(cp, layer_.clip);

        std::vector<double> rp = flatten_router(layer_.rs);
        std::vector<double> rg(g.d_w1.vec());
        rg.insert(rg.end(), g.d_b1.begin(), g.d_b1.end());
        rg.insert(rg.end(), g.d_w2.vec().begin(), g.d_w2.vec().end());
        rg.insert(rg.end(), g.d_b2.begin(), g.d_b2.end());
        adam_router_.step(rp, rg);
        unflatten_router(rp, layer_.rs);

        layer_.rs.step = t;
        layer_.rs.total_steps = sched_.total_steps;

        if (f.avg_bits == static_cast<double>(layer_.slice_bits[0]) ||
            f.avg_bits == static_cast<double>(std::accumulate(layer_.slice_bits.begin(),
                                                              layer_.slice_bits.end(), 0))) {
            ++steps_at_bound_;
        }
        if (sink_) {
            sink_(LogRecord{index_, t, f.loss, f.data_term, sched_.reg_weight * f.reg_term,
                            f.avg_bits, f.sched_b, f.tau, msb_loss});
        }
        last_ = f;
        return f.loss;
    }

    // Full two-stage loop over the calibration batches.
    LayerReport run(const std::vector<Matrix>& xs, const std::vector<Matrix>& ys) {
        MOBI_CHECK(!xs.empty() && xs.size() == ys.size(), "LayerTrainer: bad calibration batches");
        const std::size_t steps = cfg_.global_steps();
        if (cfg_.stage1_warmup_only) {
            for (std::size_t t = 1; t <= steps; ++t) {
                const std::size_t b = (t - 1) % xs.size();
                stage1_step(xs[b], ys[b]);
            }
            for (std::size_t t = 1; t <= steps; ++t) {
                const std::size_t b = (t - 1) % xs.size();
                stage2_step(xs[b], ys[b], t);
            }
        } else {
            for (std::size_t t = 1; t <= steps; ++t) {
                const std::size_t b = (t - 1) % xs.size();
                double msb_loss = stage1_step(xs[b], ys[b]);
                stage2_step(xs[b], ys[b], t, msb_loss);
            }
        }

        LayerReport rep;
        rep.layer = index_;
        rep.total_steps = steps;
        rep.steps_at_bound = steps_at_bound_;
        rep.final_loss = last_.loss;
        rep.final_data_term = last_.data_term;
        rep.final_avg_bits = last_.avg_bits;
        rep.clamp_count = last_.stack.total_clamped();
        if (5 * steps_at_bound_ > steps) {
            rep.warnings.push_back("avg_bits pinned at a bound for more than 20% of steps");
        }
        return rep;
    }

private:
    void check_finite(double loss, const char* stage) {
        if (!std::isfinite(loss)) {
            throw std::runtime_error(std::string("calibration diverged (") + stage + " loss is not finite) at layer " +
                                     std::to_string(index_) + "; parameters left at last finite state");
        }
    }

    QuantLayer& layer_;
    TrainConfig cfg_;
    BudgetSchedule sched_;
    std::size_t index_;
    LogSink sink_;
    AdamW adam_clip_;
    AdamW adam_router_;
    std::size_t steps_at_bound_ = 0;
    JointForward last_;
};

// Joint stage-2 loop run in isolation: assumes the MSB path is already
// stabilized, anneals over the full schedule, and leaves binary gates and
// committed slices behind. Returns the final slice stack.
inline slicer::SliceStack stage2_joint(QuantLayer& layer, const std::vector<Matrix>& xs,
                                       const std::vector<Matrix>& ys, const TrainConfig& cfg,
                                       const BudgetSchedule& sched, LogSink sink = nullptr,
                                       std::size_t layer_index = 0) {
    MOBI_CHECK(!xs.empty() && xs.size() == ys.size(), "stage2_joint: bad calibration batches");
    AdamW adam_clip(flatten_clip(layer.clip).size(), cfg.lr_clip, cfg.weight_decay);
    AdamW adam_router(flatten_router(layer.rs).size(), cfg.lr_router, cfg.weight_decay);
    for (std::size_t t = 1; t <= sched.total_steps; ++t) {
        const std::size_t b = (t - 1) % xs.size();
        JointForward f = joint_forward(layer, xs[b], ys[b], sched, t);
        if (!std::isfinite(f.loss))
            throw std::runtime_error("stage2_joint: loss diverged; parameters left at last finite state");
        JointGrads g = joint_backward(layer, f, xs[b], ys[b], sched);

        std::vector<double> cp = flatten_clip(layer.clip);
        std::vector<double> cg(g.d_gamma_lo);
        cg.insert(cg.end(), g.d_gamma_hi.begin(), g.d_gamma_hi.end());
        adam_clip.step(cp, cg);
        unflatten_clip(cp, layer.clip);

        std::vector<double> rp = flatten_router(layer.rs);
        std::vector<double> rg(g.d_w1.vec());
        rg.insert(rg.end(), g.d_b1.begin(), g.d_b1.end());
        rg.insert(rg.end(), g.d_w2.vec().begin(), g.d_w2.vec().end());
        rg.insert(rg.end(), g.d_b2.begin(), g.d_b2.end());
        adam_router.step(rp, rg);
        unflatten_router(rp, layer.rs);

        layer.rs.step = t;
        layer.rs.total_steps = sched.total_steps;
        if (sink)
            sink(LogRecord{layer_index, t, f.loss, f.data_term, sched.reg_weight * f.reg_term,
                           f.avg_bits, f.sched_b, f.tau, 0.0});
    }
    return layer.decompose();
}

// Stage-1-only calibration of a layer (MSB stabilization).
inline double stage1_msb(QuantLayer& layer, const std::vector<Matrix>& xs,
                         const std::vector<Matrix>& ys, const TrainConfig& cfg, std::size_t steps) {
    AdamW adam(flatten_clip(layer.clip).size(), cfg.lr_clip, cfg.weight_decay);
    double loss = 0.0;
    for (std::size_t t = 1; t <= steps; ++t) {
        const std::size_t b = (t - 1) % xs.size();
        MsbForward f = msb_forward(layer, xs[b], ys[b]);
        if (!std::isfinite(f.loss))
            throw std::runtime_error("stage1_msb: loss diverged; parameters left at last finite state");
        loss = f.loss;
        std::vector<double> d_lo, d_hi;
        msb_backward(layer, f, xs[b], ys[b], d_lo, d_hi);
        std::vector<double> params = flatten_clip(layer.clip);
        std::vector<double> grads(d_lo);
        grads.insert(grads.end(), d_hi.begin(), d_hi.end());
        adam.step(params, grads);
        unflatten_clip(params, layer.clip);
    }
    return loss;
}

// Central finite-difference audit of the joint objective's analytic gradients.
struct GradCheckReport {
    double max_rel_router = 0.0;
    double max_rel_clip = 0.0;
    std::size_t checked_router = 0;
    std::size_t checked_clip = 0;
    std::size_t excluded_clip = 0;
};

inline double rel_err(double a, double f) {
    double denom = std::max(std::abs(a), std::abs(f));
    if (denom < 1e-10) return 0.0;
    return std::abs(a - f) / denom;
}

inline GradCheckReport grad_check(const QuantLayer& layer, const Matrix& x, const Matrix& y_fp,
                                  const BudgetSchedule& sched, std::size_t t, double h = 1e-6,
                                  double boundary_margin = 1e-4) {
    MOBI_CHECK(t < sched.total_steps, "grad_check: needs t < L (soft gates)");
    JointForward f0 = joint_forward(layer, x, y_fp, sched, t);
    JointGrads g = joint_backward(layer, f0, x, y_fp, sched);

    auto loss_at = [&](const QuantLayer& l) { return joint_forward(l, x, y_fp, sched, t).loss; };

    GradCheckReport rep;

    // Router parameters: smooth path, every entry checked.
    {
        std::vector<double> analytic(g.d_w1.vec());
        analytic.insert(analytic.end(), g.d_b1.begin(), g.d_b1.end());
        analytic.insert(analytic.end(), g.d_w2.vec().begin(), g.d_w2.vec().end());
        analytic.insert(analytic.end(), g.d_b2.begin(), g.d_b2.end());
        std::vector<double> base = flatten_router(layer.rs);
        for (std::size_t i = 0; i < base.size(); ++i) {
            QuantLayer lp = layer;
            std::vector<double> v = base;
            v[i] = base[i] + h;
            unflatten_router(v, lp.rs);
            double up = loss_at(lp);
            v[i] = base[i] - h;
            unflatten_router(v, lp.rs);
            double dn = loss_at(lp);
            double fd = (up - dn) / (2.0 * h);
            rep.max_rel_router = std::max(rep.max_rel_router, rel_err(analytic[i], fd));
            ++rep.checked_router;
        }
    }

    // Clip parameters: exclude groups with any floor argument within the margin
    // of an effective integer boundary, where the loss is locally discontinuous.
    {
        std::vector<bool> near_boundary(layer.clip.gamma_lo.size(), false);
        slicer::SliceStack st = f0.stack;
        Matrix resid = layer.w;
        for (std::size_t e = 1; e <= st.num_slices(); ++e) {
            qcore::QuantParams qp = st.slice_params(e);
            const double qmax = qp.qmax();
            for (std::size_t r = 0; r < layer.w.rows(); ++r) {
                for (std::size_t c = 0; c < layer.w.cols(); ++c) {
                    std::size_t grp = qp.group_of(r, c);
                    double u = resid(r, c) / qp.scale[grp] + qp.zero[grp];
                    double nearest = std::round(u);
                    if (std::abs(u - nearest) < boundary_margin && nearest >= 0.0 && nearest <= qmax + 1.0) {
                        near_boundary[grp] = true;
                    }
                    double code = std::min(std::max(std::floor(u), 0.0), qmax);
                    resid(r, c) -= qp.scale[grp] * (code - qp.zero[grp] + 0.5);
                }
            }
        }

        std::vector<double> analytic(g.d_gamma_lo);
        analytic.insert(analytic.end(), g.d_gamma_hi.begin(), g.d_gamma_hi.end());
        std::vector<double> base = flatten_clip(layer.clip);
        const std::size_t n = layer.clip.gamma_lo.size();
        for (std::size_t i = 0; i < base.size(); ++i) {
            if (near_boundary[i % n]) {
                ++rep.excluded_clip;
                continue;
            }
            QuantLayer lp = layer;
            std::vector<double> v = base;
            v[i] = base[i] + h;
            unflatten_clip(v, lp.clip);
            double up = loss_at(lp);
            v[i] = base[i] - h;
            unflatten_clip(v, lp.clip);
            double dn = loss_at(lp);
            double fd = (up - dn) / (2.0 * h);
            rep.max_rel_clip = std::max(rep.max_rel_clip, rel_err(analytic[i], fd));
            ++rep.checked_clip;
        }
    }
    return rep;
}

// Layer-wise calibration over a stack of linear layers with an element-wise
// nonlinearity between them. Maintains full-precision and quantized activation
// streams; each layer is trained against its own FP linear output.
struct CalibrationResult {
    std::vector<QuantLayer> layers;
    std::vector<LayerReport> reports;
    // Quantized activation stream entering each layer (and the final output)
    // when capture_streams is requested; empty otherwise.
    std::vector<std::vector<Matrix>> stream_q;
};

inline Matrix silu_map(const Matrix& m) {
    Matrix out = m;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = silu(out[i]);
    return out;
}

inline CalibrationResult calibrate_model(const std::vector<Matrix>& weights,
                                         const std::vector<Matrix>& calib, const TrainConfig& cfg,
                                         const BudgetSchedule& sched, Rng& rng,
                                         LogSink sink = nullptr, bool capture_streams = false) {
    MOBI_CHECK(!weights.empty(), "calibrate_model: empty model");
    MOBI_CHECK(!calib.empty(), "calibrate_model: empty calibration set");
    CalibrationResult res;
    std::vector<Matrix> h_fp = calib;
    std::vector<Matrix> h_q = calib;

    for (std::size_t li = 0; li < weights.size(); ++li) {
        if (capture_streams) res.stream_q.push_back(h_q);
        std::vector<Matrix> y_fp;
        y_fp.reserve(h_fp.size());
        for (const Matrix& h : h_fp) y_fp.push_back(matmul_nt(h, weights[li]));

        QuantLayer layer = QuantLayer::init(weights[li], cfg.slice_bits, cfg.group_size,
                                            cfg.global_steps(), rng, cfg.gamma_init);
        LayerTrainer lt(layer, cfg, sched, li, sink);
        LayerReport rep;
        try {
            rep = lt.run(h_q, y_fp);
        } catch (const std::runtime_error& e) {
            throw std::runtime_error("layer " + std::to_string(li) + ": " + e.what());
        }

        // Propagate both streams; hard delta=0 gating is the trained end state.
        slicer::SliceStack stack = layer.decompose();
        const bool last = (li + 1 == weights.size());
        for (std::size_t i = 0; i < h_q.size(); ++i) {
            Matrix s = router::score(h_q[i], layer.rs);
            Matrix gates = router::gate_hard(s, layer.rs.threshold);
            Matrix yq = router::forward_elastic(h_q[i], stack, gates, router::GateMode::kHard);
            h_q[i] = last ? std::move(yq) : silu_map(yq);
            h_fp[i] = last ? y_fp[i] : silu_map(y_fp[i]);
        }

        res.layers.push_back(std::move(layer));
        res.reports.push_back(rep);
    }
    if (capture_streams) res.stream_q.push_back(h_q);
    return res;
}

}  // namespace mobi::trainer
