#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "mobi/common.hpp"

// Floor-aligned scalar quantizer with centered dequantization, shared by every
// bit slice. Codes are obtained as clamp(floor(x/s + z), 0, 2^b - 1) and mapped
// back to s * (code - z + 0.5); the floor keeps integer codes nested across bit
// widths and the +0.5 shift centers each bin.
namespace mobi::qcore {

inline constexpr double kScaleEps = 1e-8;
inline constexpr std::size_t kDefaultGroupSize = 128;

// Group-wise quantizer parameterization. Groups run along each row of the
// weight: group_of(r, c) = r * groups_per_row + c / group_size, so a group
// never spans two output rows and the last group of a row may be partial.
struct QuantParams {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t group_size = kDefaultGroupSize;
    int bits = 0;
    std::vector<double> scale;  // per group, > 0
    std::vector<double> zero;   // per group, continuous (not rounded)

    std::size_t groups_per_row() const { return (cols + group_size - 1) / group_size; }
    std::size_t num_groups() const { return rows * groups_per_row(); }
    std::size_t group_of(std::size_t r, std::size_t c) const {
        return r * groups_per_row() + c / group_size;
    }
    double qmax() const { return static_cast<double>((1 << bits) - 1); }

    void validate() const {
        MOBI_CHECK(bits >= 1 && bits <= 8, "QuantParams: bits must be in [1,8], got " << bits);
        MOBI_CHECK(group_size >= 1, "QuantParams: group_size must be >= 1");
        MOBI_CHECK(scale.size() == num_groups() && zero.size() == num_groups(),
                   "QuantParams: expected " << num_groups() << " groups, got " << scale.size()
                                            << " scales / " << zero.size() << " zeros");
        for (std::size_t g = 0; g < scale.size(); ++g) {
            MOBI_CHECK(std::isfinite(scale[g]) && scale[g] > 0.0,
                       "QuantParams: non-positive scale at group " << g);
            MOBI_CHECK(std::isfinite(zero[g]), "QuantParams: non-finite zero at group " << g);
        }
    }
};

// Learnable clipping, two scalars per group, squashed to (0,1) fractions.
struct ClipParams {
    std::vector<double> gamma_lo;
    std::vector<double> gamma_hi;

    // squash(gamma) == 1 to double precision at this init, so training starts
    // from the unclipped range.
    static ClipParams identity_init(std::size_t num_groups, double gamma0 = 40.0) {
        ClipParams cp;
        cp.gamma_lo.assign(num_groups, gamma0);
        cp.gamma_hi.assign(num_groups, gamma0);
        return cp;
    }
};

inline double squash(double gamma) { return sigmoid(gamma); }
inline double squash_grad(double gamma) {
    double s = sigmoid(gamma);
    return s * (1.0 - s);
}

// Per-group range statistics of the frozen weight; the clip anchor is zero
// clamped into [min, max], so clipping always shrinks the range from the far
// ends toward the values nearest zero.
struct GroupStats {
    std::vector<double> min;
    std::vector<double> max;
    std::vector<double> ref;

    static GroupStats from_weights(const Matrix& w, std::size_t group_size) {
        QuantParams shape;
        shape.rows = w.rows();
        shape.cols = w.cols();
        shape.group_size = group_size;
        GroupStats gs;
        std::size_t n = shape.num_groups();
        gs.min.assign(n, 0.0);
        gs.max.assign(n, 0.0);
        gs.ref.assign(n, 0.0);
        std::vector<bool> seen(n, false);
        for (std::size_t r = 0; r < w.rows(); ++r) {
            for (std::size_t c = 0; c < w.cols(); ++c) {
                std::size_t g = shape.group_of(r, c);
                double v = w(r, c);
                MOBI_CHECK(std::isfinite(v), "GroupStats: non-finite weight at (" << r << "," << c << ")");
                if (!seen[g]) {
                    gs.min[g] = v;
                    gs.max[g] = v;
                    seen[g] = true;
                } else {
                    gs.min[g] = std::min(gs.min[g], v);
                    gs.max[g] = std::max(gs.max[g], v);
                }
            }
        }
        for (std::size_t g = 0; g < n; ++g) {
            gs.ref[g] = std::min(std::max(0.0, gs.min[g]), gs.max[g]);
        }
        return gs;
    }
};

inline double clip_lo_of(const GroupStats& gs, const ClipParams& cp, std::size_t g) {
    return gs.ref[g] + squash(cp.gamma_lo[g]) * (gs.min[g] - gs.ref[g]);
}
inline double clip_hi_of(const GroupStats& gs, const ClipParams& cp, std::size_t g) {
    return gs.ref[g] + squash(cp.gamma_hi[g]) * (gs.max[g] - gs.ref[g]);
}

// Derives the base-slice QuantParams from the clipping state. Constant groups
// get the epsilon scale floor.
inline QuantParams params_from_clip(const Matrix& w, const GroupStats& gs, const ClipParams& cp,
                                    int bits, std::size_t group_size = kDefaultGroupSize) {
    MOBI_CHECK(w.size() > 0, "params_from_clip: empty weight");
    MOBI_CHECK(bits >= 1 && bits <= 8, "params_from_clip: bits must be in [1,8], got " << bits);
    QuantParams qp;
    qp.rows = w.rows();
    qp.cols = w.cols();
    qp.group_size = group_size;
    qp.bits = bits;
    std::size_t n = qp.num_groups();
    MOBI_CHECK(gs.min.size() == n && cp.gamma_lo.size() == n && cp.gamma_hi.size() == n,
               "params_from_clip: group count mismatch");
    qp.scale.resize(n);
    qp.zero.resize(n);
    double qmax = static_cast<double>((1 << bits) - 1);
    for (std::size_t g = 0; g < n; ++g) {
        double lo = clip_lo_of(gs, cp, g);
        double hi = clip_hi_of(gs, cp, g);
        double s = (hi - lo) / qmax;
        if (!(s > kScaleEps)) s = kScaleEps;
        qp.scale[g] = s;
        qp.zero[g] = -lo / s;
    }
    return qp;
}

// Convenience for a single free-standing group (used by tests and oracles).
inline QuantParams params_from_clip(const std::vector<double>& group, const ClipParams& cp,
                                    int bits) {
    Matrix w(1, group.size());
    for (std::size_t i = 0; i < group.size(); ++i) w[i] = group[i];
    GroupStats gs = GroupStats::from_weights(w, group.size());
    return params_from_clip(w, gs, cp, bits, group.size());
}

// clamp(floor(x/s + z), 0, 2^b - 1), element-wise with the element's group
// parameters.
inline Codes quantize_floor(const Matrix& x, const QuantParams& qp) {
    qp.validate();
    MOBI_CHECK(x.rows() == qp.rows && x.cols() == qp.cols,
               "quantize_floor: shape mismatch " << x.rows() << "x" << x.cols() << " vs params "
                                                 << qp.rows << "x" << qp.cols);
    Codes out(x.rows(), x.cols());
    const double qmax = qp.qmax();
    for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t c = 0; c < x.cols(); ++c) {
            double v = x(r, c);
            MOBI_CHECK(std::isfinite(v), "quantize_floor: non-finite input at (" << r << "," << c << ")");
            std::size_t g = qp.group_of(r, c);
            double u = std::floor(v / qp.scale[g] + qp.zero[g]);
            u = std::min(std::max(u, 0.0), qmax);
            out(r, c) = static_cast<std::uint8_t>(u);
        }
    }
    return out;
}

// s * (code - z + 0.5) per element.
inline Matrix dequantize_centered(const Codes& codes, const QuantParams& qp) {
    qp.validate();
    MOBI_CHECK(codes.rows() == qp.rows && codes.cols() == qp.cols,
               "dequantize_centered: shape mismatch");
    Matrix out(codes.rows(), codes.cols());
    const int qmax = (1 << qp.bits) - 1;
    for (std::size_t r = 0; r < codes.rows(); ++r) {
        for (std::size_t c = 0; c < codes.cols(); ++c) {
            int code = codes(r, c);
            MOBI_CHECK(code >= 0 && code <= qmax,
                       "dequantize_centered: code " << code << " out of [0," << qmax << "] at ("
                                                    << r << "," << c << ")");
            std::size_t g = qp.group_of(r, c);
            out(r, c) = qp.scale[g] * (static_cast<double>(code) - qp.zero[g] + 0.5);
        }
    }
    return out;
}

// Straight-through gradient mask: upstream passes where x/s + z lies strictly
// inside [0, 2^b - 1], zero elsewhere.
inline Matrix quant_grad_ste(const Matrix& upstream, const Matrix& x, const QuantParams& qp) {
    MOBI_CHECK(upstream.same_shape(x), "quant_grad_ste: shape mismatch");
    MOBI_CHECK(x.rows() == qp.rows && x.cols() == qp.cols, "quant_grad_ste: params shape mismatch");
    Matrix out(x.rows(), x.cols());
    const double qmax = qp.qmax();
    for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t c = 0; c < x.cols(); ++c) {
            std::size_t g = qp.group_of(r, c);
            double u = x(r, c) / qp.scale[g] + qp.zero[g];
            out(r, c) = (u > 0.0 && u < qmax) ? upstream(r, c) : 0.0;
        }
    }
    return out;
}

}  // namespace mobi::qcore
