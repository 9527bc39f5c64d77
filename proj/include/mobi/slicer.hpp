#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <utility>
#include <vector>

#include "mobi/common.hpp"
#include "mobi/qcore.hpp"

// Recursive residual bit slicing. A weight is decomposed into E integer code
// tensors: slice 1 quantizes the weight itself, every further slice quantizes
// the residual left by the previous ones at a scale refined by s_{e+1} =
// s_e / 2^{b_e}. Residual slices use the fixed midpoint zero 2^{b_e - 1} so
// positive and negative corrections are symmetric.
//
// Reconstructions are computed as an exact "code frame" (a dyadic accumulation
// of integer codes in units of the base scale, which cannot round at <= 8
// total bits) followed by a single affine map through the base scale and zero.
// The truncation identity of the merged-code analysis is exact on the frames.
namespace mobi::slicer {

struct SliceStack {
    std::vector<Codes> slices;      // slice e codes, element of [0, 2^{b_e} - 1]
    std::vector<int> slice_bits;
    qcore::QuantParams base;        // slice-1 params; residual params are derived
    Codes clamp_mask;               // bit (e-1) set if slice e clamped that element
    std::vector<std::size_t> clamp_counts;

    std::size_t num_slices() const { return slices.size(); }
    std::size_t rows() const { return base.rows; }
    std::size_t cols() const { return base.cols; }

    int total_bits() const { return std::accumulate(slice_bits.begin(), slice_bits.end(), 0); }
    // Bits accumulated before slice e (1-based).
    int bits_before(std::size_t e) const {
        int acc = 0;
        for (std::size_t j = 0; j + 1 < e; ++j) acc += slice_bits[j];
        return acc;
    }
    bool uniform_bits() const {
        for (int b : slice_bits)
            if (b != slice_bits[0]) return false;
        return true;
    }

    // Derived QuantParams of slice e (1-based): scale divided by the bits
    // already spent, zero fixed at the slice's midpoint for e >= 2.
    qcore::QuantParams slice_params(std::size_t e) const {
        MOBI_CHECK(e >= 1 && e <= num_slices(), "slice_params: slice " << e << " out of range");
        qcore::QuantParams qp = base;
        qp.bits = slice_bits[e - 1];
        if (e == 1) return qp;
        double f = std::ldexp(1.0, -bits_before(e));
        for (auto& s : qp.scale) s *= f;
        double mid = std::ldexp(1.0, slice_bits[e - 1] - 1);
        std::fill(qp.zero.begin(), qp.zero.end(), mid);
        return qp;
    }

    std::size_t total_clamped() const {
        return std::accumulate(clamp_counts.begin(), clamp_counts.end(), std::size_t{0});
    }
};

// R_1 = W; code_e = quantize(R_e); R_{e+1} = R_e - dequant(code_e).
inline SliceStack decompose(const Matrix& w, const qcore::QuantParams& base,
                            const std::vector<int>& slice_bits) {
    MOBI_CHECK(!slice_bits.empty(), "decompose: slice_bits is empty");
    MOBI_CHECK(base.bits == slice_bits[0],
               "decompose: base bits " << base.bits << " != slice_bits[0] " << slice_bits[0]);
    int total = 0;
    for (int b : slice_bits) {
        MOBI_CHECK(b >= 1 && b <= 8, "decompose: slice bit width " << b << " out of [1,8]");
        total += b;
    }
    MOBI_CHECK(total <= 8, "decompose: total bits " << total << " exceed the 8-bit code budget");
    base.validate();
    MOBI_CHECK(w.rows() == base.rows && w.cols() == base.cols, "decompose: weight/params shape mismatch");

    SliceStack st;
    st.slice_bits = slice_bits;
    st.base = base;
    st.clamp_mask = Codes(w.rows(), w.cols(), 0);
    st.clamp_counts.assign(slice_bits.size(), 0);

    Matrix resid = w;
    for (std::size_t e = 1; e <= slice_bits.size(); ++e) {
        st.slices.emplace_back();  // placeholder so slice_params sees the shape
        qcore::QuantParams qp = st.slice_params(e);
        const double qmax = qp.qmax();
        Codes codes(w.rows(), w.cols());
        for (std::size_t r = 0; r < w.rows(); ++r) {
            for (std::size_t c = 0; c < w.cols(); ++c) {
                std::size_t g = qp.group_of(r, c);
                double v = resid(r, c);
                MOBI_CHECK(std::isfinite(v), "decompose: non-finite residual at (" << r << "," << c << ")");
                double u = std::floor(v / qp.scale[g] + qp.zero[g]);
                if (u < 0.0 || u > qmax) {
                    st.clamp_mask(r, c) |= static_cast<std::uint8_t>(1u << (e - 1));
                    ++st.clamp_counts[e - 1];
                    u = std::min(std::max(u, 0.0), qmax);
                }
                codes(r, c) = static_cast<std::uint8_t>(u);
                resid(r, c) = v - qp.scale[g] * (u - qp.zero[g] + 0.5);
            }
        }
        st.slices.back() = std::move(codes);
    }
    return st;
}

// Pre-affine reconstruction of the first k slices, in units of the base scale:
// (c_1 + 0.5) + sum_{e>=2} (c_e - z_e + 0.5) / 2^{bits_before(e)}. All terms
// and partial sums are exact dyadics at <= 8 total bits.
inline Matrix reconstruct_frame(const SliceStack& st, std::size_t k) {
    MOBI_CHECK(k >= 1 && k <= st.num_slices(), "reconstruct: k = " << k << " out of [1," << st.num_slices() << "]");
    Matrix frame(st.rows(), st.cols());
    for (std::size_t i = 0; i < frame.size(); ++i) frame[i] = st.slices[0][i] + 0.5;
    for (std::size_t e = 2; e <= k; ++e) {
        double unit = std::ldexp(1.0, -st.bits_before(e));
        double mid = std::ldexp(1.0, st.slice_bits[e - 1] - 1);
        const Codes& codes = st.slices[e - 1];
        for (std::size_t i = 0; i < frame.size(); ++i) {
            frame[i] += (codes[i] - mid + 0.5) * unit;
        }
    }
    return frame;
}

// Sum of the first k dequantized slices; k = E reproduces the decomposition's
// full-precision approximation.
inline Matrix reconstruct(const SliceStack& st, std::size_t k) {
    Matrix frame = reconstruct_frame(st, k);
    Matrix out(st.rows(), st.cols());
    const qcore::QuantParams& qp = st.base;
    for (std::size_t r = 0; r < out.rows(); ++r) {
        for (std::size_t c = 0; c < out.cols(); ++c) {
            std::size_t g = qp.group_of(r, c);
            out(r, c) = qp.scale[g] * (frame(r, c) - qp.zero[g]);
        }
    }
    return out;
}

// Merged integer code over the first k slices:
// INT = (((c_1 << b_2) + c_2) << b_3) + ...
inline Codes merge_codes(const SliceStack& st, std::size_t k) {
    MOBI_CHECK(k >= 1 && k <= st.num_slices(), "merge_codes: k = " << k << " out of range");
    Codes out = st.slices[0];
    for (std::size_t e = 2; e <= k; ++e) {
        int b = st.slice_bits[e - 1];
        const Codes& codes = st.slices[e - 1];
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] = static_cast<std::uint8_t>((out[i] << b) + codes[i]);
        }
    }
    return out;
}

// QuantParams describing the merged code: the finest scale with the base zero
// shifted up to the merged grid. dequantize_centered with these params equals
// the full reconstruction.
inline qcore::QuantParams merged_params(const SliceStack& st) {
    MOBI_CHECK(st.uniform_bits(), "merged_params: slice widths must be uniform for the merged code");
    qcore::QuantParams qp = st.base;
    qp.bits = st.total_bits();
    int fine = st.total_bits() - st.slice_bits[0];
    double f = std::ldexp(1.0, -fine);
    for (auto& s : qp.scale) s *= f;
    for (auto& z : qp.zero) z = std::ldexp(z, fine);
    return qp;
}

struct TruncationReport {
    int p = 0;
    Codes residue;       // r = INT - 2^p * I, in [0, 2^p - 1]
    Matrix noise;        // E_p = s_fine * (r + 0.5 - 2^{p-1})
    Codes coarse_codes;  // I = INT >> p
};

// Drops the p least significant bits of the merged code. Returns the coarse
// reconstruction s' * (I - z' + 0.5) with s' = 2^p s_fine, z' = z_1 *
// 2^{(total-b_1)-p}, plus the report carrying the additive noise term.
inline std::pair<Matrix, TruncationReport> truncate(const SliceStack& st, int p) {
    int total = st.total_bits();
    MOBI_CHECK(p >= 0 && p < total, "truncate: p = " << p << " out of [0," << total - 1 << "]");
    MOBI_CHECK(st.uniform_bits(), "truncate: slice widths must be uniform for the merged code");

    const int fine_bits = total - st.slice_bits[0];
    const double fine_unit = std::ldexp(1.0, -fine_bits);        // frame unit of s_fine
    const double trunc_unit = std::ldexp(1.0, p - fine_bits);    // frame unit of s' = 2^p s_fine
    const double half_step = std::ldexp(1.0, p - 1);             // 2^{p-1}; 0.5 at p = 0

    Codes merged = merge_codes(st, st.num_slices());
    TruncationReport rep;
    rep.p = p;
    rep.residue = Codes(st.rows(), st.cols());
    rep.coarse_codes = Codes(st.rows(), st.cols());
    rep.noise = Matrix(st.rows(), st.cols());
    Matrix out(st.rows(), st.cols());

    const qcore::QuantParams& qp = st.base;
    const unsigned mask = (1u << p) - 1u;
    for (std::size_t r = 0; r < out.rows(); ++r) {
        for (std::size_t c = 0; c < out.cols(); ++c) {
            unsigned merged_code = merged(r, c);
            unsigned coarse = merged_code >> p;
            unsigned residue = merged_code & mask;
            rep.coarse_codes(r, c) = static_cast<std::uint8_t>(coarse);
            rep.residue(r, c) = static_cast<std::uint8_t>(residue);
            std::size_t g = qp.group_of(r, c);
            // Both frames are exact dyadics; their sum is the full frame.
            double coarse_frame = (coarse + 0.5) * trunc_unit;
            double noise_frame = (residue + 0.5 - half_step) * fine_unit;
            out(r, c) = qp.scale[g] * (coarse_frame - qp.zero[g]);
            rep.noise(r, c) = qp.scale[g] * noise_frame;
        }
    }
    return {std::move(out), std::move(rep)};
}

// Fraction of shared tokens between the top-quantile outlier sets of two
// per-token error vectors. Ties break toward the lower token index.
inline double migration_overlap(const std::vector<double>& err_a, const std::vector<double>& err_b,
                                double top_frac) {
    MOBI_CHECK(!err_a.empty() && err_a.size() == err_b.size(),
               "migration_overlap: need equal-length non-empty error vectors");
    MOBI_CHECK(top_frac > 0.0 && top_frac <= 1.0, "migration_overlap: top_frac must be in (0,1]");
    const std::size_t n = err_a.size();
    std::size_t k = static_cast<std::size_t>(std::floor(top_frac * static_cast<double>(n) + 1e-9));
    k = std::max<std::size_t>(1, std::min(k, n));

    auto top_set = [&](const std::vector<double>& err) {
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            if (err[a] != err[b]) return err[a] > err[b];
            return a < b;
        });
        idx.resize(k);
        std::sort(idx.begin(), idx.end());
        return idx;
    };
    std::vector<std::size_t> ta = top_set(err_a);
    std::vector<std::size_t> tb = top_set(err_b);
    std::vector<std::size_t> common;
    std::set_intersection(ta.begin(), ta.end(), tb.begin(), tb.end(), std::back_inserter(common));
    return static_cast<double>(common.size()) / static_cast<double>(k);
}

}  // namespace mobi::slicer
