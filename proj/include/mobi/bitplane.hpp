#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <utility>
#include <vector>

#include "mobi/common.hpp"
#include "mobi/qcore.hpp"

// Bit-major packed weights and a bit-exact CPU stand-in for the bit-plane
// matmul kernel. Each weight bit lives in its own plane of 64-bit words, so a
// precision level touches only the planes it needs; the cost ledger counts
// words and bit-operations instead of nanoseconds.
namespace mobi::bitplane {

inline constexpr std::size_t kWordBits = 64;

struct PackedPlanes {
    std::size_t out = 0;
    std::size_t in = 0;
    int bits = 0;
    std::size_t words_per_row = 0;
    // planes[0] is the most significant bit; plane_for_bit maps bit position
    // (0 = LSB) to storage index. Padding bits past `in` are zero.
    std::vector<std::vector<std::uint64_t>> planes;

    std::size_t plane_for_bit(int bit) const { return static_cast<std::size_t>(bits - 1 - bit); }

    bool bit_at(int bit, std::size_t r, std::size_t c) const {
        const auto& plane = planes[plane_for_bit(bit)];
        return (plane[r * words_per_row + c / kWordBits] >> (c % kWordBits)) & 1u;
    }
};

struct CostLedger {
    std::uint64_t words_fetched = 0;
    std::uint64_t bit_ops = 0;
    std::uint64_t tokens_permuted = 0;
    std::vector<std::uint64_t> per_slice_work;
    std::uint64_t overlap_makespan = 0;
};

inline std::size_t words_for(std::size_t n) { return (n + kWordBits - 1) / kWordBits; }

inline PackedPlanes pack_bit_major(const Codes& codes, int bits) {
    MOBI_CHECK(bits >= 1 && bits <= 8, "pack_bit_major: bits " << bits << " out of [1,8]");
    const unsigned qmax = (1u << bits) - 1u;
    PackedPlanes pp;
    pp.out = codes.rows();
    pp.in = codes.cols();
    pp.bits = bits;
    pp.words_per_row = words_for(codes.cols());
    pp.planes.assign(static_cast<std::size_t>(bits),
                     std::vector<std::uint64_t>(pp.out * pp.words_per_row, 0));
    for (std::size_t r = 0; r < codes.rows(); ++r) {
        for (std::size_t c = 0; c < codes.cols(); ++c) {
            unsigned code = codes(r, c);
            MOBI_CHECK(code <= qmax,
                       "pack_bit_major: code " << code << " exceeds " << bits << " bits at (" << r
                                               << "," << c << ")");
            for (int b = 0; b < bits; ++b) {
                if ((code >> b) & 1u) {
                    pp.planes[pp.plane_for_bit(b)][r * pp.words_per_row + c / kWordBits] |=
                        std::uint64_t{1} << (c % kWordBits);
                }
            }
        }
    }
    return pp;
}

inline Codes unpack(const PackedPlanes& pp) {
    Codes codes(pp.out, pp.in, 0);
    for (std::size_t r = 0; r < pp.out; ++r)
        for (std::size_t c = 0; c < pp.in; ++c) {
            unsigned code = 0;
            for (int b = 0; b < pp.bits; ++b) code |= static_cast<unsigned>(pp.bit_at(b, r, c)) << b;
            codes(r, c) = static_cast<std::uint8_t>(code);
        }
    return codes;
}

// Pre-affine accumulation: sum over active planes p of 2^p * (plane_p . x),
// per (token, out_row). With integer-valued x every partial sum is an integer
// well inside double precision, so this path is exact.
inline Matrix preaffine_accumulate(const Matrix& x, const PackedPlanes& pp,
                                   const std::vector<int>& active_planes) {
    MOBI_CHECK(!active_planes.empty(), "bitplane_matmul: active plane set is empty");
    for (int p : active_planes)
        MOBI_CHECK(p >= 0 && p < pp.bits, "bitplane_matmul: plane " << p << " out of [0," << pp.bits - 1 << "]");
    MOBI_CHECK(x.cols() == pp.in, "bitplane_matmul: token dim " << x.cols() << " != weight in dim " << pp.in);
    Matrix acc(x.rows(), pp.out, 0.0);
    for (int p : active_planes) {
        const auto& plane = pp.planes[pp.plane_for_bit(p)];
        const double weight = std::ldexp(1.0, p);
        for (std::size_t t = 0; t < x.rows(); ++t) {
            for (std::size_t r = 0; r < pp.out; ++r) {
                double dot = 0.0;
                const std::uint64_t* row = plane.data() + r * pp.words_per_row;
                for (std::size_t c = 0; c < pp.in; ++c) {
                    if ((row[c / kWordBits] >> (c % kWordBits)) & 1u) dot += x(t, c);
                }
                acc(t, r) += weight * dot;
            }
        }
    }
    return acc;
}

struct MatmulResult {
    Matrix out;
    CostLedger ledger;
};

// Active-plane matmul followed by the group-wise dequantization affine:
// out(t,r) = sum_g s_g * (acc_g - (z_g - 0.5) * sum_{c in g} x(t,c)).
// With all planes active this equals dequantize(codes)^T x up to the affine
// rounding; the pre-affine accumulation is exact.
inline MatmulResult bitplane_matmul(const Matrix& x, const PackedPlanes& pp,
                                    const qcore::QuantParams& qp,
                                    const std::vector<int>& active_planes) {
    MOBI_CHECK(qp.rows == pp.out && qp.cols == pp.in, "bitplane_matmul: params/planes shape mismatch");
    MOBI_CHECK(qp.bits == pp.bits, "bitplane_matmul: params bits " << qp.bits << " != planes bits " << pp.bits);
    MOBI_CHECK(!active_planes.empty(), "bitplane_matmul: active plane set is empty");
    for (int p : active_planes)
        MOBI_CHECK(p >= 0 && p < pp.bits, "bitplane_matmul: plane " << p << " out of range");
    MOBI_CHECK(x.cols() == pp.in, "bitplane_matmul: token dim mismatch");

    MatmulResult res;
    res.out = Matrix(x.rows(), pp.out);
    const std::size_t gpr = qp.groups_per_row();

    // Per-token per-group input sums for the zero-point term.
    Matrix xsum(x.rows(), gpr, 0.0);
    for (std::size_t t = 0; t < x.rows(); ++t)
        for (std::size_t c = 0; c < x.cols(); ++c) xsum(t, c / qp.group_size) += x(t, c);

    for (std::size_t t = 0; t < x.rows(); ++t) {
        for (std::size_t r = 0; r < pp.out; ++r) {
            double out_val = 0.0;
            for (std::size_t gc = 0; gc < gpr; ++gc) {
                const std::size_t c0 = gc * qp.group_size;
                const std::size_t c1 = std::min(pp.in, c0 + qp.group_size);
                double acc = 0.0;
                for (int p : active_planes) {
                    const auto& plane = pp.planes[pp.plane_for_bit(p)];
                    const std::uint64_t* row = plane.data() + r * pp.words_per_row;
                    double dot = 0.0;
                    for (std::size_t c = c0; c < c1; ++c) {
                        if ((row[c / kWordBits] >> (c % kWordBits)) & 1u) dot += x(t, c);
                    }
                    acc += std::ldexp(1.0, p) * dot;
                }
                const std::size_t g = r * gpr + gc;
                out_val += qp.scale[g] * (acc - (qp.zero[g] - 0.5) * xsum(t, gc));
            }
            res.out(t, r) = out_val;
        }
    }
    res.ledger.bit_ops = static_cast<std::uint64_t>(x.rows()) * active_planes.size() * pp.words_per_row;
    res.ledger.words_fetched =
        static_cast<std::uint64_t>(active_planes.size()) * pp.out * pp.words_per_row;
    return res;
}

struct Permutation {
    Matrix permuted;
    std::vector<std::size_t> perm;     // permuted row i came from tokens row perm[i]
    std::vector<std::size_t> inverse;  // tokens row j lands at permuted row inverse[j]
    std::vector<std::pair<std::uint8_t, std::size_t>> groups;  // (slice mask, run length)
};

// Stable grouping of tokens by identical active-slice sets (bitmask ascending,
// original order within a group). Applying `inverse` restores token order.
inline Permutation permute_by_slice(const Matrix& tokens, const std::vector<std::uint8_t>& assignments) {
    MOBI_CHECK(assignments.size() == tokens.rows(),
               "permute_by_slice: " << assignments.size() << " assignments for " << tokens.rows() << " tokens");
    Permutation out;
    const std::size_t n = tokens.rows();
    out.perm.resize(n);
    std::iota(out.perm.begin(), out.perm.end(), 0);
    std::stable_sort(out.perm.begin(), out.perm.end(),
                     [&](std::size_t a, std::size_t b) { return assignments[a] < assignments[b]; });
    out.inverse.resize(n);
    out.permuted = Matrix(n, tokens.cols());
    for (std::size_t i = 0; i < n; ++i) {
        out.inverse[out.perm[i]] = i;
        for (std::size_t c = 0; c < tokens.cols(); ++c) out.permuted(i, c) = tokens(out.perm[i], c);
    }
    for (std::size_t i = 0; i < n;) {
        std::uint8_t mask = assignments[out.perm[i]];
        std::size_t j = i;
        while (j < n && assignments[out.perm[j]] == mask) ++j;
        out.groups.emplace_back(mask, j - i);
        i = j;
    }
    return out;
}

// Deterministic work model for a routed batch. `assignments` carry one bit per
// slice (bit e-1 = slice e active); every plane word of an active slice is
// fetched once per token group, bit-ops count words touched per token.
inline CostLedger cost_model(const std::vector<std::uint8_t>& assignments, std::size_t out_dim,
                             std::size_t in_dim, const std::vector<int>& slice_bits, bool overlap) {
    CostLedger ledger;
    const std::size_t wpr = words_for(in_dim);
    const std::size_t n_slices = slice_bits.size();
    ledger.per_slice_work.assign(n_slices, 0);

    for (std::uint8_t mask : assignments) {
        std::uint64_t planes = 0;
        for (std::size_t e = 0; e < n_slices; ++e) {
            if ((mask >> e) & 1u) {
                planes += static_cast<std::uint64_t>(slice_bits[e]);
                ledger.per_slice_work[e] += static_cast<std::uint64_t>(slice_bits[e]) * wpr;
            }
        }
        ledger.bit_ops += planes * wpr;
    }

    // Group tokens by assignment; each group fetches its active plane words once.
    std::vector<std::uint8_t> sorted(assignments);
    std::stable_sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size();) {
        std::uint8_t mask = sorted[i];
        std::size_t j = i;
        while (j < sorted.size() && sorted[j] == mask) ++j;
        std::uint64_t planes = 0;
        for (std::size_t e = 0; e < n_slices; ++e)
            if ((mask >> e) & 1u) planes += static_cast<std::uint64_t>(slice_bits[e]);
        ledger.words_fetched += planes * out_dim * wpr;
        i = j;
    }

    // Tokens displaced by the grouping permutation.
    std::vector<std::size_t> idx(assignments.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return assignments[a] < assignments[b]; });
    for (std::size_t i = 0; i < idx.size(); ++i)
        if (idx[i] != i) ++ledger.tokens_permuted;

    std::uint64_t shared = ledger.per_slice_work.empty() ? 0 : ledger.per_slice_work[0];
    std::uint64_t residual = 0;
    for (std::size_t e = 1; e < ledger.per_slice_work.size(); ++e) residual += ledger.per_slice_work[e];
    ledger.overlap_makespan = overlap ? std::max(shared, residual) : shared + residual;
    return ledger;
}

}  // namespace mobi::bitplane
