#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "mobi/common.hpp"
#include "mobi/qcore.hpp"
#include "mobi/slicer.hpp"

using namespace mobi;
using qcore::QuantParams;
using slicer::SliceStack;

namespace {

QuantParams base_params(std::size_t rows, std::size_t cols, double scale, double zero, int bits,
                        std::size_t group_size = 0) {
    QuantParams qp;
    qp.rows = rows;
    qp.cols = cols;
    qp.group_size = group_size ? group_size : cols;
    qp.bits = bits;
    qp.scale.assign(qp.num_groups(), scale);
    qp.zero.assign(qp.num_groups(), zero);
    return qp;
}

// Independent recursive quantization oracle: plain per-element arithmetic,
// no shared code with the slicer.
struct OracleResult {
    std::vector<int> codes;        // per slice
    std::vector<double> residual;  // residual after each slice
    double recon = 0.0;            // naive slice-by-slice sum
    bool clamped = false;
};

OracleResult oracle_decompose(double w, double s1, double z1, const std::vector<int>& bits) {
    OracleResult out;
    double r = w;
    double s = s1;
    for (std::size_t e = 0; e < bits.size(); ++e) {
        double z = (e == 0) ? z1 : std::ldexp(1.0, bits[e] - 1);
        double qmax = static_cast<double>((1 << bits[e]) - 1);
        double u = std::floor(r / s + z);
        if (u < 0.0 || u > qmax) {
            out.clamped = true;
            u = std::min(std::max(u, 0.0), qmax);
        }
        double deq = s * (u - z + 0.5);
        out.codes.push_back(static_cast<int>(u));
        out.recon += deq;
        r = r - deq;
        out.residual.push_back(r);
        s = s / static_cast<double>(1 << bits[e]);
    }
    return out;
}

SliceStack stack_from_codes(const std::vector<int>& codes, double s1, double z1,
                            const std::vector<int>& bits) {
    SliceStack st;
    st.slice_bits = bits;
    st.base = base_params(1, 1, s1, z1, bits[0]);
    st.clamp_mask = Codes(1, 1, 0);
    st.clamp_counts.assign(bits.size(), 0);
    for (int c : codes) {
        Codes m(1, 1);
        m(0, 0) = static_cast<std::uint8_t>(c);
        st.slices.push_back(m);
    }
    return st;
}

Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = scale * rng.normal();
    return m;
}

SliceStack decompose_random(Rng& rng, std::size_t n, const std::vector<int>& bits, Matrix* w_out,
                            double gamma = 40.0) {
    Matrix w = random_matrix(rng, n, n);
    qcore::GroupStats gs = qcore::GroupStats::from_weights(w, n);
    qcore::ClipParams cp = qcore::ClipParams::identity_init(gs.min.size(), gamma);
    QuantParams base = qcore::params_from_clip(w, gs, cp, bits[0], n);
    if (w_out) *w_out = w;
    return slicer::decompose(w, base, bits);
}

}  // namespace

TEST(Decompose, HandTracedTwoSliceExample) {
    Matrix w(1, 1);
    w(0, 0) = 0.3;
    QuantParams base = base_params(1, 1, 0.4, 2.0, 2);
    SliceStack st = slicer::decompose(w, base, {2, 2});

    EXPECT_EQ(st.slices[0](0, 0), 2);  // floor(0.75 + 2) = 2
    Matrix w1 = slicer::reconstruct(st, 1);
    EXPECT_NEAR(w1(0, 0), 0.2, 1e-15);

    QuantParams p2 = st.slice_params(2);
    EXPECT_DOUBLE_EQ(p2.scale[0], 0.1);
    EXPECT_DOUBLE_EQ(p2.zero[0], 2.0);
    EXPECT_EQ(st.slices[1](0, 0), 3);  // residual 0.1 -> floor(1 + 2) = 3

    Matrix full = slicer::reconstruct(st, 2);
    EXPECT_NEAR(full(0, 0), 0.35, 1e-15);
    EXPECT_NEAR(std::abs(full(0, 0) - 0.3), 0.05, 1e-15);  // exactly s_2 / 2
}

TEST(Decompose, ZeroWeightResidualShrinksBySliceFactor) {
    Matrix w(2, 2, 0.0);
    QuantParams base = base_params(2, 2, 0.5, 2.0, 2);  // z_1 = 2^{b_1 - 1}
    SliceStack st = slicer::decompose(w, base, {2, 2, 2, 2});
    EXPECT_EQ(st.total_clamped(), 0u);
    for (std::size_t k = 1; k <= 4; ++k) {
        Matrix rec = slicer::reconstruct(st, k);
        double s_k = 0.5 * std::ldexp(1.0, -2 * static_cast<int>(k - 1));
        for (std::size_t i = 0; i < rec.size(); ++i) EXPECT_LE(std::abs(rec[i]), s_k / 2 * (1 + 1e-12));
    }
}

TEST(Decompose, RejectsEmptySliceList) {
    Matrix w(1, 1, 0.0);
    QuantParams base = base_params(1, 1, 1.0, 0.0, 2);
    EXPECT_THROW(slicer::decompose(w, base, {}), std::invalid_argument);
}

TEST(Decompose, MatchesIndependentRecursionOracle) {
    Rng rng(42);
    for (int trial = 0; trial < 50; ++trial) {
        Matrix w;
        SliceStack st = decompose_random(rng, 8, {2, 2, 2, 2}, &w);
        Matrix recon = slicer::reconstruct(st, 4);
        for (std::size_t r = 0; r < 8; ++r) {
            for (std::size_t c = 0; c < 8; ++c) {
                std::size_t g = st.base.group_of(r, c);
                OracleResult o = oracle_decompose(w(r, c), st.base.scale[g], st.base.zero[g], {2, 2, 2, 2});
                for (std::size_t e = 0; e < 4; ++e) EXPECT_EQ(st.slices[e](r, c), o.codes[e]);
                EXPECT_NEAR(recon(r, c), o.recon, 1e-13 * std::max(1.0, std::abs(o.recon)));
                EXPECT_EQ(st.clamp_mask(r, c) != 0, o.clamped);
            }
        }
    }
}

TEST(Decompose, BoundHoldsWhereNoSliceClamped) {
    Rng rng(43);
    for (int trial = 0; trial < 20; ++trial) {
        Matrix w;
        SliceStack st = decompose_random(rng, 8, {2, 2, 2, 2}, &w);
        Matrix recon = slicer::reconstruct(st, 4);
        for (std::size_t r = 0; r < 8; ++r) {
            for (std::size_t c = 0; c < 8; ++c) {
                if (st.clamp_mask(r, c)) continue;
                std::size_t g = st.base.group_of(r, c);
                double s4 = st.base.scale[g] * std::ldexp(1.0, -6);
                EXPECT_LE(std::abs(recon(r, c) - w(r, c)), s4 / 2 * (1 + 1e-12));
            }
        }
    }
}

TEST(Reconstruct, SingleSliceEqualsPlainQuantization) {
    Rng rng(44);
    Matrix w = random_matrix(rng, 4, 4);
    QuantParams base = base_params(4, 4, 0.21, 1.3, 2);
    SliceStack st = slicer::decompose(w, base, {2, 2});
    Matrix k1 = slicer::reconstruct(st, 1);
    Matrix plain = qcore::dequantize_centered(qcore::quantize_floor(w, base), base);
    for (std::size_t i = 0; i < k1.size(); ++i) EXPECT_DOUBLE_EQ(k1[i], plain[i]);
}

TEST(Reconstruct, PrefixBitWidths) {
    // Two slices give 4-bit weights, three give 6-bit: the prefix reconstruction
    // is bit-identical to truncating the merged code down to that width.
    Rng rng(45);
    SliceStack st = decompose_random(rng, 8, {2, 2, 2, 2}, nullptr);
    for (std::size_t k = 1; k <= 3; ++k) {
        int p = st.total_bits();
        for (std::size_t e = 0; e < k; ++e) p -= st.slice_bits[e];
        Matrix via_prefix = slicer::reconstruct(st, k);
        auto [via_trunc, rep] = slicer::truncate(st, p);
        for (std::size_t i = 0; i < via_prefix.size(); ++i) EXPECT_EQ(via_prefix[i], via_trunc[i]);
    }
}

TEST(Reconstruct, MaxErrorNonIncreasingInK) {
    Rng rng(46);
    for (int trial = 0; trial < 20; ++trial) {
        Matrix w;
        SliceStack st = decompose_random(rng, 8, {2, 2, 2, 2}, &w);
        if (st.total_clamped() != 0) continue;
        double prev = 1e300;
        for (std::size_t k = 1; k <= 4; ++k) {
            Matrix rec = slicer::reconstruct(st, k);
            double maxerr = 0.0;
            for (std::size_t i = 0; i < rec.size(); ++i)
                maxerr = std::max(maxerr, std::abs(rec[i] - w[i]));
            EXPECT_LE(maxerr, prev);
            prev = maxerr;
        }
    }
}

TEST(Reconstruct, RejectsOutOfRangeK) {
    Rng rng(47);
    SliceStack st = decompose_random(rng, 2, {2, 2}, nullptr);
    EXPECT_THROW(slicer::reconstruct(st, 0), std::invalid_argument);
    EXPECT_THROW(slicer::reconstruct(st, 3), std::invalid_argument);
}

TEST(MergeCodes, HandExample) {
    SliceStack st = stack_from_codes({2, 3}, 0.4, 2.0, {2, 2});
    Codes merged = slicer::merge_codes(st, 2);
    EXPECT_EQ(merged(0, 0), 11);  // (2 << 2) + 3
}

TEST(MergeCodes, AllZeros) {
    SliceStack st = stack_from_codes({0, 0, 0, 0}, 1.0, 0.0, {2, 2, 2, 2});
    EXPECT_EQ(slicer::merge_codes(st, 4)(0, 0), 0);
}

TEST(MergeCodes, SplitRoundTripExhaustive) {
    for (int c1 = 0; c1 < 4; ++c1) {
        for (int c2 = 0; c2 < 4; ++c2) {
            SliceStack st = stack_from_codes({c1, c2}, 1.0, 0.0, {2, 2});
            Codes merged = slicer::merge_codes(st, 2);
            EXPECT_EQ((merged(0, 0) >> 2) & 3, c1);
            EXPECT_EQ(merged(0, 0) & 3, c2);
        }
    }
}

TEST(Truncate, HandExample) {
    // INT = 11 at s_fine = 0.1 (s_1 = 0.4, 2+2 bits), p = 1.
    SliceStack st = stack_from_codes({2, 3}, 0.4, 2.0, {2, 2});
    auto [trunc, rep] = slicer::truncate(st, 1);
    EXPECT_EQ(rep.coarse_codes(0, 0), 5);
    EXPECT_EQ(rep.residue(0, 0), 1);
    EXPECT_NEAR(rep.noise(0, 0), 0.05, 1e-15);
}

TEST(Truncate, PZeroIsIdentity) {
    Rng rng(48);
    SliceStack st = decompose_random(rng, 8, {2, 2, 2, 2}, nullptr);
    auto [trunc, rep] = slicer::truncate(st, 0);
    Matrix full = slicer::reconstruct(st, 4);
    for (std::size_t i = 0; i < full.size(); ++i) {
        EXPECT_EQ(trunc[i], full[i]);
        EXPECT_EQ(rep.noise[i], 0.0);
        EXPECT_EQ(rep.residue[i], 0);
    }
}

TEST(Truncate, RejectsFullDrop) {
    Rng rng(49);
    SliceStack st = decompose_random(rng, 2, {2, 2}, nullptr);
    EXPECT_THROW(slicer::truncate(st, 4), std::invalid_argument);
    EXPECT_THROW(slicer::truncate(st, -1), std::invalid_argument);
}

// Exhaustive residue enumeration: each noise value obeys the strict half-step
// bound and the dyadic noise factors sum to exactly zero (the rounded noise
// doubles themselves are sign-symmetric).
TEST(Truncate, ResidueEnumerationZeroMeanAndBound) {
    Rng rng(50);
    for (int trial = 0; trial < 10; ++trial) {
        double s_fine = std::exp(rng.uniform(-5.0, 2.0));
        for (int p = 1; p <= 7; ++p) {
            double half = std::ldexp(1.0, p - 1);
            double factor_sum = 0.0;
            for (int r = 0; r < (1 << p); ++r) {
                double factor = r + 0.5 - half;
                factor_sum += factor;
                double noise = s_fine * factor;
                EXPECT_LT(std::abs(noise), half * s_fine);
                double mirrored = s_fine * ((((1 << p) - 1 - r) + 0.5) - half);
                EXPECT_EQ(noise, -mirrored);
            }
            EXPECT_EQ(factor_sum, 0.0);
            EXPECT_EQ(s_fine * factor_sum, 0.0);
        }
    }
}

// The truncation identity full == truncated + E_p, exact on the pre-affine
// code frames (which carry no rounding), and tight after the shared affine.
TEST(Truncate, IdentityExactOnFrames) {
    Rng rng(51);
    for (int trial = 0; trial < 30; ++trial) {
        SliceStack st = decompose_random(rng, 8, {2, 2, 2, 2}, nullptr);
        Matrix full = slicer::reconstruct(st, 4);
        Matrix full_frame = slicer::reconstruct_frame(st, 4);
        int fine_bits = st.total_bits() - st.slice_bits[0];
        for (int p = 0; p < st.total_bits(); ++p) {
            auto [trunc, rep] = slicer::truncate(st, p);
            double trunc_unit = std::ldexp(1.0, p - fine_bits);
            double fine_unit = std::ldexp(1.0, -fine_bits);
            double half = std::ldexp(1.0, p - 1);
            for (std::size_t i = 0; i < full.size(); ++i) {
                double coarse_frame = (rep.coarse_codes[i] + 0.5) * trunc_unit;
                double noise_frame = (rep.residue[i] + 0.5 - half) * fine_unit;
                EXPECT_EQ(coarse_frame + noise_frame, full_frame[i]);  // exact
                double sum = trunc[i] + rep.noise[i];
                double tol = 4e-16 * (std::abs(trunc[i]) + std::abs(rep.noise[i]) + std::abs(full[i]));
                EXPECT_NEAR(sum, full[i], tol);
            }
        }
    }
}

// Coarse-code preservation at slice-aligned p: dropping fine slices cannot
// flip any bit of the coarser slices' codes.
TEST(Truncate, CoarseCodePreservationAligned) {
    Rng rng(52);
    for (int trial = 0; trial < 30; ++trial) {
        SliceStack st = decompose_random(rng, 8, {2, 2, 2, 2}, nullptr);
        for (std::size_t keep = 1; keep <= 3; ++keep) {
            int p = 2 * static_cast<int>(4 - keep);
            auto [trunc, rep] = slicer::truncate(st, p);
            Codes expect = slicer::merge_codes(st, keep);
            for (std::size_t i = 0; i < expect.size(); ++i)
                EXPECT_EQ(rep.coarse_codes[i], expect[i]);
        }
    }
}

TEST(MigrationOverlap, IdenticalVectors) {
    std::vector<double> e{5, 1, 3, 2, 4, 9, 0, 7, 6, 8};
    EXPECT_DOUBLE_EQ(slicer::migration_overlap(e, e, 0.3), 1.0);
    EXPECT_DOUBLE_EQ(slicer::migration_overlap(e, e, 1.0), 1.0);
}

TEST(MigrationOverlap, DisjointTopSets) {
    std::vector<double> a(20), b(20);
    for (std::size_t i = 0; i < 20; ++i) {
        a[i] = static_cast<double>(i);         // top-10%: indices 18, 19
        b[i] = static_cast<double>(20 - i);    // top-10%: indices 0, 1
    }
    EXPECT_DOUBLE_EQ(slicer::migration_overlap(a, b, 0.1), 0.0);
}

TEST(MigrationOverlap, MatchesBruteForceSetIntersection) {
    Rng rng(53);
    const std::size_t n = 1000;
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
        a[i] = rng.normal();
        b[i] = rng.normal();
    }
    double got = slicer::migration_overlap(a, b, 0.1);

    auto brute_top = [&](const std::vector<double>& e) {
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        std::sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) {
            return e[x] != e[y] ? e[x] > e[y] : x < y;
        });
        return std::set<std::size_t>(idx.begin(), idx.begin() + 100);
    };
    std::set<std::size_t> sa = brute_top(a), sb = brute_top(b);
    std::size_t inter = 0;
    for (std::size_t i : sa) inter += sb.count(i);
    EXPECT_DOUBLE_EQ(got, static_cast<double>(inter) / 100.0);
}

TEST(MigrationOverlap, RejectsEmptyAndBadFrac) {
    std::vector<double> e{1.0};
    EXPECT_THROW(slicer::migration_overlap({}, {}, 0.5), std::invalid_argument);
    EXPECT_THROW(slicer::migration_overlap(e, e, 0.0), std::invalid_argument);
    EXPECT_THROW(slicer::migration_overlap(e, e, 1.5), std::invalid_argument);
}

// Residual-shrink property on the oracle's residuals (bit-identical to the
// slicer's internal recursion).
TEST(Decompose, ResidualShrinkWhereUnclamped) {
    Rng rng(54);
    for (int trial = 0; trial < 200; ++trial) {
        double s1 = std::exp(rng.uniform(-3.0, 1.0));
        double z1 = rng.uniform(0.0, 3.0);
        double w = rng.normal() * 2.0;
        OracleResult o = oracle_decompose(w, s1, z1, {2, 2, 2, 2});
        if (o.clamped) continue;
        double s = s1;
        for (std::size_t e = 0; e < 4; ++e) {
            EXPECT_LE(std::abs(o.residual[e]), s / 2 * (1 + 1e-12));
            s /= 4.0;
        }
    }
}
