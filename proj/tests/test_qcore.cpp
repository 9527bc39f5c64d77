#include <gtest/gtest.h>

#include <cmath>

#include "mobi/common.hpp"
#include "mobi/qcore.hpp"

using namespace mobi;
using qcore::QuantParams;

namespace {

QuantParams single_group_params(std::size_t rows, std::size_t cols, double scale, double zero,
                                int bits) {
    QuantParams qp;
    qp.rows = rows;
    qp.cols = cols;
    qp.group_size = cols;  // one group per row
    qp.bits = bits;
    qp.scale.assign(qp.num_groups(), scale);
    qp.zero.assign(qp.num_groups(), zero);
    return qp;
}

Matrix scalar(double v) {
    Matrix m(1, 1);
    m(0, 0) = v;
    return m;
}

}  // namespace

TEST(QuantizeFloor, ZeroInputMapsToCodeZero) {
    QuantParams qp = single_group_params(1, 1, 1.0, 0.0, 2);
    Codes c = qcore::quantize_floor(scalar(0.0), qp);
    EXPECT_EQ(c(0, 0), 0);
}

TEST(QuantizeFloor, SaturatesAtQmax) {
    QuantParams qp = single_group_params(1, 1, 1.0, 0.0, 2);
    Codes c = qcore::quantize_floor(scalar(1e6), qp);
    EXPECT_EQ(c(0, 0), 3);
}

TEST(QuantizeFloor, HandEvaluatedMidRange) {
    // floor(0.3/0.4 + 2) = floor(2.75) = 2
    QuantParams qp = single_group_params(1, 1, 0.4, 2.0, 2);
    Codes c = qcore::quantize_floor(scalar(0.3), qp);
    EXPECT_EQ(c(0, 0), 2);
}

TEST(QuantizeFloor, RejectsNonFiniteNamingIndex) {
    QuantParams qp = single_group_params(2, 2, 1.0, 0.0, 2);
    Matrix x(2, 2, 0.0);
    x(1, 0) = std::numeric_limits<double>::infinity();
    try {
        qcore::quantize_floor(x, qp);
        FAIL() << "expected rejection";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("(1,0)"), std::string::npos);
    }
}

TEST(QuantizeFloor, RejectsNonPositiveScale) {
    QuantParams qp = single_group_params(1, 1, 1.0, 0.0, 2);
    qp.scale[0] = 0.0;
    EXPECT_THROW(qcore::quantize_floor(scalar(0.5), qp), std::invalid_argument);
    qp.scale[0] = -1.0;
    EXPECT_THROW(qcore::quantize_floor(scalar(0.5), qp), std::invalid_argument);
}

TEST(DequantizeCentered, CodeZeroAtUnitScale) {
    QuantParams qp = single_group_params(1, 1, 1.0, 0.0, 2);
    Codes c(1, 1, 0);
    EXPECT_DOUBLE_EQ(qcore::dequantize_centered(c, qp)(0, 0), 0.5);
}

TEST(DequantizeCentered, HandEvaluated) {
    QuantParams qp = single_group_params(1, 1, 0.4, 2.0, 2);
    Codes c(1, 1, 2);
    EXPECT_DOUBLE_EQ(qcore::dequantize_centered(c, qp)(0, 0), 0.4 * 0.5);
}

TEST(DequantizeCentered, BinCenterAtZeroForHalfZeroPoint) {
    QuantParams qp = single_group_params(1, 1, 1.0, 0.5, 2);
    Codes c(1, 1, 0);
    EXPECT_DOUBLE_EQ(qcore::dequantize_centered(c, qp)(0, 0), 0.0);
}

TEST(DequantizeCentered, RejectsOutOfRangeCode) {
    QuantParams qp = single_group_params(1, 1, 1.0, 0.0, 2);
    Codes c(1, 1, 4);
    EXPECT_THROW(qcore::dequantize_centered(c, qp), std::invalid_argument);
}

TEST(ParamsFromClip, FullRangeStraddlingGroup) {
    // squash(40) == 1.0 in double precision.
    qcore::ClipParams cp = qcore::ClipParams::identity_init(1, 40.0);
    QuantParams qp = qcore::params_from_clip({-1.0, 1.0}, cp, 2);
    EXPECT_DOUBLE_EQ(qp.scale[0], 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(qp.zero[0], 1.5);
}

TEST(ParamsFromClip, HalfSquashStraddlingGroup) {
    qcore::ClipParams cp = qcore::ClipParams::identity_init(1, 0.0);  // squash(0) = 0.5
    QuantParams qp = qcore::params_from_clip({-1.0, 1.0}, cp, 2);
    EXPECT_DOUBLE_EQ(qp.scale[0], 1.0 / 3.0);
    EXPECT_DOUBLE_EQ(qp.zero[0], 1.5);
}

TEST(ParamsFromClip, ConstantGroupGetsEpsilonFloor) {
    qcore::ClipParams cp = qcore::ClipParams::identity_init(1, 40.0);
    QuantParams qp = qcore::params_from_clip({0.0, 0.0, 0.0}, cp, 2);
    EXPECT_DOUBLE_EQ(qp.scale[0], qcore::kScaleEps);
    Matrix x(1, 3, 0.0);
    QuantParams full = qp;
    full.rows = 1;
    full.cols = 3;
    full.group_size = 3;
    Codes c = qcore::quantize_floor(x, full);
    EXPECT_EQ(c(0, 0), c(0, 1));
    EXPECT_EQ(c(0, 1), c(0, 2));
    Matrix back = qcore::dequantize_centered(c, full);
    for (std::size_t i = 0; i < back.size(); ++i) EXPECT_LE(std::abs(back[i]), qcore::kScaleEps);
}

TEST(QuantGradSte, PassesInRangeKillsClamped) {
    QuantParams qp = single_group_params(1, 3, 1.0, 0.0, 2);
    Matrix x(1, 3);
    x(0, 0) = 1.2;    // in range (u = 1.2)
    x(0, 1) = 100.0;  // clamped high
    x(0, 2) = -5.0;   // clamped low
    Matrix up(1, 3, 1.0);
    Matrix g = qcore::quant_grad_ste(up, x, qp);
    EXPECT_DOUBLE_EQ(g(0, 0), 1.0);
    EXPECT_DOUBLE_EQ(g(0, 1), 0.0);
    EXPECT_DOUBLE_EQ(g(0, 2), 0.0);
}

// Range invariant under fuzzing: codes always land in [0, 2^b - 1].
TEST(QuantizeFloor, FuzzedRangeInvariant) {
    Rng rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        int bits = 1 + static_cast<int>(rng.uniform_index(8));
        Matrix x(4, 16);
        for (std::size_t i = 0; i < x.size(); ++i)
            x[i] = rng.normal() * std::exp(rng.uniform(-6.0, 6.0));
        QuantParams qp = single_group_params(4, 16, std::exp(rng.uniform(-4.0, 2.0)),
                                             rng.uniform(-4.0, 4.0), bits);
        Codes c = qcore::quantize_floor(x, qp);
        for (std::size_t i = 0; i < c.size(); ++i) {
            EXPECT_GE(c[i], 0);
            EXPECT_LE(c[i], (1 << bits) - 1);
        }
    }
}

// Centered error: strictly inside the representable range the round trip is
// within half a step.
TEST(QuantRoundTrip, CenteredErrorWithinHalfStep) {
    Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        int bits = 2 + static_cast<int>(rng.uniform_index(3));
        double s = std::exp(rng.uniform(-3.0, 1.0));
        double z = rng.uniform(0.0, 1.0);
        QuantParams qp = single_group_params(1, 64, s, z, bits);
        double lo = s * (0.0 - z);
        double hi = s * ((1 << bits) - 1 - z + 1.0);
        Matrix x(1, 64);
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(lo + 1e-12, hi - 1e-12);
        Matrix back = qcore::dequantize_centered(qcore::quantize_floor(x, qp), qp);
        for (std::size_t i = 0; i < x.size(); ++i) EXPECT_LE(std::abs(back[i] - x[i]), s / 2);
    }
}

TEST(QuantizeFloor, DeterministicAcrossCalls) {
    Rng rng(3);
    Matrix x(8, 8);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
    QuantParams qp = single_group_params(8, 8, 0.37, 1.1, 3);
    Codes a = qcore::quantize_floor(x, qp);
    Codes b = qcore::quantize_floor(x, qp);
    EXPECT_EQ(a.vec(), b.vec());
}

TEST(QuantizeFloor, MonotoneInInput) {
    QuantParams qp = single_group_params(1, 1, 0.3, 0.7, 3);
    Rng rng(5);
    double prev_x = -10.0;
    int prev_code = 0;
    bool first = true;
    for (double x = -10.0; x <= 10.0; x += 0.01 + rng.uniform() * 0.01) {
        Codes c = qcore::quantize_floor(scalar(x), qp);
        if (!first) {
            EXPECT_GE(x, prev_x);
            EXPECT_GE(c(0, 0), prev_code);
        }
        prev_x = x;
        prev_code = c(0, 0);
        first = false;
    }
}
