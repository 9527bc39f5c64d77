#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "mobi/bench/config.hpp"
#include "mobi/common.hpp"

namespace mobi::bench {

// Synthetic calibration tokens: seeded Gaussians with a small set of channels
// scaled up to inject the heavy-tailed activation structure the router is
// supposed to exploit. Identical seed, identical bytes.
struct CalibSet {
    std::vector<Matrix> batches;               // nsamples of (seqlen x dim)
    std::vector<std::size_t> outlier_channels;
};

inline CalibSet gen_calibset(std::size_t nsamples, std::size_t seqlen, std::size_t dim,
                             double outlier_frac, double outlier_scale, std::uint64_t seed) {
    CalibSet cs;
    Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);

    std::size_t n_out = outlier_frac > 0.0
                            ? std::max<std::size_t>(1, static_cast<std::size_t>(
                                                           std::llround(outlier_frac * static_cast<double>(dim))))
                            : 0;
    std::vector<double> channel_scale(dim, 1.0);
    std::vector<bool> taken(dim, false);
    while (cs.outlier_channels.size() < n_out) {
        std::size_t c = static_cast<std::size_t>(rng.uniform_index(dim));
        if (taken[c]) continue;
        taken[c] = true;
        cs.outlier_channels.push_back(c);
        channel_scale[c] = outlier_scale;
    }

    cs.batches.reserve(nsamples);
    for (std::size_t i = 0; i < nsamples; ++i) {
        Matrix m(seqlen, dim);
        for (std::size_t t = 0; t < seqlen; ++t)
            for (std::size_t c = 0; c < dim; ++c) m(t, c) = channel_scale[c] * rng.normal();
        cs.batches.push_back(std::move(m));
    }
    return cs;
}

inline CalibSet gen_calibset(const RunConfig& cfg) {
    return gen_calibset(cfg.nsamples, cfg.seqlen, cfg.model_dim, cfg.outlier_frac,
                        cfg.outlier_scale, cfg.seed);
}

// Frozen toy model: a stack of square linear layers with seeded Gaussian
// weights at the configured scale.
inline std::vector<Matrix> gen_model(std::size_t dim, std::size_t depth, std::uint64_t seed,
                                     double weight_scale) {
    Rng rng(seed ^ 0xd1b54a32d192ed03ULL);
    std::vector<Matrix> weights;
    for (std::size_t l = 0; l < depth; ++l) {
        Matrix w(dim, dim);
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = weight_scale * rng.normal();
        weights.push_back(std::move(w));
    }
    return weights;
}

inline std::vector<Matrix> gen_model(const RunConfig& cfg) {
    return gen_model(cfg.model_dim, cfg.model_depth, cfg.seed, cfg.weight_scale);
}

}  // namespace mobi::bench
