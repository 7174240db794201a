#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <variant>
#include <vector>

#include "cca/errors.hpp"
#include "cca/rng.hpp"

namespace cca {

// Rotary encoding parameters: head dimension d (even), frequency base, and
// the per-2-block angles theta_i = base^(-2(i-1)/d), i in 1..d/2.
struct RopeParams {
    int dim = 0;
    double base = 10000.0;
    std::vector<double> thetas;

    static RopeParams make(int dim, double base = 10000.0) {
        require(dim >= 2 && dim % 2 == 0, "RopeParams: dim must be even and >= 2");
        require(base > 0.0, "RopeParams: base must be positive");
        RopeParams p;
        p.dim = dim;
        p.base = base;
        p.thetas.resize(std::size_t(dim / 2));
        for (int i = 0; i < dim / 2; ++i)
            p.thetas[std::size_t(i)] = std::pow(base, -2.0 * i / dim);
        return p;
    }
};

// In-place rotation of x by position m: each 2-block rotated by angle m*theta_i.
// Norm-preserving. m may be negative (inverse rotation).
inline void rotate_inplace(std::span<double> x, std::int64_t m, const RopeParams& params) {
    require(int(x.size()) == params.dim, "rotate: vector length must equal rope dim");
    for (int i = 0; i < params.dim / 2; ++i) {
        const double angle = double(m) * params.thetas[std::size_t(i)];
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        const double a = x[std::size_t(2 * i)];
        const double b = x[std::size_t(2 * i + 1)];
        x[std::size_t(2 * i)] = a * c - b * s;
        x[std::size_t(2 * i + 1)] = a * s + b * c;
    }
}

inline std::vector<double> apply_rotation(std::span<const double> x, std::int64_t m,
                                          const RopeParams& params) {
    std::vector<double> out(x.begin(), x.end());
    rotate_inplace(out, m, params);
    return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

// Pre-softmax attention logit in the relative-position form:
// q . (R_{j-i} k) / sqrt(d). Depends on positions only through j - i.
inline double rope_logit(std::span<const double> q, std::span<const double> k, std::int64_t i,
                         std::int64_t j, const RopeParams& params) {
    require(int(q.size()) == params.dim && int(k.size()) == params.dim,
            "rope_logit: vector length must equal rope dim");
    const std::vector<double> rk = apply_rotation(k, j - i, params);
    return dot(q, rk) / std::sqrt(double(params.dim));
}

// Same quantity via the absolute form: (R_i q) . (R_j k) / sqrt(d).
// Kept as a second algebraic route; equality with rope_logit is a test.
inline double rope_logit_rotated(std::span<const double> q, std::span<const double> k,
                                 std::int64_t i, std::int64_t j, const RopeParams& params) {
    require(int(q.size()) == params.dim && int(k.size()) == params.dim,
            "rope_logit_rotated: vector length must equal rope dim");
    const std::vector<double> rq = apply_rotation(q, i, params);
    const std::vector<double> rk = apply_rotation(k, j, params);
    return dot(rq, rk) / std::sqrt(double(params.dim));
}

// One softmax attention row over rotated logits. Masked entries are exactly 0;
// the softmax is max-subtracted over the unmasked set.
inline std::vector<double> attention_row(std::span<const double> q,
                                         const std::vector<std::vector<double>>& keys,
                                         std::int64_t qpos,
                                         std::span<const std::int64_t> kpos,
                                         std::span<const std::uint8_t> mask_row,
                                         const RopeParams& params) {
    require(keys.size() == kpos.size() && keys.size() == mask_row.size(),
            "attention_row: keys/positions/mask lengths disagree");
    require(!keys.empty(), "attention_row: no keys");
    const std::size_t n = keys.size();
    std::vector<double> logits(n, 0.0);
    double max_logit = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
        if (!mask_row[j]) continue;
        logits[j] = rope_logit(q, keys[j], qpos, kpos[j], params);
        max_logit = std::max(max_logit, logits[j]);
        any = true;
    }
    if (!any) throw input_error("attention_row: all keys masked (degenerate input)");
    std::vector<double> probs(n, 0.0);
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        if (!mask_row[j]) continue;
        probs[j] = std::exp(logits[j] - max_logit);
        denom += probs[j];
    }
    for (std::size_t j = 0; j < n; ++j)
        if (mask_row[j]) probs[j] /= denom;
    return probs;
}

// Probe ensembles for the decay curve.
struct AllOnesProbe {};
struct RandomEnsembleProbe {
    int count = 1;
    std::uint64_t seed = 0;
};
using DecayProbe = std::variant<AllOnesProbe, RandomEnsembleProbe>;

// Mean |logit| at each requested relative distance. The long-term decay of
// rotary attention shows up as a falling windowed mean of this curve; the
// pointwise curve oscillates.
inline std::vector<double> decay_curve(const RopeParams& params,
                                       std::span<const std::int64_t> distances,
                                       const DecayProbe& probe) {
    require(!distances.empty(), "decay_curve: no distances");
    std::vector<std::vector<double>> qs;
    std::vector<std::vector<double>> ks;
    if (std::holds_alternative<AllOnesProbe>(probe)) {
        qs.emplace_back(std::size_t(params.dim), 1.0);
        ks.emplace_back(std::size_t(params.dim), 1.0);
    } else {
        const auto& ens = std::get<RandomEnsembleProbe>(probe);
        require(ens.count >= 1, "decay_curve: empty ensemble");
        Rng rng(ens.seed);
        for (int e = 0; e < ens.count; ++e) {
            std::vector<double> q(std::size_t(params.dim));
            std::vector<double> k(std::size_t(params.dim));
            for (auto& x : q) x = rng.gaussian();
            for (auto& x : k) x = rng.gaussian();
            qs.push_back(std::move(q));
            ks.push_back(std::move(k));
        }
    }
    std::vector<double> curve;
    curve.reserve(distances.size());
    for (std::int64_t s : distances) {
        require(s >= 0, "decay_curve: distances must be non-negative");
        double acc = 0.0;
        for (std::size_t e = 0; e < qs.size(); ++e)
            acc += std::abs(rope_logit(qs[e], ks[e], 0, s, params));
        curve.push_back(acc / double(qs.size()));
    }
    return curve;
}

} // namespace cca
