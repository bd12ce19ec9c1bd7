#pragma once

#include <cmath>
#include <cstddef>
#include <span>

#include "neurotune/error.hpp"

namespace neurotune {

// Neumaier-compensated accumulator. Reductions that feed reported numbers go
// through this so that the result is insensitive to summation order at the
// 1e-12 level.
struct NeumaierAcc {
    double sum = 0.0;
    double comp = 0.0;

    void add(double x) {
        const double t = sum + x;
        if (std::abs(sum) >= std::abs(x))
            comp += (sum - t) + x;
        else
            comp += (x - t) + sum;
        sum = t;
    }

    double value() const { return sum + comp; }
};

inline double neumaier_sum(std::span<const double> xs) {
    NeumaierAcc acc;
    for (double x : xs) acc.add(x);
    return acc.value();
}

inline double mean_of(std::span<const double> xs) {
    if (xs.empty()) throw ValidationError("mean_of: empty input");
    return neumaier_sum(xs) / static_cast<double>(xs.size());
}

// Unbiased sample variance (n-1 denominator).
inline double sample_variance(std::span<const double> xs) {
    if (xs.size() < 2) throw ValidationError("sample_variance: need n >= 2");
    const double m = mean_of(xs);
    NeumaierAcc acc;
    for (double x : xs) acc.add((x - m) * (x - m));
    return acc.value() / static_cast<double>(xs.size() - 1);
}

inline double sample_sd(std::span<const double> xs) { return std::sqrt(sample_variance(xs)); }

// Pearson correlation. A vector with zero spread (max == min) or a non-finite
// intermediate yields r = 0 with *degenerate set; callers that must
// distinguish "no correlation" from "undefined" read the flag.
inline double pearson(std::span<const double> a, std::span<const double> b,
                      bool* degenerate = nullptr) {
    if (degenerate) *degenerate = false;
    if (a.size() != b.size()) throw ValidationError("pearson: length mismatch");
    if (a.size() < 2) throw ValidationError("pearson: need n >= 2");
    double amin = a[0], amax = a[0], bmin = b[0], bmax = b[0];
    for (std::size_t i = 1; i < a.size(); ++i) {
        amin = std::min(amin, a[i]);
        amax = std::max(amax, a[i]);
        bmin = std::min(bmin, b[i]);
        bmax = std::max(bmax, b[i]);
    }
    if (amin == amax || bmin == bmax) {
        if (degenerate) *degenerate = true;
        return 0.0;
    }
    const double ma = mean_of(a);
    const double mb = mean_of(b);
    NeumaierAcc sab, saa, sbb;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - ma;
        const double db = b[i] - mb;
        sab.add(da * db);
        saa.add(da * da);
        sbb.add(db * db);
    }
    const double denom = std::sqrt(saa.value()) * std::sqrt(sbb.value());
    const double r = sab.value() / denom;
    if (!std::isfinite(r)) {
        if (degenerate) *degenerate = true;
        return 0.0;
    }
    return r;
}

}  // namespace neurotune
