#include "neurotune/stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <vector>

#include "neurotune/error.hpp"
#include "neurotune/numeric.hpp"

namespace neurotune {

namespace {

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// Average ranks of |d|, plus the tie term sum(t^3 - t) over tie groups.
std::vector<double> average_ranks(const std::vector<double>& abs_d, double* tie_term) {
    const std::size_t n = abs_d.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return abs_d[a] < abs_d[b]; });
    std::vector<double> ranks(n, 0.0);
    *tie_term = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && abs_d[order[j + 1]] == abs_d[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        const double t = static_cast<double>(j - i + 1);
        *tie_term += t * t * t - t;
        i = j + 1;
    }
    return ranks;
}

// Exact null distribution of the positive-rank sum: counts[s] is the number
// of sign assignments with doubled rank sum s. Doubling makes tied average
// ranks integral.
std::vector<double> rank_sum_counts(const std::vector<double>& ranks) {
    std::int64_t total2 = 0;
    std::vector<std::int64_t> r2(ranks.size());
    for (std::size_t i = 0; i < ranks.size(); ++i) {
        r2[i] = static_cast<std::int64_t>(std::llround(2.0 * ranks[i]));
        total2 += r2[i];
    }
    std::vector<double> counts(static_cast<std::size_t>(total2) + 1, 0.0);
    counts[0] = 1.0;
    std::int64_t reach = 0;
    for (std::int64_t r : r2) {
        reach += r;
        for (std::int64_t s = reach; s >= r; --s) counts[s] += counts[s - r];
    }
    return counts;
}

}  // namespace

WilcoxonResult wilcoxon_signed_rank(std::span<const double> diffs, Alternative alt) {
    if (diffs.empty()) throw ValidationError("wilcoxon_signed_rank: empty input");
    std::vector<double> nonzero;
    for (double d : diffs) {
        if (!std::isfinite(d)) throw ValidationError("wilcoxon_signed_rank: non-finite input");
        if (d != 0.0) nonzero.push_back(d);
    }
    if (nonzero.empty())
        throw ValidationError("wilcoxon_signed_rank: all differences are zero");

    const std::size_t n = nonzero.size();
    std::vector<double> abs_d(n);
    for (std::size_t i = 0; i < n; ++i) abs_d[i] = std::fabs(nonzero[i]);
    double tie_term = 0.0;
    const std::vector<double> ranks = average_ranks(abs_d, &tie_term);

    double w_pos = 0.0, w_neg = 0.0;
    for (std::size_t i = 0; i < n; ++i) (nonzero[i] > 0.0 ? w_pos : w_neg) += ranks[i];
    const double total = w_pos + w_neg;

    WilcoxonResult res;
    res.n_used = n;
    res.statistic = alt == Alternative::greater ? w_neg : std::min(w_pos, w_neg);

    if (n <= 20) {
        const std::vector<double> counts = rank_sum_counts(ranks);
        const double denom = std::ldexp(1.0, static_cast<int>(n));  // 2^n assignments
        // Doubled rank sums are integral, so tail cuts are exact.
        const auto cum_le = [&](double w) {
            const auto cut = std::min<std::int64_t>(std::llround(2.0 * w),
                                                    static_cast<std::int64_t>(counts.size()) - 1);
            double acc = 0.0;
            for (std::int64_t s = 0; s <= cut; ++s) acc += counts[s];
            return acc;
        };
        if (alt == Alternative::greater) {
            res.p = cum_le(w_neg) / denom;
        } else {
            const double m = std::min(w_pos, w_neg);
            if (total - m <= m) {
                res.p = 1.0;  // min rank sum can never exceed half the total
            } else {
                // P(min <= m) = P(W <= m) + P(W >= total - m), disjoint tails.
                const double upper = denom - cum_le(total - m - 0.5);
                res.p = std::min(1.0, (cum_le(m) + upper) / denom);
            }
        }
        return res;
    }

    const double nn = static_cast<double>(n);
    const double mean = nn * (nn + 1.0) / 4.0;
    const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_term / 48.0;
    if (!(var > 0.0)) throw NumericalError("wilcoxon_signed_rank: zero variance (all ties)");
    const double sd = std::sqrt(var);
    if (alt == Alternative::greater) {
        res.p = normal_cdf((w_neg - mean) / sd);
    } else {
        res.p = std::min(1.0, 2.0 * normal_cdf((std::min(w_pos, w_neg) - mean) / sd));
    }
    return res;
}

double student_t_upper_tail(double t, int df) {
    if (df < 1) throw ValidationError("student_t_upper_tail: df must be >= 1");
    if (!std::isfinite(t)) throw ValidationError("student_t_upper_tail: non-finite t");
    if (t < 0.0) return 1.0 - student_t_upper_tail(-t, df);

    const double v = static_cast<double>(df);
    const double log_norm = std::lgamma(0.5 * (v + 1.0)) - std::lgamma(0.5 * v) -
                            0.5 * std::log(v * std::numbers::pi);
    const auto density = [&](double x) {
        return std::exp(log_norm - 0.5 * (v + 1.0) * std::log1p(x * x / v));
    };
    // Substitution x = t + u/(1-u) maps [t, inf) to u in [0, 1); the
    // transformed integrand is finite at u = 1 (0 unless df == 1).
    const auto g = [&](double u) {
        if (u >= 1.0) return df == 1 ? 1.0 / std::numbers::pi : 0.0;
        const double om = 1.0 - u;
        return density(t + u / om) / (om * om);
    };

    // Adaptive Simpson with explicit midpoint reuse.
    struct Simpson {
        const decltype(g)& f;
        double eps;
        double recurse(double a, double b, double fa, double fm, double fb, double whole,
                       int depth) const {
            const double m = 0.5 * (a + b);
            const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
            const double flm = f(lm), frm = f(rm);
            const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            const double delta = left + right - whole;
            if (depth <= 0 || std::fabs(delta) <= 15.0 * eps)
                return left + right + delta / 15.0;
            return recurse(a, m, fa, flm, fm, left, depth - 1) +
                   recurse(m, b, fm, frm, fb, right, depth - 1) ;
        }
    };
    const double fa = g(0.0), fb = g(1.0), fm = g(0.5);
    const double whole = 1.0 / 6.0 * (fa + 4.0 * fm + fb);
    const Simpson s{g, 1e-10};
    const double q = s.recurse(0.0, 1.0, fa, fm, fb, whole, 48);
    return std::clamp(q, 0.0, 1.0);
}

TTestResult one_sample_ttest_onesided(std::span<const double> diffs) {
    if (diffs.size() < 2) throw ValidationError("one_sample_ttest_onesided: need n >= 2");
    const double m = mean_of(diffs);
    const double sd = sample_sd(diffs);
    TTestResult res;
    res.df = static_cast<int>(diffs.size()) - 1;
    if (sd == 0.0) {
        if (m == 0.0)
            throw NumericalError("one_sample_ttest_onesided: all values are zero");
        res.t = m > 0.0 ? std::numeric_limits<double>::infinity()
                        : -std::numeric_limits<double>::infinity();
        res.p = m > 0.0 ? 0.0 : 1.0;
        return res;
    }
    res.t = m / (sd / std::sqrt(static_cast<double>(diffs.size())));
    res.p = student_t_upper_tail(res.t, res.df);
    return res;
}

double sem(std::span<const double> values) {
    return sample_sd(values) / std::sqrt(static_cast<double>(values.size()));
}

std::string flag_significance(double p) {
    if (!(p >= 0.0) || p > 1.0) throw ValidationError("flag_significance: p outside [0, 1]");
    if (p < 0.01) return "**";
    if (p < 0.05) return "*";
    return "ns";
}

}  // namespace neurotune
