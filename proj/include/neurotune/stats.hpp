#pragma once

#include <span>
#include <string>

namespace neurotune {

enum class Alternative { greater, two_sided };

struct WilcoxonResult {
    double statistic = 0.0;  // W- for greater, min(W+, W-) for two-sided
    double p = 1.0;
    std::size_t n_used = 0;  // after zero removal
};

// Signed-rank test with average ranks on ties and zeros dropped. For
// n_used <= 20 the p-value is exact (enumeration of all 2^n sign
// assignments); larger n uses the normal approximation with tie correction.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> diffs,
                                    Alternative alt = Alternative::two_sided);

struct TTestResult {
    double t = 0.0;
    int df = 0;
    double p = 1.0;
};

// One-sample, one-sided (mean > 0). sd == 0 degenerates to p = 0 (mean > 0)
// or p = 1 (mean < 0); all-zero input is undefined and throws.
TTestResult one_sample_ttest_onesided(std::span<const double> diffs);

// Upper tail P(T_df > t), adaptive-Simpson quadrature, |error| < 1e-9.
double student_t_upper_tail(double t, int df);

double sem(std::span<const double> values);

// "**" below 0.01, "*" below 0.05, "ns" otherwise; strict inequalities.
std::string flag_significance(double p);

}  // namespace neurotune
