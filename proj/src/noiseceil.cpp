#include "neurotune/noiseceil.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "neurotune/error.hpp"
#include "neurotune/numeric.hpp"
#include "neurotune/parallel.hpp"

namespace neurotune {

namespace {

struct BlockSums {
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0, syy = 0.0;
    std::size_t n = 0;
};

BlockSums operator-(BlockSums a, const BlockSums& b) {
    a.sx -= b.sx;
    a.sy -= b.sy;
    a.sxx -= b.sxx;
    a.sxy -= b.sxy;
    a.syy -= b.syy;
    a.n -= b.n;
    return a;
}

struct ScalarRidge {
    double w = 0.0, b = 0.0;
};

// Centered least squares with an L2 penalty on the slope only; closed form
// from the block sums.
ScalarRidge fit_scalar_ridge(const BlockSums& s, double lambda) {
    const double n = static_cast<double>(s.n);
    const double sxx_c = s.sxx - s.sx * s.sx / n;
    const double sxy_c = s.sxy - s.sx * s.sy / n;
    ScalarRidge r;
    r.w = sxx_c + lambda > 0.0 ? sxy_c / (sxx_c + lambda) : 0.0;
    r.b = s.sy / n - r.w * s.sx / n;
    return r;
}

double block_mse(const BlockSums& s, const ScalarRidge& r) {
    // mean((y - w x - b)^2) expanded into the sums.
    const double n = static_cast<double>(s.n);
    return (s.syy - 2.0 * r.w * s.sxy - 2.0 * r.b * s.sy + r.w * r.w * s.sxx +
            2.0 * r.w * r.b * s.sx + n * r.b * r.b) /
           n;
}

// Balanced contiguous fold boundaries over [0, n).
std::vector<std::size_t> fold_bounds(std::size_t n, int folds) {
    std::vector<std::size_t> b(folds + 1, 0);
    for (int f = 0; f < folds; ++f)
        b[f + 1] = b[f] + n / folds + (static_cast<std::size_t>(f) < n % folds ? 1 : 0);
    return b;
}

}  // namespace

CeilingEstimate estimate_ceilings(const std::vector<BoldRun>& subjects, std::size_t train_trs,
                                  std::size_t test_trs, std::span<const double> lambda_grid,
                                  int cv_folds, int jobs) {
    if (subjects.size() < 2)
        throw ValidationError("estimate_ceilings: need at least 2 subjects");
    if (lambda_grid.empty()) throw ValidationError("estimate_ceilings: empty lambda grid");
    for (double l : lambda_grid)
        if (!(l >= 0.0) || !std::isfinite(l))
            throw ValidationError("estimate_ceilings: lambdas must be finite and >= 0");
    if (cv_folds < 2) throw ValidationError("estimate_ceilings: cv_folds must be >= 2");
    if (train_trs < static_cast<std::size_t>(cv_folds) || test_trs < 3)
        throw ValidationError("estimate_ceilings: split too small");

    const std::size_t t = subjects.front().t_trs();
    const std::size_t v = subjects.front().n_voxels();
    if (train_trs + test_trs > t)
        throw ValidationError("estimate_ceilings: split exceeds run length");
    for (const auto& s : subjects) {
        s.validate();
        if (s.t_trs() != t || s.n_voxels() != v)
            throw ValidationError("estimate_ceilings: subject shapes differ");
    }

    const auto n_sub = static_cast<int>(subjects.size());
    const int n_others = n_sub - 1;
    const auto bounds = fold_bounds(train_trs, cv_folds);

    CeilingEstimate est;
    est.n_subjects = n_sub;
    est.train_trs = train_trs;
    est.test_trs = test_trs;
    est.per_subject = MatrixF64(n_sub, v, 0.0);

    MatrixF64 predictor(t, v);  // reused per subset
    std::vector<double> subset_acc(v);

    for (int target = 0; target < n_sub; ++target) {
        std::vector<int> others;
        for (int s = 0; s < n_sub; ++s)
            if (s != target) others.push_back(s);
        const MatrixF64& y_mat = subjects[target].responses;

        std::fill(subset_acc.begin(), subset_acc.end(), 0.0);
        const unsigned n_subsets = (1u << n_others) - 1u;
        for (unsigned mask = 1; mask <= n_subsets; ++mask) {
            std::fill(predictor.data.begin(), predictor.data.end(), 0.0);
            int members = 0;
            for (int i = 0; i < n_others; ++i)
                if (mask & (1u << i)) {
                    add_inplace(predictor, subjects[others[i]].responses);
                    ++members;
                }
            scale_inplace(predictor, 1.0 / members);

            parallel_for(v, jobs, [&](std::size_t vox) {
                // Per-fold sums over the train block make the lambda search
                // O(folds * grid) after one pass over the rows.
                std::vector<BlockSums> fold_sums(cv_folds);
                BlockSums total;
                for (int f = 0; f < cv_folds; ++f) {
                    BlockSums& fs = fold_sums[f];
                    for (std::size_t r = bounds[f]; r < bounds[f + 1]; ++r) {
                        const double x = predictor.at(r, vox);
                        const double y = y_mat.at(r, vox);
                        fs.sx += x;
                        fs.sy += y;
                        fs.sxx += x * x;
                        fs.sxy += x * y;
                        fs.syy += y * y;
                        ++fs.n;
                    }
                    total.sx += fs.sx;
                    total.sy += fs.sy;
                    total.sxx += fs.sxx;
                    total.sxy += fs.sxy;
                    total.syy += fs.syy;
                    total.n += fs.n;
                }

                double best_lambda = lambda_grid[0];
                double best_mse = std::numeric_limits<double>::infinity();
                for (double lambda : lambda_grid) {
                    double mse = 0.0;
                    for (int f = 0; f < cv_folds; ++f) {
                        const BlockSums held = fold_sums[f];
                        const BlockSums fit = total - held;
                        mse += block_mse(held, fit_scalar_ridge(fit, lambda)) *
                               static_cast<double>(held.n);
                    }
                    if (mse < best_mse) {
                        best_mse = mse;
                        best_lambda = lambda;
                    }
                }

                const ScalarRidge r = fit_scalar_ridge(total, best_lambda);
                std::vector<double> pred(test_trs), obs(test_trs);
                for (std::size_t i = 0; i < test_trs; ++i) {
                    const std::size_t row = train_trs + i;
                    pred[i] = r.w * predictor.at(row, vox) + r.b;
                    obs[i] = y_mat.at(row, vox);
                }
                subset_acc[vox] += pearson(pred, obs);
            });
        }
        for (std::size_t vox = 0; vox < v; ++vox)
            est.per_subject.at(target, vox) = subset_acc[vox] / n_subsets;
    }

    est.ceilings.assign(v, 0.0);
    for (std::size_t vox = 0; vox < v; ++vox) {
        double acc = 0.0;
        for (int s = 0; s < n_sub; ++s) acc += est.per_subject.at(s, vox);
        est.ceilings[vox] = acc / n_sub;
    }
    return est;
}

std::vector<ThresholdSweepRow> sweep_threshold(const CeilingEstimate& est, const RoiAtlas& atlas,
                                               const std::vector<std::string>& rois,
                                               std::span<const double> thresholds) {
    if (thresholds.empty()) throw ValidationError("sweep_threshold: no thresholds");
    for (std::size_t i = 1; i < thresholds.size(); ++i)
        if (!(thresholds[i] > thresholds[i - 1]))
            throw ValidationError("sweep_threshold: thresholds must be ascending");
    if (atlas.n_voxels() != est.per_subject.cols)
        throw ValidationError("sweep_threshold: atlas/ceiling size mismatch");

    const auto voxels = mask_for_rois(atlas, rois).indices();
    std::vector<ThresholdSweepRow> rows;
    for (double thr : thresholds) {
        ThresholdSweepRow row;
        row.threshold = thr;
        for (int s = 0; s < est.n_subjects; ++s) {
            std::size_t n = 0;
            for (std::size_t vox : voxels)
                if (est.per_subject.at(s, vox) > thr) ++n;
            row.surviving_per_subject.push_back(n);
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

void write_sweep_csv(const std::vector<ThresholdSweepRow>& rows,
                     const std::vector<std::string>& subject_ids,
                     const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("write_sweep_csv: cannot open " + path.string());
    out << "threshold";
    for (const auto& id : subject_ids) out << ',' << id;
    out << '\n';
    char buf[32];
    for (const auto& row : rows) {
        if (row.surviving_per_subject.size() != subject_ids.size())
            throw ValidationError("write_sweep_csv: column count mismatch");
        std::snprintf(buf, sizeof buf, "%.6g", row.threshold);
        out << buf;
        for (std::size_t n : row.surviving_per_subject) out << ',' << n;
        out << '\n';
    }
    if (!out) throw IoError("write_sweep_csv: write failed for " + path.string());
}

}  // namespace neurotune
