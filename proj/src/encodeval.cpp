#include "neurotune/encodeval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "neurotune/error.hpp"
#include "neurotune/parallel.hpp"

namespace neurotune {

FeatureTable extract_features(const ModelState& s, const std::vector<PairedSample>& samples,
                              int jobs) {
    if (samples.empty()) throw ValidationError("extract_features: no samples");
    const std::size_t d = s.cfg.d_model;
    FeatureTable table;
    table.features = MatrixF64(samples.size(), 2 * d);
    table.sample_tr_index.resize(samples.size());
    parallel_for(samples.size(), jobs, [&](std::size_t i) {
        const TokenOutputs out = forward(s, samples[i].video_window, samples[i].audio_window);
        const std::vector<double> pooled = mean_pool(out);
        double* row = table.features.data.data() + i * 2 * d;
        const auto cls = out.tokens.row(0);
        std::copy(cls.begin(), cls.end(), row);
        std::copy(pooled.begin(), pooled.end(), row + d);
        table.sample_tr_index[i] = samples[i].target_tr;
    });
    if (!table.features.all_finite())
        throw NumericalError("extract_features: non-finite feature values");
    return table;
}

namespace {

std::vector<std::size_t> fold_bounds(std::size_t n, int folds) {
    std::vector<std::size_t> b(folds + 1, 0);
    for (int f = 0; f < folds; ++f)
        b[f + 1] = b[f] + n / folds + (static_cast<std::size_t>(f) < n % folds ? 1 : 0);
    return b;
}

// Solves (G + lambda I) W = B for every lambda-independent right-hand side,
// skipping rows/cols of dropped columns (their weights stay 0).
MatrixF64 ridge_solve(const MatrixF64& gram, const MatrixF64& xty, double lambda) {
    MatrixF64 a = gram;
    for (std::size_t i = 0; i < a.rows; ++i) a.at(i, i) += lambda;
    return cholesky_solve(a, xty);
}

}  // namespace

MatrixF64 RidgeFit::predict(const MatrixF64& x) const {
    if (x.cols != weights.rows) throw ValidationError("RidgeFit::predict: width mismatch");
    MatrixF64 xt = x;
    if (!feat_mean.empty()) {
        for (std::size_t r = 0; r < xt.rows; ++r)
            for (std::size_t c = 0; c < xt.cols; ++c) {
                double v = xt.at(r, c) - feat_mean[c];
                if (!feat_scale.empty()) v /= feat_scale[c];
                xt.at(r, c) = v;
            }
    }
    MatrixF64 pred = matmul(xt, weights);
    if (!y_mean.empty())
        for (std::size_t r = 0; r < pred.rows; ++r)
            for (std::size_t c = 0; c < pred.cols; ++c) pred.at(r, c) += y_mean[c];
    return pred;
}

RidgeFit ridge_fit(const MatrixF64& x, const MatrixF64& y, std::span<const double> lambda_grid,
                   int cv_folds, RidgeOptions opts) {
    require_nonempty(x, "ridge_fit x");
    require_nonempty(y, "ridge_fit y");
    if (x.rows != y.rows) throw ValidationError("ridge_fit: row count mismatch");
    if (!x.all_finite() || !y.all_finite())
        throw ValidationError("ridge_fit: non-finite inputs");
    if (lambda_grid.empty()) throw ValidationError("ridge_fit: empty lambda grid");
    for (double l : lambda_grid)
        if (!std::isfinite(l) || l < 0.0)
            throw ValidationError("ridge_fit: lambdas must be finite and >= 0");
    const bool needs_cv = lambda_grid.size() > 1;
    if (needs_cv && (cv_folds < 2 || x.rows < static_cast<std::size_t>(cv_folds) * 2))
        throw ValidationError("ridge_fit: too few rows for cross-validation");

    const std::size_t n = x.rows, d = x.cols, v = y.cols;
    RidgeFit fit;

    // Column statistics; near-zero variance columns carry no information and
    // poison standardization, so they are dropped (weights pinned to 0).
    std::vector<std::uint8_t> dropped(d, 0);
    if (opts.standardize || opts.intercept) {
        fit.feat_mean.assign(d, 0.0);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) fit.feat_mean[c] += x.at(r, c);
        for (double& m : fit.feat_mean) m /= static_cast<double>(n);
    }
    if (opts.standardize) {
        fit.feat_scale.assign(d, 1.0);
        for (std::size_t c = 0; c < d; ++c) {
            double ss = 0.0;
            for (std::size_t r = 0; r < n; ++r) {
                const double dv = x.at(r, c) - fit.feat_mean[c];
                ss += dv * dv;
            }
            const double sd = n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : 0.0;
            if (sd < 1e-12) {
                dropped[c] = 1;
                fit.dropped_columns.push_back(c);
                fit.warnings.push_back("dropped zero-variance feature column " +
                                       std::to_string(c));
            } else {
                fit.feat_scale[c] = sd;
            }
        }
    }

    MatrixF64 xt(n, d);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) {
            if (dropped[c]) {
                xt.at(r, c) = 0.0;
                continue;
            }
            double val = x.at(r, c);
            if (!fit.feat_mean.empty()) val -= fit.feat_mean[c];
            if (opts.standardize) val /= fit.feat_scale[c];
            xt.at(r, c) = val;
        }

    MatrixF64 yt = y;
    if (opts.intercept) {
        fit.y_mean.assign(v, 0.0);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < v; ++c) fit.y_mean[c] += y.at(r, c);
        for (double& m : fit.y_mean) m /= static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < v; ++c) yt.at(r, c) -= fit.y_mean[c];
    }
    if (!opts.intercept) fit.feat_mean.clear();

    // Dropped columns are all-zero in xt; a unit diagonal keeps the Gram
    // matrix positive definite while still solving their weights to 0.
    const auto patch_dropped = [&](MatrixF64& gram) {
        for (std::size_t c : fit.dropped_columns) gram.at(c, c) = 1.0;
    };

    fit.chosen_lambda.assign(v, lambda_grid[0]);
    if (needs_cv) {
        const auto bounds = fold_bounds(n, cv_folds);
        MatrixF64 gram_total = matmul_tn(xt, xt);
        patch_dropped(gram_total);
        const MatrixF64 xty_total = matmul_tn(xt, yt);

        // score[l][vox] accumulates per-fold Pearson between held-out
        // predictions and held-out responses.
        std::vector<std::vector<double>> score(lambda_grid.size(),
                                               std::vector<double>(v, 0.0));
        for (int f = 0; f < cv_folds; ++f) {
            const std::size_t a = bounds[f], b = bounds[f + 1];
            const std::size_t held_n = b - a;
            if (held_n < 3) throw ValidationError("ridge_fit: fold too small");
            MatrixF64 x_held(held_n, d), y_held(held_n, v);
            for (std::size_t r = a; r < b; ++r) {
                std::copy(xt.row(r).begin(), xt.row(r).end(), x_held.row(r - a).begin());
                std::copy(yt.row(r).begin(), yt.row(r).end(), y_held.row(r - a).begin());
            }
            MatrixF64 gram_out = gram_total;
            MatrixF64 xty_out = xty_total;
            {
                const MatrixF64 gh = matmul_tn(x_held, x_held);
                const MatrixF64 xh = matmul_tn(x_held, y_held);
                for (std::size_t i = 0; i < gram_out.data.size(); ++i)
                    gram_out.data[i] -= gh.data[i];
                for (std::size_t i = 0; i < xty_out.data.size(); ++i)
                    xty_out.data[i] -= xh.data[i];
            }
            for (std::size_t li = 0; li < lambda_grid.size(); ++li) {
                const MatrixF64 w = ridge_solve(gram_out, xty_out, lambda_grid[li]);
                const MatrixF64 pred = matmul(x_held, w);
                std::vector<double> p(held_n), o(held_n);
                for (std::size_t vox = 0; vox < v; ++vox) {
                    for (std::size_t r = 0; r < held_n; ++r) {
                        p[r] = pred.at(r, vox);
                        o[r] = y_held.at(r, vox);
                    }
                    score[li][vox] += pearson(p, o);
                }
            }
        }
        for (std::size_t vox = 0; vox < v; ++vox) {
            double best = -std::numeric_limits<double>::infinity();
            for (std::size_t li = 0; li < lambda_grid.size(); ++li)
                if (score[li][vox] > best) {
                    best = score[li][vox];
                    fit.chosen_lambda[vox] = lambda_grid[li];
                }
        }
    }

    // Final fit: one solve per distinct chosen lambda, then gather columns.
    MatrixF64 gram_total = matmul_tn(xt, xt);
    patch_dropped(gram_total);
    const MatrixF64 xty_total = matmul_tn(xt, yt);
    fit.weights = MatrixF64(d, v, 0.0);
    std::vector<double> distinct = fit.chosen_lambda;
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    for (double lambda : distinct) {
        const MatrixF64 w = ridge_solve(gram_total, xty_total, lambda);
        for (std::size_t vox = 0; vox < v; ++vox)
            if (fit.chosen_lambda[vox] == lambda)
                for (std::size_t c = 0; c < d; ++c) fit.weights.at(c, vox) = w.at(c, vox);
    }
    for (std::size_t c : fit.dropped_columns)
        for (std::size_t vox = 0; vox < v; ++vox) fit.weights.at(c, vox) = 0.0;
    if (!fit.weights.all_finite()) throw NumericalError("ridge_fit: non-finite weights");
    return fit;
}

AlignmentReport normalized_alignment(std::span<const double> raw_r,
                                     std::span<const double> ceilings, const RoiAtlas& atlas,
                                     double floor) {
    if (raw_r.size() != ceilings.size() || raw_r.size() != atlas.n_voxels())
        throw ValidationError("normalized_alignment: size mismatch");
    if (!(floor > 0.0)) throw ValidationError("normalized_alignment: floor must be > 0");
    atlas.validate();

    AlignmentReport rep;
    rep.floor = floor;
    rep.raw_r.assign(raw_r.begin(), raw_r.end());
    rep.normalized_r.assign(raw_r.size(), 0.0);
    rep.included.assign(raw_r.size(), 0);
    for (std::size_t vox = 0; vox < raw_r.size(); ++vox) {
        if (!std::isfinite(raw_r[vox]) || !std::isfinite(ceilings[vox]))
            throw ValidationError("normalized_alignment: non-finite inputs");
        if (ceilings[vox] > floor) {
            rep.included[vox] = 1;
            rep.normalized_r[vox] = raw_r[vox] / ceilings[vox];
        }
    }
    for (const auto& name : atlas.roi_names) {
        double acc = 0.0;
        std::size_t cnt = 0;
        for (std::size_t vox : atlas.voxels_of(name))
            if (rep.included[vox]) {
                acc += rep.normalized_r[vox];
                ++cnt;
            }
        rep.roi_voxel_count[name] = cnt;
        rep.roi_mean_normalized[name] = cnt ? acc / static_cast<double>(cnt) : 0.0;
    }
    return rep;
}

AlignmentReport evaluate_features(const FeatureTable& features, const BoldRun& bold,
                                  std::span<const double> ceilings, const RoiAtlas& atlas,
                                  EvalSplit split, std::span<const double> lambda_grid,
                                  int cv_folds, double floor) {
    const std::size_t n = features.features.rows;
    if (features.sample_tr_index.size() != n)
        throw ValidationError("evaluate_features: feature table index mismatch");
    if (split.train_n < 8 || split.test_n < 3)
        throw ValidationError("evaluate_features: split too small");
    if (split.train_n + split.test_n > n)
        throw ValidationError("evaluate_features: split exceeds sample count");
    if (ceilings.size() != bold.n_voxels())
        throw ValidationError("evaluate_features: ceiling/voxel mismatch");
    for (std::size_t tr : features.sample_tr_index)
        if (tr >= bold.t_trs())
            throw ValidationError("evaluate_features: sample TR out of range");

    const std::size_t v = bold.n_voxels();
    MatrixF64 x_train(split.train_n, features.features.cols);
    MatrixF64 y_train(split.train_n, v);
    for (std::size_t i = 0; i < split.train_n; ++i) {
        const auto src = features.features.row(i);
        std::copy(src.begin(), src.end(), x_train.row(i).begin());
        const auto yr = bold.responses.row(features.sample_tr_index[i]);
        std::copy(yr.begin(), yr.end(), y_train.row(i).begin());
    }
    const RidgeFit fit = ridge_fit(x_train, y_train, lambda_grid, cv_folds, RidgeOptions{});

    MatrixF64 x_test(split.test_n, features.features.cols);
    MatrixF64 y_test(split.test_n, v);
    for (std::size_t i = 0; i < split.test_n; ++i) {
        const std::size_t row = split.train_n + i;
        const auto src = features.features.row(row);
        std::copy(src.begin(), src.end(), x_test.row(i).begin());
        const auto yr = bold.responses.row(features.sample_tr_index[row]);
        std::copy(yr.begin(), yr.end(), y_test.row(i).begin());
    }
    const MatrixF64 pred = fit.predict(x_test);

    std::vector<double> raw(v, 0.0);
    std::vector<double> p(split.test_n), o(split.test_n);
    for (std::size_t vox = 0; vox < v; ++vox) {
        for (std::size_t r = 0; r < split.test_n; ++r) {
            p[r] = pred.at(r, vox);
            o[r] = y_test.at(r, vox);
        }
        raw[vox] = pearson(p, o);
    }
    return normalized_alignment(raw, ceilings, atlas, floor);
}

AlignmentReport evaluate_model(const ModelState& s, const std::vector<PairedSample>& samples,
                               const BoldRun& bold, std::span<const double> ceilings,
                               const RoiAtlas& atlas, EvalSplit split,
                               std::span<const double> lambda_grid, int cv_folds, double floor,
                               int jobs) {
    const FeatureTable table = extract_features(s, samples, jobs);
    return evaluate_features(table, bold, ceilings, atlas, split, lambda_grid, cv_folds, floor);
}

}  // namespace neurotune
