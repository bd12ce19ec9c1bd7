#include "neurotune/probes.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "neurotune/error.hpp"
#include "neurotune/numeric.hpp"
#include "neurotune/parallel.hpp"

namespace neurotune {

void ProbeDataset::validate() const {
    const std::size_t n = sample_ids.size();
    if (n < 4) throw ValidationError("ProbeDataset: too few samples");
    if (video_windows.size() != n || audio_windows.size() != n || labels.rows != n)
        throw ValidationError("ProbeDataset: inconsistent sample counts");
    if (labels.cols == 0) throw ValidationError("ProbeDataset: no label columns");
    for (double l : labels.data)
        if (l != 0.0 && l != 1.0) throw ValidationError("ProbeDataset: labels must be 0/1");
    if (schema == LabelSchema::binary && labels.cols != 1)
        throw ValidationError("ProbeDataset: binary schema needs exactly one label column");
    std::set<std::string> ids(sample_ids.begin(), sample_ids.end());
    if (ids.size() != n) throw ValidationError("ProbeDataset: duplicate sample ids");
    for (std::size_t i : train_indices)
        if (i >= n) throw ValidationError("ProbeDataset: train index out of range");
    for (std::size_t i : test_indices)
        if (i >= n) throw ValidationError("ProbeDataset: test index out of range");
}

MatrixF64 probe_features(const ModelState& s, const ProbeDataset& ds, int jobs) {
    ds.validate();
    const std::size_t d = s.cfg.d_model;
    MatrixF64 feats(ds.n_samples(), 2 * d);
    parallel_for(ds.n_samples(), jobs, [&](std::size_t i) {
        const TokenOutputs out = forward(s, ds.video_windows[i], ds.audio_windows[i]);
        const std::vector<double> pooled = mean_pool(out);
        double* row = feats.data.data() + i * 2 * d;
        const auto cls = out.tokens.row(0);
        std::copy(cls.begin(), cls.end(), row);
        std::copy(pooled.begin(), pooled.end(), row + d);
    });
    if (!feats.all_finite()) throw NumericalError("probe_features: non-finite features");
    return feats;
}

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

LinearProbe train_linear_probe(const MatrixF64& x, std::span<const double> y01, double l2) {
    require_nonempty(x, "train_linear_probe x");
    if (x.rows != y01.size()) throw ValidationError("train_linear_probe: label count mismatch");
    if (!(l2 >= 0.0)) throw ValidationError("train_linear_probe: negative l2");
    bool has0 = false, has1 = false;
    for (double y : y01) {
        if (y == 0.0) has0 = true;
        else if (y == 1.0) has1 = true;
        else throw ValidationError("train_linear_probe: labels must be 0/1");
    }
    if (!has0 || !has1)
        throw ValidationError("train_linear_probe: training labels are single-class");

    const std::size_t n = x.rows, d = x.cols;
    LinearProbe probe;
    probe.w.assign(d, 0.0);
    probe.b = 0.0;

    // Fixed step below the curvature bound of the regularized objective:
    // hessian <= (trace(X^T X) / n) / 4 + l2.
    double trace = 0.0;
    for (double v : x.data) trace += v * v;
    const double lip = trace / (4.0 * static_cast<double>(n)) + l2 + 0.25;
    const double step = 1.0 / lip;

    std::vector<double> gw(d);
    std::vector<double> resid(n);
    constexpr int kMaxIters = 10000;
    constexpr double kGradTol = 1e-6;
    for (int it = 0; it < kMaxIters; ++it) {
        for (std::size_t i = 0; i < n; ++i) {
            double z = probe.b;
            const double* row = x.data.data() + i * d;
            for (std::size_t j = 0; j < d; ++j) z += row[j] * probe.w[j];
            resid[i] = sigmoid(z) - y01[i];
        }
        std::fill(gw.begin(), gw.end(), 0.0);
        double gb = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double* row = x.data.data() + i * d;
            for (std::size_t j = 0; j < d; ++j) gw[j] += resid[i] * row[j];
            gb += resid[i];
        }
        double norm2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            gw[j] = gw[j] / static_cast<double>(n) + l2 * probe.w[j];
            norm2 += gw[j] * gw[j];
        }
        gb /= static_cast<double>(n);
        norm2 += gb * gb;
        if (std::sqrt(norm2) < kGradTol) break;
        for (std::size_t j = 0; j < d; ++j) probe.w[j] -= step * gw[j];
        probe.b -= step * gb;
    }
    for (double v : probe.w)
        if (!std::isfinite(v)) throw NumericalError("train_linear_probe: diverged");
    if (!std::isfinite(probe.b)) throw NumericalError("train_linear_probe: diverged");
    return probe;
}

double probe_predict_prob(const LinearProbe& p, std::span<const double> features) {
    if (features.size() != p.w.size())
        throw ValidationError("probe_predict_prob: width mismatch");
    double z = p.b;
    for (std::size_t j = 0; j < p.w.size(); ++j) z += p.w[j] * features[j];
    return sigmoid(z);
}

double BinaryCounts::accuracy() const {
    const std::size_t total = tp + fp + tn + fn;
    return total ? static_cast<double>(tp + tn) / static_cast<double>(total) : 0.0;
}

double BinaryCounts::f1() const {
    const double precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    const double recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    return precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

std::uint64_t stable_hash(std::string_view s) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

namespace {

BinaryCounts score_probe(const LinearProbe& probe, const MatrixF64& feats,
                         const MatrixF64& labels, std::size_t label_col,
                         std::span<const std::size_t> rows) {
    BinaryCounts c;
    for (std::size_t i : rows) {
        const bool pred = probe_predict_prob(probe, feats.row(i)) > 0.5;
        const bool truth = labels.at(i, label_col) == 1.0;
        if (pred && truth) ++c.tp;
        else if (pred && !truth) ++c.fp;
        else if (!pred && truth) ++c.fn;
        else ++c.tn;
    }
    return c;
}

MatrixF64 gather_rows(const MatrixF64& src, std::span<const std::size_t> rows) {
    MatrixF64 out(rows.size(), src.cols);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto r = src.row(rows[i]);
        std::copy(r.begin(), r.end(), out.row(i).begin());
    }
    return out;
}

}  // namespace

ProbeResult run_cv_probe(const ProbeDataset& ds, const MatrixF64& features, int folds,
                         double l2) {
    ds.validate();
    if (ds.schema != LabelSchema::binary)
        throw ValidationError("run_cv_probe: only binary tasks are cross-validated");
    if (features.rows != ds.n_samples())
        throw ValidationError("run_cv_probe: feature row count mismatch");
    if (folds < 2 || static_cast<std::size_t>(folds) > ds.n_samples())
        throw ValidationError("run_cv_probe: bad fold count");

    const std::size_t n = ds.n_samples();
    std::vector<int> base(n);
    for (std::size_t i = 0; i < n; ++i)
        base[i] = static_cast<int>(stable_hash(ds.sample_ids[i]) % folds);

    // The hash split can leave a training side single-class; rotating the
    // fold assignment preserves determinism while repairing such splits.
    std::vector<int> fold_of(n);
    int rotation = -1;
    for (int r = 0; r < folds; ++r) {
        for (std::size_t i = 0; i < n; ++i) fold_of[i] = (base[i] + r) % folds;
        bool ok = true;
        for (int f = 0; f < folds && ok; ++f) {
            bool has0 = false, has1 = false, has_test = false;
            for (std::size_t i = 0; i < n; ++i) {
                if (fold_of[i] == f) {
                    has_test = true;
                    continue;
                }
                (ds.labels.at(i, 0) == 1.0 ? has1 : has0) = true;
            }
            ok = has0 && has1 && has_test;
        }
        if (ok) {
            rotation = r;
            break;
        }
    }
    if (rotation < 0)
        throw ValidationError("run_cv_probe: no rotation yields two-class training folds");
    for (std::size_t i = 0; i < n; ++i) fold_of[i] = (base[i] + rotation) % folds;

    ProbeResult result;
    std::vector<double> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = ds.labels.at(i, 0);
    for (int f = 0; f < folds; ++f) {
        std::vector<std::size_t> train_rows, test_rows;
        for (std::size_t i = 0; i < n; ++i)
            (fold_of[i] == f ? test_rows : train_rows).push_back(i);
        const MatrixF64 x_train = gather_rows(features, train_rows);
        std::vector<double> y_train(train_rows.size());
        for (std::size_t i = 0; i < train_rows.size(); ++i) y_train[i] = labels[train_rows[i]];
        const LinearProbe probe = train_linear_probe(x_train, y_train, l2);
        const BinaryCounts c = score_probe(probe, features, ds.labels, 0, test_rows);
        result.per_fold_a2.push_back(c.accuracy());
        result.per_fold_f1.push_back(c.f1());
    }
    result.a2 = mean_of(result.per_fold_a2);
    result.f1 = mean_of(result.per_fold_f1);
    return result;
}

ProbeResult run_fixed_split_probe(const ProbeDataset& ds, const MatrixF64& features, double l2) {
    ds.validate();
    if (features.rows != ds.n_samples())
        throw ValidationError("run_fixed_split_probe: feature row count mismatch");
    if (ds.train_indices.empty() || ds.test_indices.empty())
        throw ValidationError("run_fixed_split_probe: dataset has no fixed split");

    const MatrixF64 x_train = gather_rows(features, ds.train_indices);
    ProbeResult result;
    std::vector<double> class_support;  // test-split positives per class
    for (std::size_t c = 0; c < ds.labels.cols; ++c) {
        std::vector<double> y_train(ds.train_indices.size());
        for (std::size_t i = 0; i < ds.train_indices.size(); ++i)
            y_train[i] = ds.labels.at(ds.train_indices[i], c);
        const LinearProbe probe = train_linear_probe(x_train, y_train, l2);
        const BinaryCounts counts = score_probe(probe, features, ds.labels, c, ds.test_indices);
        result.per_fold_a2.push_back(counts.accuracy());
        result.per_fold_f1.push_back(counts.f1());
        class_support.push_back(static_cast<double>(counts.tp + counts.fn));
    }
    result.a2 = mean_of(result.per_fold_a2);
    result.f1 = mean_of(result.per_fold_f1);

    // Support-weighted means over classes that actually occur in the test
    // split; weights are the per-class positive counts there.
    double wsum = 0.0, wa2 = 0.0, wf1 = 0.0;
    for (std::size_t c = 0; c < class_support.size(); ++c) {
        if (class_support[c] <= 0.0) continue;
        wsum += class_support[c];
        wa2 += class_support[c] * result.per_fold_a2[c];
        wf1 += class_support[c] * result.per_fold_f1[c];
    }
    if (wsum > 0.0) {
        result.weighted_a2 = wa2 / wsum;
        result.weighted_f1 = wf1 / wsum;
    }
    return result;
}

}  // namespace neurotune
