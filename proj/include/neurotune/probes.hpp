#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "neurotune/matrix.hpp"
#include "neurotune/model.hpp"

namespace neurotune {

enum class LabelSchema { binary, multi_label };

// Clip-level downstream task. Binary tasks run k-fold CV; multi-label tasks
// use the stored fixed split with per-class probes.
struct ProbeDataset {
    std::vector<MatrixF64> video_windows;
    std::vector<MatrixF64> audio_windows;
    MatrixF64 labels;  // n_samples x n_classes, entries in {0, 1}
    LabelSchema schema = LabelSchema::binary;
    std::vector<std::string> sample_ids;
    std::vector<std::size_t> train_indices, test_indices;  // fixed-split tasks

    std::size_t n_samples() const { return sample_ids.size(); }
    void validate() const;
};

// Reference corpus split sizes recorded as metadata for the fixed-split task
// family; the synthetic split keeps the same train fraction.
inline constexpr int kFixedSplitTrainRef = 15288;
inline constexpr int kFixedSplitTestRef = 4830;

// One row per clip: [CLS ⊕ mean-pooled tokens], width 2*d_model.
MatrixF64 probe_features(const ModelState& s, const ProbeDataset& ds, int jobs = 1);

struct LinearProbe {
    std::vector<double> w;
    double b = 0.0;
};

// L2-regularized logistic regression (bias unpenalized), full-batch gradient
// descent from zero init until grad norm < 1e-6 or 10000 iterations.
LinearProbe train_linear_probe(const MatrixF64& x, std::span<const double> y01, double l2);

double probe_predict_prob(const LinearProbe& p, std::span<const double> features);

struct ProbeResult {
    double a2 = 0.0;  // accuracy
    double f1 = 0.0;
    std::optional<double> weighted_a2, weighted_f1;  // multi-label only
    std::vector<double> per_fold_a2, per_fold_f1;
};

std::uint64_t stable_hash(std::string_view s);  // FNV-1a 64

// k-fold CV with fold = (stable_hash(sample_id) + rotation) % folds; the
// smallest rotation making every training side two-class is used.
ProbeResult run_cv_probe(const ProbeDataset& ds, const MatrixF64& features, int folds = 10,
                         double l2 = 1e-2);

// Fixed-split evaluation; multi-label tasks fit one probe per class and
// report support-weighted means over classes with test positives.
ProbeResult run_fixed_split_probe(const ProbeDataset& ds, const MatrixF64& features,
                                  double l2 = 1e-2);

// Binary classification tallies; f1 is 0 when precision+recall is 0.
struct BinaryCounts {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    double accuracy() const;
    double f1() const;
};

}  // namespace neurotune
