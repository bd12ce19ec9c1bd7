#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "neurotune/data.hpp"
#include "neurotune/model.hpp"
#include "neurotune/numeric.hpp"

namespace neurotune {

// Reference corpus encoding-evaluation split, recorded as metadata. The
// synthetic eval split keeps the same train fraction.
inline constexpr int kReferenceEvalTrainTrs = 8298;
inline constexpr int kReferenceEvalTestTrs = 2630;
inline constexpr double kEvalTrainFraction =
    static_cast<double>(kReferenceEvalTrainTrs) /
    (kReferenceEvalTrainTrs + kReferenceEvalTestTrs);

inline constexpr double kDefaultEncodeLambdaGrid[] = {0.1, 1.0, 10.0, 100.0, 1000.0};
inline constexpr double kDefaultCeilingFloor = 0.05;

// One feature row per sample: [CLS ⊕ mean-pooled tokens], width 2*d_model,
// aligned with the samples' target TRs.
struct FeatureTable {
    MatrixF64 features;
    std::vector<std::size_t> sample_tr_index;
};

FeatureTable extract_features(const ModelState& s, const std::vector<PairedSample>& samples,
                              int jobs = 1);

struct RidgeOptions {
    bool standardize = true;
    bool intercept = true;
};

struct RidgeFit {
    MatrixF64 weights;                  // D x V, in the (possibly standardized) design space
    std::vector<double> chosen_lambda;  // per voxel
    std::vector<double> feat_mean, feat_scale;
    std::vector<double> y_mean;
    std::vector<std::size_t> dropped_columns;  // zero-variance columns, weights forced to 0
    std::vector<std::string> warnings;

    MatrixF64 predict(const MatrixF64& x) const;
};

// Multi-target ridge with per-voxel lambda selected by k-fold CV Pearson on
// the training rows. With standardize/intercept off and a single lambda this
// is exactly (X^T X + lambda I)^-1 X^T Y.
RidgeFit ridge_fit(const MatrixF64& x, const MatrixF64& y, std::span<const double> lambda_grid,
                   int cv_folds = 5, RidgeOptions opts = {});

struct AlignmentReport {
    std::vector<double> raw_r;        // per voxel
    std::vector<double> normalized_r; // raw / ceiling where included, else 0
    std::vector<std::uint8_t> included;
    std::map<std::string, double> roi_mean_normalized;
    std::map<std::string, std::size_t> roi_voxel_count;  // included voxels per ROI
    double floor = kDefaultCeilingFloor;
};

// Voxels with ceiling <= floor are excluded; per-ROI means cover included
// voxels only. Values above 1.0 are retained.
AlignmentReport normalized_alignment(std::span<const double> raw_r,
                                     std::span<const double> ceilings, const RoiAtlas& atlas,
                                     double floor = kDefaultCeilingFloor);

struct EvalSplit {
    std::size_t train_n = 0;
    std::size_t test_n = 0;
};

// Temporal split of the feature rows: first train_n rows fit the encoder,
// the next test_n rows are scored. The feature table may substitute any
// external predictor matrix (oracle features in tests).
AlignmentReport evaluate_features(const FeatureTable& features, const BoldRun& bold,
                                  std::span<const double> ceilings, const RoiAtlas& atlas,
                                  EvalSplit split,
                                  std::span<const double> lambda_grid = kDefaultEncodeLambdaGrid,
                                  int cv_folds = 5, double floor = kDefaultCeilingFloor);

AlignmentReport evaluate_model(const ModelState& s, const std::vector<PairedSample>& samples,
                               const BoldRun& bold, std::span<const double> ceilings,
                               const RoiAtlas& atlas, EvalSplit split,
                               std::span<const double> lambda_grid = kDefaultEncodeLambdaGrid,
                               int cv_folds = 5, double floor = kDefaultCeilingFloor,
                               int jobs = 1);

}  // namespace neurotune
