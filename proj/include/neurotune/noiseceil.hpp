#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "neurotune/data.hpp"

namespace neurotune {

// Reference corpus split sizes for ceiling estimation, recorded as metadata;
// desk-scale runs keep the same train/test roles at smaller counts.
inline constexpr int kReferenceCeilingTrainTrs = 7700;
inline constexpr int kReferenceCeilingTestTrs = 2872;

inline constexpr double kDefaultCeilingLambdaGrid[] = {0.0, 0.01, 0.1, 1.0, 10.0};

struct CeilingEstimate {
    std::vector<double> ceilings;  // group-level, length V, unclipped
    MatrixF64 per_subject;         // n_subjects x V, unclipped
    int n_subjects = 0;
    std::size_t train_trs = 0;
    std::size_t test_trs = 0;
};

// Cross-subject prediction accuracy per voxel: for every target subject and
// every nonempty subset of the remaining subjects, a per-voxel scalar ridge
// maps the subset-mean same-voxel series to the target (lambda by k-fold CV
// on the train block, validation MSE), scored by Pearson on the test block.
// Correlations average over subsets per target subject, then over subjects
// for the group-level vector.
CeilingEstimate estimate_ceilings(const std::vector<BoldRun>& subjects, std::size_t train_trs,
                                  std::size_t test_trs,
                                  std::span<const double> lambda_grid = kDefaultCeilingLambdaGrid,
                                  int cv_folds = 5, int jobs = 1);

struct ThresholdSweepRow {
    double threshold;
    std::vector<std::size_t> surviving_per_subject;
};

// Survivor counts (ROI-restricted voxels with per-subject ceiling strictly
// above each threshold); thresholds must be ascending.
std::vector<ThresholdSweepRow> sweep_threshold(const CeilingEstimate& est, const RoiAtlas& atlas,
                                               const std::vector<std::string>& rois,
                                               std::span<const double> thresholds);

void write_sweep_csv(const std::vector<ThresholdSweepRow>& rows,
                     const std::vector<std::string>& subject_ids,
                     const std::filesystem::path& path);

}  // namespace neurotune
