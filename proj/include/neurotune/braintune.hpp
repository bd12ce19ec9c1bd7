#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "neurotune/data.hpp"
#include "neurotune/model.hpp"

namespace neurotune {

// Linear readout from the pooled representation to the masked voxels:
// y_hat = W * pooled + bias.
struct ProjectionHead {
    MatrixF64 w;     // m x d_model
    MatrixF64 bias;  // 1 x m; all zeros and frozen when has_bias is false
    bool has_bias = true;
};

ProjectionHead init_head(std::size_t m, int d_model, bool has_bias, std::uint64_t seed);

enum class TuneObjective { brain, stimulus };

struct TuneConfig {
    int epochs = 10;
    double lr = 1e-3;
    int batch_size = 8;
    std::size_t window_trs = 8;
    double ceiling_threshold = 0.25;
    std::uint64_t seed = 0;
    TuneObjective objective = TuneObjective::brain;
    double mask_fraction = 0.15;  // stimulus objective only
    bool head_bias = true;
    bool freeze_transformer = false;
    int jobs = 1;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const;
};

// Voxels eligible for tuning: ROI membership AND ceiling strictly above the
// threshold. Throws UntunableSubjectError when nothing survives.
VoxelMask filter_voxels(std::span<const double> ceilings, const RoiAtlas& atlas,
                        const std::vector<std::string>& target_rois, double threshold);

struct HeadGrads {
    MatrixF64 dw;    // m x d_model
    MatrixF64 dbias; // 1 x m
};

struct LossGrads {
    double loss = 0.0;
    ModelState model_grads;
    HeadGrads head_grads;
};

// Squared-error loss ||W*pool(f(x)) + b - y||^2 with exact gradients through
// the head and the whole transformer.
LossGrads brain_tune_loss(const ModelState& s, const ProjectionHead& head,
                          const PairedSample& sample);

struct TrainResult {
    ModelState state;
    ProjectionHead head;
    std::vector<double> epoch_mean_loss;
};

// Mini-batch Adam over (transformer, head). Sample order reshuffled each
// epoch from seed+epoch; gradient reduction is serial in sample order, so the
// result is identical for every jobs value.
TrainResult train(const std::vector<PairedSample>& dataset, const TuneConfig& cfg,
                  const ModelState& init);

struct StimulusTuneResult {
    ModelState state;
    std::vector<double> epoch_mean_loss;
};

// Masked token reconstruction: a seeded fraction of input tokens is replaced
// by a learned per-modality mask embedding and a linear decoder reconstructs
// the original features; MSE over masked tokens only.
StimulusTuneResult stimulus_tune(const std::vector<PairedSample>& windows, const TuneConfig& cfg,
                                 const ModelState& init);

}  // namespace neurotune
