#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "neurotune/data.hpp"
#include "neurotune/probes.hpp"

namespace neurotune {

// Synthetic stimulus/response generator with known ground truth.
//
// Latents z_t ~ N(0, I_k) i.i.d. per TR drive the token features (linear
// maps plus 1% feature noise). Target-ROI voxels read the window-mean latent
// through a fixed mixture of a linear readout and a quadratic one (pairwise
// products of latent coordinates); both parts are scaled so the per-voxel
// signal variance is exactly 1. The quadratic share is what tuning on
// responses can learn but a linear probe of random features cannot.
// Non-target ROIs read an independent latent stream linearly. Voxel noise
// = shared component (same draw for all subjects) + per-subject component, so
// the cross-subject correlation of a target voxel is analytically
// (1 + sigma_s^2) / (1 + sigma_s^2 + sigma_i^2).
struct WorldConfig {
    int n_subjects = 6;
    std::size_t t_trs = 1600;
    std::size_t n_voxels = 500;
    std::vector<std::pair<std::string, std::size_t>> roi_layout = {
        {"aSTS", 40}, {"pSTS", 60}, {"LOC", 50}, {"EBA", 50}, {"other", 300}};
    std::size_t latent_dim = 8;
    std::vector<std::string> target_rois = {"aSTS", "pSTS"};
    double shared_noise_sigma = 0.2;
    double subject_noise_sigma = 0.6;
    std::vector<double> per_subject_noise_sigma;  // optional override, size n_subjects
    std::uint64_t seed = 1;
    std::size_t window_trs = 8;
    int frames_per_window = 8;
    int patches_per_frame = 2;
    int audio_tokens_per_window = 8;
    int d_v = 12;
    int d_a = 12;
    double token_noise_frac = 0.01;
    // Fraction of target signal variance carried by quadratic latent terms.
    double nonlinear_frac = 0.6;
    double tr_seconds = 1.49;

    void validate() const;
    double noise_sigma_for(int subject_index) const;
};

struct WorldTruth {
    // Rows 0..burn_in-1 are a warm-up prefix so that every TR has a full
    // window; row (burn_in + t) is the latent that generated TR t's tokens.
    MatrixF64 latent_series;        // (burn_in + t_trs) x k
    MatrixF64 indep_latent_series;  // same shape
    MatrixF64 readout_target;       // k x m_target, linear part
    MatrixF64 readout_target_quad;  // k(k+1)/2 x m_target, quadratic part
    MatrixF64 readout_nontarget;    // k x m_nontarget
    MatrixF64 embed_video;          // k x (F*P*d_v)
    MatrixF64 embed_audio;          // k x (A*d_a)
    std::vector<std::size_t> target_voxels;
    std::vector<std::size_t> nontarget_voxels;
    std::size_t burn_in = 0;

    std::span<const double> latent_row(std::size_t tr) const {
        return latent_series.row(burn_in + tr);
    }
    // Mean latent over the window [tr - window, tr), which exists for every
    // TR thanks to the burn-in prefix.
    std::vector<double> window_mean_latent(std::size_t tr, std::size_t window) const;
};

struct World {
    WorldConfig cfg;
    std::vector<BoldRun> runs;  // one per subject, voxel-aligned
    StimulusStream stim;
    RoiAtlas atlas;
    WorldTruth truth;
};

// Normalized quadratic features of a window-mean latent zb (mean of `window`
// i.i.d. N(0,1) draws per coordinate): off-diagonal terms are w*zb_i*zb_j
// (i < j), diagonal terms (w*zb_i^2 - 1)/sqrt(2). Every term then has mean 0,
// variance exactly 1, and distinct terms are uncorrelated, so a unit-norm
// coefficient vector over them yields unit signal variance.
std::vector<double> quad_features(std::span<const double> zbar, std::size_t window);

World generate_world(const WorldConfig& cfg);

// Persists manifest + matrices + atlas + truth into dir; load reverses it.
void write_world(const World& w, const std::filesystem::path& dir);
World load_world(const std::filesystem::path& manifest_path);

WorldConfig world_config_from_json_file(const std::filesystem::path& path);

// ---- probe task generation ---------------------------------------------------
// Target task: fresh clips from the same token maps; binary label = sign of a
// fixed functional of the clip's mean latent (median split, balanced).
ProbeDataset make_target_probe_dataset(const WorldConfig& cfg, const WorldTruth& truth,
                                       std::size_t n_samples, std::uint64_t seed);

// Independent task: clips from fresh token maps and fresh latents; multi-label
// classes are thresholded functionals of the clip latent with graded supports.
// Fixed split keeps the reference train fraction.
ProbeDataset make_independent_probe_dataset(const WorldConfig& cfg, std::size_t n_samples,
                                            std::uint64_t seed, std::size_t n_classes = 6);

}  // namespace neurotune
