#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "neurotune/matrix.hpp"

namespace neurotune {

// One fMRI run: responses is T_trs x V, finite, with a repetition time in
// seconds. Voxel columns are aligned across subjects and runs.
struct BoldRun {
    std::string subject_id;
    std::string run_id;
    MatrixF64 responses;
    double tr_seconds = 1.49;

    std::size_t t_trs() const { return responses.rows; }
    std::size_t n_voxels() const { return responses.cols; }
    void validate() const;
};

// Per-TR token features for both modalities over one run. Each TR row holds a
// full frame grid: frames_per_window frames x patches_per_frame patches of
// d_v features for video, audio_tokens_per_window tokens of d_a for audio.
struct StimulusStream {
    MatrixF64 video_tokens;  // T_trs x (F*P*d_v)
    MatrixF64 audio_tokens;  // T_trs x (A*d_a)
    int frames_per_window = 8;
    int patches_per_frame = 4;
    int audio_tokens_per_window = 8;
    int d_v = 0;
    int d_a = 0;

    std::size_t t_trs() const { return video_tokens.rows; }
    void validate() const;
};

struct RoiAtlas {
    std::vector<std::string> roi_names;
    std::vector<int> labels;  // one entry per voxel, index into roi_names

    std::size_t n_voxels() const { return labels.size(); }
    int roi_index(const std::string& name) const;  // -1 when absent
    std::vector<std::size_t> voxels_of(const std::string& name) const;
    void validate() const;
};

struct VoxelMask {
    std::vector<std::uint8_t> selected;  // size V

    std::size_t n_voxels() const { return selected.size(); }
    std::size_t count() const;
    std::vector<std::size_t> indices() const;
};

VoxelMask mask_all(std::size_t v);
VoxelMask mask_for_rois(const RoiAtlas& atlas, const std::vector<std::string>& rois);

// One training example: the token windows preceding target_tr and the masked
// BOLD response at target_tr.
struct PairedSample {
    std::size_t target_tr = 0;     // within the source run
    std::size_t window_begin = 0;  // [window_begin, target_tr)
    MatrixF64 video_window;        // (F*P) x d_v
    MatrixF64 audio_window;        // A x d_a
    std::vector<double> y;         // masked voxel responses, empty for stimulus-only windows
};

// Indices of n_out items evenly placed over a grid of grid_size, computed as
// round-half-up((i + 0.5) * grid_size / n_out) and clamped to the grid.
std::vector<std::size_t> even_sample_indices(std::size_t grid_size, std::size_t n_out);

// Pairs every TR with a full preceding window; the first window_trs TRs of
// the run are dropped. Windows never cross run boundaries.
std::vector<PairedSample> make_pairs(const BoldRun& bold, const StimulusStream& stim,
                                     const VoxelMask& mask, std::size_t window_trs);

// Stimulus-only windows (y left empty), for objectives that ignore BOLD.
std::vector<PairedSample> make_windows(const StimulusStream& stim, std::size_t window_trs);

// Concatenates per-run pair lists in the given run order; each run's windows
// were already reset at its own boundary by make_pairs.
std::vector<PairedSample> concat_pairs(std::vector<std::vector<PairedSample>> per_run);

// Row range views used for temporal splits; [t0, t1).
BoldRun slice_bold(const BoldRun& run, std::size_t t0, std::size_t t1);
StimulusStream slice_stimulus(const StimulusStream& stim, std::size_t t0, std::size_t t1);

// ---- dataset manifest ------------------------------------------------------
// JSON file tying together stimulus matrices, per-subject BOLD runs and the
// atlas. All paths are stored relative to the manifest's directory.
struct DatasetManifest {
    struct RunEntry {
        std::string run_id;
        std::string responses_path;
    };
    struct SubjectEntry {
        std::string subject_id;
        std::vector<RunEntry> runs;
    };
    struct StimulusEntry {
        std::string run_id;
        std::string video_path;
        std::string audio_path;
    };

    double tr_seconds = 1.49;
    std::size_t window_trs = 8;
    int frames_per_window = 8;
    int patches_per_frame = 4;
    int audio_tokens_per_window = 8;
    int d_v = 0;
    int d_a = 0;
    std::vector<StimulusEntry> stimulus;
    std::string atlas_path;
    std::vector<SubjectEntry> subjects;
    std::optional<std::string> truth_meta_path;  // present for synthetic worlds

    void validate() const;
};

void write_manifest(const DatasetManifest& m, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);

void write_atlas(const RoiAtlas& atlas, const std::filesystem::path& path);
RoiAtlas read_atlas(const std::filesystem::path& path);

// Loaders resolve stored paths relative to manifest_dir.
StimulusStream load_stimulus(const DatasetManifest& m, const std::filesystem::path& manifest_dir,
                             const std::string& run_id);
BoldRun load_bold(const DatasetManifest& m, const std::filesystem::path& manifest_dir,
                  const std::string& subject_id, const std::string& run_id);

}  // namespace neurotune
