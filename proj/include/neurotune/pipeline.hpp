#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "neurotune/braintune.hpp"
#include "neurotune/encodeval.hpp"
#include "neurotune/model.hpp"
#include "neurotune/noiseceil.hpp"
#include "neurotune/synthworld.hpp"

namespace neurotune {

struct CeilingParams {
    std::vector<double> lambda_grid{std::begin(kDefaultCeilingLambdaGrid),
                                    std::end(kDefaultCeilingLambdaGrid)};
    int cv_folds = 5;
    // Reference split fraction of the run given to the ridge fit.
    double train_fraction = static_cast<double>(kReferenceCeilingTrainTrs) /
                            (kReferenceCeilingTrainTrs + kReferenceCeilingTestTrs);
    std::vector<double> sweep_thresholds{0.0, 0.05, 0.1, 0.15, 0.2, 0.25,
                                         0.3, 0.35, 0.4, 0.5,  0.6};
    void validate() const;
};

struct EncodeParams {
    std::vector<double> lambda_grid{std::begin(kDefaultEncodeLambdaGrid),
                                    std::end(kDefaultEncodeLambdaGrid)};
    int cv_folds = 5;
    double ceiling_floor = kDefaultCeilingFloor;
    double train_fraction = kEvalTrainFraction;
    void validate() const;
};

struct ProbeParams {
    std::size_t target_clips = 240;       // binary task, k-fold CV
    std::size_t independent_clips = 360;  // multi-label task, fixed split
    int folds = 10;
    double l2 = 1e-2;
    std::size_t n_classes = 6;
    std::uint64_t clip_seed = 77;  // mixed with the master seed
    void validate() const;
};

// Everything one end-to-end run needs; round-trips through JSON losslessly.
struct PipelineConfig {
    WorldConfig world;
    ModelConfig model;  // d_v, d_a, max_tokens are derived from world
    TuneConfig tune;
    CeilingParams ceiling;
    EncodeParams encode;
    ProbeParams probes;
    std::uint64_t seed = 1;
    int jobs = 1;

    // Pushes the master seed and derived token geometry into the sub-configs.
    void resolve();
    void validate() const;
};

PipelineConfig default_pipeline_config();
PipelineConfig load_pipeline_config(const std::filesystem::path& path);
void write_pipeline_config(const PipelineConfig& cfg, const std::filesystem::path& path);

// ---- stage functions; each one matches a subcommand -----------------------

// Generates the world and persists it under out_dir/world.
World stage_synth(const PipelineConfig& cfg, const std::filesystem::path& out_dir);

// Writes ceiling.json and sweep.csv next to out_path.
CeilingEstimate stage_ceiling(const PipelineConfig& cfg, const World& world,
                              const std::filesystem::path& out_dir);
void write_ceiling_json(const CeilingEstimate& est, const std::filesystem::path& path);
CeilingEstimate load_ceiling_json(const std::filesystem::path& path);

struct TunedModels {
    ModelState pretrained;
    ModelState stimulus_tuned;
    std::vector<ModelState> brain_tuned;        // one per subject
    std::vector<ProjectionHead> heads;          // parallel to brain_tuned
    std::vector<std::string> subject_ids;
    std::vector<double> stimulus_loss_trace;
    std::vector<std::vector<double>> brain_loss_traces;
};

// Pretrained init + stimulus-tuned control + per-subject brain-tuned models.
// Checkpoints land under out_dir/models.
TunedModels stage_tune(const PipelineConfig& cfg, const World& world,
                       const CeilingEstimate& ceilings, const std::filesystem::path& out_dir,
                       std::ostream& log);

// Alignment of one model on one subject; writes nothing.
AlignmentReport align_model(const PipelineConfig& cfg, const ModelState& model,
                            const World& world, const BoldRun& bold,
                            std::span<const double> subject_ceilings);

// Standalone-subcommand report writers; subject_filter empty means all.
void write_encode_report(const PipelineConfig& cfg, const World& world, const ModelState& model,
                         const CeilingEstimate& est, const std::string& subject_filter,
                         const std::string& model_name, const std::filesystem::path& out_path);
void write_probe_report(const PipelineConfig& cfg, const World& world, const ModelState& model,
                        const std::string& task, const std::filesystem::path& out_path);

void run_pipeline(const PipelineConfig& cfg, const std::filesystem::path& out_dir,
                  bool dry_run, std::ostream& log);

// alignment_by_roi.csv and probes.csv from an existing summary.json.
void write_report_csvs(const std::filesystem::path& summary_path,
                       const std::filesystem::path& out_dir);

// Paired test between two model reports over a dotted per-subject metric
// path; returns a small CSV (metric, n, statistic, p, flag).
std::string stats_table_csv(const std::filesystem::path& report_a,
                            const std::filesystem::path& report_b, const std::string& metric,
                            const std::string& test, const std::string& alternative);

}  // namespace neurotune
