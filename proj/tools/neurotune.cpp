#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "neurotune/error.hpp"
#include "neurotune/pipeline.hpp"
#include "neurotune/probes.hpp"
#include "neurotune/rng.hpp"

namespace fs = std::filesystem;
using namespace neurotune;

namespace {

// NEUROTUNE_SEED wins over the config file; command-line --seed wins over both.
PipelineConfig load_config(const std::string& path, std::uint64_t* cli_seed, int* cli_jobs) {
    PipelineConfig cfg = load_pipeline_config(path);
    if (const char* env = std::getenv("NEUROTUNE_SEED")) {
        try {
            cfg.seed = std::stoull(env);
        } catch (const std::exception&) {
            throw ConfigError(std::string("NEUROTUNE_SEED is not an integer: ") + env);
        }
    }
    if (cli_seed) cfg.seed = *cli_seed;
    if (cli_jobs) cfg.jobs = *cli_jobs;
    cfg.resolve();
    cfg.validate();
    return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("write failed for " + path.string());
}

int run(int argc, char** argv) {
    CLI::App app{"synthetic fMRI brain-tuning workbench"};
    app.require_subcommand(1);

    std::string config_path, world_path, ceiling_path, checkpoint_path, out_path;
    std::string objective = "brain", subject, task, metric, test = "wilcoxon";
    std::string alternative = "two_sided";
    std::vector<std::string> report_paths;
    std::uint64_t seed = 0;
    int jobs = 0;
    bool dry_run = false;

    auto* c_init = app.add_subcommand("init-config", "write a config file with full defaults");
    c_init->add_option("--out", out_path, "config path")->required();

    auto* c_synth = app.add_subcommand("synth", "generate a synthetic dataset");
    c_synth->add_option("--config", config_path)->required()->check(CLI::ExistingFile);
    c_synth->add_option("--out", out_path, "output directory")->required();
    auto* synth_seed = c_synth->add_option("--seed", seed, "override config seed");

    auto* c_ceiling = app.add_subcommand("ceiling", "estimate cross-subject noise ceilings");
    c_ceiling->add_option("--config", config_path)->required()->check(CLI::ExistingFile);
    c_ceiling->add_option("--world", world_path, "world manifest.json")
        ->required()
        ->check(CLI::ExistingFile);
    c_ceiling->add_option("--out", out_path, "output directory")->required();
    auto* ceiling_jobs = c_ceiling->add_option("--jobs", jobs, "worker cap");

    auto* c_tune = app.add_subcommand("tune", "fine-tune a model");
    c_tune->add_option("--config", config_path)->required()->check(CLI::ExistingFile);
    c_tune->add_option("--world", world_path)->required()->check(CLI::ExistingFile);
    c_tune->add_option("--objective", objective, "brain or stimulus")
        ->check(CLI::IsMember({"brain", "stimulus"}));
    c_tune->add_option("--ceiling", ceiling_path, "ceiling.json (brain objective)");
    c_tune->add_option("--subject", subject, "subject id (brain objective)");
    c_tune->add_option("--out", out_path, "checkpoint directory")->required();
    auto* tune_seed = c_tune->add_option("--seed", seed);
    auto* tune_jobs = c_tune->add_option("--jobs", jobs);

    auto* c_encode = app.add_subcommand("encode", "fit encoding models and report alignment");
    c_encode->add_option("--config", config_path)->required()->check(CLI::ExistingFile);
    c_encode->add_option("--world", world_path)->required()->check(CLI::ExistingFile);
    c_encode->add_option("--checkpoint", checkpoint_path)->required()
        ->check(CLI::ExistingDirectory);
    c_encode->add_option("--ceiling", ceiling_path)->required()->check(CLI::ExistingFile);
    c_encode->add_option("--subject", subject, "restrict to one subject id");
    c_encode->add_option("--out", out_path, "report JSON path")->required();
    auto* encode_jobs = c_encode->add_option("--jobs", jobs);

    auto* c_probe = app.add_subcommand("probe", "clip-level linear probes on frozen features");
    c_probe->add_option("--config", config_path)->required()->check(CLI::ExistingFile);
    c_probe->add_option("--world", world_path)->required()->check(CLI::ExistingFile);
    c_probe->add_option("--checkpoint", checkpoint_path)->required()
        ->check(CLI::ExistingDirectory);
    c_probe->add_option("--task", task, "sarcasm_like or emotion_like")
        ->required()
        ->check(CLI::IsMember({"sarcasm_like", "emotion_like"}));
    c_probe->add_option("--out", out_path, "probe JSON path")->required();
    auto* probe_jobs = c_probe->add_option("--jobs", jobs);

    auto* c_stats = app.add_subcommand("stats", "paired significance test between two reports");
    c_stats->add_option("--reports", report_paths, "two report JSON paths")
        ->required()
        ->expected(2);
    c_stats->add_option("--metric", metric, "dotted per-subject metric path")->required();
    c_stats->add_option("--test", test)->check(CLI::IsMember({"wilcoxon", "ttest"}));
    c_stats->add_option("--alternative", alternative)
        ->check(CLI::IsMember({"two_sided", "greater"}));
    c_stats->add_option("--out", out_path, "CSV path (default stdout)");

    auto* c_report = app.add_subcommand("report", "CSV tables from a summary.json");
    c_report->add_option("--summary", out_path)->required()->check(CLI::ExistingFile);
    std::string report_dir = ".";
    c_report->add_option("--out-dir", report_dir, "directory for the CSV files");

    auto* c_pipe = app.add_subcommand("pipeline", "run every stage end to end");
    c_pipe->add_option("--config", config_path)->required()->check(CLI::ExistingFile);
    c_pipe->add_option("--out", out_path, "output directory")->required();
    c_pipe->add_flag("--dry-run", dry_run, "print the stage plan, write nothing");
    auto* pipe_seed = c_pipe->add_option("--seed", seed);
    auto* pipe_jobs = c_pipe->add_option("--jobs", jobs);

    CLI11_PARSE(app, argc, argv);

    const auto opt_seed = [&](CLI::Option* o) { return o->count() ? &seed : nullptr; };
    const auto opt_jobs = [&](CLI::Option* o) { return o->count() ? &jobs : nullptr; };

    if (c_init->parsed()) {
        write_pipeline_config(default_pipeline_config(), out_path);
        std::cout << "wrote " << out_path << '\n';
        return 0;
    }

    if (c_synth->parsed()) {
        const PipelineConfig cfg = load_config(config_path, opt_seed(synth_seed), nullptr);
        stage_synth(cfg, out_path);
        std::cout << "wrote " << (fs::path(out_path) / "world").string() << '\n';
        return 0;
    }

    if (c_ceiling->parsed()) {
        const PipelineConfig cfg = load_config(config_path, nullptr, opt_jobs(ceiling_jobs));
        const World world = load_world(world_path);
        stage_ceiling(cfg, world, out_path);
        std::cout << "wrote " << (fs::path(out_path) / "ceiling.json").string() << " and "
                  << (fs::path(out_path) / "sweep.csv").string() << '\n';
        return 0;
    }

    if (c_tune->parsed()) {
        const PipelineConfig cfg =
            load_config(config_path, opt_seed(tune_seed), opt_jobs(tune_jobs));
        const World world = load_world(world_path);
        const std::size_t n_pairs = world.stim.t_trs() - cfg.world.window_trs;
        const auto train_pairs = static_cast<std::size_t>(
            cfg.encode.train_fraction * static_cast<double>(n_pairs) + 0.5);
        const std::size_t train_end = cfg.world.window_trs + train_pairs;
        const ModelState init = init_model(cfg.model, mix_seed(cfg.seed, 0x696e6974));
        if (objective == "stimulus") {
            TuneConfig tc = cfg.tune;
            tc.objective = TuneObjective::stimulus;
            tc.seed = mix_seed(cfg.seed, 0x7374696d);
            const auto windows =
                make_windows(slice_stimulus(world.stim, 0, train_end), cfg.world.window_trs);
            const StimulusTuneResult r = stimulus_tune(windows, tc, init);
            save_checkpoint(r.state, out_path);
        } else {
            if (subject.empty() || ceiling_path.empty())
                throw ConfigError("tune: brain objective needs --subject and --ceiling");
            int sidx = -1;
            for (std::size_t i = 0; i < world.runs.size(); ++i)
                if (world.runs[i].subject_id == subject) sidx = static_cast<int>(i);
            if (sidx < 0) throw ValidationError("tune: unknown subject " + subject);
            const CeilingEstimate est = load_ceiling_json(ceiling_path);
            if (est.per_subject.cols != world.cfg.n_voxels ||
                est.n_subjects != world.cfg.n_subjects)
                throw ValidationError("tune: ceiling file does not match world");
            const VoxelMask mask =
                filter_voxels(est.per_subject.row(sidx), world.atlas, cfg.world.target_rois,
                              cfg.tune.ceiling_threshold);
            const auto pairs = make_pairs(slice_bold(world.runs[sidx], 0, train_end),
                                          slice_stimulus(world.stim, 0, train_end), mask,
                                          cfg.world.window_trs);
            TuneConfig tc = cfg.tune;
            tc.objective = TuneObjective::brain;
            tc.seed = mix_seed(cfg.seed ^ static_cast<std::uint64_t>(sidx), 0x627261696e);
            const TrainResult r = train(pairs, tc, init);
            save_checkpoint(r.state, out_path);
            write_matrix(r.head.w, fs::path(out_path) / "head_w.mmbt");
            write_matrix(r.head.bias, fs::path(out_path) / "head_b.mmbt");
        }
        std::cout << "wrote " << out_path << '\n';
        return 0;
    }

    if (c_encode->parsed()) {
        const PipelineConfig cfg = load_config(config_path, nullptr, opt_jobs(encode_jobs));
        const World world = load_world(world_path);
        const ModelState model = load_checkpoint(checkpoint_path);
        const CeilingEstimate est = load_ceiling_json(ceiling_path);
        if (est.per_subject.cols != world.cfg.n_voxels ||
            est.n_subjects != world.cfg.n_subjects)
            throw ValidationError("encode: ceiling file does not match world");
        write_encode_report(cfg, world, model, est, subject,
                            fs::path(checkpoint_path).filename().string(), out_path);
        std::cout << "wrote " << out_path << '\n';
        return 0;
    }

    if (c_probe->parsed()) {
        const PipelineConfig cfg = load_config(config_path, nullptr, opt_jobs(probe_jobs));
        const World world = load_world(world_path);
        const ModelState model = load_checkpoint(checkpoint_path);
        write_probe_report(cfg, world, model, task, out_path);
        std::cout << "wrote " << out_path << '\n';
        return 0;
    }

    if (c_stats->parsed()) {
        const std::string csv =
            stats_table_csv(report_paths[0], report_paths[1], metric, test, alternative);
        if (out_path.empty())
            std::cout << csv;
        else
            write_text(out_path, csv);
        return 0;
    }

    if (c_report->parsed()) {
        fs::create_directories(report_dir);
        write_report_csvs(out_path, report_dir);
        std::cout << "wrote " << (fs::path(report_dir) / "alignment_by_roi.csv").string()
                  << " and " << (fs::path(report_dir) / "probes.csv").string() << '\n';
        return 0;
    }

    if (c_pipe->parsed()) {
        const PipelineConfig cfg =
            load_config(config_path, opt_seed(pipe_seed), opt_jobs(pipe_jobs));
        run_pipeline(cfg, out_path, dry_run, std::cout);
        return 0;
    }

    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return static_cast<int>(e.code);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
