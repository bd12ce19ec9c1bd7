#include "neurotune/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "json_detail.hpp"
#include "neurotune/error.hpp"
#include "neurotune/probes.hpp"
#include "neurotune/rng.hpp"
#include "neurotune/stats.hpp"

namespace neurotune {

namespace {

using nlohmann::json;

enum : std::uint64_t {
    kTagModelInit = 0x696e6974,
    kTagStimulusTune = 0x7374696d,
    kTagBrainTune = 0x627261696e,
    kTagProbeTarget = 0x736172,
    kTagProbeIndep = 0x656d6f,
};

json load_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw IoError("malformed JSON in " + path.string() + ": " + e.what());
    }
    return j;
}

void dump_json_file(const json& j, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failed for " + path.string());
}

std::string format_num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

}  // namespace

void CeilingParams::validate() const {
    if (lambda_grid.empty()) throw ConfigError("ceiling: empty lambda grid");
    for (double l : lambda_grid)
        if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("ceiling: bad lambda");
    if (cv_folds < 2) throw ConfigError("ceiling: cv_folds must be >= 2");
    if (!(train_fraction > 0.0) || !(train_fraction < 1.0))
        throw ConfigError("ceiling: train_fraction must be in (0, 1)");
    if (sweep_thresholds.empty()) throw ConfigError("ceiling: no sweep thresholds");
    for (std::size_t i = 1; i < sweep_thresholds.size(); ++i)
        if (!(sweep_thresholds[i] > sweep_thresholds[i - 1]))
            throw ConfigError("ceiling: sweep thresholds must be ascending");
}

void EncodeParams::validate() const {
    if (lambda_grid.empty()) throw ConfigError("encode: empty lambda grid");
    for (double l : lambda_grid)
        if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("encode: bad lambda");
    if (cv_folds < 2) throw ConfigError("encode: cv_folds must be >= 2");
    if (!(ceiling_floor > 0.0)) throw ConfigError("encode: ceiling_floor must be > 0");
    if (!(train_fraction > 0.0) || !(train_fraction < 1.0))
        throw ConfigError("encode: train_fraction must be in (0, 1)");
}

void ProbeParams::validate() const {
    if (target_clips < 40) throw ConfigError("probes: target_clips must be >= 40");
    if (independent_clips < 40) throw ConfigError("probes: independent_clips must be >= 40");
    if (folds < 2) throw ConfigError("probes: folds must be >= 2");
    if (!(l2 >= 0.0)) throw ConfigError("probes: l2 must be >= 0");
    if (n_classes == 0) throw ConfigError("probes: n_classes must be >= 1");
}

void PipelineConfig::resolve() {
    world.seed = seed;
    model.d_v = world.d_v;
    model.d_a = world.d_a;
    model.max_tokens =
        1 + world.frames_per_window * world.patches_per_frame + world.audio_tokens_per_window;
    tune.window_trs = world.window_trs;
    tune.jobs = jobs;
}

void PipelineConfig::validate() const {
    if (jobs < 1) throw ConfigError("jobs must be >= 1");
    world.validate();
    model.validate();
    tune.validate();
    ceiling.validate();
    encode.validate();
    probes.validate();
}

PipelineConfig default_pipeline_config() {
    PipelineConfig cfg;
    cfg.resolve();
    return cfg;
}

namespace {

json pipeline_config_to_json(const PipelineConfig& c) {
    json j;
    j["world"] = detail::world_config_to_json(c.world);
    j["model"] = {{"d_model", c.model.d_model},
                  {"n_layers", c.model.n_layers},
                  {"n_heads", c.model.n_heads},
                  {"d_ff", c.model.d_ff}};
    j["tune"] = {{"epochs", c.tune.epochs},
                 {"lr", c.tune.lr},
                 {"batch_size", c.tune.batch_size},
                 {"ceiling_threshold", c.tune.ceiling_threshold},
                 {"mask_fraction", c.tune.mask_fraction},
                 {"head_bias", c.tune.head_bias},
                 {"freeze_transformer", c.tune.freeze_transformer},
                 {"adam_beta1", c.tune.adam_beta1},
                 {"adam_beta2", c.tune.adam_beta2},
                 {"adam_eps", c.tune.adam_eps}};
    j["ceiling"] = {{"lambda_grid", c.ceiling.lambda_grid},
                    {"cv_folds", c.ceiling.cv_folds},
                    {"train_fraction", c.ceiling.train_fraction},
                    {"sweep_thresholds", c.ceiling.sweep_thresholds}};
    j["encode"] = {{"lambda_grid", c.encode.lambda_grid},
                   {"cv_folds", c.encode.cv_folds},
                   {"ceiling_floor", c.encode.ceiling_floor},
                   {"train_fraction", c.encode.train_fraction}};
    j["probes"] = {{"target_clips", c.probes.target_clips},
                   {"independent_clips", c.probes.independent_clips},
                   {"folds", c.probes.folds},
                   {"l2", c.probes.l2},
                   {"n_classes", c.probes.n_classes},
                   {"clip_seed", c.probes.clip_seed}};
    j["seed"] = c.seed;
    j["jobs"] = c.jobs;
    return j;
}

PipelineConfig pipeline_config_from_json(const json& j) {
    PipelineConfig c;
    try {
        c.world = detail::world_config_from_json(j.at("world"));
        const json& m = j.at("model");
        c.model.d_model = m.at("d_model").get<int>();
        c.model.n_layers = m.at("n_layers").get<int>();
        c.model.n_heads = m.at("n_heads").get<int>();
        c.model.d_ff = m.at("d_ff").get<int>();
        const json& t = j.at("tune");
        c.tune.epochs = t.at("epochs").get<int>();
        c.tune.lr = t.at("lr").get<double>();
        c.tune.batch_size = t.at("batch_size").get<int>();
        c.tune.ceiling_threshold = t.at("ceiling_threshold").get<double>();
        c.tune.mask_fraction = t.at("mask_fraction").get<double>();
        c.tune.head_bias = t.at("head_bias").get<bool>();
        c.tune.freeze_transformer = t.at("freeze_transformer").get<bool>();
        c.tune.adam_beta1 = t.at("adam_beta1").get<double>();
        c.tune.adam_beta2 = t.at("adam_beta2").get<double>();
        c.tune.adam_eps = t.at("adam_eps").get<double>();
        const json& ce = j.at("ceiling");
        c.ceiling.lambda_grid = ce.at("lambda_grid").get<std::vector<double>>();
        c.ceiling.cv_folds = ce.at("cv_folds").get<int>();
        c.ceiling.train_fraction = ce.at("train_fraction").get<double>();
        c.ceiling.sweep_thresholds = ce.at("sweep_thresholds").get<std::vector<double>>();
        const json& en = j.at("encode");
        c.encode.lambda_grid = en.at("lambda_grid").get<std::vector<double>>();
        c.encode.cv_folds = en.at("cv_folds").get<int>();
        c.encode.ceiling_floor = en.at("ceiling_floor").get<double>();
        c.encode.train_fraction = en.at("train_fraction").get<double>();
        const json& p = j.at("probes");
        c.probes.target_clips = p.at("target_clips").get<std::size_t>();
        c.probes.independent_clips = p.at("independent_clips").get<std::size_t>();
        c.probes.folds = p.at("folds").get<int>();
        c.probes.l2 = p.at("l2").get<double>();
        c.probes.n_classes = p.at("n_classes").get<std::size_t>();
        c.probes.clip_seed = p.at("clip_seed").get<std::uint64_t>();
        c.seed = j.at("seed").get<std::uint64_t>();
        c.jobs = j.at("jobs").get<int>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("pipeline config: ") + e.what());
    }
    c.resolve();
    c.validate();
    return c;
}

}  // namespace

PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
    return pipeline_config_from_json(load_json_file(path));
}

void write_pipeline_config(const PipelineConfig& cfg, const std::filesystem::path& path) {
    dump_json_file(pipeline_config_to_json(cfg), path);
}

// ---- stages -----------------------------------------------------------------

World stage_synth(const PipelineConfig& cfg, const std::filesystem::path& out_dir) {
    World w = generate_world(cfg.world);
    write_world(w, out_dir / "world");
    return w;
}

void write_ceiling_json(const CeilingEstimate& est, const std::filesystem::path& path) {
    json j;
    j["n_subjects"] = est.n_subjects;
    j["train_trs"] = est.train_trs;
    j["test_trs"] = est.test_trs;
    j["group"] = est.ceilings;
    json per = json::array();
    for (int s = 0; s < est.n_subjects; ++s) {
        const auto row = est.per_subject.row(s);
        per.push_back(std::vector<double>(row.begin(), row.end()));
    }
    j["per_subject"] = per;
    dump_json_file(j, path);
}

CeilingEstimate load_ceiling_json(const std::filesystem::path& path) {
    const json j = load_json_file(path);
    CeilingEstimate est;
    try {
        est.n_subjects = j.at("n_subjects").get<int>();
        est.train_trs = j.at("train_trs").get<std::size_t>();
        est.test_trs = j.at("test_trs").get<std::size_t>();
        est.ceilings = j.at("group").get<std::vector<double>>();
        const auto rows = j.at("per_subject").get<std::vector<std::vector<double>>>();
        if (rows.size() != static_cast<std::size_t>(est.n_subjects))
            throw ValidationError("ceiling file: subject count mismatch");
        est.per_subject = MatrixF64(rows.size(), est.ceilings.size());
        for (std::size_t s = 0; s < rows.size(); ++s) {
            if (rows[s].size() != est.ceilings.size())
                throw ValidationError("ceiling file: voxel count mismatch");
            std::copy(rows[s].begin(), rows[s].end(), est.per_subject.row(s).begin());
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("ceiling file: ") + e.what());
    }
    return est;
}

CeilingEstimate stage_ceiling(const PipelineConfig& cfg, const World& world,
                              const std::filesystem::path& out_dir) {
    const std::size_t t = world.stim.t_trs();
    const auto train =
        static_cast<std::size_t>(std::floor(cfg.ceiling.train_fraction * t + 0.5));
    CeilingEstimate est = estimate_ceilings(world.runs, train, t - train,
                                            cfg.ceiling.lambda_grid, cfg.ceiling.cv_folds,
                                            cfg.jobs);
    write_ceiling_json(est, out_dir / "ceiling.json");
    std::vector<std::string> ids;
    for (const auto& r : world.runs) ids.push_back(r.subject_id);
    write_sweep_csv(sweep_threshold(est, world.atlas, world.cfg.target_rois,
                                    cfg.ceiling.sweep_thresholds),
                    ids, out_dir / "sweep.csv");
    return est;
}

namespace {

// Number of paired samples reserved for the encoder fit; the tuning stages
// only ever see TRs inside this prefix.
std::size_t train_pair_count(const PipelineConfig& cfg, std::size_t t_trs) {
    const std::size_t n_pairs = t_trs - cfg.world.window_trs;
    const auto n = static_cast<std::size_t>(
        std::floor(cfg.encode.train_fraction * static_cast<double>(n_pairs) + 0.5));
    if (n < 8 || n + 3 > n_pairs)
        throw ConfigError("encode.train_fraction leaves too few rows on one side");
    return n;
}

void save_head(const ProjectionHead& head, const std::filesystem::path& dir) {
    write_matrix(head.w, dir / "head_w.mmbt");
    write_matrix(head.bias, dir / "head_b.mmbt");
}

void save_loss_trace(const std::vector<double>& trace, const std::filesystem::path& path) {
    json j;
    j["epoch_mean_loss"] = trace;
    dump_json_file(j, path);
}

}  // namespace

TunedModels stage_tune(const PipelineConfig& cfg, const World& world,
                       const CeilingEstimate& ceilings, const std::filesystem::path& out_dir,
                       std::ostream& log) {
    const auto models_dir = out_dir / "models";
    std::error_code ec;
    std::filesystem::create_directories(models_dir, ec);
    if (ec) throw IoError("cannot create " + models_dir.string());

    TunedModels out;
    out.pretrained = init_model(cfg.model, mix_seed(cfg.seed, kTagModelInit));
    save_checkpoint(out.pretrained, models_dir / "pretrained");

    const std::size_t train_pairs = train_pair_count(cfg, world.stim.t_trs());
    const std::size_t train_end_tr = cfg.world.window_trs + train_pairs;

    {
        TuneConfig tc = cfg.tune;
        tc.objective = TuneObjective::stimulus;
        tc.seed = mix_seed(cfg.seed, kTagStimulusTune);
        const auto windows =
            make_windows(slice_stimulus(world.stim, 0, train_end_tr), cfg.world.window_trs);
        log << "tune: stimulus objective on " << windows.size() << " windows\n";
        StimulusTuneResult r = stimulus_tune(windows, tc, out.pretrained);
        save_checkpoint(r.state, models_dir / "stimulus_tuned");
        save_loss_trace(r.epoch_mean_loss, models_dir / "stimulus_tuned" / "train.json");
        out.stimulus_tuned = std::move(r.state);
        out.stimulus_loss_trace = std::move(r.epoch_mean_loss);
    }

    for (int s = 0; s < cfg.world.n_subjects; ++s) {
        const BoldRun& run = world.runs[s];
        VoxelMask mask;
        try {
            mask = filter_voxels(ceilings.per_subject.row(s), world.atlas,
                                 cfg.world.target_rois, cfg.tune.ceiling_threshold);
        } catch (const UntunableSubjectError& e) {
            throw UntunableSubjectError(run.subject_id + ": " + e.what());
        }
        const auto pairs = make_pairs(slice_bold(run, 0, train_end_tr),
                                      slice_stimulus(world.stim, 0, train_end_tr), mask,
                                      cfg.world.window_trs);
        TuneConfig tc = cfg.tune;
        tc.objective = TuneObjective::brain;
        tc.seed = mix_seed(cfg.seed ^ static_cast<std::uint64_t>(s), kTagBrainTune);
        log << "tune: brain objective for " << run.subject_id << " on " << pairs.size()
            << " pairs, " << mask.count() << " voxels\n";
        TrainResult r = train(pairs, tc, out.pretrained);
        const auto dir = models_dir / ("brain_" + run.subject_id);
        save_checkpoint(r.state, dir);
        save_head(r.head, dir);
        save_loss_trace(r.epoch_mean_loss, dir / "train.json");
        out.brain_tuned.push_back(std::move(r.state));
        out.heads.push_back(std::move(r.head));
        out.subject_ids.push_back(run.subject_id);
        out.brain_loss_traces.push_back(std::move(r.epoch_mean_loss));
    }
    return out;
}

AlignmentReport align_model(const PipelineConfig& cfg, const ModelState& model,
                            const World& world, const BoldRun& bold,
                            std::span<const double> subject_ceilings) {
    const auto samples = make_windows(world.stim, cfg.world.window_trs);
    const std::size_t train_pairs = train_pair_count(cfg, world.stim.t_trs());
    const FeatureTable table = extract_features(model, samples, cfg.jobs);
    return evaluate_features(table, bold, subject_ceilings, world.atlas,
                             EvalSplit{train_pairs, samples.size() - train_pairs},
                             cfg.encode.lambda_grid, cfg.encode.cv_folds,
                             cfg.encode.ceiling_floor);
}

// ---- summary assembly ---------------------------------------------------------

namespace {

struct RoiSplit {
    std::vector<std::size_t> target, nontarget;
};

RoiSplit split_voxels(const World& world) {
    RoiSplit rs;
    rs.target = world.truth.target_voxels;
    rs.nontarget = world.truth.nontarget_voxels;
    return rs;
}

double mean_over(const AlignmentReport& rep, const std::vector<std::size_t>& voxels,
                 bool raw = false) {
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t v : voxels)
        if (rep.included[v]) {
            acc += raw ? rep.raw_r[v] : rep.normalized_r[v];
            ++n;
        }
    return n ? acc / static_cast<double>(n) : 0.0;
}

std::size_t included_count(const AlignmentReport& rep, const std::vector<std::size_t>& voxels) {
    std::size_t n = 0;
    for (std::size_t v : voxels)
        if (rep.included[v]) ++n;
    return n;
}

json subject_alignment_json(const std::string& subject_id, const AlignmentReport& rep,
                            const World& world, const RoiSplit& rs) {
    json j;
    j["subject_id"] = subject_id;
    j["target_mean_normalized"] = mean_over(rep, rs.target);
    j["nontarget_mean_normalized"] = mean_over(rep, rs.nontarget);
    j["target_mean_raw"] = mean_over(rep, rs.target, true);
    j["included_target_voxels"] = included_count(rep, rs.target);
    json per_roi;
    for (const auto& name : world.atlas.roi_names) {
        per_roi[name] = {{"mean_normalized", rep.roi_mean_normalized.at(name)},
                         {"included_voxels", rep.roi_voxel_count.at(name)}};
    }
    j["per_roi"] = per_roi;
    return j;
}

// Group block for one model class from its per-subject reports.
json model_alignment_json(const std::vector<json>& subjects, const World& world) {
    json j;
    j["subjects"] = subjects;
    double t = 0.0, nt = 0.0;
    for (const auto& s : subjects) {
        t += s.at("target_mean_normalized").get<double>();
        nt += s.at("nontarget_mean_normalized").get<double>();
    }
    const double n = static_cast<double>(subjects.size());
    j["group_target_mean"] = t / n;
    j["group_nontarget_mean"] = nt / n;
    json per_roi;
    for (const auto& name : world.atlas.roi_names) {
        double acc = 0.0;
        for (const auto& s : subjects)
            acc += s.at("per_roi").at(name).at("mean_normalized").get<double>();
        per_roi[name] = acc / n;
    }
    j["per_roi_group_mean"] = per_roi;
    return j;
}

std::vector<double> subject_metric(const json& model_block, const std::string& key) {
    std::vector<double> out;
    for (const auto& s : model_block.at("subjects")) out.push_back(s.at(key).get<double>());
    return out;
}

json wilcoxon_json(std::span<const double> a, std::span<const double> b) {
    std::vector<double> diffs(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) diffs[i] = a[i] - b[i];
    const WilcoxonResult r = wilcoxon_signed_rank(diffs, Alternative::two_sided);
    return {{"test", "wilcoxon_signed_rank"}, {"alternative", "two_sided"},
            {"n", r.n_used},                  {"statistic", r.statistic},
            {"p", r.p},                       {"flag", flag_significance(r.p)}};
}

json ttest_json(std::span<const double> values, double baseline) {
    std::vector<double> diffs(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) diffs[i] = values[i] - baseline;
    const TTestResult r = one_sample_ttest_onesided(diffs);
    return {{"test", "ttest_one_sided"}, {"n", diffs.size()}, {"t", r.t},
            {"df", r.df},                {"p", r.p},          {"flag", flag_significance(r.p)}};
}

json probe_result_json(const ProbeResult& r) {
    json j;
    j["a2"] = r.a2;
    j["f1"] = r.f1;
    if (r.weighted_a2) j["weighted_a2"] = *r.weighted_a2;
    if (r.weighted_f1) j["weighted_f1"] = *r.weighted_f1;
    return j;
}

}  // namespace

void write_encode_report(const PipelineConfig& raw_cfg, const World& world,
                         const ModelState& model, const CeilingEstimate& est,
                         const std::string& subject_filter, const std::string& model_name,
                         const std::filesystem::path& out_path) {
    PipelineConfig cfg = raw_cfg;
    cfg.resolve();
    const RoiSplit rs = split_voxels(world);
    std::vector<json> subjects;
    bool matched = subject_filter.empty();
    for (int s = 0; s < cfg.world.n_subjects; ++s) {
        const std::string& id = world.runs[s].subject_id;
        if (!subject_filter.empty() && id != subject_filter) continue;
        matched = true;
        const AlignmentReport rep =
            align_model(cfg, model, world, world.runs[s], est.per_subject.row(s));
        subjects.push_back(subject_alignment_json(id, rep, world, rs));
    }
    if (!matched) throw ValidationError("encode: unknown subject " + subject_filter);
    json file;
    file["model"] = model_name;
    file["subjects"] = subjects;
    dump_json_file(file, out_path);
}

void write_probe_report(const PipelineConfig& raw_cfg, const World& world,
                        const ModelState& model, const std::string& task,
                        const std::filesystem::path& out_path) {
    PipelineConfig cfg = raw_cfg;
    cfg.resolve();
    json out;
    out["task"] = task;
    if (task == "sarcasm_like") {
        const ProbeDataset ds = make_target_probe_dataset(
            world.cfg, world.truth, cfg.probes.target_clips,
            mix_seed(cfg.probes.clip_seed, kTagProbeTarget));
        const MatrixF64 feats = probe_features(model, ds, cfg.jobs);
        const ProbeResult r = run_cv_probe(ds, feats, cfg.probes.folds, cfg.probes.l2);
        out["task_type"] = "binary_cv";
        out["metrics"] = probe_result_json(r);
        out["per_fold"] = {{"a2", r.per_fold_a2}, {"f1", r.per_fold_f1}};
    } else if (task == "emotion_like") {
        const ProbeDataset ds = make_independent_probe_dataset(
            world.cfg, cfg.probes.independent_clips,
            mix_seed(cfg.probes.clip_seed, kTagProbeIndep), cfg.probes.n_classes);
        const MatrixF64 feats = probe_features(model, ds, cfg.jobs);
        const ProbeResult r = run_fixed_split_probe(ds, feats, cfg.probes.l2);
        out["task_type"] = "multi_label_fixed_split";
        out["metrics"] = probe_result_json(r);
        out["per_fold"] = {{"a2", r.per_fold_a2}, {"f1", r.per_fold_f1}};
    } else {
        throw ConfigError("probe: unknown task " + task);
    }
    dump_json_file(out, out_path);
}

void run_pipeline(const PipelineConfig& raw_cfg, const std::filesystem::path& out_dir,
                  bool dry_run, std::ostream& log) {
    PipelineConfig cfg = raw_cfg;
    cfg.resolve();
    cfg.validate();

    log << "plan:\n"
        << "  synth    -> " << (out_dir / "world").string() << '\n'
        << "  ceiling  -> " << (out_dir / "ceiling.json").string() << ", "
        << (out_dir / "sweep.csv").string() << '\n'
        << "  tune     -> " << (out_dir / "models").string() << '\n'
        << "  encode   -> " << (out_dir / "encode").string() << '\n'
        << "  probes   -> " << (out_dir / "probes").string() << '\n'
        << "  summary  -> " << (out_dir / "summary.json").string() << '\n';
    if (dry_run) return;

    std::error_code ec;
    for (const char* sub : {"", "encode", "probes"}) {
        std::filesystem::create_directories(out_dir / sub, ec);
        if (ec) throw IoError("cannot create " + (out_dir / sub).string());
    }
    std::filesystem::remove(out_dir / "FAILED", ec);

    std::string stage = "synth";
    try {
        log << "synth: seed " << cfg.seed << '\n';
        const World world = stage_synth(cfg, out_dir);
        const RoiSplit rs = split_voxels(world);

        stage = "ceiling";
        log << "ceiling: " << world.cfg.n_subjects << " subjects, "
            << world.cfg.n_voxels << " voxels\n";
        const CeilingEstimate est = stage_ceiling(cfg, world, out_dir);

        stage = "tune";
        const TunedModels models = stage_tune(cfg, world, est, out_dir, log);

        stage = "encode";
        const auto samples = make_windows(world.stim, cfg.world.window_trs);
        const std::size_t train_pairs = train_pair_count(cfg, world.stim.t_trs());
        const EvalSplit split{train_pairs, samples.size() - train_pairs};
        const auto eval_with = [&](const ModelState& m, int subject) {
            const FeatureTable table = extract_features(m, samples, cfg.jobs);
            return evaluate_features(table, world.runs[subject], est.per_subject.row(subject),
                                     world.atlas, split, cfg.encode.lambda_grid,
                                     cfg.encode.cv_folds, cfg.encode.ceiling_floor);
        };
        // Subject-independent models share one feature pass.
        const auto eval_shared = [&](const ModelState& m) {
            const FeatureTable table = extract_features(m, samples, cfg.jobs);
            std::vector<json> subjects;
            for (int s = 0; s < cfg.world.n_subjects; ++s) {
                const AlignmentReport rep = evaluate_features(
                    table, world.runs[s], est.per_subject.row(s), world.atlas, split,
                    cfg.encode.lambda_grid, cfg.encode.cv_folds, cfg.encode.ceiling_floor);
                subjects.push_back(
                    subject_alignment_json(world.runs[s].subject_id, rep, world, rs));
            }
            return subjects;
        };

        log << "encode: " << samples.size() << " samples, train " << split.train_n << '\n';
        json alignment;
        alignment["pretrained"] = model_alignment_json(eval_shared(models.pretrained), world);
        alignment["stimulus_tuned"] =
            model_alignment_json(eval_shared(models.stimulus_tuned), world);
        {
            std::vector<json> subjects;
            for (int s = 0; s < cfg.world.n_subjects; ++s) {
                const AlignmentReport rep = eval_with(models.brain_tuned[s], s);
                subjects.push_back(
                    subject_alignment_json(models.subject_ids[s], rep, world, rs));
            }
            alignment["brain_tuned"] = model_alignment_json(subjects, world);
        }
        for (const auto& [name, block] : alignment.items()) {
            json file;
            file["model"] = name;
            file["subjects"] = block.at("subjects");
            dump_json_file(file, out_dir / "encode" / (name + ".json"));
        }

        stage = "probes";
        const ProbeDataset target_ds = make_target_probe_dataset(
            world.cfg, world.truth, cfg.probes.target_clips,
            mix_seed(cfg.probes.clip_seed, kTagProbeTarget));
        const ProbeDataset indep_ds = make_independent_probe_dataset(
            world.cfg, cfg.probes.independent_clips,
            mix_seed(cfg.probes.clip_seed, kTagProbeIndep), cfg.probes.n_classes);
        log << "probes: " << target_ds.n_samples() << " target clips, "
            << indep_ds.n_samples() << " independent clips\n";

        const auto run_task = [&](const ProbeDataset& ds, bool fixed_split,
                                  const ModelState& m) {
            const MatrixF64 feats = probe_features(m, ds, cfg.jobs);
            return fixed_split ? run_fixed_split_probe(ds, feats, cfg.probes.l2)
                               : run_cv_probe(ds, feats, cfg.probes.folds, cfg.probes.l2);
        };
        const auto task_json = [&](const ProbeDataset& ds, bool fixed_split,
                                   const char* type) {
            json task;
            task["task_type"] = type;
            json ms;
            ms["pretrained"] = probe_result_json(run_task(ds, fixed_split, models.pretrained));
            ms["stimulus_tuned"] =
                probe_result_json(run_task(ds, fixed_split, models.stimulus_tuned));
            json per_subject = json::array();
            std::vector<double> a2s, f1s, wa2s, wf1s;
            for (int s = 0; s < cfg.world.n_subjects; ++s) {
                const ProbeResult r = run_task(ds, fixed_split, models.brain_tuned[s]);
                json e = probe_result_json(r);
                e["subject_id"] = models.subject_ids[s];
                per_subject.push_back(e);
                a2s.push_back(r.a2);
                f1s.push_back(r.f1);
                if (r.weighted_a2) wa2s.push_back(*r.weighted_a2);
                if (r.weighted_f1) wf1s.push_back(*r.weighted_f1);
            }
            json bt;
            bt["per_subject"] = per_subject;
            bt["a2_mean"] = mean_of(a2s);
            bt["a2_sem"] = sem(a2s);
            bt["f1_mean"] = mean_of(f1s);
            bt["f1_sem"] = sem(f1s);
            if (!wa2s.empty()) {
                bt["weighted_a2_mean"] = mean_of(wa2s);
                bt["weighted_a2_sem"] = sem(wa2s);
                bt["weighted_f1_mean"] = mean_of(wf1s);
                bt["weighted_f1_sem"] = sem(wf1s);
            }
            ms["brain_tuned"] = bt;
            task["models"] = ms;
            return task;
        };

        json probes;
        probes["sarcasm_like"] = task_json(target_ds, false, "binary_cv");
        probes["emotion_like"] = task_json(indep_ds, true, "multi_label_fixed_split");
        for (const auto& [name, block] : probes.items())
            dump_json_file(block, out_dir / "probes" / (name + ".json"));

        stage = "stats";
        json stats;
        {
            const auto bt = subject_metric(alignment["brain_tuned"], "target_mean_normalized");
            const auto pre =
                subject_metric(alignment["pretrained"], "target_mean_normalized");
            const auto st =
                subject_metric(alignment["stimulus_tuned"], "target_mean_normalized");
            stats["alignment_target_brain_vs_pretrained"] = wilcoxon_json(bt, pre);
            stats["alignment_target_brain_vs_stimulus"] = wilcoxon_json(bt, st);
            const auto bt_nt =
                subject_metric(alignment["brain_tuned"], "nontarget_mean_normalized");
            const auto pre_nt =
                subject_metric(alignment["pretrained"], "nontarget_mean_normalized");
            stats["alignment_nontarget_brain_vs_pretrained"] = wilcoxon_json(bt_nt, pre_nt);
        }
        {
            const json& sarcasm = probes["sarcasm_like"]["models"];
            std::vector<double> a2s, f1s;
            for (const auto& e : sarcasm.at("brain_tuned").at("per_subject")) {
                a2s.push_back(e.at("a2").get<double>());
                f1s.push_back(e.at("f1").get<double>());
            }
            stats["probe_sarcasm_a2_brain_vs_pretrained"] =
                ttest_json(a2s, sarcasm.at("pretrained").at("a2").get<double>());
            stats["probe_sarcasm_f1_brain_vs_pretrained"] =
                ttest_json(f1s, sarcasm.at("pretrained").at("f1").get<double>());

            const json& emotion = probes["emotion_like"]["models"];
            std::vector<double> wa2s, wf1s;
            for (const auto& e : emotion.at("brain_tuned").at("per_subject")) {
                wa2s.push_back(e.at("weighted_a2").get<double>());
                wf1s.push_back(e.at("weighted_f1").get<double>());
            }
            stats["probe_emotion_weighted_a2_brain_vs_pretrained"] =
                ttest_json(wa2s, emotion.at("pretrained").at("weighted_a2").get<double>());
            stats["probe_emotion_weighted_f1_brain_vs_pretrained"] =
                ttest_json(wf1s, emotion.at("pretrained").at("weighted_f1").get<double>());
        }

        json summary;
        summary["schema"] = "neurotune_summary_v1";
        summary["seed"] = cfg.seed;
        summary["config"] = pipeline_config_to_json(cfg);
        {
            json ceil;
            ceil["threshold"] = cfg.tune.ceiling_threshold;
            ceil["train_trs"] = est.train_trs;
            ceil["test_trs"] = est.test_trs;
            double gt = 0.0, gn = 0.0;
            for (std::size_t v : rs.target) gt += est.ceilings[v];
            for (std::size_t v : rs.nontarget) gn += est.ceilings[v];
            ceil["group_mean_target"] = gt / static_cast<double>(rs.target.size());
            ceil["group_mean_nontarget"] = gn / static_cast<double>(rs.nontarget.size());
            std::vector<double> per_mean;
            std::vector<std::size_t> survivors;
            for (int s = 0; s < est.n_subjects; ++s) {
                double acc = 0.0;
                std::size_t surv = 0;
                for (std::size_t v : rs.target) {
                    acc += est.per_subject.at(s, v);
                    if (est.per_subject.at(s, v) > cfg.tune.ceiling_threshold) ++surv;
                }
                per_mean.push_back(acc / static_cast<double>(rs.target.size()));
                survivors.push_back(surv);
            }
            ceil["per_subject_mean_target"] = per_mean;
            ceil["survivors_at_threshold"] = survivors;
            summary["ceiling"] = ceil;
        }
        summary["alignment"] = alignment;
        summary["probes"] = probes;
        summary["stats"] = stats;
        dump_json_file(summary, out_dir / "summary.json");

        stage = "report";
        write_report_csvs(out_dir / "summary.json", out_dir);
        log << "summary: " << (out_dir / "summary.json").string() << '\n';
    } catch (const std::exception& e) {
        std::ofstream marker(out_dir / "FAILED", std::ios::trunc);
        marker << stage << ": " << e.what() << '\n';
        throw;
    }
}

// ---- report CSVs ---------------------------------------------------------------

void write_report_csvs(const std::filesystem::path& summary_path,
                       const std::filesystem::path& out_dir) {
    const json summary = load_json_file(summary_path);
    if (!summary.contains("alignment"))
        throw ValidationError("report: summary has no alignment section");
    const json& alignment = summary.at("alignment");

    {
        std::ofstream out(out_dir / "alignment_by_roi.csv", std::ios::trunc);
        if (!out) throw IoError("report: cannot write alignment_by_roi.csv");
        out << "model,roi,mean_normalized,flag\n";
        for (const auto& [model, block] : alignment.items()) {
            for (const auto& [roi, mean] : block.at("per_roi_group_mean").items()) {
                std::string flag = "ns";
                if (model != "pretrained") {
                    // Per-ROI paired comparison against the pretrained init.
                    std::vector<double> diffs;
                    const json& base = alignment.at("pretrained").at("subjects");
                    const json& subj = block.at("subjects");
                    for (std::size_t i = 0; i < subj.size(); ++i) {
                        const double a = subj[i].at("per_roi").at(roi)
                                             .at("mean_normalized").get<double>();
                        const double b = base[i].at("per_roi").at(roi)
                                             .at("mean_normalized").get<double>();
                        diffs.push_back(a - b);
                    }
                    bool all_zero = true;
                    for (double d : diffs) all_zero = all_zero && d == 0.0;
                    if (!all_zero)
                        flag = flag_significance(
                            wilcoxon_signed_rank(diffs, Alternative::two_sided).p);
                }
                out << model << ',' << roi << ',' << format_num(mean.get<double>()) << ','
                    << flag << '\n';
            }
        }
        if (!out) throw IoError("report: write failed for alignment_by_roi.csv");
    }

    {
        std::ofstream out(out_dir / "probes.csv", std::ios::trunc);
        if (!out) throw IoError("report: cannot write probes.csv");
        out << "model,task,metric,value,sem,flag\n";
        if (summary.contains("probes")) {
            const json& stats = summary.at("stats");
            const auto stat_flag = [&](const std::string& key) {
                return stats.contains(key) ? stats.at(key).at("flag").get<std::string>()
                                           : std::string("ns");
            };
            for (const auto& [task, block] : summary.at("probes").items()) {
                const json& ms = block.at("models");
                const bool weighted = ms.at("pretrained").contains("weighted_a2");
                const std::string m_a2 = weighted ? "weighted_a2" : "a2";
                const std::string m_f1 = weighted ? "weighted_f1" : "f1";
                const std::string short_task = task == "sarcasm_like" ? "sarcasm" : "emotion";
                for (const char* model : {"pretrained", "stimulus_tuned"}) {
                    out << model << ',' << task << ',' << m_a2 << ','
                        << format_num(ms.at(model).at(m_a2).get<double>()) << ",,ns\n";
                    out << model << ',' << task << ',' << m_f1 << ','
                        << format_num(ms.at(model).at(m_f1).get<double>()) << ",,ns\n";
                }
                const json& bt = ms.at("brain_tuned");
                out << "brain_tuned," << task << ',' << m_a2 << ','
                    << format_num(bt.at(m_a2 + "_mean").get<double>()) << ','
                    << format_num(bt.at(m_a2 + "_sem").get<double>()) << ','
                    << stat_flag("probe_" + short_task + "_" + m_a2 + "_brain_vs_pretrained")
                    << '\n';
                out << "brain_tuned," << task << ',' << m_f1 << ','
                    << format_num(bt.at(m_f1 + "_mean").get<double>()) << ','
                    << format_num(bt.at(m_f1 + "_sem").get<double>()) << ','
                    << stat_flag("probe_" + short_task + "_" + m_f1 + "_brain_vs_pretrained")
                    << '\n';
            }
        }
        if (!out) throw IoError("report: write failed for probes.csv");
    }
}

// ---- stats subcommand ------------------------------------------------------------

namespace {

double metric_at(const json& subject, const std::string& dotted) {
    const json* cur = &subject;
    std::size_t pos = 0;
    while (pos <= dotted.size()) {
        const std::size_t dot = dotted.find('.', pos);
        const std::string key = dotted.substr(pos, dot == std::string::npos ? dot : dot - pos);
        if (!cur->contains(key))
            throw ValidationError("stats: metric path element not found: " + key);
        cur = &cur->at(key);
        if (dot == std::string::npos) break;
        pos = dot + 1;
    }
    if (!cur->is_number()) throw ValidationError("stats: metric is not numeric: " + dotted);
    return cur->get<double>();
}

}  // namespace

std::string stats_table_csv(const std::filesystem::path& report_a,
                            const std::filesystem::path& report_b, const std::string& metric,
                            const std::string& test, const std::string& alternative) {
    const json a = load_json_file(report_a);
    const json b = load_json_file(report_b);
    if (!a.contains("subjects") || !b.contains("subjects"))
        throw ValidationError("stats: reports need a subjects array");

    std::map<std::string, double> va, vb;
    for (const auto& s : a.at("subjects"))
        va[s.at("subject_id").get<std::string>()] = metric_at(s, metric);
    for (const auto& s : b.at("subjects"))
        vb[s.at("subject_id").get<std::string>()] = metric_at(s, metric);
    std::vector<double> diffs;
    for (const auto& [id, val] : va) {
        auto it = vb.find(id);
        if (it != vb.end()) diffs.push_back(val - it->second);
    }
    if (diffs.size() < 2) throw ValidationError("stats: fewer than 2 paired subjects");

    std::ostringstream out;
    out << "metric,n,statistic,p,flag\n";
    if (test == "wilcoxon") {
        Alternative alt;
        if (alternative == "two_sided") alt = Alternative::two_sided;
        else if (alternative == "greater") alt = Alternative::greater;
        else throw ConfigError("stats: unknown alternative " + alternative);
        const WilcoxonResult r = wilcoxon_signed_rank(diffs, alt);
        out << metric << ',' << r.n_used << ',' << format_num(r.statistic) << ','
            << format_num(r.p) << ',' << flag_significance(r.p) << '\n';
    } else if (test == "ttest") {
        const TTestResult r = one_sample_ttest_onesided(diffs);
        out << metric << ',' << diffs.size() << ',' << format_num(r.t) << ','
            << format_num(r.p) << ',' << flag_significance(r.p) << '\n';
    } else {
        throw ConfigError("stats: unknown test " + test);
    }
    return out.str();
}

}  // namespace neurotune
