#include "neurotune/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <json.hpp>

#include "neurotune/error.hpp"

namespace neurotune {

void BoldRun::validate() const {
    if (subject_id.empty()) throw ValidationError("BoldRun: empty subject_id");
    require_nonempty(responses, "BoldRun.responses");
    if (!responses.all_finite())
        throw ValidationError("BoldRun: non-finite responses for " + subject_id);
    if (!(tr_seconds > 0.0)) throw ValidationError("BoldRun: tr_seconds must be positive");
}

void StimulusStream::validate() const {
    require_nonempty(video_tokens, "StimulusStream.video_tokens");
    require_nonempty(audio_tokens, "StimulusStream.audio_tokens");
    if (frames_per_window < 1 || patches_per_frame < 1 || audio_tokens_per_window < 1 ||
        d_v < 1 || d_a < 1)
        throw ValidationError("StimulusStream: token geometry fields must be >= 1");
    if (video_tokens.rows != audio_tokens.rows)
        throw ValidationError("StimulusStream: modality TR counts differ");
    const std::size_t vcols =
        static_cast<std::size_t>(frames_per_window) * patches_per_frame * d_v;
    const std::size_t acols = static_cast<std::size_t>(audio_tokens_per_window) * d_a;
    if (video_tokens.cols != vcols)
        throw ValidationError("StimulusStream: video column count != F*P*d_v");
    if (audio_tokens.cols != acols)
        throw ValidationError("StimulusStream: audio column count != A*d_a");
    if (!video_tokens.all_finite() || !audio_tokens.all_finite())
        throw ValidationError("StimulusStream: non-finite token features");
}

int RoiAtlas::roi_index(const std::string& name) const {
    for (std::size_t i = 0; i < roi_names.size(); ++i)
        if (roi_names[i] == name) return static_cast<int>(i);
    return -1;
}

std::vector<std::size_t> RoiAtlas::voxels_of(const std::string& name) const {
    const int idx = roi_index(name);
    std::vector<std::size_t> out;
    if (idx < 0) return out;
    for (std::size_t v = 0; v < labels.size(); ++v)
        if (labels[v] == idx) out.push_back(v);
    return out;
}

void RoiAtlas::validate() const {
    if (roi_names.empty()) throw ValidationError("RoiAtlas: no ROI names");
    if (labels.empty()) throw ValidationError("RoiAtlas: no voxels");
    std::set<std::string> seen(roi_names.begin(), roi_names.end());
    if (seen.size() != roi_names.size()) throw ValidationError("RoiAtlas: duplicate ROI names");
    for (int l : labels)
        if (l < 0 || l >= static_cast<int>(roi_names.size()))
            throw ValidationError("RoiAtlas: label out of range");
}

std::size_t VoxelMask::count() const {
    std::size_t c = 0;
    for (auto s : selected) c += (s != 0);
    return c;
}

std::vector<std::size_t> VoxelMask::indices() const {
    std::vector<std::size_t> out;
    for (std::size_t v = 0; v < selected.size(); ++v)
        if (selected[v]) out.push_back(v);
    return out;
}

VoxelMask mask_all(std::size_t v) {
    VoxelMask m;
    m.selected.assign(v, 1);
    return m;
}

VoxelMask mask_for_rois(const RoiAtlas& atlas, const std::vector<std::string>& rois) {
    atlas.validate();
    VoxelMask m;
    m.selected.assign(atlas.n_voxels(), 0);
    for (const auto& name : rois) {
        const int idx = atlas.roi_index(name);
        if (idx < 0) throw ValidationError("mask_for_rois: unknown ROI " + name);
        for (std::size_t v = 0; v < atlas.labels.size(); ++v)
            if (atlas.labels[v] == idx) m.selected[v] = 1;
    }
    return m;
}

std::vector<std::size_t> even_sample_indices(std::size_t grid_size, std::size_t n_out) {
    if (grid_size == 0 || n_out == 0)
        throw ValidationError("even_sample_indices: zero-sized request");
    std::vector<std::size_t> idx(n_out);
    for (std::size_t i = 0; i < n_out; ++i) {
        const double pos = (static_cast<double>(i) + 0.5) * static_cast<double>(grid_size) /
                           static_cast<double>(n_out);
        auto j = static_cast<std::size_t>(std::floor(pos + 0.5));  // ties round half-up
        if (j >= grid_size) j = grid_size - 1;
        idx[i] = j;
    }
    return idx;
}

namespace {

// Gathers n_out tokens of width token_dim from the window's token grid. Each
// TR row of `stream` carries tokens_per_tr tokens; grid index g maps to
// (tr = begin + g / tokens_per_tr, slot = g % tokens_per_tr).
MatrixF64 gather_window(const MatrixF64& stream, std::size_t begin, std::size_t window_trs,
                        std::size_t tokens_per_tr, std::size_t token_dim, std::size_t n_out) {
    const std::size_t grid = window_trs * tokens_per_tr;
    const auto picks = even_sample_indices(grid, n_out);
    MatrixF64 out(n_out, token_dim);
    for (std::size_t i = 0; i < n_out; ++i) {
        const std::size_t tr = begin + picks[i] / tokens_per_tr;
        const std::size_t slot = picks[i] % tokens_per_tr;
        const double* src = stream.data.data() + tr * stream.cols + slot * token_dim;
        std::copy(src, src + token_dim, out.data.data() + i * token_dim);
    }
    return out;
}

std::vector<PairedSample> build_pairs(const StimulusStream& stim, const BoldRun* bold,
                                      const VoxelMask* mask, std::size_t window_trs) {
    stim.validate();
    if (window_trs == 0) throw ValidationError("make_pairs: window_trs must be >= 1");
    const std::size_t t_trs = stim.t_trs();
    if (t_trs <= window_trs)
        throw ValidationError("make_pairs: run shorter than one window, no samples");

    std::vector<std::size_t> mask_idx;
    if (bold) {
        bold->validate();
        if (bold->t_trs() != t_trs)
            throw ValidationError("make_pairs: BOLD and stimulus TR counts differ");
        if (mask->n_voxels() != bold->n_voxels())
            throw ValidationError("make_pairs: mask size != voxel count");
        mask_idx = mask->indices();
        if (mask_idx.empty()) throw ValidationError("make_pairs: empty voxel mask");
    }

    const auto fp = static_cast<std::size_t>(stim.frames_per_window);
    const auto pp = static_cast<std::size_t>(stim.patches_per_frame);
    const auto at = static_cast<std::size_t>(stim.audio_tokens_per_window);
    // The window grid holds window_trs * F frames; F of them are sampled
    // evenly, each contributing its P patch tokens in frame order.
    const auto frame_picks = even_sample_indices(window_trs * fp, fp);

    std::vector<PairedSample> out;
    out.reserve(t_trs - window_trs);
    for (std::size_t t = window_trs; t < t_trs; ++t) {
        PairedSample s;
        s.target_tr = t;
        s.window_begin = t - window_trs;
        s.video_window = MatrixF64(fp * pp, static_cast<std::size_t>(stim.d_v));
        for (std::size_t f = 0; f < fp; ++f) {
            const std::size_t tr = s.window_begin + frame_picks[f] / fp;
            const std::size_t frame_slot = frame_picks[f] % fp;
            const double* src = stim.video_tokens.data.data() + tr * stim.video_tokens.cols +
                                frame_slot * pp * stim.d_v;
            std::copy(src, src + pp * stim.d_v,
                      s.video_window.data.data() + f * pp * stim.d_v);
        }
        s.audio_window = gather_window(stim.audio_tokens, s.window_begin, window_trs, at,
                                       static_cast<std::size_t>(stim.d_a), at);
        if (bold) {
            s.y.resize(mask_idx.size());
            const auto row = bold->responses.row(t);
            for (std::size_t j = 0; j < mask_idx.size(); ++j) s.y[j] = row[mask_idx[j]];
        }
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace

std::vector<PairedSample> make_pairs(const BoldRun& bold, const StimulusStream& stim,
                                     const VoxelMask& mask, std::size_t window_trs) {
    return build_pairs(stim, &bold, &mask, window_trs);
}

std::vector<PairedSample> make_windows(const StimulusStream& stim, std::size_t window_trs) {
    return build_pairs(stim, nullptr, nullptr, window_trs);
}

std::vector<PairedSample> concat_pairs(std::vector<std::vector<PairedSample>> per_run) {
    std::vector<PairedSample> out;
    for (auto& run : per_run)
        for (auto& s : run) out.push_back(std::move(s));
    return out;
}

BoldRun slice_bold(const BoldRun& run, std::size_t t0, std::size_t t1) {
    if (t0 >= t1 || t1 > run.t_trs()) throw ValidationError("slice_bold: bad range");
    BoldRun out;
    out.subject_id = run.subject_id;
    out.run_id = run.run_id;
    out.tr_seconds = run.tr_seconds;
    out.responses = MatrixF64(t1 - t0, run.n_voxels());
    std::copy(run.responses.data.begin() + t0 * run.n_voxels(),
              run.responses.data.begin() + t1 * run.n_voxels(), out.responses.data.begin());
    return out;
}

StimulusStream slice_stimulus(const StimulusStream& stim, std::size_t t0, std::size_t t1) {
    if (t0 >= t1 || t1 > stim.t_trs()) throw ValidationError("slice_stimulus: bad range");
    StimulusStream out = stim;
    out.video_tokens = MatrixF64(t1 - t0, stim.video_tokens.cols);
    out.audio_tokens = MatrixF64(t1 - t0, stim.audio_tokens.cols);
    std::copy(stim.video_tokens.data.begin() + t0 * stim.video_tokens.cols,
              stim.video_tokens.data.begin() + t1 * stim.video_tokens.cols,
              out.video_tokens.data.begin());
    std::copy(stim.audio_tokens.data.begin() + t0 * stim.audio_tokens.cols,
              stim.audio_tokens.data.begin() + t1 * stim.audio_tokens.cols,
              out.audio_tokens.data.begin());
    return out;
}

// ---- manifest / atlas JSON --------------------------------------------------

void DatasetManifest::validate() const {
    if (!(tr_seconds > 0.0)) throw ValidationError("manifest: tr_seconds must be positive");
    if (window_trs == 0) throw ValidationError("manifest: window_trs must be >= 1");
    if (stimulus.empty()) throw ValidationError("manifest: no stimulus entries");
    if (atlas_path.empty()) throw ValidationError("manifest: missing atlas path");
    if (subjects.empty()) throw ValidationError("manifest: no subjects");
    for (const auto& s : subjects) {
        if (s.subject_id.empty()) throw ValidationError("manifest: empty subject_id");
        if (s.runs.empty())
            throw ValidationError("manifest: subject " + s.subject_id + " has no runs");
        for (const auto& r : s.runs) {
            bool found = false;
            for (const auto& st : stimulus) found |= (st.run_id == r.run_id);
            if (!found)
                throw ValidationError("manifest: run " + r.run_id + " lacks a stimulus entry");
        }
    }
}

namespace {

nlohmann::json load_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed JSON in " + path.string() + ": " + e.what());
    }
    return j;
}

void store_json(const nlohmann::json& j, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("short write to " + path.string());
}

}  // namespace

void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
    m.validate();
    nlohmann::json j;
    j["tr_seconds"] = m.tr_seconds;
    j["window_trs"] = m.window_trs;
    j["tokens"] = {{"frames_per_window", m.frames_per_window},
                   {"patches_per_frame", m.patches_per_frame},
                   {"audio_tokens_per_window", m.audio_tokens_per_window},
                   {"d_v", m.d_v},
                   {"d_a", m.d_a}};
    j["stimulus"] = nlohmann::json::array();
    for (const auto& s : m.stimulus)
        j["stimulus"].push_back(
            {{"run_id", s.run_id}, {"video", s.video_path}, {"audio", s.audio_path}});
    j["atlas"] = m.atlas_path;
    j["subjects"] = nlohmann::json::array();
    for (const auto& s : m.subjects) {
        nlohmann::json runs = nlohmann::json::array();
        for (const auto& r : s.runs)
            runs.push_back({{"run_id", r.run_id}, {"responses", r.responses_path}});
        j["subjects"].push_back({{"subject_id", s.subject_id}, {"runs", runs}});
    }
    if (m.truth_meta_path) j["truth"] = *m.truth_meta_path;
    store_json(j, path);
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
    const auto j = load_json(path);
    DatasetManifest m;
    try {
        m.tr_seconds = j.at("tr_seconds").get<double>();
        m.window_trs = j.at("window_trs").get<std::size_t>();
        const auto& tok = j.at("tokens");
        m.frames_per_window = tok.at("frames_per_window").get<int>();
        m.patches_per_frame = tok.at("patches_per_frame").get<int>();
        m.audio_tokens_per_window = tok.at("audio_tokens_per_window").get<int>();
        m.d_v = tok.at("d_v").get<int>();
        m.d_a = tok.at("d_a").get<int>();
        for (const auto& s : j.at("stimulus"))
            m.stimulus.push_back({s.at("run_id").get<std::string>(),
                                  s.at("video").get<std::string>(),
                                  s.at("audio").get<std::string>()});
        m.atlas_path = j.at("atlas").get<std::string>();
        for (const auto& s : j.at("subjects")) {
            DatasetManifest::SubjectEntry e;
            e.subject_id = s.at("subject_id").get<std::string>();
            for (const auto& r : s.at("runs"))
                e.runs.push_back({r.at("run_id").get<std::string>(),
                                  r.at("responses").get<std::string>()});
            m.subjects.push_back(std::move(e));
        }
        if (j.contains("truth")) m.truth_meta_path = j.at("truth").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("manifest " + path.string() + ": " + e.what());
    }
    m.validate();
    return m;
}

void write_atlas(const RoiAtlas& atlas, const std::filesystem::path& path) {
    atlas.validate();
    nlohmann::json j;
    j["roi_names"] = atlas.roi_names;
    j["labels"] = atlas.labels;
    store_json(j, path);
}

RoiAtlas read_atlas(const std::filesystem::path& path) {
    const auto j = load_json(path);
    RoiAtlas a;
    try {
        a.roi_names = j.at("roi_names").get<std::vector<std::string>>();
        a.labels = j.at("labels").get<std::vector<int>>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("atlas " + path.string() + ": " + e.what());
    }
    a.validate();
    return a;
}

StimulusStream load_stimulus(const DatasetManifest& m, const std::filesystem::path& manifest_dir,
                             const std::string& run_id) {
    for (const auto& s : m.stimulus) {
        if (s.run_id != run_id) continue;
        StimulusStream stim;
        stim.video_tokens = read_matrix(manifest_dir / s.video_path);
        stim.audio_tokens = read_matrix(manifest_dir / s.audio_path);
        stim.frames_per_window = m.frames_per_window;
        stim.patches_per_frame = m.patches_per_frame;
        stim.audio_tokens_per_window = m.audio_tokens_per_window;
        stim.d_v = m.d_v;
        stim.d_a = m.d_a;
        stim.validate();
        return stim;
    }
    throw ValidationError("load_stimulus: no stimulus for run " + run_id);
}

BoldRun load_bold(const DatasetManifest& m, const std::filesystem::path& manifest_dir,
                  const std::string& subject_id, const std::string& run_id) {
    for (const auto& s : m.subjects) {
        if (s.subject_id != subject_id) continue;
        for (const auto& r : s.runs) {
            if (r.run_id != run_id) continue;
            BoldRun run;
            run.subject_id = subject_id;
            run.run_id = run_id;
            run.tr_seconds = m.tr_seconds;
            run.responses = read_matrix(manifest_dir / r.responses_path);
            run.validate();
            return run;
        }
        throw ValidationError("load_bold: subject " + subject_id + " has no run " + run_id);
    }
    throw ValidationError("load_bold: unknown subject " + subject_id);
}

}  // namespace neurotune
