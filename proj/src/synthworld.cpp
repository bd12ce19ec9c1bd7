#include "neurotune/synthworld.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>

#include <json.hpp>

#include "neurotune/error.hpp"
#include "neurotune/rng.hpp"

#include "json_detail.hpp"

namespace neurotune {

namespace {

// Stream tags for deriving independent generators from the world seed.
enum : std::uint64_t {
    kTagLatent = 1,
    kTagIndepLatent = 2,
    kTagReadoutTarget = 3,
    kTagReadoutNontarget = 4,
    kTagEmbed = 5,
    kTagTokenNoise = 6,
    kTagSharedNoise = 7,
    kTagSubjectNoise = 8,
    kTagProbeLatent = 9,
    kTagProbeNoise = 10,
    kTagProbeMaps = 11,
    kTagProbeLabels = 12,
    kTagReadoutTargetQuad = 13,
};

MatrixF64 normal_matrix(std::size_t r, std::size_t c, Rng& rng) {
    MatrixF64 m(r, c);
    for (double& x : m.data) x = rng.next_normal();
    return m;
}

// Random readout with every column scaled to col_norm. With check_rank set it
// redraws on (numerical) row rank deficiency so the source space stays fully
// recoverable from the voxels.
MatrixF64 make_readout(std::size_t k, std::size_t m, double col_norm, std::uint64_t seed,
                       bool check_rank) {
    for (std::uint64_t attempt = 0;; ++attempt) {
        Rng rng(mix_seed(seed, attempt));
        MatrixF64 a = normal_matrix(k, m, rng);
        for (std::size_t j = 0; j < m; ++j) {
            double n2 = 0.0;
            for (std::size_t i = 0; i < k; ++i) n2 += a.at(i, j) * a.at(i, j);
            const double s = col_norm / std::sqrt(n2);
            for (std::size_t i = 0; i < k; ++i) a.at(i, j) *= s;
        }
        if (!check_rank || m < k) return a;  // row rank capped by m when m < k
        // Full row rank iff A A^T is positive definite to working precision.
        MatrixF64 gram = matmul_nt(a, a);
        try {
            cholesky_solve(gram, MatrixF64(k, 1, 1.0));
            return a;
        } catch (const NumericalError&) {
            continue;
        }
    }
}

// n x k(k+1)/2 matrix of normalized quadratic features, one row per TR.
MatrixF64 quad_feature_matrix(const MatrixF64& zbar, std::size_t window) {
    const std::size_t q = zbar.cols * (zbar.cols + 1) / 2;
    MatrixF64 out(zbar.rows, q);
    for (std::size_t t = 0; t < zbar.rows; ++t) {
        const auto f = quad_features(zbar.row(t), window);
        std::copy(f.begin(), f.end(), out.data.data() + t * q);
    }
    return out;
}

// Per-TR token rows: token feature j of TR t is <E[:, j], z_t> plus noise at
// token_noise_frac of that feature's signal sd.
MatrixF64 make_token_stream(const MatrixF64& latents, std::size_t burn_in, std::size_t t_trs,
                            const MatrixF64& embed, double noise_frac, Rng& noise_rng) {
    const std::size_t k = embed.rows, width = embed.cols;
    std::vector<double> col_sd(width, 0.0);
    for (std::size_t j = 0; j < width; ++j) {
        double n2 = 0.0;
        for (std::size_t i = 0; i < k; ++i) n2 += embed.at(i, j) * embed.at(i, j);
        col_sd[j] = std::sqrt(n2);
    }
    MatrixF64 out(t_trs, width);
    for (std::size_t t = 0; t < t_trs; ++t) {
        const double* z = latents.data.data() + (burn_in + t) * k;
        double* row = out.data.data() + t * width;
        for (std::size_t j = 0; j < width; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < k; ++i) s += embed.at(i, j) * z[i];
            row[j] = s + noise_frac * col_sd[j] * noise_rng.next_normal();
        }
    }
    return out;
}

// T x k matrix of window-mean latents, one row per TR.
MatrixF64 window_means(const MatrixF64& latents, std::size_t burn_in, std::size_t t_trs,
                       std::size_t window) {
    const std::size_t k = latents.cols;
    MatrixF64 out(t_trs, k);
    std::vector<double> acc(k, 0.0);
    // Window of TR t covers extended rows [burn_in + t - window, burn_in + t).
    for (std::size_t r = burn_in - window; r < burn_in; ++r)
        for (std::size_t i = 0; i < k; ++i) acc[i] += latents.at(r, i);
    const double inv_w = 1.0 / static_cast<double>(window);
    for (std::size_t t = 0; t < t_trs; ++t) {
        for (std::size_t i = 0; i < k; ++i) out.at(t, i) = acc[i] * inv_w;
        for (std::size_t i = 0; i < k; ++i) {
            acc[i] += latents.at(burn_in + t, i);
            acc[i] -= latents.at(burn_in + t - window, i);
        }
    }
    return out;
}

std::string subject_name(int index) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "sub-%02d", index + 1);
    return buf;
}

}  // namespace

void WorldConfig::validate() const {
    if (n_subjects < 2) throw ConfigError("WorldConfig: need at least 2 subjects");
    if (t_trs < 2 * window_trs) throw ConfigError("WorldConfig: t_trs too small for the window");
    if (n_voxels == 0) throw ConfigError("WorldConfig: n_voxels must be >= 1");
    if (roi_layout.empty()) throw ConfigError("WorldConfig: empty roi_layout");
    std::size_t total = 0;
    std::set<std::string> names;
    for (const auto& [name, count] : roi_layout) {
        if (name.empty() || count == 0) throw ConfigError("WorldConfig: bad roi_layout entry");
        if (!names.insert(name).second)
            throw ConfigError("WorldConfig: duplicate ROI " + name);
        total += count;
    }
    if (total != n_voxels) throw ConfigError("WorldConfig: roi_layout counts != n_voxels");
    if (target_rois.empty()) throw ConfigError("WorldConfig: no target ROIs");
    std::size_t m_target = 0;
    for (const auto& t : target_rois) {
        bool found = false;
        for (const auto& [name, count] : roi_layout)
            if (name == t) {
                found = true;
                m_target += count;
            }
        if (!found) throw ConfigError("WorldConfig: target ROI " + t + " not in layout");
    }
    if (m_target == n_voxels)
        throw ConfigError("WorldConfig: need at least one non-target ROI");
    if (latent_dim == 0 || latent_dim > m_target)
        throw ConfigError("WorldConfig: latent_dim must be in [1, target voxel count]");
    if (!(shared_noise_sigma >= 0.0) || !(subject_noise_sigma >= 0.0))
        throw ConfigError("WorldConfig: noise sigmas must be >= 0");
    if (!per_subject_noise_sigma.empty() &&
        per_subject_noise_sigma.size() != static_cast<std::size_t>(n_subjects))
        throw ConfigError("WorldConfig: per_subject_noise_sigma size != n_subjects");
    for (double s : per_subject_noise_sigma)
        if (!(s >= 0.0)) throw ConfigError("WorldConfig: negative per-subject sigma");
    if (window_trs == 0) throw ConfigError("WorldConfig: window_trs must be >= 1");
    if (frames_per_window < 1 || patches_per_frame < 1 || audio_tokens_per_window < 1 ||
        d_v < 1 || d_a < 1)
        throw ConfigError("WorldConfig: token geometry fields must be >= 1");
    if (!(token_noise_frac >= 0.0)) throw ConfigError("WorldConfig: negative token noise");
    if (!(nonlinear_frac >= 0.0) || !(nonlinear_frac < 1.0))
        throw ConfigError("WorldConfig: nonlinear_frac must be in [0, 1)");
    if (!(tr_seconds > 0.0)) throw ConfigError("WorldConfig: tr_seconds must be positive");
}

double WorldConfig::noise_sigma_for(int subject_index) const {
    if (!per_subject_noise_sigma.empty())
        return per_subject_noise_sigma[static_cast<std::size_t>(subject_index)];
    return subject_noise_sigma;
}

std::vector<double> quad_features(std::span<const double> zbar, std::size_t window) {
    const std::size_t k = zbar.size();
    const double w = static_cast<double>(window);
    std::vector<double> out;
    out.reserve(k * (k + 1) / 2);
    for (std::size_t i = 0; i < k; ++i) {
        out.push_back((w * zbar[i] * zbar[i] - 1.0) / std::numbers::sqrt2);
        for (std::size_t j = i + 1; j < k; ++j) out.push_back(w * zbar[i] * zbar[j]);
    }
    return out;
}

std::vector<double> WorldTruth::window_mean_latent(std::size_t tr, std::size_t window) const {
    if (window == 0 || burn_in + tr < window || burn_in + tr > latent_series.rows)
        throw ValidationError("window_mean_latent: bad window");
    std::vector<double> out(latent_series.cols, 0.0);
    for (std::size_t r = burn_in + tr - window; r < burn_in + tr; ++r)
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += latent_series.at(r, i);
    for (double& x : out) x /= static_cast<double>(window);
    return out;
}

World generate_world(const WorldConfig& cfg) {
    cfg.validate();
    const std::size_t k = cfg.latent_dim;
    const std::size_t burn = cfg.window_trs;
    const std::size_t t_ext = burn + cfg.t_trs;

    World w;
    w.cfg = cfg;

    // Atlas: voxels assigned in layout order.
    for (const auto& [name, count] : cfg.roi_layout) {
        const int idx = static_cast<int>(w.atlas.roi_names.size());
        w.atlas.roi_names.push_back(name);
        w.atlas.labels.insert(w.atlas.labels.end(), count, idx);
    }

    const std::set<std::string> target_set(cfg.target_rois.begin(), cfg.target_rois.end());
    for (std::size_t v = 0; v < cfg.n_voxels; ++v) {
        const std::string& roi = w.atlas.roi_names[w.atlas.labels[v]];
        if (target_set.count(roi))
            w.truth.target_voxels.push_back(v);
        else
            w.truth.nontarget_voxels.push_back(v);
    }
    const std::size_t m_t = w.truth.target_voxels.size();
    const std::size_t m_n = w.truth.nontarget_voxels.size();

    {
        Rng lat_rng(mix_seed(cfg.seed, kTagLatent));
        w.truth.latent_series = normal_matrix(t_ext, k, lat_rng);
        Rng ind_rng(mix_seed(cfg.seed, kTagIndepLatent));
        w.truth.indep_latent_series = normal_matrix(t_ext, k, ind_rng);
        w.truth.burn_in = burn;
    }
    // Split unit signal variance between the linear and quadratic readouts:
    // alpha^2 + beta^2 = 1 with column norms alpha*sqrt(w) and beta (the quad
    // features are already unit variance).
    const double beta = std::sqrt(cfg.nonlinear_frac);
    const double alpha = std::sqrt(1.0 - cfg.nonlinear_frac);
    const double w_sqrt = std::sqrt(static_cast<double>(cfg.window_trs));
    w.truth.readout_target =
        make_readout(k, m_t, alpha * w_sqrt, mix_seed(cfg.seed, kTagReadoutTarget), true);
    w.truth.readout_target_quad = make_readout(
        k * (k + 1) / 2, m_t, beta, mix_seed(cfg.seed, kTagReadoutTargetQuad), false);
    w.truth.readout_nontarget =
        make_readout(k, m_n, w_sqrt, mix_seed(cfg.seed, kTagReadoutNontarget), true);

    {
        Rng embed_rng(mix_seed(cfg.seed, kTagEmbed));
        const double sd = 1.0 / std::sqrt(static_cast<double>(k));
        const std::size_t v_width = static_cast<std::size_t>(cfg.frames_per_window) *
                                    cfg.patches_per_frame * cfg.d_v;
        const std::size_t a_width =
            static_cast<std::size_t>(cfg.audio_tokens_per_window) * cfg.d_a;
        w.truth.embed_video = normal_matrix(k, v_width, embed_rng);
        scale_inplace(w.truth.embed_video, sd);
        w.truth.embed_audio = normal_matrix(k, a_width, embed_rng);
        scale_inplace(w.truth.embed_audio, sd);
    }

    {
        Rng tok_rng(mix_seed(cfg.seed, kTagTokenNoise));
        w.stim.video_tokens = make_token_stream(w.truth.latent_series, burn, cfg.t_trs,
                                                w.truth.embed_video, cfg.token_noise_frac,
                                                tok_rng);
        w.stim.audio_tokens = make_token_stream(w.truth.latent_series, burn, cfg.t_trs,
                                                w.truth.embed_audio, cfg.token_noise_frac,
                                                tok_rng);
        w.stim.frames_per_window = cfg.frames_per_window;
        w.stim.patches_per_frame = cfg.patches_per_frame;
        w.stim.audio_tokens_per_window = cfg.audio_tokens_per_window;
        w.stim.d_v = cfg.d_v;
        w.stim.d_a = cfg.d_a;
        w.stim.validate();
    }

    // Signals shared by all subjects.
    const MatrixF64 zbar = window_means(w.truth.latent_series, burn, cfg.t_trs, cfg.window_trs);
    const MatrixF64 ubar =
        window_means(w.truth.indep_latent_series, burn, cfg.t_trs, cfg.window_trs);
    MatrixF64 target_sig = matmul(zbar, w.truth.readout_target);             // T x m_t
    add_inplace(target_sig,
                matmul(quad_feature_matrix(zbar, cfg.window_trs), w.truth.readout_target_quad));
    const MatrixF64 nontarget_sig = matmul(ubar, w.truth.readout_nontarget); // T x m_n

    MatrixF64 shared(cfg.t_trs, cfg.n_voxels, 0.0);
    if (cfg.shared_noise_sigma > 0.0) {
        Rng sh_rng(mix_seed(cfg.seed, kTagSharedNoise));
        for (double& x : shared.data) x = cfg.shared_noise_sigma * sh_rng.next_normal();
    }

    for (int s = 0; s < cfg.n_subjects; ++s) {
        BoldRun run;
        run.subject_id = subject_name(s);
        run.run_id = "run-01";
        run.tr_seconds = cfg.tr_seconds;
        run.responses = MatrixF64(cfg.t_trs, cfg.n_voxels);
        for (std::size_t j = 0; j < m_t; ++j) {
            const std::size_t v = w.truth.target_voxels[j];
            for (std::size_t t = 0; t < cfg.t_trs; ++t)
                run.responses.at(t, v) = target_sig.at(t, j);
        }
        for (std::size_t j = 0; j < m_n; ++j) {
            const std::size_t v = w.truth.nontarget_voxels[j];
            for (std::size_t t = 0; t < cfg.t_trs; ++t)
                run.responses.at(t, v) = nontarget_sig.at(t, j);
        }
        add_inplace(run.responses, shared);
        const double sigma_i = cfg.noise_sigma_for(s);
        if (sigma_i > 0.0) {
            // Sub-seed split per subject: seed xor subject index.
            Rng sub_rng(mix_seed(cfg.seed ^ static_cast<std::uint64_t>(s), kTagSubjectNoise));
            for (double& x : run.responses.data) x += sigma_i * sub_rng.next_normal();
        }
        run.validate();
        w.runs.push_back(std::move(run));
    }
    return w;
}

// ---- persistence -------------------------------------------------------------

namespace detail {

nlohmann::json world_config_to_json(const WorldConfig& c) {
    nlohmann::json j;
    j["n_subjects"] = c.n_subjects;
    j["t_trs"] = c.t_trs;
    j["n_voxels"] = c.n_voxels;
    nlohmann::json layout = nlohmann::json::array();
    for (const auto& [name, count] : c.roi_layout) layout.push_back({{"roi", name}, {"voxels", count}});
    j["roi_layout"] = layout;
    j["latent_dim"] = c.latent_dim;
    j["target_rois"] = c.target_rois;
    j["shared_noise_sigma"] = c.shared_noise_sigma;
    j["subject_noise_sigma"] = c.subject_noise_sigma;
    if (!c.per_subject_noise_sigma.empty())
        j["per_subject_noise_sigma"] = c.per_subject_noise_sigma;
    j["seed"] = c.seed;
    j["window_trs"] = c.window_trs;
    j["frames_per_window"] = c.frames_per_window;
    j["patches_per_frame"] = c.patches_per_frame;
    j["audio_tokens_per_window"] = c.audio_tokens_per_window;
    j["d_v"] = c.d_v;
    j["d_a"] = c.d_a;
    j["token_noise_frac"] = c.token_noise_frac;
    j["nonlinear_frac"] = c.nonlinear_frac;
    j["tr_seconds"] = c.tr_seconds;
    return j;
}

WorldConfig world_config_from_json(const nlohmann::json& j) {
    WorldConfig c;
    try {
        c.n_subjects = j.at("n_subjects").get<int>();
        c.t_trs = j.at("t_trs").get<std::size_t>();
        c.n_voxels = j.at("n_voxels").get<std::size_t>();
        c.roi_layout.clear();
        for (const auto& e : j.at("roi_layout"))
            c.roi_layout.emplace_back(e.at("roi").get<std::string>(),
                                      e.at("voxels").get<std::size_t>());
        c.latent_dim = j.at("latent_dim").get<std::size_t>();
        c.target_rois = j.at("target_rois").get<std::vector<std::string>>();
        c.shared_noise_sigma = j.at("shared_noise_sigma").get<double>();
        c.subject_noise_sigma = j.at("subject_noise_sigma").get<double>();
        if (j.contains("per_subject_noise_sigma"))
            c.per_subject_noise_sigma =
                j.at("per_subject_noise_sigma").get<std::vector<double>>();
        c.seed = j.at("seed").get<std::uint64_t>();
        c.window_trs = j.at("window_trs").get<std::size_t>();
        c.frames_per_window = j.at("frames_per_window").get<int>();
        c.patches_per_frame = j.at("patches_per_frame").get<int>();
        c.audio_tokens_per_window = j.at("audio_tokens_per_window").get<int>();
        c.d_v = j.at("d_v").get<int>();
        c.d_a = j.at("d_a").get<int>();
        c.token_noise_frac = j.at("token_noise_frac").get<double>();
        c.nonlinear_frac = j.at("nonlinear_frac").get<double>();
        c.tr_seconds = j.at("tr_seconds").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("WorldConfig: ") + e.what());
    }
    c.validate();
    return c;
}

}  // namespace detail

void write_world(const World& w, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir / "truth", ec);
    if (ec) throw IoError("write_world: cannot create " + dir.string());

    write_matrix(w.stim.video_tokens, dir / "stim_video.mmbt");
    write_matrix(w.stim.audio_tokens, dir / "stim_audio.mmbt");
    write_atlas(w.atlas, dir / "atlas.json");

    DatasetManifest m;
    m.tr_seconds = w.cfg.tr_seconds;
    m.window_trs = w.cfg.window_trs;
    m.frames_per_window = w.cfg.frames_per_window;
    m.patches_per_frame = w.cfg.patches_per_frame;
    m.audio_tokens_per_window = w.cfg.audio_tokens_per_window;
    m.d_v = w.cfg.d_v;
    m.d_a = w.cfg.d_a;
    m.stimulus.push_back({"run-01", "stim_video.mmbt", "stim_audio.mmbt"});
    m.atlas_path = "atlas.json";
    for (const auto& run : w.runs) {
        const std::string file = "bold_" + run.subject_id + ".mmbt";
        write_matrix(run.responses, dir / file);
        m.subjects.push_back({run.subject_id, {{run.run_id, file}}});
    }
    m.truth_meta_path = "truth/meta.json";
    write_manifest(m, dir / "manifest.json");

    write_matrix(w.truth.latent_series, dir / "truth" / "latents.mmbt");
    write_matrix(w.truth.indep_latent_series, dir / "truth" / "indep_latents.mmbt");
    write_matrix(w.truth.readout_target, dir / "truth" / "readout_target.mmbt");
    write_matrix(w.truth.readout_target_quad, dir / "truth" / "readout_target_quad.mmbt");
    write_matrix(w.truth.readout_nontarget, dir / "truth" / "readout_nontarget.mmbt");
    write_matrix(w.truth.embed_video, dir / "truth" / "embed_video.mmbt");
    write_matrix(w.truth.embed_audio, dir / "truth" / "embed_audio.mmbt");
    nlohmann::json meta;
    meta["config"] = detail::world_config_to_json(w.cfg);
    meta["burn_in"] = w.truth.burn_in;
    std::ofstream out(dir / "truth" / "meta.json", std::ios::trunc);
    if (!out) throw IoError("write_world: cannot write truth meta");
    out << meta.dump(2) << '\n';
}

World load_world(const std::filesystem::path& manifest_path) {
    const auto dir = manifest_path.parent_path();
    const DatasetManifest m = read_manifest(manifest_path);
    if (!m.truth_meta_path) throw ValidationError("load_world: manifest has no truth section");

    std::ifstream in(dir / *m.truth_meta_path);
    if (!in) throw IoError("load_world: cannot open truth meta");
    nlohmann::json meta;
    try {
        in >> meta;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("load_world: malformed truth meta: ") + e.what());
    }

    World w;
    w.cfg = detail::world_config_from_json(meta.at("config"));
    w.atlas = read_atlas(dir / m.atlas_path);
    w.stim = load_stimulus(m, dir, "run-01");
    for (const auto& s : m.subjects) w.runs.push_back(load_bold(m, dir, s.subject_id, "run-01"));

    const auto tdir = dir / std::filesystem::path(*m.truth_meta_path).parent_path();
    w.truth.latent_series = read_matrix(tdir / "latents.mmbt");
    w.truth.indep_latent_series = read_matrix(tdir / "indep_latents.mmbt");
    w.truth.readout_target = read_matrix(tdir / "readout_target.mmbt");
    w.truth.readout_target_quad = read_matrix(tdir / "readout_target_quad.mmbt");
    w.truth.readout_nontarget = read_matrix(tdir / "readout_nontarget.mmbt");
    w.truth.embed_video = read_matrix(tdir / "embed_video.mmbt");
    w.truth.embed_audio = read_matrix(tdir / "embed_audio.mmbt");
    w.truth.burn_in = meta.at("burn_in").get<std::size_t>();

    const std::set<std::string> target_set(w.cfg.target_rois.begin(), w.cfg.target_rois.end());
    for (std::size_t v = 0; v < w.cfg.n_voxels; ++v) {
        const std::string& roi = w.atlas.roi_names[w.atlas.labels[v]];
        if (target_set.count(roi))
            w.truth.target_voxels.push_back(v);
        else
            w.truth.nontarget_voxels.push_back(v);
    }
    return w;
}

WorldConfig world_config_from_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed JSON in " + path.string() + ": " + e.what());
    }
    return detail::world_config_from_json(j);
}

// ---- probe task generation -----------------------------------------------------

namespace {

struct ClipBatch {
    std::vector<MatrixF64> video, audio;
    MatrixF64 zbars;  // n x k, clip-mean latents
};

// Each clip is an independent window: window_trs TRs of fresh latents pushed
// through the provided token maps, then gathered exactly like make_pairs
// windows (via a single-window stimulus stream).
ClipBatch make_clips(const WorldConfig& cfg, const MatrixF64& embed_v, const MatrixF64& embed_a,
                     std::size_t n, Rng& lat_rng, Rng& noise_rng) {
    const std::size_t k = cfg.latent_dim;
    ClipBatch batch;
    batch.zbars = MatrixF64(n, k);
    batch.video.reserve(n);
    batch.audio.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        MatrixF64 lat = normal_matrix(cfg.window_trs, k, lat_rng);
        for (std::size_t c = 0; c < k; ++c) {
            double acc = 0.0;
            for (std::size_t t = 0; t < cfg.window_trs; ++t) acc += lat.at(t, c);
            batch.zbars.at(i, c) = acc / static_cast<double>(cfg.window_trs);
        }
        StimulusStream stream;
        stream.frames_per_window = cfg.frames_per_window;
        stream.patches_per_frame = cfg.patches_per_frame;
        stream.audio_tokens_per_window = cfg.audio_tokens_per_window;
        stream.d_v = cfg.d_v;
        stream.d_a = cfg.d_a;
        // One extra TR so the stream holds exactly one full window.
        MatrixF64 lat_ext(cfg.window_trs + 1, k, 0.0);
        std::copy(lat.data.begin(), lat.data.end(), lat_ext.data.begin());
        stream.video_tokens = make_token_stream(lat_ext, 0, cfg.window_trs + 1, embed_v,
                                                cfg.token_noise_frac, noise_rng);
        stream.audio_tokens = make_token_stream(lat_ext, 0, cfg.window_trs + 1, embed_a,
                                                cfg.token_noise_frac, noise_rng);
        auto windows = make_windows(stream, cfg.window_trs);
        batch.video.push_back(std::move(windows[0].video_window));
        batch.audio.push_back(std::move(windows[0].audio_window));
    }
    return batch;
}

std::vector<std::string> clip_ids(std::size_t n) {
    std::vector<std::string> ids(n);
    for (std::size_t i = 0; i < n; ++i) {
        char buf[24];
        std::snprintf(buf, sizeof buf, "clip%05zu", i);
        ids[i] = buf;
    }
    return ids;
}

}  // namespace

ProbeDataset make_target_probe_dataset(const WorldConfig& cfg, const WorldTruth& truth,
                                       std::size_t n_samples, std::uint64_t seed) {
    cfg.validate();
    if (n_samples < 20) throw ValidationError("make_target_probe_dataset: need >= 20 clips");
    Rng lat_rng(mix_seed(seed ^ cfg.seed, kTagProbeLatent));
    Rng noise_rng(mix_seed(seed ^ cfg.seed, kTagProbeNoise));
    ClipBatch batch =
        make_clips(cfg, truth.embed_video, truth.embed_audio, n_samples, lat_rng, noise_rng);

    // Label functional: the voxel-mean target readout (linear plus quadratic
    // part), i.e. the latent content the tuned representation is pushed to
    // encode.
    const std::size_t k = cfg.latent_dim;
    const auto row_mean = [](const MatrixF64& m) {
        std::vector<double> out(m.rows, 0.0);
        for (std::size_t i = 0; i < m.rows; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < m.cols; ++j) acc += m.at(i, j);
            out[i] = acc / static_cast<double>(m.cols);
        }
        return out;
    };
    const std::vector<double> c = row_mean(truth.readout_target);
    const std::vector<double> q = row_mean(truth.readout_target_quad);
    std::vector<double> scores(n_samples);
    for (std::size_t i = 0; i < n_samples; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += c[j] * batch.zbars.at(i, j);
        const auto phi = quad_features(batch.zbars.row(i), cfg.window_trs);
        for (std::size_t j = 0; j < q.size(); ++j) s += q[j] * phi[j];
        scores[i] = s;
    }
    std::vector<double> sorted = scores;
    std::sort(sorted.begin(), sorted.end());
    const double median = sorted[n_samples / 2];

    ProbeDataset ds;
    ds.video_windows = std::move(batch.video);
    ds.audio_windows = std::move(batch.audio);
    ds.labels = MatrixF64(n_samples, 1);
    for (std::size_t i = 0; i < n_samples; ++i) ds.labels.at(i, 0) = scores[i] > median ? 1.0 : 0.0;
    ds.schema = LabelSchema::binary;
    ds.sample_ids = clip_ids(n_samples);
    ds.validate();
    return ds;
}

ProbeDataset make_independent_probe_dataset(const WorldConfig& cfg, std::size_t n_samples,
                                            std::uint64_t seed, std::size_t n_classes) {
    cfg.validate();
    if (n_samples < 40) throw ValidationError("make_independent_probe_dataset: need >= 40 clips");
    if (n_classes == 0) throw ValidationError("make_independent_probe_dataset: zero classes");
    const std::size_t k = cfg.latent_dim;

    // Fresh token maps: same geometry, different content space.
    Rng map_rng(mix_seed(seed ^ cfg.seed, kTagProbeMaps));
    const double sd = 1.0 / std::sqrt(static_cast<double>(k));
    const std::size_t v_width =
        static_cast<std::size_t>(cfg.frames_per_window) * cfg.patches_per_frame * cfg.d_v;
    const std::size_t a_width = static_cast<std::size_t>(cfg.audio_tokens_per_window) * cfg.d_a;
    MatrixF64 embed_v = normal_matrix(k, v_width, map_rng);
    scale_inplace(embed_v, sd);
    MatrixF64 embed_a = normal_matrix(k, a_width, map_rng);
    scale_inplace(embed_a, sd);

    Rng lat_rng(mix_seed(seed ^ cfg.seed, kTagProbeLatent + 100));
    Rng noise_rng(mix_seed(seed ^ cfg.seed, kTagProbeNoise + 100));
    ClipBatch batch = make_clips(cfg, embed_v, embed_a, n_samples, lat_rng, noise_rng);

    static constexpr double kSupports[] = {0.40, 0.30, 0.20, 0.10, 0.07, 0.05};
    Rng label_rng(mix_seed(seed ^ cfg.seed, kTagProbeLabels));
    ProbeDataset ds;
    ds.labels = MatrixF64(n_samples, n_classes, 0.0);
    for (std::size_t cidx = 0; cidx < n_classes; ++cidx) {
        std::vector<double> g(k);
        for (double& x : g) x = label_rng.next_normal();
        std::vector<double> scores(n_samples);
        for (std::size_t i = 0; i < n_samples; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < k; ++j) s += g[j] * batch.zbars.at(i, j);
            scores[i] = s;
        }
        const double support = kSupports[cidx % (sizeof kSupports / sizeof kSupports[0])];
        std::vector<double> sorted = scores;
        std::sort(sorted.begin(), sorted.end());
        const auto cut = static_cast<std::size_t>(
            std::floor((1.0 - support) * static_cast<double>(n_samples)));
        const double tau = sorted[std::min(cut, n_samples - 1)];
        for (std::size_t i = 0; i < n_samples; ++i)
            ds.labels.at(i, cidx) = scores[i] > tau ? 1.0 : 0.0;
    }

    ds.video_windows = std::move(batch.video);
    ds.audio_windows = std::move(batch.audio);
    ds.schema = LabelSchema::multi_label;
    ds.sample_ids = clip_ids(n_samples);
    const double train_frac = static_cast<double>(kFixedSplitTrainRef) /
                              (kFixedSplitTrainRef + kFixedSplitTestRef);
    const auto n_train = static_cast<std::size_t>(
        std::floor(train_frac * static_cast<double>(n_samples) + 0.5));
    for (std::size_t i = 0; i < n_samples; ++i)
        (i < n_train ? ds.train_indices : ds.test_indices).push_back(i);
    ds.validate();
    return ds;
}

}  // namespace neurotune
