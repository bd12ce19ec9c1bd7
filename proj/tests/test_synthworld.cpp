#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>
#include <vector>

#include "neurotune/error.hpp"
#include "neurotune/numeric.hpp"
#include "neurotune/rng.hpp"
#include "neurotune/synthworld.hpp"

using namespace neurotune;
namespace fs = std::filesystem;

namespace {

WorldConfig small_config() {
    WorldConfig cfg;
    cfg.n_subjects = 2;
    cfg.t_trs = 300;
    cfg.n_voxels = 15;
    cfg.roi_layout = {{"aSTS", 8}, {"other", 7}};
    cfg.target_rois = {"aSTS"};
    cfg.latent_dim = 4;
    cfg.frames_per_window = 2;
    cfg.patches_per_frame = 1;
    cfg.audio_tokens_per_window = 2;
    cfg.d_v = 4;
    cfg.d_a = 3;
    cfg.window_trs = 4;
    cfg.seed = 11;
    return cfg;
}

}  // namespace

TEST_CASE("quad_features matches the hand-derived k=2 case") {
    const double zb[] = {0.5, -0.25};
    const std::size_t w = 4;
    const auto f = quad_features({zb, 2}, w);
    REQUIRE(f.size() == 3);
    CHECK(f[0] == doctest::Approx((4.0 * 0.25 - 1.0) / std::sqrt(2.0)).epsilon(1e-12));
    CHECK(f[1] == doctest::Approx(4.0 * 0.5 * -0.25).epsilon(1e-12));
    CHECK(f[2] == doctest::Approx((4.0 * 0.0625 - 1.0) / std::sqrt(2.0)).epsilon(1e-12));
}

TEST_CASE("quad_features are unit variance and uncorrelated under sampling") {
    // Monte Carlo over window means of w iid normals; each term should come
    // out mean 0, variance 1, and pairwise uncorrelated.
    Rng rng(99);
    const std::size_t w = 8, k = 3, n = 40000;
    const std::size_t q = k * (k + 1) / 2;
    std::vector<double> mean(q, 0.0), var(q, 0.0);
    std::vector<double> cross(q * q, 0.0);
    std::vector<double> zb(k);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            double acc = 0.0;
            for (std::size_t t = 0; t < w; ++t) acc += rng.next_normal();
            zb[j] = acc / static_cast<double>(w);
        }
        const auto f = quad_features(zb, w);
        for (std::size_t a = 0; a < q; ++a) {
            mean[a] += f[a];
            var[a] += f[a] * f[a];
            for (std::size_t b = 0; b < q; ++b) cross[a * q + b] += f[a] * f[b];
        }
    }
    for (std::size_t a = 0; a < q; ++a) {
        mean[a] /= n;
        var[a] = var[a] / n - mean[a] * mean[a];
        CHECK(std::abs(mean[a]) < 0.03);
        CHECK(std::abs(var[a] - 1.0) < 0.06);
        for (std::size_t b = 0; b < a; ++b)
            CHECK(std::abs(cross[a * q + b] / n - mean[a] * mean[b]) < 0.04);
    }
}

TEST_CASE("readout column norms encode the variance split exactly") {
    WorldConfig cfg = small_config();
    cfg.nonlinear_frac = 0.6;
    World w = generate_world(cfg);
    const double wt = static_cast<double>(cfg.window_trs);
    for (std::size_t j = 0; j < w.truth.readout_target.cols; ++j) {
        double lin = 0.0, quad = 0.0;
        for (std::size_t i = 0; i < w.truth.readout_target.rows; ++i)
            lin += w.truth.readout_target.at(i, j) * w.truth.readout_target.at(i, j);
        for (std::size_t i = 0; i < w.truth.readout_target_quad.rows; ++i)
            quad += w.truth.readout_target_quad.at(i, j) * w.truth.readout_target_quad.at(i, j);
        CHECK(lin == doctest::Approx(0.4 * wt).epsilon(1e-10));
        CHECK(quad == doctest::Approx(0.6).epsilon(1e-10));
    }
    for (std::size_t j = 0; j < w.truth.readout_nontarget.cols; ++j) {
        double n2 = 0.0;
        for (std::size_t i = 0; i < w.truth.readout_nontarget.rows; ++i)
            n2 += w.truth.readout_nontarget.at(i, j) * w.truth.readout_nontarget.at(i, j);
        CHECK(n2 == doctest::Approx(wt).epsilon(1e-10));
    }
    CHECK(w.truth.readout_target_quad.rows ==
          cfg.latent_dim * (cfg.latent_dim + 1) / 2);
}

TEST_CASE("noiseless target voxels reproduce the readout signal exactly") {
    WorldConfig cfg = small_config();
    cfg.shared_noise_sigma = 0.0;
    cfg.subject_noise_sigma = 0.0;
    cfg.t_trs = 400;
    World w = generate_world(cfg);
    // Rebuild the signal of target voxel 0 from ground truth.
    const std::size_t v = w.truth.target_voxels[0];
    for (std::size_t t = 0; t < cfg.t_trs; t += 37) {
        const auto zb = w.truth.window_mean_latent(t, cfg.window_trs);
        double sig = 0.0;
        for (std::size_t i = 0; i < cfg.latent_dim; ++i)
            sig += w.truth.readout_target.at(i, 0) * zb[i];
        const auto phi = quad_features(zb, cfg.window_trs);
        for (std::size_t i = 0; i < phi.size(); ++i)
            sig += w.truth.readout_target_quad.at(i, 0) * phi[i];
        CHECK(w.runs[0].responses.at(t, v) == doctest::Approx(sig).epsilon(1e-10));
        CHECK(w.runs[1].responses.at(t, v) == doctest::Approx(sig).epsilon(1e-10));
    }
    // Empirical variance of the unit-variance signal (loose: overlapping
    // windows autocorrelate the series, inflating the estimator spread).
    std::vector<double> series(cfg.t_trs);
    for (std::size_t t = 0; t < cfg.t_trs; ++t) series[t] = w.runs[0].responses.at(t, v);
    CHECK(sample_variance(series) == doctest::Approx(1.0).epsilon(0.45));
}

TEST_CASE("cross-subject correlation matches the closed form") {
    // corr = (1 + sigma_s^2) / (1 + sigma_s^2 + sigma_i^2), derived from the
    // shared-signal + shared-noise + individual-noise decomposition.
    WorldConfig cfg = small_config();
    cfg.t_trs = 4000;
    cfg.shared_noise_sigma = 0.3;
    cfg.subject_noise_sigma = 0.8;
    World w = generate_world(cfg);
    const double expect = (1.0 + 0.09) / (1.0 + 0.09 + 0.64);
    std::vector<double> a(cfg.t_trs), b(cfg.t_trs);
    double acc = 0.0;
    for (std::size_t j = 0; j < w.truth.target_voxels.size(); ++j) {
        const std::size_t v = w.truth.target_voxels[j];
        for (std::size_t t = 0; t < cfg.t_trs; ++t) {
            a[t] = w.runs[0].responses.at(t, v);
            b[t] = w.runs[1].responses.at(t, v);
        }
        acc += pearson(a, b);
    }
    acc /= static_cast<double>(w.truth.target_voxels.size());
    CHECK(acc == doctest::Approx(expect).epsilon(0.05));
}

TEST_CASE("per-subject sigma overrides reshape one subject's noise only") {
    WorldConfig cfg = small_config();
    cfg.t_trs = 2000;
    cfg.shared_noise_sigma = 0.0;
    cfg.per_subject_noise_sigma = {0.3, 3.0};
    World w = generate_world(cfg);
    const std::size_t v = w.truth.target_voxels[0];
    std::vector<double> s0(cfg.t_trs), s1(cfg.t_trs), sig(cfg.t_trs);
    for (std::size_t t = 0; t < cfg.t_trs; ++t) {
        s0[t] = w.runs[0].responses.at(t, v);
        s1[t] = w.runs[1].responses.at(t, v);
        const auto zb = w.truth.window_mean_latent(t, cfg.window_trs);
        double x = 0.0;
        for (std::size_t i = 0; i < cfg.latent_dim; ++i)
            x += w.truth.readout_target.at(i, 0) * zb[i];
        const auto phi = quad_features(zb, cfg.window_trs);
        for (std::size_t i = 0; i < phi.size(); ++i)
            x += w.truth.readout_target_quad.at(i, 0) * phi[i];
        sig[t] = x;
    }
    // corr(sig + sigma*n, sig) = 1/sqrt(1+sigma^2).
    CHECK(pearson(s0, sig) == doctest::Approx(1.0 / std::sqrt(1.09)).epsilon(0.05));
    CHECK(pearson(s1, sig) == doctest::Approx(1.0 / std::sqrt(10.0)).epsilon(0.2));
}

TEST_CASE("token streams are exact embeddings at zero token noise") {
    WorldConfig cfg = small_config();
    cfg.token_noise_frac = 0.0;
    World w = generate_world(cfg);
    for (std::size_t t = 0; t < 5; ++t) {
        const auto z = w.truth.latent_row(t);
        for (std::size_t j = 0; j < w.stim.video_tokens.cols; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < cfg.latent_dim; ++i)
                s += w.truth.embed_video.at(i, j) * z[i];
            CHECK(w.stim.video_tokens.at(t, j) == doctest::Approx(s).epsilon(1e-12));
        }
    }
}

TEST_CASE("nontarget voxels carry no target-latent signal") {
    WorldConfig cfg = small_config();
    cfg.t_trs = 3000;
    cfg.shared_noise_sigma = 0.0;
    cfg.subject_noise_sigma = 0.0;
    World w = generate_world(cfg);
    // Correlate a nontarget voxel with every target voxel; both are pure
    // signals, driven by independent latent streams.
    std::vector<double> nt(cfg.t_trs), tg(cfg.t_trs);
    const std::size_t nv = w.truth.nontarget_voxels[0];
    for (std::size_t t = 0; t < cfg.t_trs; ++t) nt[t] = w.runs[0].responses.at(t, nv);
    for (std::size_t j = 0; j < 4; ++j) {
        const std::size_t tv = w.truth.target_voxels[j];
        for (std::size_t t = 0; t < cfg.t_trs; ++t) tg[t] = w.runs[0].responses.at(t, tv);
        CHECK(std::abs(pearson(nt, tg)) < 0.12);
    }
}

TEST_CASE("generation is deterministic in the seed") {
    WorldConfig cfg = small_config();
    World a = generate_world(cfg);
    World b = generate_world(cfg);
    CHECK(bit_equal(a.runs[0].responses, b.runs[0].responses));
    CHECK(bit_equal(a.stim.video_tokens, b.stim.video_tokens));
    CHECK(bit_equal(a.truth.latent_series, b.truth.latent_series));
    cfg.seed = 12;
    World c = generate_world(cfg);
    CHECK_FALSE(bit_equal(a.runs[0].responses, c.runs[0].responses));
}

TEST_CASE("atlas assignment follows the layout order") {
    WorldConfig cfg = small_config();
    World w = generate_world(cfg);
    CHECK(w.atlas.roi_names == std::vector<std::string>{"aSTS", "other"});
    CHECK(w.atlas.voxels_of("aSTS").size() == 8);
    CHECK(w.atlas.voxels_of("other").size() == 7);
    CHECK(w.truth.target_voxels.size() == 8);
    CHECK(w.truth.nontarget_voxels.size() == 7);
    CHECK(w.truth.target_voxels.front() == 0);
    CHECK(w.truth.nontarget_voxels.front() == 8);
    CHECK(w.truth.burn_in == cfg.window_trs);
    CHECK(w.truth.latent_series.rows == cfg.window_trs + cfg.t_trs);
}

TEST_CASE("world persistence round trips bit exactly") {
    const auto dir = fs::temp_directory_path() / "neurotune_test_world";
    fs::remove_all(dir);
    WorldConfig cfg = small_config();
    World w = generate_world(cfg);
    write_world(w, dir);
    World back = load_world(dir / "manifest.json");
    CHECK(back.cfg.t_trs == cfg.t_trs);
    CHECK(back.cfg.nonlinear_frac == cfg.nonlinear_frac);
    CHECK(back.cfg.target_rois == cfg.target_rois);
    REQUIRE(back.runs.size() == w.runs.size());
    for (std::size_t s = 0; s < w.runs.size(); ++s) {
        CHECK(back.runs[s].subject_id == w.runs[s].subject_id);
        CHECK(bit_equal(back.runs[s].responses, w.runs[s].responses));
    }
    CHECK(bit_equal(back.stim.video_tokens, w.stim.video_tokens));
    CHECK(bit_equal(back.stim.audio_tokens, w.stim.audio_tokens));
    CHECK(bit_equal(back.truth.latent_series, w.truth.latent_series));
    CHECK(bit_equal(back.truth.readout_target, w.truth.readout_target));
    CHECK(bit_equal(back.truth.readout_target_quad, w.truth.readout_target_quad));
    CHECK(bit_equal(back.truth.embed_audio, w.truth.embed_audio));
    CHECK(back.truth.target_voxels == w.truth.target_voxels);
    CHECK(back.truth.burn_in == w.truth.burn_in);
}

TEST_CASE("config validation rejects inconsistent worlds") {
    WorldConfig cfg = small_config();
    cfg.n_voxels = 14;  // layout sums to 15
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.roi_layout = {{"aSTS", 8}, {"aSTS", 7}};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.target_rois = {"missing"};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.target_rois = {"aSTS", "other"};  // nothing left as control
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.latent_dim = 9;  // exceeds the 8 target voxels
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.nonlinear_frac = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.nonlinear_frac = -0.1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.per_subject_noise_sigma = {0.1};  // wrong length
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.n_subjects = 1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("target probe datasets are balanced, labeled by the readout, deterministic") {
    WorldConfig cfg = small_config();
    World w = generate_world(cfg);
    ProbeDataset ds = make_target_probe_dataset(cfg, w.truth, 200, 5);
    ds.validate();
    CHECK(ds.schema == LabelSchema::binary);
    REQUIRE(ds.labels.rows == 200);
    CHECK(ds.labels.cols == 1);
    CHECK(ds.video_windows.size() == 200);
    CHECK(ds.video_windows[0].rows ==
          static_cast<std::size_t>(cfg.frames_per_window * cfg.patches_per_frame));
    double ones = 0.0;
    for (std::size_t i = 0; i < 200; ++i) ones += ds.labels.at(i, 0);
    CHECK(ones / 200.0 == doctest::Approx(0.5).epsilon(0.05));
    std::set<std::string> ids(ds.sample_ids.begin(), ds.sample_ids.end());
    CHECK(ids.size() == 200);
    // CV task: no fixed split baked in.
    CHECK(ds.train_indices.empty());
    CHECK(ds.test_indices.empty());

    ProbeDataset again = make_target_probe_dataset(cfg, w.truth, 200, 5);
    CHECK(bit_equal(ds.labels, again.labels));
    CHECK(bit_equal(ds.video_windows[7], again.video_windows[7]));
    ProbeDataset other = make_target_probe_dataset(cfg, w.truth, 200, 6);
    CHECK_FALSE(bit_equal(ds.video_windows[7], other.video_windows[7]));
}

TEST_CASE("independent probe datasets honor class supports and the fixed split") {
    WorldConfig cfg = small_config();
    ProbeDataset ds = make_independent_probe_dataset(cfg, 360, 7, 6);
    ds.validate();
    CHECK(ds.schema == LabelSchema::multi_label);
    REQUIRE(ds.labels.rows == 360);
    REQUIRE(ds.labels.cols == 6);
    const double expected[] = {0.40, 0.30, 0.20, 0.10, 0.07, 0.05};
    for (std::size_t c = 0; c < 6; ++c) {
        double ones = 0.0;
        for (std::size_t i = 0; i < 360; ++i) ones += ds.labels.at(i, c);
        CHECK(ones / 360.0 == doctest::Approx(expected[c]).epsilon(0.25));
    }
    // Split proportions follow the reference 15288/4830 fixed split.
    const double frac = 15288.0 / (15288.0 + 4830.0);
    CHECK(ds.train_indices.size() ==
          static_cast<std::size_t>(std::floor(frac * 360.0 + 0.5)));
    CHECK(ds.train_indices.size() + ds.test_indices.size() == 360);
    // Train indices precede test indices (temporal-style split of clips).
    CHECK(ds.train_indices.back() < ds.test_indices.front());
}
