#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <vector>

#include "neurotune/data.hpp"
#include "neurotune/error.hpp"
#include "neurotune/rng.hpp"

using namespace neurotune;
namespace fs = std::filesystem;

namespace {

// Tiny deterministic fixture: T TRs, V voxels, minimal token geometry.
struct Fixture {
    BoldRun bold;
    StimulusStream stim;
};

Fixture make_fixture(std::size_t t_trs, std::size_t v, int frames = 2, int patches = 1,
                     int audio = 2, int d_v = 3, int d_a = 2) {
    Fixture f;
    f.bold.subject_id = "sub-01";
    f.bold.run_id = "run-01";
    f.bold.responses = MatrixF64(t_trs, v);
    for (std::size_t t = 0; t < t_trs; ++t)
        for (std::size_t j = 0; j < v; ++j)
            f.bold.responses.at(t, j) = static_cast<double>(100 * t + j);
    f.stim.frames_per_window = frames;
    f.stim.patches_per_frame = patches;
    f.stim.audio_tokens_per_window = audio;
    f.stim.d_v = d_v;
    f.stim.d_a = d_a;
    f.stim.video_tokens = MatrixF64(t_trs, static_cast<std::size_t>(frames) * patches * d_v);
    f.stim.audio_tokens = MatrixF64(t_trs, static_cast<std::size_t>(audio) * d_a);
    for (std::size_t i = 0; i < f.stim.video_tokens.size(); ++i)
        f.stim.video_tokens.data[i] = 0.001 * static_cast<double>(i);
    for (std::size_t i = 0; i < f.stim.audio_tokens.size(); ++i)
        f.stim.audio_tokens.data[i] = -0.002 * static_cast<double>(i);
    return f;
}

fs::path temp_dir() {
    const auto dir = fs::temp_directory_path() / "neurotune_test_data";
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("even_sample_indices rounds half up and clamps") {
    // (i + 0.5) * 10 / 4 = 1.25, 3.75, 6.25, 8.75 -> 1, 4, 6, 9.
    CHECK(even_sample_indices(10, 4) == std::vector<std::size_t>{1, 4, 6, 9});
    // (i + 0.5) * 8 / 8 = 0.5, 1.5, ... -> round half up hits every index.
    CHECK(even_sample_indices(8, 8) == std::vector<std::size_t>{1, 2, 3, 4, 5, 6, 7, 7});
    CHECK(even_sample_indices(5, 1) == std::vector<std::size_t>{3});
    CHECK_THROWS_AS(even_sample_indices(0, 1), ValidationError);
    CHECK_THROWS_AS(even_sample_indices(4, 0), ValidationError);
}

TEST_CASE("make_pairs drops the first window_trs TRs and aligns windows") {
    const std::size_t T = 12, V = 4, W = 3;
    Fixture f = make_fixture(T, V);
    auto pairs = make_pairs(f.bold, f.stim, mask_all(V), W);
    REQUIRE(pairs.size() == T - W);
    CHECK(pairs.front().target_tr == W);
    CHECK(pairs.front().window_begin == 0);
    CHECK(pairs.back().target_tr == T - 1);
    CHECK(pairs.back().window_begin == T - 1 - W);
    // Windows resample the W-TR grid down to the fixed token budget: F*P video
    // rows and A audio rows. With W=3, F=2 the frame grid has 6 slots and the
    // even picks land on slots 2 and 5, i.e. (tr+1, frame 0) and (tr+2, frame 1).
    const auto& p = pairs[2];  // target_tr = 5, window [2, 5)
    CHECK(p.video_window.rows == 2 * 1);
    CHECK(p.video_window.cols == 3);
    CHECK(p.video_window.at(0, 0) == f.stim.video_tokens.at(3, 0));
    CHECK(p.video_window.at(1, 0) == f.stim.video_tokens.at(4, 3));
    CHECK(p.audio_window.rows == 2);
    CHECK(p.audio_window.cols == 2);
    CHECK(p.audio_window.at(0, 0) == f.stim.audio_tokens.at(3, 0));
    CHECK(p.audio_window.at(1, 0) == f.stim.audio_tokens.at(4, 2));
    // y carries the target TR's masked voxels.
    REQUIRE(p.y.size() == V);
    CHECK(p.y[1] == f.bold.responses.at(5, 1));
}

TEST_CASE("mask changes y but not the windows") {
    const std::size_t T = 8, V = 5, W = 2;
    Fixture f = make_fixture(T, V);
    VoxelMask m;
    m.selected = {0, 1, 0, 1, 1};
    auto masked = make_pairs(f.bold, f.stim, m, W);
    auto full = make_pairs(f.bold, f.stim, mask_all(V), W);
    REQUIRE(masked.size() == full.size());
    for (std::size_t i = 0; i < masked.size(); ++i) {
        CHECK(bit_equal(masked[i].video_window, full[i].video_window));
        CHECK(bit_equal(masked[i].audio_window, full[i].audio_window));
        REQUIRE(masked[i].y.size() == 3);
        CHECK(masked[i].y[0] == full[i].y[1]);
        CHECK(masked[i].y[2] == full[i].y[4]);
    }
}

TEST_CASE("make_windows matches make_pairs windows with empty y") {
    const std::size_t T = 9, W = 4;
    Fixture f = make_fixture(T, 2);
    auto wins = make_windows(f.stim, W);
    auto pairs = make_pairs(f.bold, f.stim, mask_all(2), W);
    REQUIRE(wins.size() == pairs.size());
    for (std::size_t i = 0; i < wins.size(); ++i) {
        CHECK(wins[i].y.empty());
        CHECK(wins[i].target_tr == pairs[i].target_tr);
        CHECK(bit_equal(wins[i].video_window, pairs[i].video_window));
        CHECK(bit_equal(wins[i].audio_window, pairs[i].audio_window));
    }
}

TEST_CASE("windows never cross run boundaries under concat") {
    Fixture a = make_fixture(7, 2), b = make_fixture(6, 2);
    const std::size_t W = 3;
    auto pa = make_pairs(a.bold, a.stim, mask_all(2), W);
    auto pb = make_pairs(b.bold, b.stim, mask_all(2), W);
    auto all = concat_pairs({pa, pb});
    REQUIRE(all.size() == (7 - W) + (6 - W));
    // Second run restarts at target_tr = W, proving the window reset.
    CHECK(all[7 - W].target_tr == W);
    CHECK(all[7 - W].window_begin == 0);
}

TEST_CASE("make_pairs rejects degenerate geometry") {
    Fixture f = make_fixture(6, 3);
    CHECK_THROWS_AS(make_pairs(f.bold, f.stim, mask_all(3), 0), ValidationError);
    // Window as long as the run leaves nothing to pair.
    CHECK_THROWS_AS(make_pairs(f.bold, f.stim, mask_all(3), 6), ValidationError);
    VoxelMask wrong;
    wrong.selected = {1, 1};
    CHECK_THROWS_AS(make_pairs(f.bold, f.stim, wrong, 2), ValidationError);
    Fixture g = make_fixture(4, 3);
    CHECK_THROWS_AS(make_pairs(f.bold, g.stim, mask_all(3), 2), ValidationError);
}

TEST_CASE("slices keep shapes and offsets consistent") {
    Fixture f = make_fixture(10, 3);
    BoldRun sb = slice_bold(f.bold, 2, 7);
    CHECK(sb.t_trs() == 5);
    CHECK(sb.responses.at(0, 0) == f.bold.responses.at(2, 0));
    StimulusStream ss = slice_stimulus(f.stim, 2, 7);
    CHECK(ss.t_trs() == 5);
    CHECK(ss.video_tokens.at(4, 1) == f.stim.video_tokens.at(6, 1));
    CHECK_THROWS_AS(slice_bold(f.bold, 7, 2), ValidationError);
    CHECK_THROWS_AS(slice_bold(f.bold, 0, 11), ValidationError);
}

TEST_CASE("atlas lookups and masks agree") {
    RoiAtlas atlas;
    atlas.roi_names = {"aSTS", "LOC"};
    atlas.labels = {0, 1, 0, 1, 1};
    atlas.validate();
    CHECK(atlas.roi_index("LOC") == 1);
    CHECK(atlas.roi_index("nope") == -1);
    CHECK(atlas.voxels_of("aSTS") == std::vector<std::size_t>{0, 2});
    VoxelMask m = mask_for_rois(atlas, {"LOC"});
    CHECK(m.count() == 3);
    CHECK(m.indices() == std::vector<std::size_t>{1, 3, 4});
    CHECK_THROWS_AS(mask_for_rois(atlas, {"missing"}), ValidationError);
    RoiAtlas bad = atlas;
    bad.labels[0] = 5;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("manifest and atlas files round trip") {
    const auto dir = temp_dir();
    RoiAtlas atlas;
    atlas.roi_names = {"A", "B"};
    atlas.labels = {0, 0, 1};
    write_atlas(atlas, dir / "atlas.json");
    RoiAtlas back = read_atlas(dir / "atlas.json");
    CHECK(back.roi_names == atlas.roi_names);
    CHECK(back.labels == atlas.labels);

    DatasetManifest m;
    m.tr_seconds = 2.0;
    m.window_trs = 4;
    m.frames_per_window = 2;
    m.patches_per_frame = 1;
    m.audio_tokens_per_window = 2;
    m.d_v = 3;
    m.d_a = 2;
    m.stimulus.push_back({"run-01", "vid.mmbt", "aud.mmbt"});
    m.atlas_path = "atlas.json";
    m.subjects.push_back({"sub-01", {{"run-01", "bold.mmbt"}}});
    m.truth_meta_path = "truth/meta.json";
    write_manifest(m, dir / "manifest.json");
    DatasetManifest mb = read_manifest(dir / "manifest.json");
    CHECK(mb.tr_seconds == 2.0);
    CHECK(mb.window_trs == 4);
    CHECK(mb.subjects.size() == 1);
    CHECK(mb.subjects[0].runs[0].responses_path == "bold.mmbt");
    CHECK(mb.stimulus[0].video_path == "vid.mmbt");
    REQUIRE(mb.truth_meta_path.has_value());
    CHECK(*mb.truth_meta_path == "truth/meta.json");
}

TEST_CASE("loaders resolve relative paths and check shape consistency") {
    const auto dir = temp_dir() / "load";
    fs::create_directories(dir);
    Fixture f = make_fixture(6, 2);
    write_matrix(f.stim.video_tokens, dir / "vid.mmbt");
    write_matrix(f.stim.audio_tokens, dir / "aud.mmbt");
    write_matrix(f.bold.responses, dir / "bold.mmbt");
    RoiAtlas atlas;
    atlas.roi_names = {"A"};
    atlas.labels = {0, 0};
    write_atlas(atlas, dir / "atlas.json");

    DatasetManifest m;
    m.window_trs = 2;
    m.frames_per_window = 2;
    m.patches_per_frame = 1;
    m.audio_tokens_per_window = 2;
    m.d_v = 3;
    m.d_a = 2;
    m.stimulus.push_back({"run-01", "vid.mmbt", "aud.mmbt"});
    m.atlas_path = "atlas.json";
    m.subjects.push_back({"sub-01", {{"run-01", "bold.mmbt"}}});
    write_manifest(m, dir / "manifest.json");

    DatasetManifest mb = read_manifest(dir / "manifest.json");
    StimulusStream s = load_stimulus(mb, dir, "run-01");
    CHECK(bit_equal(s.video_tokens, f.stim.video_tokens));
    BoldRun b = load_bold(mb, dir, "sub-01", "run-01");
    CHECK(bit_equal(b.responses, f.bold.responses));
    CHECK(b.subject_id == "sub-01");
    CHECK_THROWS_AS(load_bold(mb, dir, "sub-99", "run-01"), ValidationError);
    CHECK_THROWS_AS(load_stimulus(mb, dir, "run-99"), ValidationError);
}

TEST_CASE("read_manifest rejects malformed JSON") {
    const auto dir = temp_dir();
    {
        std::ofstream out(dir / "broken.json", std::ios::trunc);
        out << "{ not json";
    }
    CHECK_THROWS_AS(read_manifest(dir / "broken.json"), IoError);
    CHECK_THROWS_AS(read_manifest(dir / "absent.json"), IoError);
}
