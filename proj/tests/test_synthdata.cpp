#include <cmath>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "emoface/synthdata.hpp"

using namespace emoface;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_config(const std::string& out_dir) {
    RunConfig cfg;
    cfg.model.vertices = 256;
    cfg.model.d_id = 6;
    cfg.model.d_exp = 12;
    cfg.model.d_tex = 5;
    cfg.model.resolution = 32;  // 4 * 2^3, the smallest legal pyramid output
    cfg.data.identities = 2;
    cfg.data.held_out_identities = 1;
    cfg.data.clips_per_combo = 1;
    cfg.data.frames_per_clip = 24;
    cfg.data.window = 16;
    cfg.hef.base_size = 4;
    cfg.out_dir = out_dir;
    return cfg;
}

std::string tmp_root(const char* stem) {
    return (fs::temp_directory_path() / stem).string();
}

// One shared dataset for the read-only cases; generated on first use.
const DatasetManifest& shared_dataset() {
    static DatasetManifest m = [] {
        std::string root = tmp_root("emoface_synth_shared");
        fs::remove_all(root);
        return gen_dataset(tiny_config(root), 5);
    }();
    return m;
}

int find_clip(const DatasetManifest& m, int identity, const std::string& emotion, int mu, int take) {
    for (const auto& c : m.clips)
        if (c.identity == identity && c.emotion == emotion && c.intensity == mu && c.take == take)
            return c.id;
    FAIL("clip not found");
    return -1;
}

}  // namespace

TEST_CASE("generation is bitwise deterministic in the seed") {
    const DatasetManifest& a = shared_dataset();
    CHECK(a.clips.size() == 2u * (7 * 3 + 1));
    CHECK(a.frames_per_clip == 24);

    std::string root_b = tmp_root("emoface_synth_b");
    fs::remove_all(root_b);
    DatasetManifest b = gen_dataset(tiny_config(root_b), 5);

    for (const char* rel : {"manifest.json", "model.emf", "identities.emf"})
        CHECK(read_file_bytes(a.root + "/" + std::string(rel)) ==
              read_file_bytes(b.root + "/" + std::string(rel)));
    for (const char* rel : {"clip_0009/mel.emf", "clip_0009/coeffs.emf", "clip_0009/clip.wav",
                            "clip_0009/frames/frame_000.ppm", "clip_0041/frames/frame_023.ppm"})
        CHECK(read_file_bytes(a.root + "/" + std::string(rel)) ==
              read_file_bytes(b.root + "/" + std::string(rel)));

    std::string root_c = tmp_root("emoface_synth_c");
    fs::remove_all(root_c);
    DatasetManifest c = gen_dataset(tiny_config(root_c), 6);
    CHECK(read_file_bytes(a.root + "/clip_0009/mel.emf") !=
          read_file_bytes(c.root + "/clip_0009/mel.emf"));
    fs::remove_all(root_b);
    fs::remove_all(root_c);
}

TEST_CASE("a second generation into the same directory is refused") {
    const DatasetManifest& a = shared_dataset();
    std::string out_dir = fs::path(a.root).parent_path().string();
    CHECK_THROWS_AS(gen_dataset(tiny_config(out_dir), 5), IoError);
}

TEST_CASE("manifest round-trips and splits are disjoint") {
    const DatasetManifest& a = shared_dataset();
    DatasetManifest r = DatasetManifest::load(a.root);
    CHECK(r.seed == 5);
    CHECK(r.resolution == 32);
    CHECK(r.train_identities == std::vector<int>{0});
    CHECK(r.held_out_identities == std::vector<int>{1});
    CHECK(r.clips.size() == a.clips.size());
    CHECK(r.is_held_out(1));
    CHECK_FALSE(r.is_held_out(0));
    for (const auto& c : r.clips) {
        const ClipInfo& byid = r.clip(c.id);
        CHECK(byid.dir == c.dir);
        CHECK((c.identity == 0 || c.identity == 1));
    }
    CHECK(r.clips_of_identity(0).size() == 22u);
    CHECK(r.clips_of_identity(1).size() == 22u);
    CHECK_THROWS_AS(r.clip(999), ContractError);
    CHECK_THROWS_AS(DatasetManifest::load("/nonexistent"), DependencyError);
}

TEST_CASE("emotion offsets scale exactly with intensity") {
    const DatasetManifest& m = shared_dataset();
    ClipSample n = load_clip(m, find_clip(m, 0, "neutral", 1, 0), 0, 24);
    const char* emos[3] = {"happy", "angry", "fear"};
    for (const char* emo : emos) {
        ClipSample s1 = load_clip(m, find_clip(m, 0, emo, 1, 0), 0, 24);
        ClipSample s2 = load_clip(m, find_clip(m, 0, emo, 2, 0), 0, 24);
        ClipSample s3 = load_clip(m, find_clip(m, 0, emo, 3, 0), 0, 24);
        double norm1 = 0, norm2 = 0, norm3 = 0;
        for (int t = 0; t < 24; ++t) {
            // Speech, mouth, and blink columns are bitwise shared.
            for (int c : {kSpeechCols[0], kSpeechCols[1], kBlinkCol}) {
                CHECK(s1.beta.at2(t, c) == n.beta.at2(t, c));
                CHECK(s3.beta.at2(t, c) == n.beta.at2(t, c));
            }
            for (int c = 0; c < 12; ++c) {
                double d1 = s1.beta.at2(t, c) - n.beta.at2(t, c);
                double d2 = s2.beta.at2(t, c) - n.beta.at2(t, c);
                double d3 = s3.beta.at2(t, c) - n.beta.at2(t, c);
                CHECK(std::abs(d2 - 2 * d1) <= 1e-12);
                CHECK(std::abs(d3 - 3 * d1) <= 1e-12);
                norm1 += d1 * d1;
                norm2 += d2 * d2;
                norm3 += d3 * d3;
            }
            // Pose is shared across emotion and intensity for a fixed take.
            for (int c = 0; c < 6; ++c) CHECK(s1.pose.at2(t, c) == n.pose.at2(t, c));
        }
        CHECK(std::sqrt(norm1 / 24) == doctest::Approx(kEmotionAmp).epsilon(1e-9));
        CHECK(std::sqrt(norm2 / 24) == doctest::Approx(2 * kEmotionAmp).epsilon(1e-9));
        CHECK(std::sqrt(norm3 / 24) == doctest::Approx(3 * kEmotionAmp).epsilon(1e-9));
    }
}

TEST_CASE("load_clip windows align with the full clip") {
    const DatasetManifest& m = shared_dataset();
    int id = find_clip(m, 1, "sad", 2, 0);
    ClipSample full = load_clip(m, id, 0, 24, true);
    REQUIRE(full.mel.dim(0) == 24);
    REQUIRE(full.mel.dim(1) == 80);
    REQUIRE(full.beta.dim(1) == 12);
    REQUIRE(full.pose.dim(1) == 6);
    REQUIRE(full.frames.size() == 24u);
    CHECK(full.emotion == "sad");
    CHECK(full.intensity == 2);
    CHECK(full.identity == 1);
    CHECK(full.alpha.dim(0) == 6);

    ClipSample win = load_clip(m, id, 10, 9, true);
    for (int t = 0; t < 9; ++t) {
        for (int k = 0; k < 80; ++k) CHECK(win.mel.at2(t, k) == full.mel.at2(t + 10, k));
        for (int k = 0; k < 12; ++k) CHECK(win.beta.at2(t, k) == full.beta.at2(t + 10, k));
        for (int k = 0; k < 6; ++k) CHECK(win.pose.at2(t, k) == full.pose.at2(t + 10, k));
        CHECK(win.frames[t].same_shape(full.frames[t + 10]));
        for (std::int64_t i = 0; i < win.frames[t].numel(); ++i)
            CHECK(win.frames[t].at(i) == full.frames[t + 10].at(i));
    }
    for (const Tensor& f : full.frames) {
        CHECK(f.dim(1) == m.resolution);
        CHECK(f.min() >= 0.0);
        CHECK(f.max() <= 1.0);
    }
    CHECK(load_clip(m, id, 0, 5).frames.empty());
    CHECK_THROWS_AS(load_clip(m, id, 20, 10), ContractError);
    CHECK_THROWS_AS(load_clip(m, id, -1, 5), ContractError);
}

TEST_CASE("mouth columns are an affine readout of the stored mel envelope") {
    const DatasetManifest& m = shared_dataset();
    std::vector<double> xs, ys;
    for (int id : m.clips_of_identity(0)) {
        ClipSample s = load_clip(m, id, 0, 24);
        Tensor env = speech_band_envelope(s.mel);
        Tensor env_s = smooth_rows(env.reshaped({24, 1}), 9);
        for (int t = 0; t < 24; ++t) {
            xs.push_back(env_s.at(t));
            ys.push_back(s.beta.at2(t, kSpeechCols[0]));
        }
    }
    const auto n = static_cast<double>(xs.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0;
    for (size_t i = 0; i < xs.size(); ++i) {
        sx += xs[i];
        sy += ys[i];
        sxx += xs[i] * xs[i];
        sxy += xs[i] * ys[i];
        syy += ys[i] * ys[i];
    }
    double vx = sxx - sx * sx / n, vy = syy - sy * sy / n, cxy = sxy - sx * sy / n;
    REQUIRE(vx > 1e-6);
    REQUIRE(vy > 1e-8);
    double r2 = cxy * cxy / (vx * vy);
    INFO("r2=", r2);
    CHECK(r2 > 0.99);
}

TEST_CASE("pairing covers every ordered emotion pair") {
    const DatasetManifest& m = shared_dataset();
    Rng rng(17);
    std::set<std::pair<int, int>> seen;
    for (int i = 0; i < 1000; ++i) {
        auto [src, drv] = make_pair(m, 0, rng);
        const ClipInfo& cs = m.clip(src);
        const ClipInfo& cd = m.clip(drv);
        CHECK(cs.identity == 0);
        CHECK(cd.identity == 0);
        CHECK(cs.emotion != cd.emotion);
        seen.emplace(emotion_index(cs.emotion), emotion_index(cd.emotion));
    }
    CHECK(seen.size() == 56u);

    DatasetManifest single = m;
    single.clips.clear();
    for (const auto& c : m.clips)
        if (c.identity == 0 && c.emotion == "happy") single.clips.push_back(c);
    CHECK_THROWS_AS(make_pair(single, 0, rng), ContractError);
}

TEST_CASE("frames composite the face over the fixed background") {
    const DatasetManifest& m = shared_dataset();
    MorphableModel model = load_dataset_model(m);
    int id = find_clip(m, 0, "surprised", 3, 0);
    ClipSample s = load_clip(m, id, 0, 1, true);

    Coefficients c;
    c.alpha = s.alpha;
    c.delta = s.delta;
    c.gamma = s.gamma;
    c.beta = Tensor({12});
    for (int k = 0; k < 12; ++k) c.beta.ref(k) = s.beta.at2(0, k);
    c.pose = Tensor({6});
    for (int k = 0; k < 6; ++k) c.pose.ref(k) = s.pose.at2(0, k);
    RenderedFrame rf = render_frame(model, c, m.resolution);
    Tensor bg = background_image(m.resolution);

    int off = -1, on = -1;
    double best_mask = 0.5;
    for (int i = 0; i < m.resolution * m.resolution; ++i) {
        if (rf.mask.at(i) == 0.0 && off < 0) off = i;
        if (rf.mask.at(i) > best_mask) {
            best_mask = rf.mask.at(i);
            on = i;
        }
    }
    REQUIRE(off >= 0);
    REQUIRE(on >= 0);
    const auto q = [](double v) { return std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; };
    const int hw = m.resolution * m.resolution;
    for (int ch = 0; ch < 3; ++ch)
        CHECK(s.frames[0].at(ch * hw + off) == q(bg.at(ch * hw + off)));
    bool differs = false;
    for (int ch = 0; ch < 3; ++ch)
        if (s.frames[0].at(ch * hw + on) != q(bg.at(ch * hw + on))) differs = true;
    CHECK(differs);
}

TEST_CASE("ppm codec round-trips 8-bit images") {
    Rng rng(3);
    Tensor img = rng.uniform_tensor({3, 5, 7}, -0.1, 1.1);
    Tensor back = decode_ppm(encode_ppm(img));
    REQUIRE(back.same_shape(img));
    for (std::int64_t i = 0; i < img.numel(); ++i) {
        double q = std::lround(std::clamp(img.at(i), 0.0, 1.0) * 255.0) / 255.0;
        CHECK(back.at(i) == q);
    }
    CHECK_THROWS_AS(decode_ppm(std::vector<unsigned char>{'P', '5', '\n'}), IoError);
    auto trunc = encode_ppm(img);
    trunc.pop_back();
    CHECK_THROWS_AS(decode_ppm(trunc), IoError);
}

TEST_CASE("self-certification re-renders clips and catches tampering") {
    const DatasetManifest& m = shared_dataset();
    MorphableModel model = load_dataset_model(m);
    Rng rng(11);
    std::string why;
    CHECK(self_certify(m, model, 3, rng, &why));
    CHECK(why.empty());

    const std::string victim = m.root + "/clip_0000/frames/frame_003.ppm";
    auto bytes = read_file_bytes(victim);
    auto original = bytes;
    bytes[bytes.size() - 1] ^= 0x40;
    write_file_bytes(victim, bytes);
    DatasetManifest one = m;
    one.clips = {m.clips[0]};
    Rng rng2(1);
    CHECK_FALSE(self_certify(one, model, 1, rng2, &why));
    CHECK(why == "clip_0000/frames/frame_003.ppm");
    write_file_bytes(victim, original);
    Rng rng3(1);
    CHECK(self_certify(one, model, 1, rng3, &why));
}
