#include <cmath>
#include <filesystem>
#include <vector>

#include "doctest.h"
#include "emoface/emotion_space.hpp"

using namespace emoface;
namespace fs = std::filesystem;

namespace {

const DatasetManifest& dataset() {
    static DatasetManifest m = [] {
        RunConfig cfg;
        cfg.model.vertices = 256;
        cfg.model.d_id = 6;
        cfg.model.d_exp = 12;
        cfg.model.d_tex = 5;
        cfg.model.resolution = 32;
        cfg.data.identities = 2;
        cfg.data.held_out_identities = 1;
        cfg.data.clips_per_combo = 1;
        cfg.data.frames_per_clip = 24;
        cfg.data.window = 16;
        cfg.hef.base_size = 4;
        cfg.out_dir = (fs::temp_directory_path() / "emoface_emospace_data").string();
        fs::remove_all(cfg.out_dir);
        return gen_dataset(cfg, 5);
    }();
    return m;
}

// Wider identity pool so held-out generalization is measurable; the fit
// case needs several training identities, not the two-identity smoke set.
const DatasetManifest& multi_identity_dataset() {
    static DatasetManifest m = [] {
        RunConfig cfg;
        cfg.model.vertices = 256;
        cfg.model.d_id = 6;
        cfg.model.d_exp = 12;
        cfg.model.d_tex = 5;
        cfg.model.resolution = 32;
        cfg.data.identities = 12;
        cfg.data.held_out_identities = 3;
        cfg.data.clips_per_combo = 1;
        cfg.data.frames_per_clip = 24;
        cfg.data.window = 16;
        cfg.hef.base_size = 4;
        cfg.out_dir = (fs::temp_directory_path() / "emoface_emospace_multi").string();
        fs::remove_all(cfg.out_dir);
        return gen_dataset(cfg, 5);
    }();
    return m;
}

// Anchors and the frozen-forward plumbing without the encoder fit.
JointSpace unfitted_space(std::uint64_t seed, int d_e) {
    JointFitOptions opt;
    opt.d_e = d_e;
    opt.steps = 0;
    opt.pool = 64;
    return fit_joint_space(dataset(), seed, opt);
}

double cosv(const Tensor& a, const Tensor& b) {
    double dot = 0, na = 0, nb = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        dot += a.at(i) * b.at(i);
        na += a.at(i) * a.at(i);
        nb += b.at(i) * b.at(i);
    }
    return dot / std::sqrt(na * nb);
}

}  // namespace

TEST_CASE("anchors are unit, near-orthogonal, and seed-deterministic") {
    JointSpace s = unfitted_space(7, 64);
    for (int a = 0; a < 8; ++a) {
        double n2 = 0;
        for (int i = 0; i < 64; ++i) n2 += s.anchors.at2(a, i) * s.anchors.at2(a, i);
        CHECK(std::abs(std::sqrt(n2) - 1.0) < 1e-12);
        for (int b = 0; b < a; ++b) {
            double dot = 0;
            for (int i = 0; i < 64; ++i) dot += s.anchors.at2(a, i) * s.anchors.at2(b, i);
            CHECK(std::abs(dot) < 1e-10);
        }
    }
    JointSpace again = unfitted_space(7, 64);
    for (std::int64_t i = 0; i < s.anchors.numel(); ++i)
        CHECK(s.anchors.at(i) == again.anchors.at(i));
    JointSpace other = unfitted_space(8, 64);
    bool same = true;
    for (std::int64_t i = 0; i < s.anchors.numel() && same; ++i)
        if (s.anchors.at(i) != other.anchors.at(i)) same = false;
    CHECK_FALSE(same);
}

TEST_CASE("text embeddings resolve labels and anchor arithmetic") {
    JointSpace s = unfitted_space(7, 64);
    Tensor happy = s.text_embed("happy");
    for (int i = 0; i < 64; ++i) CHECK(happy.at(i) == s.anchors.at2(emotion_index("happy"), i));
    Tensor happy2 = s.text_embed("happy");
    for (int i = 0; i < 64; ++i) CHECK(happy.at(i) == happy2.at(i));

    Tensor compound = s.text_embed("happy+surprised");
    Tensor manual({64});
    for (int i = 0; i < 64; ++i)
        manual.ref(i) = s.anchors.at2(emotion_index("happy"), i) +
                        s.anchors.at2(emotion_index("surprised"), i);
    CHECK(std::abs(cosv(compound, manual) - 1.0) < 1e-12);
    double n2 = 0;
    for (int i = 0; i < 64; ++i) n2 += compound.at(i) * compound.at(i);
    CHECK(std::abs(std::sqrt(n2) - 1.0) < 1e-12);

    // The compound stays closer to both constituents than any third anchor.
    double to_happy = cosv(compound, s.anchor(emotion_index("happy")));
    double to_surprised = cosv(compound, s.anchor(emotion_index("surprised")));
    for (int e = 0; e < 8; ++e) {
        if (e == emotion_index("happy") || e == emotion_index("surprised")) continue;
        double third = cosv(compound, s.anchor(e));
        CHECK(to_happy > third);
        CHECK(to_surprised > third);
    }

    Tensor weighted = s.text_embed({{"happy", 2.0}, {"sad", 1.0}});
    Tensor wmanual({64});
    for (int i = 0; i < 64; ++i)
        wmanual.ref(i) =
            2.0 * s.anchors.at2(emotion_index("happy"), i) + s.anchors.at2(emotion_index("sad"), i);
    CHECK(std::abs(cosv(weighted, wmanual) - 1.0) < 1e-12);

    CHECK_THROWS_AS(s.text_embed("melancholy"), ConfigError);
    CHECK_THROWS_AS(s.text_embed(""), ConfigError);
    CHECK_THROWS_AS(s.text_embed({{"happy", 1.0}, {"happy", -1.0}}), NumericError);
}

TEST_CASE("image embeddings are frozen, unit-norm, and shape-checked") {
    JointSpace s = unfitted_space(3, 32);
    Rng rng(21);
    Tensor face = rng.uniform_tensor({3, s.resolution, s.resolution}, 0.0, 1.0);
    Tensor a = s.image_embed(face);
    Tensor b = s.image_embed(face);
    REQUIRE(a.dim(0) == 32);
    double n2 = 0;
    for (int i = 0; i < 32; ++i) {
        CHECK(a.at(i) == b.at(i));
        n2 += a.at(i) * a.at(i);
    }
    CHECK(std::abs(std::sqrt(n2) - 1.0) < 1e-5);
    CHECK_THROWS_AS(s.image_embed(rng.uniform_tensor({3, 16, 16}, 0.0, 1.0)), ShapeError);
    CHECK_THROWS_AS(s.image_embed(rng.uniform_tensor({1, 32, 32}, 0.0, 1.0)), ShapeError);
}

TEST_CASE("joint-space archive round-trips bitwise") {
    JointSpace s = unfitted_space(9, 32);
    const std::string path = (fs::temp_directory_path() / "emoface_space.emf").string();
    s.save(path);
    JointSpace r = JointSpace::load(path);
    CHECK(r.d_e == s.d_e);
    CHECK(r.resolution == s.resolution);
    for (std::int64_t i = 0; i < s.anchors.numel(); ++i) CHECK(r.anchors.at(i) == s.anchors.at(i));
    Rng rng(4);
    Tensor face = rng.uniform_tensor({3, s.resolution, s.resolution}, 0.0, 1.0);
    Tensor ea = s.image_embed(face), eb = r.image_embed(face);
    for (int i = 0; i < s.d_e; ++i) CHECK(ea.at(i) == eb.at(i));
    fs::remove(path);
}

TEST_CASE("fitting refuses a training split with a missing emotion") {
    DatasetManifest crippled = dataset();
    std::vector<ClipInfo> kept;
    for (const auto& c : crippled.clips)
        if (crippled.is_held_out(c.identity) || c.emotion != "fear") kept.push_back(c);
    crippled.clips = kept;
    JointFitOptions opt;
    opt.steps = 0;
    CHECK_THROWS_AS(fit_joint_space(crippled, 1, opt), ContractError);
}

TEST_CASE("fitted image encoder classifies held-out faces by emotion") {
    const DatasetManifest& m = multi_identity_dataset();
    JointFitOptions opt;
    opt.d_e = 64;
    opt.steps = 4000;
    opt.batch = 8;
    opt.pool = 4000;
    opt.frames_per_clip = 12;
    JointSpace s = fit_joint_space(m, 11, opt);
    Rng rng(2);
    ImageEmbedEval held = evaluate_image_embeddings(s, m, true, 400, rng);
    INFO("held-out accuracy=", held.accuracy, " mean_cos=", held.mean_cos,
         " n=", held.count);
    CHECK(held.accuracy >= 0.9);
    CHECK(held.mean_cos >= 0.8);
}

TEST_CASE("audio encoder embeds mel clips on the unit sphere") {
    ParamStore ps;
    Rng rng(13);
    AudioEmotionEncoder enc(ps, "audio/", 8, 80, 32, 2, 4, 16, rng);
    Rng mel_rng(5);
    Tensor mel = mel_rng.uniform_tensor({8, 80}, -6.0, 2.0);
    Tensor a = enc.embed(mel);
    Tensor b = enc.embed(mel);
    REQUIRE(a.dim(0) == 16);
    double n2 = 0;
    for (int i = 0; i < 16; ++i) {
        CHECK(a.at(i) == b.at(i));
        n2 += a.at(i) * a.at(i);
    }
    CHECK(std::abs(std::sqrt(n2) - 1.0) < 1e-5);
    CHECK_THROWS_AS(enc.embed(mel_rng.uniform_tensor({9, 80}, 0.0, 1.0)), ShapeError);

    // Gradients reach the encoder parameters through the normalized output.
    Tape t;
    Var out = enc.forward(t, t.constant(mel));
    Tensor target = Tensor::zeros({1, 16});
    target.ref(0) = 1.0;
    Var loss = clip_alignment_loss(t, out, target, target);
    t.backward(loss);
    double grad_norm = 0;
    for (const auto& p : ps.all()) {
        Tensor g = t.grad(p->staged);
        for (std::int64_t i = 0; i < g.numel(); ++i) grad_norm += g.at(i) * g.at(i);
    }
    CHECK(grad_norm > 0);
}

TEST_CASE("untrained audio embeddings are uncorrelated with anchors") {
    JointSpace s = unfitted_space(17, 16);
    ParamStore ps;
    Rng rng(23);
    AudioEmotionEncoder enc(ps, "audio/", 8, 80, 32, 2, 4, 16, rng);
    Rng mel_rng(29);
    double mean_cos = 0;
    for (int i = 0; i < 100; ++i) {
        Tensor emb = enc.embed(mel_rng.uniform_tensor({8, 80}, -6.0, 2.0));
        mean_cos += cosv(emb, s.anchor(i % 8));
    }
    mean_cos /= 100;
    INFO("untrained mean cos=", mean_cos);
    CHECK(std::abs(mean_cos) < 0.2);
}

TEST_CASE("z_emo assembly interleaves modalities per sample") {
    const int b = 3, d = 4;
    Tensor text({b, d}), audio({b, d}), img({b, d});
    for (int i = 0; i < b * d; ++i) {
        text.ref(i) = 100 + i;
        audio.ref(i) = 200 + i;
        img.ref(i) = 300 + i;
    }
    Tensor z = assemble_z_emo(ZEmoMode::train_concat, text, audio, img);
    REQUIRE(z.shape() == std::vector<int>{3 * b, d});
    for (int i = 0; i < b; ++i)
        for (int k = 0; k < d; ++k) {
            CHECK(z.at2(3 * i + 0, k) == text.at2(i, k));
            CHECK(z.at2(3 * i + 1, k) == audio.at2(i, k));
            CHECK(z.at2(3 * i + 2, k) == img.at2(i, k));
        }

    Tensor solo = assemble_z_emo(ZEmoMode::single_modality, text, std::nullopt, std::nullopt);
    for (int i = 0; i < b * d; ++i) CHECK(solo.at(i) == text.at(i));

    CHECK_THROWS_AS(assemble_z_emo(ZEmoMode::train_concat, text, audio, std::nullopt),
                    ContractError);
    CHECK_THROWS_AS(assemble_z_emo(ZEmoMode::single_modality, text, audio, std::nullopt),
                    ContractError);
    CHECK_THROWS_AS(assemble_z_emo(ZEmoMode::train_concat, text, audio,
                                   Tensor::zeros({b + 1, d})),
                    ShapeError);

    // Gradient lands on the audio rows of the interleaved batch.
    Tape t;
    Var av = t.leaf(audio, true);
    Var zv = assemble_z_emo(t, ZEmoMode::train_concat, t.constant(text), av, t.constant(img));
    t.backward(sum_all(mul(zv, zv)));
    Tensor g = t.grad(av);
    for (int i = 0; i < b; ++i)
        for (int k = 0; k < d; ++k) CHECK(g.at2(i, k) == doctest::Approx(2 * audio.at2(i, k)));
}

TEST_CASE("alignment loss matches its closed forms and ignores batch order") {
    const int d = 6;
    Tensor u = Tensor::zeros({1, d});
    u.ref(0) = 1.0;
    Tensor v = Tensor::zeros({1, d});
    v.ref(1) = 1.0;
    Tensor nu = Tensor::zeros({1, d});
    nu.ref(0) = -1.0;

    auto loss_of = [](const Tensor& audio, const Tensor& text, const Tensor& img) {
        Tape t;
        return clip_alignment_loss(t, t.constant(audio), text, img).val().at(0);
    };
    CHECK(loss_of(u, u, u) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(loss_of(v, u, u) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(loss_of(nu, u, u) == doctest::Approx(4.0).epsilon(1e-12));

    Rng rng(31);
    Tensor audio = rng.normal_tensor({5, d});
    Tensor text = rng.normal_tensor({5, d});
    Tensor img = rng.normal_tensor({5, d});
    auto swap_rows = [](Tensor m, int a, int b) {
        Tensor out = m.clone();
        for (int k = 0; k < m.dim(1); ++k) {
            out.ref2(a, k) = m.at2(b, k);
            out.ref2(b, k) = m.at2(a, k);
        }
        return out;
    };
    double base = loss_of(audio, text, img);
    double swapped = loss_of(swap_rows(audio, 0, 3), swap_rows(text, 0, 3), swap_rows(img, 0, 3));
    CHECK(base == doctest::Approx(swapped).epsilon(1e-12));
    CHECK(base >= 0.0);
    CHECK(base <= 4.0);

    CHECK_THROWS_AS(loss_of(audio, rng.normal_tensor({4, d}), img), ShapeError);

    // Finite-difference check of the audio-side gradient.
    Tape t;
    Var av = t.leaf(audio, true);
    Var loss = clip_alignment_loss(t, av, text, img);
    t.backward(loss);
    Tensor g = t.grad(av);
    Rng pick(37);
    for (int i = 0; i < 6; ++i) {
        std::int64_t k = pick.uniform_int(static_cast<int>(audio.numel()));
        const double h = 1e-6;
        Tensor plus = audio.clone(), minus = audio.clone();
        plus.ref(k) += h;
        minus.ref(k) -= h;
        double fd = (loss_of(plus, text, img) - loss_of(minus, text, img)) / (2 * h);
        CHECK(g.at(k) == doctest::Approx(fd).epsilon(1e-5));
    }
}
