#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <set>

#include "emoface/morphable.hpp"
#include "fd_check.hpp"

using namespace emoface;

namespace {

ModelConfig small_model() {
    ModelConfig m;
    m.vertices = 256;
    m.d_id = 6;
    m.d_exp = 12;
    m.d_tex = 5;
    m.resolution = 24;
    return m;
}

const MorphableModel& cached_default() {
    static MorphableModel m = build_toy_model(ModelConfig{}, 31);
    return m;
}

double abs_max(const Tensor& t) {
    double m = 0;
    for (std::int64_t i = 0; i < t.numel(); ++i) m = std::max(m, std::abs(t.at(i)));
    return m;
}

Tensor gram_error(const Tensor& basis) {
    const int rows = basis.dim(0), cols = basis.dim(1);
    Tensor err({cols, cols});
    for (int a = 0; a < cols; ++a)
        for (int b = 0; b < cols; ++b) {
            double dot = 0;
            for (int r = 0; r < rows; ++r) dot += basis.at2(r, a) * basis.at2(r, b);
            err.ref2(a, b) = dot - (a == b ? 1.0 : 0.0);
        }
    return err;
}

}  // namespace

TEST_CASE("bases have orthonormal columns") {
    const MorphableModel& m = cached_default();
    CHECK(abs_max(gram_error(m.basis_id)) < 1e-6);
    CHECK(abs_max(gram_error(m.basis_exp)) < 1e-6);
    CHECK(abs_max(gram_error(m.basis_tex)) < 1e-6);
}

TEST_CASE("build is deterministic per seed and seed-sensitive") {
    MorphableModel a = build_toy_model(small_model(), 7);
    MorphableModel b = build_toy_model(small_model(), 7);
    MorphableModel c = build_toy_model(small_model(), 8);
    CHECK(std::memcmp(a.mean_shape.data(), b.mean_shape.data(),
                      sizeof(double) * a.mean_shape.numel()) == 0);
    CHECK(std::memcmp(a.basis_exp.data(), b.basis_exp.data(),
                      sizeof(double) * a.basis_exp.numel()) == 0);
    CHECK(std::memcmp(a.mean_shape.data(), c.mean_shape.data(),
                      sizeof(double) * a.mean_shape.numel()) != 0);
}

TEST_CASE("landmarks: 68 unique, mouth block is entries 48..67") {
    const MorphableModel& m = cached_default();
    CHECK(m.landmark_indices.size() == 68);
    std::set<int> uniq(m.landmark_indices.begin(), m.landmark_indices.end());
    CHECK(uniq.size() == 68);
    REQUIRE(m.mouth_landmark_indices.size() == 20);
    for (int i = 0; i < 20; ++i) CHECK(m.mouth_landmark_indices[i] == m.landmark_indices[48 + i]);
}

TEST_CASE("geometry offsets superpose exactly") {
    const MorphableModel& m = cached_default();
    Rng rng(5);
    Tensor a1 = rng.normal_tensor({m.config.d_id}), a2 = rng.normal_tensor({m.config.d_id});
    Tensor b1 = rng.normal_tensor({m.config.d_exp}), b2 = rng.normal_tensor({m.config.d_exp});
    Tape t;
    auto assemble = [&](const Tensor& a, const Tensor& b) {
        return assemble_geometry(t, m, t.constant(a), t.constant(b)).val();
    };
    Tensor mean = m.mean_shape;
    Tensor s1 = assemble(a1, b1);
    Tensor s2 = assemble(a2, b2);
    Tensor a12({m.config.d_id});
    for (int i = 0; i < m.config.d_id; ++i) a12.ref(i) = a1.at(i) + a2.at(i);
    Tensor b12({m.config.d_exp});
    for (int i = 0; i < m.config.d_exp; ++i) b12.ref(i) = b1.at(i) + b2.at(i);
    Tensor s12 = assemble(a12, b12);
    double worst = 0;
    for (std::int64_t i = 0; i < s12.numel(); ++i) {
        double lhs = s12.at(i) - mean.at(i);
        double rhs = (s1.at(i) - mean.at(i)) + (s2.at(i) - mean.at(i));
        worst = std::max(worst, std::abs(lhs - rhs));
    }
    CHECK(worst < 1e-12);
}

TEST_CASE("mouth coefficients never move eye landmarks and vice versa") {
    const MorphableModel& m = cached_default();
    Coefficients base = zero_coeffs(m.config);
    Tensor lm0 = landmarks_of(m, base);

    const int mouth_cols[5] = {0, 1, 3, 4, 5};
    for (int c : mouth_cols) {
        Coefficients p = base;
        p.beta = Tensor::zeros({m.config.d_exp});
        p.beta.ref(c) = 0.8;
        Tensor lm = landmarks_of(m, p);
        double eye_move = 0, mouth_move = 0;
        for (int i = 36; i < 48; ++i)
            for (int k = 0; k < 2; ++k) eye_move = std::max(eye_move, std::abs(lm.at2(i, k) - lm0.at2(i, k)));
        for (int i = 48; i < 68; ++i)
            for (int k = 0; k < 2; ++k) mouth_move = std::max(mouth_move, std::abs(lm.at2(i, k) - lm0.at2(i, k)));
        CHECK(eye_move <= 1e-8);
        if (c == 0 || c == 1) CHECK(mouth_move > 1e-3);  // speech columns must articulate
    }

    Coefficients blink = base;
    blink.beta = Tensor::zeros({m.config.d_exp});
    blink.beta.ref(kBlinkCol) = 0.8;
    Tensor lm = landmarks_of(m, blink);
    double mouth_move = 0, eye_move = 0;
    for (int i = 48; i < 68; ++i)
        for (int k = 0; k < 2; ++k) mouth_move = std::max(mouth_move, std::abs(lm.at2(i, k) - lm0.at2(i, k)));
    for (int i = 36; i < 48; ++i)
        for (int k = 0; k < 2; ++k) eye_move = std::max(eye_move, std::abs(lm.at2(i, k) - lm0.at2(i, k)));
    CHECK(mouth_move <= 1e-8);
    CHECK(eye_move > 1e-4);
}

TEST_CASE("pose algebra oracles") {
    Tape t;
    Tensor pt = Tensor::from({1.0, 0.0, 0.0}, {1, 3});
    const double pi = 3.14159265358979323846;

    SUBCASE("z-rotation by pi/2 maps +x to +y") {
        Var pose = t.constant(Tensor::from({0, 0, pi / 2, 0, 0, 0}, {6}));
        Projection pr = apply_pose_and_project(t, t.constant(pt), pose);
        CHECK(pr.uv.val().at2(0, 0) == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(pr.uv.val().at2(0, 1) == doctest::Approx(0.9).epsilon(1e-12));
    }
    SUBCASE("depth translation rescales weak-perspective projection") {
        Var pose = t.constant(Tensor::from({0, 0, 0, 0, 0, 0.5}, {6}));
        Projection pr = apply_pose_and_project(t, t.constant(pt), pose);
        CHECK(pr.uv.val().at2(0, 0) == doctest::Approx(0.9 / 1.5).epsilon(1e-12));
        CHECK(pr.depth.val().at(0) == doctest::Approx(0.5).epsilon(1e-12));
    }
    SUBCASE("x-translation shifts all landmarks by s*dx exactly") {
        const MorphableModel& m = cached_default();
        Coefficients c0 = zero_coeffs(m.config);
        Coefficients c1 = c0;
        c1.pose = Tensor::from({0, 0, 0, 0.07, 0, 0}, {6});
        Tensor l0 = landmarks_of(m, c0), l1 = landmarks_of(m, c1);
        for (int i = 0; i < 68; ++i) {
            CHECK(l1.at2(i, 0) - l0.at2(i, 0) == doctest::Approx(0.9 * 0.07).epsilon(1e-10));
            CHECK(l1.at2(i, 1) == doctest::Approx(l0.at2(i, 1)).epsilon(1e-12));
        }
    }
}

TEST_CASE("ambient-only lighting reproduces scaled albedo") {
    const MorphableModel& m = cached_default();
    Tape t;
    Tensor gamma = Tensor::zeros({27});
    gamma.ref(0) = 2.0;
    gamma.ref(9) = 2.0;
    gamma.ref(18) = 2.0;
    Var albedo = assemble_albedo(t, m, t.constant(Tensor::zeros({m.config.d_tex})));
    Var normals = rotated_normals(t, t.constant(m.mean_shape), t.constant(Tensor::zeros({6})));
    Var rad = shade_sh(t, normals, albedo, t.constant(gamma));
    double worst = 0;
    for (std::int64_t i = 0; i < rad.val().numel(); ++i)
        worst = std::max(worst, std::abs(rad.val().at(i) - 0.282095 * 2.0 * albedo.val().at(i)));
    CHECK(worst < 1e-12);
}

TEST_CASE("normals are unit length") {
    const MorphableModel& m = cached_default();
    Tape t;
    Var n = rotated_normals(t, t.constant(m.mean_shape), t.constant(Tensor::from({0.1, -0.2, 0.3, 0, 0, 0}, {6})));
    for (int i = 0; i < m.vertices(); ++i) {
        double len = std::hypot(n.val().at2(i, 0), std::hypot(n.val().at2(i, 1), n.val().at2(i, 2)));
        CHECK(len == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("render is deterministic, in range, and blend is identity off-support") {
    MorphableModel m = build_toy_model(small_model(), 3);
    Coefficients c = zero_coeffs(m.config);
    c.gamma.ref(0) = 3.0;
    c.gamma.ref(9) = 3.0;
    c.gamma.ref(18) = 3.0;
    RenderedFrame f1 = render_frame(m, c, 24);
    RenderedFrame f2 = render_frame(m, c, 24);
    CHECK(std::memcmp(f1.image.data(), f2.image.data(), sizeof(double) * f1.image.numel()) == 0);
    CHECK(f1.image.min() >= 0.0);
    CHECK(f1.image.max() <= 1.0);
    CHECK(f1.mask.min() >= 0.0);
    CHECK(f1.mask.max() < 1.0);

    Tape t;
    Rng rng(11);
    Tensor photo = rng.uniform_tensor({3, 24, 24}, 0.0, 1.0);
    CoeffVars cv = stage_coeffs(t, c, false);
    RenderOut ro = render(t, m, cv, 24);
    Var blended = blend(t, t.constant(photo), ro);
    int off_support = 0;
    for (int y = 0; y < 24; ++y)
        for (int x = 0; x < 24; ++x)
            if (ro.mask.val().at(y * 24 + x) == 0.0) {
                ++off_support;
                for (int ch = 0; ch < 3; ++ch) {
                    double b = blended.val().at((ch * 24 + y) * 24 + x);
                    double p = photo.at((ch * 24 + y) * 24 + x);
                    CHECK(b == p);
                }
            }
    CHECK(off_support > 0);  // face does not cover the full frame
}

TEST_CASE("full render pipeline passes finite-difference gradient checks") {
    MorphableModel m = build_toy_model(small_model(), 21);
    Rng rng(77);
    Tensor alpha = rng.normal_tensor({m.config.d_id});
    for (std::int64_t i = 0; i < alpha.numel(); ++i) alpha.ref(i) *= 0.1;
    Tensor beta = rng.normal_tensor({m.config.d_exp});
    for (std::int64_t i = 0; i < beta.numel(); ++i) beta.ref(i) *= 0.2;
    Tensor delta = rng.normal_tensor({m.config.d_tex});
    for (std::int64_t i = 0; i < delta.numel(); ++i) delta.ref(i) *= 0.1;
    Tensor gamma = rng.normal_tensor({27});
    for (std::int64_t i = 0; i < gamma.numel(); ++i) gamma.ref(i) *= 0.1;
    gamma.ref(0) = 2.2;
    gamma.ref(9) = 2.1;
    gamma.ref(18) = 2.3;
    Tensor pose = Tensor::from({0.05, -0.08, 0.04, 0.02, -0.01, 0.06}, {6});
    Tensor probe = rng.normal_tensor({4 * 24, 24});

    auto build = [&](Tape& t, std::vector<Var>& params) {
        CoeffVars cv;
        cv.alpha = t.leaf(alpha);
        cv.beta = t.leaf(beta);
        cv.delta = t.leaf(delta);
        cv.gamma = t.leaf(gamma);
        cv.pose = t.leaf(pose);
        params = {cv.alpha, cv.beta, cv.delta, cv.gamma, cv.pose};
        Var shape = assemble_geometry(t, m, cv.alpha, cv.beta);
        Var albedo = assemble_albedo(t, m, cv.delta);
        Projection proj = apply_pose_and_project(t, shape, cv.pose);
        Var normals = rotated_normals(t, shape, cv.pose);
        Var radiance = shade_sh(t, normals, albedo, cv.gamma);
        SplatParams sp;
        sp.sigma = m.config.sigma_scale / 24;
        Var out = splat_render(proj.uv, proj.depth, radiance, 24, sp);
        // Raw splat output: clamps would zero gradients at saturated pixels.
        return sum_all(mul(reshape(out, {4 * 24, 24}), t.constant(probe)));
    };
    std::vector<Tensor*> tensors = {&alpha, &beta, &delta, &gamma, &pose};
    Rng fd_rng(123);
    FdReport rep = fd_check(build, tensors, fd_rng, 8, 1e-3, 1e-8);
    INFO("max rel err ", rep.max_rel);
    CHECK(rep.pass);
}

TEST_CASE("landmark projection gradients check out") {
    MorphableModel m = build_toy_model(small_model(), 9);
    Rng rng(31);
    Tensor beta = rng.normal_tensor({m.config.d_exp});
    Tensor pose = Tensor::from({0.03, 0.05, -0.02, 0.01, 0.02, 0.04}, {6});
    Tensor probe = rng.normal_tensor({68, 2});
    auto build = [&](Tape& t, std::vector<Var>& params) {
        Var b = t.leaf(beta);
        Var p = t.leaf(pose);
        params = {b, p};
        Var lm = project_landmarks(t, m, t.constant(Tensor::zeros({m.config.d_id})), b, p);
        return sum_all(mul(lm, t.constant(probe)));
    };
    std::vector<Tensor*> tensors = {&beta, &pose};
    Rng fd_rng(7);
    FdReport rep = fd_check(build, tensors, fd_rng, 10, 1e-3, 1e-8);
    CHECK(rep.pass);
}

TEST_CASE("model archive round-trips bitwise and validates") {
    MorphableModel m = build_toy_model(small_model(), 13);
    std::string path = "toy_model_test.emf";
    m.save(path);
    MorphableModel r = MorphableModel::load(path);
    CHECK(std::memcmp(r.basis_exp.data(), m.basis_exp.data(), sizeof(double) * m.basis_exp.numel()) == 0);
    CHECK(std::memcmp(r.mean_albedo.data(), m.mean_albedo.data(), sizeof(double) * m.mean_albedo.numel()) == 0);
    CHECK(r.landmark_indices == m.landmark_indices);
    CHECK(r.config.d_e == m.config.d_e);
    std::remove(path.c_str());

    MorphableModel broken = build_toy_model(small_model(), 13);
    broken.basis_exp.ref2(0, 0) += 0.5;
    CHECK_THROWS_AS(broken.validate(), ContractError);
}

TEST_CASE("invalid build configs are rejected") {
    ModelConfig m = small_model();
    m.vertices = 64;
    CHECK_THROWS_AS(build_toy_model(m, 1), ConfigError);
    m = small_model();
    m.d_id = 3 * m.vertices + 1;
    CHECK_THROWS_AS(build_toy_model(m, 1), ConfigError);
    m = small_model();
    m.d_exp = 8;
    CHECK_THROWS_AS(build_toy_model(m, 1), ConfigError);
}

TEST_CASE("emotion directions: orthonormal, confined to emotion columns") {
    Tensor dirs = emotion_directions(12);
    REQUIRE(dirs.dim(0) == 8);
    for (int c = 0; c < 12; ++c) CHECK(dirs.at2(0, c) == 0.0);  // neutral row
    for (int e = 1; e < 8; ++e) {
        CHECK(dirs.at2(e, 0) == 0.0);
        CHECK(dirs.at2(e, 1) == 0.0);
        CHECK(dirs.at2(e, kBlinkCol) == 0.0);
        double n2 = 0;
        for (int c = 0; c < 12; ++c) n2 += dirs.at2(e, c) * dirs.at2(e, c);
        CHECK(std::sqrt(n2) == doctest::Approx(1.0).epsilon(1e-10));
        for (int f = e + 1; f < 8; ++f) {
            double dot = 0;
            for (int c = 0; c < 12; ++c) dot += dirs.at2(e, c) * dirs.at2(f, c);
            CHECK(std::abs(dot) < 1e-10);  // well under the 0.5 separation bound
        }
    }
    // Fixed convention: identical across calls and widths.
    Tensor again = emotion_directions(20);
    for (int e = 0; e < 8; ++e)
        for (int c = 0; c < 12; ++c) CHECK(again.at2(e, c) == dirs.at2(e, c));
}

TEST_CASE("nearest emotion direction classifier") {
    Tensor dirs = emotion_directions(12);
    Rng rng(2024);
    for (int e = 1; e < 8; ++e) {
        Tensor dev({12});
        for (int c = 0; c < 12; ++c) dev.ref(c) = 0.9 * dirs.at2(e, c) + 0.05 * rng.normal();
        CHECK(nearest_emotion_direction(dev, dirs) == e);
    }
    Tensor tiny = Tensor::zeros({12});
    tiny.ref(5) = 1e-14;
    CHECK(nearest_emotion_direction(tiny, dirs) == 0);
    // Speech-column content must not sway the verdict.
    Tensor speechy = Tensor::zeros({12});
    speechy.ref(0) = 5.0;
    speechy.ref(1) = -3.0;
    CHECK(nearest_emotion_direction(speechy, dirs) == 0);
}
