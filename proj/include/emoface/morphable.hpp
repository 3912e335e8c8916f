#pragma once

#include <string>
#include <vector>

#include "emoface/config.hpp"
#include "emoface/tape.hpp"

namespace emoface {

// Linear face model: vertex positions/colors are mean plus basis-weighted
// offsets. Bases have orthonormal columns; expression columns are spatially
// localized to disjoint vertex zones (mouth/eye/brow/nose+cheek) so single
// coefficients have provably local geometric effect.
struct MorphableModel {
    Tensor mean_shape;   // [V,3], face roughly in [-1,1]^3, -z toward camera
    Tensor mean_albedo;  // [V,3] in [0,1]
    Tensor basis_id;     // [3V, D_id]
    Tensor basis_exp;    // [3V, D_exp]
    Tensor basis_tex;    // [3V, D_tex]
    std::vector<int> landmark_indices;        // 68 unique vertex ids
    std::vector<int> mouth_landmark_indices;  // positions 48..67 of the 68
    ModelConfig config;
    std::uint64_t seed = 0;

    int vertices() const { return mean_shape.dim(0); }

    void save(const std::string& path) const;
    static MorphableModel load(const std::string& path);
    void validate() const;  // invariants; throws ContractError
};

// Expression basis column conventions used by the synthetic data generator.
inline constexpr int kSpeechCols[2] = {0, 1};  // driven by the audio envelope
inline constexpr int kBlinkCol = 2;
inline constexpr int kEmotionColStart = 3;  // emotion directions span cols 3..11
inline constexpr int kEmotionColCount = 9;

// The 8 basic emotion labels (index 0 is neutral).
const std::vector<std::string>& emotion_labels();
int emotion_index(const std::string& label);  // throws ConfigError if unknown

// Fixed unit directions in expression-coefficient space, one row per label;
// the neutral row is zero, the rest are exactly orthonormal and supported on
// the emotion columns only. Deterministic, independent of the run seed.
Tensor emotion_directions(int d_exp);

// Nearest-direction label: neutral when no direction reaches cosine 0.5,
// else the argmax-cosine row.
int nearest_emotion_direction(const Tensor& beta_deviation, const Tensor& directions);

MorphableModel build_toy_model(const ModelConfig& config, std::uint64_t seed);

// Plain-tensor coefficient block (data side).
struct Coefficients {
    Tensor alpha, beta, delta, gamma, pose;
};

// Tape-staged coefficients (graph side).
struct CoeffVars {
    Var alpha, beta, delta, gamma, pose;
};

CoeffVars stage_coeffs(Tape& t, const Coefficients& c, bool requires_grad);
Coefficients zero_coeffs(const ModelConfig& m);

// S = mean + B_id a + B_exp b, exactly linear; [V,3].
Var assemble_geometry(Tape& t, const MorphableModel& m, Var alpha, Var beta);
// T = clamp01(mean + B_tex d); [V,3].
Var assemble_albedo(Tape& t, const MorphableModel& m, Var delta);

struct Projection {
    Var uv;     // [V,2] normalized image coords
    Var depth;  // [V], smaller is closer
};

// ZYX Euler rotation, 3-D translation, weak-perspective projection with
// focal 0.9 and global scale f/(1+tz).
Projection apply_pose_and_project(Tape& t, Var vertices, Var pose);

// Outward normals of the rotated shape: normalize((v - centroid) R^T).
Var rotated_normals(Tape& t, Var vertices, Var pose);

// Band-2 spherical harmonics radiance per channel, clamped to [0, inf).
Var shade_sh(Tape& t, Var normals, Var albedo, Var gamma);

struct RenderOut {
    Var image;  // [3,H,W] in [0,1]
    Var mask;   // [1,H,W] in [0,1), exactly 0 off-support
};

RenderOut render(Tape& t, const MorphableModel& m, const CoeffVars& c, int resolution);

// I^3d = M * I^rd + (1-M) * I, per pixel.
Var blend(Tape& t, Var photo, const RenderOut& r);

Var project_landmarks(Tape& t, const MorphableModel& m, Var alpha, Var beta, Var pose);  // [68,2]

// Convenience: value-only render into plain tensors.
struct RenderedFrame {
    Tensor image;  // [3,H,W]
    Tensor mask;   // [1,H,W]
};
RenderedFrame render_frame(const MorphableModel& m, const Coefficients& c, int resolution);
Tensor landmarks_of(const MorphableModel& m, const Coefficients& c);  // [68,2]

}  // namespace emoface
