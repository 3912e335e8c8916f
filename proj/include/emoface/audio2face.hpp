#pragma once

#include <memory>
#include <string>
#include <vector>

#include "emoface/checkpoint.hpp"
#include "emoface/emotion_space.hpp"
#include "emoface/morphable.hpp"

namespace emoface {

enum class EacBody { transformer, gru, mlp };
EacBody eac_body_from_string(const std::string& name);  // ConfigError on unknown

// Loss-side emotion recognizer: a fitted joint space viewed through its
// penultimate conv features. The frozen flag is a contract, not a cache
// state; losses refuse an unfrozen recognizer.
struct EmotionRecognizer {
    JointSpace space;
    std::uint64_t fit_seed = 0;
    bool frozen = false;
};
EmotionRecognizer freeze_recognizer(JointSpace space, std::uint64_t fit_seed);

// Sequence model mapping one mel window + emotion code + intensity scalar to
// per-frame expression coefficients. The intensity token occupies sequence
// position 0; audio frames fill positions 1..T.
struct EacModel {
    int t_window = 0, mel_bins = 0, d_model = 0, d_e = 0, d_exp = 0;
    EacBody body = EacBody::transformer;
    bool onehot = false;

    Linear audio_proj;             // mel_bins -> d_model
    Linear emo_proj1, emo_proj2;   // d_e -> d_model -> d_model, ReLU between
    Linear onehot_proj;            // 8 -> d_model (one-hot encoding variant)
    Param* pos = nullptr;          // [T+1, d_model]
    Param* intensity_base = nullptr;  // [1, d_model]
    std::vector<TransformerLayer> tf_layers;
    LayerNorm tf_final;
    Gru gru;                       // gru body
    Linear mlp1, mlp2;             // mlp body: per-position, no cross-time mixing
    Linear head;                   // d_model -> d_exp

    EacModel() = default;
    EacModel(ParamStore& ps, const RunConfig& cfg, Rng& rng);
};

// token(mu) = mu * base, exactly.
Var make_intensity_token(Tape& t, Var base, double mu);

struct EacForwardOut {
    Var sigma_hat;  // [1, d_model], the updated intensity token
    Var beta_hat;   // [T, d_exp]
};

// mel [T, mel_bins]; z_emo [1, d_e] (joint) or [1, 8] (one-hot); mu >= 0.
EacForwardOut eac_forward(Tape& t, const EacModel& m, Var mel, Var z_emo, double mu);

// One-hot emotion row for the encoding ablation; [1, 8].
Tensor emotion_onehot(int emotion_idx);

// ---- Stage-1 losses ----------------------------------------------------

// || I_rd - M * I ||_2 over all pixels; the renderer leaves both the image
// and the mask exactly zero off the face support, so the residual is
// face-local without further masking.
Var render_reconstruction_loss(Tape& t, Var photo, const RenderOut& r);

// Sum over the 68 landmarks of per-point Euclidean distance between the
// projections of the two coefficient sets.
Var landmark_loss(Tape& t, const MorphableModel& m, const Coefficients& gt,
                  const CoeffVars& hat);

// || beta_gt - beta_hat ||_2, a plain global norm.
Var expression_regularization_loss(Tape& t, Var beta_gt, Var beta_hat);

// Renders `hat`, composites it onto the photo through the rendered mask, and
// measures the feature-space distance to the photo under the frozen
// recognizer.
Var emotion_consistency_loss(Tape& t, const EmotionRecognizer& rec, Var photo,
                             const MorphableModel& m, const CoeffVars& hat);

struct EacLossWeights {
    double clip = 1.0;
    double emo = 1.0;
    double rec = 100.0;
    double lm = 0.1;
    double reg = 0.01;
};
EacLossWeights eac_weights_from(const EacConfig& c);

struct EacLossParts {
    Var clip, emo, rec, lm, reg;
};

// Weighted sum; negative weights raise ConfigError, a non-finite part raises
// NumericError naming the term.
Var eac_total_loss(Tape& t, const EacLossParts& parts, const EacLossWeights& w);

// ---- Stage-1 training --------------------------------------------------

// The audio emotion encoder trains jointly with the convertor, so both live
// in one parameter store and one checkpoint.
struct Stage1System {
    ParamStore ps;
    EacModel eac;
    AudioEmotionEncoder audio_enc;

    Stage1System(const RunConfig& cfg, std::uint64_t seed);
};

struct EacTrainOptions {
    std::string out_dir;      // checkpoints + logs under <out_dir>; empty = no files
    std::string resume_from;  // checkpoint path; empty = fresh start
};

struct EacTrainResult {
    std::vector<double> losses;  // total loss per step actually run
    std::string checkpoint_path;
    std::string log_path;
    std::int64_t steps_run = 0;
};

// Deterministic in (data, space, cfg, seed); per-step sampling is derived
// from (seed, step) alone so a resumed run continues the exact trajectory.
EacTrainResult train_eac(Stage1System& sys, const DatasetManifest& data,
                         const JointSpace& space, const EmotionRecognizer& phi_emo,
                         const RunConfig& cfg, std::uint64_t seed,
                         const EacTrainOptions& opt = {});

struct EacEval {
    double r2 = 0;              // pooled per-frame beta R^2, text-conditioned
    double mean_cos_audio = 0;  // cos(e_audio, matching text anchor)
    int clips = 0;
};

// Drives each sampled clip with its emotion's text anchor and scores the
// predicted coefficients against stored ground truth.
EacEval eval_eac(const Stage1System& sys, const JointSpace& space, const DatasetManifest& data,
                 bool held_out, int max_clips, std::uint64_t seed);

}  // namespace emoface
