#pragma once

#include <string>
#include <vector>

#include "emoface/audio2face.hpp"

namespace emoface {

// ---- Image quality -------------------------------------------------------

// 10 * log10(1 / MSE) over all elements; both inputs in [0,1]. Identical
// images (and anything past the cap) report 100 dB.
double psnr(const Tensor& a, const Tensor& b);

// Mean local SSIM over 11x11 Gaussian windows (sigma 1.5, k1=0.01, k2=0.03)
// of the internal grayscale conversion; valid windows only.
double ssim(const Tensor& a, const Tensor& b);

// ---- Structural accuracy -------------------------------------------------

// Mean L2 over the mouth subset of projected landmarks, normalized image
// units. Texture and lighting coefficients cannot move landmarks.
double lmd(const MorphableModel& m, const Coefficients& a, const Coefficients& b);

// ---- Emotion feature distance --------------------------------------------

// Evaluation-side recognizer; scoring with the loss-side recognizer would let
// the training signal grade itself, so an equal fit seed is rejected.
EmotionRecognizer make_eval_recognizer(const JointSpace& eval_space, std::uint64_t fit_seed,
                                       const EmotionRecognizer& loss_side);

// L2 between the recognizer's penultimate image features of the two images.
double emotion_feature_distance(const EmotionRecognizer& phi_eval, const Tensor& a,
                                const Tensor& b);

// ---- Intensity embedding export ------------------------------------------

struct IntensityRow {
    std::string prompt;
    int mu = 1;
    int clip_id = 0;
    Tensor sigma;  // [d_model], the updated intensity token
};

// One row per (prompt, clip): the convertor's updated intensity token when
// the clip's audio is driven by that prompt at the clip's labeled intensity.
std::vector<IntensityRow> export_intensity_embeddings(const Stage1System& sys,
                                                      const JointSpace& space,
                                                      const DatasetManifest& data,
                                                      const std::vector<std::string>& prompts);

// Tab-separated rows: prompt, mu, clip, then the vector entries.
void save_intensity_rows(const std::vector<IntensityRow>& rows, const std::string& path);

// ---- Evaluation report ----------------------------------------------------

struct ClipEval {
    int clip_id = 0;
    std::string modality;  // "text" | "image" | "audio"
    int frames = 0;
    double psnr = 0, ssim = 0, lmd = 0, efd = 0;
};

struct ModalityAggregate {
    std::string modality;
    int clips = 0;
    double psnr = 0, ssim = 0, lmd = 0, efd = 0;  // plain means over clips
};

struct EvalReport {
    std::vector<ClipEval> clips;
    std::vector<std::string> not_computed;  // metrics needing external weights

    ModalityAggregate aggregate(const std::string& modality) const;
    std::vector<std::string> modalities() const;  // stable first-seen order

    std::string to_records() const;  // machine-parseable key=value lines
    std::string to_table() const;    // human-readable summary
    void save(const std::string& path) const;
};

}  // namespace emoface
