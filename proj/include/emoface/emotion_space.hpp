#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "emoface/nn.hpp"
#include "emoface/synthdata.hpp"

namespace emoface {

// Frozen joint text/image emotion space: eight near-orthogonal unit anchors
// plus a small conv image encoder fitted once against them. Immutable after
// fit_joint_space; safe to share read-only.
class JointSpace {
public:
    Tensor anchors;  // [8, d_e], unit rows, pairwise |cos| < 0.3
    int d_e = 0;
    int resolution = 0;

    // Frozen image-encoder weights (three stride-2 convs, flatten, linear).
    Tensor w1, b1, w2, b2, w3, b3, wl, bl;

    // Anchor lookup with '+'-arithmetic: "happy" or "happy+surprised"
    // (equal-weight normalized sum). Unknown labels raise ConfigError.
    Tensor text_embed(const std::string& prompt) const;
    // Normalized weighted anchor sum; weights may be any reals with a
    // nonzero resultant.
    Tensor text_embed(const std::vector<std::pair<std::string, double>>& weighted) const;

    // Frozen forward pass of a [3,res,res] face; unit-norm [d_e].
    Tensor image_embed(const Tensor& face) const;

    Tensor anchor(int emotion_idx) const;  // [d_e]

    void save(const std::string& path) const;
    static JointSpace load(const std::string& path);
    void validate() const;
};

struct JointFitOptions {
    int d_e = 64;
    int steps = 4000;
    int batch = 8;
    double lr = 1e-3;
    int pool = 4000;            // training frames sampled from the dataset
    int frames_per_clip = 12;   // cap per clip when building the pool
};

// Constructs anchors (QR of a seeded Gaussian), fits the image encoder to
// regress the matching anchor under cosine loss, then freezes everything.
// Deterministic in (dataset, seed, options).
JointSpace fit_joint_space(const DatasetManifest& m, std::uint64_t seed,
                           const JointFitOptions& opt = {});

// Backbone activations of the frozen image encoder before its linear head;
// [1, F]. The emotion-consistency loss and the emotion-feature distance
// compare images in this space.
Var image_features(Tape& t, Var face, const JointSpace& s);
Tensor image_features(const JointSpace& s, const Tensor& face);

struct ImageEmbedEval {
    double accuracy = 0;  // nearest-anchor classification
    double mean_cos = 0;  // cosine to the matching anchor
    int count = 0;
};
// Embeds sampled frames from train or held-out identities.
ImageEmbedEval evaluate_image_embeddings(const JointSpace& space, const DatasetManifest& m,
                                         bool held_out, int max_frames, Rng& rng);

// Trainable mel-clip emotion encoder: class token + Transformer stack,
// L2-normalized class-token readout.
class AudioEmotionEncoder {
public:
    AudioEmotionEncoder() = default;
    AudioEmotionEncoder(ParamStore& ps, const std::string& prefix, int window, int mel_bins,
                        int d_model, int layers, int heads, int d_e, Rng& rng);

    // [window, mel_bins] -> [1, d_e] unit row; differentiable.
    Var forward(Tape& t, Var mel) const;
    // Inference convenience on plain tensors; [d_e].
    Tensor embed(const Tensor& mel) const;

    int window() const { return window_; }
    int d_e() const { return d_e_; }

private:
    int window_ = 0, mel_bins_ = 0, d_model_ = 0, d_e_ = 0;
    Param* cls_ = nullptr;  // [1, d_model]
    Param* pos_ = nullptr;  // [window+1, d_model]
    Linear in_proj_, out_proj_;
    LayerNorm final_ln_;
    std::vector<TransformerLayer> layers_;
};

enum class ZEmoMode { train_concat, single_modality };

// Training: interleaves (text, audio, image) per sample into a 3B-row batch
// so every modality sees the same downstream supervision. Test: pass-through
// of exactly one modality.
Var assemble_z_emo(Tape& t, ZEmoMode mode, std::optional<Var> e_text, std::optional<Var> e_audio,
                   std::optional<Var> e_img);
Tensor assemble_z_emo(ZEmoMode mode, std::optional<Tensor> e_text, std::optional<Tensor> e_audio,
                      std::optional<Tensor> e_img);

// Mean over rows of (1-cos(e_img, e_audio)) + (1-cos(e_text, e_audio)).
// Gradients flow to e_audio only; the text/image sides are frozen spaces.
Var clip_alignment_loss(Tape& t, Var e_audio, const Tensor& e_text, const Tensor& e_img);

}  // namespace emoface
