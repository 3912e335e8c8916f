#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "emoface/core.hpp"

namespace emoface {

// Face model and renderer knobs. Paper-scale dims (80/64/80, 512px) stay
// reachable through the same fields.
struct ModelConfig {
    int vertices = 1024;
    int d_id = 16;
    int d_exp = 12;
    int d_tex = 16;
    int d_e = 64;  // joint emotion-space dimension
    int resolution = 64;
    double sigma_scale = 1.5;  // splat sigma = sigma_scale / resolution
    double tau_z = 0.1;
    double eps_bg = 1e-2;
};

struct DataConfig {
    int identities = 12;
    int held_out_identities = 3;
    int clips_per_combo = 2;  // per (identity, emotion, intensity)
    int frames_per_clip = 96;
    int window = 32;  // T, training window length
    int sample_rate = 16000;
    int fft_size = 1280;
    int hop = 160;
    int mel_bins = 80;
};

struct EacConfig {
    int d_model = 128;
    int layers = 4;
    int heads = 4;
    std::string body = "transformer";             // transformer | gru | mlp
    std::string emotion_encoding = "joint";       // joint | onehot
    double lr = 0.0002;
    int batch = 16;
    int steps = 600;
    int frames_per_sample = 4;  // rendered frames for pixel-level losses
    double grad_clip = 1.0;
    double lambda_clip = 1.0;
    double lambda_emo = 1.0;
    double lambda_rec = 100.0;
    double lambda_lm = 0.1;
    double lambda_reg = 0.01;
    bool use_emo_loss = true;  // ablation switch (w/o L_emo)
};

struct HefConfig {
    int blocks = 3;     // N
    int base_size = 8;  // coarsest level, output = base * 2^N
    std::vector<int> channels = {256, 128, 64, 32};  // per level, coarse to fine
    int d_sty = 128;
    double lr = 0.002;
    int batch_frames = 4;
    int steps = 600;
    double lambda_rec = 5.0;
    double lambda_p = 5.0;
    double lambda_adv = 1.0;
    double r1_gamma = 10.0;
    int r1_every = 16;
    std::string flow_mode = "full";  // full | no_res | no_hie
};

struct TrainConfig {
    int log_every = 10;
    int ckpt_every = 200;
};

struct EvalConfig {
    int max_clips = 24;        // held-out clips per evaluation
    int frames_per_clip = 16;  // frames sampled per clip
};

struct RunConfig {
    ModelConfig model;
    DataConfig data;
    EacConfig eac;
    HefConfig hef;
    TrainConfig train;
    EvalConfig eval;
    std::uint64_t seed = 1234;
    std::string out_dir = "out";
};

// Strict JSON round trip: unknown keys are rejected with the offending
// dotted path; missing keys keep their defaults.
RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::string& path);
std::string serialize_config(const RunConfig& c);
void save_config(const RunConfig& c, const std::string& path);

// Default output root: $EMOFACE_OUT_ROOT when set, else the config value.
std::string resolve_out_dir(const RunConfig& c);

void validate_config(const RunConfig& c);

}  // namespace emoface
