#pragma once

#include <string>
#include <utility>
#include <vector>

#include "emoface/audio.hpp"
#include "emoface/config.hpp"
#include "emoface/morphable.hpp"

namespace emoface {

struct ClipInfo {
    int id = 0;
    int identity = 0;
    std::string emotion;
    int intensity = 1;  // mu; neutral clips always 1
    int take = 0;       // clip index within (identity, emotion, mu)
    int frames = 0;
    std::string dir;  // relative to dataset root
};

struct DatasetManifest {
    std::string root;  // absolute dataset directory
    std::string version = "1";
    std::uint64_t seed = 0;
    int frames_per_clip = 0;
    int resolution = 0;
    std::vector<int> train_identities, held_out_identities;
    std::vector<ClipInfo> clips;

    std::vector<int> clips_of_identity(int identity) const;
    const ClipInfo& clip(int id) const;
    bool is_held_out(int identity) const;

    void save() const;  // writes <root>/manifest.json
    static DatasetManifest load(const std::string& root);
};

struct ClipSample {
    Tensor mel;   // [T,80]
    Tensor beta;  // [T,d_exp]
    Tensor pose;  // [T,6]
    Tensor alpha, delta, gamma;  // identity-level
    std::vector<Tensor> frames;  // T x [3,H,W], empty unless requested
    std::string emotion;
    int intensity = 1;
    int identity = 0;
};

// The fixed composition background shared by every clip.
Tensor background_image(int resolution);

// Emotion-offset scale per intensity unit; beta = speech + mu * this * dir.
inline constexpr double kEmotionAmp = 0.5;

// Carrier tones that stamp (emotion, mu) into the waveform's upper band,
// spectrally disjoint from the speech band the mouth map reads.
std::pair<double, double> emotion_carrier_hz(int emotion_idx);

DatasetManifest gen_dataset(const RunConfig& cfg, std::uint64_t seed);

ClipSample load_clip(const DatasetManifest& m, int clip_id, int t0, int length,
                     bool with_frames = false);

// Source/driving clip ids: same identity, different emotion labels.
std::pair<int, int> make_pair(const DatasetManifest& m, int identity, Rng& rng);

// Deterministic frame composition: render + blend over the fixed background,
// quantized to 8 bits exactly as stored.
Tensor composite_frame(const MorphableModel& model, const Coefficients& c, const Tensor& background);
std::vector<unsigned char> encode_ppm(const Tensor& image01);
Tensor decode_ppm(const std::vector<unsigned char>& bytes);
std::vector<unsigned char> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<unsigned char>& bytes);

// Re-renders `count` randomly chosen clips from stored coefficients and
// compares every frame byte-for-byte with the files on disk.
bool self_certify(const DatasetManifest& m, const MorphableModel& model, int count, Rng& rng,
                  std::string* first_failure = nullptr);

MorphableModel load_dataset_model(const DatasetManifest& m);

}  // namespace emoface
