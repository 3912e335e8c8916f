#pragma once

#include <string>
#include <vector>

#include "emoface/core.hpp"

namespace emoface {

struct Waveform {
    std::vector<double> samples;  // mono, nominally in [-1,1]
    int sample_rate = 16000;
};

// PCM16 mono only; anything else is an IoError.
Waveform read_wav(const std::string& path);
void write_wav(const std::string& path, const Waveform& w);

struct MelParams {
    int sample_rate = 16000;
    int fft_size = 1280;
    int hop = 160;
    int bins = 80;
    double log_floor = 1e-5;
};

// Centered magnitude STFT (Hann window, reflect padding) projected onto a
// triangular mel bank, log-compressed. ceil(len/hop) frames; [T, bins].
Tensor compute_mel(const std::vector<double>& samples, const MelParams& p = {});

// Peak frequency (Hz) of each mel filter, for energy-location oracles.
std::vector<double> mel_filter_centers(const MelParams& p = {});

// Frame-rate log energy of the speech band (mean of mel bins whose center
// lies inside [lo_hz, hi_hz)); the synthetic generator drives the mouth from
// a smoothed version of this signal. [T].
Tensor speech_band_envelope(const Tensor& mel, const MelParams& p = {}, double lo_hz = 200.0,
                            double hi_hz = 3600.0);

// Symmetric moving average with reflect padding; taps must be odd.
Tensor smooth_rows(const Tensor& signal, int taps);

}  // namespace emoface
