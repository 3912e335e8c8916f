#include "emoface/audio.hpp"

#include <fftw3.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <memory>

namespace emoface {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void put_u32(std::vector<unsigned char>& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

void put_u16(std::vector<unsigned char>& b, std::uint16_t v) {
    b.push_back(static_cast<unsigned char>(v & 0xff));
    b.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
}

std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t get_u16(const unsigned char* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

}  // namespace

void write_wav(const std::string& path, const Waveform& w) {
    std::vector<unsigned char> out;
    const std::uint32_t n = static_cast<std::uint32_t>(w.samples.size());
    const std::uint32_t data_bytes = n * 2;
    out.insert(out.end(), {'R', 'I', 'F', 'F'});
    put_u32(out, 36 + data_bytes);
    out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
    put_u32(out, 16);
    put_u16(out, 1);  // PCM
    put_u16(out, 1);  // mono
    put_u32(out, static_cast<std::uint32_t>(w.sample_rate));
    put_u32(out, static_cast<std::uint32_t>(w.sample_rate * 2));
    put_u16(out, 2);
    put_u16(out, 16);
    out.insert(out.end(), {'d', 'a', 't', 'a'});
    put_u32(out, data_bytes);
    for (double s : w.samples) {
        double c = s < -1.0 ? -1.0 : (s > 1.0 ? 1.0 : s);
        auto q = static_cast<std::int16_t>(std::lround(c * 32767.0));
        put_u16(out, static_cast<std::uint16_t>(q));
    }
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw IoError("cannot write " + path);
    if (std::fwrite(out.data(), 1, out.size(), f.get()) != out.size())
        throw IoError("short write to " + path);
}

Waveform read_wav(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw IoError("cannot read " + path);
    std::fseek(f.get(), 0, SEEK_END);
    long size = std::ftell(f.get());
    std::fseek(f.get(), 0, SEEK_SET);
    if (size < 44) throw IoError(path + ": not a wav file");
    std::vector<unsigned char> buf(static_cast<size_t>(size));
    if (std::fread(buf.data(), 1, buf.size(), f.get()) != buf.size())
        throw IoError("short read from " + path);
    if (std::memcmp(buf.data(), "RIFF", 4) != 0 || std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
        throw IoError(path + ": not a wav file");
    Waveform w;
    bool have_fmt = false;
    size_t pos = 12;
    while (pos + 8 <= buf.size()) {
        std::uint32_t chunk_len = get_u32(buf.data() + pos + 4);
        const unsigned char* body = buf.data() + pos + 8;
        if (pos + 8 + chunk_len > buf.size()) throw IoError(path + ": truncated chunk");
        if (std::memcmp(buf.data() + pos, "fmt ", 4) == 0) {
            if (chunk_len < 16) throw IoError(path + ": bad fmt chunk");
            if (get_u16(body) != 1 || get_u16(body + 2) != 1 || get_u16(body + 14) != 16)
                throw IoError(path + ": only PCM16 mono is supported");
            w.sample_rate = static_cast<int>(get_u32(body + 4));
            have_fmt = true;
        } else if (std::memcmp(buf.data() + pos, "data", 4) == 0) {
            if (!have_fmt) throw IoError(path + ": data chunk before fmt");
            w.samples.resize(chunk_len / 2);
            for (size_t i = 0; i < w.samples.size(); ++i) {
                auto v = static_cast<std::int16_t>(get_u16(body + 2 * i));
                w.samples[i] = v / 32767.0;
            }
            return w;
        }
        pos += 8 + chunk_len + (chunk_len & 1);
    }
    throw IoError(path + ": no data chunk");
}

std::vector<double> mel_filter_centers(const MelParams& p) {
    const double mel_max = hz_to_mel(p.sample_rate / 2.0);
    std::vector<double> centers(p.bins);
    for (int k = 0; k < p.bins; ++k) centers[k] = mel_to_hz((k + 1) * mel_max / (p.bins + 1));
    return centers;
}

Tensor compute_mel(const std::vector<double>& samples, const MelParams& p) {
    if (samples.empty()) throw ContractError("compute_mel: empty waveform");
    const int n_fft = p.fft_size, hop = p.hop, half = n_fft / 2;
    const int n_bins = n_fft / 2 + 1;
    const int frames = static_cast<int>((samples.size() + hop - 1) / hop);
    const auto n = static_cast<std::int64_t>(samples.size());

    // Reflect-padded sample accessor (period guards tiny inputs).
    auto sample_at = [&](std::int64_t i) -> double {
        while (i < 0 || i >= n) {
            if (i < 0) i = -i;
            if (i >= n) i = 2 * (n - 1) - i;
            if (n == 1) return samples[0];
        }
        return samples[static_cast<size_t>(i)];
    };

    std::vector<double> window(n_fft);
    for (int i = 0; i < n_fft; ++i)
        window[i] = 0.5 - 0.5 * std::cos(2.0 * 3.14159265358979323846 * i / n_fft);

    // Triangular mel bank over FFT bin frequencies.
    const double mel_max = hz_to_mel(p.sample_rate / 2.0);
    std::vector<double> edges(p.bins + 2);
    for (int k = 0; k < p.bins + 2; ++k) edges[k] = mel_to_hz(k * mel_max / (p.bins + 1));
    std::vector<std::vector<std::pair<int, double>>> bank(p.bins);
    for (int k = 0; k < p.bins; ++k) {
        double lo = edges[k], mid = edges[k + 1], hi = edges[k + 2];
        for (int b = 0; b < n_bins; ++b) {
            double f = b * static_cast<double>(p.sample_rate) / n_fft;
            double wgt = 0;
            if (f > lo && f < mid)
                wgt = (f - lo) / (mid - lo);
            else if (f >= mid && f < hi)
                wgt = (hi - f) / (hi - mid);
            if (wgt > 0) bank[k].emplace_back(b, wgt);
        }
    }

    double* in = fftw_alloc_real(n_fft);
    fftw_complex* out = fftw_alloc_complex(n_bins);
    fftw_plan plan = fftw_plan_dft_r2c_1d(n_fft, in, out, FFTW_ESTIMATE);

    Tensor mel({frames, p.bins});
    std::vector<double> mag(n_bins);
    for (int t = 0; t < frames; ++t) {
        std::int64_t center = static_cast<std::int64_t>(t) * hop;
        for (int i = 0; i < n_fft; ++i) in[i] = sample_at(center - half + i) * window[i];
        fftw_execute(plan);
        for (int b = 0; b < n_bins; ++b) mag[b] = std::hypot(out[b][0], out[b][1]);
        for (int k = 0; k < p.bins; ++k) {
            double acc = 0;
            for (auto [b, wgt] : bank[k]) acc += wgt * mag[b];
            mel.ref2(t, k) = std::log(acc > p.log_floor ? acc : p.log_floor);
        }
    }
    fftw_destroy_plan(plan);
    fftw_free(in);
    fftw_free(out);
    return mel;
}

Tensor speech_band_envelope(const Tensor& mel, const MelParams& p, double lo_hz, double hi_hz) {
    auto centers = mel_filter_centers(p);
    std::vector<int> cols;
    for (int k = 0; k < p.bins; ++k)
        if (centers[k] >= lo_hz && centers[k] < hi_hz) cols.push_back(k);
    if (cols.empty()) throw ContractError("speech_band_envelope: empty band");
    const int t_len = mel.dim(0);
    Tensor env({t_len});
    for (int t = 0; t < t_len; ++t) {
        double acc = 0;
        for (int k : cols) acc += mel.at2(t, k);
        env.ref(t) = acc / cols.size();
    }
    return env;
}

Tensor smooth_rows(const Tensor& signal, int taps) {
    if (taps % 2 == 0 || taps < 1) throw ContractError("smooth_rows: taps must be odd");
    const int t_len = signal.rows2d(), width = signal.cols2d();
    const int half = taps / 2;
    Tensor out(signal.shape());
    auto idx = [&](int t) {
        while (t < 0 || t >= t_len) {
            if (t_len == 1) return 0;
            if (t < 0) t = -t;
            if (t >= t_len) t = 2 * (t_len - 1) - t;
        }
        return t;
    };
    for (int t = 0; t < t_len; ++t)
        for (int c = 0; c < width; ++c) {
            double acc = 0;
            for (int k = -half; k <= half; ++k) acc += signal.at2(idx(t + k), c);
            out.ref2(t, c) = acc / taps;
        }
    return out;
}

}  // namespace emoface
