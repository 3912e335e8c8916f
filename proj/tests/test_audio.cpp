#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "doctest.h"
#include "emoface/audio.hpp"

using namespace emoface;

namespace {

std::string temp_path(const char* stem) {
    return (std::filesystem::temp_directory_path() / stem).string();
}

std::vector<double> tone(double hz, double amp, int n, int sr = 16000) {
    std::vector<double> s(n);
    for (int i = 0; i < n; ++i) s[i] = amp * std::sin(2 * 3.14159265358979323846 * hz * i / sr);
    return s;
}

}  // namespace

TEST_CASE("mel frame count is ceil(len/hop) and bins match params") {
    Tensor m = compute_mel(std::vector<double>(16000, 0.0));
    CHECK(m.dim(0) == 100);
    CHECK(m.dim(1) == 80);
    CHECK(compute_mel(std::vector<double>(16001, 0.0)).dim(0) == 101);
    CHECK(compute_mel(std::vector<double>(159, 0.0)).dim(0) == 1);
    CHECK_THROWS_AS(compute_mel({}), ContractError);
}

TEST_CASE("silence hits the log floor in every cell") {
    MelParams p;
    Tensor m = compute_mel(std::vector<double>(3200, 0.0), p);
    const double floor_val = std::log(p.log_floor);
    for (std::int64_t i = 0; i < m.numel(); ++i) CHECK(m.at(i) == floor_val);
}

TEST_CASE("pure tone peaks at the filter whose center is nearest") {
    MelParams p;
    auto centers = mel_filter_centers(p);
    REQUIRE(static_cast<int>(centers.size()) == p.bins);
    for (double hz : {440.0, 1000.0, 2500.0, 5000.0}) {
        Tensor m = compute_mel(tone(hz, 0.5, 8000), p);
        std::vector<double> mean(p.bins, 0.0);
        for (int t = 0; t < m.dim(0); ++t)
            for (int k = 0; k < p.bins; ++k) mean[k] += m.at2(t, k);
        int peak = 0;
        for (int k = 1; k < p.bins; ++k)
            if (mean[k] > mean[peak]) peak = k;
        int nearest = 0;
        for (int k = 1; k < p.bins; ++k)
            if (std::abs(centers[k] - hz) < std::abs(centers[nearest] - hz)) nearest = k;
        INFO("hz=", hz, " peak=", peak, " nearest=", nearest);
        CHECK(std::abs(peak - nearest) <= 1);
    }
}

TEST_CASE("doubling amplitude shifts the peak bin by exactly log 2") {
    Tensor a = compute_mel(tone(750.0, 0.25, 6400));
    Tensor b = compute_mel(tone(750.0, 0.50, 6400));
    int peak = 0;
    for (int k = 1; k < 80; ++k)
        if (a.at2(20, k) > a.at2(20, peak)) peak = k;
    for (int t = 5; t < 35; ++t)
        CHECK(b.at2(t, peak) - a.at2(t, peak) == doctest::Approx(std::log(2.0)).epsilon(1e-9));
}

TEST_CASE("band envelope equals the manual mean of in-band filters") {
    MelParams p;
    auto centers = mel_filter_centers(p);
    Rng rng(41);
    Tensor mel = rng.uniform_tensor({7, p.bins}, -3.0, 3.0);
    Tensor env = speech_band_envelope(mel, p, 200.0, 3600.0);
    REQUIRE(env.dim(0) == 7);
    for (int t = 0; t < 7; ++t) {
        double acc = 0;
        int cnt = 0;
        for (int k = 0; k < p.bins; ++k)
            if (centers[k] >= 200.0 && centers[k] < 3600.0) {
                acc += mel.at2(t, k);
                ++cnt;
            }
        REQUIRE(cnt > 10);
        CHECK(env.at(t) == doctest::Approx(acc / cnt).epsilon(1e-12));
    }
    CHECK_THROWS_AS(speech_band_envelope(mel, p, 100.0, 101.0), ContractError);
}

TEST_CASE("carriers above the band barely perturb a band-filling envelope") {
    // Band-filling speech keeps every in-band filter well above the log
    // floor, so out-of-band carrier leakage is masked. A pure-tone stand-in
    // would leave most filters at the floor and fail this by design.
    Rng rng(99);
    std::vector<double> speech(6400, 0.0);
    for (int k = 0; k < 40; ++k) {
        double hz = rng.uniform(300.0, 3000.0), ph = rng.uniform(0.0, 6.28), a = rng.uniform(0.5, 1.0);
        for (int i = 0; i < 6400; ++i)
            speech[i] += 0.05 * a * std::sin(2 * 3.14159265358979323846 * hz * i / 16000.0 + ph);
    }
    // Boundary-tapered carrier, as the clip generator injects it; an abrupt
    // carrier would splatter across the spectrum in reflect-padded edge frames.
    std::vector<double> mixed = speech;
    for (int i = 0; i < 6400; ++i) {
        double edge = std::min(i, 6399 - i);
        double taper = edge >= 400 ? 1.0 : 0.5 * (1 - std::cos(3.14159265358979323846 * edge / 400));
        mixed[i] += 0.12 * taper * std::sin(2 * 3.14159265358979323846 * 5200.0 * i / 16000.0);
    }
    Tensor ea = speech_band_envelope(compute_mel(speech));
    Tensor eb = speech_band_envelope(compute_mel(mixed));
    for (int t = 0; t < ea.dim(0); ++t) CHECK(std::abs(ea.at(t) - eb.at(t)) < 0.02);
}

TEST_CASE("wav io round-trips quantized samples bitwise") {
    Rng rng(7);
    Waveform w;
    w.samples.resize(500);
    for (auto& s : w.samples) s = rng.uniform(-0.99, 0.99);
    const std::string path = temp_path("emoface_test_rt.wav");
    write_wav(path, w);
    Waveform r = read_wav(path);
    REQUIRE(r.samples.size() == w.samples.size());
    CHECK(r.sample_rate == 16000);
    for (size_t i = 0; i < w.samples.size(); ++i) {
        double q = std::lround(w.samples[i] * 32767.0) / 32767.0;
        CHECK(r.samples[i] == q);
    }
    const std::string path2 = temp_path("emoface_test_rt2.wav");
    write_wav(path2, r);
    Waveform r2 = read_wav(path2);
    for (size_t i = 0; i < r.samples.size(); ++i) CHECK(r2.samples[i] == r.samples[i]);
    std::filesystem::remove(path);
    std::filesystem::remove(path2);
}

TEST_CASE("unreadable or malformed wav files raise io errors") {
    CHECK_THROWS_AS(read_wav("/nonexistent/clip.wav"), IoError);
    const std::string path = temp_path("emoface_test_bad.wav");
    std::FILE* f = std::fopen(path.c_str(), "wb");
    std::fputs("definitely not a riff file", f);
    std::fclose(f);
    CHECK_THROWS_AS(read_wav(path), IoError);
    std::filesystem::remove(path);
}

TEST_CASE("moving average matches hand-computed reflect padding") {
    Tensor sig({4, 1}, {1.0, 2.0, 3.0, 4.0});
    Tensor out = smooth_rows(sig, 3);
    CHECK(out.at(0) == doctest::Approx(5.0 / 3).epsilon(1e-12));
    CHECK(out.at(1) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(out.at(2) == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(out.at(3) == doctest::Approx(10.0 / 3).epsilon(1e-12));
    CHECK_THROWS_AS(smooth_rows(sig, 4), ContractError);

    Tensor flat = Tensor::full({9, 2}, 1.25);
    Tensor fs = smooth_rows(flat, 5);
    for (std::int64_t i = 0; i < fs.numel(); ++i) CHECK(fs.at(i) == doctest::Approx(1.25).epsilon(1e-15));

    Tensor single({1, 3}, {2.0, 4.0, 6.0});
    Tensor ss = smooth_rows(single, 3);
    CHECK(ss.at(0) == doctest::Approx(2.0));
    CHECK(ss.at(2) == doctest::Approx(6.0));
}
