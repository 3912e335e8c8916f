#include "emoface/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>

#include "emoface/archive.hpp"

namespace emoface {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kSpeechLoHz = 200.0, kSpeechHiHz = 3600.0;
constexpr int kEnvelopeTaps = 9;

// Global affine envelope -> mouth coefficients; shared by generator and any
// oracle that checks recoverability.
constexpr double kMouthGain0 = 0.12, kMouthGain1 = 0.07, kMouthBias = 4.0;

std::string clip_dir_name(int id) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "clip_%04d", id);
    return buf;
}

std::string frame_file_name(int t) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frame_%03d.ppm", t);
    return buf;
}

// Gaussian draw with its norm capped at 1.25x the expected norm. Identity
// coefficients in a regularized morphable fit stay near the prior; an
// unbounded tail would make single identities wildly off-manifold.
Tensor truncated_normal(Rng& rng, std::vector<int> shape, double sigma) {
    Tensor v = rng.normal_tensor(std::move(shape), sigma);
    double n2 = 0;
    for (std::int64_t i = 0; i < v.numel(); ++i) n2 += v.at(i) * v.at(i);
    double cap = 1.25 * sigma * std::sqrt(static_cast<double>(v.numel()));
    double n = std::sqrt(n2);
    if (n > cap)
        for (std::int64_t i = 0; i < v.numel(); ++i) v.ref(i) *= cap / n;
    return v;
}

Tensor base_gamma() {
    Tensor g = Tensor::zeros({27});
    const double tint[3] = {0.1, 0.0, -0.1};
    for (int ch = 0; ch < 3; ++ch) {
        g.ref(9 * ch + 0) = 3.0 + tint[ch];
        g.ref(9 * ch + 1) = 0.25;   // from above
        g.ref(9 * ch + 2) = -0.35;  // toward the camera (front normals have nz < 0)
        g.ref(9 * ch + 3) = -0.15;
    }
    return g;
}

struct SharedTracks {
    std::vector<double> speech;  // waveform before carriers
    Tensor beta_base;            // [T,d_exp]: mouth + blink columns only
    Tensor pose;                 // [T,6]
};

// Speech, blink, and pose streams depend only on (identity, take) so clips of
// the same take differ across (emotion, mu) by exactly the emotion offset.
SharedTracks make_shared_tracks(std::uint64_t seed, int identity, int take, int frames, int d_exp) {
    const int samples = frames * 160;
    SharedTracks s;

    Rng speech_rng = Rng::child(seed, {20, static_cast<std::uint64_t>(identity),
                                       static_cast<std::uint64_t>(take)});
    const int k_sines = 40;
    std::vector<double> freq(k_sines), phase(k_sines), amp(k_sines);
    for (int k = 0; k < k_sines; ++k) {
        freq[k] = speech_rng.uniform(300.0, 3000.0);
        phase[k] = speech_rng.uniform(0.0, 2 * kPi);
        amp[k] = speech_rng.uniform(0.5, 1.0);
    }
    double ef1 = speech_rng.uniform(0.8, 2.0), ef2 = speech_rng.uniform(2.0, 3.2);
    double ep1 = speech_rng.uniform(0.0, 2 * kPi), ep2 = speech_rng.uniform(0.0, 2 * kPi);
    s.speech.resize(samples);
    const double inv_sr = 1.0 / 16000.0;
    for (int i = 0; i < samples; ++i) {
        double t = i * inv_sr;
        double env = 0.5 + 0.3 * std::sin(2 * kPi * ef1 * t + ep1) + 0.2 * std::sin(2 * kPi * ef2 * t + ep2);
        if (env < 0.02) env = 0.02;
        double acc = 0;
        for (int k = 0; k < k_sines; ++k) acc += amp[k] * std::sin(2 * kPi * freq[k] * t + phase[k]);
        s.speech[i] = 0.35 * env * acc / std::sqrt(static_cast<double>(k_sines));
    }

    // Mouth columns follow the smoothed speech-band log envelope of the clean
    // speech, so they are bitwise identical across (emotion, mu).
    Tensor mel_speech = compute_mel(s.speech);
    Tensor env = speech_band_envelope(mel_speech, MelParams{}, kSpeechLoHz, kSpeechHiHz);
    Tensor env_s = smooth_rows(env.reshaped({frames, 1}), kEnvelopeTaps);

    s.beta_base = Tensor::zeros({frames, d_exp});
    for (int t = 0; t < frames; ++t) {
        double L = env_s.at2(t, 0) + kMouthBias;
        s.beta_base.ref2(t, kSpeechCols[0]) = kMouthGain0 * L;
        s.beta_base.ref2(t, kSpeechCols[1]) = kMouthGain1 * L;
    }

    Rng blink_rng = Rng::child(seed, {21, static_cast<std::uint64_t>(identity),
                                      static_cast<std::uint64_t>(take)});
    int n_blinks = 1 + static_cast<int>(blink_rng.uniform_int(3));
    for (int b = 0; b < n_blinks; ++b) {
        if (frames < 12) break;
        double center = 4 + blink_rng.uniform() * (frames - 8);
        for (int t = 0; t < frames; ++t) {
            double d = std::abs(t - center);
            if (d < 2.5)
                s.beta_base.ref2(t, kBlinkCol) += 0.6 * 0.5 * (1 + std::cos(2 * kPi * d / 5.0));
        }
    }

    Rng pose_rng = Rng::child(seed, {22, static_cast<std::uint64_t>(identity),
                                     static_cast<std::uint64_t>(take)});
    const double amps[6] = {0.06, 0.10, 0.04, 0.03, 0.03, 0.04};
    s.pose = Tensor::zeros({frames, 6});
    for (int ch = 0; ch < 6; ++ch) {
        double cycles = pose_rng.uniform(0.5, 1.5);
        double ph = pose_rng.uniform(0.0, 2 * kPi);
        for (int t = 0; t < frames; ++t)
            s.pose.ref2(t, ch) = amps[ch] * std::sin(2 * kPi * cycles * t / frames + ph);
    }
    return s;
}

}  // namespace

std::pair<double, double> emotion_carrier_hz(int emotion_idx) {
    if (emotion_idx <= 0 || emotion_idx > 7) throw ContractError("carrier: emotion index 1..7");
    return {4200.0 + 250.0 * (emotion_idx - 1), 6000.0 + 220.0 * (emotion_idx - 1)};
}

Tensor background_image(int resolution) {
    const int r = resolution;
    Tensor bg({3, r, r});
    const double base[3] = {0.16, 0.18, 0.22};
    const double gx[3] = {0.06, 0.04, 0.02};
    const double gy[3] = {0.10, 0.08, 0.06};
    for (int ch = 0; ch < 3; ++ch)
        for (int y = 0; y < r; ++y)
            for (int x = 0; x < r; ++x) {
                double fx = static_cast<double>(x) / r, fy = static_cast<double>(y) / r;
                double dx = fx - 0.7, dy = fy - 0.3;
                double blob = 0.08 * std::exp(-(dx * dx + dy * dy) / (2 * 0.2 * 0.2));
                double v = base[ch] + gx[ch] * fx + gy[ch] * fy + blob;
                bg.ref((static_cast<std::int64_t>(ch) * r + y) * r + x) = std::clamp(v, 0.0, 1.0);
            }
    return bg;
}

Tensor composite_frame(const MorphableModel& model, const Coefficients& c, const Tensor& background) {
    const int r = background.dim(1);
    RenderedFrame f = render_frame(model, c, r);
    Tensor out({3, r, r});
    for (int ch = 0; ch < 3; ++ch)
        for (int i = 0; i < r * r; ++i) {
            double m = f.mask.at(i);
            std::int64_t k = static_cast<std::int64_t>(ch) * r * r + i;
            out.ref(k) = m * f.image.at(k) + (1 - m) * background.at(k);
        }
    return out;
}

std::vector<unsigned char> encode_ppm(const Tensor& image01) {
    const int h = image01.dim(1), w = image01.dim(2);
    char header[64];
    int hl = std::snprintf(header, sizeof(header), "P6\n%d %d\n255\n", w, h);
    std::vector<unsigned char> out(header, header + hl);
    out.reserve(out.size() + static_cast<size_t>(3) * h * w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < 3; ++ch) {
                double v = image01.at((static_cast<std::int64_t>(ch) * h + y) * w + x);
                v = std::clamp(v, 0.0, 1.0);
                out.push_back(static_cast<unsigned char>(std::lround(v * 255.0)));
            }
    return out;
}

Tensor decode_ppm(const std::vector<unsigned char>& bytes) {
    int w = 0, h = 0, maxv = 0, consumed = 0;
    if (std::sscanf(reinterpret_cast<const char*>(bytes.data()), "P6\n%d %d\n%d\n%n", &w, &h, &maxv,
                    &consumed) < 3 ||
        maxv != 255)
        throw IoError("not a P6 ppm");
    if (bytes.size() != static_cast<size_t>(consumed) + static_cast<size_t>(3) * w * h)
        throw IoError("ppm payload size mismatch");
    Tensor img({3, h, w});
    const unsigned char* p = bytes.data() + consumed;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < 3; ++ch)
                img.ref((static_cast<std::int64_t>(ch) * h + y) * w + x) = *p++ / 255.0;
    return img;
}

std::vector<unsigned char> read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read " + path);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("short write to " + path);
}

std::vector<int> DatasetManifest::clips_of_identity(int identity) const {
    std::vector<int> out;
    for (const auto& c : clips)
        if (c.identity == identity) out.push_back(c.id);
    return out;
}

const ClipInfo& DatasetManifest::clip(int id) const {
    if (id < 0 || id >= static_cast<int>(clips.size()) || clips[id].id != id)
        throw ContractError("clip id out of range: " + std::to_string(id));
    return clips[id];
}

bool DatasetManifest::is_held_out(int identity) const {
    return std::find(held_out_identities.begin(), held_out_identities.end(), identity) !=
           held_out_identities.end();
}

void DatasetManifest::save() const {
    json j;
    j["version"] = version;
    j["seed"] = seed;
    j["frames_per_clip"] = frames_per_clip;
    j["resolution"] = resolution;
    j["train_identities"] = train_identities;
    j["held_out_identities"] = held_out_identities;
    json arr = json::array();
    for (const auto& c : clips) {
        json e;
        e["id"] = c.id;
        e["identity"] = c.identity;
        e["emotion"] = c.emotion;
        e["intensity"] = c.intensity;
        e["take"] = c.take;
        e["frames"] = c.frames;
        e["dir"] = c.dir;
        arr.push_back(e);
    }
    j["clips"] = arr;
    std::ofstream f(root + "/manifest.json");
    if (!f) throw IoError("cannot write manifest in " + root);
    f << j.dump(2) << "\n";
}

DatasetManifest DatasetManifest::load(const std::string& root) {
    std::ifstream f(root + "/manifest.json");
    if (!f) throw DependencyError("no dataset manifest in " + root);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw IoError("bad manifest: " + std::string(e.what()));
    }
    DatasetManifest m;
    m.root = root;
    m.version = j.at("version").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.frames_per_clip = j.at("frames_per_clip").get<int>();
    m.resolution = j.at("resolution").get<int>();
    m.train_identities = j.at("train_identities").get<std::vector<int>>();
    m.held_out_identities = j.at("held_out_identities").get<std::vector<int>>();
    for (const auto& e : j.at("clips")) {
        ClipInfo c;
        c.id = e.at("id").get<int>();
        c.identity = e.at("identity").get<int>();
        c.emotion = e.at("emotion").get<std::string>();
        c.intensity = e.at("intensity").get<int>();
        c.take = e.at("take").get<int>();
        c.frames = e.at("frames").get<int>();
        c.dir = e.at("dir").get<std::string>();
        m.clips.push_back(c);
    }
    for (int idn : m.held_out_identities)
        if (std::find(m.train_identities.begin(), m.train_identities.end(), idn) !=
            m.train_identities.end())
            throw ContractError("identity in both train and held-out splits");
    return m;
}

MorphableModel load_dataset_model(const DatasetManifest& m) {
    return MorphableModel::load(m.root + "/model.emf");
}

DatasetManifest gen_dataset(const RunConfig& cfg, std::uint64_t seed) {
    validate_config(cfg);
    if (cfg.data.identities < 1) throw ConfigError("need at least one identity");

    const std::string root = resolve_out_dir(cfg) + "/dataset";
    if (fs::exists(root + "/manifest.json"))
        throw IoError(root + " already holds a dataset (remove it or pass --force)");
    fs::create_directories(root);

    MorphableModel model = build_toy_model(cfg.model, seed);
    model.save(root + "/model.emf");
    const int res = cfg.model.resolution;
    const int frames = cfg.data.frames_per_clip;
    Tensor bg = background_image(res);
    Tensor dirs = emotion_directions(cfg.model.d_exp);
    Tensor gamma0 = base_gamma();

    Archive identities;
    identities.meta["kind"] = "identities";
    std::vector<Coefficients> id_coeffs(cfg.data.identities);
    for (int i = 0; i < cfg.data.identities; ++i) {
        Rng rng = Rng::child(seed, {10, static_cast<std::uint64_t>(i)});
        Coefficients c = zero_coeffs(cfg.model);
        c.alpha = truncated_normal(rng, {cfg.model.d_id}, 0.5);
        c.delta = truncated_normal(rng, {cfg.model.d_tex}, 1.2);
        Tensor jitter = rng.normal_tensor({27}, 0.05);
        c.gamma = gamma0.clone();
        for (int k = 0; k < 27; ++k) c.gamma.ref(k) += jitter.at(k);
        id_coeffs[i] = c;
        std::string tag = std::to_string(i);
        identities.put("alpha/" + tag, c.alpha);
        identities.put("delta/" + tag, c.delta);
        identities.put("gamma/" + tag, c.gamma);
    }
    identities.save(root + "/identities.emf");

    DatasetManifest man;
    man.root = root;
    man.seed = seed;
    man.frames_per_clip = frames;
    man.resolution = res;
    for (int i = 0; i < cfg.data.identities; ++i) {
        if (i < cfg.data.identities - cfg.data.held_out_identities)
            man.train_identities.push_back(i);
        else
            man.held_out_identities.push_back(i);
    }

    const auto& labels = emotion_labels();
    int clip_id = 0;
    for (int identity = 0; identity < cfg.data.identities; ++identity) {
        for (int take = 0; take < cfg.data.clips_per_combo; ++take) {
            SharedTracks shared = make_shared_tracks(seed, identity, take, frames, cfg.model.d_exp);
            for (int e = 0; e < 8; ++e) {
                const int mu_max = e == 0 ? 1 : 3;
                for (int mu = 1; mu <= mu_max; ++mu) {
                    ClipInfo info;
                    info.id = clip_id;
                    info.identity = identity;
                    info.emotion = labels[e];
                    info.intensity = mu;
                    info.take = take;
                    info.frames = frames;
                    info.dir = clip_dir_name(clip_id);
                    const std::string cdir = root + "/" + info.dir;
                    fs::create_directories(cdir + "/frames");

                    std::vector<double> wave = shared.speech;
                    if (e > 0) {
                        auto [f1, f2] = emotion_carrier_hz(e);
                        // Boundary taper: reflect-padded STFT frames would
                        // otherwise smear a phase-flipped carrier across the
                        // whole spectrum at the clip edges.
                        const std::int64_t n = static_cast<std::int64_t>(wave.size());
                        const std::int64_t nt = std::min<std::int64_t>(400, n / 4);
                        for (std::int64_t i = 0; i < n; ++i) {
                            double t = i / 16000.0;
                            double edge = static_cast<double>(std::min(i, n - 1 - i));
                            double taper =
                                edge >= nt ? 1.0 : 0.5 * (1 - std::cos(kPi * edge / nt));
                            wave[i] += 0.04 * mu * taper *
                                       (std::sin(2 * kPi * f1 * t) + std::sin(2 * kPi * f2 * t));
                        }
                    }
                    Tensor mel = compute_mel(wave);

                    Tensor beta = shared.beta_base.clone();
                    for (int t = 0; t < frames; ++t)
                        for (int c = 0; c < cfg.model.d_exp; ++c)
                            beta.ref2(t, c) += mu * kEmotionAmp * dirs.at2(e, c);

                    Archive coeffs;
                    coeffs.meta["kind"] = "clip_coeffs";
                    coeffs.meta["identity"] = std::to_string(identity);
                    coeffs.meta["emotion"] = info.emotion;
                    coeffs.meta["intensity"] = std::to_string(mu);
                    coeffs.put("beta", beta);
                    coeffs.put("pose", shared.pose);
                    coeffs.save(cdir + "/coeffs.emf");

                    Archive melar;
                    melar.meta["kind"] = "clip_mel";
                    melar.put("mel", mel);
                    melar.save(cdir + "/mel.emf");

                    Waveform wf;
                    wf.samples = wave;
                    write_wav(cdir + "/clip.wav", wf);

                    Coefficients fc = id_coeffs[identity];
                    for (int t = 0; t < frames; ++t) {
                        fc.beta = Tensor({cfg.model.d_exp});
                        for (int c = 0; c < cfg.model.d_exp; ++c) fc.beta.ref(c) = beta.at2(t, c);
                        fc.pose = Tensor({6});
                        for (int c = 0; c < 6; ++c) fc.pose.ref(c) = shared.pose.at2(t, c);
                        Tensor frame = composite_frame(model, fc, bg);
                        write_file_bytes(cdir + "/frames/" + frame_file_name(t), encode_ppm(frame));
                    }
                    man.clips.push_back(info);
                    ++clip_id;
                }
            }
        }
    }
    man.save();
    return man;
}

ClipSample load_clip(const DatasetManifest& m, int clip_id, int t0, int length, bool with_frames) {
    const ClipInfo& info = m.clip(clip_id);
    if (t0 < 0 || length < 1 || t0 + length > info.frames)
        throw ContractError("clip window out of range");
    const std::string cdir = m.root + "/" + info.dir;

    ClipSample s;
    s.emotion = info.emotion;
    s.intensity = info.intensity;
    s.identity = info.identity;

    Archive melar = Archive::load(cdir + "/mel.emf");
    Tensor mel = melar.get("mel");
    Archive coeffs = Archive::load(cdir + "/coeffs.emf");
    Tensor beta = coeffs.get("beta");
    Tensor pose = coeffs.get("pose");
    auto window_rows = [&](const Tensor& src) {
        Tensor out({length, src.dim(1)});
        std::memcpy(out.mut(), src.data() + static_cast<std::int64_t>(t0) * src.dim(1),
                    sizeof(double) * static_cast<size_t>(length) * src.dim(1));
        return out;
    };
    s.mel = window_rows(mel);
    s.beta = window_rows(beta);
    s.pose = window_rows(pose);

    Archive ids = Archive::load(m.root + "/identities.emf");
    std::string tag = std::to_string(info.identity);
    s.alpha = ids.get("alpha/" + tag);
    s.delta = ids.get("delta/" + tag);
    s.gamma = ids.get("gamma/" + tag);

    if (with_frames) {
        s.frames.reserve(length);
        for (int t = t0; t < t0 + length; ++t)
            s.frames.push_back(decode_ppm(read_file_bytes(cdir + "/frames/" + frame_file_name(t))));
    }
    return s;
}

std::pair<int, int> make_pair(const DatasetManifest& m, int identity, Rng& rng) {
    std::vector<std::vector<int>> by_emotion(8);
    for (const auto& c : m.clips)
        if (c.identity == identity) by_emotion[emotion_index(c.emotion)].push_back(c.id);
    std::vector<int> present;
    for (int e = 0; e < 8; ++e)
        if (!by_emotion[e].empty()) present.push_back(e);
    if (present.size() < 2)
        throw ContractError("identity " + std::to_string(identity) + " has fewer than 2 emotions");
    int n_present = static_cast<int>(present.size());
    int es = present[rng.uniform_int(n_present)];
    int ed = es;
    while (ed == es) ed = present[rng.uniform_int(n_present)];
    const auto& src = by_emotion[es];
    const auto& drv = by_emotion[ed];
    return {src[rng.uniform_int(static_cast<int>(src.size()))],
            drv[rng.uniform_int(static_cast<int>(drv.size()))]};
}

bool self_certify(const DatasetManifest& m, const MorphableModel& model, int count, Rng& rng,
                  std::string* first_failure) {
    if (m.clips.empty()) throw ContractError("empty dataset");
    Tensor bg = background_image(m.resolution);
    Archive ids = Archive::load(m.root + "/identities.emf");
    for (int n = 0; n < count; ++n) {
        const ClipInfo& info = m.clips[rng.uniform_int(static_cast<int>(m.clips.size()))];
        const std::string cdir = m.root + "/" + info.dir;
        Archive coeffs = Archive::load(cdir + "/coeffs.emf");
        Tensor beta = coeffs.get("beta");
        Tensor pose = coeffs.get("pose");
        Coefficients c;
        std::string tag = std::to_string(info.identity);
        c.alpha = ids.get("alpha/" + tag);
        c.delta = ids.get("delta/" + tag);
        c.gamma = ids.get("gamma/" + tag);
        for (int t = 0; t < info.frames; ++t) {
            c.beta = Tensor({beta.dim(1)});
            for (int k = 0; k < beta.dim(1); ++k) c.beta.ref(k) = beta.at2(t, k);
            c.pose = Tensor({6});
            for (int k = 0; k < 6; ++k) c.pose.ref(k) = pose.at2(t, k);
            auto regen = encode_ppm(composite_frame(model, c, bg));
            auto stored = read_file_bytes(cdir + "/frames/" + frame_file_name(t));
            if (regen != stored) {
                if (first_failure)
                    *first_failure = info.dir + "/frames/" + frame_file_name(t);
                return false;
            }
        }
    }
    return true;
}

}  // namespace emoface
