#include "emoface/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace emoface {

namespace {

// [H,W] luma from [3,H,W] or [1,H,W]; pass-through for 2-D input.
Tensor to_gray(const Tensor& img) {
    const auto& s = img.shape();
    if (s.size() == 2) return img.clone();
    if (s.size() != 3 || (s[0] != 1 && s[0] != 3))
        throw ShapeError("expected [3,H,W], [1,H,W], or [H,W] image, got " + shape_str(s));
    const int h = s[1], w = s[2];
    Tensor out({h, w});
    if (s[0] == 1) {
        for (int i = 0; i < h * w; ++i) out.ref(i) = img.at(i);
        return out;
    }
    const int n = h * w;
    for (int i = 0; i < n; ++i)
        out.ref(i) = 0.299 * img.at(i) + 0.587 * img.at(n + i) + 0.114 * img.at(2 * n + i);
    return out;
}

}  // namespace

double psnr(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("psnr: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    double mse = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        double d = a.at(i) - b.at(i);
        mse += d * d;
    }
    mse /= static_cast<double>(a.numel());
    if (mse <= 0) return 100.0;
    return std::min(100.0, 10.0 * std::log10(1.0 / mse));
}

double ssim(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("ssim: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    Tensor ga = to_gray(a), gb = to_gray(b);
    const int h = ga.shape()[0], w = ga.shape()[1];
    const int win = 11, half = win / 2;
    if (h < win || w < win)
        throw ShapeError("ssim needs at least 11x11 images, got " + shape_str(a.shape()));

    double kernel[win][win];
    double ksum = 0;
    const double sigma = 1.5;
    for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
            double dy = i - half, dx = j - half;
            kernel[i][j] = std::exp(-(dy * dy + dx * dx) / (2 * sigma * sigma));
            ksum += kernel[i][j];
        }
    for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) kernel[i][j] /= ksum;

    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;  // dynamic range 1
    double total = 0;
    int count = 0;
    for (int y = half; y < h - half; ++y)
        for (int x = half; x < w - half; ++x) {
            double ma = 0, mb = 0, va = 0, vb = 0, cov = 0;
            for (int i = 0; i < win; ++i)
                for (int j = 0; j < win; ++j) {
                    double pa = ga.at2(y + i - half, x + j - half);
                    double pb = gb.at2(y + i - half, x + j - half);
                    double k = kernel[i][j];
                    ma += k * pa;
                    mb += k * pb;
                    va += k * pa * pa;
                    vb += k * pb * pb;
                    cov += k * pa * pb;
                }
            va -= ma * ma;
            vb -= mb * mb;
            cov -= ma * mb;
            total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                     ((ma * ma + mb * mb + c1) * (va + vb + c2));
            ++count;
        }
    return total / count;
}

double lmd(const MorphableModel& m, const Coefficients& a, const Coefficients& b) {
    Tensor la = landmarks_of(m, a);
    Tensor lb = landmarks_of(m, b);
    // Mouth points occupy rows 48..67 of the 68-point layout.
    const int n = static_cast<int>(m.mouth_landmark_indices.size());
    double total = 0;
    for (int i = 0; i < n; ++i) {
        int row = 48 + i;
        double dx = la.at2(row, 0) - lb.at2(row, 0);
        double dy = la.at2(row, 1) - lb.at2(row, 1);
        total += std::sqrt(dx * dx + dy * dy);
    }
    return total / static_cast<double>(n);
}

EmotionRecognizer make_eval_recognizer(const JointSpace& eval_space, std::uint64_t fit_seed,
                                       const EmotionRecognizer& loss_side) {
    if (fit_seed == loss_side.fit_seed)
        throw ContractError(
            "evaluation recognizer must be fitted with a different seed than the loss-side one");
    return freeze_recognizer(eval_space, fit_seed);
}

double emotion_feature_distance(const EmotionRecognizer& phi_eval, const Tensor& a,
                                const Tensor& b) {
    if (!phi_eval.frozen)
        throw ContractError("emotion recognizer must be frozen before it backs a metric");
    Tensor fa = image_features(phi_eval.space, a);
    Tensor fb = image_features(phi_eval.space, b);
    double sq = 0;
    for (std::int64_t i = 0; i < fa.numel(); ++i) {
        double d = fa.at(i) - fb.at(i);
        sq += d * d;
    }
    return std::sqrt(sq);
}

std::vector<IntensityRow> export_intensity_embeddings(const Stage1System& sys,
                                                      const JointSpace& space,
                                                      const DatasetManifest& data,
                                                      const std::vector<std::string>& prompts) {
    if (sys.eac.onehot)
        throw ContractError("intensity export drives the convertor by prompt embeddings, "
                            "which the one-hot encoding cannot accept");
    const int T = sys.eac.t_window;
    std::vector<IntensityRow> rows;
    rows.reserve(prompts.size() * data.clips.size());
    for (const std::string& prompt : prompts) {
        Tensor z = space.text_embed(prompt).reshaped({1, space.d_e}).clone();
        for (const ClipInfo& c : data.clips) {
            ClipSample s = load_clip(data, c.id, 0, T, false);
            Tape t;
            EacForwardOut out =
                eac_forward(t, sys.eac, t.constant(s.mel), t.constant(z), c.intensity);
            rows.push_back({prompt, c.intensity, c.id, out.sigma_hat.val().clone()});
        }
    }
    return rows;
}

void save_intensity_rows(const std::vector<IntensityRow>& rows, const std::string& path) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    for (const IntensityRow& r : rows) {
        f << r.prompt << '\t' << r.mu << '\t' << r.clip_id;
        char buf[32];
        for (std::int64_t i = 0; i < r.sigma.numel(); ++i) {
            std::snprintf(buf, sizeof(buf), "%.17g", r.sigma.at(i));
            f << '\t' << buf;
        }
        f << '\n';
    }
}

ModalityAggregate EvalReport::aggregate(const std::string& modality) const {
    ModalityAggregate agg;
    agg.modality = modality;
    for (const ClipEval& c : clips) {
        if (c.modality != modality) continue;
        ++agg.clips;
        agg.psnr += c.psnr;
        agg.ssim += c.ssim;
        agg.lmd += c.lmd;
        agg.efd += c.efd;
    }
    if (agg.clips > 0) {
        agg.psnr /= agg.clips;
        agg.ssim /= agg.clips;
        agg.lmd /= agg.clips;
        agg.efd /= agg.clips;
    }
    return agg;
}

std::vector<std::string> EvalReport::modalities() const {
    std::vector<std::string> out;
    for (const ClipEval& c : clips)
        if (std::find(out.begin(), out.end(), c.modality) == out.end()) out.push_back(c.modality);
    return out;
}

std::string EvalReport::to_records() const {
    std::string out;
    char line[256];
    for (const ClipEval& c : clips) {
        std::snprintf(line, sizeof(line),
                      "clip id=%d modality=%s frames=%d psnr=%.6f ssim=%.6f lmd=%.6f efd=%.6f\n",
                      c.clip_id, c.modality.c_str(), c.frames, c.psnr, c.ssim, c.lmd, c.efd);
        out += line;
    }
    for (const std::string& m : modalities()) {
        ModalityAggregate a = aggregate(m);
        std::snprintf(line, sizeof(line),
                      "aggregate modality=%s clips=%d psnr=%.6f ssim=%.6f lmd=%.6f efd=%.6f\n",
                      a.modality.c_str(), a.clips, a.psnr, a.ssim, a.lmd, a.efd);
        out += line;
    }
    for (const std::string& m : not_computed) out += "not_computed metric=" + m + "\n";
    return out;
}

std::string EvalReport::to_table() const {
    std::string out = "modality    clips    psnr(dB)     ssim      lmd       efd\n";
    char line[160];
    for (const std::string& m : modalities()) {
        ModalityAggregate a = aggregate(m);
        std::snprintf(line, sizeof(line), "%-11s %5d %9.3f %9.4f %9.5f %9.4f\n",
                      a.modality.c_str(), a.clips, a.psnr, a.ssim, a.lmd, a.efd);
        out += line;
    }
    if (!not_computed.empty()) {
        out += "not computed (needs external pretrained weights):";
        for (const std::string& m : not_computed) out += " " + m;
        out += "\n";
    }
    return out;
}

void EvalReport::save(const std::string& path) const {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    f << to_records() << "\n" << to_table();
}

}  // namespace emoface
