#include "emoface/audio2face.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "emoface/synthdata.hpp"

namespace emoface {

namespace {

// Keeps norm-style losses differentiable at a zero residual without moving
// their value past the 1e-9 checks used in tests.
constexpr double kNormEps = 1e-24;

Var global_l2(Tape& t, Var diff) {
    (void)t;
    return vsqrt(add_const(sum_all(square(diff)), kNormEps));
}

Tensor row_of(const Tensor& m, int r) {
    const int cols = m.cols2d();
    Tensor out({cols});
    for (int i = 0; i < cols; ++i) out.ref(i) = m.at2(r, i);
    return out;
}

Tensor rowvec(const Tensor& v) { return v.reshaped({1, static_cast<int>(v.numel())}).clone(); }

}  // namespace

EacBody eac_body_from_string(const std::string& name) {
    if (name == "transformer") return EacBody::transformer;
    if (name == "gru") return EacBody::gru;
    if (name == "mlp") return EacBody::mlp;
    throw ConfigError("unknown eac body '" + name + "' (expected transformer|gru|mlp)");
}

EmotionRecognizer freeze_recognizer(JointSpace space, std::uint64_t fit_seed) {
    EmotionRecognizer r;
    r.space = std::move(space);
    r.fit_seed = fit_seed;
    r.frozen = true;
    return r;
}

EacModel::EacModel(ParamStore& ps, const RunConfig& cfg, Rng& rng) {
    t_window = cfg.data.window;
    mel_bins = cfg.data.mel_bins;
    d_model = cfg.eac.d_model;
    d_e = cfg.model.d_e;
    d_exp = cfg.model.d_exp;
    body = eac_body_from_string(cfg.eac.body);
    if (cfg.eac.emotion_encoding != "joint" && cfg.eac.emotion_encoding != "onehot")
        throw ConfigError("unknown eac emotion_encoding '" + cfg.eac.emotion_encoding +
                          "' (expected joint|onehot)");
    onehot = cfg.eac.emotion_encoding == "onehot";

    audio_proj = Linear(ps, "eac/audio_proj", mel_bins, d_model, rng);
    if (onehot) {
        onehot_proj = Linear(ps, "eac/onehot_proj", 8, d_model, rng);
    } else {
        emo_proj1 = Linear(ps, "eac/emo_proj1", d_e, d_model, rng);
        emo_proj2 = Linear(ps, "eac/emo_proj2", d_model, d_model, rng);
    }
    Tensor pos_init({t_window + 1, d_model});
    for (std::int64_t i = 0; i < pos_init.numel(); ++i) pos_init.ref(i) = 0.02 * rng.normal();
    pos = ps.create("eac/pos", std::move(pos_init));
    Tensor base_init({1, d_model});
    for (std::int64_t i = 0; i < base_init.numel(); ++i) base_init.ref(i) = 0.02 * rng.normal();
    intensity_base = ps.create("eac/intensity_base", std::move(base_init));

    switch (body) {
        case EacBody::transformer:
            for (int l = 0; l < cfg.eac.layers; ++l)
                tf_layers.emplace_back(ps, "eac/tf" + std::to_string(l), d_model,
                                       cfg.eac.heads, rng);
            tf_final = LayerNorm(ps, "eac/tf_final", d_model);
            break;
        case EacBody::gru:
            gru = Gru(ps, "eac/gru", d_model, d_model, rng);
            break;
        case EacBody::mlp:
            mlp1 = Linear(ps, "eac/mlp1", d_model, 2 * d_model, rng);
            mlp2 = Linear(ps, "eac/mlp2", 2 * d_model, d_model, rng);
            break;
    }
    head = Linear(ps, "eac/head", d_model, d_exp, rng);
}

Var make_intensity_token(Tape& t, Var base, double mu) {
    if (mu < 0) throw ContractError("intensity scalar must be >= 0");
    (void)t;
    return scale(base, mu);
}

Tensor emotion_onehot(int emotion_idx) {
    if (emotion_idx < 0 || emotion_idx >= 8) throw ContractError("emotion index out of range");
    Tensor z = Tensor::zeros({1, 8});
    z.ref(emotion_idx) = 1.0;
    return z;
}

namespace {

Var body_forward(Tape& t, const EacModel& m, Var seq) {
    switch (m.body) {
        case EacBody::transformer: {
            Var x = seq;
            for (const auto& layer : m.tf_layers) x = layer.forward(t, x);
            return m.tf_final.forward(t, x);
        }
        case EacBody::gru:
            return m.gru.forward(t, seq);
        case EacBody::mlp:
            return m.mlp2.forward(t, relu(m.mlp1.forward(t, seq)));
    }
    throw ContractError("unreachable eac body");
}

}  // namespace

EacForwardOut eac_forward(Tape& t, const EacModel& m, Var mel, Var z_emo, double mu) {
    if (mel.shape() != std::vector<int>{m.t_window, m.mel_bins})
        throw ShapeError("eac_forward expects mel [" + std::to_string(m.t_window) + "," +
                         std::to_string(m.mel_bins) + "], got " + shape_str(mel.shape()));
    const int z_dim = m.onehot ? 8 : m.d_e;
    if (z_emo.shape() != std::vector<int>{1, z_dim})
        throw ShapeError("eac_forward expects z_emo [1," + std::to_string(z_dim) + "], got " +
                         shape_str(z_emo.shape()));

    Var frames = m.audio_proj.forward(t, mel);  // [T, d_model]
    Var token = make_intensity_token(t, use(t, m.intensity_base), mu);
    Var seq = add(concat_rows({token, frames}), use(t, m.pos));
    Var emo = m.onehot ? m.onehot_proj.forward(t, z_emo)
                       : m.emo_proj2.forward(t, relu(m.emo_proj1.forward(t, z_emo)));
    seq = add_rowvec(seq, emo);

    Var out = body_forward(t, m, seq);
    Var sigma_hat = slice_rows(out, 0, 1);
    Var beta_hat = m.head.forward(t, slice_rows(out, 1, m.t_window + 1));
    return {sigma_hat, beta_hat};
}

Var render_reconstruction_loss(Tape& t, Var photo, const RenderOut& r) {
    if (photo.shape() != r.image.shape())
        throw ShapeError("render_reconstruction_loss: photo " + shape_str(photo.shape()) +
                         " vs render " + shape_str(r.image.shape()));
    const auto& ps = photo.val().shape();
    Var mask3 = reshape(concat_rows({r.mask, r.mask, r.mask}), {ps[0], ps[1], ps[2]});
    return global_l2(t, sub(r.image, mul(mask3, photo)));
}

Var landmark_loss(Tape& t, const MorphableModel& m, const Coefficients& gt,
                  const CoeffVars& hat) {
    Tensor lm_gt = landmarks_of(m, gt);
    Var lm_hat = project_landmarks(t, m, hat.alpha, hat.beta, hat.pose);
    Var d2 = row_sums(square(sub(lm_hat, t.constant(lm_gt))));
    return sum_all(vsqrt(add_const(d2, kNormEps)));
}

Var expression_regularization_loss(Tape& t, Var beta_gt, Var beta_hat) {
    if (beta_gt.shape() != beta_hat.shape())
        throw ShapeError("expression_regularization_loss: " + shape_str(beta_gt.shape()) +
                         " vs " + shape_str(beta_hat.shape()));
    return global_l2(t, sub(beta_gt, beta_hat));
}

namespace {

Var consistency_from_render(Tape& t, const EmotionRecognizer& rec, Var photo,
                            const RenderOut& r) {
    Var i3d = blend(t, photo, r);
    Var f_blend = image_features(t, i3d, rec.space);
    Var f_photo = image_features(t, photo, rec.space);
    return global_l2(t, sub(f_blend, f_photo));
}

}  // namespace

Var emotion_consistency_loss(Tape& t, const EmotionRecognizer& rec, Var photo,
                             const MorphableModel& m, const CoeffVars& hat) {
    if (!rec.frozen)
        throw ContractError("emotion recognizer must be frozen before it backs a loss");
    RenderOut r = render(t, m, hat, rec.space.resolution);
    return consistency_from_render(t, rec, photo, r);
}

EacLossWeights eac_weights_from(const EacConfig& c) {
    EacLossWeights w;
    w.clip = c.lambda_clip;
    w.emo = c.use_emo_loss ? c.lambda_emo : 0.0;
    w.rec = c.lambda_rec;
    w.lm = c.lambda_lm;
    w.reg = c.lambda_reg;
    return w;
}

Var eac_total_loss(Tape& t, const EacLossParts& parts, const EacLossWeights& w) {
    (void)t;
    const std::pair<const Var*, const char*> named[] = {
        {&parts.clip, "clip"}, {&parts.emo, "emo"}, {&parts.rec, "rec"},
        {&parts.lm, "lm"},     {&parts.reg, "reg"}};
    for (double wt : {w.clip, w.emo, w.rec, w.lm, w.reg})
        if (wt < 0) throw ConfigError("eac loss weights must be nonnegative");
    for (auto& [part, name] : named) {
        if (part->val().numel() != 1)
            throw ShapeError(std::string("eac loss term '") + name + "' must be scalar");
        if (!std::isfinite(part->val().at(0)))
            throw NumericError(std::string("eac loss term '") + name + "' is not finite");
    }
    return add(add(add(add(scale(parts.clip, w.clip), scale(parts.emo, w.emo)),
                       scale(parts.rec, w.rec)),
                   scale(parts.lm, w.lm)),
               scale(parts.reg, w.reg));
}

Stage1System::Stage1System(const RunConfig& cfg, std::uint64_t seed) {
    Rng eac_rng = Rng::child(seed, {40});
    eac = EacModel(ps, cfg, eac_rng);
    Rng enc_rng = Rng::child(seed, {41});
    audio_enc = AudioEmotionEncoder(ps, "audio_enc/", cfg.data.window, cfg.data.mel_bins,
                                    cfg.eac.d_model, cfg.eac.layers, cfg.eac.heads,
                                    cfg.model.d_e, enc_rng);
}

namespace {

std::vector<int> split_clips(const DatasetManifest& data, bool held_out) {
    std::vector<int> out;
    for (const ClipInfo& c : data.clips)
        if (data.is_held_out(c.identity) == held_out) out.push_back(c.id);
    return out;
}

Var mean_of(Tape& t, std::vector<Var>& parts) {
    if (parts.size() == 1) return parts[0];
    return mean_all(pack(parts));
}

}  // namespace

EacTrainResult train_eac(Stage1System& sys, const DatasetManifest& data,
                         const JointSpace& space, const EmotionRecognizer& phi_emo,
                         const RunConfig& cfg, std::uint64_t seed,
                         const EacTrainOptions& opt) {
    if (!phi_emo.frozen)
        throw ContractError("emotion recognizer must be frozen before stage-1 training");
    if (space.d_e != cfg.model.d_e)
        throw ConfigError("joint space d_e does not match model d_e");
    for (const ClipInfo& c : data.clips)
        if (c.intensity < 1 || c.intensity > 3)
            throw ContractError("dataset clip " + std::to_string(c.id) +
                                " has no usable intensity label");
    std::vector<int> train_clips = split_clips(data, false);
    if (train_clips.empty()) throw ContractError("dataset has no training clips");

    MorphableModel model = load_dataset_model(data);
    const int T = cfg.data.window;
    const int K = std::max(1, cfg.eac.frames_per_sample);
    const EacLossWeights weights = eac_weights_from(cfg.eac);

    Adam adam(AdamConfig{cfg.eac.lr, 0.9, 0.999, 1e-8});
    std::int64_t start_step = 0;
    if (!opt.resume_from.empty()) {
        Checkpoint in = Checkpoint::load(opt.resume_from, "eac");
        in.get_params(sys.ps, "param/");
        in.get_adam(adam, sys.ps, "adam/");
        start_step = in.step();
    }

    std::string ckpt_dir, log_path;
    std::ofstream log;
    if (!opt.out_dir.empty()) {
        ckpt_dir = opt.out_dir + "/checkpoints";
        std::filesystem::create_directories(ckpt_dir);
        std::filesystem::create_directories(opt.out_dir + "/logs");
        log_path = opt.out_dir + "/logs/eac_train.log";
        log.open(log_path, start_step > 0 ? std::ios::app : std::ios::trunc);
    }

    EacTrainResult result;
    result.log_path = log_path;
    const auto t_start = std::chrono::steady_clock::now();

    for (std::int64_t step = start_step; step < cfg.eac.steps; ++step) {
        Rng rng = Rng::child(seed, {50, static_cast<std::uint64_t>(step)});
        Tape t;
        std::vector<Var> clip_parts, emo_parts, rec_parts, lm_parts, reg_parts;

        for (int b = 0; b < cfg.eac.batch; ++b) {
            const int cid = train_clips[static_cast<size_t>(
                rng.uniform_int(static_cast<int>(train_clips.size())))];
            const ClipInfo& info = data.clip(cid);
            const int t0 = rng.uniform_int(info.frames - T + 1);
            ClipSample s = load_clip(data, cid, t0, T, /*with_frames=*/true);
            const double mu = s.intensity;
            const int label = emotion_index(s.emotion);

            Var mel = t.constant(s.mel);
            Tensor e_text = rowvec(space.anchor(label));
            Tensor e_img = rowvec(space.image_embed(s.frames[static_cast<size_t>(
                rng.uniform_int(T))]));
            Var e_audio = sys.audio_enc.forward(t, mel);
            clip_parts.push_back(clip_alignment_loss(t, e_audio, e_text, e_img));

            std::vector<Var> zrows;
            if (sys.eac.onehot) {
                zrows.push_back(t.constant(emotion_onehot(label)));
            } else {
                Var z3 = assemble_z_emo(t, ZEmoMode::train_concat, t.constant(e_text),
                                        e_audio, t.constant(e_img));
                for (int r = 0; r < 3; ++r) zrows.push_back(slice_rows(z3, r, r + 1));
            }

            std::vector<int> frame_picks(static_cast<size_t>(K));
            for (int& f : frame_picks) f = rng.uniform_int(T);

            for (const Var& z : zrows) {
                EacForwardOut out = eac_forward(t, sys.eac, mel, z, mu);
                reg_parts.push_back(
                    expression_regularization_loss(t, t.constant(s.beta), out.beta_hat));
                for (int fk : frame_picks) {
                    CoeffVars hat{t.constant(s.alpha),
                                  reshape(slice_rows(out.beta_hat, fk, fk + 1),
                                          {sys.eac.d_exp}),
                                  t.constant(s.delta), t.constant(s.gamma),
                                  t.constant(row_of(s.pose, fk))};
                    Var photo = t.constant(s.frames[static_cast<size_t>(fk)]);
                    RenderOut r = render(t, model, hat, cfg.model.resolution);
                    rec_parts.push_back(render_reconstruction_loss(t, photo, r));
                    Coefficients gt{s.alpha, row_of(s.beta, fk), s.delta, s.gamma,
                                    row_of(s.pose, fk)};
                    lm_parts.push_back(landmark_loss(t, model, gt, hat));
                    if (weights.emo > 0)
                        emo_parts.push_back(consistency_from_render(t, phi_emo, photo, r));
                }
            }
        }

        EacLossParts parts;
        parts.clip = mean_of(t, clip_parts);
        parts.emo = weights.emo > 0 ? mean_of(t, emo_parts) : t.constant(Tensor::zeros({1}));
        parts.rec = mean_of(t, rec_parts);
        parts.lm = mean_of(t, lm_parts);
        parts.reg = mean_of(t, reg_parts);
        Var total = eac_total_loss(t, parts, weights);

        t.backward(total);
        const double grad_norm = adam.step(sys.ps, t, cfg.eac.grad_clip);
        result.losses.push_back(total.val().at(0));
        ++result.steps_run;

        const bool boundary = (step + 1) % cfg.train.ckpt_every == 0 || step + 1 == cfg.eac.steps;
        if (log.is_open() && ((step + 1) % cfg.train.log_every == 0 || boundary || step == start_step)) {
            const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                                std::chrono::steady_clock::now() - t_start)
                                .count();
            char line[256];
            std::snprintf(line, sizeof(line),
                          "step=%lld total=%.6f clip=%.6f emo=%.6f rec=%.6f lm=%.6f reg=%.6f "
                          "grad=%.4f ms=%lld\n",
                          static_cast<long long>(step + 1), total.val().at(0),
                          parts.clip.val().at(0), parts.emo.val().at(0), parts.rec.val().at(0),
                          parts.lm.val().at(0), parts.reg.val().at(0), grad_norm,
                          static_cast<long long>(ms));
            log << line;
        }
        if (boundary && !ckpt_dir.empty()) {
            result.checkpoint_path = ckpt_dir + "/eac_latest.emf";
            Checkpoint c;
            c.set_kind("eac");
            c.set_step(step + 1);
            c.set_config(cfg);
            c.put_params(sys.ps, "param/");
            c.put_adam(adam, sys.ps, "adam/");
            c.save(result.checkpoint_path);
            EacEval ev = eval_eac(sys, space, data, true, cfg.eval.max_clips, seed);
            if (log.is_open()) {
                char line[160];
                std::snprintf(line, sizeof(line),
                              "eval step=%lld split=held r2=%.4f cos=%.4f clips=%d\n",
                              static_cast<long long>(step + 1), ev.r2, ev.mean_cos_audio,
                              ev.clips);
                log << line;
                log.flush();
            }
        }
    }
    return result;
}

EacEval eval_eac(const Stage1System& sys, const JointSpace& space, const DatasetManifest& data,
                 bool held_out, int max_clips, std::uint64_t seed) {
    std::vector<int> clips = split_clips(data, held_out);
    if (clips.empty()) throw ContractError("requested split holds no clips");
    Rng rng = Rng::child(seed, {60});
    for (int i = static_cast<int>(clips.size()) - 1; i > 0; --i)
        std::swap(clips[static_cast<size_t>(i)], clips[static_cast<size_t>(rng.uniform_int(i + 1))]);
    if (static_cast<int>(clips.size()) > max_clips) clips.resize(static_cast<size_t>(max_clips));

    const int T = sys.eac.t_window;
    std::vector<Tensor> gts, preds;
    EacEval ev;
    double cos_sum = 0;
    for (int cid : clips) {
        ClipSample s = load_clip(data, cid, 0, T, /*with_frames=*/false);
        const int label = emotion_index(s.emotion);

        Tape t;
        Var z = sys.eac.onehot
                    ? t.constant(emotion_onehot(label))
                    : t.constant(rowvec(space.anchor(label)));
        EacForwardOut out = eac_forward(t, sys.eac, t.constant(s.mel), z, s.intensity);
        preds.push_back(out.beta_hat.val().clone());
        gts.push_back(s.beta.clone());

        Tensor e_audio = sys.audio_enc.embed(s.mel);
        Tensor anchor = space.anchor(label);
        double dot = 0;
        for (std::int64_t i = 0; i < anchor.numel(); ++i) dot += e_audio.at(i) * anchor.at(i);
        cos_sum += dot;  // both sides unit norm
        ++ev.clips;
    }

    const int d = sys.eac.d_exp;
    std::vector<double> mean(static_cast<size_t>(d), 0.0);
    std::int64_t n_frames = 0;
    for (const Tensor& g : gts) {
        for (int r = 0; r < g.rows2d(); ++r)
            for (int c = 0; c < d; ++c) mean[static_cast<size_t>(c)] += g.at2(r, c);
        n_frames += g.rows2d();
    }
    for (double& m : mean) m /= static_cast<double>(n_frames);
    double ss_res = 0, ss_tot = 0;
    for (size_t i = 0; i < gts.size(); ++i)
        for (int r = 0; r < gts[i].rows2d(); ++r)
            for (int c = 0; c < d; ++c) {
                const double g = gts[i].at2(r, c);
                const double p = preds[i].at2(r, c);
                ss_res += (g - p) * (g - p);
                const double dm = g - mean[static_cast<size_t>(c)];
                ss_tot += dm * dm;
            }
    ev.r2 = ss_tot > 0 ? 1.0 - ss_res / ss_tot : 0.0;
    ev.mean_cos_audio = cos_sum / std::max(1, ev.clips);
    return ev;
}

}  // namespace emoface
