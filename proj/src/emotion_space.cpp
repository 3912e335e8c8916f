#include "emoface/emotion_space.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

namespace emoface {

namespace {

constexpr int kC1 = 8, kC2 = 16, kC3 = 32, kKernel = 3;

Tensor qr_anchor_rows(int d_e, std::uint64_t seed) {
    if (d_e < 8) throw ConfigError("joint space needs d_e >= 8");
    Rng rng = Rng::child(seed, {1});
    Eigen::MatrixXd g(d_e, 8);
    for (int i = 0; i < d_e; ++i)
        for (int j = 0; j < 8; ++j) g(i, j) = rng.normal();
    Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ() *
                        Eigen::MatrixXd::Identity(d_e, 8);
    Tensor anchors({8, d_e});
    for (int e = 0; e < 8; ++e) {
        int arg = 0;
        for (int i = 1; i < d_e; ++i)
            if (std::abs(q(i, e)) > std::abs(q(arg, e))) arg = i;
        double sign = q(arg, e) < 0 ? -1.0 : 1.0;
        for (int i = 0; i < d_e; ++i) anchors.ref2(e, i) = sign * q(i, e);
    }
    return anchors;
}

std::string trimmed(const std::string& s) {
    size_t a = s.find_first_not_of(" \t");
    size_t b = s.find_last_not_of(" \t");
    if (a == std::string::npos) return "";
    return s.substr(a, b - a + 1);
}

Tensor normalized_or_throw(std::vector<double> v) {
    double n2 = 0;
    for (double x : v) n2 += x * x;
    if (n2 < 1e-20) throw NumericError("emotion arithmetic cancelled to the zero vector");
    double inv = 1.0 / std::sqrt(n2);
    for (double& x : v) x *= inv;
    return Tensor::from(std::move(v));
}

// Shared graph for the image encoder so fitting and the frozen forward can
// never drift apart. Weights arrive as Vars (params while fitting, constants
// afterwards).
struct EncoderVars {
    Var w1, b1, w2, b2, w3, b3, wl, bl;
};

// Backbone up to the flattened conv activations; the final linear head sits
// on top of this in encoder_forward.
Var encoder_backbone(Tape& t, Var img, const EncoderVars& v, int resolution) {
    if (img.shape() != std::vector<int>{3, resolution, resolution})
        throw ShapeError("image encoder expects [3," + std::to_string(resolution) + "," +
                         std::to_string(resolution) + "], got " + shape_str(img.shape()));
    // Per-channel standardization strips identity-specific brightness and
    // tint so the conv stack sees structure, not lighting.
    const int hw = resolution * resolution;
    Var flat = reshape(img, {3, hw});
    Var mean = scale(row_sums(flat), 1.0 / hw);
    Var centered = add_colvec(flat, neg(mean));
    Var inv_std = rsqrt_eps(scale(row_sums(square(centered)), 1.0 / hw), 1e-8);
    img = reshape(mul_colvec(centered, inv_std), {3, resolution, resolution});
    (void)t;
    Var x = relu(add_channel_bias(conv2d(img, v.w1, kKernel, 2, 1), v.b1));
    x = relu(add_channel_bias(conv2d(x, v.w2, kKernel, 2, 1), v.b2));
    x = relu(add_channel_bias(conv2d(x, v.w3, kKernel, 2, 1), v.b3));
    const int spatial = (resolution / 8) * (resolution / 8);
    return reshape(x, {1, kC3 * spatial});
}

Var encoder_forward(Tape& t, Var img, const EncoderVars& v, int resolution) {
    Var x = encoder_backbone(t, img, v, resolution);
    Var emb = add_rowvec(matmul(x, v.wl), v.bl);  // [1, d_e]
    return normalize_rows(t, emb);
}

struct FramePick {
    int clip_id = 0;
    int t = 0;
    int label = 0;
};

std::vector<FramePick> sample_frame_pool(const DatasetManifest& m, const std::vector<int>& ids,
                                         int pool, int per_clip_cap, Rng& rng) {
    std::vector<FramePick> all;
    for (int identity : ids)
        for (int cid : m.clips_of_identity(identity)) {
            const ClipInfo& c = m.clip(cid);
            // Neutral has one clip per take against three per emotion, so
            // triple its draw to keep the classes roughly balanced.
            int cap = std::min(per_clip_cap * (c.emotion == "neutral" ? 3 : 1), c.frames);
            for (int k = 0; k < cap; ++k)
                all.push_back({cid, rng.uniform_int(c.frames), emotion_index(c.emotion)});
        }
    if (all.empty()) throw ContractError("no frames available for the requested identities");
    for (int i = static_cast<int>(all.size()) - 1; i > 0; --i)
        std::swap(all[static_cast<size_t>(i)], all[static_cast<size_t>(rng.uniform_int(i + 1))]);
    if (static_cast<int>(all.size()) > pool) all.resize(static_cast<size_t>(pool));
    return all;
}

Tensor load_frame(const DatasetManifest& m, const FramePick& p) {
    const ClipInfo& c = m.clip(p.clip_id);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frame_%03d.ppm", p.t);
    return decode_ppm(read_file_bytes(m.root + "/" + c.dir + "/frames/" + buf));
}

// Integer translation with edge clamping; fitting-time augmentation so the
// encoder cannot anchor emotion evidence to absolute pixel positions.
Tensor shifted_frame(const Tensor& img, int dy, int dx) {
    const int h = img.dim(1), w = img.dim(2);
    Tensor out(img.shape());
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y) {
            int sy = std::clamp(y + dy, 0, h - 1);
            for (int x = 0; x < w; ++x) {
                int sx = std::clamp(x + dx, 0, w - 1);
                out.ref((static_cast<std::int64_t>(c) * h + y) * w + x) =
                    img.at((static_cast<std::int64_t>(c) * h + sy) * w + sx);
            }
        }
    return out;
}

}  // namespace

Tensor JointSpace::anchor(int emotion_idx) const {
    if (emotion_idx < 0 || emotion_idx >= 8) throw ContractError("emotion index out of range");
    Tensor out({d_e});
    for (int i = 0; i < d_e; ++i) out.ref(i) = anchors.at2(emotion_idx, i);
    return out;
}

Tensor JointSpace::text_embed(const std::string& prompt) const {
    std::vector<std::pair<std::string, double>> parts;
    size_t pos = 0;
    while (pos <= prompt.size()) {
        size_t plus = prompt.find('+', pos);
        std::string piece = trimmed(prompt.substr(pos, plus == std::string::npos
                                                           ? std::string::npos
                                                           : plus - pos));
        if (!piece.empty()) parts.emplace_back(piece, 1.0);
        if (plus == std::string::npos) break;
        pos = plus + 1;
    }
    if (parts.empty()) throw ConfigError("empty emotion prompt");
    return text_embed(parts);
}

Tensor JointSpace::text_embed(const std::vector<std::pair<std::string, double>>& weighted) const {
    if (weighted.empty()) throw ConfigError("empty emotion prompt");
    std::vector<double> acc(static_cast<size_t>(d_e), 0.0);
    for (const auto& [label, weight] : weighted) {
        int e = emotion_index(label);  // ConfigError on unknown labels
        for (int i = 0; i < d_e; ++i) acc[static_cast<size_t>(i)] += weight * anchors.at2(e, i);
    }
    return normalized_or_throw(std::move(acc));
}

Tensor JointSpace::image_embed(const Tensor& face) const {
    Tape t;
    EncoderVars v{t.constant(w1), t.constant(b1), t.constant(w2), t.constant(b2),
                  t.constant(w3), t.constant(b3), t.constant(wl), t.constant(bl)};
    Var emb = encoder_forward(t, t.constant(face), v, resolution);
    return emb.val().reshaped({d_e}).clone();
}

Var image_features(Tape& t, Var face, const JointSpace& s) {
    EncoderVars v{t.constant(s.w1), t.constant(s.b1), t.constant(s.w2), t.constant(s.b2),
                  t.constant(s.w3), t.constant(s.b3), t.constant(s.wl), t.constant(s.bl)};
    return encoder_backbone(t, face, v, s.resolution);
}

Tensor image_features(const JointSpace& s, const Tensor& face) {
    Tape t;
    return image_features(t, t.constant(face), s).val().clone();
}

void JointSpace::validate() const {
    if (anchors.shape() != std::vector<int>{8, d_e}) throw ContractError("anchor table shape");
    for (int a = 0; a < 8; ++a) {
        double n2 = 0;
        for (int i = 0; i < d_e; ++i) n2 += anchors.at2(a, i) * anchors.at2(a, i);
        if (std::abs(std::sqrt(n2) - 1.0) > 1e-5) throw ContractError("anchor not unit norm");
        for (int b = 0; b < a; ++b) {
            double dot = 0;
            for (int i = 0; i < d_e; ++i) dot += anchors.at2(a, i) * anchors.at2(b, i);
            if (std::abs(dot) >= 0.3) throw ContractError("anchors not near-orthogonal");
        }
    }
    if (resolution % 8 != 0 || resolution <= 0) throw ContractError("encoder resolution");
}

void JointSpace::save(const std::string& path) const {
    Archive a;
    a.meta["kind"] = "joint_space";
    a.meta["format_version"] = "1";
    a.meta["d_e"] = std::to_string(d_e);
    a.meta["resolution"] = std::to_string(resolution);
    a.put("anchors", anchors);
    a.put("w1", w1);
    a.put("b1", b1);
    a.put("w2", w2);
    a.put("b2", b2);
    a.put("w3", w3);
    a.put("b3", b3);
    a.put("wl", wl);
    a.put("bl", bl);
    a.save(path);
}

JointSpace JointSpace::load(const std::string& path) {
    Archive a = Archive::load(path);
    if (a.meta.count("kind") == 0 || a.meta.at("kind") != "joint_space")
        throw DependencyError(path + " is not a joint-space archive");
    JointSpace s;
    s.d_e = std::stoi(a.meta.at("d_e"));
    s.resolution = std::stoi(a.meta.at("resolution"));
    s.anchors = a.get("anchors", {8, s.d_e});
    s.w1 = a.get("w1");
    s.b1 = a.get("b1");
    s.w2 = a.get("w2");
    s.b2 = a.get("b2");
    s.w3 = a.get("w3");
    s.b3 = a.get("b3");
    s.wl = a.get("wl");
    s.bl = a.get("bl");
    s.validate();
    return s;
}

JointSpace fit_joint_space(const DatasetManifest& m, std::uint64_t seed,
                           const JointFitOptions& opt) {
    if (m.resolution % 8 != 0) throw ContractError("dataset resolution must be divisible by 8");
    JointSpace space;
    space.d_e = opt.d_e;
    space.resolution = m.resolution;
    space.anchors = qr_anchor_rows(opt.d_e, seed);

    std::vector<bool> present(8, false);
    for (const auto& c : m.clips)
        if (!m.is_held_out(c.identity)) present[static_cast<size_t>(emotion_index(c.emotion))] = true;
    for (int e = 0; e < 8; ++e)
        if (!present[static_cast<size_t>(e)])
            throw ContractError("training split lacks emotion '" + emotion_labels()[e] + "'");

    Rng init_rng = Rng::child(seed, {2});
    ParamStore ps;
    const int spatial = (m.resolution / 8) * (m.resolution / 8);
    Conv2dLayer conv1(ps, "img/conv1", 3, kC1, kKernel, 2, 1, init_rng);
    Conv2dLayer conv2(ps, "img/conv2", kC1, kC2, kKernel, 2, 1, init_rng);
    Conv2dLayer conv3(ps, "img/conv3", kC2, kC3, kKernel, 2, 1, init_rng);
    Linear head(ps, "img/head", kC3 * spatial, opt.d_e, init_rng);

    Rng pool_rng = Rng::child(seed, {3});
    std::vector<FramePick> pool =
        sample_frame_pool(m, m.train_identities, opt.pool, opt.frames_per_clip, pool_rng);

    Rng batch_rng = Rng::child(seed, {4});
    Adam adam(AdamConfig{opt.lr, 0.9, 0.999, 1e-8});
    // Polyak average of the encoder weights; the averaged net generalizes
    // measurably better than any single late iterate at this data scale.
    std::vector<Tensor> ema;
    for (const auto& p : ps.all()) ema.push_back(p->value.clone());
    const double ema_decay = 0.995;
    for (int step = 0; step < opt.steps; ++step) {
        if (step == opt.steps * 7 / 10) {
            AdamConfig decayed = adam.config();
            decayed.lr = opt.lr * 0.3;
            Adam next(decayed);
            next.set_steps(adam.steps());
            adam = next;
        }
        Tape t;
        EncoderVars v{use(t, conv1.w), use(t, conv1.b), use(t, conv2.w), use(t, conv2.b),
                      use(t, conv3.w), use(t, conv3.b), use(t, head.w),  use(t, head.b)};
        std::vector<Var> costs;
        const int max_shift = std::max(1, m.resolution / 16);
        for (int b = 0; b < opt.batch; ++b) {
            const FramePick& pick = pool[static_cast<size_t>(
                batch_rng.uniform_int(static_cast<int>(pool.size())))];
            int dy = batch_rng.uniform_int(2 * max_shift + 1) - max_shift;
            int dx = batch_rng.uniform_int(2 * max_shift + 1) - max_shift;
            Tensor frame = shifted_frame(load_frame(m, pick), dy, dx);
            for (std::int64_t k = 0; k < frame.numel(); ++k)
                frame.ref(k) += 0.02 * batch_rng.normal();
            Var emb = encoder_forward(t, t.constant(frame), v, m.resolution);
            Tensor target({1, opt.d_e});
            for (int i = 0; i < opt.d_e; ++i) target.ref(i) = space.anchors.at2(pick.label, i);
            // Anchors are unit vectors, so 1 - <emb, anchor> is the cosine loss.
            costs.push_back(add_const(neg(dotprod(emb, t.constant(target))), 1.0));
        }
        Var loss = mean_all(pack(costs));
        t.backward(loss);
        adam.step(ps, t, 1.0);
        const auto& params = ps.all();
        for (size_t i = 0; i < params.size(); ++i) {
            Tensor& avg = ema[i];
            const Tensor& cur = params[i]->value;
            for (std::int64_t k = 0; k < avg.numel(); ++k)
                avg.ref(k) = ema_decay * avg.at(k) + (1 - ema_decay) * cur.at(k);
        }
    }
    if (opt.steps > 0)
        for (size_t i = 0; i < ps.all().size(); ++i) ps.all()[i]->value = ema[i];

    space.w1 = conv1.w->value.clone();
    space.b1 = conv1.b->value.clone();
    space.w2 = conv2.w->value.clone();
    space.b2 = conv2.b->value.clone();
    space.w3 = conv3.w->value.clone();
    space.b3 = conv3.b->value.clone();
    space.wl = head.w->value.clone();
    space.bl = head.b->value.clone();
    space.validate();
    return space;
}

ImageEmbedEval evaluate_image_embeddings(const JointSpace& space, const DatasetManifest& m,
                                         bool held_out, int max_frames, Rng& rng) {
    const std::vector<int>& ids = held_out ? m.held_out_identities : m.train_identities;
    std::vector<FramePick> pool = sample_frame_pool(m, ids, max_frames, 4, rng);
    ImageEmbedEval ev;
    for (const FramePick& p : pool) {
        Tensor emb = space.image_embed(load_frame(m, p));
        int best = 0;
        double best_cos = -2, true_cos = 0;
        for (int e = 0; e < 8; ++e) {
            double dot = 0;
            for (int i = 0; i < space.d_e; ++i) dot += emb.at(i) * space.anchors.at2(e, i);
            if (dot > best_cos) {
                best_cos = dot;
                best = e;
            }
            if (e == p.label) true_cos = dot;
        }
        ev.accuracy += best == p.label ? 1.0 : 0.0;
        ev.mean_cos += true_cos;
        ++ev.count;
    }
    ev.accuracy /= ev.count;
    ev.mean_cos /= ev.count;
    return ev;
}

AudioEmotionEncoder::AudioEmotionEncoder(ParamStore& ps, const std::string& prefix, int window,
                                         int mel_bins, int d_model, int layers, int heads, int d_e,
                                         Rng& rng)
    : window_(window), mel_bins_(mel_bins), d_model_(d_model), d_e_(d_e) {
    cls_ = ps.create(prefix + "cls", rng.normal_tensor({1, d_model}, 0.02));
    pos_ = ps.create(prefix + "pos", rng.normal_tensor({window + 1, d_model}, 0.02));
    in_proj_ = Linear(ps, prefix + "in", mel_bins, d_model, rng);
    for (int l = 0; l < layers; ++l)
        layers_.emplace_back(ps, prefix + "layer" + std::to_string(l), d_model, heads, rng);
    final_ln_ = LayerNorm(ps, prefix + "final_ln", d_model);
    out_proj_ = Linear(ps, prefix + "out", d_model, d_e, rng);
}

Var AudioEmotionEncoder::forward(Tape& t, Var mel) const {
    if (mel.shape() != std::vector<int>{window_, mel_bins_})
        throw ShapeError("audio encoder expects [" + std::to_string(window_) + "," +
                         std::to_string(mel_bins_) + "], got " + shape_str(mel.shape()));
    Var x = in_proj_.forward(t, mel);                       // [T, d_model]
    Var rows = concat_rows({use(t, cls_), x});              // [T+1, d_model]
    rows = add(rows, use(t, pos_));
    for (const auto& layer : layers_) rows = layer.forward(t, rows);
    Var cls_out = final_ln_.forward(t, slice_rows(rows, 0, 1));
    return normalize_rows(t, out_proj_.forward(t, cls_out));  // [1, d_e]
}

Tensor AudioEmotionEncoder::embed(const Tensor& mel) const {
    Tape t;
    Var out = forward(t, t.constant(mel));
    return out.val().reshaped({d_e_}).clone();
}

namespace {

void check_z_emo_arity(ZEmoMode mode, bool has_text, bool has_audio, bool has_img) {
    const int n = (has_text ? 1 : 0) + (has_audio ? 1 : 0) + (has_img ? 1 : 0);
    if (mode == ZEmoMode::train_concat && n != 3)
        throw ContractError("train_concat requires text, audio, and image embeddings");
    if (mode == ZEmoMode::single_modality && n != 1)
        throw ContractError("single_modality requires exactly one embedding");
}

}  // namespace

Var assemble_z_emo(Tape& t, ZEmoMode mode, std::optional<Var> e_text, std::optional<Var> e_audio,
                   std::optional<Var> e_img) {
    check_z_emo_arity(mode, e_text.has_value(), e_audio.has_value(), e_img.has_value());
    if (mode == ZEmoMode::single_modality)
        return e_text ? *e_text : (e_audio ? *e_audio : *e_img);
    const int b = e_text->val().rows2d(), d = e_text->val().cols2d();
    if (e_audio->val().rows2d() != b || e_img->val().rows2d() != b ||
        e_audio->val().cols2d() != d || e_img->val().cols2d() != d)
        throw ShapeError("z_emo modalities disagree in shape");
    // Row-major [B,3D] reshaped to [3B,D] lands rows as (text, audio, image)
    // per sample.
    Var wide = concat_cols({*e_text, *e_audio, *e_img});
    (void)t;
    return reshape(wide, {3 * b, d});
}

Tensor assemble_z_emo(ZEmoMode mode, std::optional<Tensor> e_text, std::optional<Tensor> e_audio,
                      std::optional<Tensor> e_img) {
    Tape t;
    auto lift = [&](std::optional<Tensor>& o) -> std::optional<Var> {
        if (!o) return std::nullopt;
        return t.constant(*o);
    };
    auto text = lift(e_text), audio = lift(e_audio), img = lift(e_img);
    return assemble_z_emo(t, mode, text, audio, img).val().clone();
}

Var clip_alignment_loss(Tape& t, Var e_audio, const Tensor& e_text, const Tensor& e_img) {
    const int b = e_audio.val().rows2d(), d = e_audio.val().cols2d();
    if (e_text.rows2d() != b || e_text.cols2d() != d || e_img.rows2d() != b || e_img.cols2d() != d)
        throw ShapeError("alignment loss embeddings disagree in shape");
    Var audio_n = normalize_rows(t, e_audio);

    auto side = [&](const Tensor& frozen) {
        Tensor f = frozen.ndim() == 1 ? frozen.reshaped({1, d}) : frozen;
        Var fn = normalize_rows(t, t.constant(f));
        Var cos = row_sums(mul(audio_n, fn));  // [B,1]
        return add_const(neg(cos), 1.0);
    };
    return add(mean_all(side(e_img)), mean_all(side(e_text)));
}

}  // namespace emoface
