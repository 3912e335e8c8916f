#include "emoface/morphable.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>

#include "emoface/archive.hpp"

namespace emoface {

namespace {

// Face layout in (u right, v up) unit coordinates.
struct Disk {
    double u, v, r;
};

enum Zone : int { kZoneStatic = 0, kZoneEye, kZoneBrow, kZoneNose, kZoneMouth };

const Disk kEyeDisks[] = {{0.32, 0.60, 0.10}, {0.68, 0.60, 0.10}};
const Disk kBrowDisks[] = {{0.30, 0.735, 0.14}, {0.70, 0.735, 0.14}};
const Disk kNoseDisks[] = {{0.50, 0.47, 0.105}, {0.26, 0.42, 0.09}, {0.74, 0.42, 0.09}};
const Disk kMouthDisks[] = {{0.50, 0.28, 0.22}};

constexpr double kFocal = 0.9;

double dist(double u, double v, const Disk& d) { return std::hypot(u - d.u, v - d.v); }

// Zone membership with fixed priority so zones partition the vertices.
struct ZoneHit {
    int zone = kZoneStatic;
    Disk disk{0, 0, 1};
};

ZoneHit classify(double u, double v) {
    auto probe = [&](const Disk* disks, int n, int zone) -> ZoneHit {
        for (int i = 0; i < n; ++i)
            if (dist(u, v, disks[i]) < disks[i].r) return {zone, disks[i]};
        return {};
    };
    ZoneHit h;
    if ((h = probe(kEyeDisks, 2, kZoneEye)).zone) return h;
    if ((h = probe(kBrowDisks, 2, kZoneBrow)).zone) return h;
    if ((h = probe(kNoseDisks, 3, kZoneNose)).zone) return h;
    if ((h = probe(kMouthDisks, 1, kZoneMouth)).zone) return h;
    return {};
}

// C0 window: positive inside the zone disk, exactly zero at and beyond its rim.
double zone_window(double d_over_r) {
    const double k = 1.445;  // exp(-k d~^2), sigma = r/1.7
    double w = std::exp(-k * d_over_r * d_over_r) - std::exp(-k);
    return w > 0 ? w : 0.0;
}

struct Vert {
    double u, v;     // layout coords
    double x, y, z;  // model space
};

std::vector<Vert> sample_vertices(int count, Rng& rng) {
    int m = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(count))));
    std::vector<Vert> out(count);
    for (int i = 0; i < count; ++i) {
        int gx = i % m, gy = i / m;
        double u = (gx + 0.5 + 0.6 * (rng.uniform() - 0.5)) / m;
        double v = (gy + 0.5 + 0.6 * (rng.uniform() - 0.5)) / m;
        u = std::clamp(u, 0.0, 1.0);
        v = std::clamp(v, 0.0, 1.0);
        double x = (u - 0.5) * 1.5;
        double y = (v - 0.5) * 1.8;
        double ru = (u - 0.5) / 0.55, rv = (v - 0.5) / 0.62;
        double z = -0.55 * std::exp(-0.9 * (ru * ru + rv * rv));
        double dn = std::hypot(u - 0.5, v - 0.47);
        z -= 0.22 * std::exp(-dn * dn / (2 * 0.055 * 0.055));
        for (const Disk& e : kEyeDisks) {
            double de = dist(u, v, e);
            z += 0.05 * std::exp(-de * de / (2 * 0.05 * 0.05));
        }
        double bb = (v - 0.735) / 0.05, bu = (std::abs(u - 0.5) - 0.2) / 0.18;
        z -= 0.04 * std::exp(-bb * bb) * std::exp(-bu * bu);
        double dm = dist(u, v, kMouthDisks[0]);
        z -= 0.03 * std::exp(-dm * dm / (2 * 0.07 * 0.07));
        out[i] = {u, v, x, y, z};
    }
    return out;
}

// 68-point layout mirroring the standard face annotation order:
// 0-16 jaw, 17-26 brows, 27-35 nose, 36-47 eyes, 48-67 mouth.
std::vector<std::pair<double, double>> landmark_layout() {
    std::vector<std::pair<double, double>> pts;
    pts.reserve(68);
    const double pi = 3.14159265358979323846;
    for (int i = 0; i <= 16; ++i) {
        double th = pi + i * (pi / 16.0);
        pts.emplace_back(0.5 + 0.32 * std::cos(th), 0.62 + 0.52 * std::sin(th));
    }
    for (int i = 0; i < 5; ++i)
        pts.emplace_back(0.20 + 0.055 * i, 0.72 + 0.025 * std::sin(pi * i / 4.0));
    for (int i = 0; i < 5; ++i)
        pts.emplace_back(0.58 + 0.055 * i, 0.72 + 0.025 * std::sin(pi * (4 - i) / 4.0));
    for (int i = 0; i < 4; ++i) pts.emplace_back(0.5, 0.66 - 0.06 * i);
    const double base_v[5] = {0.430, 0.420, 0.415, 0.420, 0.430};
    for (int i = 0; i < 5; ++i) pts.emplace_back(0.42 + 0.04 * i, base_v[i]);
    for (int k = 0; k < 6; ++k) {
        double th = pi - k * (pi / 3.0);
        pts.emplace_back(0.32 + 0.055 * std::cos(th), 0.60 + 0.025 * std::sin(th));
    }
    for (int k = 0; k < 6; ++k) {
        double th = k * (pi / 3.0);
        pts.emplace_back(0.68 + 0.055 * std::cos(th), 0.60 + 0.025 * std::sin(th));
    }
    for (int k = 0; k < 12; ++k) {
        double th = pi + k * (2 * pi / 12.0);
        pts.emplace_back(0.5 + 0.13 * std::cos(th), 0.28 + 0.06 * std::sin(th));
    }
    for (int k = 0; k < 8; ++k) {
        double th = pi + k * (2 * pi / 8.0);
        pts.emplace_back(0.5 + 0.07 * std::cos(th), 0.28 + 0.025 * std::sin(th));
    }
    return pts;
}

std::vector<int> assign_landmarks(const std::vector<Vert>& verts) {
    auto pts = landmark_layout();
    std::vector<int> out;
    std::vector<char> used(verts.size(), 0);
    out.reserve(pts.size());
    for (auto [pu, pv] : pts) {
        int best = -1;
        double bd = 1e30;
        for (size_t i = 0; i < verts.size(); ++i) {
            if (used[i]) continue;
            double d = std::hypot(verts[i].u - pu, verts[i].v - pv);
            if (d < bd) {
                bd = d;
                best = static_cast<int>(i);
            }
        }
        if (best < 0) throw ContractError("landmark assignment exhausted vertices");
        used[best] = 1;
        out.push_back(best);
    }
    return out;
}

double soft_sign(double x) { return std::tanh(3.0 * x); }

// Hand-shaped displacement field for semantic columns; generic oscillatory
// fields for any extras. (du, dv, dz) in layout axes, dv maps to +y.
void zone_pattern(int zone, int ordinal, double uu, double vv, double w, double* d3) {
    double du = 0, dv = 0, dz = 0;
    if (zone == kZoneMouth) {
        switch (ordinal) {
            case 0: dv = -w * (1.2 - 0.8 * vv); dz = -0.3 * w; break;              // jaw open
            case 1: du = w * soft_sign(uu); break;                                  // stretch wide
            case 2: dv = w * std::abs(uu) * 1.5; du = 0.4 * w * soft_sign(uu) * std::abs(uu); break;  // corners up
            case 3: du = -w * soft_sign(uu); dz = -0.6 * w; dv = 0.2 * w; break;    // pucker
            case 4: dv = -0.8 * w * soft_sign(vv); dz = 0.2 * w; break;             // press
            default: break;
        }
    } else if (zone == kZoneEye) {
        switch (ordinal) {
            case 0: dv = -0.9 * w * std::tanh(4 * vv) + 0.1 * w * vv * vv; dz = 0.15 * w * (1 - vv * vv); break;  // blink
            case 1: dv = 0.8 * w * std::tanh(4 * vv) + 0.2 * w; du = 0.15 * w * soft_sign(uu); dz = -0.2 * w; break;  // widen
            case 2: dv = -0.5 * w * std::tanh(4 * vv) * (1 + 0.5 * std::cos(3.14159265 * uu));
                    du = -0.2 * w * uu; dz = 0.1 * w * uu * uu; break;              // squint
            default: break;
        }
    } else if (zone == kZoneBrow) {
        switch (ordinal) {
            case 0: dv = w; dz = -0.1 * w; break;                                   // raise
            case 1: du = -w * std::tanh(4 * uu); dv = -0.3 * w; dz = -0.15 * w * (1 - std::abs(uu)); break;  // furrow
            default: break;
        }
    } else if (zone == kZoneNose) {
        switch (ordinal) {
            case 0: dz = -w; du = 0.3 * w * soft_sign(uu); break;                   // puff
            case 1: dv = 0.6 * w; dz = -0.4 * w; du = -0.1 * w * uu; break;         // wrinkle
            default: break;
        }
    }
    int semantic = zone == kZoneMouth ? 5 : zone == kZoneEye ? 3 : 2;
    if (ordinal >= semantic) {
        double k = ordinal + 2.0, phi = 0.7 * ordinal;
        du = 0.7 * w * std::sin(k * uu + phi);
        dv = 0.7 * w * std::cos((k - 1) * vv + phi);
        dz = 0.5 * w * std::sin((k - 1) * (uu + vv));
    }
    d3[0] = du;
    d3[1] = dv;
    d3[2] = dz;
}

// Expression column c -> (zone, ordinal within zone). Cols 0,1 drive speech,
// col 2 blinks, 3..11 carry emotion offsets, extras cycle through zones.
void column_role(int c, int* zone, int* ordinal) {
    static const int z[12] = {kZoneMouth, kZoneMouth, kZoneEye,  kZoneMouth,
                              kZoneMouth, kZoneMouth, kZoneBrow, kZoneBrow,
                              kZoneEye,   kZoneEye,   kZoneNose, kZoneNose};
    static const int o[12] = {0, 1, 0, 2, 3, 4, 0, 1, 1, 2, 0, 1};
    if (c < 12) {
        *zone = z[c];
        *ordinal = o[c];
        return;
    }
    static const int cycle[4] = {kZoneMouth, kZoneEye, kZoneBrow, kZoneNose};
    *zone = cycle[(c - 12) % 4];
    *ordinal = 5 + (c - 12) / 4;
}

void mgs_orthonormalize(Eigen::MatrixXd& b, const char* what) {
    for (int j = 0; j < b.cols(); ++j) {
        double before = b.col(j).norm();
        for (int pass = 0; pass < 2; ++pass)
            for (int i = 0; i < j; ++i) b.col(j) -= b.col(i).dot(b.col(j)) * b.col(i);
        double after = b.col(j).norm();
        if (after < 1e-10 * std::max(1.0, before))
            throw NumericError(std::string(what) + ": dependent basis column " + std::to_string(j));
        b.col(j) /= after;
    }
}

Tensor to_tensor(const Eigen::MatrixXd& m) {
    Tensor t({static_cast<int>(m.rows()), static_cast<int>(m.cols())});
    for (int r = 0; r < m.rows(); ++r)
        for (int c = 0; c < m.cols(); ++c) t.ref2(r, c) = m(r, c);
    return t;
}

// Smooth bivariate cubic field plus faint white noise; the noise keeps any
// requested column count linearly independent.
Eigen::VectorXd smooth_field(const std::vector<Vert>& verts, Rng& rng) {
    const int n = static_cast<int>(verts.size());
    Eigen::VectorXd out(3 * n);
    double coef[3][10];
    for (auto& axis : coef)
        for (double& c : axis) c = rng.normal();
    for (int i = 0; i < n; ++i) {
        double p = 2 * verts[i].u - 1, q = 2 * verts[i].v - 1;
        double basis[10] = {1, p, q, p * p, p * q, q * q, p * p * p, p * p * q, p * q * q, q * q * q};
        for (int a = 0; a < 3; ++a) {
            double s = 0;
            for (int k = 0; k < 10; ++k) s += coef[a][k] * basis[k];
            out(3 * i + a) = s + 0.02 * rng.normal();
        }
    }
    return out;
}

Tensor build_mean_albedo(const std::vector<Vert>& verts) {
    const int n = static_cast<int>(verts.size());
    Tensor alb({n, 3});
    for (int i = 0; i < n; ++i) {
        double u = verts[i].u, v = verts[i].v;
        double c[3] = {0.78 + 0.06 * v, 0.60 + 0.04 * v, 0.50};
        auto mix = [&](double w, double r, double g, double b) {
            w = std::clamp(w, 0.0, 1.0);
            c[0] += w * (r - c[0]);
            c[1] += w * (g - c[1]);
            c[2] += w * (b - c[2]);
        };
        double ru = (u - 0.5) / 0.55, rv = (v - 0.5) / 0.62;
        double face_r2 = ru * ru + rv * rv;
        if (face_r2 > 1.0) mix(std::min(1.0, (face_r2 - 1.0) / 0.3), 0.10, 0.12, 0.16);
        double dm_u = (u - 0.5) / 0.14, dm_v = (v - 0.28) / 0.07;
        mix(std::exp(-(dm_u * dm_u + dm_v * dm_v) / 1.6), 0.72, 0.30, 0.30);
        for (const Disk& e : kEyeDisks) {
            double eu = (u - e.u) / 0.055, ev = (v - e.v) / 0.028;
            mix(std::exp(-(eu * eu + ev * ev) / 1.4), 0.15, 0.12, 0.12);
        }
        for (const Disk& b : kBrowDisks) {
            double bu = (u - b.u) / 0.10, bv = (v - b.v) / 0.022;
            mix(std::exp(-(bu * bu + bv * bv) / 1.4), 0.30, 0.22, 0.15);
        }
        for (int a = 0; a < 3; ++a) alb.ref2(i, a) = std::clamp(c[a], 0.0, 1.0);
    }
    return alb;
}

}  // namespace

const std::vector<std::string>& emotion_labels() {
    static const std::vector<std::string> labels = {"neutral",  "angry", "contempt", "disgusted",
                                                    "fear",     "happy", "sad",      "surprised"};
    return labels;
}

int emotion_index(const std::string& label) {
    const auto& ls = emotion_labels();
    for (size_t i = 0; i < ls.size(); ++i)
        if (ls[i] == label) return static_cast<int>(i);
    throw ConfigError("unknown emotion label '" + label + "'");
}

Tensor emotion_directions(int d_exp) {
    if (d_exp < kEmotionColStart + kEmotionColCount)
        throw ConfigError("emotion directions need at least 12 expression dims");
    Rng rng(0xE30);  // directions are a fixed convention, not run-dependent
    Eigen::MatrixXd raw(kEmotionColCount, 7);
    for (int r = 0; r < raw.rows(); ++r)
        for (int c = 0; c < raw.cols(); ++c) raw(r, c) = rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(raw);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(kEmotionColCount, 7);
    for (int c = 0; c < q.cols(); ++c) {
        int arg = 0;
        for (int r = 1; r < q.rows(); ++r)
            if (std::abs(q(r, c)) > std::abs(q(arg, c))) arg = r;
        if (q(arg, c) < 0) q.col(c) *= -1;
    }
    Tensor dirs = Tensor::zeros({8, d_exp});
    for (int e = 1; e < 8; ++e)
        for (int r = 0; r < kEmotionColCount; ++r) dirs.ref2(e, kEmotionColStart + r) = q(r, e - 1);
    return dirs;
}

int nearest_emotion_direction(const Tensor& beta_deviation, const Tensor& directions) {
    const int d_exp = directions.dim(1);
    if (beta_deviation.numel() != d_exp) throw ShapeError("nearest_emotion_direction: width mismatch");
    // Classify by the deviation's component in the emotion-column span.
    double norm2 = 0;
    for (int c = kEmotionColStart; c < kEmotionColStart + kEmotionColCount && c < d_exp; ++c)
        norm2 += beta_deviation.at(c) * beta_deviation.at(c);
    double norm = std::sqrt(norm2);
    if (norm < 1e-12) return 0;
    int best = 0;
    double best_cos = 0.5;  // anything weaker than every direction reads as neutral
    for (int e = 1; e < directions.dim(0); ++e) {
        double dot = 0;
        for (int c = 0; c < d_exp; ++c) dot += beta_deviation.at(c) * directions.at2(e, c);
        double cs = dot / norm;
        if (cs > best_cos) {
            best_cos = cs;
            best = e;
        }
    }
    return best;
}

MorphableModel build_toy_model(const ModelConfig& config, std::uint64_t seed) {
    const int v = config.vertices;
    if (v < 200) throw ConfigError("toy model needs at least 200 vertices");
    if (config.d_id > 3 * v || config.d_exp > 3 * v || config.d_tex > 3 * v)
        throw ConfigError("basis dimension exceeds 3*vertices");
    if (config.d_exp < kEmotionColStart + kEmotionColCount)
        throw ConfigError("expression basis needs at least 12 columns");

    Rng grid_rng = Rng::child(seed, {1});
    auto verts = sample_vertices(v, grid_rng);

    MorphableModel m;
    m.config = config;
    m.seed = seed;
    m.mean_shape = Tensor({v, 3});
    for (int i = 0; i < v; ++i) {
        m.mean_shape.ref2(i, 0) = verts[i].x;
        m.mean_shape.ref2(i, 1) = verts[i].y;
        m.mean_shape.ref2(i, 2) = verts[i].z;
    }
    m.mean_albedo = build_mean_albedo(verts);

    Eigen::MatrixXd bexp = Eigen::MatrixXd::Zero(3 * v, config.d_exp);
    for (int c = 0; c < config.d_exp; ++c) {
        int zone, ordinal;
        column_role(c, &zone, &ordinal);
        for (int i = 0; i < v; ++i) {
            ZoneHit h = classify(verts[i].u, verts[i].v);
            if (h.zone != zone) continue;
            double d = dist(verts[i].u, verts[i].v, h.disk);
            double w = zone_window(d / h.disk.r);
            double uu = (verts[i].u - h.disk.u) / h.disk.r;
            double vv = (verts[i].v - h.disk.v) / h.disk.r;
            double d3[3];
            zone_pattern(zone, ordinal, uu, vv, w, d3);
            bexp(3 * i + 0, c) = d3[0] * 0.75;  // du -> x scaled by layout aspect
            bexp(3 * i + 1, c) = d3[1] * 0.9;
            bexp(3 * i + 2, c) = d3[2] * 0.5;
        }
    }
    mgs_orthonormalize(bexp, "expression basis");

    Rng id_rng = Rng::child(seed, {2});
    Eigen::MatrixXd bid(3 * v, config.d_id);
    for (int c = 0; c < config.d_id; ++c) bid.col(c) = smooth_field(verts, id_rng);
    mgs_orthonormalize(bid, "identity basis");

    Rng tex_rng = Rng::child(seed, {3});
    Eigen::MatrixXd btex(3 * v, config.d_tex);
    for (int c = 0; c < config.d_tex; ++c) btex.col(c) = smooth_field(verts, tex_rng);
    mgs_orthonormalize(btex, "texture basis");

    m.basis_exp = to_tensor(bexp);
    m.basis_id = to_tensor(bid);
    m.basis_tex = to_tensor(btex);

    m.landmark_indices = assign_landmarks(verts);
    m.mouth_landmark_indices.assign(m.landmark_indices.begin() + 48, m.landmark_indices.end());
    m.validate();
    return m;
}

void MorphableModel::validate() const {
    const int v = mean_shape.dim(0);
    if (mean_shape.ndim() != 2 || mean_shape.dim(1) != 3) throw ContractError("mean_shape must be [V,3]");
    check_same_shape(mean_albedo, mean_shape, "mean_albedo");
    auto check_basis = [&](const Tensor& b, int d, const char* name) {
        if (b.ndim() != 2 || b.dim(0) != 3 * v || b.dim(1) != d)
            throw ContractError(std::string(name) + ": bad shape " + shape_str(b.shape()));
        Eigen::Map<const Eigen::MatrixXd> bm(b.data(), d, 3 * v);  // row-major transpose view
        Eigen::MatrixXd gram = bm * bm.transpose();
        double err = (gram - Eigen::MatrixXd::Identity(d, d)).cwiseAbs().maxCoeff();
        if (err > 1e-6) throw ContractError(std::string(name) + ": columns not orthonormal");
    };
    check_basis(basis_id, config.d_id, "basis_id");
    check_basis(basis_exp, config.d_exp, "basis_exp");
    check_basis(basis_tex, config.d_tex, "basis_tex");
    if (landmark_indices.size() != 68) throw ContractError("need 68 landmarks");
    std::vector<int> sorted = landmark_indices;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
        throw ContractError("duplicate landmark vertex");
    if (sorted.front() < 0 || sorted.back() >= v) throw ContractError("landmark vertex out of range");
    if (mouth_landmark_indices.size() != 20) throw ContractError("need 20 mouth landmarks");
    for (int i = 0; i < 20; ++i)
        if (mouth_landmark_indices[i] != landmark_indices[48 + i])
            throw ContractError("mouth landmarks must be entries 48..67");
    for (std::int64_t i = 0; i < mean_albedo.numel(); ++i)
        if (mean_albedo.at(i) < 0 || mean_albedo.at(i) > 1) throw ContractError("albedo outside [0,1]");
    if (!mean_shape.all_finite() || !basis_id.all_finite() || !basis_exp.all_finite() ||
        !basis_tex.all_finite())
        throw ContractError("non-finite model data");
}

void MorphableModel::save(const std::string& path) const {
    Archive a;
    a.put("mean_shape", mean_shape);
    a.put("mean_albedo", mean_albedo);
    a.put("basis_id", basis_id);
    a.put("basis_exp", basis_exp);
    a.put("basis_tex", basis_tex);
    Tensor lm({68});
    for (int i = 0; i < 68; ++i) lm.ref(i) = landmark_indices[i];
    a.put("landmarks", lm);
    a.meta["kind"] = "morphable_model";
    a.meta["vertices"] = std::to_string(config.vertices);
    a.meta["d_id"] = std::to_string(config.d_id);
    a.meta["d_exp"] = std::to_string(config.d_exp);
    a.meta["d_tex"] = std::to_string(config.d_tex);
    a.meta["d_e"] = std::to_string(config.d_e);
    a.meta["resolution"] = std::to_string(config.resolution);
    a.meta["sigma_scale"] = std::to_string(config.sigma_scale);
    a.meta["tau_z"] = std::to_string(config.tau_z);
    a.meta["eps_bg"] = std::to_string(config.eps_bg);
    a.meta["seed"] = std::to_string(seed);
    a.save(path);
}

MorphableModel MorphableModel::load(const std::string& path) {
    Archive a = Archive::load(path);
    if (a.meta.count("kind") == 0 || a.meta.at("kind") != "morphable_model")
        throw IoError(path + ": not a morphable model archive");
    MorphableModel m;
    m.config.vertices = std::stoi(a.meta.at("vertices"));
    m.config.d_id = std::stoi(a.meta.at("d_id"));
    m.config.d_exp = std::stoi(a.meta.at("d_exp"));
    m.config.d_tex = std::stoi(a.meta.at("d_tex"));
    m.config.d_e = std::stoi(a.meta.at("d_e"));
    m.config.resolution = std::stoi(a.meta.at("resolution"));
    m.config.sigma_scale = std::stod(a.meta.at("sigma_scale"));
    m.config.tau_z = std::stod(a.meta.at("tau_z"));
    m.config.eps_bg = std::stod(a.meta.at("eps_bg"));
    m.seed = std::stoull(a.meta.at("seed"));
    const int v = m.config.vertices;
    m.mean_shape = a.get("mean_shape", {v, 3});
    m.mean_albedo = a.get("mean_albedo", {v, 3});
    m.basis_id = a.get("basis_id", {3 * v, m.config.d_id});
    m.basis_exp = a.get("basis_exp", {3 * v, m.config.d_exp});
    m.basis_tex = a.get("basis_tex", {3 * v, m.config.d_tex});
    Tensor lm = a.get("landmarks", {68});
    m.landmark_indices.resize(68);
    for (int i = 0; i < 68; ++i) m.landmark_indices[i] = static_cast<int>(lm.at(i));
    m.mouth_landmark_indices.assign(m.landmark_indices.begin() + 48, m.landmark_indices.end());
    m.validate();
    return m;
}

Coefficients zero_coeffs(const ModelConfig& m) {
    return {Tensor::zeros({m.d_id}), Tensor::zeros({m.d_exp}), Tensor::zeros({m.d_tex}),
            Tensor::zeros({27}), Tensor::zeros({6})};
}

CoeffVars stage_coeffs(Tape& t, const Coefficients& c, bool requires_grad) {
    return {t.leaf(c.alpha, requires_grad), t.leaf(c.beta, requires_grad),
            t.leaf(c.delta, requires_grad), t.leaf(c.gamma, requires_grad),
            t.leaf(c.pose, requires_grad)};
}

Var assemble_geometry(Tape& t, const MorphableModel& m, Var alpha, Var beta) {
    const int v = m.vertices();
    Var off_id = matmul(t.constant(m.basis_id), reshape(alpha, {m.config.d_id, 1}));
    Var off_exp = matmul(t.constant(m.basis_exp), reshape(beta, {m.config.d_exp, 1}));
    return add(t.constant(m.mean_shape), reshape(add(off_id, off_exp), {v, 3}));
}

Var assemble_albedo(Tape& t, const MorphableModel& m, Var delta) {
    const int v = m.vertices();
    Var off = matmul(t.constant(m.basis_tex), reshape(delta, {m.config.d_tex, 1}));
    return clamp(add(t.constant(m.mean_albedo), reshape(off, {v, 3})), 0.0, 1.0);
}

namespace {

// ZYX Euler rotation from pose[0..2]; returns [3,3] on the tape.
Var rotation_matrix(Var pose) {
    Var rx = slice_cols(pose, 0, 1), ry = slice_cols(pose, 1, 2), rz = slice_cols(pose, 2, 3);
    Var sx = vsin(rx), cx = vcos(rx);
    Var sy = vsin(ry), cy = vcos(ry);
    Var sz = vsin(rz), cz = vcos(rz);
    Var r00 = mul(cz, cy);
    Var r01 = sub(mul(mul(cz, sy), sx), mul(sz, cx));
    Var r02 = add(mul(mul(cz, sy), cx), mul(sz, sx));
    Var r10 = mul(sz, cy);
    Var r11 = add(mul(mul(sz, sy), sx), mul(cz, cx));
    Var r12 = sub(mul(mul(sz, sy), cx), mul(cz, sx));
    Var r20 = neg(sy);
    Var r21 = mul(cy, sx);
    Var r22 = mul(cy, cx);
    return reshape(pack({r00, r01, r02, r10, r11, r12, r20, r21, r22}), {3, 3});
}

}  // namespace

Projection apply_pose_and_project(Tape& t, Var vertices, Var pose) {
    const int v = vertices.val().dim(0);
    Var r = rotation_matrix(pose);
    Var rotated = matmul(vertices, transpose(r));
    Var placed = add_rowvec(rotated, slice_cols(pose, 3, 6));
    Var tz = slice_cols(pose, 5, 6);
    Var s = scale(divide(t.constant(Tensor::full({1, 1}, 1.0)), add_const(tz, 1.0)), kFocal);
    Var uv = mul_rowvec(slice_cols(placed, 0, 2), concat_cols({s, s}));
    Var depth = reshape(slice_cols(placed, 2, 3), {v});
    return {uv, depth};
}

Var rotated_normals(Tape& t, Var vertices, Var pose) {
    (void)t;
    const int v = vertices.val().dim(0);
    Var centroid = scale(col_sums(vertices), 1.0 / v);
    Var centered = add_rowvec(vertices, neg(centroid));
    Var rotated = matmul(centered, transpose(rotation_matrix(pose)));
    Var inv_len = rsqrt_eps(row_sums(square(rotated)), 1e-12);
    return mul_colvec(rotated, inv_len);
}

Var shade_sh(Tape& t, Var normals, Var albedo, Var gamma) {
    const int v = normals.val().dim(0);
    Var nx = slice_cols(normals, 0, 1), ny = slice_cols(normals, 1, 2), nz = slice_cols(normals, 2, 3);
    std::vector<Var> b;
    b.push_back(t.constant(Tensor::full({v, 1}, 0.282095)));
    b.push_back(scale(ny, 0.488603));
    b.push_back(scale(nz, 0.488603));
    b.push_back(scale(nx, 0.488603));
    b.push_back(scale(mul(nx, ny), 1.092548));
    b.push_back(scale(mul(ny, nz), 1.092548));
    b.push_back(scale(add_const(scale(square(nz), 3.0), -1.0), 0.315392));
    b.push_back(scale(mul(nx, nz), 1.092548));
    b.push_back(scale(sub(square(nx), square(ny)), 0.546274));
    Var sh = concat_cols(b);
    std::vector<Var> chans;
    for (int ch = 0; ch < 3; ++ch) {
        Var g = reshape(slice_cols(gamma, 9 * ch, 9 * ch + 9), {9, 1});
        chans.push_back(mul(slice_cols(albedo, ch, ch + 1), matmul(sh, g)));
    }
    return clamp_min(concat_cols(chans), 0.0);
}

RenderOut render(Tape& t, const MorphableModel& m, const CoeffVars& c, int resolution) {
    if (resolution < 16) throw ConfigError("render resolution must be >= 16");
    Var shape = assemble_geometry(t, m, c.alpha, c.beta);
    Var albedo = assemble_albedo(t, m, c.delta);
    Projection proj = apply_pose_and_project(t, shape, c.pose);
    Var normals = rotated_normals(t, shape, c.pose);
    Var radiance = shade_sh(t, normals, albedo, c.gamma);
    SplatParams sp;
    sp.sigma = m.config.sigma_scale / resolution;
    sp.tau_z = m.config.tau_z;
    sp.eps_bg = m.config.eps_bg;
    Var out = splat_render(proj.uv, proj.depth, radiance, resolution, sp);
    Var flat = reshape(out, {4 * resolution, resolution});
    Var image = clamp(reshape(slice_rows(flat, 0, 3 * resolution), {3, resolution, resolution}), 0.0, 1.0);
    Var mask = reshape(slice_rows(flat, 3 * resolution, 4 * resolution), {1, resolution, resolution});
    return {image, mask};
}

Var blend(Tape& t, Var photo, const RenderOut& r) {
    (void)t;
    Var mask3 = concat_rows({r.mask, r.mask, r.mask});
    const auto& ps = photo.val().shape();
    Var m3 = reshape(mask3, {ps[0], ps[1], ps[2]});
    return add(mul(m3, r.image), mul(neg(add_const(m3, -1.0)), photo));
}

Var project_landmarks(Tape& t, const MorphableModel& m, Var alpha, Var beta, Var pose) {
    Var shape = assemble_geometry(t, m, alpha, beta);
    Projection proj = apply_pose_and_project(t, shape, pose);
    return gather_rows(proj.uv, m.landmark_indices);
}

RenderedFrame render_frame(const MorphableModel& m, const Coefficients& c, int resolution) {
    Tape t;
    CoeffVars v = stage_coeffs(t, c, false);
    RenderOut out = render(t, m, v, resolution);
    return {out.image.val().clone(), out.mask.val().clone()};
}

Tensor landmarks_of(const MorphableModel& m, const Coefficients& c) {
    Tape t;
    CoeffVars v = stage_coeffs(t, c, false);
    return project_landmarks(t, m, v.alpha, v.beta, v.pose).val().clone();
}

}  // namespace emoface
