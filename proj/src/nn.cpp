#include "emoface/nn.hpp"

#include <cmath>

namespace emoface {

Param* ParamStore::create(const std::string& name, Tensor init) {
    if (find(name) != nullptr) throw ContractError("param '" + name + "' already registered");
    auto p = std::make_unique<Param>();
    p->name = name;
    p->value = std::move(init);
    params_.push_back(std::move(p));
    return params_.back().get();
}

Param* ParamStore::find(const std::string& name) {
    for (auto& p : params_)
        if (p->name == name) return p.get();
    return nullptr;
}

void ParamStore::freeze_all() {
    for (auto& p : params_) p->frozen = true;
}

std::int64_t ParamStore::total_params() const {
    std::int64_t n = 0;
    for (auto& p : params_) n += p->value.numel();
    return n;
}

std::uint64_t ParamStore::content_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (auto& p : params_) {
        h = fnv1a64(p->name.data(), p->name.size(), h);
        h = fnv1a64(p->value.data(), sizeof(double) * static_cast<size_t>(p->value.numel()), h);
    }
    return h;
}

void ParamStore::save_into(Archive& a, const std::string& prefix) const {
    for (auto& p : params_) a.put(prefix + p->name, p->value);
}

void ParamStore::load_from(const Archive& a, const std::string& prefix) {
    for (auto& p : params_) p->value = a.get(prefix + p->name, p->value.shape()).clone();
}

Var use(Tape& t, Param* p) {
    // One leaf per parameter per graph, so gradients accumulate in one place.
    if (p->staged.tape == &t && p->staged_gen == t.generation()) return p->staged;
    p->staged = t.leaf(p->value, !p->frozen);
    p->staged_gen = t.generation();
    return p->staged;
}

Var normalize_rows(Tape& t, Var x, double eps) {
    (void)t;
    Var inv = rsqrt_eps(row_sums(square(x)), eps);
    return mul_colvec(x, inv);
}

namespace {

Tensor glorot(Rng& rng, int in, int out) {
    double lim = std::sqrt(6.0 / (in + out));
    return rng.uniform_tensor({in, out}, -lim, lim);
}

}  // namespace

Linear::Linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng) {
    w = ps.create(name + ".w", glorot(rng, in, out));
    b = ps.create(name + ".b", Tensor::zeros({out}));
}

Var Linear::forward(Tape& t, Var x) const {
    return add_rowvec(matmul(x, use(t, w)), use(t, b));
}

LayerNorm::LayerNorm(ParamStore& ps, const std::string& name, int dim) {
    gain = ps.create(name + ".g", Tensor::full({dim}, 1.0));
    bias = ps.create(name + ".b", Tensor::zeros({dim}));
}

Var LayerNorm::forward(Tape& t, Var x) const {
    return add_rowvec(mul_rowvec(layer_norm(x, eps), use(t, gain)), use(t, bias));
}

MultiheadAttention::MultiheadAttention(ParamStore& ps, const std::string& name, int dim_,
                                       int heads_, Rng& rng)
    : heads(heads_), dim(dim_) {
    if (dim % heads != 0) throw ConfigError("attention dim must divide heads");
    wq = Linear(ps, name + ".q", dim, dim, rng);
    wk = Linear(ps, name + ".k", dim, dim, rng);
    wv = Linear(ps, name + ".v", dim, dim, rng);
    wo = Linear(ps, name + ".o", dim, dim, rng);
}

Var MultiheadAttention::forward(Tape& t, Var x) const {
    const int dh = dim / heads;
    Var q = wq.forward(t, x), k = wk.forward(t, x), v = wv.forward(t, x);
    std::vector<Var> outs;
    for (int h = 0; h < heads; ++h) {
        Var qh = slice_cols(q, h * dh, (h + 1) * dh);
        Var kh = slice_cols(k, h * dh, (h + 1) * dh);
        Var vh = slice_cols(v, h * dh, (h + 1) * dh);
        Var att = softmax_rows(scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(double(dh))));
        outs.push_back(matmul(att, vh));
    }
    return wo.forward(t, concat_cols(outs));
}

TransformerLayer::TransformerLayer(ParamStore& ps, const std::string& name, int dim, int heads,
                                   Rng& rng) {
    ln1 = LayerNorm(ps, name + ".ln1", dim);
    attn = MultiheadAttention(ps, name + ".attn", dim, heads, rng);
    ln2 = LayerNorm(ps, name + ".ln2", dim);
    ff1 = Linear(ps, name + ".ff1", dim, 2 * dim, rng);
    ff2 = Linear(ps, name + ".ff2", 2 * dim, dim, rng);
}

Var TransformerLayer::forward(Tape& t, Var x) const {
    x = add(x, attn.forward(t, ln1.forward(t, x)));
    x = add(x, ff2.forward(t, relu(ff1.forward(t, ln2.forward(t, x)))));
    return x;
}

Gru::Gru(ParamStore& ps, const std::string& name, int in_, int hidden_, Rng& rng)
    : in(in_), hidden(hidden_) {
    xz = Linear(ps, name + ".xz", in, hidden, rng);
    hz = Linear(ps, name + ".hz", hidden, hidden, rng);
    xr = Linear(ps, name + ".xr", in, hidden, rng);
    hr = Linear(ps, name + ".hr", hidden, hidden, rng);
    xh = Linear(ps, name + ".xh", in, hidden, rng);
    hh = Linear(ps, name + ".hh", hidden, hidden, rng);
}

Var Gru::forward(Tape& t, Var x) const {
    const int T = x.val().rows2d();
    Var h = t.constant(Tensor::zeros({1, hidden}));
    std::vector<Var> rows;
    rows.reserve(static_cast<size_t>(T));
    for (int i = 0; i < T; ++i) {
        Var xt = slice_rows(x, i, i + 1);
        Var z = sigmoid(add(xz.forward(t, xt), hz.forward(t, h)));
        Var r = sigmoid(add(xr.forward(t, xt), hr.forward(t, h)));
        Var hc = vtanh(add(xh.forward(t, xt), hh.forward(t, mul(r, h))));
        h = add(mul(sub(t.constant(Tensor::full({1, hidden}, 1.0)), z), h), mul(z, hc));
        rows.push_back(h);
    }
    return concat_rows(rows);
}

Conv2dLayer::Conv2dLayer(ParamStore& ps, const std::string& name, int ci_, int co_, int k_,
                         int stride_, int pad_, Rng& rng, bool zero_init)
    : ci(ci_), co(co_), k(k_), stride(stride_), pad(pad_) {
    int fan_in = ci * k * k;
    Tensor init = zero_init ? Tensor::zeros({co, fan_in})
                            : rng.normal_tensor({co, fan_in}, std::sqrt(2.0 / fan_in));
    w = ps.create(name + ".w", std::move(init));
    b = ps.create(name + ".b", Tensor::zeros({co}));
}

Var Conv2dLayer::forward(Tape& t, Var x) const {
    return add_channel_bias(conv2d(x, use(t, w), k, stride, pad), use(t, b));
}

double Adam::step(ParamStore& ps, Tape& t, double clip) {
    // Collect staged gradients first; skip frozen or unstaged parameters.
    std::vector<std::pair<Param*, Tensor>> grads;
    double sq = 0;
    for (auto& up : ps.all()) {
        Param* p = up.get();
        if (p->frozen || p->staged.tape != &t || p->staged_gen != t.generation()) continue;
        Tensor g = t.grad(p->staged);
        for (std::int64_t i = 0; i < g.numel(); ++i) sq += g.at(i) * g.at(i);
        grads.emplace_back(p, std::move(g));
    }
    double norm = std::sqrt(sq);
    double scale = (clip > 0 && norm > clip) ? clip / norm : 1.0;

    ++step_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    for (auto& [p, g] : grads) {
        if (!p->adam_m.defined()) {
            p->adam_m = Tensor::zeros(p->value.shape());
            p->adam_v = Tensor::zeros(p->value.shape());
        }
        double* m = p->adam_m.mut();
        double* v = p->adam_v.mut();
        double* w = p->value.mut();
        const double* gp = g.data();
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            double gi = gp[i] * scale;
            m[i] = b1 * m[i] + (1 - b1) * gi;
            v[i] = b2 * v[i] + (1 - b2) * gi * gi;
            w[i] -= cfg_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
        }
    }
    return norm;
}

void Adam::save_into(Archive& a, const ParamStore& ps, const std::string& prefix) const {
    a.meta[prefix + "step"] = std::to_string(step_);
    for (auto& p : ps.all()) {
        if (!p->adam_m.defined()) continue;
        a.put(prefix + "m/" + p->name, p->adam_m);
        a.put(prefix + "v/" + p->name, p->adam_v);
    }
}

void Adam::load_from(const Archive& a, ParamStore& ps, const std::string& prefix) {
    step_ = std::stoll(a.meta.at(prefix + "step"));
    for (auto& p : ps.all()) {
        if (!a.has(prefix + "m/" + p->name)) continue;
        p->adam_m = a.get(prefix + "m/" + p->name, p->value.shape()).clone();
        p->adam_v = a.get(prefix + "v/" + p->name, p->value.shape()).clone();
    }
}

}  // namespace emoface
