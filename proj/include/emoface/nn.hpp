#pragma once

#include <memory>
#include <string>
#include <vector>

#include "emoface/archive.hpp"
#include "emoface/tape.hpp"

namespace emoface {

// One persistent trainable tensor. `use()` stages it on a tape per forward;
// Adam reads the staged Var's gradient after backward.
struct Param {
    std::string name;
    Tensor value;
    Tensor adam_m, adam_v;  // allocated on first optimizer step
    Var staged;             // leaf on the most recent tape
    std::uint64_t staged_gen = ~0ULL;
    bool frozen = false;
};

// Registry of parameters owned by a model. Pointers remain stable for the
// registry's lifetime.
class ParamStore {
public:
    Param* create(const std::string& name, Tensor init);
    Param* find(const std::string& name);
    const std::vector<std::unique_ptr<Param>>& all() const { return params_; }

    void freeze_all();
    std::int64_t total_params() const;
    // fnv1a over parameter bytes in registration order; frozen-contract checks.
    std::uint64_t content_hash() const;

    void save_into(Archive& a, const std::string& prefix) const;
    void load_from(const Archive& a, const std::string& prefix);

private:
    std::vector<std::unique_ptr<Param>> params_;
};

// Stages the parameter on the tape and returns its Var.
Var use(Tape& t, Param* p);

// Rows rescaled to unit L2 norm; eps keeps the op finite at zero rows.
Var normalize_rows(Tape& t, Var x, double eps = 1e-24);

struct Linear {
    Param* w = nullptr;  // [in, out]
    Param* b = nullptr;  // [out]
    Linear() = default;
    Linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng);
    Var forward(Tape& t, Var x) const;  // [N,in] -> [N,out]
};

struct LayerNorm {
    Param* gain = nullptr;
    Param* bias = nullptr;
    double eps = 1e-5;
    LayerNorm() = default;
    LayerNorm(ParamStore& ps, const std::string& name, int dim);
    Var forward(Tape& t, Var x) const;
};

struct MultiheadAttention {
    int heads = 1, dim = 0;
    Linear wq, wk, wv, wo;
    MultiheadAttention() = default;
    MultiheadAttention(ParamStore& ps, const std::string& name, int dim, int heads, Rng& rng);
    Var forward(Tape& t, Var x) const;  // [N,d] -> [N,d], full self-attention
};

// Pre-norm Transformer encoder layer with a 2x-wide ReLU feed-forward.
struct TransformerLayer {
    LayerNorm ln1, ln2;
    MultiheadAttention attn;
    Linear ff1, ff2;
    TransformerLayer() = default;
    TransformerLayer(ParamStore& ps, const std::string& name, int dim, int heads, Rng& rng);
    Var forward(Tape& t, Var x) const;
};

struct Gru {
    int in = 0, hidden = 0;
    Linear xz, hz, xr, hr, xh, hh;  // gate projections; h-side carries no bias
    Gru() = default;
    Gru(ParamStore& ps, const std::string& name, int in, int hidden, Rng& rng);
    Var forward(Tape& t, Var x) const;  // [T,in] -> [T,hidden], unidirectional
};

struct Conv2dLayer {
    int ci = 0, co = 0, k = 3, stride = 1, pad = 1;
    Param* w = nullptr;  // [co, ci*k*k]
    Param* b = nullptr;  // [co]
    Conv2dLayer() = default;
    Conv2dLayer(ParamStore& ps, const std::string& name, int ci, int co, int k, int stride,
                int pad, Rng& rng, bool zero_init = false);
    Var forward(Tape& t, Var x) const;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam over a ParamStore. Gradient clipping by global norm when clip > 0.
class Adam {
public:
    explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

    // Applies one update using gradients staged on t. Returns the pre-clip
    // global gradient norm.
    double step(ParamStore& ps, Tape& t, double clip = 0.0);

    std::int64_t steps() const { return step_; }
    void set_steps(std::int64_t s) { step_ = s; }
    const AdamConfig& config() const { return cfg_; }

    void save_into(Archive& a, const ParamStore& ps, const std::string& prefix) const;
    void load_from(const Archive& a, ParamStore& ps, const std::string& prefix);

private:
    AdamConfig cfg_;
    std::int64_t step_ = 0;
};

}  // namespace emoface
