#pragma once

#include <functional>
#include <vector>

#include "emoface/core.hpp"

namespace emoface {

class Tape;

// Handle into a tape. Cheap to copy; valid until the owning tape is cleared.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    bool defined() const { return tape != nullptr && id >= 0; }
    const Tensor& val() const;
    const std::vector<int>& shape() const;
};

// Reverse-mode autodiff over Tensor values. Nodes are appended in evaluation
// order, so ids already form a topological order; backward() walks them in
// reverse. Gradients are allocated lazily: a node whose grad buffer never
// materializes contributes nothing and its backward is skipped.
class Tape {
public:
    struct Node {
        Tensor value;
        Tensor grad;  // undefined until first accumulation
        bool requires_grad = false;
        std::function<void()> backward;  // empty for leaves/constants
    };

    Tape();

    Var leaf(Tensor value, bool requires_grad = true);
    Var constant(Tensor value) { return leaf(std::move(value), false); }
    Var emit(Tensor value, bool requires_grad, std::function<void()> backward);

    const Tensor& value(Var v) const;
    // Gradient of the last backward() root w.r.t. v; zeros if untouched.
    Tensor grad(Var v) const;
    bool requires_grad(Var v) const;

    // root must be a scalar; seeds d root/d root = 1.
    void backward(Var root);

    void clear();
    std::size_t size() const { return nodes_.size(); }
    // Globally unique per graph instance (fresh on construction and after
    // every clear), so cached Vars from any earlier graph can be detected
    // even if a new tape reuses this one's address.
    std::uint64_t generation() const { return generation_; }

    // Accumulate g into the node's grad buffer (no-op if grads not required).
    void add_grad(int id, const Tensor& g);
    Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
    const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
    bool grad_defined(int id) const { return nodes_[static_cast<size_t>(id)].grad.defined(); }

private:
    std::vector<Node> nodes_;
    std::uint64_t generation_ = 0;
};

inline const Tensor& Var::val() const { return tape->node(id).value; }
inline const std::vector<int>& Var::shape() const { return val().shape(); }

// ---- elementwise binary (same shape) ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var divide(Var a, Var b);

// ---- scalar-constant arithmetic ----
Var scale(Var a, double c);
Var add_const(Var a, double c);
Var neg(Var a);

// ---- broadcast against row/column vectors (a: [R,C] 2-D semantics) ----
Var add_rowvec(Var a, Var row);  // row: [C] or [1,C]
Var mul_rowvec(Var a, Var row);
Var add_colvec(Var a, Var col);  // col: [R,1] or [R]
Var mul_colvec(Var a, Var col);

// ---- linear algebra (tensors read as [rows2d, cols2d]) ----
Var matmul(Var a, Var b);
Var transpose(Var a);
Var dotprod(Var a, Var b);  // flat dot -> scalar

// ---- shape ----
Var reshape(Var a, std::vector<int> shape);
Var slice_rows(Var a, int r0, int r1);                // rows [r0, r1)
Var concat_rows(const std::vector<Var>& parts);
Var gather_rows(Var a, std::vector<int> indices);
Var slice_cols(Var a, int c0, int c1);
Var concat_cols(const std::vector<Var>& parts);
Var pack(const std::vector<Var>& scalars);  // n scalars -> [n]
Var repeat_interleave(Var a, int k);        // [n] -> [n*k], each entry k times

// ---- reductions ----
Var sum_all(Var a);
Var mean_all(Var a);
Var col_sums(Var a);  // [R,C] -> [1,C]
Var row_sums(Var a);  // [R,C] -> [R,1]

// ---- elementwise unary ----
Var vexp(Var a);
Var vlog(Var a);  // caller guarantees positive input
Var vsqrt(Var a);
Var square(Var a);
Var vabs(Var a);  // subgradient 0 at 0
Var vtanh(Var a);
Var sigmoid(Var a);
Var relu(Var a);
Var leaky_relu(Var a, double slope);
Var vsin(Var a);
Var vcos(Var a);
Var clamp(Var a, double lo, double hi);  // pass-through gradient inside
Var clamp_min(Var a, double lo);
Var rsqrt_eps(Var a, double eps);  // 1/sqrt(a + eps)

// ---- fused row-wise ----
Var softmax_rows(Var a);
Var layer_norm(Var a, double eps);  // per-row standardization, no affine
// Row-wise L2 norms [R,1]; exact 0 rows get subgradient 0 (loss-at-optimum
// stays exactly 0 and differentiable elsewhere).
Var l2_norm_rows(Var a);
Var l2_norm_all(Var a);  // Frobenius norm -> scalar, same zero guard

// ---- stop-gradient ----
Var detach(Var a);

// ---- image ops; feature maps are [C,H,W] ----
// w is [Co, Ci*k*k] with row order (ci, ki, kj); output [Co,H',W'].
Var conv2d(Var x, Var w, int k, int stride, int pad);
// Adjoint of conv2d's forward map into an input of size [Ci,out_h,out_w].
Var conv_transpose2d(Var g, Var w, int ci, int k, int stride, int pad, int out_h, int out_w);
Var add_channel_bias(Var x, Var b);  // b: [C]
Var upsample_nearest2(Var x);
Var avg_pool2(Var x);  // 2x2 mean, even dims required
// Bilinear sample of features at (identity grid + flow), border-clamped.
// flow: [2,H,W] in normalized coordinates where the image spans [-1,1].
Var grid_warp(Var features, Var flow);

// Differentiable Gaussian point splat. uv: [V,2] normalized coords, depth:
// [V] (smaller = closer), radiance: [V,3] nonnegative. Returns [4,res,res]:
// channels 0..2 RGB in [0,1], channel 3 coverage mask in [0,1). Pixels with
// no splat support are exactly zero in all channels.
struct SplatParams {
    double sigma;          // kernel width in normalized coords
    double tau_z = 0.1;    // soft-visibility temperature
    double eps_bg = 1e-2;  // background weight in the normalization
};
Var splat_render(Var uv, Var depth, Var radiance, int res, const SplatParams& p);

}  // namespace emoface
