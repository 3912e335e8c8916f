#include "emoface/tape.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <cstring>

namespace emoface {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

namespace {

Tape* owner(Var a, const char* where) {
    if (!a.defined()) throw ContractError(std::string(where) + ": undefined var");
    return a.tape;
}

Tape* owner2(Var a, Var b, const char* where) {
    Tape* t = owner(a, where);
    if (owner(b, where) != t) throw ContractError(std::string(where) + ": vars from different tapes");
    return t;
}

}  // namespace

namespace {
std::uint64_t next_generation() {
    static std::uint64_t counter = 0;
    return ++counter;
}
}  // namespace

Tape::Tape() : generation_(next_generation()) {}

Var Tape::leaf(Tensor value, bool requires_grad) {
    if (!value.defined()) throw ContractError("tape leaf: undefined tensor");
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::emit(Tensor value, bool requires_grad, std::function<void()> backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

const Tensor& Tape::value(Var v) const { return nodes_.at(static_cast<size_t>(v.id)).value; }

Tensor Tape::grad(Var v) const {
    const Node& n = nodes_.at(static_cast<size_t>(v.id));
    if (n.grad.defined()) return n.grad;
    return Tensor::zeros(n.value.shape());
}

bool Tape::requires_grad(Var v) const { return nodes_.at(static_cast<size_t>(v.id)).requires_grad; }

void Tape::add_grad(int id, const Tensor& g) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.requires_grad) return;
    if (!n.grad.defined()) n.grad = Tensor::zeros(n.value.shape());
    if (n.grad.numel() != g.numel())
        throw ShapeError("grad accumulation shape mismatch: " + shape_str(n.grad.shape()) + " vs " +
                         shape_str(g.shape()));
    double* dst = n.grad.mut();
    const double* src = g.data();
    for (std::int64_t i = 0; i < g.numel(); ++i) dst[i] += src[i];
}

void Tape::backward(Var root) {
    if (root.tape != this) throw ContractError("backward: root from another tape");
    const Node& r = nodes_.at(static_cast<size_t>(root.id));
    if (r.value.numel() != 1) throw ContractError("backward: root must be scalar");
    if (!r.requires_grad) throw ContractError("backward: root does not require grad");
    for (auto& n : nodes_) n.grad = Tensor();
    nodes_[static_cast<size_t>(root.id)].grad = Tensor::full(r.value.shape(), 1.0);
    for (int i = root.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (n.grad.defined() && n.backward) n.backward();
    }
}

void Tape::clear() {
    nodes_.clear();
    generation_ = next_generation();
}

// ---- op helpers ----

namespace {

// Emits an op node and wires its backward closure afterwards so the closure
// can capture the output id.
template <typename Fn>
Var finish(Tape* t, Tensor out, bool rg, Fn&& make_backward) {
    Var o = t->emit(std::move(out), rg, {});
    if (rg) t->node(o.id).backward = make_backward(o.id);
    return o;
}

void require_2d_compatible(const Tensor& v, const char* where) {
    if (v.ndim() < 1) throw ShapeError(std::string(where) + ": scalar where matrix expected");
}

}  // namespace

Var add(Var a, Var b) {
    Tape* t = owner2(a, b, "add");
    check_same_shape(a.val(), b.val(), "add");
    Tensor out = a.val().clone();
    double* p = out.mut();
    const double* q = b.val().data();
    for (std::int64_t i = 0; i < out.numel(); ++i) p[i] += q[i];
    bool rg = t->requires_grad(a) || t->requires_grad(b);
    int ai = a.id, bi = b.id;
    return finish(t, std::move(out), rg, [t, ai, bi](int oi) {
        return [t, ai, bi, oi]() {
            const Tensor& g = t->node(oi).grad;
            t->add_grad(ai, g);
            t->add_grad(bi, g);
        };
    });
}

Var sub(Var a, Var b) {
    Tape* t = owner2(a, b, "sub");
    check_same_shape(a.val(), b.val(), "sub");
    Tensor out = a.val().clone();
    double* p = out.mut();
    const double* q = b.val().data();
    for (std::int64_t i = 0; i < out.numel(); ++i) p[i] -= q[i];
    bool rg = t->requires_grad(a) || t->requires_grad(b);
    int ai = a.id, bi = b.id;
    return finish(t, std::move(out), rg, [t, ai, bi](int oi) {
        return [t, ai, bi, oi]() {
            const Tensor& g = t->node(oi).grad;
            t->add_grad(ai, g);
            Tensor ng(g.shape());
            double* p = ng.mut();
            const double* q = g.data();
            for (std::int64_t i = 0; i < g.numel(); ++i) p[i] = -q[i];
            t->add_grad(bi, ng);
        };
    });
}

Var mul(Var a, Var b) {
    Tape* t = owner2(a, b, "mul");
    check_same_shape(a.val(), b.val(), "mul");
    Tensor out(a.val().shape());
    double* p = out.mut();
    const double* pa = a.val().data();
    const double* pb = b.val().data();
    for (std::int64_t i = 0; i < out.numel(); ++i) p[i] = pa[i] * pb[i];
    bool rg = t->requires_grad(a) || t->requires_grad(b);
    int ai = a.id, bi = b.id;
    return finish(t, std::move(out), rg, [t, ai, bi](int oi) {
        return [t, ai, bi, oi]() {
            const Tensor& g = t->node(oi).grad;
            const Tensor& va = t->node(ai).value;
            const Tensor& vb = t->node(bi).value;
            if (t->node(ai).requires_grad) {
                Tensor ga(g.shape());
                for (std::int64_t i = 0; i < g.numel(); ++i) ga.ref(i) = g.at(i) * vb.at(i);
                t->add_grad(ai, ga);
            }
            if (t->node(bi).requires_grad) {
                Tensor gb(g.shape());
                for (std::int64_t i = 0; i < g.numel(); ++i) gb.ref(i) = g.at(i) * va.at(i);
                t->add_grad(bi, gb);
            }
        };
    });
}

Var divide(Var a, Var b) {
    Tape* t = owner2(a, b, "divide");
    check_same_shape(a.val(), b.val(), "divide");
    Tensor out(a.val().shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out.ref(i) = a.val().at(i) / b.val().at(i);
    bool rg = t->requires_grad(a) || t->requires_grad(b);
    int ai = a.id, bi = b.id;
    return finish(t, std::move(out), rg, [t, ai, bi](int oi) {
        return [t, ai, bi, oi]() {
            const Tensor& g = t->node(oi).grad;
            const Tensor& vo = t->node(oi).value;
            const Tensor& vb = t->node(bi).value;
            if (t->node(ai).requires_grad) {
                Tensor ga(g.shape());
                for (std::int64_t i = 0; i < g.numel(); ++i) ga.ref(i) = g.at(i) / vb.at(i);
                t->add_grad(ai, ga);
            }
            if (t->node(bi).requires_grad) {
                Tensor gb(g.shape());
                for (std::int64_t i = 0; i < g.numel(); ++i)
                    gb.ref(i) = -g.at(i) * vo.at(i) / vb.at(i);
                t->add_grad(bi, gb);
            }
        };
    });
}

Var scale(Var a, double c) {
    Tape* t = owner(a, "scale");
    Tensor out(a.val().shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out.ref(i) = c * a.val().at(i);
    bool rg = t->requires_grad(a);
    int ai = a.id;
    return finish(t, std::move(out), rg, [t, ai, c](int oi) {
        return [t, ai, c, oi]() {
            const Tensor& g = t->node(oi).grad;
            Tensor ga(g.shape());
            for (std::int64_t i = 0; i < g.numel(); ++i) ga.ref(i) = c * g.at(i);
            t->add_grad(ai, ga);
        };
    });
}

Var add_const(Var a, double c) {
    Tape* t = owner(a, "add_const");
    Tensor out(a.val().shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out.ref(i) = c + a.val().at(i);
    bool rg = t->requires_grad(a);
    int ai = a.id;
    return finish(t, std::move(out), rg, [t, ai](int oi) {
        return [t, ai, oi]() { t->add_grad(ai, t->node(oi).grad); };
    });
}

Var neg(Var a) { return scale(a, -1.0); }

namespace {

enum class BroadcastKind { AddRow, MulRow, AddCol, MulCol };

Var broadcast_op(Var a, Var v, BroadcastKind kind, const char* where) {
    Tape* t = owner2(a, v, where);
    require_2d_compatible(a.val(), where);
    const int R = a.val().rows2d(), C = a.val().cols2d();
    const bool row = (kind == BroadcastKind::AddRow || kind == BroadcastKind::MulRow);
    const bool isadd = (kind == BroadcastKind::AddRow || kind == BroadcastKind::AddCol);
    const std::int64_t need = row ? C : R;
    if (v.val().numel() != need)
        throw ShapeError(std::string(where) + ": vector numel " + std::to_string(v.val().numel()) +
                         " does not match " + std::to_string(need));
    Tensor out(a.val().shape());
    const double* pa = a.val().data();
    const double* pv = v.val().data();
    double* po = out.mut();
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) {
            double w = pv[row ? c : r];
            po[static_cast<std::int64_t>(r) * C + c] =
                isadd ? pa[static_cast<std::int64_t>(r) * C + c] + w
                      : pa[static_cast<std::int64_t>(r) * C + c] * w;
        }
    bool rg = t->requires_grad(a) || t->requires_grad(v);
    int ai = a.id, vi = v.id;
    return finish(t, std::move(out), rg, [t, ai, vi, R, C, row, isadd](int oi) {
        return [t, ai, vi, R, C, row, isadd, oi]() {
            const Tensor& g = t->node(oi).grad;
            const Tensor& va = t->node(ai).value;
            const Tensor& vv = t->node(vi).value;
            if (t->node(ai).requires_grad) {
                if (isadd) {
                    t->add_grad(ai, g);
                } else {
                    Tensor ga(va.shape());
                    for (int r = 0; r < R; ++r)
                        for (int c = 0; c < C; ++c)
                            ga.ref(static_cast<std::int64_t>(r) * C + c) =
                                g.at(static_cast<std::int64_t>(r) * C + c) * vv.at(row ? c : r);
                    t->add_grad(ai, ga);
                }
            }
            if (t->node(vi).requires_grad) {
                Tensor gv(vv.shape());
                for (int r = 0; r < R; ++r)
                    for (int c = 0; c < C; ++c) {
                        double term = g.at(static_cast<std::int64_t>(r) * C + c);
                        if (!isadd) term *= va.at(static_cast<std::int64_t>(r) * C + c);
                        gv.ref(row ? c : r) += term;
                    }
                t->add_grad(vi, gv);
            }
        };
    });
}

}  // namespace

Var add_rowvec(Var a, Var row) { return broadcast_op(a, row, BroadcastKind::AddRow, "add_rowvec"); }
Var mul_rowvec(Var a, Var row) { return broadcast_op(a, row, BroadcastKind::MulRow, "mul_rowvec"); }
Var add_colvec(Var a, Var col) { return broadcast_op(a, col, BroadcastKind::AddCol, "add_colvec"); }
Var mul_colvec(Var a, Var col) { return broadcast_op(a, col, BroadcastKind::MulCol, "mul_colvec"); }

Var matmul(Var a, Var b) {
    Tape* t = owner2(a, b, "matmul");
    const int R = a.val().rows2d(), K = a.val().cols2d();
    const int K2 = b.val().rows2d(), C = b.val().cols2d();
    if (K != K2)
        throw ShapeError("matmul: inner dims " + std::to_string(K) + " vs " + std::to_string(K2));
    Tensor out({R, C});
    {
        CMap A(a.val().data(), R, K);
        CMap B(b.val().data(), K, C);
        MMap O(out.mut(), R, C);
        O.noalias() = A * B;
    }
    bool rg = t->requires_grad(a) || t->requires_grad(b);
    int ai = a.id, bi = b.id;
    return finish(t, std::move(out), rg, [t, ai, bi, R, K, C](int oi) {
        return [t, ai, bi, R, K, C, oi]() {
            const Tensor& g = t->node(oi).grad;
            CMap G(g.data(), R, C);
            if (t->node(ai).requires_grad) {
                Tensor ga(t->node(ai).value.shape());
                CMap B(t->node(bi).value.data(), K, C);
                MMap GA(ga.mut(), R, K);
                GA.noalias() = G * B.transpose();
                t->add_grad(ai, ga);
            }
            if (t->node(bi).requires_grad) {
                Tensor gb(t->node(bi).value.shape());
                CMap A(t->node(ai).value.data(), R, K);
                MMap GB(gb.mut(), K, C);
                GB.noalias() = A.transpose() * G;
                t->add_grad(bi, gb);
            }
        };
    });
}

Var transpose(Var a) {
    Tape* t = owner(a, "transpose");
    const int R = a.val().rows2d(), C = a.val().cols2d();
    Tensor out({C, R});
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c)
            out.ref2(c, r) = a.val().at(static_cast<std::int64_t>(r) * C + c);
    bool rg = t->requires_grad(a);
    int ai = a.id;
    return finish(t, std::move(out), rg, [t, ai, R, C](int oi) {
        return [t, ai, R, C, oi]() {
            const Tensor& g = t->node(oi).grad;
            Tensor ga(t->node(ai).value.shape());
            for (int r = 0; r < R; ++r)
                for (int c = 0; c < C; ++c)
                    ga.ref(static_cast<std::int64_t>(r) * C + c) = g.at2(c, r);
            t->add_grad(ai, ga);
        };
    });
}

Var dotprod(Var a, Var b) {
    Tape* t = owner2(a, b, "dotprod");
    if (a.val().numel() != b.val().numel()) throw ShapeError("dotprod: numel mismatch");
    double s = 0;
    for (std::int64_t i = 0; i < a.val().numel(); ++i) s += a.val().at(i) * b.val().at(i);
    bool rg = t->requires_grad(a) || t->requires_grad(b);
    int ai = a.id, bi = b.id;
    return finish(t, Tensor::scalar(s), rg, [t, ai, bi](int oi) {
        return [t, ai, bi, oi]() {
            double g0 = t->node(oi).grad.at(0);
            const Tensor& va = t->node(ai).value;
            const Tensor& vb = t->node(bi).value;
            if (t->node(ai).requires_grad) {
                Tensor ga(va.shape());
                for (std::int64_t i = 0; i < va.numel(); ++i) ga.ref(i) = g0 * vb.at(i);
                t->add_grad(ai, ga);
            }
            if (t->node(bi).requires_grad) {
                Tensor gb(vb.shape());
                for (std::int64_t i = 0; i < vb.numel(); ++i) gb.ref(i) = g0 * va.at(i);
                t->add_grad(bi, gb);
            }
        };
    });
}

Var reshape(Var a, std::vector<int> shape) {
    Tape* t = owner(a, "reshape");
    Tensor out = a.val().reshaped(std::move(shape));
    bool rg = t->requires_grad(a);
    int ai = a.id;
    return finish(t, std::move(out), rg, [t, ai](int oi) {
        return [t, ai, oi]() {
            t->add_grad(ai, t->node(oi).grad.reshaped(t->node(ai).value.shape()));
        };
    });
}

Var slice_rows(Var a, int r0, int r1) {
    Tape* t = owner(a, "slice_rows");
    const int R = a.val().rows2d(), C = a.val().cols2d();
    if (r0 < 0 || r1 > R || r0 >= r1) throw ShapeError("slice_rows: bad range");
    Tensor out({r1 - r0, C});
    std::memcpy(out.mut(), a.val().data() + static_cast<std::int64_t>(r0) * C,
                sizeof(double) * static_cast<size_t>((r1 - r0)) * C);
    bool rg = t->requires_grad(a);
    int ai = a.id;
    return finish(t, std::move(out), rg, [t, ai, r0, C](int oi) {
        return [t, ai, r0, C, oi]() {
            const Tensor& g = t->node(oi).grad;
            Tensor ga = Tensor::zeros(t->node(ai).value.shape());
            std::memcpy(ga.mut() + static_cast<std::int64_t>(r0) * C, g.data(),
                        sizeof(double) * static_cast<size_t>(g.numel()));
            t->add_grad(ai, ga);
        };
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: empty");
    Tape* t = owner(parts[0], "concat_rows");
    const int C = parts[0].val().cols2d();
    int R = 0;
    bool rg = false;
    for (Var p : parts) {
        if (p.tape != t) throw ContractError("concat_rows: mixed tapes");
        if (p.val().cols2d() != C) throw ShapeError("concat_rows: column mismatch");
        R += p.val().rows2d();
        rg = rg || t->requires_grad(p);
    }
    Tensor out({R, C});
    std::int64_t off = 0;
    std::vector<int> ids;
    std::vector<int> rows;
    for (Var p : parts) {
        std::memcpy(out.mut() + off, p.val().data(), sizeof(double) * static_cast<size_t>(p.val().numel()));
        off += p.val().numel();
        ids.push_back(p.id);
        rows.push_back(p.val().rows2d());
    }
    return finish(t, std::move(out), rg, [t, ids, rows, C](int oi) {
        return [t, ids, rows, C, oi]() {
            const Tensor& g = t->node(oi).grad;
            std::int64_t off = 0;
            for (size_t k = 0; k < ids.size(); ++k) {
                std::int64_t n = static_cast<std::int64_t>(rows[k]) * C;
                if (t->node(ids[k]).requires_grad) {
                    Tensor gp(t->node(ids[k]).value.shape());
                    std::memcpy(gp.mut(), g.data() + off, sizeof(double) * static_cast<size_t>(n));
                    t->add_grad(ids[k], gp);
                }
                off += n;
            }
        };
    });
}

Var gather_rows(Var a, std::vector<int> indices) {
    Tape* t = owner(a, "gather_rows");
    const int R = a.val().rows2d(), C = a.val().cols2d();
    for (int ix : indices)
        if (ix < 0 || ix >= R) throw ShapeError("gather_rows: index out of range");
    Tensor out({static_cast<int>(indices.size()), C});
    for (size_t k = 0; k < indices.size(); ++k)
        std::memcpy(out.mut() + static_cast<std::int64_t>(k) * C,
                    a.val().data() + static_cast<std::int64_t>(indices[k]) * C,
                    sizeof(double) * static_cast<size_t>(C));
    bool rg = t->requires_grad(a);
    int ai = a.id;
    return finish(t, std::move(out), rg, [t, ai, indices, C](int oi) {
        return [t, ai, indices, C, oi]() {
            const Tensor& g = t->node(oi).grad;
            Tensor ga = Tensor::zeros(t->node(ai).value.shape());
            for (size_t k = 0; k < indices.size(); ++k)
                for (int c = 0; c < C; ++c)
                    ga.ref(static_cast<std::int64_t>(indices[k]) * C + c) +=
                        g.at(static_cast<std::int64_t>(k) * C + c);
            t->add_grad(ai, ga);
        };
    });
}

Var slice_cols(Var a, int c0, int c1) {
    Tape* t = owner(a, "slice_cols");
    const int R = a.val().rows2d(), C = a.val().cols2d();
    if (c0 < 0 || c1 > C || c0 >= c1) throw ShapeError("slice_cols: bad range");
    Tensor out({R, c1 - c0});
    for (int r = 0; r < R; ++r)
        std::memcpy(out.mut() + static_cast<std::int64_t>(r) * (c1 - c0),
                    a.val().data() + static_cast<std::int64_t>(r) * C + c0,
                    sizeof(double) * static_cast<size_t>(c1 - c0));
    bool rg = t->requires_grad(a);
    int ai = a.id;
    return finish(t, std::move(out), rg, [t, ai, c0, c1, R, C](int oi) {
        return [t, ai, c0, c1, R, C, oi]() {
            const Tensor& g = t->node(oi).grad;
            Tensor ga = Tensor::zeros(t->node(ai).value.shape());
            for (int r = 0; r < R; ++r)
                for (int c = c0; c < c1; ++c)
                    ga.ref(static_cast<std::int64_t>(r) * C + c) =
                        g.at(static_cast<std::int64_t>(r) * (c1 - c0) + (c - c0));
            t->add_grad(ai, ga);
        };
    });
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: empty");
    Tape* t = owner(parts[0], "concat_cols");
    const int R = parts[0].val().rows2d();
    int C = 0;
    bool rg = false;
    for (Var p : parts) {
        if (p.tape != t) throw ContractError("concat_cols: mixed tapes");
        if (p.val().rows2d() != R) throw ShapeError("concat_cols: row mismatch");
        C += p.val().cols2d();
        rg = rg || t->requires_grad(p);
    }
    Tensor out({R, C});
    std::vector<int> ids, cols, offs;
    int off = 0;
    for (Var p : parts) {
        int pc = p.val().cols2d();
        for (int r = 0; r < R; ++r)
            std::memcpy(out.mut() + static_cast<std::int64_t>(r) * C + off,
                        p.val().data() + static_cast<std::int64_t>(r) * pc,
                        sizeof(double) * static_cast<size_t>(pc));
        ids.push_back(p.id);
        cols.push_back(pc);
        offs.push_back(off);
        off += pc;
    }
    return finish(t, std::move(out), rg, [t, ids, cols, offs, R, C](int oi) {
        return [t, ids, cols, offs, R, C, oi]() {
            const Tensor& g = t->node(oi).grad;
            for (size_t k = 0; k < ids.size(); ++k) {
                if (!t->node(ids[k]).requires_grad) continue;
                Tensor gp(t->node(ids[k]).value.shape());
                for (int r = 0; r < R; ++r)
                    std::memcpy(gp.mut() + static_cast<std::int64_t>(r) * cols[k],
                                g.data() + static_cast<std::int64_t>(r) * C + offs[k],
                                sizeof(double) * static_cast<size_t>(cols[k]));
                t->add_grad(ids[k], gp);
            }
        };
    });
}

Var pack(const std::vector<Var>& scalars) {
    if (scalars.empty()) throw ContractError("pack: empty");
    Tape* t = owner(scalars[0], "pack");
    Tensor out({static_cast<int>(scalars.size())});
    bool rg = false;
    std::vector<int> ids;
    for (size_t i = 0; i < scalars.size(); ++i) {
        if (scalars[i].tape != t) throw ContractError("pack: mixed tapes");
        if (scalars[i].val().numel() != 1) throw ShapeError("pack: non-scalar input");
        out.ref(static_cast<std::int64_t>(i)) = scalars[i].val().at(0);
        rg = rg || t->requires_grad(scalars[i]);
        ids.push_back(scalars[i].id);
    }
    return finish(t, std::move(out), rg, [t, ids](int oi) {
        return [t, ids, oi]() {
            const Tensor& g = t->node(oi).grad;
            for (size_t i = 0; i < ids.size(); ++i)
                t->add_grad(ids[i], Tensor::scalar(g.at(static_cast<std::int64_t>(i))));
        };
    });
}

Var repeat_interleave(Var a, int k) {
    Tape* t = owner(a, "repeat_interleave");
    if (k <= 0) throw ShapeError("repeat_interleave: k must be positive");
    const std::int64_t n = a.val().numel();
    Tensor out({static_cast<int>(n * k)});
    for (std::int64_t i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j) out.ref(i * k + j) = a.val().at(i);
    bool rg = t->requires_grad(a);
    int ai = a.id;
    return finish(t, std::move(out), rg, [t, ai, k, n](int oi) {
        return [t, ai, k, n, oi]() {
            const Tensor& g = t->node(oi).grad;
            Tensor ga(t->node(ai).value.shape());
            for (std::int64_t i = 0; i < n; ++i) {
                double s = 0;
                for (int j = 0; j < k; ++j) s += g.at(i * k + j);
                ga.ref(i) = s;
            }
            t->add_grad(ai, ga);
        };
    });
}

Var sum_all(Var a) {
    Tape* t = owner(a, "sum_all");
    bool rg = t->requires_grad(a);
    int ai = a.id;
    return finish(t, Tensor::scalar(a.val().sum()), rg, [t, ai](int oi) {
        return [t, ai, oi]() {
            double g0 = t->node(oi).grad.at(0);
            t->add_grad(ai, Tensor::full(t->node(ai).value.shape(), g0));
        };
    });
}

Var mean_all(Var a) {
    Tape* t = owner(a, "mean_all");
    const double n = static_cast<double>(a.val().numel());
    bool rg = t->requires_grad(a);
    int ai = a.id;
    return finish(t, Tensor::scalar(a.val().sum() / n), rg, [t, ai, n](int oi) {
        return [t, ai, n, oi]() {
            double g0 = t->node(oi).grad.at(0) / n;
            t->add_grad(ai, Tensor::full(t->node(ai).value.shape(), g0));
        };
    });
}

Var col_sums(Var a) {
    Tape* t = owner(a, "col_sums");
    const int R = a.val().rows2d(), C = a.val().cols2d();
    Tensor out = Tensor::zeros({1, C});
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) out.ref(c) += a.val().at(static_cast<std::int64_t>(r) * C + c);
    bool rg = t->requires_grad(a);
    int ai = a.id;
    return finish(t, std::move(out), rg, [t, ai, R, C](int oi) {
        return [t, ai, R, C, oi]() {
            const Tensor& g = t->node(oi).grad;
            Tensor ga(t->node(ai).value.shape());
            for (int r = 0; r < R; ++r)
                for (int c = 0; c < C; ++c) ga.ref(static_cast<std::int64_t>(r) * C + c) = g.at(c);
            t->add_grad(ai, ga);
        };
    });
}

Var row_sums(Var a) {
    Tape* t = owner(a, "row_sums");
    const int R = a.val().rows2d(), C = a.val().cols2d();
    Tensor out = Tensor::zeros({R, 1});
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) out.ref(r) += a.val().at(static_cast<std::int64_t>(r) * C + c);
    bool rg = t->requires_grad(a);
    int ai = a.id;
    return finish(t, std::move(out), rg, [t, ai, R, C](int oi) {
        return [t, ai, R, C, oi]() {
            const Tensor& g = t->node(oi).grad;
            Tensor ga(t->node(ai).value.shape());
            for (int r = 0; r < R; ++r)
                for (int c = 0; c < C; ++c) ga.ref(static_cast<std::int64_t>(r) * C + c) = g.at(r);
            t->add_grad(ai, ga);
        };
    });
}

namespace {

// Elementwise unary helper: out_i = f(a_i), da_i = dfn(a_i, out_i) * g_i.
Var unary_op(Var a, const char* where, double (*f)(double), double (*dfn)(double, double)) {
    Tape* t = owner(a, where);
    Tensor out(a.val().shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out.ref(i) = f(a.val().at(i));
    bool rg = t->requires_grad(a);
    int ai = a.id;
    return finish(t, std::move(out), rg, [t, ai, dfn](int oi) {
        return [t, ai, dfn, oi]() {
            const Tensor& g = t->node(oi).grad;
            const Tensor& va = t->node(ai).value;
            const Tensor& vo = t->node(oi).value;
            Tensor ga(g.shape());
            for (std::int64_t i = 0; i < g.numel(); ++i)
                ga.ref(i) = dfn(va.at(i), vo.at(i)) * g.at(i);
            t->add_grad(ai, ga);
        };
    });
}

}  // namespace

Var vexp(Var a) {
    return unary_op(a, "vexp", [](double x) { return std::exp(x); },
                    [](double, double y) { return y; });
}

Var vlog(Var a) {
    return unary_op(a, "vlog", [](double x) { return std::log(x); },
                    [](double x, double) { return 1.0 / x; });
}

Var vsqrt(Var a) {
    return unary_op(a, "vsqrt", [](double x) { return std::sqrt(x); },
                    [](double, double y) { return y > 0 ? 0.5 / y : 0.0; });
}

Var square(Var a) {
    return unary_op(a, "square", [](double x) { return x * x; },
                    [](double x, double) { return 2.0 * x; });
}

Var vabs(Var a) {
    return unary_op(a, "vabs", [](double x) { return std::abs(x); },
                    [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var vtanh(Var a) {
    return unary_op(a, "vtanh", [](double x) { return std::tanh(x); },
                    [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Var a) {
    return unary_op(a, "sigmoid", [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                    [](double, double y) { return y * (1.0 - y); });
}

Var relu(Var a) {
    return unary_op(a, "relu", [](double x) { return x > 0 ? x : 0.0; },
                    [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var vsin(Var a) {
    return unary_op(a, "vsin", [](double x) { return std::sin(x); },
                    [](double x, double) { return std::cos(x); });
}

Var vcos(Var a) {
    return unary_op(a, "vcos", [](double x) { return std::cos(x); },
                    [](double x, double) { return -std::sin(x); });
}

Var leaky_relu(Var a, double slope) {
    Tape* t = owner(a, "leaky_relu");
    Tensor out(a.val().shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        double x = a.val().at(i);
        out.ref(i) = x > 0 ? x : slope * x;
    }
    bool rg = t->requires_grad(a);
    int ai = a.id;
    return finish(t, std::move(out), rg, [t, ai, slope](int oi) {
        return [t, ai, slope, oi]() {
            const Tensor& g = t->node(oi).grad;
            const Tensor& va = t->node(ai).value;
            Tensor ga(g.shape());
            for (std::int64_t i = 0; i < g.numel(); ++i)
                ga.ref(i) = (va.at(i) > 0 ? 1.0 : slope) * g.at(i);
            t->add_grad(ai, ga);
        };
    });
}

Var clamp(Var a, double lo, double hi) {
    Tape* t = owner(a, "clamp");
    Tensor out(a.val().shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        double x = a.val().at(i);
        out.ref(i) = x < lo ? lo : (x > hi ? hi : x);
    }
    bool rg = t->requires_grad(a);
    int ai = a.id;
    return finish(t, std::move(out), rg, [t, ai, lo, hi](int oi) {
        return [t, ai, lo, hi, oi]() {
            const Tensor& g = t->node(oi).grad;
            const Tensor& va = t->node(ai).value;
            Tensor ga(g.shape());
            for (std::int64_t i = 0; i < g.numel(); ++i) {
                double x = va.at(i);
                ga.ref(i) = (x >= lo && x <= hi) ? g.at(i) : 0.0;
            }
            t->add_grad(ai, ga);
        };
    });
}

Var clamp_min(Var a, double lo) {
    Tape* t = owner(a, "clamp_min");
    Tensor out(a.val().shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        double x = a.val().at(i);
        out.ref(i) = x < lo ? lo : x;
    }
    bool rg = t->requires_grad(a);
    int ai = a.id;
    return finish(t, std::move(out), rg, [t, ai, lo](int oi) {
        return [t, ai, lo, oi]() {
            const Tensor& g = t->node(oi).grad;
            const Tensor& va = t->node(ai).value;
            Tensor ga(g.shape());
            for (std::int64_t i = 0; i < g.numel(); ++i)
                ga.ref(i) = va.at(i) >= lo ? g.at(i) : 0.0;
            t->add_grad(ai, ga);
        };
    });
}

Var rsqrt_eps(Var a, double eps) {
    Tape* t = owner(a, "rsqrt_eps");
    Tensor out(a.val().shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out.ref(i) = 1.0 / std::sqrt(a.val().at(i) + eps);
    bool rg = t->requires_grad(a);
    int ai = a.id;
    return finish(t, std::move(out), rg, [t, ai](int oi) {
        return [t, ai, oi]() {
            const Tensor& g = t->node(oi).grad;
            const Tensor& vo = t->node(oi).value;
            Tensor ga(g.shape());
            for (std::int64_t i = 0; i < g.numel(); ++i) {
                double y = vo.at(i);
                ga.ref(i) = -0.5 * y * y * y * g.at(i);
            }
            t->add_grad(ai, ga);
        };
    });
}

Var softmax_rows(Var a) {
    Tape* t = owner(a, "softmax_rows");
    const int R = a.val().rows2d(), C = a.val().cols2d();
    Tensor out(a.val().shape());
    for (int r = 0; r < R; ++r) {
        double m = a.val().at(static_cast<std::int64_t>(r) * C);
        for (int c = 1; c < C; ++c) m = std::max(m, a.val().at(static_cast<std::int64_t>(r) * C + c));
        double s = 0;
        for (int c = 0; c < C; ++c) {
            double e = std::exp(a.val().at(static_cast<std::int64_t>(r) * C + c) - m);
            out.ref(static_cast<std::int64_t>(r) * C + c) = e;
            s += e;
        }
        for (int c = 0; c < C; ++c) out.ref(static_cast<std::int64_t>(r) * C + c) /= s;
    }
    bool rg = t->requires_grad(a);
    int ai = a.id;
    return finish(t, std::move(out), rg, [t, ai, R, C](int oi) {
        return [t, ai, R, C, oi]() {
            const Tensor& g = t->node(oi).grad;
            const Tensor& y = t->node(oi).value;
            Tensor ga(g.shape());
            for (int r = 0; r < R; ++r) {
                double dot = 0;
                for (int c = 0; c < C; ++c)
                    dot += g.at(static_cast<std::int64_t>(r) * C + c) *
                           y.at(static_cast<std::int64_t>(r) * C + c);
                for (int c = 0; c < C; ++c) {
                    std::int64_t ix = static_cast<std::int64_t>(r) * C + c;
                    ga.ref(ix) = y.at(ix) * (g.at(ix) - dot);
                }
            }
            t->add_grad(ai, ga);
        };
    });
}

Var layer_norm(Var a, double eps) {
    Tape* t = owner(a, "layer_norm");
    const int R = a.val().rows2d(), C = a.val().cols2d();
    Tensor out(a.val().shape());
    Tensor inv({R});
    for (int r = 0; r < R; ++r) {
        double mu = 0;
        for (int c = 0; c < C; ++c) mu += a.val().at(static_cast<std::int64_t>(r) * C + c);
        mu /= C;
        double var = 0;
        for (int c = 0; c < C; ++c) {
            double d = a.val().at(static_cast<std::int64_t>(r) * C + c) - mu;
            var += d * d;
        }
        var /= C;
        double iv = 1.0 / std::sqrt(var + eps);
        inv.ref(r) = iv;
        for (int c = 0; c < C; ++c)
            out.ref(static_cast<std::int64_t>(r) * C + c) =
                (a.val().at(static_cast<std::int64_t>(r) * C + c) - mu) * iv;
    }
    bool rg = t->requires_grad(a);
    int ai = a.id;
    return finish(t, std::move(out), rg, [t, ai, R, C, inv](int oi) {
        return [t, ai, R, C, inv, oi]() {
            const Tensor& g = t->node(oi).grad;
            const Tensor& y = t->node(oi).value;
            Tensor ga(g.shape());
            for (int r = 0; r < R; ++r) {
                double gm = 0, gym = 0;
                for (int c = 0; c < C; ++c) {
                    std::int64_t ix = static_cast<std::int64_t>(r) * C + c;
                    gm += g.at(ix);
                    gym += g.at(ix) * y.at(ix);
                }
                gm /= C;
                gym /= C;
                for (int c = 0; c < C; ++c) {
                    std::int64_t ix = static_cast<std::int64_t>(r) * C + c;
                    ga.ref(ix) = inv.at(r) * (g.at(ix) - gm - y.at(ix) * gym);
                }
            }
            t->add_grad(ai, ga);
        };
    });
}

Var l2_norm_rows(Var a) {
    Tape* t = owner(a, "l2_norm_rows");
    const int R = a.val().rows2d(), C = a.val().cols2d();
    Tensor out({R, 1});
    for (int r = 0; r < R; ++r) {
        double s = 0;
        for (int c = 0; c < C; ++c) {
            double x = a.val().at(static_cast<std::int64_t>(r) * C + c);
            s += x * x;
        }
        out.ref(r) = std::sqrt(s);
    }
    bool rg = t->requires_grad(a);
    int ai = a.id;
    return finish(t, std::move(out), rg, [t, ai, R, C](int oi) {
        return [t, ai, R, C, oi]() {
            const Tensor& g = t->node(oi).grad;
            const Tensor& n = t->node(oi).value;
            const Tensor& va = t->node(ai).value;
            Tensor ga = Tensor::zeros(va.shape());
            for (int r = 0; r < R; ++r) {
                if (n.at(r) <= 0) continue;  // subgradient 0 at the origin
                double w = g.at(r) / n.at(r);
                for (int c = 0; c < C; ++c) {
                    std::int64_t ix = static_cast<std::int64_t>(r) * C + c;
                    ga.ref(ix) = w * va.at(ix);
                }
            }
            t->add_grad(ai, ga);
        };
    });
}

Var l2_norm_all(Var a) {
    Tape* t = owner(a, "l2_norm_all");
    double s = 0;
    for (std::int64_t i = 0; i < a.val().numel(); ++i) {
        double x = a.val().at(i);
        s += x * x;
    }
    bool rg = t->requires_grad(a);
    int ai = a.id;
    return finish(t, Tensor::scalar(std::sqrt(s)), rg, [t, ai](int oi) {
        return [t, ai, oi]() {
            double n = t->node(oi).value.at(0);
            if (n <= 0) return;
            double w = t->node(oi).grad.at(0) / n;
            const Tensor& va = t->node(ai).value;
            Tensor ga(va.shape());
            for (std::int64_t i = 0; i < va.numel(); ++i) ga.ref(i) = w * va.at(i);
            t->add_grad(ai, ga);
        };
    });
}

Var detach(Var a) {
    Tape* t = owner(a, "detach");
    return t->constant(a.val().clone());
}

// ---- image ops ----

namespace {

struct ConvGeom {
    int ci, h, w, k, stride, pad, ho, wo;
};

ConvGeom conv_geom(const Tensor& x, int co_rows, int wcols, int k, int stride, int pad,
                   const char* where) {
    if (x.ndim() != 3) throw ShapeError(std::string(where) + ": input must be [C,H,W]");
    ConvGeom g;
    g.ci = x.dim(0);
    g.h = x.dim(1);
    g.w = x.dim(2);
    g.k = k;
    g.stride = stride;
    g.pad = pad;
    if (wcols != g.ci * k * k)
        throw ShapeError(std::string(where) + ": weight cols " + std::to_string(wcols) +
                         " != Ci*k*k = " + std::to_string(g.ci * k * k));
    (void)co_rows;
    g.ho = (g.h + 2 * pad - k) / stride + 1;
    g.wo = (g.w + 2 * pad - k) / stride + 1;
    if (g.ho <= 0 || g.wo <= 0) throw ShapeError(std::string(where) + ": empty output");
    return g;
}

// cols: [Ci*k*k, Ho*Wo], row order (ci, ki, kj).
Tensor im2col(const Tensor& x, const ConvGeom& g) {
    Tensor cols = Tensor::zeros({g.ci * g.k * g.k, g.ho * g.wo});
    const double* px = x.data();
    double* pc = cols.mut();
    const std::int64_t plane = static_cast<std::int64_t>(g.h) * g.w;
    const std::int64_t ncols = static_cast<std::int64_t>(g.ho) * g.wo;
    for (int ci = 0; ci < g.ci; ++ci)
        for (int ki = 0; ki < g.k; ++ki)
            for (int kj = 0; kj < g.k; ++kj) {
                std::int64_t row = (static_cast<std::int64_t>(ci) * g.k + ki) * g.k + kj;
                double* dst = pc + row * ncols;
                for (int oy = 0; oy < g.ho; ++oy) {
                    int iy = oy * g.stride - g.pad + ki;
                    if (iy < 0 || iy >= g.h) continue;
                    for (int ox = 0; ox < g.wo; ++ox) {
                        int ix = ox * g.stride - g.pad + kj;
                        if (ix < 0 || ix >= g.w) continue;
                        dst[static_cast<std::int64_t>(oy) * g.wo + ox] =
                            px[ci * plane + static_cast<std::int64_t>(iy) * g.w + ix];
                    }
                }
            }
    return cols;
}

// Adjoint of im2col: scatter-add cols back into an image.
void col2im_add(const Tensor& cols, const ConvGeom& g, Tensor& x) {
    const double* pc = cols.data();
    double* px = x.mut();
    const std::int64_t plane = static_cast<std::int64_t>(g.h) * g.w;
    const std::int64_t ncols = static_cast<std::int64_t>(g.ho) * g.wo;
    for (int ci = 0; ci < g.ci; ++ci)
        for (int ki = 0; ki < g.k; ++ki)
            for (int kj = 0; kj < g.k; ++kj) {
                std::int64_t row = (static_cast<std::int64_t>(ci) * g.k + ki) * g.k + kj;
                const double* src = pc + row * ncols;
                for (int oy = 0; oy < g.ho; ++oy) {
                    int iy = oy * g.stride - g.pad + ki;
                    if (iy < 0 || iy >= g.h) continue;
                    for (int ox = 0; ox < g.wo; ++ox) {
                        int ix = ox * g.stride - g.pad + kj;
                        if (ix < 0 || ix >= g.w) continue;
                        px[ci * plane + static_cast<std::int64_t>(iy) * g.w + ix] +=
                            src[static_cast<std::int64_t>(oy) * g.wo + ox];
                    }
                }
            }
}

}  // namespace

Var conv2d(Var x, Var w, int k, int stride, int pad) {
    Tape* t = owner2(x, w, "conv2d");
    const int co = w.val().rows2d();
    ConvGeom g = conv_geom(x.val(), co, w.val().cols2d(), k, stride, pad, "conv2d");
    Tensor cols = im2col(x.val(), g);
    Tensor out({co, g.ho, g.wo});
    {
        CMap W(w.val().data(), co, g.ci * k * k);
        CMap C(cols.data(), g.ci * k * k, g.ho * g.wo);
        MMap O(out.mut(), co, g.ho * g.wo);
        O.noalias() = W * C;
    }
    bool rg = t->requires_grad(x) || t->requires_grad(w);
    int xi = x.id, wi = w.id;
    return finish(t, std::move(out), rg, [t, xi, wi, g, co](int oi) {
        return [t, xi, wi, g, co, oi]() {
            const Tensor& gout = t->node(oi).grad;
            CMap G(gout.data(), co, static_cast<std::int64_t>(g.ho) * g.wo);
            if (t->node(wi).requires_grad) {
                Tensor cols = im2col(t->node(xi).value, g);
                CMap C(cols.data(), g.ci * g.k * g.k, static_cast<std::int64_t>(g.ho) * g.wo);
                Tensor gw(t->node(wi).value.shape());
                MMap GW(gw.mut(), co, g.ci * g.k * g.k);
                GW.noalias() = G * C.transpose();
                t->add_grad(wi, gw);
            }
            if (t->node(xi).requires_grad) {
                Tensor gcols({g.ci * g.k * g.k, g.ho * g.wo});
                CMap W(t->node(wi).value.data(), co, g.ci * g.k * g.k);
                MMap GC(gcols.mut(), g.ci * g.k * g.k, static_cast<std::int64_t>(g.ho) * g.wo);
                GC.noalias() = W.transpose() * G;
                Tensor gx = Tensor::zeros(t->node(xi).value.shape());
                col2im_add(gcols, g, gx);
                t->add_grad(xi, gx);
            }
        };
    });
}

Var conv_transpose2d(Var gin, Var w, int ci, int k, int stride, int pad, int out_h, int out_w) {
    Tape* t = owner2(gin, w, "conv_transpose2d");
    if (gin.val().ndim() != 3) throw ShapeError("conv_transpose2d: input must be [C,H,W]");
    const int co = gin.val().dim(0);
    if (w.val().rows2d() != co || w.val().cols2d() != ci * k * k)
        throw ShapeError("conv_transpose2d: weight shape mismatch");
    ConvGeom g;
    g.ci = ci;
    g.h = out_h;
    g.w = out_w;
    g.k = k;
    g.stride = stride;
    g.pad = pad;
    g.ho = gin.val().dim(1);
    g.wo = gin.val().dim(2);
    if ((out_h + 2 * pad - k) / stride + 1 != g.ho || (out_w + 2 * pad - k) / stride + 1 != g.wo)
        throw ShapeError("conv_transpose2d: output geometry inconsistent with input");
    Tensor cols({ci * k * k, g.ho * g.wo});
    {
        CMap W(w.val().data(), co, ci * k * k);
        CMap Gm(gin.val().data(), co, static_cast<std::int64_t>(g.ho) * g.wo);
        MMap C(cols.mut(), ci * k * k, static_cast<std::int64_t>(g.ho) * g.wo);
        C.noalias() = W.transpose() * Gm;
    }
    Tensor out = Tensor::zeros({ci, out_h, out_w});
    col2im_add(cols, g, out);
    bool rg = t->requires_grad(gin) || t->requires_grad(w);
    int gi = gin.id, wi = w.id;
    return finish(t, std::move(out), rg, [t, gi, wi, g, co](int oi) {
        return [t, gi, wi, g, co, oi]() {
            const Tensor& gout = t->node(oi).grad;
            Tensor gcols = im2col(gout, g);
            CMap GC(gcols.data(), g.ci * g.k * g.k, static_cast<std::int64_t>(g.ho) * g.wo);
            if (t->node(gi).requires_grad) {
                Tensor gg(t->node(gi).value.shape());
                CMap W(t->node(wi).value.data(), co, g.ci * g.k * g.k);
                MMap GG(gg.mut(), co, static_cast<std::int64_t>(g.ho) * g.wo);
                GG.noalias() = W * GC;
                t->add_grad(gi, gg);
            }
            if (t->node(wi).requires_grad) {
                Tensor gw(t->node(wi).value.shape());
                CMap Gm(t->node(gi).value.data(), co, static_cast<std::int64_t>(g.ho) * g.wo);
                MMap GW(gw.mut(), co, g.ci * g.k * g.k);
                GW.noalias() = Gm * GC.transpose();
                t->add_grad(wi, gw);
            }
        };
    });
}

Var add_channel_bias(Var x, Var b) {
    if (x.val().ndim() != 3) throw ShapeError("add_channel_bias: input must be [C,H,W]");
    const int c = x.val().dim(0), h = x.val().dim(1), w = x.val().dim(2);
    Var flat = reshape(x, {c, h * w});
    Var biased = add_colvec(flat, reshape(b, {c, 1}));
    return reshape(biased, {c, h, w});
}

Var upsample_nearest2(Var x) {
    Tape* t = owner(x, "upsample_nearest2");
    if (x.val().ndim() != 3) throw ShapeError("upsample_nearest2: input must be [C,H,W]");
    const int c = x.val().dim(0), h = x.val().dim(1), w = x.val().dim(2);
    Tensor out({c, 2 * h, 2 * w});
    for (int cc = 0; cc < c; ++cc)
        for (int i = 0; i < 2 * h; ++i)
            for (int j = 0; j < 2 * w; ++j)
                out.ref((static_cast<std::int64_t>(cc) * 2 * h + i) * 2 * w + j) =
                    x.val().at((static_cast<std::int64_t>(cc) * h + i / 2) * w + j / 2);
    bool rg = t->requires_grad(x);
    int xi = x.id;
    return finish(t, std::move(out), rg, [t, xi, c, h, w](int oi) {
        return [t, xi, c, h, w, oi]() {
            const Tensor& g = t->node(oi).grad;
            Tensor gx = Tensor::zeros(t->node(xi).value.shape());
            for (int cc = 0; cc < c; ++cc)
                for (int i = 0; i < 2 * h; ++i)
                    for (int j = 0; j < 2 * w; ++j)
                        gx.ref((static_cast<std::int64_t>(cc) * h + i / 2) * w + j / 2) +=
                            g.at((static_cast<std::int64_t>(cc) * 2 * h + i) * 2 * w + j);
            t->add_grad(xi, gx);
        };
    });
}

Var avg_pool2(Var x) {
    Tape* t = owner(x, "avg_pool2");
    if (x.val().ndim() != 3) throw ShapeError("avg_pool2: input must be [C,H,W]");
    const int c = x.val().dim(0), h = x.val().dim(1), w = x.val().dim(2);
    if (h % 2 || w % 2) throw ShapeError("avg_pool2: odd spatial size");
    Tensor out({c, h / 2, w / 2});
    for (int cc = 0; cc < c; ++cc)
        for (int i = 0; i < h / 2; ++i)
            for (int j = 0; j < w / 2; ++j) {
                double s = 0;
                for (int di = 0; di < 2; ++di)
                    for (int dj = 0; dj < 2; ++dj)
                        s += x.val().at((static_cast<std::int64_t>(cc) * h + 2 * i + di) * w + 2 * j + dj);
                out.ref((static_cast<std::int64_t>(cc) * (h / 2) + i) * (w / 2) + j) = s / 4.0;
            }
    bool rg = t->requires_grad(x);
    int xi = x.id;
    return finish(t, std::move(out), rg, [t, xi, c, h, w](int oi) {
        return [t, xi, c, h, w, oi]() {
            const Tensor& g = t->node(oi).grad;
            Tensor gx(t->node(xi).value.shape());
            for (int cc = 0; cc < c; ++cc)
                for (int i = 0; i < h; ++i)
                    for (int j = 0; j < w; ++j)
                        gx.ref((static_cast<std::int64_t>(cc) * h + i) * w + j) =
                            g.at((static_cast<std::int64_t>(cc) * (h / 2) + i / 2) * (w / 2) + j / 2) / 4.0;
            t->add_grad(xi, gx);
        };
    });
}

Var grid_warp(Var features, Var flow) {
    Tape* t = owner2(features, flow, "grid_warp");
    const Tensor& f = features.val();
    const Tensor& fl = flow.val();
    if (f.ndim() != 3 || fl.ndim() != 3 || fl.dim(0) != 2)
        throw ShapeError("grid_warp: features [C,H,W], flow [2,H,W]");
    const int c = f.dim(0), h = f.dim(1), w = f.dim(2);
    if (fl.dim(1) != h || fl.dim(2) != w) throw ShapeError("grid_warp: spatial size mismatch");
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;

    auto sample_coords = [h, w](const Tensor& fl, int i, int j, double& yf, double& xf,
                                bool& clamped_y, bool& clamped_x) {
        const std::int64_t plane = static_cast<std::int64_t>(h) * w;
        double xn = -1.0 + (2.0 * j + 1.0) / w + fl.at(static_cast<std::int64_t>(i) * w + j);
        double yn = -1.0 + (2.0 * i + 1.0) / h + fl.at(plane + static_cast<std::int64_t>(i) * w + j);
        xf = (xn + 1.0) * w / 2.0 - 0.5;
        yf = (yn + 1.0) * h / 2.0 - 0.5;
        clamped_x = xf <= 0.0 || xf >= w - 1;
        clamped_y = yf <= 0.0 || yf >= h - 1;
        if (xf < 0) xf = 0;
        if (xf > w - 1) xf = w - 1;
        if (yf < 0) yf = 0;
        if (yf > h - 1) yf = h - 1;
    };

    Tensor out({c, h, w});
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            double yf, xf;
            bool cy, cx;
            sample_coords(fl, i, j, yf, xf, cy, cx);
            int y0 = static_cast<int>(yf), x0 = static_cast<int>(xf);
            int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
            double fy = yf - y0, fx = xf - x0;
            for (int cc = 0; cc < c; ++cc) {
                const double* pf = f.data() + cc * plane;
                double v00 = pf[static_cast<std::int64_t>(y0) * w + x0];
                double v01 = pf[static_cast<std::int64_t>(y0) * w + x1];
                double v10 = pf[static_cast<std::int64_t>(y1) * w + x0];
                double v11 = pf[static_cast<std::int64_t>(y1) * w + x1];
                out.ref(cc * plane + static_cast<std::int64_t>(i) * w + j) =
                    (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
            }
        }
    bool rg = t->requires_grad(features) || t->requires_grad(flow);
    int fi = features.id, li = flow.id;
    return finish(t, std::move(out), rg, [t, fi, li, c, h, w, sample_coords](int oi) {
        return [t, fi, li, c, h, w, sample_coords, oi]() {
            const Tensor& g = t->node(oi).grad;
            const Tensor& f = t->node(fi).value;
            const Tensor& fl = t->node(li).value;
            const std::int64_t plane = static_cast<std::int64_t>(h) * w;
            const bool want_f = t->node(fi).requires_grad;
            const bool want_l = t->node(li).requires_grad;
            Tensor gf = want_f ? Tensor::zeros(f.shape()) : Tensor();
            Tensor gl = want_l ? Tensor::zeros(fl.shape()) : Tensor();
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j) {
                    double yf, xf;
                    bool cy, cx;
                    sample_coords(fl, i, j, yf, xf, cy, cx);
                    int y0 = static_cast<int>(yf), x0 = static_cast<int>(xf);
                    int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
                    double fy = yf - y0, fx = xf - x0;
                    double gx_acc = 0, gy_acc = 0;
                    for (int cc = 0; cc < c; ++cc) {
                        double go = g.at(cc * plane + static_cast<std::int64_t>(i) * w + j);
                        if (go == 0) continue;
                        const double* pf = f.data() + cc * plane;
                        double v00 = pf[static_cast<std::int64_t>(y0) * w + x0];
                        double v01 = pf[static_cast<std::int64_t>(y0) * w + x1];
                        double v10 = pf[static_cast<std::int64_t>(y1) * w + x0];
                        double v11 = pf[static_cast<std::int64_t>(y1) * w + x1];
                        if (want_f) {
                            gf.ref(cc * plane + static_cast<std::int64_t>(y0) * w + x0) +=
                                go * (1 - fy) * (1 - fx);
                            gf.ref(cc * plane + static_cast<std::int64_t>(y0) * w + x1) +=
                                go * (1 - fy) * fx;
                            gf.ref(cc * plane + static_cast<std::int64_t>(y1) * w + x0) +=
                                go * fy * (1 - fx);
                            gf.ref(cc * plane + static_cast<std::int64_t>(y1) * w + x1) +=
                                go * fy * fx;
                        }
                        if (want_l) {
                            gx_acc += go * ((1 - fy) * (v01 - v00) + fy * (v11 - v10));
                            gy_acc += go * ((1 - fx) * (v10 - v00) + fx * (v11 - v01));
                        }
                    }
                    if (want_l) {
                        if (!cx)
                            gl.ref(static_cast<std::int64_t>(i) * w + j) += gx_acc * (w / 2.0);
                        if (!cy)
                            gl.ref(plane + static_cast<std::int64_t>(i) * w + j) += gy_acc * (h / 2.0);
                    }
                }
            if (want_f) t->add_grad(fi, gf);
            if (want_l) t->add_grad(li, gl);
        };
    });
}

namespace {

struct SplatForward {
    Tensor wsum;   // [res*res] sum of visibility-weighted kernels
    Tensor gsum;   // [res*res] sum of raw kernels (mask driver)
    Tensor csum;   // [3, res*res]
    int zmin_idx = 0;
    double zmin = 0;
};

inline double pixel_center(int j, int res) { return -1.0 + (2.0 * j + 1.0) / res; }

}  // namespace

Var splat_render(Var uv, Var depth, Var radiance, int res, const SplatParams& p) {
    Tape* t = owner2(uv, depth, "splat_render");
    owner2(uv, radiance, "splat_render");
    const Tensor& U = uv.val();
    const Tensor& Z = depth.val();
    const Tensor& C = radiance.val();
    if (U.ndim() != 2 || U.cols2d() != 2) throw ShapeError("splat_render: uv must be [V,2]");
    const int V = U.rows2d();
    if (Z.numel() != V || C.rows2d() != V || C.cols2d() != 3)
        throw ShapeError("splat_render: depth [V], radiance [V,3] required");
    if (res < 2) throw ShapeError("splat_render: resolution too small");

    const double sigma = p.sigma;
    const double cut2 = 16.0 * sigma * sigma;     // 4-sigma support
    const double kappa = std::exp(-8.0);          // kernel value at the cutoff
    const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
    const double half_px = 1.0 / res;  // half pixel in normalized units

    auto fwd = std::make_shared<SplatForward>();
    fwd->wsum = Tensor::zeros({res * res});
    fwd->gsum = Tensor::zeros({res * res});
    fwd->csum = Tensor::zeros({3, res * res});
    fwd->zmin = Z.at(0);
    for (int v = 1; v < V; ++v)
        if (Z.at(v) < fwd->zmin) {
            fwd->zmin = Z.at(v);
            fwd->zmin_idx = v;
        }

    auto window = [res, sigma, half_px](double u, int& j0, int& j1) {
        double r = 4.0 * sigma + half_px;
        j0 = std::max(0, static_cast<int>(std::floor((u - r + 1.0) * res / 2.0)));
        j1 = std::min(res - 1, static_cast<int>(std::ceil((u + r + 1.0) * res / 2.0)));
    };

    for (int v = 0; v < V; ++v) {
        double ux = U.at2(v, 0), uy = U.at2(v, 1);
        double ev = std::exp(-(Z.at(v) - fwd->zmin) / p.tau_z);
        int jx0, jx1, jy0, jy1;
        window(ux, jx0, jx1);
        window(uy, jy0, jy1);
        for (int iy = jy0; iy <= jy1; ++iy) {
            double py = pixel_center(iy, res);
            double dy = py - uy;
            for (int jx = jx0; jx <= jx1; ++jx) {
                double px = pixel_center(jx, res);
                double dx = px - ux;
                double r2 = dx * dx + dy * dy;
                if (r2 >= cut2) continue;
                double E = std::exp(-r2 * inv2s2);
                double G = E - kappa;
                if (G <= 0) continue;
                std::int64_t pix = static_cast<std::int64_t>(iy) * res + jx;
                fwd->gsum.ref(pix) += G;
                fwd->wsum.ref(pix) += G * ev;
                for (int ch = 0; ch < 3; ++ch)
                    fwd->csum.ref(static_cast<std::int64_t>(ch) * res * res + pix) +=
                        G * ev * C.at2(v, ch);
            }
        }
    }

    Tensor out = Tensor::zeros({4, res, res});
    const std::int64_t npix = static_cast<std::int64_t>(res) * res;
    for (std::int64_t pix = 0; pix < npix; ++pix) {
        double denom = fwd->wsum.at(pix) + p.eps_bg;
        for (int ch = 0; ch < 3; ++ch)
            out.ref(ch * npix + pix) = fwd->csum.at(ch * npix + pix) / denom;
        out.ref(3 * npix + pix) = 1.0 - std::exp(-fwd->gsum.at(pix));
    }

    bool rg = t->requires_grad(uv) || t->requires_grad(depth) || t->requires_grad(radiance);
    int ui = uv.id, zi = depth.id, ci = radiance.id;
    SplatParams pp = p;
    return finish(t, std::move(out), rg, [t, ui, zi, ci, res, V, pp, fwd, cut2, kappa, inv2s2,
                                          window](int oi) {
        return [t, ui, zi, ci, res, V, pp, fwd, cut2, kappa, inv2s2, window, oi]() {
            const Tensor& g = t->node(oi).grad;
            const Tensor& U = t->node(ui).value;
            const Tensor& Z = t->node(zi).value;
            const Tensor& C = t->node(ci).value;
            const Tensor& out = t->node(oi).value;
            const std::int64_t npix = static_cast<std::int64_t>(res) * res;
            const bool want_u = t->node(ui).requires_grad;
            const bool want_z = t->node(zi).requires_grad;
            const bool want_c = t->node(ci).requires_grad;
            Tensor gu = want_u ? Tensor::zeros(U.shape()) : Tensor();
            Tensor gz = want_z ? Tensor::zeros(Z.shape()) : Tensor();
            Tensor gc = want_c ? Tensor::zeros(C.shape()) : Tensor();
            double gz_ref = 0;  // gradient routed to the argmin depth vertex
            for (int v = 0; v < V; ++v) {
                double ux = U.at2(v, 0), uy = U.at2(v, 1);
                double ev = std::exp(-(Z.at(v) - fwd->zmin) / pp.tau_z);
                int jx0, jx1, jy0, jy1;
                window(ux, jx0, jx1);
                window(uy, jy0, jy1);
                for (int iy = jy0; iy <= jy1; ++iy) {
                    double py = pixel_center(iy, res);
                    double dy = py - uy;
                    for (int jx = jx0; jx <= jx1; ++jx) {
                        double px = pixel_center(jx, res);
                        double dx = px - ux;
                        double r2 = dx * dx + dy * dy;
                        if (r2 >= cut2) continue;
                        double E = std::exp(-r2 * inv2s2);
                        double G = E - kappa;
                        if (G <= 0) continue;
                        std::int64_t pix = static_cast<std::int64_t>(iy) * res + jx;
                        double denom = fwd->wsum.at(pix) + pp.eps_bg;
                        double gomega = 0;
                        for (int ch = 0; ch < 3; ++ch) {
                            double go = g.at(ch * npix + pix);
                            if (go == 0) continue;
                            if (want_c) gc.ref2(v, ch) += go * G * ev / denom;
                            gomega += go * (C.at2(v, ch) - out.at(ch * npix + pix)) / denom;
                        }
                        double gmask = g.at(3 * npix + pix);
                        double gG = gomega * ev + gmask * std::exp(-fwd->gsum.at(pix));
                        double ge = gomega * G;
                        if (want_u) {
                            // dG/du = E * (p - u) / sigma^2 (cutoff shift has no u-dependence)
                            double coef = gG * E * 2.0 * inv2s2;
                            gu.ref2(v, 0) += coef * dx;
                            gu.ref2(v, 1) += coef * dy;
                        }
                        if (want_z) {
                            gz.ref(v) += -ge * ev / pp.tau_z;
                            gz_ref += ge * ev / pp.tau_z;
                        }
                    }
                }
            }
            if (want_z) {
                gz.ref(fwd->zmin_idx) += gz_ref;
                t->add_grad(zi, gz);
            }
            if (want_u) t->add_grad(ui, gu);
            if (want_c) t->add_grad(ci, gc);
        };
    });
}

}  // namespace emoface
