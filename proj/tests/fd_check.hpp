#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "emoface/core.hpp"
#include "emoface/tape.hpp"

namespace emoface {

struct FdReport {
    double max_rel = 0;
    int checked = 0;
    bool pass = true;
};

// Central finite-difference check of a scalar graph against tape gradients.
// build must register one leaf per entry of params (sharing storage, so
// perturbations are visible on rebuild) and return the scalar root.
using FdBuild = std::function<Var(Tape&, std::vector<Var>&)>;

inline FdReport fd_check(const FdBuild& build, std::vector<Tensor*> params, Rng& rng, int npoints,
                         double rel_tol = 1e-3, double abs_tol = 1e-8) {
    FdReport rep;
    Tape tape;
    std::vector<Var> vars;
    Var root = build(tape, vars);
    tape.backward(root);
    std::vector<Tensor> grads;
    for (Var v : vars) grads.push_back(tape.grad(v));

    for (int n = 0; n < npoints; ++n) {
        int pi = rng.uniform_int(static_cast<int>(params.size()));
        std::int64_t idx = rng.uniform_int(static_cast<int>(params[static_cast<size_t>(pi)]->numel()));
        double x0 = params[static_cast<size_t>(pi)]->at(idx);
        double h = 1e-5 * std::max(1.0, std::abs(x0));

        auto eval = [&](double x) {
            params[static_cast<size_t>(pi)]->ref(idx) = x;
            Tape t2;
            std::vector<Var> vs;
            Var r = build(t2, vs);
            return t2.value(r).at(0);
        };
        double fp = eval(x0 + h);
        double fm = eval(x0 - h);
        params[static_cast<size_t>(pi)]->ref(idx) = x0;

        double numeric = (fp - fm) / (2 * h);
        double analytic = grads[static_cast<size_t>(pi)].at(idx);
        double rel = std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), 1e-6);
        rep.max_rel = std::max(rep.max_rel, rel);
        ++rep.checked;
        if (std::abs(analytic - numeric) > rel_tol * (std::abs(analytic) + std::abs(numeric)) + abs_tol)
            rep.pass = false;
    }
    return rep;
}

}  // namespace emoface
