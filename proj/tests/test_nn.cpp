#include <doctest.h>

#include <cmath>

#include "emoface/nn.hpp"
#include "fd_check.hpp"

using namespace emoface;

TEST_CASE("linear layer computes x*w + b") {
    ParamStore ps;
    Rng rng(1);
    Linear lin(ps, "lin", 2, 3, rng);
    lin.w->value = Tensor({2, 3}, {1, 2, 3, 4, 5, 6});
    lin.b->value = Tensor({3}, {0.5, -0.5, 1.0});
    Tape t;
    Var y = lin.forward(t, t.constant(Tensor({1, 2}, {1.0, 2.0})));
    CHECK(y.val().at(0) == doctest::Approx(9.5));
    CHECK(y.val().at(1) == doctest::Approx(11.5));
    CHECK(y.val().at(2) == doctest::Approx(16.0));
}

TEST_CASE("one leaf per parameter even when a layer runs repeatedly") {
    ParamStore ps;
    Rng rng(2);
    Linear lin(ps, "lin", 3, 3, rng);
    Tape t;
    Var x = t.constant(rng.normal_tensor({2, 3}));
    Var y = lin.forward(t, x);
    size_t after_one = t.size();
    Var z = lin.forward(t, y);
    (void)z;
    // second call stages no new leaves for w/b
    size_t new_nodes = t.size() - after_one;
    CHECK(new_nodes == 2);  // matmul + add_rowvec only
}

TEST_CASE("fd: gradients flow through a reused layer (gru cell math)") {
    ParamStore ps;
    Rng rng(3);
    Gru gru(ps, "gru", 4, 5, rng);
    Tensor X = rng.normal_tensor({6, 4});
    auto build = [&](Tape& t, std::vector<Var>& vs) {
        Var x = t.leaf(X);
        Var out = gru.forward(t, x);
        vs = {x, gru.xz.w->staged, gru.hh.w->staged, gru.xr.b->staged};
        return mean_all(square(out));
    };
    FdReport rep = fd_check(build, {&X, &gru.xz.w->value, &gru.hh.w->value, &gru.xr.b->value},
                            rng, 30);
    CHECK(rep.pass);
    CHECK(rep.max_rel < 1e-3);
}

TEST_CASE("fd: transformer layer end to end") {
    ParamStore ps;
    Rng rng(4);
    TransformerLayer layer(ps, "enc", 8, 2, rng);
    Tensor X = rng.normal_tensor({5, 8});
    auto build = [&](Tape& t, std::vector<Var>& vs) {
        Var x = t.leaf(X);
        Var out = layer.forward(t, x);
        vs = {x, layer.attn.wq.w->staged, layer.ff1.w->staged, layer.ln1.gain->staged};
        return mean_all(square(out));
    };
    FdReport rep = fd_check(
        build, {&X, &layer.attn.wq.w->value, &layer.ff1.w->value, &layer.ln1.gain->value}, rng, 30);
    CHECK(rep.pass);
}

TEST_CASE("transformer layer without positional information is permutation-equivariant") {
    ParamStore ps;
    Rng rng(5);
    TransformerLayer layer(ps, "enc", 8, 2, rng);
    Tensor X = rng.normal_tensor({6, 8});
    std::vector<int> perm = {3, 0, 5, 1, 4, 2};
    Tape t;
    Var out = layer.forward(t, t.constant(X));
    Var outp = layer.forward(t, gather_rows(t.constant(X), perm));
    for (int r = 0; r < 6; ++r)
        for (int c = 0; c < 8; ++c)
            CHECK(outp.val().at2(r, c) == doctest::Approx(out.val().at2(perm[r], c)).epsilon(1e-10));
}

TEST_CASE("adam fits a small least squares problem deterministically") {
    auto run = [](std::uint64_t seed) {
        ParamStore ps;
        Rng rng(seed);
        Linear lin(ps, "fit", 3, 1, rng);
        Tensor W_true({3, 1}, {0.5, -1.0, 2.0});
        Tensor X = rng.normal_tensor({64, 3});
        Tape t;
        Tensor Y;
        {
            Var y = matmul(t.constant(X), t.constant(W_true));
            Y = t.value(y).clone();
            t.clear();
        }
        Adam opt(AdamConfig{0.05, 0.9, 0.999, 1e-8});
        double last = 0;
        for (int i = 0; i < 300; ++i) {
            Var pred = lin.forward(t, t.constant(X));
            Var loss = mean_all(square(sub(pred, t.constant(Y))));
            last = t.value(loss).at(0);
            t.backward(loss);
            opt.step(ps, t);
            t.clear();
        }
        return std::make_pair(last, ps.content_hash());
    };
    auto [loss1, hash1] = run(7);
    auto [loss2, hash2] = run(7);
    CHECK(loss1 < 1e-4);
    CHECK(loss1 == loss2);
    CHECK(hash1 == hash2);  // bitwise deterministic
}

TEST_CASE("frozen parameters are bitwise unchanged by training") {
    ParamStore ps;
    Rng rng(8);
    Linear a(ps, "a", 4, 4, rng);
    Linear frozen(ps, "frozen", 4, 4, rng);
    frozen.w->frozen = true;
    frozen.b->frozen = true;
    std::uint64_t before = fnv1a64(frozen.w->value.data(), sizeof(double) * 16);
    Adam opt(AdamConfig{0.01, 0.9, 0.999, 1e-8});
    Tape t;
    for (int i = 0; i < 5; ++i) {
        Var x = t.constant(rng.normal_tensor({2, 4}));
        Var loss = mean_all(square(frozen.forward(t, a.forward(t, x))));
        t.backward(loss);
        opt.step(ps, t);
        t.clear();
    }
    CHECK(fnv1a64(frozen.w->value.data(), sizeof(double) * 16) == before);
    CHECK_FALSE(frozen.w->adam_m.defined());
}

TEST_CASE("gradient clipping rescales the global norm") {
    ParamStore ps;
    Param* p = ps.create("p", Tensor({2}, {1.0, 1.0}));
    Tape t;
    Var loss = scale(sum_all(square(use(t, p))), 50.0);  // grad = 100 * p
    t.backward(loss);
    Adam opt(AdamConfig{0.1, 0.9, 0.999, 1e-8});
    double norm = opt.step(ps, t, 1.0);
    CHECK(norm == doctest::Approx(100.0 * std::sqrt(2.0)));
    // post-clip |g_i| = 1/sqrt(2); first adam step moves by ~lr regardless,
    // so check the clip through the returned norm only
}

TEST_CASE("param store save/load round trip with optimizer state") {
    const char* path = "test_nn_ckpt.bin";
    ParamStore ps;
    Rng rng(9);
    Linear lin(ps, "m", 3, 2, rng);
    Adam opt(AdamConfig{0.01, 0.9, 0.999, 1e-8});
    Tape t;
    for (int i = 0; i < 3; ++i) {
        Var loss = mean_all(square(lin.forward(t, t.constant(rng.normal_tensor({4, 3})))));
        t.backward(loss);
        opt.step(ps, t);
        t.clear();
    }
    Archive a;
    ps.save_into(a, "params/");
    opt.save_into(a, ps, "adam/");
    a.save(path);

    ParamStore ps2;
    Rng rng2(444);
    Linear lin2(ps2, "m", 3, 2, rng2);
    Adam opt2(AdamConfig{0.01, 0.9, 0.999, 1e-8});
    Archive b = Archive::load(path);
    ps2.load_from(b, "params/");
    opt2.load_from(b, ps2, "adam/");
    CHECK(ps2.content_hash() == ps.content_hash());
    CHECK(opt2.steps() == 3);
    for (int i = 0; i < lin.w->adam_m.numel(); ++i)
        CHECK(lin2.w->adam_m.at(i) == lin.w->adam_m.at(i));
    std::remove(path);
}
