#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <set>

#include "emoface/archive.hpp"
#include "emoface/core.hpp"

using namespace emoface;

TEST_CASE("tensor shape bookkeeping") {
    Tensor t = Tensor::zeros({3, 4});
    CHECK(t.numel() == 12);
    CHECK(t.rows2d() == 3);
    CHECK(t.cols2d() == 4);
    t.ref2(1, 2) = 5.0;
    CHECK(t.at(6) == 5.0);

    Tensor v = t.reshaped({4, 3});
    CHECK(v.at2(2, 0) == 5.0);  // same storage, new indexing
    v.ref(0) = -1.0;
    CHECK(t.at(0) == -1.0);  // reshape is a view

    Tensor c = t.clone();
    c.ref(0) = 7.0;
    CHECK(t.at(0) == -1.0);  // clone is deep

    CHECK_THROWS_AS(t.reshaped({5, 5}), ShapeError);
}

TEST_CASE("tensor reductions and finiteness") {
    Tensor t = Tensor::from({1.0, -2.0, 3.5});
    CHECK(t.sum() == doctest::Approx(2.5));
    CHECK(t.min() == -2.0);
    CHECK(t.max() == 3.5);
    CHECK(t.all_finite());
    t.ref(1) = std::nan("");
    CHECK_FALSE(t.all_finite());
}

TEST_CASE("rng determinism and stream independence") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng c(43);
    CHECK(Rng(42).next_u64() != c.next_u64());

    // child streams: same path reproduces, different path diverges
    Rng c1 = Rng::child(7, {1, 2});
    Rng c2 = Rng::child(7, {1, 2});
    Rng c3 = Rng::child(7, {1, 3});
    CHECK(c1.next_u64() == c2.next_u64());
    CHECK(c1.next_u64() != c3.next_u64());
}

TEST_CASE("rng state round-trip is bitwise") {
    Rng a(99);
    for (int i = 0; i < 17; ++i) a.next_u64();
    a.normal();  // no hidden spare: state fully captures the generator
    auto st = a.state();
    Rng b(1);
    b.set_state(st);
    for (int i = 0; i < 50; ++i) CHECK(a.next_u64() == b.next_u64());
    double x = a.normal(), y = b.normal();
    CHECK(std::memcmp(&x, &y, sizeof(double)) == 0);
}

TEST_CASE("rng distributions are sane") {
    Rng r(1234);
    double s = 0, s2 = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        double x = r.normal();
        s += x;
        s2 += x * x;
    }
    CHECK(std::abs(s / n) < 0.03);
    CHECK(s2 / n == doctest::Approx(1.0).epsilon(0.05));

    for (int i = 0; i < 1000; ++i) {
        double u = r.uniform(2.0, 3.0);
        CHECK(u >= 2.0);
        CHECK(u < 3.0);
    }
    std::set<int> seen;
    for (int i = 0; i < 200; ++i) seen.insert(r.uniform_int(7));
    CHECK(seen.size() == 7);
    CHECK(*seen.begin() == 0);
    CHECK(*seen.rbegin() == 6);
}

TEST_CASE("archive round-trip is bitwise and hash-checked") {
    const char* path = "test_core_archive.bin";
    Archive a;
    Rng r(5);
    Tensor w = r.normal_tensor({4, 3});
    Tensor b = r.uniform_tensor({7}, -1.0, 1.0);
    a.put("w", w);
    a.put("b", b);
    a.meta["note"] = "round trip";
    a.save(path);

    Archive lo = Archive::load(path);
    CHECK(lo.meta.at("note") == "round trip");
    CHECK(lo.content_hash() == a.content_hash());
    Tensor w2 = lo.get("w", {4, 3});
    for (int i = 0; i < w.numel(); ++i)
        CHECK(std::memcmp(w.data() + i, w2.data() + i, sizeof(double)) == 0);

    CHECK_THROWS_AS(lo.get("missing"), IoError);
    CHECK_THROWS_AS(lo.get("w", {3, 4}), ShapeError);

    // corrupt one payload byte: load must reject
    {
        FILE* f = std::fopen(path, "r+b");
        REQUIRE(f);
        std::fseek(f, -1, SEEK_END);
        int c = std::fgetc(f);
        std::fseek(f, -1, SEEK_END);
        std::fputc(c ^ 0x10, f);
        std::fclose(f);
    }
    CHECK_THROWS_AS(Archive::load(path), IoError);
    std::remove(path);
}
