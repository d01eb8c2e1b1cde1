#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "gradleak/archive.hpp"
#include "gradleak/ops.hpp"
#include "test_support.hpp"

using namespace gradleak;
using namespace gltest;

TEST_CASE("finite differences cover every registered primitive") {
    auto run = [](const char* name, std::vector<Tensor> inputs,
                  std::function<Tensor(const std::vector<Tensor>&)> f) {
        FdResult r = fd_check(inputs, f);
        INFO(name << ": worst_rel=" << r.worst_rel << " worst_abs=" << r.worst_abs
                  << " checked=" << r.checked);
        CHECK(r.pass);
        CHECK(r.checked > 0);
    };

    run("add", {random_tensor({2, 3, 4}, 11), random_tensor({2, 3, 4}, 12)},
        [](const auto& in) { return weighted_sum(add(in[0], in[1]), 1); });
    run("add broadcast", {random_tensor({2, 3, 4}, 13), random_tensor({4}, 14)},
        [](const auto& in) { return weighted_sum(add(in[0], in[1]), 2); });
    run("sub", {random_tensor({3, 4}, 15), random_tensor({3, 1}, 16)},
        [](const auto& in) { return weighted_sum(sub(in[0], in[1]), 3); });
    run("mul", {random_tensor({2, 3, 4}, 17), random_tensor({3, 4}, 18)},
        [](const auto& in) { return weighted_sum(mul(in[0], in[1]), 4); });
    run("div", {random_tensor({2, 3, 4}, 19), random_signed_away_from_zero({2, 3, 4}, 20)},
        [](const auto& in) { return weighted_sum(div(in[0], in[1]), 5); });
    run("add scalar", {random_tensor({5}, 21)},
        [](const auto& in) { return weighted_sum(add(in[0], 1.7), 6); });
    run("mul scalar", {random_tensor({5}, 22)},
        [](const auto& in) { return weighted_sum(mul(in[0], -2.5), 7); });

    run("matmul 2d", {random_tensor({3, 4}, 23), random_tensor({4, 5}, 24)},
        [](const auto& in) { return weighted_sum(matmul(in[0], in[1]), 8); });
    run("matmul batched", {random_tensor({2, 3, 4}, 25), random_tensor({2, 4, 5}, 26)},
        [](const auto& in) { return weighted_sum(matmul(in[0], in[1]), 9); });
    run("matmul broadcast", {random_tensor({2, 2, 3, 4}, 27), random_tensor({4, 5}, 28)},
        [](const auto& in) { return weighted_sum(matmul(in[0], in[1]), 10); });

    run("transpose", {random_tensor({2, 3, 4}, 29)},
        [](const auto& in) { return weighted_sum(transpose(in[0], {1, 2, 0}), 11); });
    run("reshape", {random_tensor({2, 6}, 30)},
        [](const auto& in) { return weighted_sum(reshape(in[0], {3, 4}), 12); });
    run("slice", {random_tensor({2, 3, 4}, 31)},
        [](const auto& in) { return weighted_sum(slice(in[0], {0, 1, 1}, {2, 3, 3}), 13); });
    run("concat", {random_tensor({2, 2, 3}, 32), random_tensor({2, 1, 3}, 33)},
        [](const auto& in) { return weighted_sum(concat({in[0], in[1]}, 1), 14); });
    run("broadcast_to", {random_tensor({1, 3}, 34)},
        [](const auto& in) { return weighted_sum(broadcast_to(in[0], {4, 2, 3}), 15); });

    run("sum all", {random_tensor({2, 3, 4}, 35)},
        [](const auto& in) { return sum(in[0]); });
    run("sum axes", {random_tensor({2, 3, 4}, 36)},
        [](const auto& in) { return weighted_sum(sum(in[0], {0, 2}), 16); });
    run("mean keepdims", {random_tensor({2, 3, 4}, 37)},
        [](const auto& in) { return weighted_sum(mean(in[0], {1}, true), 17); });
    run("variance", {random_tensor({2, 3, 4}, 38)},
        [](const auto& in) { return weighted_sum(variance(in[0], {2}), 18); });
    run("variance all", {random_tensor({3, 3}, 39)},
        [](const auto& in) { return variance(in[0]); });
    run("max", {random_tensor({2, 3, 4}, 40)}, [](const auto& in) {
        // tie-free by construction of the random stream
        return weighted_sum(max(in[0], {1}), 19);
    });
    run("l2_norm", {random_signed_away_from_zero({2, 3}, 41)},
        [](const auto& in) { return l2_norm(in[0]); });

    run("sqrt", {random_tensor({2, 3}, 42, 0.5, 2.5)},
        [](const auto& in) { return weighted_sum(sqrt(in[0]), 20); });
    run("exp", {random_tensor({2, 3}, 43)},
        [](const auto& in) { return weighted_sum(exp(in[0]), 21); });
    run("log", {random_tensor({2, 3}, 44, 0.5, 2.5)},
        [](const auto& in) { return weighted_sum(log(in[0]), 22); });
    run("tanh", {random_tensor({2, 3}, 45)},
        [](const auto& in) { return weighted_sum(tanh(in[0]), 23); });
    run("relu", {random_signed_away_from_zero({2, 5}, 46, 0.1, 2.0)},
        [](const auto& in) { return weighted_sum(relu(in[0]), 24); });
    run("gelu", {random_tensor({2, 5}, 47)},
        [](const auto& in) { return weighted_sum(gelu(in[0]), 25); });

    run("softmax last", {random_tensor({3, 4}, 48)},
        [](const auto& in) { return weighted_sum(softmax(in[0], -1), 26); });
    run("softmax axis0", {random_tensor({3, 4}, 49)},
        [](const auto& in) { return weighted_sum(softmax(in[0], 0), 27); });
    run("layer_norm", {random_tensor({2, 5}, 50)},
        [](const auto& in) { return weighted_sum(layer_norm(in[0], -1, 1e-6), 28); });
    run("layer_norm axis0", {random_tensor({5, 2}, 51)},
        [](const auto& in) { return weighted_sum(layer_norm(in[0], 0, 1e-6), 29); });

    run("conv2d pad", {random_tensor({2, 5, 4, 2}, 52), random_tensor({3, 3, 2, 3}, 53)},
        [](const auto& in) { return weighted_sum(conv2d(in[0], in[1], 1, 1), 30); });
    run("conv2d stride", {random_tensor({1, 5, 5, 2}, 54), random_tensor({3, 3, 2, 2}, 55)},
        [](const auto& in) { return weighted_sum(conv2d(in[0], in[1], 2, 0), 31); });
    run("batch_stats", {random_tensor({2, 3, 3, 2}, 56)}, [](const auto& in) {
        auto [mu, var] = batch_stats(in[0]);
        return add(weighted_sum(mu, 32), weighted_sum(var, 33));
    });
    run("extract_patches", {random_tensor({1, 4, 4, 2}, 57)},
        [](const auto& in) { return weighted_sum(extract_patches(in[0], 2), 34); });
    run("resize up", {random_tensor({1, 4, 4, 1}, 58)},
        [](const auto& in) { return weighted_sum(resize_nearest(in[0], 6, 6), 35); });
    run("resize down", {random_tensor({1, 4, 4, 1}, 59)},
        [](const auto& in) { return weighted_sum(resize_nearest(in[0], 2, 2), 36); });
    run("cross_entropy", {random_tensor({3, 5}, 60)},
        [](const auto& in) { return cross_entropy(in[0], {0, 3, 2}); });
}

TEST_CASE("softmax symmetry and row normalization") {
    Tensor z = Tensor::from_data({3}, {0, 0, 0});
    Tensor p = softmax(z, 0);
    for (double v : p.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    Tensor x = random_tensor({7, 9}, 101, -5.0, 5.0);
    Tensor sm = softmax(x, -1);
    for (int64_t r = 0; r < 7; ++r) {
        double s = 0;
        for (int64_t c = 0; c < 9; ++c) s += sm.values()[static_cast<size_t>(r * 9 + c)];
        CHECK(std::abs(s - 1.0) < 1e-12);
    }
}

TEST_CASE("layer_norm of a constant vector is zero; output moments") {
    Tensor c = Tensor::full({4}, 3.25);
    Tensor y = layer_norm(c, 0, 1e-6);
    for (double v : y.values()) CHECK(v == 0.0);

    Tensor x = random_tensor({3, 64}, 102);
    Tensor ln = layer_norm(x, -1, 1e-6);
    for (int64_t r = 0; r < 3; ++r) {
        double m = 0, v = 0;
        for (int64_t cidx = 0; cidx < 64; ++cidx) m += ln.values()[static_cast<size_t>(r * 64 + cidx)];
        m /= 64.0;
        CHECK(std::abs(m) < 1e-10);
        for (int64_t cidx = 0; cidx < 64; ++cidx) {
            const double d = ln.values()[static_cast<size_t>(r * 64 + cidx)] - m;
            v += d * d;
        }
        v /= 64.0;
        // variance is v_in/(v_in+eps), i.e. 1 up to the eps adjustment
        double vin = 0, mi = 0;
        for (int64_t cidx = 0; cidx < 64; ++cidx) mi += x.values()[static_cast<size_t>(r * 64 + cidx)];
        mi /= 64.0;
        for (int64_t cidx = 0; cidx < 64; ++cidx) {
            const double d = x.values()[static_cast<size_t>(r * 64 + cidx)] - mi;
            vin += d * d;
        }
        vin /= 64.0;
        CHECK(std::abs(v - vin / (vin + 1e-6)) < 1e-9);
        CHECK(std::abs(v - 1.0) < 1e-5);
    }
}

TEST_CASE("backward identities") {
    SUBCASE("root = sum(x) gives all-ones gradient") {
        Tensor x = random_tensor({3, 4}, 103).set_requires_grad(true);
        Tape tape;
        {
            Tape::Scope scope(tape);
            tape.backward(sum(x));
        }
        for (double g : x.grad()) CHECK(g == 1.0);
    }
    SUBCASE("root = 0.5*||x||^2 gives x back") {
        Tensor x = random_tensor({5}, 104).set_requires_grad(true);
        Tape tape;
        {
            Tape::Scope scope(tape);
            tape.backward(mul(sum(mul(x, x)), 0.5));
        }
        for (size_t i = 0; i < 5; ++i)
            CHECK(x.grad()[i] == doctest::Approx(x.values()[i]).epsilon(1e-12));
    }
}

TEST_CASE("gradient accumulation sums path contributions") {
    Tensor x = random_tensor({4}, 105).set_requires_grad(true);
    Tensor a = random_tensor({4}, 106);
    Tensor b = random_tensor({4}, 107);
    Tape tape;
    {
        Tape::Scope scope(tape);
        tape.backward(sum(add(mul(x, a), mul(x, b))));
    }
    for (size_t i = 0; i < 4; ++i)
        CHECK(x.grad()[i] == doctest::Approx(a.values()[i] + b.values()[i]).epsilon(1e-12));

    // equivalent single-consumer duplication
    Tensor x1 = x.detach().set_requires_grad(true);
    Tensor x2 = x.detach().set_requires_grad(true);
    Tape tape2;
    {
        Tape::Scope scope(tape2);
        tape2.backward(sum(add(mul(x1, a), mul(x2, b))));
    }
    for (size_t i = 0; i < 4; ++i)
        CHECK(x.grad()[i] ==
              doctest::Approx(x1.grad()[i] + x2.grad()[i]).epsilon(1e-12));
}

TEST_CASE("error surfaces") {
    SUBCASE("non-scalar backward root") {
        Tensor x = random_tensor({3}, 108).set_requires_grad(true);
        Tape tape;
        Tape::Scope scope(tape);
        Tensor y = mul(x, 2.0);
        CHECK_THROWS_AS(tape.backward(y), ContractViolation);
    }
    SUBCASE("double backward is rejected") {
        Tensor x = random_tensor({3}, 109).set_requires_grad(true);
        Tape tape;
        Tape::Scope scope(tape);
        Tensor y = sum(x);
        tape.backward(y);
        CHECK_THROWS_AS(tape.backward(y), ContractViolation);
    }
    SUBCASE("shape mismatch") {
        CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({4})), ContractViolation);
        CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2})), ContractViolation);
    }
    SUBCASE("non-finite results raise numeric errors naming the op") {
        try {
            div(Tensor::from_data({2}, {1.0, 1.0}), Tensor::from_data({2}, {1.0, 0.0}));
            FAIL("expected NumericError");
        } catch (const NumericError& e) {
            CHECK(std::string(e.what()).find("div") != std::string::npos);
        }
        CHECK_THROWS_AS(log(Tensor::from_data({1}, {-1.0})), NumericError);
        CHECK_THROWS_AS(sqrt(Tensor::from_data({1}, {-4.0})), NumericError);
    }
}

TEST_CASE("determinism: identical seeds give bit-identical passes") {
    auto once = [](uint64_t seed) {
        Tensor x = random_tensor({4, 6}, seed).set_requires_grad(true);
        Tensor w = random_tensor({6, 3}, seed + 1).set_requires_grad(true);
        Tape tape;
        std::vector<double> out;
        {
            Tape::Scope scope(tape);
            Tensor y = softmax(matmul(gelu(x), w), -1);
            Tensor s = weighted_sum(y, 99);
            tape.backward(s);
            out.push_back(s.item());
        }
        out.insert(out.end(), x.grad().begin(), x.grad().end());
        out.insert(out.end(), w.grad().begin(), w.grad().end());
        return out;
    };
    auto a = once(1234), b = once(1234);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("argsort is ascending and stable") {
    Tensor x = Tensor::from_data({5}, {3.0, -1.0, 2.0, -1.0, 0.0});
    auto idx = argsort(x);
    CHECK(idx == std::vector<int64_t>{1, 3, 4, 2, 0});
}

TEST_CASE("GVT1 archive round-trips bit-exactly") {
    namespace fs = std::filesystem;
    const fs::path path = fs::temp_directory_path() / "gradleak_test_archive.gvt";
    Tensor a = random_tensor({3, 5}, 110);
    Tensor b = random_tensor({2, 2, 2}, 111);
    {
        ArchiveWriter w;
        w.add("alpha", a);
        w.add("nested/beta", b);
        w.add("gamma_f32", a, true);
        w.save(path);
    }
    Archive ar = Archive::load(path);
    CHECK(ar.names() == std::vector<std::string>{"alpha", "nested/beta", "gamma_f32"});
    Tensor a2 = ar.get("alpha");
    REQUIRE(a2.shape() == a.shape());
    for (size_t i = 0; i < a.values().size(); ++i) CHECK(a2.values()[i] == a.values()[i]);
    Tensor b2 = ar.get("nested/beta");
    for (size_t i = 0; i < b.values().size(); ++i) CHECK(b2.values()[i] == b.values()[i]);
    Tensor g = ar.get("gamma_f32");
    for (size_t i = 0; i < a.values().size(); ++i)
        CHECK(g.values()[i] == static_cast<double>(static_cast<float>(a.values()[i])));

    // second write of identical content is byte-identical
    const fs::path path2 = fs::temp_directory_path() / "gradleak_test_archive2.gvt";
    {
        ArchiveWriter w;
        w.add("alpha", a);
        w.add("nested/beta", b);
        w.add("gamma_f32", a, true);
        w.save(path2);
    }
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);

    CHECK_THROWS_AS(ar.get("missing"), ContractViolation);
    fs::remove(path);
    fs::remove(path2);
}

TEST_CASE("no in-place aliasing: op outputs are fresh storage") {
    Tensor x = random_tensor({4}, 112);
    Tensor y = add(x, 0.0);
    CHECK(y.impl() != x.impl());
    y.values_mut()[0] = 42.0;
    CHECK(x.values()[0] != 42.0);
}
