#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "refdiff/gradcheck.hpp"
#include "refdiff/ops.hpp"

using namespace refdiff;

namespace {

Tensor64 randn64(Shape sh, Rng& rng, double scale = 1.0) { return Tensor64::randn(std::move(sh), rng, scale); }

}  // namespace

TEST_CASE("matmul basics") {
    Graph64 g;
    Var64 eye(g, g.input(Tensor64::eye(2)));
    Var64 a(g, g.input(Tensor64({2, 2}, {1, 2, 3, 4})));
    auto c = matmul(eye, a);
    CHECK(c.val().data == std::vector<double>{1, 2, 3, 4});

    Var64 row(g, g.input(Tensor64({1, 2}, {1, 2})));
    Var64 col(g, g.input(Tensor64({2, 1}, {3, 4})));
    CHECK(matmul(row, col).val()[0] == doctest::Approx(11.0));  // 1*3 + 2*4

    Var64 z(g, g.input(Tensor64::zeros({2, 3})));
    Rng rng(7);
    Var64 any(g, g.input(randn64({3, 5}, rng)));
    auto zc = matmul(z, any);
    CHECK(zc.shape() == Shape{2, 5});
    for (double v : zc.val().data) CHECK(v == 0.0);

    Var64 bad(g, g.input(Tensor64::zeros({4, 5})));
    CHECK_THROWS_WITH_AS(matmul(a, bad), doctest::Contains("[2x2]"), dimension_error);
    try {
        matmul(a, bad);
    } catch (const dimension_error& e) {
        CHECK(std::string(e.what()).find("[4x5]") != std::string::npos);
    }
}

TEST_CASE("conv2d closed forms") {
    Graph64 g;
    Rng rng(3);
    Tensor64 x = randn64({1, 1, 4, 4}, rng);
    Var64 vx(g, g.input(x));

    // 1x1 identity kernel
    Var64 k1(g, g.input(Tensor64({1, 1, 1, 1}, {1.0})));
    auto y = conv2d(vx, k1, 1, 0);
    CHECK(y.val().data == x.data);

    // all-ones 2x2 kernel, stride 2 on [[1,0],[0,0]] -> [[1]]
    Var64 small(g, g.input(Tensor64({1, 1, 2, 2}, {1, 0, 0, 0})));
    Var64 kones(g, g.input(Tensor64::full({1, 1, 2, 2}, 1.0)));
    auto pooled = conv2d(small, kones, 2, 0);
    CHECK(pooled.shape() == Shape{1, 1, 1, 1});
    CHECK(pooled.val()[0] == doctest::Approx(1.0));

    // zero kernel -> zero output
    Var64 kz(g, g.input(Tensor64::zeros({2, 1, 3, 3})));
    auto zy = conv2d(vx, kz, 1, 1);
    for (double v : zy.val().data) CHECK(v == 0.0);

    // non-positive output size
    Var64 kbig(g, g.input(Tensor64::zeros({1, 1, 7, 7})));
    CHECK_THROWS_AS(conv2d(vx, kbig, 1, 0), dimension_error);
}

TEST_CASE("conv2d matches direct-loop oracle") {
    Rng rng(11);
    for (int inst = 0; inst < 4; ++inst) {
        const int b = 1 + int(rng.below(2)), c = 1 + int(rng.below(3)), h = 4 + int(rng.below(3));
        const int w = 4 + int(rng.below(3)), oc = 1 + int(rng.below(3));
        const int kh = 1 + int(rng.below(3)), kw = 1 + int(rng.below(3));
        const int stride = 1 + int(rng.below(2)), pad = int(rng.below(2));
        Tensor64 x = randn64({b, c, h, w}, rng);
        Tensor64 k = randn64({oc, c, kh, kw}, rng);
        const int oh = (h + 2 * pad - kh) / stride + 1;
        const int ow = (w + 2 * pad - kw) / stride + 1;
        if (oh <= 0 || ow <= 0) continue;

        Graph64 g;
        auto y = conv2d(Var64(g, g.input(x)), Var64(g, g.input(k)), stride, pad);

        // independent quadruple-loop oracle
        for (int i = 0; i < b; ++i)
            for (int o = 0; o < oc; ++o)
                for (int oy = 0; oy < oh; ++oy)
                    for (int ox = 0; ox < ow; ++ox) {
                        double acc = 0;
                        for (int ch = 0; ch < c; ++ch)
                            for (int ky = 0; ky < kh; ++ky)
                                for (int kx = 0; kx < kw; ++kx) {
                                    const int iy = oy * stride + ky - pad;
                                    const int ix = ox * stride + kx - pad;
                                    if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                                    acc += x[x.offset4(i, ch, iy, ix)] * k[k.offset4(o, ch, ky, kx)];
                                }
                        CHECK(y.val()[y.val().offset4(i, o, oy, ox)] == doctest::Approx(acc).epsilon(1e-10));
                    }
    }
}

TEST_CASE("softmax contracts") {
    Graph64 g;
    Var64 a(g, g.input(Tensor64({2}, {1, 1})));
    auto sa = softmax(a, 0);
    CHECK(sa.val()[0] == doctest::Approx(0.5));
    CHECK(sa.val()[1] == doctest::Approx(0.5));

    Var64 b(g, g.input(Tensor64({2}, {0.0, std::log(3.0)})));
    auto sb = softmax(b, 0);
    CHECK(sb.val()[0] == doctest::Approx(0.25));
    CHECK(sb.val()[1] == doctest::Approx(0.75));

    const double ninf = -std::numeric_limits<double>::infinity();
    Var64 c(g, g.input(Tensor64({2}, {5.0, ninf})));
    auto sc = softmax(c, 0);
    CHECK(sc.val()[0] == 1.0);
    CHECK(sc.val()[1] == 0.0);  // exactly zero

    Var64 d(g, g.input(Tensor64({1, 2}, {ninf, ninf})));
    CHECK_THROWS_AS(softmax(d, 1), invalid_mask_error);

    // random instances: rows sum to 1 within 1e-6; masked entries exactly 0
    Rng rng(5);
    for (int inst = 0; inst < 8; ++inst) {
        const int rows = 2 + int(rng.below(4)), cols = 2 + int(rng.below(6));
        Tensor64 t = randn64({rows, cols}, rng, 3.0);
        for (int i = 0; i < rows; ++i)
            if (rng.bernoulli(0.7)) t[size_t(i) * cols + int(rng.below(uint64_t(cols)))] = ninf;
        Graph64 g2;
        auto s = softmax(Var64(g2, g2.input(t)), 1);
        for (int i = 0; i < rows; ++i) {
            double sum = 0;
            for (int j = 0; j < cols; ++j) {
                const double v = s.val()[size_t(i) * cols + j];
                sum += v;
                if (t[size_t(i) * cols + j] == ninf) CHECK(v == 0.0);
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("group_norm closed forms") {
    Graph64 g;
    // constant input, gain 1, bias 0 -> ~0 (eps path)
    Var64 gain1(g, g.input(Tensor64::full({4}, 1.0)));
    Var64 bias0(g, g.input(Tensor64::zeros({4})));
    Var64 cst(g, g.input(Tensor64::full({1, 4, 2, 2}, 3.25)));
    auto y = group_norm(cst, 2, gain1, bias0);
    for (double v : y.val().data) CHECK(std::abs(v) < 1e-6);

    // [1,-1] single group, eps = 0: already mean 0 var 1
    Var64 gain2(g, g.input(Tensor64::full({2}, 1.0)));
    Var64 bias2(g, g.input(Tensor64::zeros({2})));
    Var64 pm(g, g.input(Tensor64({1, 2, 1, 1}, {1.0, -1.0})));
    auto y2 = group_norm(pm, 1, gain2, bias2, 0.0);
    CHECK(y2.val()[0] == doctest::Approx(1.0));
    CHECK(y2.val()[1] == doctest::Approx(-1.0));

    // gain 0 -> bias broadcast
    Var64 gain0(g, g.input(Tensor64::zeros({2})));
    Var64 biasv(g, g.input(Tensor64({2}, {0.5, -2.0})));
    Rng rng(9);
    Var64 x(g, g.input(randn64({2, 2, 3, 3}, rng)));
    auto y3 = group_norm(x, 1, gain0, biasv);
    for (int i = 0; i < 2; ++i)
        for (int ch = 0; ch < 2; ++ch)
            for (int j = 0; j < 9; ++j)
                CHECK(y3.val()[(size_t(i) * 2 + ch) * 9 + j] == doctest::Approx(biasv.val()[ch]));

    CHECK_THROWS_AS(group_norm(x, 3, gain2, bias2), config_error);
}

TEST_CASE("group_norm normalizes per group") {
    Rng rng(21);
    Tensor64 x = randn64({2, 8, 4, 4}, rng, 2.5);
    Graph64 g;
    Var64 gain(g, g.input(Tensor64::full({8}, 1.0)));
    Var64 bias(g, g.input(Tensor64::zeros({8})));
    auto y = group_norm(Var64(g, g.input(x)), 4, gain, bias, 1e-12);
    for (int i = 0; i < 2; ++i)
        for (int grp = 0; grp < 4; ++grp) {
            double mean = 0, var = 0;
            const int64_t base = (int64_t(i) * 8 + grp * 2) * 16;
            for (int j = 0; j < 32; ++j) mean += y.val()[base + j];
            mean /= 32;
            for (int j = 0; j < 32; ++j) {
                const double d = y.val()[base + j] - mean;
                var += d * d;
            }
            var /= 32;
            CHECK(std::abs(mean) < 1e-5);
            CHECK(std::abs(var - 1.0) < 1e-5);
        }
}

TEST_CASE("silu and embed") {
    Graph64 g;
    Var64 x(g, g.input(Tensor64({3}, {0.0, -20.0, 1.0})));
    auto y = silu(x);
    CHECK(y.val()[0] == 0.0);
    CHECK(std::abs(y.val()[1]) < 1e-7);
    CHECK(y.val()[2] == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));

    Rng rng(2);
    Tensor64 table = randn64({6, 4}, rng);
    Var64 vt(g, g.input(table));
    auto row = embed(vt, {0});
    for (int j = 0; j < 4; ++j) CHECK(row.val()[j] == table[j]);
    auto two = embed(vt, {3, 3});
    for (int j = 0; j < 4; ++j) CHECK(two.val()[j] == two.val()[4 + j]);  // lookup determinism
    CHECK_THROWS_AS(embed(vt, {6}), index_error);
    CHECK_THROWS_AS(embed(vt, {-1}), index_error);
}

TEST_CASE("grad_check closed forms") {
    // f(x) = x^2 at x = 3: analytic 6
    ScalarFn<double> square = [](Graph64& g, std::vector<Var64>& v) { return mul(v[0], v[0]); };
    {
        Graph64 g;
        Var64 x(g, g.input(Tensor64({1}, {3.0})));
        auto y = mul(x, x);
        g.backward(y.id);
        CHECK(g.grad(x.id)[0] == doctest::Approx(6.0));
    }
    CHECK(grad_check<double>(square, {Tensor64({1}, {3.0})}) < 1e-8);

    // constant function -> zero gradient, zero error
    ScalarFn<double> cst = [](Graph64& g, std::vector<Var64>& v) {
        Var64 k(g, g.constant(Tensor64({1}, {4.0})));
        return mul(k, k);
    };
    CHECK(grad_check<double>(cst, {Tensor64({2}, {1.0, 2.0})}) == 0.0);

    // random 3x3 matmul-sum composite
    Rng rng(13);
    ScalarFn<double> comp = [](Graph64& g, std::vector<Var64>& v) { return sum_all(matmul(v[0], v[1])); };
    CHECK(grad_check<double>(comp, {randn64({3, 3}, rng), randn64({3, 3}, rng)}) < 1e-4);
}

TEST_CASE("grad_check every differentiable op, 5+ random instances") {
    Rng rng(17);
    auto run = [&](const ScalarFn<double>& f, std::vector<Tensor64> point) {
        CHECK(grad_check<double>(f, std::move(point)) < 1e-4);
    };

    for (int inst = 0; inst < 5; ++inst) {
        const int m = 2 + int(rng.below(3)), k = 2 + int(rng.below(3)), n = 2 + int(rng.below(3));
        run([](Graph64& g, std::vector<Var64>& v) { return sum_all(matmul(v[0], v[1])); },
            {randn64({m, k}, rng), randn64({k, n}, rng)});
        run([](Graph64& g, std::vector<Var64>& v) { return sum_all(silu(transpose2d(v[0]))); },
            {randn64({m, n}, rng)});
        run([](Graph64& g, std::vector<Var64>& v) { return mean_all(mul(v[0], v[1])); },
            {randn64({m, n}, rng), randn64({m, n}, rng)});
        run([](Graph64& g, std::vector<Var64>& v) { return sum_all(mul(add(v[0], v[1]), sub(v[0], v[1]))); },
            {randn64({m, n}, rng), randn64({m, n}, rng)});
        run([](Graph64& g, std::vector<Var64>& v) { return sum_all(silu(scale(v[0], 1.7))); },
            {randn64({m, n}, rng)});

        const int stride = 1 + int(rng.below(2)), pad = int(rng.below(2));
        run(
            [stride, pad](Graph64& g, std::vector<Var64>& v) {
                return sum_all(silu(conv2d(v[0], v[1], stride, pad)));
            },
            {randn64({2, 2, 5, 5}, rng), randn64({3, 2, 3, 3}, rng)});

        run([](Graph64& g, std::vector<Var64>& v) { return sum_all(mul(softmax(v[0], 1), v[1])); },
            {randn64({3, 4}, rng), randn64({3, 4}, rng)});

        run([](Graph64& g, std::vector<Var64>& v) {
            return sum_all(mul(group_norm(v[0], 2, v[1], v[2], 1e-3), v[3]));
        },
            {randn64({2, 4, 3, 3}, rng), randn64({4}, rng), randn64({4}, rng), randn64({2, 4, 3, 3}, rng)});

        run([](Graph64& g, std::vector<Var64>& v) { return sum_all(mul(embed(v[0], {1, 0, 2, 1}), v[1])); },
            {randn64({3, 4}, rng), randn64({4, 4}, rng)});

        run([](Graph64& g, std::vector<Var64>& v) { return sum_all(mul(add_channel_bias(v[0], v[1]), v[2])); },
            {randn64({2, 3, 2, 2}, rng), randn64({3}, rng), randn64({2, 3, 2, 2}, rng)});
        run([](Graph64& g, std::vector<Var64>& v) { return sum_all(mul(add_row_bias(v[0], v[1]), v[2])); },
            {randn64({3, 4}, rng), randn64({4}, rng), randn64({3, 4}, rng)});
        run([](Graph64& g, std::vector<Var64>& v) { return sum_all(mul(add_spatial_broadcast(v[0], v[1]), v[2])); },
            {randn64({2, 3, 2, 2}, rng), randn64({2, 3}, rng), randn64({2, 3, 2, 2}, rng)});

        run([m, n](Graph64& g, std::vector<Var64>& v) {
            return sum_all(silu(reshape(v[0], Shape{n, m})));
        },
            {randn64({m, n}, rng)});
        run([](Graph64& g, std::vector<Var64>& v) {
            return sum_all(silu(concat<double>({v[0], v[1], v[2]}, 1)));
        },
            {randn64({2, 3}, rng), randn64({2, 1}, rng), randn64({2, 2}, rng)});
        run([](Graph64& g, std::vector<Var64>& v) { return sum_all(silu(slice(v[0], 1, 1, 2))); },
            {randn64({3, 4}, rng)});
        run([](Graph64& g, std::vector<Var64>& v) { return sum_all(mul(upsample_nearest2(v[0]), v[1])); },
            {randn64({1, 2, 3, 3}, rng), randn64({1, 2, 6, 6}, rng)});
        run([](Graph64& g, std::vector<Var64>& v) { return mse(v[0], v[1]); },
            {randn64({2, 5}, rng), randn64({2, 5}, rng)});
    }
}

TEST_CASE("backward determinism: identical graphs give bit-identical gradients") {
    Rng rng(31);
    Tensor64 a = randn64({4, 4}, rng), b = randn64({4, 4}, rng), c = randn64({4}, rng), d = randn64({4}, rng);
    auto build = [&](Graph64& g, std::vector<Tensor64>& grads) {
        Var64 va(g, g.input(a)), vb(g, g.input(b)), vc(g, g.input(c)), vd(g, g.input(d));
        auto h    = group_norm(reshape(matmul(va, vb), Shape{1, 4, 2, 2}), 2, vc, vd, 1e-4);
        auto loss = mean_all(mul(silu(h), h));
        g.backward(loss.id);
        grads = {g.grad(va.id), g.grad(vb.id), g.grad(vc.id), g.grad(vd.id)};
    };
    Graph64 g1, g2;
    std::vector<Tensor64> r1, r2;
    build(g1, r1);
    build(g2, r2);
    for (size_t i = 0; i < r1.size(); ++i)
        CHECK(std::memcmp(r1[i].ptr(), r2[i].ptr(), sizeof(double) * size_t(r1[i].numel())) == 0);
}

TEST_CASE("reshape/concat/slice round-trip is bit-exact") {
    Rng rng(41);
    for (int inst = 0; inst < 6; ++inst) {
        const int axis = int(rng.below(2));
        Shape s1{2 + int(rng.below(3)), 2 + int(rng.below(3))};
        Shape s2 = s1;
        s2[size_t(axis)] = 1 + int(rng.below(4));
        Tensor64 a = randn64(s1, rng), b = randn64(s2, rng);
        Graph64 g;
        Var64 va(g, g.input(a)), vb(g, g.input(b));
        auto cat   = concat<double>({va, vb}, axis);
        auto back1 = slice(cat, axis, 0, s1[size_t(axis)]);
        auto back2 = slice(cat, axis, s1[size_t(axis)], s2[size_t(axis)]);
        CHECK(back1.val().data == a.data);
        CHECK(back2.val().data == b.data);
        auto rt = reshape(reshape(va, Shape{int(shape_numel(s1))}), s1);
        CHECK(rt.val().data == a.data);
    }
}

TEST_CASE("float32 storage also passes a coarse grad check") {
    // storage type is 32-bit; the 64-bit instantiation is the test mode.
    Rng rng(55);
    ScalarFn<float> f = [](Graph& g, std::vector<Var>& v) { return sum_all(matmul(v[0], v[1])); };
    const float err = grad_check<float>(f, {Tensor::randn({3, 3}, rng), Tensor::randn({3, 3}, rng)}, 1e-2f);
    CHECK(err < 1e-2f);
}
