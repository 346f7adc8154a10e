#include <doctest.h>

#include <cmath>
#include <random>

#include "warpnorm/gradcheck.hpp"
#include "warpnorm/tensor.hpp"

using namespace warpnorm;

namespace {

Tensor4 randn_t(std::uint64_t seed, int b, int c, int h, int w) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d(0.0, 1.0);
    Tensor4 t(b, c, h, w);
    for (std::size_t i = 0; i < t.size(); ++i)
        t[i] = d(rng);
    return t;
}

// Direct quadruple-loop convolution, the oracle for the gemm-backed path.
Tensor4 ref_conv2d(const Tensor4& x, const ConvKernel& k) {
    Tensor4 out(x.b(), k.c_out(), x.h(), x.w());
    for (int b = 0; b < x.b(); ++b)
        for (int co = 0; co < k.c_out(); ++co)
            for (int y = 0; y < x.h(); ++y)
                for (int xx = 0; xx < x.w(); ++xx) {
                    double acc = k.use_bias ? k.b.at(0, co, 0, 0) : 0.0;
                    for (int ci = 0; ci < x.c(); ++ci)
                        for (int ky = 0; ky < 3; ++ky)
                            for (int kx = 0; kx < 3; ++kx) {
                                const int sy = y + ky - 1, sx = xx + kx - 1;
                                if (sy < 0 || sy >= x.h() || sx < 0 || sx >= x.w())
                                    continue;
                                acc += k.w.at(co, ci, ky, kx) * x.at(b, ci, sy, sx);
                            }
                    out.at(b, co, y, xx) = acc;
                }
    return out;
}

ConvKernel rand_kernel(std::uint64_t seed, int c_out, int c_in, bool use_bias = true) {
    return ConvKernel(randn_t(seed, c_out, c_in, 3, 3), randn_t(seed + 1, 1, c_out, 1, 1),
                      use_bias);
}

} // namespace

TEST_CASE("tensor construction and invariants") {
    Tensor4 t(1, 2, 3, 4, 0.5);
    CHECK(t.size() == 24);
    CHECK(t.at(0, 1, 2, 3) == 0.5);
    CHECK_THROWS_AS(Tensor4(0, 1, 1, 1), dim_error);
    CHECK_THROWS_AS(Tensor4::from_data(1, 1, 1, 2, {1.0}), dim_error);
    CHECK_THROWS_AS(Tensor4::from_data(1, 1, 1, 2, {1.0, std::nan("")}), contract_error);
    set_checked_mode(false);
    CHECK_NOTHROW(Tensor4::from_data(1, 1, 1, 2, {1.0, std::nan("")}));
    set_checked_mode(true);
}

TEST_CASE("elementwise identities") {
    Tensor4 x = randn_t(7, 1, 2, 3, 3);
    Tensor4 zeros(1, 2, 3, 3);
    CHECK(max_abs_diff(add(zeros, x), x) == 0.0);

    Tensor4 a = randn_t(8, 1, 2, 3, 3);
    Tensor4 b = randn_t(9, 1, 2, 3, 3);
    Tensor4 ones(1, 1, 3, 3, 1.0);
    Tensor4 zmask(1, 1, 3, 3, 0.0);
    CHECK(max_abs_diff(lerp(a, b, ones), a) == 0.0);
    CHECK(max_abs_diff(lerp(a, b, zmask), b) == 0.0);
}

TEST_CASE("mul matches the scalar oracle") {
    Tensor4 a = Tensor4::from_data(1, 1, 1, 2, {2.0, 3.0});
    Tensor4 b = Tensor4::from_data(1, 1, 1, 2, {4.0, 5.0});
    Tensor4 p = mul(a, b);
    CHECK(p[0] == 8.0);
    CHECK(p[1] == 15.0);
}

TEST_CASE("elementwise shape errors carry both shapes") {
    Tensor4 a(1, 2, 3, 3);
    Tensor4 b(1, 3, 3, 3);
    CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("(1,2,3,3)"), dim_error);
}

TEST_CASE("conv2d identity kernel") {
    Tensor4 x = randn_t(11, 2, 3, 5, 6);
    Tensor4 w(3, 3, 3, 3);
    for (int c = 0; c < 3; ++c)
        w.at(c, c, 1, 1) = 1.0;
    ConvKernel k(w, Tensor4(1, 3, 1, 1));
    CHECK(max_abs_diff(conv2d(x, k), x) < 1e-15);
}

TEST_CASE("conv2d all-ones kernel on a constant image") {
    const double c = 0.7, bias = 0.3;
    Tensor4 x(1, 1, 6, 6, c);
    ConvKernel k(Tensor4(1, 1, 3, 3, 1.0), Tensor4(1, 1, 1, 1, bias));
    Tensor4 out = conv2d(x, k);
    // hand-convolution oracle: 9 taps inside, 6 on an edge, 4 in a corner
    CHECK(out.at(0, 0, 3, 3) == doctest::Approx(9 * c + bias).epsilon(1e-12));
    CHECK(out.at(0, 0, 0, 3) == doctest::Approx(6 * c + bias).epsilon(1e-12));
    CHECK(out.at(0, 0, 3, 0) == doctest::Approx(6 * c + bias).epsilon(1e-12));
    CHECK(out.at(0, 0, 0, 0) == doctest::Approx(4 * c + bias).epsilon(1e-12));
    CHECK(max_abs_diff(out, ref_conv2d(x, k)) < 1e-12);
}

TEST_CASE("conv2d matches the direct-loop oracle on random input") {
    Tensor4 x = randn_t(21, 2, 3, 7, 5);
    ConvKernel k = rand_kernel(22, 4, 3);
    CHECK(max_abs_diff(conv2d(x, k), ref_conv2d(x, k)) < 1e-12);
    CHECK_THROWS_AS(conv2d(randn_t(23, 1, 2, 4, 4), k), dim_error);
}

TEST_CASE("conv2d is linear in input and weights") {
    Tensor4 x1 = randn_t(31, 1, 2, 5, 5);
    Tensor4 x2 = randn_t(32, 1, 2, 5, 5);
    ConvKernel k = rand_kernel(33, 3, 2, false);
    Tensor4 lhs = conv2d(add(x1, scale(x2, 2.5)), k);
    Tensor4 rhs = add(conv2d(x1, k), scale(conv2d(x2, k), 2.5));
    CHECK(max_abs_diff(lhs, rhs) < 1e-12);

    ConvKernel k2 = rand_kernel(34, 3, 2, false);
    ConvKernel ksum(add(k.w, k2.w), Tensor4(1, 3, 1, 1), false);
    Tensor4 lhs2 = conv2d(x1, ksum);
    Tensor4 rhs2 = add(conv2d(x1, k), conv2d(x1, k2));
    CHECK(max_abs_diff(lhs2, rhs2) < 1e-12);
}

TEST_CASE("up/down sampling") {
    Tensor4 x = randn_t(41, 1, 2, 4, 4);
    CHECK(max_abs_diff(avgpool2x(upsample_nearest2x(x)), x) == 0.0);

    Tensor4 q = Tensor4::from_data(1, 1, 2, 2, {1.0, 3.0, 5.0, 7.0});
    Tensor4 pooled = avgpool2x(q);
    CHECK(pooled.size() == 1);
    CHECK(pooled[0] == 4.0); // (1+3+5+7)/4

    Tensor4 v(1, 1, 1, 1, 2.25);
    Tensor4 up = upsample_nearest2x(v);
    CHECK(up.size() == 4);
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(up[i] == 2.25);

    CHECK_THROWS_AS(avgpool2x(Tensor4(1, 1, 3, 4)), dim_error);
}

TEST_CASE("bilinear_sample identity and clamping") {
    Tensor4 src = randn_t(51, 1, 3, 6, 5);
    Tensor4 zero_flow(1, 2, 6, 5);
    CHECK(max_abs_diff(bilinear_sample(src, zero_flow), src) == 0.0);

    // integer-shift oracle: dy=1 pulls the next row, bottom row duplicates
    Tensor4 flow(1, 2, 6, 5);
    for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 5; ++x)
            flow.at(0, 0, y, x) = 1.0;
    Tensor4 shifted = bilinear_sample(src, flow);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 6; ++y)
            for (int x = 0; x < 5; ++x) {
                const int sy = std::min(y + 1, 5);
                CHECK(shifted.at(0, c, y, x) == src.at(0, c, sy, x));
            }

    CHECK_THROWS_AS(bilinear_sample(src, Tensor4(1, 3, 6, 5)), dim_error);
}

TEST_CASE("bilinear_sample midpoint interpolation") {
    Tensor4 src = Tensor4::from_data(1, 1, 1, 2, {0.0, 1.0});
    Tensor4 flow(1, 2, 1, 2);
    flow.at(0, 1, 0, 0) = 0.5; // dx at x=0
    Tensor4 out = bilinear_sample(src, flow);
    CHECK(out.at(0, 0, 0, 0) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("bilinear_sample preserves constants under any flow") {
    std::mt19937_64 rng(61);
    std::uniform_real_distribution<double> d(-30.0, 30.0);
    Tensor4 src(1, 2, 5, 5, 3.25);
    Tensor4 flow(1, 2, 5, 5);
    for (std::size_t i = 0; i < flow.size(); ++i)
        flow[i] = d(rng);
    Tensor4 out = bilinear_sample(src, flow);
    CHECK(max_abs_diff(out, src) < 1e-12);
}

TEST_CASE("bilinear_sample is linear in the source") {
    Tensor4 a = randn_t(71, 1, 2, 5, 5);
    Tensor4 b = randn_t(72, 1, 2, 5, 5);
    std::mt19937_64 rng(73);
    std::uniform_real_distribution<double> d(-3.0, 3.0);
    Tensor4 flow(1, 2, 5, 5);
    for (std::size_t i = 0; i < flow.size(); ++i)
        flow[i] = d(rng);
    const double alpha = 1.75;
    Tensor4 lhs = bilinear_sample(add(scale(a, alpha), b), flow);
    Tensor4 rhs = add(scale(bilinear_sample(a, flow), alpha), bilinear_sample(b, flow));
    CHECK(max_abs_diff(lhs, rhs) < 1e-12);
}

TEST_CASE("vjp of add and mul are linear/product rules") {
    Tensor4 a = randn_t(81, 1, 2, 4, 4);
    Tensor4 b = randn_t(82, 1, 2, 4, 4);
    Tensor4 g = randn_t(83, 1, 2, 4, 4);
    auto [ga, gb] = add_vjp(a, b, g);
    CHECK(max_abs_diff(ga, g) == 0.0);
    CHECK(max_abs_diff(gb, g) == 0.0);
    auto [ma, mb] = mul_vjp(a, b, g);
    CHECK(max_abs_diff(ma, mul(g, b)) == 0.0);
    CHECK(max_abs_diff(mb, mul(g, a)) == 0.0);
}

TEST_CASE("broadcast vjp reduces over the broadcast dims") {
    Tensor4 a = randn_t(84, 1, 3, 4, 4);
    Tensor4 m = randn_t(85, 1, 1, 4, 4);
    Tensor4 g = randn_t(86, 1, 3, 4, 4);
    auto [ga, gm] = mul_vjp(a, m, g);
    CHECK(ga.same_shape(a));
    CHECK(gm.same_shape(m));
    // oracle: explicit channel sum
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
            double acc = 0.0;
            for (int c = 0; c < 3; ++c)
                acc += g.at(0, c, y, x) * a.at(0, c, y, x);
            CHECK(gm.at(0, 0, y, x) == doctest::Approx(acc).epsilon(1e-12));
        }
}

TEST_CASE("conv2d and bilinear_sample vjps match finite differences") {
    for (const char* op : {"conv2d", "bilinear_sample"}) {
        CheckOptions opt;
        opt.seeds = 3;
        auto reports = check_vjp(op, opt);
        for (const auto& r : reports) {
            CAPTURE(op);
            CAPTURE(r.seed);
            CHECK(r.pass);
        }
    }
}
