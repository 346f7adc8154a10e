#include <doctest.h>

#include <cmath>

#include "warpnorm/synth.hpp"

using namespace warpnorm;

TEST_CASE("gen_scene is deterministic per seed") {
    SceneSpec spec;
    spec.motion = Motion::translate(3.5, -2.25);
    SynthScene a = gen_scene(42, spec);
    SynthScene b = gen_scene(42, spec);
    CHECK(max_abs_diff(a.x_s, b.x_s) == 0.0);
    CHECK(max_abs_diff(a.x_t, b.x_t) == 0.0);
    CHECK(max_abs_diff(a.flow_gt, b.flow_gt) == 0.0);
    SynthScene c = gen_scene(43, spec);
    CHECK(max_abs_diff(a.x_s, c.x_s) > 0.0);
}

TEST_CASE("identity motion reproduces the source") {
    SceneSpec spec; // identity by default
    SynthScene s = gen_scene(7, spec);
    CHECK(max_abs_diff(s.x_t, s.x_s) == 0.0);
    CHECK(max_abs(s.flow_gt) == 0.0);
    CHECK(max_abs_diff(s.p_t, s.p_s) == 0.0);
}

TEST_CASE("integer translation: constant flow and shifted pixels off-border") {
    SceneSpec spec;
    spec.motion = Motion::translate(3.0, -2.0);
    SynthScene s = gen_scene(11, spec);
    for (int y = 0; y < spec.h; ++y)
        for (int x = 0; x < spec.w; ++x) {
            CHECK(s.flow_gt.at(0, 0, y, x) == 3.0);
            CHECK(s.flow_gt.at(0, 1, y, x) == -2.0);
        }
    // analytic warp oracle: integer shift is an exact read
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < spec.h - 3; ++y)
            for (int x = 2; x < spec.w; ++x)
                CHECK(s.x_t.at(0, c, y, x) == s.x_s.at(0, c, y + 3, x - 2));
}

TEST_CASE("scene warp self-consistency on the visible region") {
    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
        SceneSpec spec;
        switch (seed % 3) {
        case 0: spec.motion = Motion::translate(4.5, -3.25); break;
        case 1: spec.motion = Motion::rotate(12.0 * M_PI / 180.0); break;
        default: spec.motion = Motion::affine(1.05, 0.08, -0.06, 0.95, 1.5, -2.0); break;
        }
        SynthScene s = gen_scene(seed, spec);
        Tensor4 warped = bilinear_sample(s.x_s, s.flow_gt);
        double acc = 0.0;
        long count = 0;
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < spec.h; ++y)
                for (int x = 0; x < spec.w; ++x)
                    if (s.occ.at(0, 0, y, x) >= 1.0) {
                        acc += std::fabs(warped.at(0, c, y, x) - s.x_t.at(0, c, y, x));
                        ++count;
                    }
        REQUIRE(count > 0);
        CHECK(acc / count < 1e-6);
    }
}

TEST_CASE("region masks partition both frames exactly") {
    SceneSpec spec;
    spec.motion = Motion::rotate(-10.0 * M_PI / 180.0);
    SynthScene s = gen_scene(19, spec);
    for (const RegionMasks* rm : {&s.masks_s, &s.masks_t}) {
        for (int y = 0; y < spec.h; ++y)
            for (int x = 0; x < spec.w; ++x) {
                double total = 0.0;
                for (int j = 0; j < kNumParts; ++j) {
                    const double v = rm->masks[j].at(0, 0, y, x);
                    CHECK((v == 0.0 || v == 1.0));
                    total += v;
                }
                CHECK(total == 1.0);
            }
    }
}

TEST_CASE("gen_flow translate and rotate basics") {
    Tensor4 f = gen_flow(Motion::translate(2.5, -1.0), 8, 8);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            CHECK(f.at(0, 0, y, x) == 2.5);
            CHECK(f.at(0, 1, y, x) == -1.0);
        }
    Tensor4 r0 = gen_flow(Motion::rotate(0.0), 8, 8);
    CHECK(max_abs(r0) == 0.0);
}

TEST_CASE("gen_flow rotates a delta by 90 degrees on an odd grid") {
    const int n = 11, cy = 5, cx = 5;
    Tensor4 delta(1, 1, n, n);
    delta.at(0, 0, 3, 5) = 1.0; // source offset (-2, 0) from center
    Tensor4 flow = gen_flow(Motion::rotate(M_PI / 2.0), n, n);
    Tensor4 out = bilinear_sample(delta, flow);
    // coordinate-mapping oracle: v = R(theta) * s for s = (-2, 0)
    const double theta = M_PI / 2.0;
    const double sy = 3 - cy, sx = 5 - cx;
    const double vy = sy * std::cos(theta) + sx * std::sin(theta);
    const double vx = sx * std::cos(theta) - sy * std::sin(theta);
    const int ty = cy + static_cast<int>(std::lround(vy));
    const int tx = cx + static_cast<int>(std::lround(vx));
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            if (y == ty && x == tx)
                CHECK(out.at(0, 0, y, x) == doctest::Approx(1.0).epsilon(1e-12));
            else
                CHECK(std::fabs(out.at(0, 0, y, x)) < 1e-12);
        }
}

TEST_CASE("gen_flow rejects singular affines") {
    CHECK_THROWS_AS(gen_flow(Motion::affine(1.0, 2.0, 0.5, 1.0), 8, 8), config_error);
    CHECK_THROWS_AS(Motion::affine(1.0, 2.0, 0.5, 1.0).inverse(), config_error);
}

TEST_CASE("motion inverse composes to identity") {
    Motion m = Motion::affine(1.1, 0.2, -0.1, 0.9, 2.0, -1.0);
    Motion mi = m.inverse();
    // map a few points through forward then inverse
    const int h = 32, w = 32;
    Tensor4 f = gen_flow(m, h, w);
    Tensor4 fi = gen_flow(mi, h, w);
    const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
    for (int y : {4, 15, 27})
        for (int x : {3, 16, 28}) {
            const double sy = y + f.at(0, 0, y, x);
            const double sx = x + f.at(0, 1, y, x);
            // inverse motion evaluated at the (continuous) source point
            const double vy = sy - cy, vx = sx - cx;
            const double by = mi.a00 * vy + mi.a01 * vx + mi.dy + cy;
            const double bx = mi.a10 * vy + mi.a11 * vx + mi.dx + cx;
            CHECK(by == doctest::Approx(y).epsilon(1e-10));
            CHECK(bx == doctest::Approx(x).epsilon(1e-10));
        }
}

TEST_CASE("derive_occlusion marks off-frame reads") {
    Tensor4 zero(1, 2, 8, 8);
    Tensor4 occ0 = derive_occlusion(zero);
    for (std::size_t i = 0; i < occ0.size(); ++i)
        CHECK(occ0[i] == 1.0);

    // coordinate-bounds oracle: dy=5 on H=32 kills the bottom 5 rows
    const int h = 32, w = 32;
    Tensor4 f = gen_flow(Motion::translate(5.0, 0.0), h, w);
    Tensor4 occ = derive_occlusion(f);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double expected = (y + 5 <= h - 1) ? 1.0 : std::max(0.0, 1.0 - (y + 5 - (h - 1)));
            CHECK(occ.at(0, 0, y, x) == doctest::Approx(expected).epsilon(1e-12));
        }
    int zero_rows = 0;
    for (int y = 0; y < h; ++y)
        if (occ.at(0, 0, y, 0) == 0.0)
            ++zero_rows;
    CHECK(zero_rows == 5);

    for (std::size_t i = 0; i < occ.size(); ++i) {
        CHECK(occ[i] >= 0.0);
        CHECK(occ[i] <= 1.0);
    }
}

TEST_CASE("flow_pyramid halves magnitudes per level") {
    const int h = 32, w = 32;
    Tensor4 f = gen_flow(Motion::translate(4.0, 2.0), h, w);
    Tensor4 occ = derive_occlusion(f);
    FlowPyramid pyr = flow_pyramid(f, occ, 3);
    REQUIRE(pyr.scales() == 3);
    const double expect_dy[3] = {4.0, 2.0, 1.0};
    const double expect_dx[3] = {2.0, 1.0, 0.5};
    for (int k = 0; k < 3; ++k) {
        CHECK(pyr.levels[k].flow.h() == h >> k);
        for (int y = 0; y < pyr.levels[k].flow.h(); ++y)
            for (int x = 0; x < pyr.levels[k].flow.w(); ++x) {
                CHECK(pyr.levels[k].flow.at(0, 0, y, x) == expect_dy[k]);
                CHECK(pyr.levels[k].flow.at(0, 1, y, x) == expect_dx[k]);
            }
    }

    FlowPyramid single = flow_pyramid(f, occ, 1);
    CHECK(single.scales() == 1);
    CHECK(max_abs_diff(single.levels[0].flow, f) == 0.0);

    Tensor4 zf(1, 2, h, w);
    FlowPyramid zp = flow_pyramid(zf, derive_occlusion(zf), 3);
    for (const auto& lvl : zp.levels)
        CHECK(max_abs(lvl.flow) == 0.0);

    CHECK_THROWS_AS(flow_pyramid(Tensor4(1, 2, 30, 30), Tensor4(1, 1, 30, 30), 3), dim_error);
}

TEST_CASE("pyramid consistency holds on generated scenes") {
    SceneSpec spec;
    spec.motion = Motion::rotate(8.0 * M_PI / 180.0);
    SynthScene s = gen_scene(77, spec);
    FlowPyramid pyr = flow_pyramid(s.flow_gt, s.occ, kNumScales);
    for (int k = 0; k + 1 < pyr.scales(); ++k) {
        Tensor4 expected = scale(avgpool2x(pyr.levels[k].flow), 0.5);
        CHECK(max_abs_diff(pyr.levels[k + 1].flow, expected) == 0.0);
        for (std::size_t i = 0; i < pyr.levels[k + 1].occ.size(); ++i) {
            CHECK(pyr.levels[k + 1].occ[i] >= 0.0);
            CHECK(pyr.levels[k + 1].occ[i] <= 1.0);
        }
    }
}

TEST_CASE("gen_scene validates its spec") {
    SceneSpec bad;
    bad.h = 30; // not divisible by 4
    CHECK_THROWS_AS(gen_scene(1, bad), config_error);
    SceneSpec spin;
    spin.motion = Motion::rotate(45.0 * M_PI / 180.0);
    CHECK_THROWS_AS(gen_scene(1, spin), config_error);
}

TEST_CASE("mix_seed decorrelates nearby indices") {
    CHECK(mix_seed(0, 0) != mix_seed(0, 1));
    CHECK(mix_seed(0, 1) != mix_seed(1, 0));
    CHECK(mix_seed(5, 7, 1) != mix_seed(5, 7, 2));
    CHECK(mix_seed(5, 7, 1) == mix_seed(5, 7, 1));
}
