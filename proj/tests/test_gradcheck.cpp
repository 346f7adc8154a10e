#include <doctest.h>

#include <cmath>
#include <random>

#include "warpnorm/gradcheck.hpp"

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

} // namespace

TEST_CASE("central_diff on closed-form derivatives") {
    Tensor4 x = randn_t(1, 1, 2, 3, 3);

    // linear functional: gradient is all ones
    Tensor4 g1 = central_diff([](const Tensor4& t) { return sum(t); }, x);
    for (std::size_t i = 0; i < g1.size(); ++i)
        CHECK(g1[i] == doctest::Approx(1.0).epsilon(1e-9));

    // quadratic: gradient is x itself
    Tensor4 g2 = central_diff(
        [](const Tensor4& t) {
            double s = 0.0;
            for (std::size_t i = 0; i < t.size(); ++i)
                s += t[i] * t[i];
            return 0.5 * s;
        },
        x);
    for (std::size_t i = 0; i < g2.size(); ++i)
        CHECK(g2[i] == doctest::Approx(x[i]).epsilon(1e-9));
}

TEST_CASE("central_diff flags non-finite evaluations") {
    Tensor4 x(1, 1, 1, 2, 1.0);
    CHECK_THROWS_AS(
        central_diff([](const Tensor4& t) { return 1.0 / (t[0] - t[0]); }, x),
        oracle_error);
}

TEST_CASE("check_vjp on a linear op is exact to rounding") {
    CheckOptions opt;
    opt.seeds = 5;
    for (const auto& rep : check_vjp("add", opt)) {
        CHECK(rep.pass);
        for (const auto& in : rep.inputs) {
            CHECK(in.max_abs < 1e-9); // rounding noise of the oracle only
            CHECK(in.max_rel < 1e-7);
        }
    }
}

TEST_CASE("check_vjp covers every gradient slot of msawn") {
    CheckOptions opt;
    opt.seeds = 2;
    auto reports = check_vjp("msawn", opt);
    REQUIRE(!reports.empty());
    for (const auto& rep : reports) {
        CHECK(rep.pass);
        REQUIRE(rep.inputs.size() == 5); // h, lambda, beta, flow, occ
        CHECK(rep.inputs[0].input == "h");
        CHECK(rep.inputs[3].input == "flow");
        CHECK(rep.inputs[4].input == "occ");
    }
}

TEST_CASE("unknown op ids raise a contract error") {
    CHECK_THROWS_AS(check_vjp("nosuch"), contract_error);
    CHECK_THROWS_AS(op_forward("nosuch", {}), contract_error);
    CHECK(!is_registered_op("nosuch"));
    CHECK(is_registered_op("bilinear_sample"));
}

TEST_CASE("registry dispatch is consistent with direct calls") {
    auto inputs = op_sample_inputs("mul", 3);
    auto outs = op_forward("mul", inputs);
    REQUIRE(outs.size() == 1);
    CHECK(max_abs_diff(outs[0], mul(inputs[0], inputs[1])) == 0.0);

    Tensor4 g = randn_t(4, outs[0].b(), outs[0].c(), outs[0].h(), outs[0].w());
    auto grads = op_vjp("mul", inputs, {g});
    REQUIRE(grads.size() == 2);
    CHECK(max_abs_diff(grads[0], mul(g, inputs[1])) == 0.0);
}

TEST_CASE("every registered op passes a quick sweep") {
    CheckOptions opt;
    opt.seeds = 2;
    for (const std::string& op : registered_ops()) {
        for (const auto& rep : check_vjp(op, opt)) {
            CAPTURE(op);
            CAPTURE(rep.seed);
            CHECK(rep.pass);
        }
    }
}
