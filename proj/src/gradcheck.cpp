#include "warpnorm/gradcheck.hpp"

#include <cmath>
#include <map>

#include "warpnorm/normalize.hpp"

namespace warpnorm {

Tensor4 central_diff(const std::function<double(const Tensor4&)>& f,
                     const Tensor4& x, double eps) {
    Tensor4 grad(x.b(), x.c(), x.h(), x.w());
    Tensor4 probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x[i];
        probe[i] = v + eps;
        const double fp = f(probe);
        probe[i] = v - eps;
        const double fm = f(probe);
        probe[i] = v;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw oracle_error("central_diff: non-finite evaluation at coordinate " +
                               std::to_string(i));
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    return grad;
}

namespace {

constexpr double kNormEps = 1e-5;

Tensor4 randn(std::mt19937_64& rng, int b, int c, int h, int w, double sd = 1.0) {
    std::normal_distribution<double> d(0.0, sd);
    Tensor4 t(b, c, h, w);
    for (std::size_t i = 0; i < t.size(); ++i)
        t[i] = d(rng);
    return t;
}

Tensor4 rand_uniform(std::mt19937_64& rng, int b, int c, int h, int w, double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    Tensor4 t(b, c, h, w);
    for (std::size_t i = 0; i < t.size(); ++i)
        t[i] = d(rng);
    return t;
}

// Sampling offsets, nudged away from exact integers (the interpolation kink)
// by +0.25 so central differences stay valid.
Tensor4 rand_flow(std::mt19937_64& rng, int b, int h, int w) {
    std::uniform_real_distribution<double> d(-2.0, 2.0);
    Tensor4 t(b, 2, h, w);
    for (std::size_t i = 0; i < t.size(); ++i) {
        double v = d(rng);
        if (std::fabs(v - std::round(v)) < 0.1)
            v = std::round(v) + 0.25;
        t[i] = v;
    }
    return t;
}

Tensor4 checker_region(int b, int h, int w) {
    Tensor4 t(b, 1, h, w);
    for (int bi = 0; bi < b; ++bi)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                t.at(bi, 0, y, x) = static_cast<double>((y + x) % 2);
    return t;
}

double dot(const Tensor4& a, const Tensor4& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        s += a[i] * b[i];
    return s;
}

using Inputs = std::vector<Tensor4>;

struct OpSpec {
    std::vector<std::string> input_names;
    std::vector<bool> differentiable;
    int def_h = 5, def_w = 5;
    std::function<Inputs(std::mt19937_64&, int, int)> make_inputs;
    std::function<Inputs(const Inputs&)> forward;
    std::function<Inputs(const Inputs&, const Inputs&)> vjp;
};

ModulationMaps maps_of(const Tensor4& lam, const Tensor4& beta) {
    ModulationMaps m;
    m.lambda_map = lam;
    m.beta_map = beta;
    return m;
}

Inputs sawn_inputs(std::mt19937_64& rng, int h, int w) {
    Inputs in;
    in.push_back(randn(rng, 1, 2, h, w));                 // h
    in.push_back(randn(rng, 1, 2, h, w));                 // lambda
    in.push_back(randn(rng, 1, 2, h, w));                 // beta
    in.push_back(rand_flow(rng, 1, h, w));                // flow
    in.push_back(rand_uniform(rng, 1, 1, h, w, 0.05, 0.95)); // occ
    return in;
}

OpSpec make_sawn_spec(NormVariant variant) {
    OpSpec s;
    s.input_names = {"h", "lambda", "beta", "flow", "occ"};
    s.differentiable = {true, true, true, true, true};
    s.def_h = 6;
    s.def_w = 6;
    s.make_inputs = sawn_inputs;
    s.forward = [variant](const Inputs& in) {
        return Inputs{sawn(in[0], maps_of(in[1], in[2]), in[3], in[4], variant, kNormEps)};
    };
    s.vjp = [variant](const Inputs& in, const Inputs& g) {
        SawnGrads sg = sawn_vjp(in[0], maps_of(in[1], in[2]), in[3], in[4], variant, kNormEps, g[0]);
        return Inputs{sg.h, sg.lambda_map, sg.beta_map, sg.flow, sg.occ};
    };
    return s;
}

const std::vector<std::pair<std::string, OpSpec>>& op_table() {
    static const std::vector<std::pair<std::string, OpSpec>> table = [] {
        std::vector<std::pair<std::string, OpSpec>> t;

        auto two_tensor_inputs = [](std::mt19937_64& rng, int h, int w) {
            return Inputs{randn(rng, 1, 2, h, w), randn(rng, 1, 2, h, w)};
        };

        {
            OpSpec s;
            s.input_names = {"a", "b"};
            s.differentiable = {true, true};
            s.make_inputs = two_tensor_inputs;
            s.forward = [](const Inputs& in) { return Inputs{add(in[0], in[1])}; };
            s.vjp = [](const Inputs& in, const Inputs& g) {
                auto [ga, gb] = add_vjp(in[0], in[1], g[0]);
                return Inputs{ga, gb};
            };
            t.emplace_back("add", s);
        }
        {
            OpSpec s;
            s.input_names = {"a", "b"};
            s.differentiable = {true, true};
            s.make_inputs = two_tensor_inputs;
            s.forward = [](const Inputs& in) { return Inputs{sub(in[0], in[1])}; };
            s.vjp = [](const Inputs& in, const Inputs& g) {
                auto [ga, gb] = sub_vjp(in[0], in[1], g[0]);
                return Inputs{ga, gb};
            };
            t.emplace_back("sub", s);
        }
        {
            OpSpec s;
            s.input_names = {"a", "b"};
            s.differentiable = {true, true};
            s.make_inputs = two_tensor_inputs;
            s.forward = [](const Inputs& in) { return Inputs{mul(in[0], in[1])}; };
            s.vjp = [](const Inputs& in, const Inputs& g) {
                auto [ga, gb] = mul_vjp(in[0], in[1], g[0]);
                return Inputs{ga, gb};
            };
            t.emplace_back("mul", s);
        }
        {
            OpSpec s;
            s.input_names = {"a"};
            s.differentiable = {true};
            s.make_inputs = [](std::mt19937_64& rng, int h, int w) {
                return Inputs{randn(rng, 1, 2, h, w)};
            };
            s.forward = [](const Inputs& in) { return Inputs{scale(in[0], 1.7)}; };
            s.vjp = [](const Inputs&, const Inputs& g) { return Inputs{scale_vjp(1.7, g[0])}; };
            t.emplace_back("scale", s);
        }
        {
            OpSpec s;
            s.input_names = {"a"};
            s.differentiable = {true};
            s.make_inputs = [](std::mt19937_64& rng, int h, int w) {
                return Inputs{randn(rng, 1, 2, h, w)};
            };
            s.forward = [](const Inputs& in) { return Inputs{relu(in[0])}; };
            s.vjp = [](const Inputs& in, const Inputs& g) { return Inputs{relu_vjp(in[0], g[0])}; };
            t.emplace_back("relu", s);
        }
        {
            OpSpec s;
            s.input_names = {"a"};
            s.differentiable = {true};
            s.make_inputs = [](std::mt19937_64& rng, int h, int w) {
                return Inputs{randn(rng, 1, 2, h, w)};
            };
            s.forward = [](const Inputs& in) { return Inputs{squash01(in[0])}; };
            s.vjp = [](const Inputs& in, const Inputs& g) {
                return Inputs{squash01_vjp(in[0], g[0])};
            };
            t.emplace_back("squash01", s);
        }
        {
            OpSpec s;
            s.input_names = {"a", "b", "m"};
            s.differentiable = {true, true, true};
            s.make_inputs = [](std::mt19937_64& rng, int h, int w) {
                return Inputs{randn(rng, 1, 2, h, w), randn(rng, 1, 2, h, w),
                              rand_uniform(rng, 1, 1, h, w, 0.1, 0.9)};
            };
            s.forward = [](const Inputs& in) { return Inputs{lerp(in[0], in[1], in[2])}; };
            s.vjp = [](const Inputs& in, const Inputs& g) {
                auto [ga, gb, gm] = lerp_vjp(in[0], in[1], in[2], g[0]);
                return Inputs{ga, gb, gm};
            };
            t.emplace_back("lerp", s);
        }
        {
            OpSpec s;
            s.input_names = {"x", "w", "bias"};
            s.differentiable = {true, true, true};
            s.make_inputs = [](std::mt19937_64& rng, int h, int w) {
                return Inputs{randn(rng, 1, 2, h, w), randn(rng, 3, 2, 3, 3, 0.5),
                              randn(rng, 1, 3, 1, 1, 0.5)};
            };
            s.forward = [](const Inputs& in) {
                return Inputs{conv2d(in[0], ConvKernel(in[1], in[2]))};
            };
            s.vjp = [](const Inputs& in, const Inputs& g) {
                Conv2dGrads cg = conv2d_vjp(in[0], ConvKernel(in[1], in[2]), g[0]);
                return Inputs{cg.x, cg.w, cg.b};
            };
            t.emplace_back("conv2d", s);
        }
        {
            OpSpec s;
            s.input_names = {"x"};
            s.differentiable = {true};
            s.def_h = 4;
            s.def_w = 4;
            s.make_inputs = [](std::mt19937_64& rng, int h, int w) {
                return Inputs{randn(rng, 1, 2, h, w)};
            };
            s.forward = [](const Inputs& in) { return Inputs{upsample_nearest2x(in[0])}; };
            s.vjp = [](const Inputs&, const Inputs& g) {
                return Inputs{upsample_nearest2x_vjp(g[0])};
            };
            t.emplace_back("upsample2x", s);
        }
        {
            OpSpec s;
            s.input_names = {"x"};
            s.differentiable = {true};
            s.def_h = 6;
            s.def_w = 6;
            s.make_inputs = [](std::mt19937_64& rng, int h, int w) {
                return Inputs{randn(rng, 1, 2, h, w)};
            };
            s.forward = [](const Inputs& in) { return Inputs{avgpool2x(in[0])}; };
            s.vjp = [](const Inputs&, const Inputs& g) { return Inputs{avgpool2x_vjp(g[0])}; };
            t.emplace_back("avgpool2x", s);
        }
        {
            OpSpec s;
            s.input_names = {"src", "flow"};
            s.differentiable = {true, true};
            s.make_inputs = [](std::mt19937_64& rng, int h, int w) {
                return Inputs{randn(rng, 1, 2, h, w), rand_flow(rng, 1, h, w)};
            };
            s.forward = [](const Inputs& in) { return Inputs{bilinear_sample(in[0], in[1])}; };
            s.vjp = [](const Inputs& in, const Inputs& g) {
                BilinearGrads bg = bilinear_sample_vjp(in[0], in[1], g[0]);
                return Inputs{bg.src, bg.flow};
            };
            t.emplace_back("bilinear_sample", s);
        }
        {
            OpSpec s;
            s.input_names = {"h"};
            s.differentiable = {true};
            s.make_inputs = [](std::mt19937_64& rng, int h, int w) {
                return Inputs{randn(rng, 1, 2, h, w)};
            };
            s.forward = [](const Inputs& in) {
                InstanceStats st = instance_stats(in[0], kNormEps);
                return Inputs{st.mu, st.sigma};
            };
            s.vjp = [](const Inputs& in, const Inputs& g) {
                return Inputs{instance_stats_vjp(in[0], g[0], g[1])};
            };
            t.emplace_back("instance_stats", s);
        }
        {
            OpSpec s;
            s.input_names = {"h", "lambda", "beta"};
            s.differentiable = {true, true, true};
            s.make_inputs = [](std::mt19937_64& rng, int h, int w) {
                return Inputs{randn(rng, 1, 2, h, w), randn(rng, 1, 2, 1, 1),
                              randn(rng, 1, 2, 1, 1)};
            };
            s.forward = [](const Inputs& in) {
                return Inputs{adain(in[0], in[1], in[2], kNormEps)};
            };
            s.vjp = [](const Inputs& in, const Inputs& g) {
                auto [gh, gl, gb] = adain_vjp(in[0], in[1], in[2], kNormEps, g[0]);
                return Inputs{gh, gl, gb};
            };
            t.emplace_back("adain", s);
        }
        {
            OpSpec s;
            s.input_names = {"h", "lambda", "beta"};
            s.differentiable = {true, true, true};
            s.make_inputs = [](std::mt19937_64& rng, int h, int w) {
                return Inputs{randn(rng, 1, 2, h, w), randn(rng, 1, 2, h, w),
                              randn(rng, 1, 2, h, w)};
            };
            s.forward = [](const Inputs& in) {
                return Inputs{sain(in[0], maps_of(in[1], in[2]), kNormEps)};
            };
            s.vjp = [](const Inputs& in, const Inputs& g) {
                auto [gh, gl, gb] = sain_vjp(in[0], maps_of(in[1], in[2]), kNormEps, g[0]);
                return Inputs{gh, gl, gb};
            };
            t.emplace_back("sain", s);
        }
        {
            OpSpec s;
            s.input_names = {"lambda", "beta", "flow"};
            s.differentiable = {true, true, true};
            s.make_inputs = [](std::mt19937_64& rng, int h, int w) {
                return Inputs{randn(rng, 1, 2, h, w), randn(rng, 1, 2, h, w),
                              rand_flow(rng, 1, h, w)};
            };
            s.forward = [](const Inputs& in) {
                ModulationMaps m = warp_modulation(maps_of(in[0], in[1]), in[2]);
                return Inputs{m.lambda_map, m.beta_map};
            };
            s.vjp = [](const Inputs& in, const Inputs& g) {
                WarpModGrads wg = warp_modulation_vjp(maps_of(in[0], in[1]), in[2], g[0], g[1]);
                return Inputs{wg.mod.lambda_map, wg.mod.beta_map, wg.flow};
            };
            t.emplace_back("warp_modulation", s);
        }
        t.emplace_back("sawn_san", make_sawn_spec(NormVariant::SAN));
        t.emplace_back("sawn_saws", make_sawn_spec(NormVariant::SAWS));
        t.emplace_back("sawn_sawn", make_sawn_spec(NormVariant::SAWN));
        {
            OpSpec s;
            s.input_names = {"h", "lambda", "beta", "flow", "occ", "region"};
            s.differentiable = {true, true, true, true, true, false};
            s.def_h = 6;
            s.def_w = 6;
            s.make_inputs = [](std::mt19937_64& rng, int h, int w) {
                Inputs in = sawn_inputs(rng, h, w);
                in.push_back(checker_region(1, h, w));
                return in;
            };
            s.forward = [](const Inputs& in) {
                return Inputs{msawn(in[0], maps_of(in[1], in[2]), in[3], in[4], in[5],
                                    NormVariant::SAWN, kNormEps)};
            };
            s.vjp = [](const Inputs& in, const Inputs& g) {
                SawnGrads sg = msawn_vjp(in[0], maps_of(in[1], in[2]), in[3], in[4], in[5],
                                         NormVariant::SAWN, kNormEps, g[0]);
                return Inputs{sg.h, sg.lambda_map, sg.beta_map, sg.flow, sg.occ, Tensor4()};
            };
            t.emplace_back("msawn", s);
        }
        return t;
    }();
    return table;
}

const OpSpec& find_op(const std::string& op_id) {
    for (const auto& [name, spec] : op_table())
        if (name == op_id)
            return spec;
    throw contract_error("unknown op '" + op_id + "'");
}

} // namespace

std::vector<std::string> registered_ops() {
    std::vector<std::string> names;
    for (const auto& [name, spec] : op_table())
        names.push_back(name);
    return names;
}

bool is_registered_op(const std::string& op_id) {
    for (const auto& [name, spec] : op_table())
        if (name == op_id)
            return true;
    return false;
}

std::vector<Tensor4> op_forward(const std::string& op_id, const std::vector<Tensor4>& inputs) {
    return find_op(op_id).forward(inputs);
}

std::vector<Tensor4> op_vjp(const std::string& op_id, const std::vector<Tensor4>& inputs,
                            const std::vector<Tensor4>& grad_out) {
    return find_op(op_id).vjp(inputs, grad_out);
}

std::vector<Tensor4> op_sample_inputs(const std::string& op_id, std::uint64_t seed, int h, int w) {
    const OpSpec& spec = find_op(op_id);
    std::mt19937_64 rng(seed);
    return spec.make_inputs(rng, h > 0 ? h : spec.def_h, w > 0 ? w : spec.def_w);
}

std::vector<std::string> op_input_names(const std::string& op_id) {
    return find_op(op_id).input_names;
}

std::vector<GradReport> check_vjp(const std::string& op_id, const CheckOptions& opt) {
    const OpSpec& spec = find_op(op_id);
    const int h = opt.h > 0 ? opt.h : spec.def_h;
    const int w = opt.w > 0 ? opt.w : spec.def_w;

    std::vector<GradReport> reports;
    for (int s = 0; s < opt.seeds; ++s) {
        std::mt19937_64 rng(static_cast<std::uint64_t>(s) * 0x9E3779B97F4A7C15ULL + 1);
        Inputs inputs = spec.make_inputs(rng, h, w);
        Inputs outs = spec.forward(inputs);
        Inputs probes;
        probes.reserve(outs.size());
        for (const Tensor4& o : outs)
            probes.push_back(randn(rng, o.b(), o.c(), o.h(), o.w()));

        Inputs analytic = spec.vjp(inputs, probes);

        GradReport rep;
        rep.op_id = op_id;
        rep.seed = static_cast<std::uint64_t>(s);
        rep.tol = opt.tol;
        rep.pass = true;
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            if (!spec.differentiable[i])
                continue;
            auto f = [&](const Tensor4& xi) {
                Inputs probe_in = inputs;
                probe_in[i] = xi;
                Inputs o = spec.forward(probe_in);
                double acc = 0.0;
                for (std::size_t k = 0; k < o.size(); ++k)
                    acc += dot(o[k], probes[k]);
                return acc;
            };
            Tensor4 fd = central_diff(f, inputs[i], opt.eps);
            InputGradError err;
            err.input = spec.input_names[i];
            for (std::size_t j = 0; j < fd.size(); ++j) {
                const double a = analytic[i][j];
                const double fdv = fd[j];
                const double abs_err = std::fabs(a - fdv);
                const double rel =
                    abs_err / std::max({std::fabs(a), std::fabs(fdv), 1e-8});
                if (abs_err > err.max_abs)
                    err.max_abs = abs_err;
                if (rel > err.max_rel) {
                    err.max_rel = rel;
                    err.worst_index = j;
                }
            }
            if (err.max_rel >= opt.tol)
                rep.pass = false;
            rep.inputs.push_back(err);
        }
        reports.push_back(std::move(rep));
    }
    return reports;
}

} // namespace warpnorm
