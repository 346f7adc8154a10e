#include "warpnorm/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

namespace warpnorm {

namespace {

Tensor4 randn_tensor(std::mt19937_64& rng, int b, int c, int h, int w, double sd) {
    std::normal_distribution<double> d(0.0, sd);
    Tensor4 t(b, c, h, w);
    for (std::size_t i = 0; i < t.size(); ++i)
        t[i] = d(rng);
    return t;
}

ConvKernel init_conv(std::mt19937_64& rng, int c_out, int c_in, bool use_bias) {
    const double sd = std::sqrt(2.0 / (c_in * 9.0));
    Tensor4 bias(1, c_out, 1, 1);
    if (use_bias)
        bias = randn_tensor(rng, 1, c_out, 1, 1, 0.05);
    return ConvKernel(randn_tensor(rng, c_out, c_in, 3, 3, sd), std::move(bias), use_bias);
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// ---- feature projector ----

struct ProjCache {
    Tensor4 z0, f0, p0, z1, f1;
};

void proj_forward(const Tensor4& x, const FeatureProjector& proj, ProjCache& c) {
    c.z0 = conv2d(x, proj.conv0);
    c.f0 = relu(c.z0);
    c.p0 = avgpool2x(c.f0);
    c.z1 = conv2d(c.p0, proj.conv1);
    c.f1 = relu(c.z1);
}

Tensor4 proj_backward(const Tensor4& x, const FeatureProjector& proj, const ProjCache& c,
                      const Tensor4& g_f0, const Tensor4& g_f1) {
    Tensor4 g_z1 = relu_vjp(c.z1, g_f1);
    Conv2dGrads cg1 = conv2d_vjp(c.p0, proj.conv1, g_z1);
    Tensor4 g_f0_total = add(g_f0, avgpool2x_vjp(cg1.x));
    Tensor4 g_z0 = relu_vjp(c.z0, g_f0_total);
    Conv2dGrads cg0 = conv2d_vjp(x, proj.conv0, g_z0);
    return cg0.x;
}

// per-sample channel Gram matrix, normalized by C*H*W
std::vector<double> gram_of(const Tensor4& f, int b) {
    const int C = f.c(), N = f.plane();
    const double norm = 1.0 / (static_cast<double>(C) * N);
    std::vector<double> g(static_cast<std::size_t>(C) * C, 0.0);
    for (int c1 = 0; c1 < C; ++c1)
        for (int c2 = c1; c2 < C; ++c2) {
            const double* a = f.chan(b, c1);
            const double* bb = f.chan(b, c2);
            double acc = 0.0;
            for (int i = 0; i < N; ++i)
                acc += a[i] * bb[i];
            g[static_cast<std::size_t>(c1) * C + c2] = acc * norm;
            g[static_cast<std::size_t>(c2) * C + c1] = acc * norm;
        }
    return g;
}

double gram_level_loss(const Tensor4& fa, const Tensor4& fb) {
    const int B = fa.b(), C = fa.c();
    double loss = 0.0;
    for (int b = 0; b < B; ++b) {
        const auto ga = gram_of(fa, b);
        const auto gb = gram_of(fb, b);
        for (std::size_t i = 0; i < ga.size(); ++i) {
            const double d = ga[i] - gb[i];
            loss += d * d;
        }
    }
    return loss / B;
}

// d(level loss)/d(fa) = 4/(B*C*H*W) * (Ga - Gb) * Fa per sample
Tensor4 gram_level_grad(const Tensor4& fa, const Tensor4& fb) {
    const int B = fa.b(), C = fa.c(), N = fa.plane();
    Tensor4 out(B, C, fa.h(), fa.w());
    const double coef = 4.0 / (static_cast<double>(C) * N * B);
    for (int b = 0; b < B; ++b) {
        auto ga = gram_of(fa, b);
        const auto gb = gram_of(fb, b);
        for (std::size_t i = 0; i < ga.size(); ++i)
            ga[i] -= gb[i];
        for (int c1 = 0; c1 < C; ++c1) {
            double* o = out.chan(b, c1);
            for (int c2 = 0; c2 < C; ++c2) {
                const double w = ga[static_cast<std::size_t>(c1) * C + c2] * coef;
                const double* f = fa.chan(b, c2);
                for (int i = 0; i < N; ++i)
                    o[i] += w * f[i];
            }
        }
    }
    return out;
}

// ---- critic ----

struct CriticCache {
    Tensor4 z0, f0, p0, z1, f1, p1, score;
};

void critic_fwd(const Tensor4& x, const CriticParams& critic, CriticCache& c) {
    c.z0 = conv2d(x, critic.conv0);
    c.f0 = relu(c.z0);
    c.p0 = avgpool2x(c.f0);
    c.z1 = conv2d(c.p0, critic.conv1);
    c.f1 = relu(c.z1);
    c.p1 = avgpool2x(c.f1);
    c.score = conv2d(c.p1, critic.head);
}

// gradient w.r.t. the critic INPUT given d/d(score)
Tensor4 critic_input_grad(const Tensor4& x, const CriticParams& critic, const CriticCache& c,
                          const Tensor4& g_score) {
    Conv2dGrads cg_head = conv2d_vjp(c.p1, critic.head, g_score);
    Tensor4 g_f1 = avgpool2x_vjp(cg_head.x);
    Tensor4 g_z1 = relu_vjp(c.z1, g_f1);
    Conv2dGrads cg1 = conv2d_vjp(c.p0, critic.conv1, g_z1);
    Tensor4 g_f0 = avgpool2x_vjp(cg1.x);
    Tensor4 g_z0 = relu_vjp(c.z0, g_f0);
    Conv2dGrads cg0 = conv2d_vjp(x, critic.conv0, g_z0);
    return cg0.x;
}

void critic_param_grads(const Tensor4& x, const CriticParams& critic, const CriticCache& c,
                        const Tensor4& g_score, ParamGrads& grads) {
    Conv2dGrads cg_head = conv2d_vjp(c.p1, critic.head, g_score);
    grads.accumulate("critic.head.w", cg_head.w);
    grads.accumulate("critic.head.b", cg_head.b);
    Tensor4 g_f1 = avgpool2x_vjp(cg_head.x);
    Tensor4 g_z1 = relu_vjp(c.z1, g_f1);
    Conv2dGrads cg1 = conv2d_vjp(c.p0, critic.conv1, g_z1);
    grads.accumulate("critic.conv1.w", cg1.w);
    grads.accumulate("critic.conv1.b", cg1.b);
    Tensor4 g_f0 = avgpool2x_vjp(cg1.x);
    Tensor4 g_z0 = relu_vjp(c.z0, g_f0);
    Conv2dGrads cg0 = conv2d_vjp(x, critic.conv0, g_z0);
    grads.accumulate("critic.conv0.w", cg0.w);
    grads.accumulate("critic.conv0.b", cg0.b);
}

double mean_sq_minus(const Tensor4& t, double target) {
    double acc = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
        const double d = t[i] - target;
        acc += d * d;
    }
    return acc / static_cast<double>(t.size());
}

// ---- scene sampling ----

Motion sample_motion(std::mt19937_64& rng, const TrainConfig& cfg, MotionFamily family) {
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    auto shift = [&]() {
        std::uniform_real_distribution<double> d(-cfg.max_shift, cfg.max_shift);
        return d(rng);
    };
    auto angle = [&]() {
        std::uniform_real_distribution<double> d(-cfg.max_rot_deg, cfg.max_rot_deg);
        return d(rng) * M_PI / 180.0;
    };
    switch (family) {
    case MotionFamily::Identity:
        return Motion::identity();
    case MotionFamily::Translate:
        return Motion::translate(shift(), shift());
    case MotionFamily::Rotate:
        return Motion::rotate(angle());
    case MotionFamily::Affine: {
        std::uniform_real_distribution<double> e(-0.15, 0.15);
        for (int tries = 0; tries < 16; ++tries) {
            const double a00 = 1.0 + e(rng), a01 = e(rng), a10 = e(rng), a11 = 1.0 + e(rng);
            if (std::fabs(a00 * a11 - a01 * a10) > 0.2)
                return Motion::affine(a00, a01, a10, a11, shift() * 0.5, shift() * 0.5);
        }
        return Motion::identity();
    }
    case MotionFamily::Mixed: {
        const double u = uni(rng);
        if (u < 0.5)
            return sample_motion(rng, cfg, MotionFamily::Translate);
        if (u < 0.8)
            return sample_motion(rng, cfg, MotionFamily::Rotate);
        return sample_motion(rng, cfg, MotionFamily::Affine);
    }
    }
    return Motion::identity();
}

SynthScene sample_scene(const TrainConfig& cfg, std::uint64_t salt, std::uint64_t index) {
    std::mt19937_64 rng(mix_seed(cfg.seed, salt ^ 0x6d6f74696fULL, index));
    SceneSpec spec;
    spec.h = cfg.h;
    spec.w = cfg.w;
    spec.motion = sample_motion(rng, cfg, cfg.motion);
    return gen_scene(mix_seed(cfg.seed, salt, index), spec);
}

SynthScene fit_scene(const TrainConfig& cfg, const Motion& motion) {
    SceneSpec spec;
    spec.h = cfg.h;
    spec.w = cfg.w;
    spec.motion = motion;
    return gen_scene(cfg.fit_scene_seed, spec);
}

constexpr std::uint64_t kSaltTrain = 0x747261696eULL;
constexpr std::uint64_t kSaltHeldout = 0x68656c64ULL;
constexpr std::uint64_t kSaltStpr = 0x73747072ULL;

std::vector<SynthScene> heldout_scenes(const TrainConfig& cfg, std::uint64_t salt) {
    std::vector<SynthScene> scenes;
    scenes.reserve(cfg.heldout);
    for (int i = 0; i < cfg.heldout; ++i)
        scenes.push_back(sample_scene(cfg, salt, 0x100000ULL + i));
    return scenes;
}

// shared generator loss evaluation + cotangent assembly
struct LossEval {
    LossTerms terms;
    Tensor4 g_out;
};

LossEval eval_losses(const ForwardFull& fwd, const FeatureProjector& proj,
                     const TrainConfig& cfg, CriticParams* critic) {
    LossEval ev;
    ev.terms.recon = l1_loss(fwd.out, fwd.target);
    ProjCache ca, cb;
    proj_forward(fwd.out, proj, ca);
    proj_forward(fwd.target, proj, cb);
    ev.terms.style = gram_level_loss(ca.f0, cb.f0) + gram_level_loss(ca.f1, cb.f1);
    const double n0 = static_cast<double>(ca.f0.size());
    const double n1 = static_cast<double>(ca.f1.size());
    double cl = 0.0;
    for (std::size_t i = 0; i < ca.f0.size(); ++i) {
        const double d = ca.f0[i] - cb.f0[i];
        cl += d * d / n0;
    }
    for (std::size_t i = 0; i < ca.f1.size(); ++i) {
        const double d = ca.f1[i] - cb.f1[i];
        cl += d * d / n1;
    }
    ev.terms.content = cl;

    Tensor4 g = scale(l1_loss_grad(fwd.out, fwd.target), cfg.weights.recon);
    // style + content cotangents through the projector
    Tensor4 g_f0 = scale(gram_level_grad(ca.f0, cb.f0), cfg.weights.style);
    Tensor4 g_f1 = scale(gram_level_grad(ca.f1, cb.f1), cfg.weights.style);
    for (std::size_t i = 0; i < g_f0.size(); ++i)
        g_f0[i] += cfg.weights.content * 2.0 * (ca.f0[i] - cb.f0[i]) / n0;
    for (std::size_t i = 0; i < g_f1.size(); ++i)
        g_f1[i] += cfg.weights.content * 2.0 * (ca.f1[i] - cb.f1[i]) / n1;
    g = add(g, proj_backward(fwd.out, proj, ca, g_f0, g_f1));

    if (cfg.adversarial && critic) {
        CriticCache cc;
        critic_fwd(fwd.out, *critic, cc);
        ev.terms.adv = mean_sq_minus(cc.score, 1.0);
        Tensor4 g_score(cc.score.b(), cc.score.c(), cc.score.h(), cc.score.w());
        const double n = static_cast<double>(cc.score.size());
        for (std::size_t i = 0; i < g_score.size(); ++i)
            g_score[i] = cfg.weights.adv * 2.0 * (cc.score[i] - 1.0) / n;
        g = add(g, critic_input_grad(fwd.out, *critic, cc, g_score));
    }
    ev.g_out = std::move(g);
    return ev;
}

void abort_on_divergence(const TrainConfig& cfg, double total, int step) {
    if (!std::isfinite(total) || total > cfg.divergence_limit)
        throw train_error("training diverged at step " + std::to_string(step) +
                          ": total loss " + std::to_string(total));
}

} // namespace

// ---- public pieces ----

FeatureProjector FeatureProjector::make(std::uint64_t seed) {
    std::mt19937_64 rng(mix_seed(seed, 0x70726f6aULL));
    FeatureProjector p;
    p.conv0 = init_conv(rng, 8, 3, /*use_bias=*/false);
    p.conv1 = init_conv(rng, 16, 8, /*use_bias=*/false);
    return p;
}

CriticParams CriticParams::init(std::uint64_t seed) {
    std::mt19937_64 rng(mix_seed(seed, 0x63726974ULL));
    CriticParams c;
    c.conv0 = init_conv(rng, 16, 3, true);
    c.conv1 = init_conv(rng, 32, 16, true);
    c.head = init_conv(rng, 1, 32, true);
    return c;
}

void CriticParams::for_each_tensor(const std::function<void(const std::string&, Tensor4&)>& fn) {
    fn("critic.conv0.w", conv0.w);
    fn("critic.conv0.b", conv0.b);
    fn("critic.conv1.w", conv1.w);
    fn("critic.conv1.b", conv1.b);
    fn("critic.head.w", head.w);
    fn("critic.head.b", head.b);
}

double l1_loss(const Tensor4& a, const Tensor4& b) {
    if (!a.same_shape(b))
        throw dim_error("l1_loss: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        acc += std::fabs(a[i] - b[i]);
    return acc / static_cast<double>(a.size());
}

Tensor4 l1_loss_grad(const Tensor4& a, const Tensor4& b) {
    if (!a.same_shape(b))
        throw dim_error("l1_loss_grad: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    Tensor4 g(a.b(), a.c(), a.h(), a.w());
    const double n = static_cast<double>(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        g[i] = d > 0.0 ? 1.0 / n : (d < 0.0 ? -1.0 / n : 0.0);
    }
    return g;
}

double masked_l1(const Tensor4& a, const Tensor4& b, const Tensor4& mask) {
    if (!a.same_shape(b))
        throw dim_error("masked_l1: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    if (mask.b() != a.b() || mask.c() != 1 || mask.h() != a.h() || mask.w() != a.w())
        throw dim_error("masked_l1: mask must be (B,1,H,W), got " + mask.shape_str());
    double acc = 0.0, support = 0.0;
    for (int bi = 0; bi < a.b(); ++bi) {
        const double* m = mask.chan(bi, 0);
        for (int c = 0; c < a.c(); ++c) {
            const double* pa = a.chan(bi, c);
            const double* pb = b.chan(bi, c);
            for (int i = 0; i < a.plane(); ++i)
                acc += m[i] * std::fabs(pa[i] - pb[i]);
        }
        for (int i = 0; i < a.plane(); ++i)
            support += m[i];
    }
    support *= a.c();
    if (support <= 0.0)
        throw contract_error("masked_l1: empty mask support");
    return acc / support;
}

double gram_style_loss(const Tensor4& a, const Tensor4& b, const FeatureProjector& proj) {
    ProjCache ca, cb;
    proj_forward(a, proj, ca);
    proj_forward(b, proj, cb);
    return gram_level_loss(ca.f0, cb.f0) + gram_level_loss(ca.f1, cb.f1);
}

Tensor4 gram_style_loss_grad(const Tensor4& a, const Tensor4& b, const FeatureProjector& proj) {
    ProjCache ca, cb;
    proj_forward(a, proj, ca);
    proj_forward(b, proj, cb);
    return proj_backward(a, proj, ca, gram_level_grad(ca.f0, cb.f0),
                         gram_level_grad(ca.f1, cb.f1));
}

double content_loss(const Tensor4& a, const Tensor4& b, const FeatureProjector& proj) {
    ProjCache ca, cb;
    proj_forward(a, proj, ca);
    proj_forward(b, proj, cb);
    double acc = 0.0;
    for (std::size_t i = 0; i < ca.f0.size(); ++i) {
        const double d = ca.f0[i] - cb.f0[i];
        acc += d * d / static_cast<double>(ca.f0.size());
    }
    for (std::size_t i = 0; i < ca.f1.size(); ++i) {
        const double d = ca.f1[i] - cb.f1[i];
        acc += d * d / static_cast<double>(ca.f1.size());
    }
    return acc;
}

Tensor4 content_loss_grad(const Tensor4& a, const Tensor4& b, const FeatureProjector& proj) {
    ProjCache ca, cb;
    proj_forward(a, proj, ca);
    proj_forward(b, proj, cb);
    Tensor4 g_f0(ca.f0.b(), ca.f0.c(), ca.f0.h(), ca.f0.w());
    Tensor4 g_f1(ca.f1.b(), ca.f1.c(), ca.f1.h(), ca.f1.w());
    for (std::size_t i = 0; i < g_f0.size(); ++i)
        g_f0[i] = 2.0 * (ca.f0[i] - cb.f0[i]) / static_cast<double>(ca.f0.size());
    for (std::size_t i = 0; i < g_f1.size(); ++i)
        g_f1[i] = 2.0 * (ca.f1[i] - cb.f1[i]) / static_cast<double>(ca.f1.size());
    return proj_backward(a, proj, ca, g_f0, g_f1);
}

Tensor4 critic_forward(const Tensor4& x, const CriticParams& critic) {
    CriticCache c;
    critic_fwd(x, critic, c);
    return c.score;
}

double adv_loss(const CriticParams& critic, const Tensor4& real, const Tensor4& fake,
                AdvSide side) {
    if (side == AdvSide::Generator) {
        CriticCache c;
        critic_fwd(fake, critic, c);
        return mean_sq_minus(c.score, 1.0);
    }
    CriticCache cr, cf;
    critic_fwd(real, critic, cr);
    critic_fwd(fake, critic, cf);
    return mean_sq_minus(cr.score, 1.0) + mean_sq_minus(cf.score, 0.0);
}

Tensor4 adv_loss_grad_fake(const CriticParams& critic, const Tensor4& fake) {
    CriticCache c;
    critic_fwd(fake, critic, c);
    Tensor4 g_score(c.score.b(), c.score.c(), c.score.h(), c.score.w());
    const double n = static_cast<double>(c.score.size());
    for (std::size_t i = 0; i < g_score.size(); ++i)
        g_score[i] = 2.0 * (c.score[i] - 1.0) / n;
    return critic_input_grad(fake, critic, c, g_score);
}

void adv_loss_critic_grads(const CriticParams& critic, const Tensor4& real, const Tensor4& fake,
                           ParamGrads& grads) {
    CriticCache cr, cf;
    critic_fwd(real, critic, cr);
    critic_fwd(fake, critic, cf);
    const double nr = static_cast<double>(cr.score.size());
    Tensor4 g_r(cr.score.b(), cr.score.c(), cr.score.h(), cr.score.w());
    for (std::size_t i = 0; i < g_r.size(); ++i)
        g_r[i] = 2.0 * (cr.score[i] - 1.0) / nr;
    critic_param_grads(real, critic, cr, g_r, grads);
    const double nf = static_cast<double>(cf.score.size());
    Tensor4 g_f(cf.score.b(), cf.score.c(), cf.score.h(), cf.score.w());
    for (std::size_t i = 0; i < g_f.size(); ++i)
        g_f[i] = 2.0 * cf.score[i] / nf;
    critic_param_grads(fake, critic, cf, g_f, grads);
}

double total_loss(const LossTerms& terms, const LossWeights& w) {
    const std::pair<const char*, double> named[] = {
        {"adv", terms.adv}, {"recon", terms.recon}, {"style", terms.style},
        {"content", terms.content}};
    for (const auto& [name, value] : named)
        if (!std::isfinite(value))
            throw train_error(std::string("total_loss: term '") + name + "' is non-finite");
    return w.adv * terms.adv + w.recon * terms.recon + w.style * terms.style +
           w.content * terms.content;
}

void adam_step(
    const std::function<void(const std::function<void(const std::string&, Tensor4&)>&)>& params,
    ParamGrads& grads, OptimState& state) {
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    params([&](const std::string& name, Tensor4& p) {
        Tensor4* g = grads.find(name);
        if (!g)
            return;
        if (!g->all_finite())
            throw train_error("adam_step: non-finite gradient for '" + name + "'");
        if (!g->same_shape(p))
            throw dim_error("adam_step: gradient " + g->shape_str() + " vs parameter " +
                            p.shape_str() + " for '" + name + "'");
        auto mit = state.m.find(name);
        if (mit == state.m.end()) {
            state.m.emplace(name, Tensor4(p.b(), p.c(), p.h(), p.w()));
            state.v.emplace(name, Tensor4(p.b(), p.c(), p.h(), p.w()));
            mit = state.m.find(name);
        }
        Tensor4& m = mit->second;
        Tensor4& v = state.v.find(name)->second;
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = (*g)[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    });
}

MotionFamily motion_family_from_name(const std::string& name) {
    if (name == "identity") return MotionFamily::Identity;
    if (name == "translate") return MotionFamily::Translate;
    if (name == "rotate") return MotionFamily::Rotate;
    if (name == "affine") return MotionFamily::Affine;
    if (name == "mixed") return MotionFamily::Mixed;
    throw config_error("unknown motion family '" + name +
                       "' (identity, translate, rotate, affine, mixed)");
}

const char* motion_family_name(MotionFamily f) {
    switch (f) {
    case MotionFamily::Identity: return "identity";
    case MotionFamily::Translate: return "translate";
    case MotionFamily::Rotate: return "rotate";
    case MotionFamily::Affine: return "affine";
    case MotionFamily::Mixed: return "mixed";
    }
    return "?";
}

// ---- training procedures ----

namespace {

ModelConfig model_config(const TrainConfig& cfg) {
    ModelConfig mc;
    mc.h = cfg.h;
    mc.w = cfg.w;
    return mc;
}

double eval_free_scene(const FreeStyleParams& fp, const ModelParams& dec,
                       const TrainConfig& cfg, const Motion& motion) {
    SceneBatch batch = SceneBatch::from_scenes({fit_scene(cfg, motion)});
    ForwardFull fwd = forward_free(batch, fp, dec, cfg.variant);
    return l1_loss(fwd.out, fwd.target);
}

} // namespace

double eval_heldout(const ModelParams& params, const TrainConfig& cfg) {
    SceneBatch batch = SceneBatch::from_scenes(heldout_scenes(cfg, kSaltHeldout));
    ForwardFull fwd = forward_full(batch, params, cfg.variant, ForwardMode::PoseTransfer);
    return l1_loss(fwd.out, fwd.target);
}

double eval_free_under(const TrainResult& r, const TrainConfig& cfg,
                       const std::optional<Motion>& motion_override) {
    return eval_free_scene(r.free_params, r.params, cfg,
                           motion_override.value_or(cfg.fit_motion));
}

TrainResult train_pose_transfer(const TrainConfig& cfg) {
    if (cfg.steps < 0 || cfg.batch < 1)
        throw config_error("train_pose_transfer: invalid steps/batch");
    TrainResult res;
    res.mode = cfg.mode;
    res.params = ModelParams::init(mix_seed(cfg.seed, 0x696e6974ULL), model_config(cfg));
    res.free_params = FreeStyleParams::init(mix_seed(cfg.seed, 0x66726565ULL), model_config(cfg));
    FeatureProjector proj = FeatureProjector::make();
    CriticParams critic = CriticParams::init(mix_seed(cfg.seed, 0x61647621ULL));
    OptimState opt;
    opt.lr = cfg.lr;
    OptimState opt_critic;
    opt_critic.lr = cfg.lr;

    const bool free_mode = cfg.mode == StyleMode::Free;
    res.heldout_l1_initial = free_mode
                                 ? eval_free_scene(res.free_params, res.params, cfg, cfg.fit_motion)
                                 : eval_heldout(res.params, cfg);

    auto visit_all = [&](const std::function<void(const std::string&, Tensor4&)>& fn) {
        res.params.for_each_tensor(fn);
        if (free_mode)
            res.free_params.for_each_tensor(fn);
        if (cfg.adversarial)
            critic.for_each_tensor(fn);
    };

    for (int step = 0; step < cfg.steps; ++step) {
        SceneBatch batch = [&] {
            if (free_mode)
                return SceneBatch::from_scenes({fit_scene(cfg, cfg.fit_motion)});
            std::vector<SynthScene> scenes;
            scenes.reserve(cfg.batch);
            for (int i = 0; i < cfg.batch; ++i)
                scenes.push_back(sample_scene(cfg, kSaltTrain,
                                              static_cast<std::uint64_t>(step) * cfg.batch + i));
            return SceneBatch::from_scenes(scenes);
        }();

        ForwardFull fwd = free_mode
                              ? forward_free(batch, res.free_params, res.params, cfg.variant)
                              : forward_full(batch, res.params, cfg.variant,
                                             ForwardMode::PoseTransfer);
        LossEval ev = eval_losses(fwd, proj, cfg, cfg.adversarial ? &critic : nullptr);
        const double total = total_loss(ev.terms, cfg.weights);
        abort_on_divergence(cfg, total, step);
        res.trace.push_back({step, ev.terms.adv, ev.terms.recon, ev.terms.style,
                             ev.terms.content, total});

        ParamGrads grads;
        if (free_mode)
            backward_free(fwd, res.free_params, res.params, ev.g_out, grads);
        else
            backward_full(fwd, batch, res.params, ev.g_out, grads);
        adam_step(visit_all, grads, opt);

        if (cfg.adversarial) {
            ParamGrads cgrads;
            adv_loss_critic_grads(critic, fwd.target, fwd.out, cgrads);
            adam_step([&](const std::function<void(const std::string&, Tensor4&)>& fn) {
                critic.for_each_tensor(fn);
            }, cgrads, opt_critic);
        }
    }

    res.heldout_l1_final = free_mode
                               ? eval_free_scene(res.free_params, res.params, cfg, cfg.fit_motion)
                               : eval_heldout(res.params, cfg);
    return res;
}

StprMetrics eval_stpr(const ModelParams& params, const TrainConfig& cfg, int part) {
    SceneBatch batch = SceneBatch::from_scenes(heldout_scenes(cfg, kSaltStpr));
    ForwardFull fwd = forward_full(batch, params, cfg.variant, ForwardMode::Stpr, part);
    Tensor4 ref_warped = bilinear_sample(batch.x_t, batch.flow_inv);
    Tensor4 non_target(batch.masks_s[part].b(), 1, batch.masks_s[part].h(),
                       batch.masks_s[part].w());
    for (std::size_t i = 0; i < non_target.size(); ++i)
        non_target[i] = 1.0 - batch.masks_s[part][i];
    StprMetrics m;
    m.target_l1 = masked_l1(fwd.out, ref_warped, batch.masks_s[part]);
    m.nontarget_l1 = masked_l1(fwd.out, batch.x_s, non_target);
    return m;
}

StprResult finetune_stpr(const ModelParams& pretrained, const TrainConfig& cfg, int steps) {
    StprResult res;
    res.params = pretrained;
    FeatureProjector proj = FeatureProjector::make();
    OptimState opt;
    opt.lr = cfg.lr;
    const int eval_part = part_index_by_label("top");
    res.before = eval_stpr(res.params, cfg, eval_part);

    std::mt19937_64 part_rng(mix_seed(cfg.seed, 0x70617274ULL));
    auto visit = [&](const std::function<void(const std::string&, Tensor4&)>& fn) {
        res.params.for_each_tensor(fn);
    };

    for (int step = 0; step < steps; ++step) {
        std::vector<SynthScene> scenes;
        scenes.reserve(cfg.batch);
        for (int i = 0; i < cfg.batch; ++i)
            scenes.push_back(sample_scene(cfg, kSaltStpr ^ 0xF00DULL,
                                          static_cast<std::uint64_t>(step) * cfg.batch + i));
        SceneBatch batch = SceneBatch::from_scenes(scenes);
        const int part = 1 + static_cast<int>(part_rng() % 3); // top, pants or hair

        ForwardFull fwd = forward_full(batch, res.params, cfg.variant, ForwardMode::Stpr, part);
        LossEval ev = eval_losses(fwd, proj, cfg, nullptr);
        const double total = total_loss(ev.terms, cfg.weights);
        abort_on_divergence(cfg, total, step);
        res.trace.push_back({step, 0.0, ev.terms.recon, ev.terms.style, ev.terms.content, total});

        ParamGrads grads;
        backward_full(fwd, batch, res.params, ev.g_out, grads);
        if (cfg.freeze_encoders) {
            ParamGrads kept;
            for (auto& [name, g] : grads.items)
                if (name.rfind("dec.", 0) == 0 || name.rfind("out.", 0) == 0)
                    kept.items.emplace_back(name, std::move(g));
            grads = std::move(kept);
        }
        adam_step(visit, grads, opt);
    }
    res.after = eval_stpr(res.params, cfg, eval_part);
    return res;
}

AblateResult ablate(const TrainConfig& cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    AblateResult R;
    const NormVariant variants[] = {NormVariant::SAN, NormVariant::SAWS, NormVariant::SAWN};
    for (NormVariant v : variants) {
        TrainConfig c = cfg;
        c.variant = v;
        c.mode = StyleMode::Encoder;
        TrainResult r = train_pose_transfer(c);
        AblateRow row;
        row.mode = "encoder";
        row.variant = variant_name(v);
        row.initial_l1 = r.heldout_l1_initial;
        row.final_train_l1 = r.trace.empty() ? r.heldout_l1_initial : r.trace.back().recon;
        row.eval_l1 = r.heldout_l1_final;
        row.eval_kind = "heldout";
        R.rows.push_back(row);
        R.trained.emplace_back(variant_name(v), std::move(r.params));
    }
    for (NormVariant v : variants) {
        TrainConfig c = cfg;
        c.variant = v;
        c.mode = StyleMode::Free;
        TrainResult r = train_pose_transfer(c);
        AblateRow row;
        row.mode = "free";
        row.variant = variant_name(v);
        row.initial_l1 = r.heldout_l1_initial;
        row.final_train_l1 = r.heldout_l1_final; // fit error under F1
        row.eval_l1 = eval_free_under(r, c, c.eval_motion);
        row.eval_kind = "unseen_flow";
        R.rows.push_back(row);
    }
    R.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return R;
}

std::string ablate_csv(const AblateResult& r) {
    std::ostringstream os;
    os << "mode,variant,initial_l1,final_train_l1,eval_l1,eval_kind\n";
    for (const AblateRow& row : r.rows)
        os << row.mode << "," << row.variant << "," << fmt_double(row.initial_l1) << ","
           << fmt_double(row.final_train_l1) << "," << fmt_double(row.eval_l1) << ","
           << row.eval_kind << "\n";
    return os.str();
}

std::string trace_csv(const std::vector<StepMetrics>& trace) {
    std::ostringstream os;
    os << "step,adv,recon,style,content,total\n";
    for (const StepMetrics& m : trace)
        os << m.step << "," << fmt_double(m.adv) << "," << fmt_double(m.recon) << ","
           << fmt_double(m.style) << "," << fmt_double(m.content) << "," << fmt_double(m.total)
           << "\n";
    return os.str();
}

} // namespace warpnorm
