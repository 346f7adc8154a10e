#include "warpnorm/normalize.hpp"

#include <cmath>

namespace warpnorm {

namespace {

void require_maps(const Tensor4& h, const ModulationMaps& mod, const char* op) {
    if (!mod.lambda_map.same_shape(h) || !mod.beta_map.same_shape(h))
        throw dim_error(std::string(op) + ": modulation maps " + mod.lambda_map.shape_str() +
                        "/" + mod.beta_map.shape_str() + " must match activations " +
                        h.shape_str());
}

void require_occ(const Tensor4& h, const Tensor4& occ, const char* op) {
    if (occ.b() != h.b() || occ.c() != 1 || occ.h() != h.h() || occ.w() != h.w())
        throw dim_error(std::string(op) + ": occlusion mask must be (B,1,H,W), got " +
                        occ.shape_str() + " for activations " + h.shape_str());
    if (checked_mode()) {
        for (std::size_t i = 0; i < occ.size(); ++i)
            if (occ[i] < 0.0 || occ[i] > 1.0)
                throw contract_error(std::string(op) + ": occlusion value " +
                                     std::to_string(occ[i]) + " outside [0,1]");
    }
}

void require_region(const Tensor4& h, const Tensor4& region, const char* op) {
    if (region.b() != h.b() || region.c() != 1 || region.h() != h.h() || region.w() != h.w())
        throw dim_error(std::string(op) + ": region mask must be (B,1,H,W), got " +
                        region.shape_str() + " for activations " + h.shape_str());
    if (checked_mode()) {
        for (std::size_t i = 0; i < region.size(); ++i)
            if (region[i] != 0.0 && region[i] != 1.0)
                throw contract_error(std::string(op) + ": region mask must be binary, found " +
                                     std::to_string(region[i]));
    }
}

void require_vec(const Tensor4& h, const Tensor4& v, const char* op, const char* name) {
    if (v.b() != h.b() || v.c() != h.c() || v.h() != 1 || v.w() != 1)
        throw dim_error(std::string(op) + ": " + name + " must be (B,C,1,1), got " +
                        v.shape_str() + " for activations " + h.shape_str());
}

} // namespace

const char* variant_name(NormVariant v) {
    switch (v) {
    case NormVariant::SAN: return "SAN";
    case NormVariant::SAWS: return "SAWS";
    case NormVariant::SAWN: return "SAWN";
    }
    return "?";
}

NormVariant variant_from_name(const std::string& name) {
    if (name == "SAN") return NormVariant::SAN;
    if (name == "SAWS") return NormVariant::SAWS;
    if (name == "SAWN") return NormVariant::SAWN;
    throw config_error("unknown normalization variant '" + name + "' (SAN, SAWS, SAWN)");
}

InstanceStats instance_stats(const Tensor4& h, double eps) {
    InstanceStats s;
    s.eps = eps;
    s.mu = Tensor4(h.b(), h.c(), 1, 1);
    s.sigma = Tensor4(h.b(), h.c(), 1, 1);
    const int n = h.plane();
    for (int b = 0; b < h.b(); ++b)
        for (int c = 0; c < h.c(); ++c) {
            const double* p = h.chan(b, c);
            double acc = 0.0, acc2 = 0.0;
            for (int i = 0; i < n; ++i) {
                acc += p[i];
                acc2 += p[i] * p[i];
            }
            const double mu = acc / n;
            const double var = std::max(acc2 / n - mu * mu, 0.0);
            s.mu.at(b, c, 0, 0) = mu;
            s.sigma.at(b, c, 0, 0) = std::sqrt(var);
        }
    return s;
}

Tensor4 normalized(const Tensor4& h, const InstanceStats& s) {
    Tensor4 out(h.b(), h.c(), h.h(), h.w());
    const int n = h.plane();
    for (int b = 0; b < h.b(); ++b)
        for (int c = 0; c < h.c(); ++c) {
            const double mu = s.mu.at(b, c, 0, 0);
            const double sg = s.sigma.at(b, c, 0, 0);
            const double inv = 1.0 / std::sqrt(sg * sg + s.eps);
            const double* p = h.chan(b, c);
            double* o = out.chan(b, c);
            for (int i = 0; i < n; ++i)
                o[i] = (p[i] - mu) * inv;
        }
    return out;
}

Tensor4 adain(const Tensor4& h, const Tensor4& lambda_vec, const Tensor4& beta_vec, double eps) {
    require_vec(h, lambda_vec, "adain", "lambda");
    require_vec(h, beta_vec, "adain", "beta");
    Tensor4 y = normalized(h, instance_stats(h, eps));
    return add(mul(y, lambda_vec), beta_vec);
}

Tensor4 sain(const Tensor4& h, const ModulationMaps& mod, double eps) {
    require_maps(h, mod, "sain");
    Tensor4 y = normalized(h, instance_stats(h, eps));
    return add(mul(mod.lambda_map, y), mod.beta_map);
}

ModulationMaps warp_modulation(const ModulationMaps& mod, const Tensor4& flow) {
    if (!mod.lambda_map.same_shape(mod.beta_map))
        throw dim_error("warp_modulation: lambda " + mod.lambda_map.shape_str() +
                        " vs beta " + mod.beta_map.shape_str());
    ModulationMaps out;
    out.lambda_map = bilinear_sample(mod.lambda_map, flow);
    out.beta_map = bilinear_sample(mod.beta_map, flow);
    return out;
}

Tensor4 sawn(const Tensor4& h, const ModulationMaps& mod, const Tensor4& flow,
             const Tensor4& occ, NormVariant variant, double eps) {
    require_maps(h, mod, "sawn");
    if (variant == NormVariant::SAN)
        return sain(h, mod, eps);
    require_occ(h, occ, "sawn");
    Tensor4 y = normalized(h, instance_stats(h, eps));
    Tensor4 lam_w = bilinear_sample(mod.lambda_map, flow);
    Tensor4 blend = lerp(lam_w, h, occ);
    if (variant == NormVariant::SAWS)
        return add(mul(blend, y), mod.beta_map);
    Tensor4 beta_w = bilinear_sample(mod.beta_map, flow);
    return add(mul(blend, y), beta_w);
}

Tensor4 msawn(const Tensor4& h, const ModulationMaps& mod, const Tensor4& flow,
              const Tensor4& occ, const Tensor4& region, NormVariant variant, double eps) {
    require_region(h, region, "msawn");
    Tensor4 warped = sawn(h, mod, flow, occ, variant, eps);
    Tensor4 plain = sain(h, mod, eps);
    return lerp(warped, plain, region);
}

// ---- adjoints ----

Tensor4 normalized_vjp(const Tensor4& h, double eps, const Tensor4& g) {
    if (!g.same_shape(h))
        throw dim_error("normalized_vjp: grad " + g.shape_str() + " vs input " + h.shape_str());
    InstanceStats s = instance_stats(h, eps);
    Tensor4 out(h.b(), h.c(), h.h(), h.w());
    const int n = h.plane();
    for (int b = 0; b < h.b(); ++b)
        for (int c = 0; c < h.c(); ++c) {
            const double mu = s.mu.at(b, c, 0, 0);
            const double sg = s.sigma.at(b, c, 0, 0);
            const double inv = 1.0 / std::sqrt(sg * sg + eps);
            const double* p = h.chan(b, c);
            const double* gp = g.chan(b, c);
            double* o = out.chan(b, c);
            double gbar = 0.0, p_dot = 0.0;
            for (int i = 0; i < n; ++i) {
                gbar += gp[i];
                p_dot += gp[i] * (p[i] - mu);
            }
            gbar /= n;
            // mean of g * h_norm
            const double gy = p_dot * inv / n;
            for (int i = 0; i < n; ++i) {
                const double yi = (p[i] - mu) * inv;
                o[i] = inv * (gp[i] - gbar - yi * gy);
            }
        }
    return out;
}

Tensor4 instance_stats_vjp(const Tensor4& h, const Tensor4& g_mu, const Tensor4& g_sigma) {
    require_vec(h, g_mu, "instance_stats_vjp", "g_mu");
    require_vec(h, g_sigma, "instance_stats_vjp", "g_sigma");
    Tensor4 out(h.b(), h.c(), h.h(), h.w());
    const int n = h.plane();
    for (int b = 0; b < h.b(); ++b)
        for (int c = 0; c < h.c(); ++c) {
            const double* p = h.chan(b, c);
            double acc = 0.0, acc2 = 0.0;
            for (int i = 0; i < n; ++i) {
                acc += p[i];
                acc2 += p[i] * p[i];
            }
            const double mu = acc / n;
            const double var = std::max(acc2 / n - mu * mu, 0.0);
            const double sg = std::sqrt(var);
            const double gm = g_mu.at(b, c, 0, 0) / n;
            const double gs = g_sigma.at(b, c, 0, 0);
            double* o = out.chan(b, c);
            for (int i = 0; i < n; ++i) {
                // d(sigma)/dx_i = (x_i - mu) / (n * sigma); subgradient 0 at sigma == 0
                const double dsig = sg > 0.0 ? (p[i] - mu) / (n * sg) : 0.0;
                o[i] = gm + gs * dsig;
            }
        }
    return out;
}

std::tuple<Tensor4, Tensor4, Tensor4> adain_vjp(const Tensor4& h, const Tensor4& lambda_vec,
                                                const Tensor4& beta_vec, double eps,
                                                const Tensor4& g) {
    require_vec(h, lambda_vec, "adain_vjp", "lambda");
    Tensor4 y = normalized(h, instance_stats(h, eps));
    Tensor4 g_lambda = reduce_to(mul(g, y), lambda_vec);
    Tensor4 g_beta = reduce_to(g, beta_vec);
    Tensor4 g_h = normalized_vjp(h, eps, mul(g, lambda_vec));
    return {g_h, g_lambda, g_beta};
}

std::tuple<Tensor4, Tensor4, Tensor4> sain_vjp(const Tensor4& h, const ModulationMaps& mod,
                                               double eps, const Tensor4& g) {
    require_maps(h, mod, "sain_vjp");
    Tensor4 y = normalized(h, instance_stats(h, eps));
    Tensor4 g_lambda = mul(g, y);
    Tensor4 g_h = normalized_vjp(h, eps, mul(g, mod.lambda_map));
    return {g_h, g_lambda, g};
}

WarpModGrads warp_modulation_vjp(const ModulationMaps& mod, const Tensor4& flow,
                                 const Tensor4& g_lambda, const Tensor4& g_beta) {
    BilinearGrads gl = bilinear_sample_vjp(mod.lambda_map, flow, g_lambda);
    BilinearGrads gb = bilinear_sample_vjp(mod.beta_map, flow, g_beta);
    WarpModGrads out;
    out.mod.lambda_map = gl.src;
    out.mod.beta_map = gb.src;
    out.flow = add(gl.flow, gb.flow);
    return out;
}

SawnGrads sawn_vjp(const Tensor4& h, const ModulationMaps& mod, const Tensor4& flow,
                   const Tensor4& occ, NormVariant variant, double eps, const Tensor4& g) {
    require_maps(h, mod, "sawn_vjp");
    SawnGrads out;
    if (variant == NormVariant::SAN) {
        auto [g_h, g_lambda, g_beta] = sain_vjp(h, mod, eps, g);
        out.h = std::move(g_h);
        out.lambda_map = std::move(g_lambda);
        out.beta_map = std::move(g_beta);
        out.flow = Tensor4(h.b(), 2, h.h(), h.w());
        out.occ = Tensor4(h.b(), 1, h.h(), h.w());
        return out;
    }
    require_occ(h, occ, "sawn_vjp");
    Tensor4 y = normalized(h, instance_stats(h, eps));
    Tensor4 lam_w = bilinear_sample(mod.lambda_map, flow);
    Tensor4 blend = lerp(lam_w, h, occ);

    Tensor4 g_blend = mul(g, y);
    Tensor4 g_y = mul(g, blend);
    auto [g_lam_w, g_h_direct, g_occ] = lerp_vjp(lam_w, h, occ, g_blend);
    BilinearGrads gl = bilinear_sample_vjp(mod.lambda_map, flow, g_lam_w);

    out.h = add(g_h_direct, normalized_vjp(h, eps, g_y));
    out.lambda_map = std::move(gl.src);
    out.occ = std::move(g_occ);
    if (variant == NormVariant::SAWS) {
        out.beta_map = g;
        out.flow = std::move(gl.flow);
    } else {
        BilinearGrads gb = bilinear_sample_vjp(mod.beta_map, flow, g);
        out.beta_map = std::move(gb.src);
        out.flow = add(gl.flow, gb.flow);
    }
    return out;
}

SawnGrads msawn_vjp(const Tensor4& h, const ModulationMaps& mod, const Tensor4& flow,
                    const Tensor4& occ, const Tensor4& region, NormVariant variant,
                    double eps, const Tensor4& g) {
    require_region(h, region, "msawn_vjp");
    Tensor4 g_w = mul(g, region);
    Tensor4 g_nw = sub(g, g_w); // g * (1 - region)

    SawnGrads out = sawn_vjp(h, mod, flow, occ, variant, eps, g_w);
    auto [g_h2, g_lambda2, g_beta2] = sain_vjp(h, mod, eps, g_nw);
    out.h = add(out.h, g_h2);
    out.lambda_map = add(out.lambda_map, g_lambda2);
    out.beta_map = add(out.beta_map, g_beta2);
    return out;
}

} // namespace warpnorm
