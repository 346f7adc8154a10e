#pragma once

#include <string>
#include <tuple>

#include "warpnorm/tensor.hpp"

namespace warpnorm {

// Per-(sample, channel) statistics; sigma is the raw standard deviation,
// the normalization divisor is sqrt(sigma^2 + eps).
struct InstanceStats {
    Tensor4 mu;    // (B, C, 1, 1)
    Tensor4 sigma; // (B, C, 1, 1), >= 0
    double eps = 0.0;
};

// Per-pixel scale and bias, shaped like the activations they modulate.
struct ModulationMaps {
    Tensor4 lambda_map; // (B, C, H, W)
    Tensor4 beta_map;   // (B, C, H, W)
};

enum class NormVariant {
    SAN,  // no warping, no blending
    SAWS, // warp the scale map only, bias stays un-warped
    SAWN, // warp both maps, occlusion-blend the scale with raw activations
};

const char* variant_name(NormVariant v);
NormVariant variant_from_name(const std::string& name);

InstanceStats instance_stats(const Tensor4& h, double eps);

// (h - mu) / sqrt(sigma^2 + eps)
Tensor4 normalized(const Tensor4& h, const InstanceStats& s);

// Spatially-invariant modulation; lambda/beta are (B, C, 1, 1).
Tensor4 adain(const Tensor4& h, const Tensor4& lambda_vec, const Tensor4& beta_vec, double eps);

// Spatially-adaptive modulation; maps shaped like h.
Tensor4 sain(const Tensor4& h, const ModulationMaps& mod, double eps);

// Bilinear-warp both modulation maps under the flow.
ModulationMaps warp_modulation(const ModulationMaps& mod, const Tensor4& flow);

// Warped normalization. occ is (B,1,H,W) in [0,1], broadcast over channels.
//   SAWN: (lam_w*m + h*(1-m)) * h_norm + beta_w
//   SAWS: same blend, but the bias stays un-warped
//   SAN:  exactly sain(h, mod); flow and occ are ignored
Tensor4 sawn(const Tensor4& h, const ModulationMaps& mod, const Tensor4& flow,
             const Tensor4& occ, NormVariant variant, double eps);

// Region-masked variant: warped branch inside the binary region, plain
// sain outside.
Tensor4 msawn(const Tensor4& h, const ModulationMaps& mod, const Tensor4& flow,
              const Tensor4& occ, const Tensor4& region, NormVariant variant, double eps);

// ---- adjoints ----

// d(normalized)/dh contracted with g; accounts for mu and sigma depending on h.
Tensor4 normalized_vjp(const Tensor4& h, double eps, const Tensor4& g);

// gradients w.r.t. (h,) given cotangents for mu and sigma (each (B,C,1,1)).
Tensor4 instance_stats_vjp(const Tensor4& h, const Tensor4& g_mu, const Tensor4& g_sigma);

// returns (g_h, g_lambda, g_beta); lambda/beta gradients shaped like the inputs.
std::tuple<Tensor4, Tensor4, Tensor4> adain_vjp(const Tensor4& h, const Tensor4& lambda_vec,
                                                const Tensor4& beta_vec, double eps,
                                                const Tensor4& g);
std::tuple<Tensor4, Tensor4, Tensor4> sain_vjp(const Tensor4& h, const ModulationMaps& mod,
                                               double eps, const Tensor4& g);

struct WarpModGrads {
    ModulationMaps mod;
    Tensor4 flow;
};
WarpModGrads warp_modulation_vjp(const ModulationMaps& mod, const Tensor4& flow,
                                 const Tensor4& g_lambda, const Tensor4& g_beta);

struct SawnGrads {
    Tensor4 h;
    Tensor4 lambda_map;
    Tensor4 beta_map;
    Tensor4 flow;
    Tensor4 occ;
};
SawnGrads sawn_vjp(const Tensor4& h, const ModulationMaps& mod, const Tensor4& flow,
                   const Tensor4& occ, NormVariant variant, double eps, const Tensor4& g);
SawnGrads msawn_vjp(const Tensor4& h, const ModulationMaps& mod, const Tensor4& flow,
                    const Tensor4& occ, const Tensor4& region, NormVariant variant,
                    double eps, const Tensor4& g);

} // namespace warpnorm
