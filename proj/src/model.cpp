#include "warpnorm/model.hpp"

#include <cmath>
#include <random>

namespace warpnorm {

namespace {

constexpr double kNormEps = 1e-5;

std::uint64_t fold_seed(std::uint64_t seed, std::uint64_t salt) {
    return mix_seed(seed, salt, 0x6d6f64656cULL);
}

Tensor4 randn_tensor(std::mt19937_64& rng, int b, int c, int h, int w, double sd) {
    std::normal_distribution<double> d(0.0, sd);
    Tensor4 t(b, c, h, w);
    for (std::size_t i = 0; i < t.size(); ++i)
        t[i] = d(rng);
    return t;
}

// Biases start at small noise rather than zero: sparse inputs with zero bias
// would park whole pre-activation planes exactly on the relu kink.
ConvKernel init_conv(std::mt19937_64& rng, int c_out, int c_in, bool use_bias) {
    const double sd = std::sqrt(2.0 / (c_in * 9.0));
    Tensor4 bias(1, c_out, 1, 1);
    if (use_bias)
        bias = randn_tensor(rng, 1, c_out, 1, 1, 0.05);
    return ConvKernel(randn_tensor(rng, c_out, c_in, 3, 3, sd), std::move(bias), use_bias);
}

// stride-2 pick keeps binary masks binary
Tensor4 subsample2x_nearest(const Tensor4& m) {
    if (m.h() % 2 != 0 || m.w() % 2 != 0)
        throw dim_error("subsample2x_nearest: dims must be even, got " + m.shape_str());
    Tensor4 out(m.b(), m.c(), m.h() / 2, m.w() / 2);
    for (int b = 0; b < m.b(); ++b)
        for (int c = 0; c < m.c(); ++c)
            for (int y = 0; y < out.h(); ++y)
                for (int x = 0; x < out.w(); ++x)
                    out.at(b, c, y, x) = m.at(b, c, 2 * y, 2 * x);
    return out;
}

Tensor4 expand_batch(const Tensor4& t, int batch) {
    if (t.b() == batch)
        return t;
    if (t.b() != 1)
        throw dim_error("expand_batch: expected singleton batch, got " + t.shape_str());
    std::vector<Tensor4> copies(static_cast<std::size_t>(batch), t);
    return concat_batch(copies);
}

Tensor4 sum_batch(const Tensor4& t) {
    Tensor4 out(1, t.c(), t.h(), t.w());
    for (int b = 0; b < t.b(); ++b)
        for (int c = 0; c < t.c(); ++c) {
            const double* src = t.chan(b, c);
            double* dst = out.chan(0, c);
            for (int i = 0; i < t.plane(); ++i)
                dst[i] += src[i];
        }
    return out;
}

ModulationMaps level_maps(const StyleParams& style, int k) {
    return ModulationMaps{style.lambda[k], style.beta[k]};
}

} // namespace

// ---- parameters ----

ModelParams ModelParams::init(std::uint64_t seed, const ModelConfig& cfg) {
    std::mt19937_64 rng(fold_seed(seed, 1));
    ModelParams p;
    p.cfg = cfg;

    p.style_conv.resize(cfg.scales);
    for (int k = 0; k < cfg.scales; ++k) {
        const int c_in = k == 0 ? 3 : cfg.part_channels[k - 1];
        p.style_conv[k] = init_conv(rng, cfg.part_channels[k], c_in, /*use_bias=*/false);
    }

    p.mod_conv.resize(cfg.scales);
    for (int k = 0; k < cfg.scales; ++k) {
        p.mod_conv[k].resize(cfg.parts);
        for (int j = 0; j < cfg.parts; ++j) {
            const int c = cfg.part_channels[k];
            p.mod_conv[k][j] = init_conv(rng, 2 * c, c, /*use_bias=*/true);
            for (int co = 0; co < c; ++co)
                p.mod_conv[k][j].b.at(0, co, 0, 0) = 1.0; // scale half starts at identity
        }
    }

    p.pose_conv.resize(cfg.scales);
    for (int k = 0; k < cfg.scales; ++k) {
        const int c_in = k == 0 ? 1 : cfg.pose_channels[k - 1];
        p.pose_conv[k] = init_conv(rng, cfg.pose_channels[k], c_in, true);
    }

    p.dec_conv.resize(cfg.scales);
    for (int k = 0; k < cfg.scales; ++k) {
        const int c_in = k == cfg.scales - 1 ? cfg.dec_channels(k) : cfg.dec_channels(k + 1);
        p.dec_conv[k] = init_conv(rng, cfg.dec_channels(k), c_in, true);
    }

    p.out_conv = init_conv(rng, 3, cfg.dec_channels(0), true);
    return p;
}

void ModelParams::for_each_tensor(const std::function<void(const std::string&, Tensor4&)>& fn) {
    for (int k = 0; k < cfg.scales; ++k)
        fn("style.conv" + std::to_string(k) + ".w", style_conv[k].w);
    for (int k = 0; k < cfg.scales; ++k)
        for (int j = 0; j < cfg.parts; ++j) {
            const std::string base = "mod.k" + std::to_string(k) + ".p" + std::to_string(j);
            fn(base + ".w", mod_conv[k][j].w);
            fn(base + ".b", mod_conv[k][j].b);
        }
    for (int k = 0; k < cfg.scales; ++k) {
        const std::string base = "pose.conv" + std::to_string(k);
        fn(base + ".w", pose_conv[k].w);
        fn(base + ".b", pose_conv[k].b);
    }
    for (int k = 0; k < cfg.scales; ++k) {
        const std::string base = "dec.k" + std::to_string(k);
        fn(base + ".w", dec_conv[k].w);
        fn(base + ".b", dec_conv[k].b);
    }
    fn("out.w", out_conv.w);
    fn("out.b", out_conv.b);
}

std::vector<std::pair<std::string, const Tensor4*>> ModelParams::named_tensors() const {
    std::vector<std::pair<std::string, const Tensor4*>> out;
    const_cast<ModelParams*>(this)->for_each_tensor(
        [&out](const std::string& name, Tensor4& t) { out.emplace_back(name, &t); });
    return out;
}

FreeStyleParams FreeStyleParams::init(std::uint64_t seed, const ModelConfig& cfg) {
    std::mt19937_64 rng(fold_seed(seed, 2));
    FreeStyleParams p;
    p.cfg = cfg;
    p.lambda_map.resize(cfg.scales);
    p.beta_map.resize(cfg.scales);
    std::normal_distribution<double> noise(0.0, 0.01);
    for (int k = 0; k < cfg.scales; ++k) {
        const int hk = cfg.h >> k, wk = cfg.w >> k;
        p.lambda_map[k] = Tensor4(1, cfg.dec_channels(k), hk, wk, 1.0);
        p.beta_map[k] = Tensor4(1, cfg.dec_channels(k), hk, wk, 0.0);
        // small noise so channels are not exactly degenerate at the start
        for (std::size_t i = 0; i < p.lambda_map[k].size(); ++i)
            p.lambda_map[k][i] += noise(rng);
    }
    return p;
}

void FreeStyleParams::for_each_tensor(
    const std::function<void(const std::string&, Tensor4&)>& fn) {
    for (int k = 0; k < cfg.scales; ++k) {
        fn("free.k" + std::to_string(k) + ".lambda", lambda_map[k]);
        fn("free.k" + std::to_string(k) + ".beta", beta_map[k]);
    }
}

// ---- style encoder ----

StyleParams extract_region_styles_batch(const Tensor4& x, const std::vector<Tensor4>& part_masks,
                                        const ModelParams& params, StyleCache* cache) {
    const ModelConfig& cfg = params.cfg;
    if (static_cast<int>(part_masks.size()) != cfg.parts)
        throw config_error("extract_region_styles: expected " + std::to_string(cfg.parts) +
                           " part masks, got " + std::to_string(part_masks.size()));
    const int scales = cfg.scales;
    std::vector<std::vector<Tensor4>> blocks(scales); // [k][j]
    StyleCache local;
    StyleCache& sc = cache ? *cache : local;
    sc.parts.assign(cfg.parts, {});
    for (int j = 0; j < cfg.parts; ++j) {
        StylePartCache& pc = sc.parts[j];
        pc.xj = mul(x, part_masks[j]);
        pc.z.resize(scales);
        pc.f.resize(scales);
        pc.p.resize(scales);
        Tensor4 cur = pc.xj;
        for (int k = 0; k < scales; ++k) {
            pc.z[k] = conv2d(cur, params.style_conv[k]);
            pc.f[k] = relu(pc.z[k]);
            blocks[k].push_back(pc.f[k]);
            if (k + 1 < scales) {
                pc.p[k] = avgpool2x(pc.f[k]);
                cur = pc.p[k];
            }
        }
    }
    StyleParams style;
    style.code.resize(scales);
    style.lambda.resize(scales);
    style.beta.resize(scales);
    for (int k = 0; k < scales; ++k) {
        style.code[k] = concat_channels(blocks[k]);
        auto [lam, beta] = derive_modulation(style.code[k], params, k);
        style.lambda[k] = std::move(lam);
        style.beta[k] = std::move(beta);
    }
    return style;
}

StyleParams extract_region_styles(const Tensor4& x, const RegionMasks& masks,
                                  const ModelParams& params, StyleCache* cache) {
    std::vector<Tensor4> part_masks(masks.masks.begin(), masks.masks.end());
    return extract_region_styles_batch(x, part_masks, params, cache);
}

std::pair<Tensor4, Tensor4> derive_modulation(const Tensor4& code, const ModelParams& params,
                                              int level) {
    const ModelConfig& cfg = params.cfg;
    const int c = cfg.part_channels[level];
    if (code.c() != cfg.parts * c)
        throw dim_error("derive_modulation: code " + code.shape_str() + " must have " +
                        std::to_string(cfg.parts * c) + " channels at level " +
                        std::to_string(level));
    std::vector<Tensor4> lam_blocks, beta_blocks;
    for (int j = 0; j < cfg.parts; ++j) {
        Tensor4 block = slice_channels(code, j * c, (j + 1) * c);
        Tensor4 out = conv2d(block, params.mod_conv[level][j]);
        lam_blocks.push_back(slice_channels(out, 0, c));
        beta_blocks.push_back(slice_channels(out, c, 2 * c));
    }
    return {concat_channels(lam_blocks), concat_channels(beta_blocks)};
}

// ---- pose encoder ----

std::vector<Tensor4> encode_pose(const Tensor4& pose, const ModelParams& params,
                                 PoseCache* cache) {
    const ModelConfig& cfg = params.cfg;
    PoseCache local;
    PoseCache& pc = cache ? *cache : local;
    pc.input = pose;
    pc.z.resize(cfg.scales);
    pc.levels.resize(cfg.scales);
    pc.pooled.resize(cfg.scales);
    Tensor4 cur = pose;
    for (int k = 0; k < cfg.scales; ++k) {
        pc.z[k] = conv2d(cur, params.pose_conv[k]);
        pc.levels[k] = relu(pc.z[k]);
        if (k + 1 < cfg.scales) {
            pc.pooled[k] = avgpool2x(pc.levels[k]);
            cur = pc.pooled[k];
        }
    }
    return pc.levels;
}

// ---- decoder ----

Tensor4 decode(const std::vector<Tensor4>& pose_feats, const StyleParams& style,
               const FlowPyramid& pyr, NormVariant variant, const ModelParams& params,
               const std::optional<Tensor4>& region, DecodeCache* cache) {
    const ModelConfig& cfg = params.cfg;
    const int scales = cfg.scales;
    if (static_cast<int>(style.lambda.size()) != scales || pyr.scales() != scales)
        throw dim_error("decode: style has " + std::to_string(style.lambda.size()) +
                        " scales, pyramid " + std::to_string(pyr.scales()) + ", expected " +
                        std::to_string(scales));
    if (pose_feats.empty())
        throw dim_error("decode: no pose features");
    for (int k = 0; k < scales; ++k) {
        const Tensor4& lam = style.lambda[k];
        if (lam.h() != pyr.levels[k].flow.h() || lam.w() != pyr.levels[k].flow.w())
            throw dim_error("decode: level " + std::to_string(k) + " style " + lam.shape_str() +
                            " vs flow " + pyr.levels[k].flow.shape_str());
    }

    DecodeCache local;
    DecodeCache& dc = cache ? *cache : local;
    dc.h_in.assign(scales, Tensor4());
    dc.h_conv.assign(scales, Tensor4());
    dc.h_norm_out.assign(scales, Tensor4());
    dc.h_act.assign(scales, Tensor4());
    dc.region.assign(scales, Tensor4());

    if (region) {
        Tensor4 r = *region;
        for (int k = 0; k < scales; ++k) {
            dc.region[k] = r;
            if (k + 1 < scales)
                r = subsample2x_nearest(r);
        }
    }

    Tensor4 h = pose_feats.back();
    for (int k = scales - 1; k >= 0; --k) {
        dc.h_in[k] = h;
        h = conv2d(h, params.dec_conv[k]);
        dc.h_conv[k] = h;
        const ModulationMaps maps = level_maps(style, k);
        if (region)
            h = msawn(h, maps, pyr.levels[k].flow, pyr.levels[k].occ, dc.region[k], variant,
                      kNormEps);
        else
            h = sawn(h, maps, pyr.levels[k].flow, pyr.levels[k].occ, variant, kNormEps);
        dc.h_norm_out[k] = h;
        h = relu(h);
        dc.h_act[k] = h;
        if (k > 0)
            h = upsample_nearest2x(h);
    }
    dc.z_out = conv2d(h, params.out_conv);
    dc.out = squash01(dc.z_out);
    return dc.out;
}

// ---- stpr mixing ----

StyleParams stpr_mix(const StyleParams& style_src, const StyleParams& style_ref, int part,
                     const ModelParams& params) {
    const ModelConfig& cfg = params.cfg;
    if (part < 0 || part >= cfg.parts)
        throw contract_error("stpr_mix: part " + std::to_string(part) + " out of range [0," +
                             std::to_string(cfg.parts) + ")");
    if (style_src.code.size() != style_ref.code.size())
        throw dim_error("stpr_mix: mismatched scale counts");
    StyleParams mixed;
    const int scales = static_cast<int>(style_src.code.size());
    mixed.code.resize(scales);
    mixed.lambda.resize(scales);
    mixed.beta.resize(scales);
    for (int k = 0; k < scales; ++k) {
        const int c = cfg.part_channels[k];
        std::vector<Tensor4> blocks;
        for (int j = 0; j < cfg.parts; ++j) {
            const StyleParams& origin = (j == part) ? style_ref : style_src;
            blocks.push_back(slice_channels(origin.code[k], j * c, (j + 1) * c));
        }
        mixed.code[k] = concat_channels(blocks);
        auto [lam, beta] = derive_modulation(mixed.code[k], params, k);
        mixed.lambda[k] = std::move(lam);
        mixed.beta[k] = std::move(beta);
    }
    return mixed;
}

// ---- batched scenes ----

SceneBatch SceneBatch::from_scenes(const std::vector<SynthScene>& scenes) {
    if (scenes.empty())
        throw config_error("SceneBatch: no scenes");
    SceneBatch b;
    std::vector<Tensor4> xs, xt, ps, pt, fg, fi, oc, oi;
    for (const SynthScene& s : scenes) {
        xs.push_back(s.x_s);
        xt.push_back(s.x_t);
        ps.push_back(s.p_s);
        pt.push_back(s.p_t);
        fg.push_back(s.flow_gt);
        fi.push_back(s.flow_inv);
        oc.push_back(s.occ);
        oi.push_back(s.occ_inv);
    }
    b.x_s = concat_batch(xs);
    b.x_t = concat_batch(xt);
    b.p_s = concat_batch(ps);
    b.p_t = concat_batch(pt);
    b.flow_gt = concat_batch(fg);
    b.flow_inv = concat_batch(fi);
    b.occ = concat_batch(oc);
    b.occ_inv = concat_batch(oi);
    b.masks_s.resize(kNumParts);
    b.masks_t.resize(kNumParts);
    for (int j = 0; j < kNumParts; ++j) {
        std::vector<Tensor4> ms, mt;
        for (const SynthScene& s : scenes) {
            ms.push_back(s.masks_s.masks[j]);
            mt.push_back(s.masks_t.masks[j]);
        }
        b.masks_s[j] = concat_batch(ms);
        b.masks_t[j] = concat_batch(mt);
    }
    return b;
}

// ---- full forward ----

ForwardFull forward_full(const SceneBatch& batch, const ModelParams& params,
                         NormVariant variant, ForwardMode mode, int mix_part) {
    ForwardFull f;
    f.variant = variant;
    f.mode = mode;
    if (mode == ForwardMode::PoseTransfer) {
        f.style = extract_region_styles_batch(batch.x_s, batch.masks_s, params,
                                              &f.style_cache_src);
        f.pose_feats = encode_pose(batch.p_t, params, &f.pose_cache);
        f.pyr = flow_pyramid(batch.flow_gt, batch.occ, params.cfg.scales);
        f.target = batch.x_t;
        f.out = decode(f.pose_feats, f.style, f.pyr, variant, params, std::nullopt, &f.dec_cache);
        return f;
    }
    if (mix_part < 0 || mix_part >= params.cfg.parts)
        throw contract_error("forward_full(stpr): mix_part " + std::to_string(mix_part) +
                             " out of range");
    f.mix_part = mix_part;
    f.style_src = extract_region_styles_batch(batch.x_s, batch.masks_s, params,
                                              &f.style_cache_src);
    f.style_ref = extract_region_styles_batch(batch.x_t, batch.masks_t, params,
                                              &f.style_cache_ref);
    f.style = stpr_mix(*f.style_src, *f.style_ref, mix_part, params);
    f.pose_feats = encode_pose(batch.p_s, params, &f.pose_cache);
    f.pyr = flow_pyramid(batch.flow_inv, batch.occ_inv, params.cfg.scales);
    f.region = batch.masks_s[mix_part];
    f.target = batch.x_s;
    f.out = decode(f.pose_feats, f.style, f.pyr, variant, params, f.region, &f.dec_cache);
    return f;
}

ForwardFull forward_free(const SceneBatch& batch, const FreeStyleParams& free_params,
                         const ModelParams& dec_params, NormVariant variant) {
    const ModelConfig& cfg = free_params.cfg;
    const int B = batch.x_s.b();
    ForwardFull f;
    f.variant = variant;
    f.mode = ForwardMode::PoseTransfer;
    f.style.lambda.resize(cfg.scales);
    f.style.beta.resize(cfg.scales);
    for (int k = 0; k < cfg.scales; ++k) {
        f.style.lambda[k] = expand_batch(free_params.lambda_map[k], B);
        f.style.beta[k] = expand_batch(free_params.beta_map[k], B);
    }
    // content path: the target pose raster pooled to the coarse resolution
    // and replicated across channels (flow-equivariant, nothing learned)
    Tensor4 pose = batch.p_t;
    for (int k = 1; k < cfg.scales; ++k)
        pose = avgpool2x(pose);
    std::vector<Tensor4> reps(static_cast<std::size_t>(cfg.dec_channels(cfg.scales - 1)), pose);
    f.pose_feats = {concat_channels(reps)};
    f.pyr = flow_pyramid(batch.flow_gt, batch.occ, cfg.scales);
    f.target = batch.x_t;
    f.out = decode(f.pose_feats, f.style, f.pyr, variant, dec_params, std::nullopt, &f.dec_cache);
    return f;
}

// ---- gradients ----

Tensor4* ParamGrads::find(const std::string& name) {
    for (auto& [n, t] : items)
        if (n == name)
            return &t;
    return nullptr;
}

void ParamGrads::accumulate(const std::string& name, const Tensor4& g) {
    if (Tensor4* existing = find(name)) {
        *existing = add(*existing, g);
        return;
    }
    items.emplace_back(name, g);
}

namespace {

struct DecodeGrads {
    std::vector<Tensor4> lambda, beta; // per level
    Tensor4 pose_coarse;               // grad at the decoder input
};

// Reverse of decode(); accumulates dec/out conv grads, returns the style and
// pose cotangents.
DecodeGrads backward_decode(const ForwardFull& fwd, const ModelParams& params,
                            const Tensor4& g_out, ParamGrads& grads) {
    const ModelConfig& cfg = params.cfg;
    const int scales = cfg.scales;
    const DecodeCache& dc = fwd.dec_cache;

    DecodeGrads dg;
    dg.lambda.resize(scales);
    dg.beta.resize(scales);

    Tensor4 g_z = squash01_vjp(dc.z_out, g_out);
    Conv2dGrads cg_out = conv2d_vjp(dc.h_act[0], params.out_conv, g_z);
    grads.accumulate("out.w", cg_out.w);
    grads.accumulate("out.b", cg_out.b);

    Tensor4 g_h = std::move(cg_out.x);
    for (int k = 0; k < scales; ++k) {
        Tensor4 g_norm = relu_vjp(dc.h_norm_out[k], g_h);
        const ModulationMaps maps = level_maps(fwd.style, k);
        SawnGrads sg;
        if (fwd.region)
            sg = msawn_vjp(dc.h_conv[k], maps, fwd.pyr.levels[k].flow, fwd.pyr.levels[k].occ,
                           dc.region[k], fwd.variant, kNormEps, g_norm);
        else
            sg = sawn_vjp(dc.h_conv[k], maps, fwd.pyr.levels[k].flow, fwd.pyr.levels[k].occ,
                          fwd.variant, kNormEps, g_norm);
        dg.lambda[k] = std::move(sg.lambda_map);
        dg.beta[k] = std::move(sg.beta_map);

        const std::string base = "dec.k" + std::to_string(k);
        Conv2dGrads cg = conv2d_vjp(dc.h_in[k], params.dec_conv[k], sg.h);
        grads.accumulate(base + ".w", cg.w);
        grads.accumulate(base + ".b", cg.b);
        if (k + 1 < scales)
            g_h = upsample_nearest2x_vjp(cg.x);
        else
            dg.pose_coarse = std::move(cg.x);
    }
    return dg;
}

// Backward through one part's encoder branch given per-level block cotangents.
void backward_style_part(const StylePartCache& pc, const ModelParams& params,
                         const std::vector<Tensor4>& g_blocks, ParamGrads& grads) {
    const int scales = params.cfg.scales;
    Tensor4 g_pool; // grad flowing into the pooled features of level k-1
    for (int k = scales - 1; k >= 0; --k) {
        Tensor4 g_f = g_blocks[k];
        if (k + 1 < scales)
            g_f = add(g_f, avgpool2x_vjp(g_pool));
        Tensor4 g_z = relu_vjp(pc.z[k], g_f);
        const Tensor4& input = k == 0 ? pc.xj : pc.p[k - 1];
        Conv2dGrads cg = conv2d_vjp(input, params.style_conv[k], g_z);
        grads.accumulate("style.conv" + std::to_string(k) + ".w", cg.w);
        g_pool = std::move(cg.x);
    }
}

void backward_pose(const PoseCache& pc, const ModelParams& params, const Tensor4& g_coarse,
                   ParamGrads& grads) {
    const int scales = params.cfg.scales;
    Tensor4 g_lvl = g_coarse;
    for (int k = scales - 1; k >= 0; --k) {
        Tensor4 g_z = relu_vjp(pc.z[k], g_lvl);
        const Tensor4& input = k == 0 ? pc.input : pc.pooled[k - 1];
        const std::string base = "pose.conv" + std::to_string(k);
        Conv2dGrads cg = conv2d_vjp(input, params.pose_conv[k], g_z);
        grads.accumulate(base + ".w", cg.w);
        grads.accumulate(base + ".b", cg.b);
        if (k > 0)
            g_lvl = avgpool2x_vjp(cg.x);
    }
}

} // namespace

void backward_full(const ForwardFull& fwd, const SceneBatch& /*batch*/,
                   const ModelParams& params, const Tensor4& g_out, ParamGrads& grads) {
    const ModelConfig& cfg = params.cfg;
    DecodeGrads dg = backward_decode(fwd, params, g_out, grads);

    // modulation conv-blocks: grouped per part, then into the style encoders
    std::vector<std::vector<Tensor4>> g_blocks_src(cfg.parts), g_blocks_ref(cfg.parts);
    for (int j = 0; j < cfg.parts; ++j) {
        g_blocks_src[j].resize(cfg.scales);
        g_blocks_ref[j].resize(cfg.scales);
    }
    for (int k = 0; k < cfg.scales; ++k) {
        const int c = cfg.part_channels[k];
        for (int j = 0; j < cfg.parts; ++j) {
            Tensor4 g_mod = concat_channels({slice_channels(dg.lambda[k], j * c, (j + 1) * c),
                                             slice_channels(dg.beta[k], j * c, (j + 1) * c)});
            Tensor4 block = slice_channels(fwd.style.code[k], j * c, (j + 1) * c);
            const std::string base = "mod.k" + std::to_string(k) + ".p" + std::to_string(j);
            Conv2dGrads cg = conv2d_vjp(block, params.mod_conv[k][j], g_mod);
            grads.accumulate(base + ".w", cg.w);
            grads.accumulate(base + ".b", cg.b);
            const bool from_ref = fwd.mode == ForwardMode::Stpr && j == fwd.mix_part;
            (from_ref ? g_blocks_ref : g_blocks_src)[j][k] = std::move(cg.x);
        }
    }
    for (int j = 0; j < cfg.parts; ++j) {
        const bool from_ref = fwd.mode == ForwardMode::Stpr && j == fwd.mix_part;
        const StyleCache& cache = from_ref ? fwd.style_cache_ref : fwd.style_cache_src;
        backward_style_part(cache.parts[j], params,
                            from_ref ? g_blocks_ref[j] : g_blocks_src[j], grads);
    }

    backward_pose(fwd.pose_cache, params, dg.pose_coarse, grads);
}

void backward_free(const ForwardFull& fwd, const FreeStyleParams& free_params,
                   const ModelParams& dec_params, const Tensor4& g_out, ParamGrads& grads) {
    DecodeGrads dg = backward_decode(fwd, dec_params, g_out, grads);
    for (int k = 0; k < free_params.cfg.scales; ++k) {
        grads.accumulate("free.k" + std::to_string(k) + ".lambda", sum_batch(dg.lambda[k]));
        grads.accumulate("free.k" + std::to_string(k) + ".beta", sum_batch(dg.beta[k]));
    }
    // the pose tile is data, not a parameter; its cotangent is dropped
}

} // namespace warpnorm
