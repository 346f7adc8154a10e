#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "warpnorm/normalize.hpp"
#include "warpnorm/synth.hpp"
#include "warpnorm/tensor.hpp"

namespace warpnorm {

struct ModelConfig {
    int h = 64, w = 64;
    int scales = kNumScales;
    int parts = kNumParts;
    // per-part style channels, level 0 (finest) .. level 2 (coarsest);
    // decoder widths are parts * part_channels = {32, 64, 128}
    std::array<int, kNumScales> part_channels = {8, 16, 32};
    // pose feature widths per level; the last must match the coarsest
    // decoder width (the decoder stream starts there)
    std::array<int, kNumScales> pose_channels = {8, 16, 128};

    int dec_channels(int level) const { return parts * part_channels[level]; }
};

// All trainable tensors of the generator. Style-encoder convs are bias-free
// so per-part codes of masked-out inputs are exactly zero.
struct ModelParams {
    ModelConfig cfg;
    std::vector<ConvKernel> style_conv;              // [scales]
    std::vector<std::vector<ConvKernel>> mod_conv;   // [scales][parts], c -> 2c
    std::vector<ConvKernel> pose_conv;               // [scales]
    std::vector<ConvKernel> dec_conv;                // [scales], indexed by level
    ConvKernel out_conv;                             // dec_channels(0) -> 3

    static ModelParams init(std::uint64_t seed, const ModelConfig& cfg = {});

    // Stable iteration order over all trainable tensors (weights and used biases).
    void for_each_tensor(const std::function<void(const std::string&, Tensor4&)>& fn);
    std::vector<std::pair<std::string, const Tensor4*>> named_tensors() const;
};

// Free-parameter alternative to the style encoder: the modulation maps are
// direct trainables. The decoder input is the pooled pose raster (replicated
// across channels), keeping the content path flow-equivariant so the
// ablation isolates the normalization math from encoder capacity.
struct FreeStyleParams {
    ModelConfig cfg;
    std::vector<Tensor4> lambda_map; // [scales], (1, C_k, H_k, W_k)
    std::vector<Tensor4> beta_map;

    static FreeStyleParams init(std::uint64_t seed, const ModelConfig& cfg = {});
    void for_each_tensor(const std::function<void(const std::string&, Tensor4&)>& fn);
};

// Multi-scale region style: concatenated per-part codes plus the modulation
// maps derived from them. Channel block j of every code belongs to part j.
struct StyleParams {
    std::vector<Tensor4> code;   // [scales], (B, parts*c_k, H_k, W_k)
    std::vector<Tensor4> lambda; // [scales], (B, C_k, H_k, W_k)
    std::vector<Tensor4> beta;
};

// Caches for the hand-written backward pass.
struct StylePartCache {
    Tensor4 xj;                 // masked input
    std::vector<Tensor4> z;     // conv pre-activations per level
    std::vector<Tensor4> f;     // post-relu features per level (the code blocks)
    std::vector<Tensor4> p;     // pooled features feeding the next level
};
struct StyleCache {
    std::vector<StylePartCache> parts;
};

struct PoseCache {
    std::vector<Tensor4> z;       // conv pre-activations
    std::vector<Tensor4> levels;  // post-relu features, level k at (H/2^k, W/2^k)
    std::vector<Tensor4> pooled;  // inputs to the next conv
    Tensor4 input;
};

struct DecodeCache {
    std::vector<Tensor4> h_in;    // conv inputs per level (coarse to fine order)
    std::vector<Tensor4> h_conv;  // norm inputs
    std::vector<Tensor4> h_norm_out;
    std::vector<Tensor4> h_act;
    std::vector<Tensor4> region;  // per-level region masks (empty when unused)
    Tensor4 z_out;                // final conv pre-squash
    Tensor4 out;
};

StyleParams extract_region_styles(const Tensor4& x, const RegionMasks& masks,
                                  const ModelParams& params, StyleCache* cache = nullptr);

// Batched variant: masks per batch item.
StyleParams extract_region_styles_batch(const Tensor4& x, const std::vector<Tensor4>& part_masks,
                                        const ModelParams& params, StyleCache* cache = nullptr);

// Re-derive lambda/beta for one level from a (possibly mixed) code tensor.
std::pair<Tensor4, Tensor4> derive_modulation(const Tensor4& code, const ModelParams& params, int level);

std::vector<Tensor4> encode_pose(const Tensor4& pose, const ModelParams& params,
                                 PoseCache* cache = nullptr);

// Coarse-to-fine decoder with a warped-normalization block per scale.
// region (optional, (B,1,H,W) binary at full resolution) routes the blocks
// through the masked variant.
Tensor4 decode(const std::vector<Tensor4>& pose_feats, const StyleParams& style,
               const FlowPyramid& pyr, NormVariant variant, const ModelParams& params,
               const std::optional<Tensor4>& region = std::nullopt,
               DecodeCache* cache = nullptr);

// Replace channel block `part` of every scale's code with the reference's
// block and re-derive the modulation maps.
StyleParams stpr_mix(const StyleParams& style_src, const StyleParams& style_ref,
                     int part, const ModelParams& params);

// A batch of scenes stacked on the batch axis.
struct SceneBatch {
    Tensor4 x_s, x_t, p_s, p_t;
    std::vector<Tensor4> masks_s, masks_t; // [parts], (B,1,H,W)
    Tensor4 flow_gt, flow_inv, occ, occ_inv;
    static SceneBatch from_scenes(const std::vector<SynthScene>& scenes);
};

enum class ForwardMode { PoseTransfer, Stpr };

struct ForwardFull {
    Tensor4 out;           // generated image (B,3,H,W) in [0,1]
    Tensor4 target;        // supervision image
    StyleParams style;     // styles actually used (post-mix in stpr mode)
    FlowPyramid pyr;
    std::optional<Tensor4> region;
    int mix_part = -1;
    // caches for backward
    StyleCache style_cache_src, style_cache_ref;
    std::optional<StyleParams> style_src, style_ref; // pre-mix styles (stpr mode)
    PoseCache pose_cache;
    std::vector<Tensor4> pose_feats;
    DecodeCache dec_cache;
    NormVariant variant = NormVariant::SAWN;
    ForwardMode mode = ForwardMode::PoseTransfer;
};

// Pose-transfer mode: styles from x_s, pose p_t, pyramid from flow_gt,
// target x_t. Stpr mode: reconstruct x_s from p_s with part `mix_part`'s
// style taken from x_t and the part mask routed into the masked blocks;
// pyramid from the inverse flow.
ForwardFull forward_full(const SceneBatch& batch, const ModelParams& params,
                         NormVariant variant, ForwardMode mode, int mix_part = -1);

// Free-parameter forward: trainable input feature + direct modulation maps,
// decoded through dec_params' decoder convs (its encoders are unused). An
// optional motion override re-warps the same maps under a different flow.
ForwardFull forward_free(const SceneBatch& batch, const FreeStyleParams& free_params,
                         const ModelParams& dec_params, NormVariant variant);

// Named gradient accumulator aligned with the params' tensor names.
struct ParamGrads {
    std::vector<std::pair<std::string, Tensor4>> items;
    Tensor4* find(const std::string& name);
    void accumulate(const std::string& name, const Tensor4& g);
};

// Backward through the full generator given d(loss)/d(out). Accumulates
// into `grads` using the same names as ModelParams::for_each_tensor.
void backward_full(const ForwardFull& fwd, const SceneBatch& batch,
                   const ModelParams& params, const Tensor4& g_out, ParamGrads& grads);

// Free-mode backward: accumulates decoder conv grads plus the direct map and
// input-feature grads (batch-summed).
void backward_free(const ForwardFull& fwd, const FreeStyleParams& free_params,
                   const ModelParams& dec_params, const Tensor4& g_out, ParamGrads& grads);

} // namespace warpnorm
