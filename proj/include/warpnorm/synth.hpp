#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "warpnorm/tensor.hpp"

namespace warpnorm {

inline constexpr int kNumParts = 4; // background, top, pants, hair
inline constexpr int kNumScales = 3;

const std::array<std::string, kNumParts>& part_labels();
int part_index_by_label(const std::string& label);

enum class TextureKind { Solid, Stripes, Checker };
enum class MotionKind { Identity, Translate, Rotate, Affine };

TextureKind texture_from_name(const std::string& name);
const char* texture_name(TextureKind k);
const char* motion_name(MotionKind k);

// Scene motion. Rotation angle in radians, about the frame center.
// Affine: source = A * (target - center) + center + t with A = [[a00,a01],[a10,a11]]
// acting on (dy, dx).
struct Motion {
    MotionKind kind = MotionKind::Identity;
    double dy = 0.0, dx = 0.0;                        // translate / affine offset
    double theta = 0.0;                               // rotate
    double a00 = 1.0, a01 = 0.0, a10 = 0.0, a11 = 1.0; // affine linear part

    static Motion identity();
    static Motion translate(double dy, double dx);
    static Motion rotate(double theta);
    static Motion affine(double a00, double a01, double a10, double a11,
                         double dy = 0.0, double dx = 0.0);
    Motion inverse() const; // config_error when the linear part is singular
    std::string describe() const;
};

// Backward-warp displacement field (1,2,H,W): value = source_coord - target_coord,
// indexed at target coordinates. Throws config_error for singular affines.
Tensor4 gen_flow(const Motion& motion, int h, int w);

// 1 where the sampled source coordinate lies inside the frame, ramping
// linearly to 0 over a 1-pixel band outside.
Tensor4 derive_occlusion(const Tensor4& flow);

// Per-part binary masks at a single resolution; masks partition the frame.
struct RegionMasks {
    std::array<Tensor4, kNumParts> masks; // each (1,1,H,W), binary
};

struct FlowLevel {
    Tensor4 flow; // (1,2,H/2^k,W/2^k) — magnitudes halved per level
    Tensor4 occ;  // (1,1,·,·) in [0,1]
};

struct FlowPyramid {
    std::vector<FlowLevel> levels; // level 0 = finest
    int scales() const { return static_cast<int>(levels.size()); }
};

// Level k+1 = avgpool2x(level k flow) / 2; occlusion averaged.
FlowPyramid flow_pyramid(const Tensor4& flow, const Tensor4& occ, int n_scales);

struct SceneSpec {
    int h = 64, w = 64;
    std::array<TextureKind, kNumParts> textures = {
        TextureKind::Solid,   // background
        TextureKind::Checker, // top — the hard case
        TextureKind::Stripes, // pants
        TextureKind::Solid,   // hair
    };
    Motion motion;
};

// A procedural "person": source/target images, pose skeleton rasters,
// part masks on both sides, ground-truth flow and its analytic inverse,
// derived occlusion masks.
struct SynthScene {
    Tensor4 x_s, x_t;        // (1,3,H,W)
    Tensor4 p_s, p_t;        // (1,1,H,W) part-boundary skeletons
    RegionMasks masks_s, masks_t;
    Tensor4 flow_gt;         // (1,2,H,W); x_t == bilinear_sample(x_s, flow_gt)
    Tensor4 flow_inv;        // backward flow of the inverse motion
    Tensor4 occ;             // derive_occlusion(flow_gt)
    Tensor4 occ_inv;         // derive_occlusion(flow_inv)
    std::uint64_t seed = 0;
    SceneSpec spec;
};

// Deterministic per (seed, spec). Texture colors/phases and part-geometry
// jitter come from the seed; the motion comes from the spec.
// Preconditions: H, W >= 32 and divisible by 2^(kNumScales-1); scene
// rotations limited to |theta| <= 30 degrees.
SynthScene gen_scene(std::uint64_t seed, const SceneSpec& spec);

// PPM/PGM bundle plus a key=value manifest under `dir`.
void export_scene(const SynthScene& scene, const std::string& dir);

// Deterministic stream mixing for per-scene seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0);

} // namespace warpnorm
