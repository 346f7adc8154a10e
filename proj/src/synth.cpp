#include "warpnorm/synth.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "warpnorm/image_io.hpp"

namespace warpnorm {

namespace {

constexpr double kMaxSceneRotation = 30.0 * M_PI / 180.0;

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

// Axis-aligned part layout in continuous pixel coordinates.
struct Layout {
    // row bands: hair [r0,r1), top [r1,r2), pants [r2,r3)
    double r0, r1, r2, r3;
    double hair_c0, hair_c1;
    double top_c0, top_c1;
    double pants_c0, pants_c1;

    int part_of(double y, double x) const {
        if (y >= r0 && y < r1 && x >= hair_c0 && x < hair_c1)
            return 3; // hair
        if (y >= r1 && y < r2 && x >= top_c0 && x < top_c1)
            return 1; // top
        if (y >= r2 && y < r3 && x >= pants_c0 && x < pants_c1)
            return 2; // pants
        return 0; // background
    }
};

struct TextureParams {
    TextureKind kind = TextureKind::Solid;
    double c1[3] = {0.5, 0.5, 0.5};
    double c2[3] = {0.5, 0.5, 0.5};
    double period_y = 4.0, period_x = 4.0;
    double phase_y = 0.0, phase_x = 0.0;
    bool vertical = false; // stripes along x when false
};

Layout make_layout(std::mt19937_64& rng, int h, int w) {
    auto jitter = [&rng](double lo, double hi) {
        std::uniform_real_distribution<double> d(lo, hi);
        return d(rng);
    };
    Layout L;
    L.r0 = h * jitter(0.03, 0.08);
    L.r1 = h * jitter(0.16, 0.21);
    L.r2 = h * jitter(0.58, 0.64);
    L.r3 = h * jitter(0.88, 0.93);
    L.hair_c0 = w * jitter(0.28, 0.34);
    L.hair_c1 = w * jitter(0.66, 0.72);
    L.top_c0 = w * jitter(0.13, 0.19);
    L.top_c1 = w * jitter(0.81, 0.87);
    L.pants_c0 = w * jitter(0.23, 0.29);
    L.pants_c1 = w * jitter(0.71, 0.77);
    return L;
}

std::array<TextureParams, kNumParts> make_textures(std::mt19937_64& rng, const SceneSpec& spec) {
    std::array<TextureParams, kNumParts> tex;
    std::uniform_real_distribution<double> col(0.08, 0.92);
    std::uniform_real_distribution<double> period(2.5, 6.0);
    std::uniform_real_distribution<double> phase(0.0, 8.0);
    for (int j = 0; j < kNumParts; ++j) {
        TextureParams& t = tex[j];
        t.kind = spec.textures[j];
        // draw every parameter regardless of kind to keep the stream stable
        for (int c = 0; c < 3; ++c)
            t.c1[c] = col(rng);
        // high-contrast counter color so misaligned textures actually cost
        for (int c = 0; c < 3; ++c) {
            col(rng); // keep the stream layout
            t.c2[c] = t.c1[c] < 0.5 ? t.c1[c] + 0.45 : t.c1[c] - 0.45;
        }
        t.period_y = period(rng);
        t.period_x = period(rng);
        t.phase_y = phase(rng);
        t.phase_x = phase(rng);
        t.vertical = (rng() & 1) != 0;
    }
    // keep the background calm so parts stand out
    for (int c = 0; c < 3; ++c)
        tex[0].c2[c] = tex[0].c1[c];
    return tex;
}

double texel(const TextureParams& t, int channel, int y, int x) {
    switch (t.kind) {
    case TextureKind::Solid:
        return t.c1[channel];
    case TextureKind::Stripes: {
        const double u = t.vertical ? (x + t.phase_x) : (y + t.phase_y);
        const double period = t.vertical ? t.period_x : t.period_y;
        const long band = static_cast<long>(std::floor(u / period));
        return (band % 2 == 0) ? t.c1[channel] : t.c2[channel];
    }
    case TextureKind::Checker: {
        const long by = static_cast<long>(std::floor((y + t.phase_y) / t.period_y));
        const long bx = static_cast<long>(std::floor((x + t.phase_x) / t.period_x));
        return ((by + bx) % 2 == 0) ? t.c1[channel] : t.c2[channel];
    }
    }
    return t.c1[channel];
}

Tensor4 raster_parts(const Layout& L, const std::array<TextureParams, kNumParts>& tex,
                     int h, int w) {
    Tensor4 img(1, 3, h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int part = L.part_of(y, x);
            for (int c = 0; c < 3; ++c)
                img.at(0, c, y, x) = texel(tex[part], c, y, x);
        }
    return img;
}

std::vector<int> part_map_source(const Layout& L, int h, int w) {
    std::vector<int> map(static_cast<std::size_t>(h) * w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            map[static_cast<std::size_t>(y) * w + x] = L.part_of(y, x);
    return map;
}

std::vector<int> part_map_target(const Layout& L, const Tensor4& flow, int h, int w) {
    std::vector<int> map(static_cast<std::size_t>(h) * w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double sy = y + flow.at(0, 0, y, x);
            double sx = x + flow.at(0, 1, y, x);
            sy = std::min(std::max(sy, 0.0), static_cast<double>(h - 1));
            sx = std::min(std::max(sx, 0.0), static_cast<double>(w - 1));
            map[static_cast<std::size_t>(y) * w + x] = L.part_of(sy, sx);
        }
    return map;
}

RegionMasks masks_from_map(const std::vector<int>& map, int h, int w) {
    RegionMasks rm;
    for (int j = 0; j < kNumParts; ++j)
        rm.masks[j] = Tensor4(1, 1, h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            rm.masks[map[static_cast<std::size_t>(y) * w + x]].at(0, 0, y, x) = 1.0;
    return rm;
}

Tensor4 skeleton_from_map(const std::vector<int>& map, int h, int w) {
    Tensor4 p(1, 1, h, w);
    auto id = [&](int y, int x) { return map[static_cast<std::size_t>(y) * w + x]; };
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int me = id(y, x);
            const bool edge = (y > 0 && id(y - 1, x) != me) || (y + 1 < h && id(y + 1, x) != me) ||
                              (x > 0 && id(y, x - 1) != me) || (x + 1 < w && id(y, x + 1) != me);
            if (edge)
                p.at(0, 0, y, x) = 1.0;
        }
    return p;
}

} // namespace

const std::array<std::string, kNumParts>& part_labels() {
    static const std::array<std::string, kNumParts> labels = {"background", "top", "pants",
                                                              "hair"};
    return labels;
}

int part_index_by_label(const std::string& label) {
    const auto& labels = part_labels();
    for (int j = 0; j < kNumParts; ++j)
        if (labels[j] == label)
            return j;
    throw config_error("unknown part label '" + label + "'");
}

TextureKind texture_from_name(const std::string& name) {
    if (name == "solid") return TextureKind::Solid;
    if (name == "stripes") return TextureKind::Stripes;
    if (name == "checker") return TextureKind::Checker;
    throw config_error("unknown texture kind '" + name + "' (solid, stripes, checker)");
}

const char* texture_name(TextureKind k) {
    switch (k) {
    case TextureKind::Solid: return "solid";
    case TextureKind::Stripes: return "stripes";
    case TextureKind::Checker: return "checker";
    }
    return "?";
}

const char* motion_name(MotionKind k) {
    switch (k) {
    case MotionKind::Identity: return "identity";
    case MotionKind::Translate: return "translate";
    case MotionKind::Rotate: return "rotate";
    case MotionKind::Affine: return "affine";
    }
    return "?";
}

Motion Motion::identity() { return Motion{}; }

Motion Motion::translate(double dy, double dx) {
    Motion m;
    m.kind = MotionKind::Translate;
    m.dy = dy;
    m.dx = dx;
    return m;
}

Motion Motion::rotate(double theta) {
    Motion m;
    m.kind = MotionKind::Rotate;
    m.theta = theta;
    return m;
}

Motion Motion::affine(double a00, double a01, double a10, double a11, double dy, double dx) {
    Motion m;
    m.kind = MotionKind::Affine;
    m.a00 = a00;
    m.a01 = a01;
    m.a10 = a10;
    m.a11 = a11;
    m.dy = dy;
    m.dx = dx;
    return m;
}

Motion Motion::inverse() const {
    switch (kind) {
    case MotionKind::Identity:
        return identity();
    case MotionKind::Translate:
        return translate(-dy, -dx);
    case MotionKind::Rotate:
        return rotate(-theta);
    case MotionKind::Affine: {
        const double det = a00 * a11 - a01 * a10;
        if (std::fabs(det) < 1e-9)
            throw config_error("Motion::inverse: singular affine, det = " + std::to_string(det));
        const double i00 = a11 / det, i01 = -a01 / det;
        const double i10 = -a10 / det, i11 = a00 / det;
        return affine(i00, i01, i10, i11, -(i00 * dy + i01 * dx), -(i10 * dy + i11 * dx));
    }
    }
    return identity();
}

std::string Motion::describe() const {
    std::ostringstream os;
    os << motion_name(kind);
    switch (kind) {
    case MotionKind::Identity:
        break;
    case MotionKind::Translate:
        os << ":" << dy << "," << dx;
        break;
    case MotionKind::Rotate:
        os << ":" << theta * 180.0 / M_PI;
        break;
    case MotionKind::Affine:
        os << ":" << a00 << "," << a01 << "," << a10 << "," << a11 << "," << dy << "," << dx;
        break;
    }
    return os.str();
}

Tensor4 gen_flow(const Motion& motion, int h, int w) {
    if (h < 1 || w < 1)
        throw dim_error("gen_flow: invalid size " + std::to_string(h) + "x" + std::to_string(w));
    Tensor4 flow(1, 2, h, w);
    const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
    switch (motion.kind) {
    case MotionKind::Identity:
        break;
    case MotionKind::Translate:
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                flow.at(0, 0, y, x) = motion.dy;
                flow.at(0, 1, y, x) = motion.dx;
            }
        break;
    case MotionKind::Rotate: {
        const double c = std::cos(motion.theta), s = std::sin(motion.theta);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double vy = y - cy, vx = x - cx;
                // source offset = R(-theta) * (vy, vx)
                const double sy = vy * c - vx * s;
                const double sx = vx * c + vy * s;
                flow.at(0, 0, y, x) = sy - vy;
                flow.at(0, 1, y, x) = sx - vx;
            }
        break;
    }
    case MotionKind::Affine: {
        const double det = motion.a00 * motion.a11 - motion.a01 * motion.a10;
        if (std::fabs(det) < 1e-9)
            throw config_error("gen_flow: singular affine, det = " + std::to_string(det));
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double vy = y - cy, vx = x - cx;
                const double sy = motion.a00 * vy + motion.a01 * vx + motion.dy;
                const double sx = motion.a10 * vy + motion.a11 * vx + motion.dx;
                flow.at(0, 0, y, x) = sy - vy;
                flow.at(0, 1, y, x) = sx - vx;
            }
        break;
    }
    }
    return flow;
}

Tensor4 derive_occlusion(const Tensor4& flow) {
    if (flow.c() != 2)
        throw dim_error("derive_occlusion: flow must have 2 channels, got " + flow.shape_str());
    const int h = flow.h(), w = flow.w();
    Tensor4 occ(flow.b(), 1, h, w);
    for (int b = 0; b < flow.b(); ++b)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double sy = y + flow.at(b, 0, y, x);
                const double sx = x + flow.at(b, 1, y, x);
                const double dy = std::max({0.0, -sy, sy - (h - 1)});
                const double dx = std::max({0.0, -sx, sx - (w - 1)});
                const double vy = std::max(0.0, 1.0 - dy);
                const double vx = std::max(0.0, 1.0 - dx);
                occ.at(b, 0, y, x) = vy * vx;
            }
    return occ;
}

FlowPyramid flow_pyramid(const Tensor4& flow, const Tensor4& occ, int n_scales) {
    if (n_scales < 1)
        throw dim_error("flow_pyramid: need at least one scale");
    const int div = 1 << (n_scales - 1);
    if (flow.h() % div != 0 || flow.w() % div != 0)
        throw dim_error("flow_pyramid: dims " + flow.shape_str() + " not divisible by " +
                        std::to_string(div));
    FlowPyramid pyr;
    pyr.levels.push_back({flow, occ});
    for (int k = 1; k < n_scales; ++k) {
        const FlowLevel& prev = pyr.levels.back();
        FlowLevel next;
        next.flow = scale(avgpool2x(prev.flow), 0.5);
        next.occ = avgpool2x(prev.occ);
        pyr.levels.push_back(std::move(next));
    }
    return pyr;
}

SynthScene gen_scene(std::uint64_t seed, const SceneSpec& spec) {
    const int div = 1 << (kNumScales - 1);
    if (spec.h < 32 || spec.w < 32 || spec.h % div != 0 || spec.w % div != 0)
        throw config_error("gen_scene: H and W must be >= 32 and divisible by " +
                           std::to_string(div) + ", got " + std::to_string(spec.h) + "x" +
                           std::to_string(spec.w));
    if (spec.motion.kind == MotionKind::Rotate && std::fabs(spec.motion.theta) > kMaxSceneRotation)
        throw config_error("gen_scene: scene rotation exceeds 30 degrees");

    std::mt19937_64 rng(splitmix64(seed));
    const Layout L = make_layout(rng, spec.h, spec.w);
    const auto tex = make_textures(rng, spec);

    SynthScene scene;
    scene.seed = seed;
    scene.spec = spec;
    scene.x_s = raster_parts(L, tex, spec.h, spec.w);
    scene.flow_gt = gen_flow(spec.motion, spec.h, spec.w);
    scene.occ = derive_occlusion(scene.flow_gt);
    scene.x_t = bilinear_sample(scene.x_s, scene.flow_gt);

    const Motion inv = spec.motion.inverse();
    scene.flow_inv = gen_flow(inv, spec.h, spec.w);
    scene.occ_inv = derive_occlusion(scene.flow_inv);

    const std::vector<int> map_s = part_map_source(L, spec.h, spec.w);
    const std::vector<int> map_t = part_map_target(L, scene.flow_gt, spec.h, spec.w);
    scene.masks_s = masks_from_map(map_s, spec.h, spec.w);
    scene.masks_t = masks_from_map(map_t, spec.h, spec.w);
    scene.p_s = skeleton_from_map(map_s, spec.h, spec.w);
    scene.p_t = skeleton_from_map(map_t, spec.h, spec.w);
    return scene;
}

void export_scene(const SynthScene& scene, const std::string& dir) {
    std::filesystem::create_directories(dir);
    const auto path = [&dir](const std::string& name) { return dir + "/" + name; };
    write_ppm(path("x_s.ppm"), scene.x_s);
    write_ppm(path("x_t.ppm"), scene.x_t);
    write_pgm(path("p_s.pgm"), scene.p_s);
    write_pgm(path("p_t.pgm"), scene.p_t);
    write_pgm(path("occ.pgm"), scene.occ);
    write_ppm(path("flow_hsv.ppm"), flow_to_hsv(scene.flow_gt));
    write_pgm(path("flow_dy.pgm"), to_heatmap(scene.flow_gt, 0));
    write_pgm(path("flow_dx.pgm"), to_heatmap(scene.flow_gt, 1));
    for (int j = 0; j < kNumParts; ++j)
        write_pgm(path("mask_" + part_labels()[j] + ".pgm"), scene.masks_s.masks[j]);

    std::ofstream man(path("manifest.txt"));
    man << "seed=" << scene.seed << "\n";
    man << "height=" << scene.spec.h << "\n";
    man << "width=" << scene.spec.w << "\n";
    for (int j = 0; j < kNumParts; ++j)
        man << "texture_" << part_labels()[j] << "=" << texture_name(scene.spec.textures[j])
            << "\n";
    man << "motion=" << scene.spec.motion.describe() << "\n";
    man << "flow_kind=" << motion_name(scene.spec.motion.kind) << "\n";
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    std::uint64_t s = splitmix64(a ^ 0xD1B54A32D192ED03ULL);
    s = splitmix64(s ^ b);
    s = splitmix64(s ^ c);
    return s;
}

} // namespace warpnorm
