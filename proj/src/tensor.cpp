#include "warpnorm/tensor.hpp"

#include <atomic>
#include <cblas.h>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <mutex>
#include <unistd.h>
#include <sstream>
#include <tuple>

#if defined(__ELF__)
extern "C" void openblas_set_num_threads(int) __attribute__((weak));
#endif

namespace warpnorm {

namespace {

std::atomic<bool> g_checked{true};

// Pin BLAS to WARPNORM_THREADS (default 1) before the first gemm so runs
// stay bit-reproducible.
void init_blas_threads() {
    static std::once_flag flag;
    std::call_once(flag, [] {
        const char* t = std::getenv("WARPNORM_THREADS");
        std::string n = (t && *t) ? t : "1";
        setenv("OPENBLAS_NUM_THREADS", n.c_str(), 0);
#if defined(__ELF__)
        if (openblas_set_num_threads) {
            const char* env = std::getenv("OPENBLAS_NUM_THREADS");
            openblas_set_num_threads(env ? std::atoi(env) : std::atoi(n.c_str()));
        }
#endif
    });
}

std::string shape_of(int b, int c, int h, int w) {
    std::ostringstream os;
    os << "(" << b << "," << c << "," << h << "," << w << ")";
    return os.str();
}

void require_nonempty(const Tensor4& t, const char* op) {
    if (t.empty())
        throw dim_error(std::string(op) + ": empty tensor");
}

bool broadcastable(const Tensor4& a, const Tensor4& b) {
    return a.b() == b.b() &&
           (b.c() == a.c() || b.c() == 1) &&
           (b.h() == a.h() || b.h() == 1) &&
           (b.w() == a.w() || b.w() == 1);
}

void require_compatible(const Tensor4& a, const Tensor4& b, const char* op) {
    require_nonempty(a, op);
    require_nonempty(b, op);
    if (!broadcastable(a, b))
        throw dim_error(std::string(op) + ": shape mismatch " + a.shape_str() +
                        " vs " + b.shape_str());
}

template <class F>
Tensor4 binary_op(const Tensor4& a, const Tensor4& b, const char* name, F f) {
    require_compatible(a, b, name);
    Tensor4 out(a.b(), a.c(), a.h(), a.w());
    const std::size_t n = a.size();
    if (a.same_shape(b)) {
        const double* pa = a.data();
        const double* pb = b.data();
        double* po = out.data();
        for (std::size_t i = 0; i < n; ++i)
            po[i] = f(pa[i], pb[i]);
        return out;
    }
    const int plane = a.plane();
    if (b.c() == 1 && b.h() == a.h() && b.w() == a.w()) {
        // channel broadcast (e.g. occlusion and region masks)
        for (int bi = 0; bi < a.b(); ++bi) {
            const double* pb = b.chan(bi, 0);
            for (int ci = 0; ci < a.c(); ++ci) {
                const double* pa = a.chan(bi, ci);
                double* po = out.chan(bi, ci);
                for (int i = 0; i < plane; ++i)
                    po[i] = f(pa[i], pb[i]);
            }
        }
        return out;
    }
    if (b.c() == a.c() && b.h() == 1 && b.w() == 1) {
        // per-channel scalar broadcast (stats, adain vectors)
        for (int bi = 0; bi < a.b(); ++bi)
            for (int ci = 0; ci < a.c(); ++ci) {
                const double s = b.at(bi, ci, 0, 0);
                const double* pa = a.chan(bi, ci);
                double* po = out.chan(bi, ci);
                for (int i = 0; i < plane; ++i)
                    po[i] = f(pa[i], s);
            }
        return out;
    }
    const int bc = b.c() == 1 ? 0 : 1;
    const int bh = b.h() == 1 ? 0 : 1;
    const int bw = b.w() == 1 ? 0 : 1;
    for (int bi = 0; bi < a.b(); ++bi)
        for (int ci = 0; ci < a.c(); ++ci)
            for (int y = 0; y < a.h(); ++y)
                for (int x = 0; x < a.w(); ++x)
                    out.at(bi, ci, y, x) =
                        f(a.at(bi, ci, y, x), b.at(bi, ci * bc, y * bh, x * bw));
    return out;
}

} // namespace

bool checked_mode() { return g_checked.load(std::memory_order_relaxed); }
void set_checked_mode(bool on) { g_checked.store(on, std::memory_order_relaxed); }

void reexec_with_tuned_blas(char** argv) {
#if defined(__x86_64__) && defined(__linux__)
    if (std::getenv("OPENBLAS_CORETYPE") || std::getenv("WARPNORM_NO_BLAS_TUNE"))
        return;
    const char* core = nullptr;
    if (__builtin_cpu_supports("avx512f"))
        core = "SKYLAKEX";
    else if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma"))
        core = "HASWELL";
    if (!core)
        return;
    setenv("OPENBLAS_CORETYPE", core, 1);
    execv("/proc/self/exe", argv); // only returns on failure; run untuned then
#else
    (void)argv;
#endif
}

Tensor4::Tensor4(int b, int c, int h, int w, double fill)
    : b_(b), c_(c), h_(h), w_(w) {
    if (b < 1 || c < 1 || h < 1 || w < 1)
        throw dim_error("Tensor4: all dimensions must be >= 1, got " + shape_of(b, c, h, w));
    data_.assign(static_cast<std::size_t>(b) * c * h * w, fill);
}

Tensor4 Tensor4::from_data(int b, int c, int h, int w, std::vector<double> data) {
    Tensor4 t(b, c, h, w);
    if (data.size() != t.size())
        throw dim_error("Tensor4::from_data: data length " + std::to_string(data.size()) +
                        " != " + std::to_string(t.size()) + " for shape " + shape_of(b, c, h, w));
    t.data_ = std::move(data);
    if (checked_mode())
        t.validate_finite("Tensor4::from_data");
    return t;
}

std::string Tensor4::shape_str() const { return shape_of(b_, c_, h_, w_); }

bool Tensor4::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v))
            return false;
    return true;
}

void Tensor4::validate_finite(const char* what) const {
    for (std::size_t i = 0; i < data_.size(); ++i)
        if (!std::isfinite(data_[i]))
            throw contract_error(std::string(what) + ": non-finite value at flat index " +
                                 std::to_string(i));
}

ConvKernel::ConvKernel(Tensor4 weights, Tensor4 bias, bool use_bias_flag)
    : w(std::move(weights)), b(std::move(bias)), use_bias(use_bias_flag) {
    if (w.h() != 3 || w.w() != 3)
        throw dim_error("ConvKernel: weights must be (C_out, C_in, 3, 3), got " + w.shape_str());
    if (use_bias && (b.b() != 1 || b.c() != w.b() || b.h() != 1 || b.w() != 1))
        throw dim_error("ConvKernel: bias must be (1, C_out, 1, 1), got " + b.shape_str() +
                        " for weights " + w.shape_str());
}

// ---- elementwise ----

Tensor4 add(const Tensor4& a, const Tensor4& b) {
    return binary_op(a, b, "add", [](double x, double y) { return x + y; });
}

Tensor4 sub(const Tensor4& a, const Tensor4& b) {
    return binary_op(a, b, "sub", [](double x, double y) { return x - y; });
}

Tensor4 mul(const Tensor4& a, const Tensor4& b) {
    return binary_op(a, b, "mul", [](double x, double y) { return x * y; });
}

Tensor4 scale(const Tensor4& a, double s) {
    require_nonempty(a, "scale");
    Tensor4 out(a.b(), a.c(), a.h(), a.w());
    for (std::size_t i = 0; i < a.size(); ++i)
        out[i] = a[i] * s;
    return out;
}

Tensor4 relu(const Tensor4& a) {
    require_nonempty(a, "relu");
    Tensor4 out(a.b(), a.c(), a.h(), a.w());
    for (std::size_t i = 0; i < a.size(); ++i)
        out[i] = a[i] > 0.0 ? a[i] : 0.0;
    return out;
}

Tensor4 squash01(const Tensor4& a) {
    require_nonempty(a, "squash01");
    Tensor4 out(a.b(), a.c(), a.h(), a.w());
    for (std::size_t i = 0; i < a.size(); ++i)
        out[i] = 0.5 * (std::tanh(a[i]) + 1.0);
    return out;
}

Tensor4 lerp(const Tensor4& a, const Tensor4& b, const Tensor4& m) {
    require_compatible(a, b, "lerp");
    require_compatible(a, m, "lerp");
    if (!a.same_shape(b))
        throw dim_error("lerp: a " + a.shape_str() + " vs b " + b.shape_str());
    Tensor4 out(a.b(), a.c(), a.h(), a.w());
    const int plane = a.plane();
    if (m.same_shape(a)) {
        for (std::size_t i = 0; i < a.size(); ++i)
            out[i] = a[i] * m[i] + b[i] * (1.0 - m[i]);
        return out;
    }
    if (m.c() == 1 && m.h() == a.h() && m.w() == a.w()) {
        for (int bi = 0; bi < a.b(); ++bi) {
            const double* pm = m.chan(bi, 0);
            for (int ci = 0; ci < a.c(); ++ci) {
                const double* pa = a.chan(bi, ci);
                const double* pb = b.chan(bi, ci);
                double* po = out.chan(bi, ci);
                for (int i = 0; i < plane; ++i)
                    po[i] = pa[i] * pm[i] + pb[i] * (1.0 - pm[i]);
            }
        }
        return out;
    }
    Tensor4 am = mul(a, m);
    Tensor4 bm = binary_op(b, m, "lerp", [](double x, double y) { return x * (1.0 - y); });
    return add(am, bm);
}

Tensor4 reduce_to(const Tensor4& g, const Tensor4& shape_like) {
    if (g.same_shape(shape_like))
        return g;
    if (!broadcastable(g, shape_like))
        throw dim_error("reduce_to: " + g.shape_str() + " cannot reduce to " +
                        shape_like.shape_str());
    Tensor4 out(shape_like.b(), shape_like.c(), shape_like.h(), shape_like.w());
    if (shape_like.c() == 1 && shape_like.h() == g.h() && shape_like.w() == g.w()) {
        for (int bi = 0; bi < g.b(); ++bi) {
            double* po = out.chan(bi, 0);
            for (int ci = 0; ci < g.c(); ++ci) {
                const double* pg = g.chan(bi, ci);
                for (int i = 0; i < g.plane(); ++i)
                    po[i] += pg[i];
            }
        }
        return out;
    }
    if (shape_like.c() == g.c() && shape_like.h() == 1 && shape_like.w() == 1) {
        for (int bi = 0; bi < g.b(); ++bi)
            for (int ci = 0; ci < g.c(); ++ci) {
                const double* pg = g.chan(bi, ci);
                double acc = 0.0;
                for (int i = 0; i < g.plane(); ++i)
                    acc += pg[i];
                out.at(bi, ci, 0, 0) = acc;
            }
        return out;
    }
    const int bc = shape_like.c() == 1 ? 0 : 1;
    const int bh = shape_like.h() == 1 ? 0 : 1;
    const int bw = shape_like.w() == 1 ? 0 : 1;
    for (int bi = 0; bi < g.b(); ++bi)
        for (int ci = 0; ci < g.c(); ++ci)
            for (int y = 0; y < g.h(); ++y)
                for (int x = 0; x < g.w(); ++x)
                    out.at(bi, ci * bc, y * bh, x * bw) += g.at(bi, ci, y, x);
    return out;
}

std::pair<Tensor4, Tensor4> add_vjp(const Tensor4& /*a*/, const Tensor4& b, const Tensor4& g) {
    return {g, reduce_to(g, b)};
}

std::pair<Tensor4, Tensor4> sub_vjp(const Tensor4& /*a*/, const Tensor4& b, const Tensor4& g) {
    return {g, reduce_to(scale(g, -1.0), b)};
}

std::pair<Tensor4, Tensor4> mul_vjp(const Tensor4& a, const Tensor4& b, const Tensor4& g) {
    Tensor4 ga = mul(g, b);
    Tensor4 gb = reduce_to(mul(g, a), b);
    return {ga, gb};
}

Tensor4 scale_vjp(double s, const Tensor4& g) { return scale(g, s); }

Tensor4 relu_vjp(const Tensor4& x, const Tensor4& g) {
    if (!x.same_shape(g))
        throw dim_error("relu_vjp: shape mismatch " + x.shape_str() + " vs " + g.shape_str());
    Tensor4 out(x.b(), x.c(), x.h(), x.w());
    for (std::size_t i = 0; i < x.size(); ++i)
        out[i] = x[i] > 0.0 ? g[i] : 0.0;
    return out;
}

Tensor4 squash01_vjp(const Tensor4& x, const Tensor4& g) {
    if (!x.same_shape(g))
        throw dim_error("squash01_vjp: shape mismatch " + x.shape_str() + " vs " + g.shape_str());
    Tensor4 out(x.b(), x.c(), x.h(), x.w());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double t = std::tanh(x[i]);
        out[i] = g[i] * 0.5 * (1.0 - t * t);
    }
    return out;
}

std::tuple<Tensor4, Tensor4, Tensor4> lerp_vjp(const Tensor4& a, const Tensor4& b,
                                               const Tensor4& m, const Tensor4& g) {
    Tensor4 ga = mul(g, m);
    Tensor4 one_minus = binary_op(g, m, "lerp_vjp", [](double x, double y) { return x * (1.0 - y); });
    Tensor4 gm = reduce_to(mul(g, sub(a, b)), m);
    return {ga, one_minus, gm};
}

// ---- conv2d: im2col + gemm ----

namespace {

// col is (K = C_in*9, N = H*W), row-major.
void im2col(const Tensor4& x, int batch, std::vector<double>& col) {
    const int C = x.c(), H = x.h(), W = x.w();
    const std::size_t N = static_cast<std::size_t>(H) * W;
    col.assign(static_cast<std::size_t>(C) * 9 * N, 0.0);
    for (int ci = 0; ci < C; ++ci) {
        const double* src = x.chan(batch, ci);
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                double* row = col.data() + (static_cast<std::size_t>(ci) * 9 + ky * 3 + kx) * N;
                const int x0 = std::max(0, 1 - kx);
                const int x1 = std::min(W - 1, W - kx); // inclusive
                const int count = x1 - x0 + 1;
                for (int y = 0; y < H; ++y) {
                    const int sy = y + ky - 1;
                    if (sy < 0 || sy >= H || count <= 0)
                        continue; // stays zero
                    std::memcpy(row + static_cast<std::size_t>(y) * W + x0,
                                src + static_cast<std::size_t>(sy) * W + (x0 + kx - 1),
                                static_cast<std::size_t>(count) * sizeof(double));
                }
            }
        }
    }
}

void col2im_add(const std::vector<double>& col, int batch, Tensor4& gx) {
    const int C = gx.c(), H = gx.h(), W = gx.w();
    const std::size_t N = static_cast<std::size_t>(H) * W;
    for (int ci = 0; ci < C; ++ci) {
        double* dst = gx.chan(batch, ci);
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                const double* row = col.data() + (static_cast<std::size_t>(ci) * 9 + ky * 3 + kx) * N;
                const int x0 = std::max(0, 1 - kx);
                const int x1 = std::min(W - 1, W - kx);
                for (int y = 0; y < H; ++y) {
                    const int sy = y + ky - 1;
                    if (sy < 0 || sy >= H)
                        continue;
                    const double* r = row + static_cast<std::size_t>(y) * W;
                    double* d = dst + static_cast<std::size_t>(sy) * W + (kx - 1);
                    for (int xx = x0; xx <= x1; ++xx)
                        d[xx] += r[xx];
                }
            }
        }
    }
}

thread_local std::vector<double> tl_col;

// tap-by-tap accumulation; beats im2col+gemm when C_out is tiny
void conv2d_direct(const Tensor4& x, const ConvKernel& k, Tensor4& out) {
    const int H = x.h(), W = x.w();
    for (int b = 0; b < x.b(); ++b)
        for (int co = 0; co < k.c_out(); ++co) {
            double* o = out.chan(b, co);
            const double bias = k.use_bias ? k.b.at(0, co, 0, 0) : 0.0;
            for (int i = 0; i < H * W; ++i)
                o[i] = bias;
            for (int ci = 0; ci < x.c(); ++ci) {
                const double* src = x.chan(b, ci);
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx) {
                        const double wv = k.w.at(co, ci, ky, kx);
                        if (wv == 0.0)
                            continue;
                        const int x0 = std::max(0, 1 - kx);
                        const int x1 = std::min(W - 1, W - kx);
                        for (int y = 0; y < H; ++y) {
                            const int sy = y + ky - 1;
                            if (sy < 0 || sy >= H)
                                continue;
                            double* orow = o + static_cast<std::size_t>(y) * W;
                            const double* srow =
                                src + static_cast<std::size_t>(sy) * W + (kx - 1);
                            for (int xx = x0; xx <= x1; ++xx)
                                orow[xx] += wv * srow[xx];
                        }
                    }
            }
        }
}

} // namespace

Tensor4 conv2d(const Tensor4& x, const ConvKernel& k) {
    require_nonempty(x, "conv2d");
    if (x.c() != k.c_in())
        throw dim_error("conv2d: input channels " + std::to_string(x.c()) +
                        " != kernel C_in " + std::to_string(k.c_in()) + ", input " +
                        x.shape_str() + ", kernel " + k.w.shape_str());
    init_blas_threads();
    const int B = x.b(), H = x.h(), W = x.w();
    const int Cout = k.c_out(), K = k.c_in() * 9;
    const std::size_t N = static_cast<std::size_t>(H) * W;
    Tensor4 out(B, Cout, H, W);
    if (Cout <= 4) {
        conv2d_direct(x, k, out);
        return out;
    }
    for (int b = 0; b < B; ++b) {
        im2col(x, b, tl_col);
        cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, Cout, static_cast<int>(N), K,
                    1.0, k.w.data(), K, tl_col.data(), static_cast<int>(N), 0.0,
                    out.chan(b, 0), static_cast<int>(N));
        if (k.use_bias) {
            for (int co = 0; co < Cout; ++co) {
                const double bias = k.b.at(0, co, 0, 0);
                double* o = out.chan(b, co);
                for (std::size_t i = 0; i < N; ++i)
                    o[i] += bias;
            }
        }
    }
    return out;
}

Conv2dGrads conv2d_vjp(const Tensor4& x, const ConvKernel& k, const Tensor4& g) {
    if (g.b() != x.b() || g.c() != k.c_out() || g.h() != x.h() || g.w() != x.w())
        throw dim_error("conv2d_vjp: grad shape " + g.shape_str() + " incompatible with input " +
                        x.shape_str() + " and kernel " + k.w.shape_str());
    init_blas_threads();
    const int B = x.b(), H = x.h(), W = x.w();
    const int Cout = k.c_out(), K = k.c_in() * 9;
    const std::size_t N = static_cast<std::size_t>(H) * W;

    Conv2dGrads grads;
    grads.x = Tensor4(x.b(), x.c(), H, W);
    grads.w = Tensor4(k.w.b(), k.w.c(), 3, 3);
    if (k.use_bias)
        grads.b = Tensor4(1, Cout, 1, 1);

    if (Cout <= 4) {
        // direct adjoint, mirroring conv2d_direct's tap loops
        for (int b = 0; b < B; ++b)
            for (int co = 0; co < Cout; ++co) {
                const double* gc = g.chan(b, co);
                if (k.use_bias) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < N; ++i)
                        s += gc[i];
                    grads.b.at(0, co, 0, 0) += s;
                }
                for (int ci = 0; ci < x.c(); ++ci) {
                    const double* src = x.chan(b, ci);
                    double* gx = grads.x.chan(b, ci);
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const double wv = k.w.at(co, ci, ky, kx);
                            double wacc = 0.0;
                            const int x0 = std::max(0, 1 - kx);
                            const int x1 = std::min(W - 1, W - kx);
                            for (int y = 0; y < H; ++y) {
                                const int sy = y + ky - 1;
                                if (sy < 0 || sy >= H)
                                    continue;
                                const double* grow = gc + static_cast<std::size_t>(y) * W;
                                const double* srow =
                                    src + static_cast<std::size_t>(sy) * W + (kx - 1);
                                double* gxrow =
                                    gx + static_cast<std::size_t>(sy) * W + (kx - 1);
                                for (int xx = x0; xx <= x1; ++xx) {
                                    wacc += grow[xx] * srow[xx];
                                    gxrow[xx] += grow[xx] * wv;
                                }
                            }
                            grads.w.at(co, ci, ky, kx) += wacc;
                        }
                }
            }
        return grads;
    }

    std::vector<double> colg(static_cast<std::size_t>(K) * N);
    for (int b = 0; b < B; ++b) {
        im2col(x, b, tl_col);
        // d/dW += g_b * col^T
        cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, Cout, K, static_cast<int>(N),
                    1.0, g.chan(b, 0), static_cast<int>(N), tl_col.data(), static_cast<int>(N),
                    1.0, grads.w.data(), K);
        // d/dx = col2im(W^T * g_b)
        cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, K, static_cast<int>(N), Cout,
                    1.0, k.w.data(), K, g.chan(b, 0), static_cast<int>(N), 0.0,
                    colg.data(), static_cast<int>(N));
        col2im_add(colg, b, grads.x);
        if (k.use_bias) {
            for (int co = 0; co < Cout; ++co) {
                const double* gc = g.chan(b, co);
                double s = 0.0;
                for (std::size_t i = 0; i < N; ++i)
                    s += gc[i];
                grads.b.at(0, co, 0, 0) += s;
            }
        }
    }
    return grads;
}

// ---- resampling ----

Tensor4 upsample_nearest2x(const Tensor4& x) {
    require_nonempty(x, "upsample_nearest2x");
    Tensor4 out(x.b(), x.c(), x.h() * 2, x.w() * 2);
    for (int b = 0; b < x.b(); ++b)
        for (int c = 0; c < x.c(); ++c) {
            const double* src = x.chan(b, c);
            double* dst = out.chan(b, c);
            for (int y = 0; y < x.h(); ++y)
                for (int x2 = 0; x2 < x.w(); ++x2) {
                    const double v = src[y * x.w() + x2];
                    const std::size_t o = static_cast<std::size_t>(2 * y) * out.w() + 2 * x2;
                    dst[o] = v;
                    dst[o + 1] = v;
                    dst[o + out.w()] = v;
                    dst[o + out.w() + 1] = v;
                }
        }
    return out;
}

Tensor4 avgpool2x(const Tensor4& x) {
    require_nonempty(x, "avgpool2x");
    if (x.h() % 2 != 0 || x.w() % 2 != 0)
        throw dim_error("avgpool2x: H and W must be even, got " + x.shape_str());
    Tensor4 out(x.b(), x.c(), x.h() / 2, x.w() / 2);
    for (int b = 0; b < x.b(); ++b)
        for (int c = 0; c < x.c(); ++c) {
            const double* src = x.chan(b, c);
            double* dst = out.chan(b, c);
            for (int y = 0; y < out.h(); ++y)
                for (int x2 = 0; x2 < out.w(); ++x2) {
                    const std::size_t i = static_cast<std::size_t>(2 * y) * x.w() + 2 * x2;
                    dst[y * out.w() + x2] =
                        0.25 * (src[i] + src[i + 1] + src[i + x.w()] + src[i + x.w() + 1]);
                }
        }
    return out;
}

Tensor4 upsample_nearest2x_vjp(const Tensor4& g) {
    if (g.h() % 2 != 0 || g.w() % 2 != 0)
        throw dim_error("upsample_nearest2x_vjp: grad dims must be even, got " + g.shape_str());
    Tensor4 out(g.b(), g.c(), g.h() / 2, g.w() / 2);
    for (int b = 0; b < g.b(); ++b)
        for (int c = 0; c < g.c(); ++c) {
            const double* src = g.chan(b, c);
            double* dst = out.chan(b, c);
            for (int y = 0; y < out.h(); ++y)
                for (int x2 = 0; x2 < out.w(); ++x2) {
                    const std::size_t i = static_cast<std::size_t>(2 * y) * g.w() + 2 * x2;
                    dst[y * out.w() + x2] = src[i] + src[i + 1] + src[i + g.w()] + src[i + g.w() + 1];
                }
        }
    return out;
}

Tensor4 avgpool2x_vjp(const Tensor4& g) {
    Tensor4 out(g.b(), g.c(), g.h() * 2, g.w() * 2);
    for (int b = 0; b < g.b(); ++b)
        for (int c = 0; c < g.c(); ++c) {
            const double* src = g.chan(b, c);
            double* dst = out.chan(b, c);
            for (int y = 0; y < g.h(); ++y)
                for (int x2 = 0; x2 < g.w(); ++x2) {
                    const double v = 0.25 * src[y * g.w() + x2];
                    const std::size_t o = static_cast<std::size_t>(2 * y) * out.w() + 2 * x2;
                    dst[o] = v;
                    dst[o + 1] = v;
                    dst[o + out.w()] = v;
                    dst[o + out.w() + 1] = v;
                }
        }
    return out;
}

// ---- bilinear sampling ----

namespace {

struct Tap {
    int y0, y1, x0, x1;
    double wy, wx;
    bool inside_y, inside_x; // unclamped coordinate within [0, dim-1]
};

inline Tap make_tap(double sy, double sx, int H, int W) {
    Tap t;
    t.inside_y = sy >= 0.0 && sy <= static_cast<double>(H - 1);
    t.inside_x = sx >= 0.0 && sx <= static_cast<double>(W - 1);
    const double cy = std::min(std::max(sy, 0.0), static_cast<double>(H - 1));
    const double cx = std::min(std::max(sx, 0.0), static_cast<double>(W - 1));
    t.y0 = static_cast<int>(std::floor(cy));
    t.x0 = static_cast<int>(std::floor(cx));
    t.wy = cy - t.y0;
    t.wx = cx - t.x0;
    t.y1 = std::min(t.y0 + 1, H - 1);
    t.x1 = std::min(t.x0 + 1, W - 1);
    return t;
}

} // namespace

Tensor4 bilinear_sample(const Tensor4& src, const Tensor4& flow) {
    require_nonempty(src, "bilinear_sample");
    if (flow.c() != 2)
        throw dim_error("bilinear_sample: flow must have 2 channels, got " + flow.shape_str());
    if (flow.b() != src.b() || flow.h() != src.h() || flow.w() != src.w())
        throw dim_error("bilinear_sample: flow " + flow.shape_str() +
                        " does not match source " + src.shape_str());
    const int H = src.h(), W = src.w();
    Tensor4 out(src.b(), src.c(), H, W);
    for (int b = 0; b < src.b(); ++b) {
        const double* fdy = flow.chan(b, 0);
        const double* fdx = flow.chan(b, 1);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const std::size_t i = static_cast<std::size_t>(y) * W + x;
                const Tap t = make_tap(y + fdy[i], x + fdx[i], H, W);
                const double w00 = (1.0 - t.wy) * (1.0 - t.wx);
                const double w01 = (1.0 - t.wy) * t.wx;
                const double w10 = t.wy * (1.0 - t.wx);
                const double w11 = t.wy * t.wx;
                for (int c = 0; c < src.c(); ++c) {
                    const double* s = src.chan(b, c);
                    out.chan(b, c)[i] = w00 * s[t.y0 * W + t.x0] + w01 * s[t.y0 * W + t.x1] +
                                        w10 * s[t.y1 * W + t.x0] + w11 * s[t.y1 * W + t.x1];
                }
            }
    }
    return out;
}

BilinearGrads bilinear_sample_vjp(const Tensor4& src, const Tensor4& flow, const Tensor4& g) {
    if (!g.same_shape(src))
        throw dim_error("bilinear_sample_vjp: grad " + g.shape_str() + " vs source " +
                        src.shape_str());
    if (flow.c() != 2 || flow.b() != src.b() || flow.h() != src.h() || flow.w() != src.w())
        throw dim_error("bilinear_sample_vjp: flow " + flow.shape_str() + " vs source " +
                        src.shape_str());
    const int H = src.h(), W = src.w();
    BilinearGrads grads;
    grads.src = Tensor4(src.b(), src.c(), H, W);
    grads.flow = Tensor4(flow.b(), 2, H, W);
    for (int b = 0; b < src.b(); ++b) {
        const double* fdy = flow.chan(b, 0);
        const double* fdx = flow.chan(b, 1);
        double* gdy = grads.flow.chan(b, 0);
        double* gdx = grads.flow.chan(b, 1);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const std::size_t i = static_cast<std::size_t>(y) * W + x;
                const Tap t = make_tap(y + fdy[i], x + fdx[i], H, W);
                const double w00 = (1.0 - t.wy) * (1.0 - t.wx);
                const double w01 = (1.0 - t.wy) * t.wx;
                const double w10 = t.wy * (1.0 - t.wx);
                const double w11 = t.wy * t.wx;
                double acc_dy = 0.0, acc_dx = 0.0;
                for (int c = 0; c < src.c(); ++c) {
                    const double* s = src.chan(b, c);
                    const double gv = g.chan(b, c)[i];
                    double* gs = grads.src.chan(b, c);
                    gs[t.y0 * W + t.x0] += gv * w00;
                    gs[t.y0 * W + t.x1] += gv * w01;
                    gs[t.y1 * W + t.x0] += gv * w10;
                    gs[t.y1 * W + t.x1] += gv * w11;
                    const double s00 = s[t.y0 * W + t.x0], s01 = s[t.y0 * W + t.x1];
                    const double s10 = s[t.y1 * W + t.x0], s11 = s[t.y1 * W + t.x1];
                    acc_dy += gv * ((1.0 - t.wx) * (s10 - s00) + t.wx * (s11 - s01));
                    acc_dx += gv * ((1.0 - t.wy) * (s01 - s00) + t.wy * (s11 - s10));
                }
                gdy[i] = t.inside_y ? acc_dy : 0.0;
                gdx[i] = t.inside_x ? acc_dx : 0.0;
            }
    }
    return grads;
}

// ---- reductions & misc ----

double sum(const Tensor4& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        s += a[i];
    return s;
}

double mean(const Tensor4& a) {
    require_nonempty(a, "mean");
    return sum(a) / static_cast<double>(a.size());
}

double max_abs(const Tensor4& a) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::fabs(a[i]));
    return m;
}

double max_abs_diff(const Tensor4& a, const Tensor4& b) {
    if (!a.same_shape(b))
        throw dim_error("max_abs_diff: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

Tensor4 concat_channels(const std::vector<Tensor4>& parts) {
    if (parts.empty())
        throw dim_error("concat_channels: no inputs");
    int c_total = 0;
    for (const Tensor4& p : parts) {
        if (p.b() != parts[0].b() || p.h() != parts[0].h() || p.w() != parts[0].w())
            throw dim_error("concat_channels: mismatched shapes " + p.shape_str() + " vs " +
                            parts[0].shape_str());
        c_total += p.c();
    }
    Tensor4 out(parts[0].b(), c_total, parts[0].h(), parts[0].w());
    for (int b = 0; b < out.b(); ++b) {
        int co = 0;
        for (const Tensor4& p : parts)
            for (int c = 0; c < p.c(); ++c, ++co)
                std::memcpy(out.chan(b, co), p.chan(b, c),
                            static_cast<std::size_t>(p.plane()) * sizeof(double));
    }
    return out;
}

Tensor4 slice_channels(const Tensor4& x, int c0, int c1) {
    if (c0 < 0 || c1 > x.c() || c0 >= c1)
        throw dim_error("slice_channels: range [" + std::to_string(c0) + "," +
                        std::to_string(c1) + ") invalid for " + x.shape_str());
    Tensor4 out(x.b(), c1 - c0, x.h(), x.w());
    for (int b = 0; b < x.b(); ++b)
        for (int c = c0; c < c1; ++c)
            std::memcpy(out.chan(b, c - c0), x.chan(b, c),
                        static_cast<std::size_t>(x.plane()) * sizeof(double));
    return out;
}

Tensor4 concat_batch(const std::vector<Tensor4>& items) {
    if (items.empty())
        throw dim_error("concat_batch: no inputs");
    int b_total = 0;
    for (const Tensor4& t : items) {
        if (t.c() != items[0].c() || t.h() != items[0].h() || t.w() != items[0].w())
            throw dim_error("concat_batch: mismatched shapes " + t.shape_str() + " vs " +
                            items[0].shape_str());
        b_total += t.b();
    }
    Tensor4 out(b_total, items[0].c(), items[0].h(), items[0].w());
    std::size_t off = 0;
    for (const Tensor4& t : items) {
        std::memcpy(out.data() + off, t.data(), t.size() * sizeof(double));
        off += t.size();
    }
    return out;
}

} // namespace warpnorm
