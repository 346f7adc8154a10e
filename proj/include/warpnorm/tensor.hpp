#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "warpnorm/errors.hpp"

namespace warpnorm {

// When enabled (the default), constructors and contract-sensitive ops
// validate their inputs (finite values, mask ranges, binary regions).
bool checked_mode();
void set_checked_mode(bool on);

// OpenBLAS picks its kernels from CPU detection that fails on VMs hiding the
// CPU model, silently falling back to a ~5x slower generic kernel. Call this
// first thing in main(): it re-executes the process once with
// OPENBLAS_CORETYPE matched to the actual ISA. No-op when the variable is
// already set (or WARPNORM_NO_BLAS_TUNE is set).
void reexec_with_tuned_blas(char** argv);

// Dense rank-4 array in (batch, channel, height, width) order, row-major,
// double precision. The carrier for activations, images and parameter maps.
class Tensor4 {
public:
    Tensor4() = default;

    Tensor4(int b, int c, int h, int w, double fill = 0.0);

    // Takes ownership of `data`; length must be b*c*h*w. Rejects non-finite
    // values in checked mode.
    static Tensor4 from_data(int b, int c, int h, int w, std::vector<double> data);

    int b() const { return b_; }
    int c() const { return c_; }
    int h() const { return h_; }
    int w() const { return w_; }

    bool empty() const { return data_.empty(); }
    std::size_t size() const { return data_.size(); }
    int plane() const { return h_ * w_; }

    bool same_shape(const Tensor4& o) const {
        return b_ == o.b_ && c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
    }
    std::string shape_str() const;

    double& at(int b, int c, int y, int x) {
        return data_[index(b, c, y, x)];
    }
    double at(int b, int c, int y, int x) const {
        return data_[index(b, c, y, x)];
    }
    std::size_t index(int b, int c, int y, int x) const {
        return ((static_cast<std::size_t>(b) * c_ + c) * h_ + y) * w_ + x;
    }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double* chan(int b, int c) { return data_.data() + (static_cast<std::size_t>(b) * c_ + c) * plane(); }
    const double* chan(int b, int c) const { return data_.data() + (static_cast<std::size_t>(b) * c_ + c) * plane(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // Throws contract_error on non-finite values.
    void validate_finite(const char* what = "tensor") const;

    bool all_finite() const;

private:
    int b_ = 0, c_ = 0, h_ = 0, w_ = 0;
    std::vector<double> data_;
};

// 3x3 convolution weights (C_out, C_in, 3, 3) plus per-output-channel bias.
// Style-encoder branches run bias-free so masked-out parts stay exactly zero.
struct ConvKernel {
    Tensor4 w;                 // (C_out, C_in, 3, 3)
    Tensor4 b;                 // (1, C_out, 1, 1)
    bool use_bias = true;

    ConvKernel() = default;
    ConvKernel(Tensor4 weights, Tensor4 bias, bool use_bias_flag = true);

    int c_out() const { return w.b(); }
    int c_in() const { return w.c(); }
};

// ---- elementwise ops (shapes equal, or b broadcastable over a: each of
// C/H/W of b either matches a or is 1; batch must match) ----

Tensor4 add(const Tensor4& a, const Tensor4& b);
Tensor4 sub(const Tensor4& a, const Tensor4& b);
Tensor4 mul(const Tensor4& a, const Tensor4& b);
Tensor4 scale(const Tensor4& a, double s);
Tensor4 relu(const Tensor4& a);
Tensor4 squash01(const Tensor4& a); // 0.5*(tanh(x)+1), range (0,1)
// a*m + b*(1-m); m broadcastable like any rhs operand
Tensor4 lerp(const Tensor4& a, const Tensor4& b, const Tensor4& m);

// Sum-reduce g over the dimensions where `shape_like` has extent 1 so the
// result matches the broadcast operand. Used by the elementwise adjoints.
Tensor4 reduce_to(const Tensor4& g, const Tensor4& shape_like);

// ---- structural ops ----

// 3x3, stride 1, zero padding 1; output (B, C_out, H, W).
Tensor4 conv2d(const Tensor4& x, const ConvKernel& k);

Tensor4 upsample_nearest2x(const Tensor4& x);
Tensor4 avgpool2x(const Tensor4& x); // requires even H and W

// Bilinear warp; flow (B,2,H,W): channel 0 = dy, channel 1 = dx, in pixels.
// Source reads are clamped to the image border.
Tensor4 bilinear_sample(const Tensor4& src, const Tensor4& flow);

// ---- adjoints ----

std::pair<Tensor4, Tensor4> add_vjp(const Tensor4& a, const Tensor4& b, const Tensor4& g);
std::pair<Tensor4, Tensor4> sub_vjp(const Tensor4& a, const Tensor4& b, const Tensor4& g);
std::pair<Tensor4, Tensor4> mul_vjp(const Tensor4& a, const Tensor4& b, const Tensor4& g);
Tensor4 scale_vjp(double s, const Tensor4& g);
Tensor4 relu_vjp(const Tensor4& x, const Tensor4& g);
Tensor4 squash01_vjp(const Tensor4& x, const Tensor4& g);
// gradients w.r.t. (a, b, m)
std::tuple<Tensor4, Tensor4, Tensor4> lerp_vjp(const Tensor4& a, const Tensor4& b,
                                               const Tensor4& m, const Tensor4& g);

struct Conv2dGrads {
    Tensor4 x; // (B, C_in, H, W)
    Tensor4 w; // (C_out, C_in, 3, 3)
    Tensor4 b; // (1, C_out, 1, 1); empty when the kernel is bias-free
};
Conv2dGrads conv2d_vjp(const Tensor4& x, const ConvKernel& k, const Tensor4& g);

Tensor4 upsample_nearest2x_vjp(const Tensor4& g); // sums each 2x2 block
Tensor4 avgpool2x_vjp(const Tensor4& g);          // spreads g/4

struct BilinearGrads {
    Tensor4 src;  // (B, C, H, W)
    Tensor4 flow; // (B, 2, H, W)
};
// Sub-gradient convention: floor-based interpolation weights at integer
// coordinates; zero w.r.t. flow where the unclamped coordinate leaves the
// frame.
BilinearGrads bilinear_sample_vjp(const Tensor4& src, const Tensor4& flow, const Tensor4& g);

// ---- reductions & misc helpers ----

double sum(const Tensor4& a);
double mean(const Tensor4& a);
double max_abs(const Tensor4& a);
double max_abs_diff(const Tensor4& a, const Tensor4& b);
Tensor4 concat_channels(const std::vector<Tensor4>& parts);
Tensor4 slice_channels(const Tensor4& x, int c0, int c1); // [c0, c1)
Tensor4 concat_batch(const std::vector<Tensor4>& items);

} // namespace warpnorm
