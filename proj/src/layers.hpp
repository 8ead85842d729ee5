#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>

#include "rng.hpp"
#include "tensor.hpp"

// Network kernels may contract mul+add into FMA; nothing here feeds the wave
// solver's bit-reproducible forward/adjoint recomputation, which relies on
// the global -ffp-contract=off.
#pragma GCC push_options
#pragma GCC optimize("fp-contract=fast")

namespace pinv {

// Layer vocabulary for the encoder/decoder stacks: 3x3 convolutions with
// "same" zero padding, a channel-changing 3x3 convolution, SiLU, per-channel
// batch normalization, 2x average pooling / nearest upsampling, an affine map,
// and the residual block y = x - h*K1(silu(norm(K2 x))).
// TimePool4/TimeInterp4 are fixed (non-learned) linear resamplers along the
// last axis used to bridge the recorded time axis and the network time axis.
enum class LayerKind {
    Conv3x3,
    ConvCC,
    SiLU,
    Norm,
    AvgPool2,
    Upsample2,
    Affine,
    ResnetBlock,
    TimePool4,
    TimeInterp4,
    Flatten,
    Reshape,
};

inline const char* kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::Conv3x3: return "conv3x3";
        case LayerKind::ConvCC: return "conv_cc";
        case LayerKind::SiLU: return "silu";
        case LayerKind::Norm: return "norm";
        case LayerKind::AvgPool2: return "avgpool2";
        case LayerKind::Upsample2: return "upsample2";
        case LayerKind::Affine: return "affine";
        case LayerKind::ResnetBlock: return "resnet_block";
        case LayerKind::TimePool4: return "time_pool4";
        case LayerKind::TimeInterp4: return "time_interp4";
        case LayerKind::Flatten: return "flatten";
        case LayerKind::Reshape: return "reshape";
    }
    return "?";
}

inline LayerKind kind_from_name(const std::string& s) {
    for (LayerKind k :
         {LayerKind::Conv3x3, LayerKind::ConvCC, LayerKind::SiLU, LayerKind::Norm,
          LayerKind::AvgPool2, LayerKind::Upsample2, LayerKind::Affine, LayerKind::ResnetBlock,
          LayerKind::TimePool4, LayerKind::TimeInterp4, LayerKind::Flatten, LayerKind::Reshape})
        if (s == kind_name(k)) return k;
    throw FormatError("unknown layer kind '" + s + "'");
}

template <class T>
struct Layer {
    LayerKind kind;
    int cin = 0, cout = 0;       // conv / affine dims; norm feature count in cin
    int rh = 0, rw = 0;          // reshape target H,W (channels in cout)
    T h = T(0.5);                // resnet step size

    // Parameters. w1/b1: conv_cc, conv3x3, affine, resnet K1. w2/b2: resnet K2.
    // gamma/beta + running stats: norm (stand-alone or inside the resnet block).
    Tensor<T> w1, b1, w2, b2, gamma, beta;
    Tensor<T> run_mean, run_var;

    // Gradients, shape-matching the parameters above.
    Tensor<T> gw1, gb1, gw2, gb2, ggamma, gbeta;
};

// Everything backward needs from one forward call in train mode.
template <class T>
struct LayerCache {
    bool train = false;
    Tensor<T> x;
    // norm internals (also the resnet inner norm)
    Tensor<T> xhat;
    std::vector<double> invstd;
    // resnet intermediates
    Tensor<T> conv2_out, norm_out, silu_out;
    Tensor<T> norm_xhat;
    std::vector<double> norm_invstd;
    Shape in_shape;  // flatten
};

namespace detail {

constexpr double kNormEps = 1e-5;
constexpr double kNormMomentum = 0.9;

// Branch-free polynomial 2^f exponential for the float activation path.
// ~2e-7 relative error; auto-vectorizes, unlike a libm call. The double
// path below stays on std::exp so 64-bit gradient checks see full precision.
inline float fast_expf(float x) {
    const float t = x * 1.442695040888963f;
    // Round to nearest via the 1.5*2^23 trick; valid for |t| < 2^22, larger
    // magnitudes fall into the saturating masks below.
    const float n = (t + 12582912.0f) - 12582912.0f;
    const float f = t - n;
    float p = 1.5403530e-4f;
    p = p * f + 1.3333558e-3f;
    p = p * f + 9.6181291e-3f;
    p = p * f + 5.5504109e-2f;
    p = p * f + 2.4022651e-1f;
    p = p * f + 6.9314718e-1f;
    p = p * f + 1.0f;
    // Saturate exponent under/overflow with integer masks only: float
    // compares, selects, and libm floor/fmin all defeat the vectorizer.
    std::int32_t ei = static_cast<std::int32_t>(n) + 127;
    const std::int32_t neg = std::bit_cast<std::int32_t>(t) >> 31;
    const std::int32_t lo = 254 + (neg & -253);  // 1 when t < 0, else 254
    const std::int32_t m_lo = -static_cast<std::int32_t>(ei < 1);
    const std::int32_t m_hi = -static_cast<std::int32_t>(ei > 254);
    const std::int32_t m = m_lo | m_hi;
    ei = (ei & ~m_lo) | (lo & m_lo);
    ei = (ei & ~m_hi) | (254 & m_hi);
    std::int32_t pb = std::bit_cast<std::int32_t>(p);
    pb = (pb & ~m) | (0x3f800000 & m);
    return std::bit_cast<float>(pb) *
           std::bit_cast<float>(static_cast<std::uint32_t>(ei) << 23);
}

template <class T>
inline T sigmoid_of(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

inline float sigmoid_of(float x) { return 1.0f / (1.0f + fast_expf(-x)); }

template <class T>
inline T silu_val(T x) {
    return x * sigmoid_of(x);
}

template <class T>
inline T silu_grad(T x) {
    T s = sigmoid_of(x);
    return s * (T(1) + x * (T(1) - s));
}

// Widest row the direct kernel handles on its stack accumulator.
constexpr std::size_t kConvRowMax = 512;

// How the direct conv kernel commits a finished row: plain store, accumulate
// y += a*s, write y = res + a*s (residual-block tail, skipping the copy), or
// y = silu(s*scale + shift) (the residual block's normalization folded in).
enum class ConvStore { kSet, kAdd, kResid, kScaleSilu };

// Direct 3x3 convolution for compile-time channel counts. All C*9 taps of OB
// output channels are unrolled into one register-resident pass per row, so
// each loaded input vector feeds OB accumulators instead of being re-read per
// output. Edge rows borrow a zero row to keep the inner loop branch-free, and
// rows accumulate on local buffers the vectorizer knows cannot alias the
// inputs (runtime alias checks between y and the 3*C source rows blow the
// versioning budget otherwise). Handles output channels [o0, o0+OB); res is
// read only in kResid mode and must match y's shape.
template <class T, int C, int OB, ConvStore Mode>
void conv3x3_rows_cn(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, T a,
                     const Tensor<T>* res, const T* sc, const T* sh, Tensor<T>& y,
                     std::size_t o0) {
    const std::size_t N = x.shape[0], H = x.shape[2], W = x.shape[3];
    const std::vector<T> zero(W, T(0));
    T acc[OB][kConvRowMax];
    T wl[OB][C][3][3];
    T bo[OB], scl[OB], shl[OB];
    for (int o = 0; o < OB; ++o) {
        bo[o] = bias[o0 + o];
        scl[o] = Mode == ConvStore::kScaleSilu ? sc[o0 + o] : T(0);
        shl[o] = Mode == ConvStore::kScaleSilu ? sh[o0 + o] : T(0);
        for (int c = 0; c < C; ++c)
            for (int k = 0; k < 9; ++k)
                wl[o][c][k / 3][k % 3] = w.data[((o0 + o) * C + c) * 9 + k];
    }
    auto store = [a](T* yr, const T* rr, std::size_t ww, T s, T sco, T sho) {
        if constexpr (Mode == ConvStore::kAdd)
            yr[ww] += a * s;
        else if constexpr (Mode == ConvStore::kResid)
            yr[ww] = rr[ww] + a * s;
        else if constexpr (Mode == ConvStore::kScaleSilu)
            yr[ww] = silu_val(s * sco + sho);
        else
            yr[ww] = s;
    };
    for (std::size_t n = 0; n < N; ++n) {
        T* yr[OB];
        const T* rr[OB];
        for (int o = 0; o < OB; ++o) {
            yr[o] = &y.at4(n, o0 + o, 0, 0);
            rr[o] = Mode == ConvStore::kResid ? &res->at4(n, o0 + o, 0, 0) : nullptr;
        }
        for (std::size_t hh = 0; hh < H; ++hh) {
            const T* xr[C][3];
            for (int c = 0; c < C; ++c)
                for (int kh = 0; kh < 3; ++kh) {
                    const long hs = static_cast<long>(hh) + kh - 1;
                    xr[c][kh] = (hs < 0 || hs >= static_cast<long>(H))
                                    ? zero.data()
                                    : &x.at4(n, c, static_cast<std::size_t>(hs), 0);
                }
            if (W == 1) {
                for (int o = 0; o < OB; ++o) {
                    T s = bo[o];
                    for (int c = 0; c < C; ++c)
                        for (int kh = 0; kh < 3; ++kh) s += wl[o][c][kh][1] * xr[c][kh][0];
                    store(yr[o], rr[o], 0, s, scl[o], shl[o]);
                    yr[o] += W;
                    if (Mode == ConvStore::kResid) rr[o] += W;
                }
                continue;
            }
            for (int o = 0; o < OB; ++o) {
                T s0 = bo[o];
                for (int c = 0; c < C; ++c)
                    for (int kh = 0; kh < 3; ++kh)
                        s0 += wl[o][c][kh][1] * xr[c][kh][0] + wl[o][c][kh][2] * xr[c][kh][1];
                acc[o][0] = s0;
            }
            for (std::size_t ww = 1; ww + 1 < W; ++ww)
                for (int o = 0; o < OB; ++o) {
                    T s = bo[o];
                    for (int c = 0; c < C; ++c)
                        for (int kh = 0; kh < 3; ++kh) {
                            const T* r = xr[c][kh];
                            s += wl[o][c][kh][0] * r[ww - 1] + wl[o][c][kh][1] * r[ww] +
                                 wl[o][c][kh][2] * r[ww + 1];
                        }
                    acc[o][ww] = s;
                }
            for (int o = 0; o < OB; ++o) {
                T s1 = bo[o];
                for (int c = 0; c < C; ++c)
                    for (int kh = 0; kh < 3; ++kh)
                        s1 += wl[o][c][kh][0] * xr[c][kh][W - 2] +
                              wl[o][c][kh][1] * xr[c][kh][W - 1];
                acc[o][W - 1] = s1;
            }
            for (int o = 0; o < OB; ++o) {
                for (std::size_t ww = 0; ww < W; ++ww)
                    store(yr[o], rr[o], ww, acc[o][ww], scl[o], shl[o]);
                yr[o] += W;
                if (Mode == ConvStore::kResid) rr[o] += W;
            }
        }
    }
}

template <class T, int C, ConvStore Mode>
void conv3x3_fwd_cn(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, T a,
                    const Tensor<T>* res, const T* sc, const T* sh, Tensor<T>& y) {
    const std::size_t O = w.shape[0];
    std::size_t o = 0;
    for (; o + 2 <= O; o += 2) conv3x3_rows_cn<T, C, 2, Mode>(x, w, bias, a, res, sc, sh, y, o);
    for (; o < O; ++o) conv3x3_rows_cn<T, C, 1, Mode>(x, w, bias, a, res, sc, sh, y, o);
}

template <class T, ConvStore Mode>
bool conv3x3_dispatch_cn(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, T a,
                         const Tensor<T>* res, const T* sc, const T* sh, Tensor<T>& y) {
    if (x.shape[3] > kConvRowMax) return false;
    switch (x.shape[1]) {
        case 1: conv3x3_fwd_cn<T, 1, Mode>(x, w, bias, a, res, sc, sh, y); return true;
        case 2: conv3x3_fwd_cn<T, 2, Mode>(x, w, bias, a, res, sc, sh, y); return true;
        case 4: conv3x3_fwd_cn<T, 4, Mode>(x, w, bias, a, res, sc, sh, y); return true;
        default: return false;  // wider inputs: the unroll spills, row-fused wins
    }
}

// y = conv3x3_same(x, w) + bias, x:[N,C,H,W], w:[O,C,3,3], y:[N,O,H,W].
// Row-fused: all three horizontal taps of a kernel row are applied in one
// pass so the inner loop does 6 flops per element and vectorizes well.
template <class T>
void conv3x3_fwd(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, Tensor<T>& y) {
    const std::size_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    const std::size_t O = w.shape[0];
    y = Tensor<T>::uninit({N, O, H, W});
    if (conv3x3_dispatch_cn<T, ConvStore::kSet>(x, w, bias, T(0), nullptr, nullptr, nullptr,
                                                y))
        return;
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o) {
            const T bo = bias[o];
            for (std::size_t hh = 0; hh < H; ++hh) {
                T* yr = &y.at4(n, o, hh, 0);
                for (std::size_t ww = 0; ww < W; ++ww) yr[ww] = bo;
                for (std::size_t c = 0; c < C; ++c) {
                    const T* wk = &w.data[(o * C + c) * 9];
                    for (int kh = -1; kh <= 1; ++kh) {
                        const long hs = static_cast<long>(hh) + kh;
                        if (hs < 0 || hs >= static_cast<long>(H)) continue;
                        const T* xr = &x.at4(n, c, static_cast<std::size_t>(hs), 0);
                        const T w0 = wk[(kh + 1) * 3 + 0];
                        const T w1 = wk[(kh + 1) * 3 + 1];
                        const T w2 = wk[(kh + 1) * 3 + 2];
                        if (W == 1) {
                            yr[0] += w1 * xr[0];
                            continue;
                        }
                        yr[0] += w1 * xr[0] + w2 * xr[1];
                        for (std::size_t ww = 1; ww + 1 < W; ++ww)
                            yr[ww] += w0 * xr[ww - 1] + w1 * xr[ww] + w2 * xr[ww + 1];
                        yr[W - 1] += w0 * xr[W - 2] + w1 * xr[W - 1];
                    }
                }
            }
        }
}

// y += a * (conv3x3_same(x, w) + bias); shapes as in conv3x3_fwd. Used by the
// cache-free residual-block path to fold the K1 conv and the residual update
// into one pass.
template <class T>
void conv3x3_fwd_scaled_add(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, T a,
                            Tensor<T>& y) {
    const std::size_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    const std::size_t O = w.shape[0];
    if (conv3x3_dispatch_cn<T, ConvStore::kAdd>(x, w, bias, a, nullptr, nullptr, nullptr, y))
        return;
    std::vector<T> row(W);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o) {
            const T bo = bias[o];
            for (std::size_t hh = 0; hh < H; ++hh) {
                T* rr = row.data();
                for (std::size_t ww = 0; ww < W; ++ww) rr[ww] = bo;
                for (std::size_t c = 0; c < C; ++c) {
                    const T* wk = &w.data[(o * C + c) * 9];
                    for (int kh = -1; kh <= 1; ++kh) {
                        const long hs = static_cast<long>(hh) + kh;
                        if (hs < 0 || hs >= static_cast<long>(H)) continue;
                        const T* xr = &x.at4(n, c, static_cast<std::size_t>(hs), 0);
                        const T w0 = wk[(kh + 1) * 3 + 0];
                        const T w1 = wk[(kh + 1) * 3 + 1];
                        const T w2 = wk[(kh + 1) * 3 + 2];
                        if (W == 1) {
                            rr[0] += w1 * xr[0];
                            continue;
                        }
                        rr[0] += w1 * xr[0] + w2 * xr[1];
                        for (std::size_t ww = 1; ww + 1 < W; ++ww)
                            rr[ww] += w0 * xr[ww - 1] + w1 * xr[ww] + w2 * xr[ww + 1];
                        rr[W - 1] += w0 * xr[W - 2] + w1 * xr[W - 1];
                    }
                }
                T* yr = &y.at4(n, o, hh, 0);
                for (std::size_t ww = 0; ww < W; ++ww) yr[ww] += a * rr[ww];
            }
        }
}

// y = res + a * (conv3x3_same(x, w) + bias); the cache-free residual block
// uses this to emit its output without first copying res into y.
template <class T>
void conv3x3_fwd_resid(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, T a,
                       const Tensor<T>& res, Tensor<T>& y) {
    const std::size_t N = x.shape[0], H = x.shape[2], W = x.shape[3];
    const std::size_t O = w.shape[0];
    y = Tensor<T>::uninit({N, O, H, W});
    if (conv3x3_dispatch_cn<T, ConvStore::kResid>(x, w, bias, a, &res, nullptr, nullptr, y))
        return;
    y = res;
    conv3x3_fwd_scaled_add(x, w, bias, a, y);
}

// y = silu((conv3x3_same(x, w) + bias) * sc[o] + sh[o]); the cache-free
// residual block folds its running-stats normalization and activation into
// the K2 conv this way. Returns false when no direct kernel fits; the caller
// then runs the unfused sequence.
template <class T>
bool conv3x3_fwd_scale_silu(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                            const T* sc, const T* sh, Tensor<T>& y) {
    const std::size_t N = x.shape[0], H = x.shape[2], W = x.shape[3];
    const std::size_t O = w.shape[0];
    y = Tensor<T>::uninit({N, O, H, W});
    return conv3x3_dispatch_cn<T, ConvStore::kScaleSilu>(x, w, bias, T(0), nullptr, sc, sh, y);
}

// Accumulates gx, gw, gb for the conv above. gx may be null.
template <class T>
void conv3x3_bwd(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gy, Tensor<T>* gx,
                 Tensor<T>& gw, Tensor<T>& gb) {
    const std::size_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    const std::size_t O = w.shape[0];
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o) {
            const T* gyp = &gy.at4(n, o, 0, 0);
            double gbo = 0;
            for (std::size_t i = 0; i < H * W; ++i) gbo += static_cast<double>(gyp[i]);
            gb[o] += static_cast<T>(gbo);
            for (std::size_t c = 0; c < C; ++c) {
                const T* wk = &w.data[(o * C + c) * 9];
                T* gwk = &gw.data[(o * C + c) * 9];
                for (int kh = -1; kh <= 1; ++kh)
                    for (int kw = -1; kw <= 1; ++kw) {
                        const T wv = wk[(kh + 1) * 3 + (kw + 1)];
                        double gwv = 0;
                        for (std::size_t hh = 0; hh < H; ++hh) {
                            const long hs = static_cast<long>(hh) + kh;
                            if (hs < 0 || hs >= static_cast<long>(H)) continue;
                            const T* xr = &x.at4(n, c, static_cast<std::size_t>(hs), 0);
                            const T* gyr = gyp + hh * W;
                            const std::size_t wlo = kw < 0 ? 1 : 0;
                            const std::size_t whi = kw > 0 ? W - 1 : W;
                            if (gx) {
                                T* gxr = &gx->at4(n, c, static_cast<std::size_t>(hs), 0);
                                for (std::size_t ww = wlo; ww < whi; ++ww) {
                                    gwv += static_cast<double>(xr[ww + kw]) *
                                           static_cast<double>(gyr[ww]);
                                    gxr[ww + kw] += wv * gyr[ww];
                                }
                            } else {
                                for (std::size_t ww = wlo; ww < whi; ++ww)
                                    gwv += static_cast<double>(xr[ww + kw]) *
                                           static_cast<double>(gyr[ww]);
                            }
                        }
                        gwk[(kh + 1) * 3 + (kw + 1)] += static_cast<T>(gwv);
                    }
            }
        }
}

// Per-channel (4-d input) or per-feature (2-d input) batch normalization.
// Returns y; fills cache xhat/invstd; updates running stats in train mode.
template <class T>
Tensor<T> norm_fwd(const Tensor<T>& x, Tensor<T>& gamma, Tensor<T>& beta, Tensor<T>& run_mean,
                   Tensor<T>& run_var, bool train, Tensor<T>& xhat_out,
                   std::vector<double>& invstd_out) {
    const bool is4d = x.shape.size() == 4;
    const std::size_t C = is4d ? x.shape[1] : x.shape[1];
    const std::size_t N = x.shape[0];
    const std::size_t S = is4d ? x.shape[2] * x.shape[3] : 1;  // per-sample spatial
    const std::size_t m = N * S;
    Tensor<T> y(x.shape);
    xhat_out = Tensor<T>(x.shape);
    invstd_out.assign(C, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
        double mean, var;
        if (train) {
            double s = 0, s2 = 0;
            for (std::size_t n = 0; n < N; ++n) {
                const T* xp = is4d ? &x.at4(n, c, 0, 0) : &x.at2(n, c);
                for (std::size_t i = 0; i < S; ++i) {
                    double v = xp[i];
                    s += v;
                    s2 += v * v;
                }
            }
            mean = s / m;
            var = s2 / m - mean * mean;
            if (var < 0) var = 0;
            run_mean[c] = static_cast<T>(kNormMomentum * run_mean[c] + (1 - kNormMomentum) * mean);
            run_var[c] = static_cast<T>(kNormMomentum * run_var[c] + (1 - kNormMomentum) * var);
        } else {
            mean = run_mean[c];
            var = run_var[c];
        }
        const double inv = 1.0 / std::sqrt(var + kNormEps);
        invstd_out[c] = inv;
        const T g = gamma[c], b = beta[c];
        for (std::size_t n = 0; n < N; ++n) {
            const T* xp = is4d ? &x.at4(n, c, 0, 0) : &x.at2(n, c);
            T* yp = is4d ? &y.at4(n, c, 0, 0) : &y.at2(n, c);
            T* hp = is4d ? &xhat_out.at4(n, c, 0, 0) : &xhat_out.at2(n, c);
            for (std::size_t i = 0; i < S; ++i) {
                T xh = static_cast<T>((xp[i] - mean) * inv);
                hp[i] = xh;
                yp[i] = g * xh + b;
            }
        }
    }
    return y;
}

template <class T>
Tensor<T> norm_bwd(const Tensor<T>& xhat, const std::vector<double>& invstd,
                   const Tensor<T>& gamma, const Tensor<T>& gy, Tensor<T>& ggamma,
                   Tensor<T>& gbeta) {
    const bool is4d = gy.shape.size() == 4;
    const std::size_t C = gy.shape[1];
    const std::size_t N = gy.shape[0];
    const std::size_t S = is4d ? gy.shape[2] * gy.shape[3] : 1;
    const double m = static_cast<double>(N * S);
    Tensor<T> gx(gy.shape);
    for (std::size_t c = 0; c < C; ++c) {
        double sum_dy = 0, sum_dy_xh = 0;
        for (std::size_t n = 0; n < N; ++n) {
            const T* gyp = is4d ? &gy.at4(n, c, 0, 0) : &gy.at2(n, c);
            const T* hp = is4d ? &xhat.at4(n, c, 0, 0) : &xhat.at2(n, c);
            for (std::size_t i = 0; i < S; ++i) {
                sum_dy += gyp[i];
                sum_dy_xh += static_cast<double>(gyp[i]) * hp[i];
            }
        }
        ggamma[c] += static_cast<T>(sum_dy_xh);
        gbeta[c] += static_cast<T>(sum_dy);
        const double g = gamma[c], inv = invstd[c];
        for (std::size_t n = 0; n < N; ++n) {
            const T* gyp = is4d ? &gy.at4(n, c, 0, 0) : &gy.at2(n, c);
            const T* hp = is4d ? &xhat.at4(n, c, 0, 0) : &xhat.at2(n, c);
            T* gxp = is4d ? &gx.at4(n, c, 0, 0) : &gx.at2(n, c);
            for (std::size_t i = 0; i < S; ++i)
                gxp[i] = static_cast<T>(g * inv / m *
                                        (m * gyp[i] - sum_dy - hp[i] * sum_dy_xh));
        }
    }
    return gx;
}

}  // namespace detail

// ---- layer factories -------------------------------------------------------

template <class T>
Layer<T> make_conv3x3(int c) {
    Layer<T> L;
    L.kind = LayerKind::Conv3x3;
    L.cin = L.cout = c;
    L.w1 = Tensor<T>({(std::size_t)c, (std::size_t)c, 3, 3});
    L.b1 = Tensor<T>({(std::size_t)c});
    return L;
}

template <class T>
Layer<T> make_conv_cc(int cin, int cout) {
    Layer<T> L;
    L.kind = LayerKind::ConvCC;
    L.cin = cin;
    L.cout = cout;
    L.w1 = Tensor<T>({(std::size_t)cout, (std::size_t)cin, 3, 3});
    L.b1 = Tensor<T>({(std::size_t)cout});
    return L;
}

template <class T>
Layer<T> make_silu() {
    Layer<T> L;
    L.kind = LayerKind::SiLU;
    return L;
}

template <class T>
Layer<T> make_norm(int features) {
    Layer<T> L;
    L.kind = LayerKind::Norm;
    L.cin = L.cout = features;
    L.gamma = Tensor<T>({(std::size_t)features}, T(1));
    L.beta = Tensor<T>({(std::size_t)features});
    L.run_mean = Tensor<T>({(std::size_t)features});
    L.run_var = Tensor<T>({(std::size_t)features}, T(1));
    return L;
}

template <class T>
Layer<T> make_avgpool2() {
    Layer<T> L;
    L.kind = LayerKind::AvgPool2;
    return L;
}

template <class T>
Layer<T> make_upsample2() {
    Layer<T> L;
    L.kind = LayerKind::Upsample2;
    return L;
}

template <class T>
Layer<T> make_affine(int fin, int fout) {
    Layer<T> L;
    L.kind = LayerKind::Affine;
    L.cin = fin;
    L.cout = fout;
    L.w1 = Tensor<T>({(std::size_t)fout, (std::size_t)fin});
    L.b1 = Tensor<T>({(std::size_t)fout});
    return L;
}

template <class T>
Layer<T> make_resnet_block(int c, T h) {
    Layer<T> L;
    L.kind = LayerKind::ResnetBlock;
    L.cin = L.cout = c;
    L.h = h;
    L.w1 = Tensor<T>({(std::size_t)c, (std::size_t)c, 3, 3});  // K1
    L.b1 = Tensor<T>({(std::size_t)c});
    L.w2 = Tensor<T>({(std::size_t)c, (std::size_t)c, 3, 3});  // K2
    L.b2 = Tensor<T>({(std::size_t)c});
    L.gamma = Tensor<T>({(std::size_t)c}, T(1));
    L.beta = Tensor<T>({(std::size_t)c});
    L.run_mean = Tensor<T>({(std::size_t)c});
    L.run_var = Tensor<T>({(std::size_t)c}, T(1));
    return L;
}

template <class T>
Layer<T> make_time_pool4() {
    Layer<T> L;
    L.kind = LayerKind::TimePool4;
    return L;
}

template <class T>
Layer<T> make_time_interp4() {
    Layer<T> L;
    L.kind = LayerKind::TimeInterp4;
    return L;
}

template <class T>
Layer<T> make_flatten() {
    Layer<T> L;
    L.kind = LayerKind::Flatten;
    return L;
}

template <class T>
Layer<T> make_reshape(int c, int h, int w) {
    Layer<T> L;
    L.kind = LayerKind::Reshape;
    L.cout = c;
    L.rh = h;
    L.rw = w;
    return L;
}

// Visit learnable parameters (and their gradient buffers) in a fixed order.
template <class T, class Fn>
void visit_params(Layer<T>& L, Fn&& fn) {
    auto touch = [&](Tensor<T>& p, Tensor<T>& g) {
        if (p.size() == 0) return;
        if (g.size() != p.size()) g = Tensor<T>(p.shape);
        fn(p, g);
    };
    touch(L.w1, L.gw1);
    touch(L.b1, L.gb1);
    touch(L.w2, L.gw2);
    touch(L.b2, L.gb2);
    touch(L.gamma, L.ggamma);
    touch(L.beta, L.gbeta);
}

template <class T>
void init_layer(Layer<T>& L, Rng& rng) {
    auto uniform_init = [&](Tensor<T>& w, std::size_t fan_in) {
        const double a = std::sqrt(1.0 / static_cast<double>(fan_in));
        for (auto& v : w.data) v = static_cast<T>(rng.uniform(-a, a));
    };
    switch (L.kind) {
        case LayerKind::Conv3x3:
        case LayerKind::ConvCC:
            uniform_init(L.w1, static_cast<std::size_t>(L.cin) * 9);
            break;
        case LayerKind::Affine:
            uniform_init(L.w1, static_cast<std::size_t>(L.cin));
            break;
        case LayerKind::ResnetBlock:
            uniform_init(L.w1, static_cast<std::size_t>(L.cin) * 9);
            uniform_init(L.w2, static_cast<std::size_t>(L.cin) * 9);
            break;
        default:
            break;
    }
}

// ---- forward / backward ----------------------------------------------------

template <class T>
Tensor<T> layer_forward(Layer<T>& L, const Tensor<T>& x, bool train, LayerCache<T>* cache) {
    using namespace detail;
    if (cache) {
        cache->train = train;
        cache->x = x;
    }
    Tensor<T> y;
    switch (L.kind) {
        case LayerKind::Conv3x3:
        case LayerKind::ConvCC: {
            if (x.shape.size() != 4 || x.shape[1] != static_cast<std::size_t>(L.cin))
                throw ContractError(std::string(kind_name(L.kind)) + ": input channels " +
                                    shape_str(x.shape) + " do not match cin=" +
                                    std::to_string(L.cin));
            conv3x3_fwd(x, L.w1, L.b1, y);
            break;
        }
        case LayerKind::SiLU: {
            y = Tensor<T>::uninit(x.shape);
            const T* xp = x.data.data();
            T* yp = y.data.data();
            for (std::size_t i = 0; i < x.size(); ++i) yp[i] = silu_val(xp[i]);
            break;
        }
        case LayerKind::Norm: {
            if (x.shape[1] != static_cast<std::size_t>(L.cin))
                throw ContractError("norm: feature count mismatch");
            LayerCache<T> tmp;
            LayerCache<T>& c = cache ? *cache : tmp;
            y = norm_fwd(x, L.gamma, L.beta, L.run_mean, L.run_var, train, c.xhat, c.invstd);
            break;
        }
        case LayerKind::AvgPool2: {
            const std::size_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
            if (H % 2 || W % 2)
                throw ContractError("avgpool2: spatial extents must be even, got " +
                                    shape_str(x.shape));
            y = Tensor<T>::uninit({N, C, H / 2, W / 2});
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t hh = 0; hh < H / 2; ++hh)
                        for (std::size_t ww = 0; ww < W / 2; ++ww)
                            y.at4(n, c, hh, ww) =
                                static_cast<T>(0.25) *
                                (x.at4(n, c, 2 * hh, 2 * ww) + x.at4(n, c, 2 * hh, 2 * ww + 1) +
                                 x.at4(n, c, 2 * hh + 1, 2 * ww) +
                                 x.at4(n, c, 2 * hh + 1, 2 * ww + 1));
            break;
        }
        case LayerKind::Upsample2: {
            const std::size_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
            y = Tensor<T>::uninit({N, C, 2 * H, 2 * W});
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t hh = 0; hh < H; ++hh) {
                        const T* xr = &x.at4(n, c, hh, 0);
                        T* y0 = &y.at4(n, c, 2 * hh, 0);
                        for (std::size_t ww = 0; ww < W; ++ww) {
                            y0[2 * ww] = xr[ww];
                            y0[2 * ww + 1] = xr[ww];
                        }
                        std::copy(y0, y0 + 2 * W, y0 + 2 * W);
                    }
            break;
        }
        case LayerKind::Affine: {
            if (x.shape.size() != 2 || x.shape[1] != static_cast<std::size_t>(L.cin))
                throw ContractError("affine: expected [N," + std::to_string(L.cin) + "], got " +
                                    shape_str(x.shape));
            const std::size_t N = x.shape[0], Fi = L.cin, Fo = L.cout;
            y = Tensor<T>::uninit({N, Fo});
            // Output-blocked so a small set of weight rows stays cache-hot
            // across the whole batch instead of re-streaming the matrix per
            // sample. Eight explicit partial sums per dot: fixed association
            // keeps the result deterministic while letting the loop vectorize.
            constexpr std::size_t kBo = 4;
            for (std::size_t ob = 0; ob < Fo; ob += kBo) {
                const std::size_t oe = std::min(Fo, ob + kBo);
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t o = ob; o < oe; ++o) {
                        const T* wr = &L.w1.data[o * Fi];
                        const T* xr = &x.at2(n, 0);
                        T tot;
                        if (Fi >= 256) {
                            // Long dots: 32 partials hide the FMA latency.
                            T s[32] = {};
                            std::size_t i = 0;
                            for (; i + 32 <= Fi; i += 32)
                                for (std::size_t k = 0; k < 32; ++k) s[k] += wr[i + k] * xr[i + k];
                            for (; i < Fi; ++i) s[i % 32] += wr[i] * xr[i];
                            tot = T(0);
                            for (std::size_t k = 0; k < 32; ++k) tot += s[k];
                        } else {
                            // Short dots: a smaller reduction tail wins.
                            T s[8] = {};
                            std::size_t i = 0;
                            for (; i + 8 <= Fi; i += 8)
                                for (std::size_t k = 0; k < 8; ++k) s[k] += wr[i + k] * xr[i + k];
                            for (; i < Fi; ++i) s[i % 8] += wr[i] * xr[i];
                            tot = ((s[0] + s[1]) + (s[2] + s[3])) + ((s[4] + s[5]) + (s[6] + s[7]));
                        }
                        y.at2(n, o) = tot + L.b1[o];
                    }
            }
            break;
        }
        case LayerKind::ResnetBlock: {
            if (x.shape[1] != static_cast<std::size_t>(L.cin))
                throw ContractError("resnet_block: channel mismatch");
            if (!cache && !train) {
                // Cache-free inference: norm (running stats) and silu fold
                // into the K2 conv's store pass, K1 into the residual update.
                const std::size_t C = x.shape[1];
                std::vector<T> scale(C), shift(C);
                for (std::size_t c = 0; c < C; ++c) {
                    const T inv = static_cast<T>(
                        1.0 / std::sqrt(static_cast<double>(L.run_var[c]) + kNormEps));
                    scale[c] = L.gamma[c] * inv;
                    shift[c] = L.beta[c] - L.run_mean[c] * scale[c];
                }
                Tensor<T> t;
                if (!conv3x3_fwd_scale_silu(x, L.w2, L.b2, scale.data(), shift.data(), t)) {
                    conv3x3_fwd(x, L.w2, L.b2, t);
                    const std::size_t S = t.shape[2] * t.shape[3];
                    for (std::size_t n = 0; n < t.shape[0]; ++n)
                        for (std::size_t c = 0; c < C; ++c) {
                            T* tp = &t.at4(n, c, 0, 0);
                            for (std::size_t i = 0; i < S; ++i)
                                tp[i] = silu_val(tp[i] * scale[c] + shift[c]);
                        }
                }
                conv3x3_fwd_resid(t, L.w1, L.b1, -L.h, x, y);
                break;
            }
            LayerCache<T> tmp;
            LayerCache<T>& c = cache ? *cache : tmp;
            conv3x3_fwd(x, L.w2, L.b2, c.conv2_out);
            c.norm_out = norm_fwd(c.conv2_out, L.gamma, L.beta, L.run_mean, L.run_var, train,
                                  c.norm_xhat, c.norm_invstd);
            c.silu_out = Tensor<T>(c.norm_out.shape);
            const T* np = c.norm_out.data.data();
            T* sp = c.silu_out.data.data();
            for (std::size_t i = 0; i < c.norm_out.size(); ++i) sp[i] = silu_val(np[i]);
            Tensor<T> k1;
            conv3x3_fwd(c.silu_out, L.w1, L.b1, k1);
            y = x;
            for (std::size_t i = 0; i < y.size(); ++i) y[i] -= L.h * k1[i];
            break;
        }
        case LayerKind::TimePool4: {
            const std::size_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
            if (W % 4) throw ContractError("time_pool4: time extent must be divisible by 4");
            y = Tensor<T>::uninit({N, C, H, W / 4});
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t hh = 0; hh < H; ++hh) {
                        const T* xr = &x.at4(n, c, hh, 0);
                        T* yr = &y.at4(n, c, hh, 0);
                        for (std::size_t ww = 0; ww < W / 4; ++ww)
                            yr[ww] = static_cast<T>(0.25) * (xr[4 * ww] + xr[4 * ww + 1] +
                                                             xr[4 * ww + 2] + xr[4 * ww + 3]);
                    }
            break;
        }
        case LayerKind::TimeInterp4: {
            const std::size_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
            const std::size_t Wo = 4 * W;
            y = Tensor<T>({N, C, H, Wo});
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t hh = 0; hh < H; ++hh) {
                        const T* xr = &x.at4(n, c, hh, 0);
                        T* yr = &y.at4(n, c, hh, 0);
                        for (std::size_t j = 0; j < Wo; ++j) {
                            double p = (j + 0.5) / 4.0 - 0.5;
                            long i0 = static_cast<long>(std::floor(p));
                            double f = p - i0;
                            long i1 = i0 + 1;
                            if (i0 < 0) i0 = 0;
                            if (i1 > static_cast<long>(W) - 1) i1 = W - 1;
                            yr[j] = static_cast<T>((1 - f) * xr[i0] + f * xr[i1]);
                        }
                    }
            break;
        }
        case LayerKind::Flatten: {
            if (cache) cache->in_shape = x.shape;
            y = x;
            y.shape = {x.shape[0], x.size() / x.shape[0]};
            break;
        }
        case LayerKind::Reshape: {
            const std::size_t N = x.shape[0];
            if (x.size() / N !=
                static_cast<std::size_t>(L.cout) * static_cast<std::size_t>(L.rh) *
                    static_cast<std::size_t>(L.rw))
                throw ContractError("reshape: element count mismatch");
            y = x;
            y.shape = {N, (std::size_t)L.cout, (std::size_t)L.rh, (std::size_t)L.rw};
            break;
        }
    }
    if (!y.all_finite())
        throw NumericError(std::string(kind_name(L.kind)) + ": non-finite output");
    return y;
}

template <class T>
Tensor<T> layer_backward_impl(Layer<T>& L, const LayerCache<T>& cache, const Tensor<T>& gy,
                              bool linearized) {
    using namespace detail;
    visit_params(L, [](Tensor<T>&, Tensor<T>&) {});  // ensure grad buffers exist
    // Diagonal normalization backward: valid when stats are held fixed
    // (infer mode), where the layer is an affine map per feature.
    auto norm_bwd_fixed = [](const std::vector<double>& invstd, const Tensor<T>& gamma,
                             const Tensor<T>& gyv) {
        const bool is4d = gyv.shape.size() == 4;
        const std::size_t C = gyv.shape[1], N = gyv.shape[0];
        const std::size_t S = is4d ? gyv.shape[2] * gyv.shape[3] : 1;
        Tensor<T> gx(gyv.shape);
        for (std::size_t c = 0; c < C; ++c) {
            const double a = static_cast<double>(gamma[c]) * invstd[c];
            for (std::size_t n = 0; n < N; ++n) {
                const T* gp = is4d ? &gyv.at4(n, c, 0, 0) : &gyv.at2(n, c);
                T* xp = is4d ? &gx.at4(n, c, 0, 0) : &gx.at2(n, c);
                for (std::size_t i = 0; i < S; ++i) xp[i] = static_cast<T>(a * gp[i]);
            }
        }
        return gx;
    };
    switch (L.kind) {
        case LayerKind::Conv3x3:
        case LayerKind::ConvCC: {
            Tensor<T> gx(cache.x.shape);
            conv3x3_bwd(cache.x, L.w1, gy, &gx, L.gw1, L.gb1);
            return gx;
        }
        case LayerKind::SiLU: {
            Tensor<T> gx(cache.x.shape);
            const T* xp = cache.x.data.data();
            const T* gp = gy.data.data();
            T* op = gx.data.data();
            for (std::size_t i = 0; i < gx.size(); ++i) op[i] = gp[i] * silu_grad(xp[i]);
            return gx;
        }
        case LayerKind::Norm:
            if (linearized) return norm_bwd_fixed(cache.invstd, L.gamma, gy);
            return norm_bwd(cache.xhat, cache.invstd, L.gamma, gy, L.ggamma, L.gbeta);
        case LayerKind::AvgPool2: {
            const auto& s = cache.x.shape;
            Tensor<T> gx(s);
            for (std::size_t n = 0; n < s[0]; ++n)
                for (std::size_t c = 0; c < s[1]; ++c)
                    for (std::size_t hh = 0; hh < s[2]; ++hh)
                        for (std::size_t ww = 0; ww < s[3]; ++ww)
                            gx.at4(n, c, hh, ww) =
                                static_cast<T>(0.25) * gy.at4(n, c, hh / 2, ww / 2);
            return gx;
        }
        case LayerKind::Upsample2: {
            const auto& s = cache.x.shape;
            Tensor<T> gx(s);
            for (std::size_t n = 0; n < s[0]; ++n)
                for (std::size_t c = 0; c < s[1]; ++c)
                    for (std::size_t hh = 0; hh < 2 * s[2]; ++hh)
                        for (std::size_t ww = 0; ww < 2 * s[3]; ++ww)
                            gx.at4(n, c, hh / 2, ww / 2) += gy.at4(n, c, hh, ww);
            return gx;
        }
        case LayerKind::Affine: {
            const std::size_t N = cache.x.shape[0], Fi = L.cin, Fo = L.cout;
            Tensor<T> gx(cache.x.shape);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t o = 0; o < Fo; ++o) {
                    const T g = gy.at2(n, o);
                    L.gb1[o] += g;
                    T* gwr = &L.gw1.data[o * Fi];
                    const T* xr = &cache.x.at2(n, 0);
                    T* gxr = &gx.at2(n, 0);
                    const T* wr = &L.w1.data[o * Fi];
                    for (std::size_t i = 0; i < Fi; ++i) {
                        gwr[i] += g * xr[i];
                        gxr[i] += g * wr[i];
                    }
                }
            return gx;
        }
        case LayerKind::ResnetBlock: {
            // y = x - h * K1(silu(norm(K2 x)))
            Tensor<T> g_k1out(gy.shape);
            for (std::size_t i = 0; i < gy.size(); ++i) g_k1out[i] = -L.h * gy[i];
            Tensor<T> g_silu(cache.silu_out.shape);
            conv3x3_bwd(cache.silu_out, L.w1, g_k1out, &g_silu, L.gw1, L.gb1);
            Tensor<T> g_norm(cache.norm_out.shape);
            const T* np = cache.norm_out.data.data();
            const T* gp = g_silu.data.data();
            T* op = g_norm.data.data();
            for (std::size_t i = 0; i < g_norm.size(); ++i) op[i] = gp[i] * silu_grad(np[i]);
            Tensor<T> g_conv2 =
                linearized
                    ? norm_bwd_fixed(cache.norm_invstd, L.gamma, g_norm)
                    : norm_bwd(cache.norm_xhat, cache.norm_invstd, L.gamma, g_norm, L.ggamma,
                               L.gbeta);
            Tensor<T> gx(cache.x.shape);
            conv3x3_bwd(cache.x, L.w2, g_conv2, &gx, L.gw2, L.gb2);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
            return gx;
        }
        case LayerKind::TimePool4: {
            const auto& s = cache.x.shape;
            Tensor<T> gx(s);
            for (std::size_t n = 0; n < s[0]; ++n)
                for (std::size_t c = 0; c < s[1]; ++c)
                    for (std::size_t hh = 0; hh < s[2]; ++hh) {
                        T* gxr = &gx.at4(n, c, hh, 0);
                        const T* gyr = &gy.at4(n, c, hh, 0);
                        for (std::size_t ww = 0; ww < s[3] / 4; ++ww)
                            for (int k = 0; k < 4; ++k)
                                gxr[4 * ww + k] = static_cast<T>(0.25) * gyr[ww];
                    }
            return gx;
        }
        case LayerKind::TimeInterp4: {
            const auto& s = cache.x.shape;
            const std::size_t W = s[3], Wo = 4 * W;
            Tensor<T> gx(s);
            for (std::size_t n = 0; n < s[0]; ++n)
                for (std::size_t c = 0; c < s[1]; ++c)
                    for (std::size_t hh = 0; hh < s[2]; ++hh) {
                        T* gxr = &gx.at4(n, c, hh, 0);
                        const T* gyr = &gy.at4(n, c, hh, 0);
                        for (std::size_t j = 0; j < Wo; ++j) {
                            double p = (j + 0.5) / 4.0 - 0.5;
                            long i0 = static_cast<long>(std::floor(p));
                            double f = p - i0;
                            long i1 = i0 + 1;
                            if (i0 < 0) i0 = 0;
                            if (i1 > static_cast<long>(W) - 1) i1 = W - 1;
                            gxr[i0] += static_cast<T>((1 - f) * gyr[j]);
                            gxr[i1] += static_cast<T>(f * gyr[j]);
                        }
                    }
            return gx;
        }
        case LayerKind::Flatten: {
            Tensor<T> gx = gy;
            gx.shape = cache.in_shape;
            return gx;
        }
        case LayerKind::Reshape: {
            Tensor<T> gx = gy;
            gx.shape = cache.x.shape;
            return gx;
        }
    }
    throw ContractError("layer_backward: unreachable");
}

// Standard backward; requires a train-mode cache.
template <class T>
Tensor<T> layer_backward(Layer<T>& L, const LayerCache<T>& cache, const Tensor<T>& gy) {
    if (!cache.train) throw ContractError("layer_backward: cache was produced in infer mode");
    return layer_backward_impl(L, cache, gy, false);
}

// Backward through the layer linearized at fixed normalization statistics.
// Accepts infer-mode caches; used when differentiating a trained decoder.
template <class T>
Tensor<T> layer_backward_linearized(Layer<T>& L, const LayerCache<T>& cache, const Tensor<T>& gy) {
    return layer_backward_impl(L, cache, gy, true);
}

}  // namespace pinv

#pragma GCC pop_options
