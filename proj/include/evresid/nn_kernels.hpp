#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>

#include "evresid/tensor.hpp"

// Raw compute kernels shared by the autodiff layer (double) and the
// 32-bit inference path. All loops are written so that every output
// element is reduced in a fixed order; results are bitwise reproducible.

namespace evresid::kernels {

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const T av = a[i * k + p];
            if (av == T(0)) continue;
            const T* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] += A^T[m,k] * B[k,n]  with A stored as [k,m]
template <typename T>
void gemm_at_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t p = 0; p < k; ++p) {
        const T* arow = a + p * m;
        const T* brow = b + p * n;
        for (int64_t i = 0; i < m; ++i) {
            const T av = arow[i];
            if (av == T(0)) continue;
            T* crow = c + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] += A[m,k] * B^T[k,n]  with B stored as [n,k]. The transpose is
// materialized so the accumulation runs on the contiguous fast path.
template <typename T>
void gemm_bt_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    std::vector<T> bt(size_t(k) * size_t(n));
    for (int64_t j = 0; j < n; ++j)
        for (int64_t p = 0; p < k; ++p) bt[size_t(p * n + j)] = b[j * k + p];
    gemm_acc(a, bt.data(), c, m, k, n);
}

inline int64_t conv_out_dim(int64_t in, int64_t k, int64_t stride, int64_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

enum class PadMode { kZero, kReplicate };

// im2col: input (C,H,W) -> cols (C*kh*kw, Ho*Wo)
template <typename T>
void im2col(const T* in, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, PadMode mode, T* cols) {
    const int64_t Ho = conv_out_dim(H, kh, stride, pad);
    const int64_t Wo = conv_out_dim(W, kw, stride, pad);
    const int64_t plane = Ho * Wo;
    const bool rep = mode == PadMode::kReplicate;
    for (int64_t c = 0; c < C; ++c) {
        for (int64_t ky = 0; ky < kh; ++ky) {
            for (int64_t kx = 0; kx < kw; ++kx) {
                T* dst = cols + ((c * kh + ky) * kw + kx) * plane;
                for (int64_t oy = 0; oy < Ho; ++oy) {
                    int64_t iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) {
                        if (!rep) {
                            for (int64_t ox = 0; ox < Wo; ++ox) dst[oy * Wo + ox] = T(0);
                            continue;
                        }
                        iy = std::clamp<int64_t>(iy, 0, H - 1);
                    }
                    const T* src = in + (c * H + iy) * W;
                    for (int64_t ox = 0; ox < Wo; ++ox) {
                        int64_t ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= W) {
                            if (!rep) {
                                dst[oy * Wo + ox] = T(0);
                                continue;
                            }
                            ix = std::clamp<int64_t>(ix, 0, W - 1);
                        }
                        dst[oy * Wo + ox] = src[ix];
                    }
                }
            }
        }
    }
}

// col2im: accumulate cols (C*kh*kw, Ho*Wo) back into input gradient (C,H,W)
template <typename T>
void col2im_acc(const T* cols, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                int64_t stride, int64_t pad, PadMode mode, T* grad_in) {
    const int64_t Ho = conv_out_dim(H, kh, stride, pad);
    const int64_t Wo = conv_out_dim(W, kw, stride, pad);
    const int64_t plane = Ho * Wo;
    const bool rep = mode == PadMode::kReplicate;
    for (int64_t c = 0; c < C; ++c) {
        for (int64_t ky = 0; ky < kh; ++ky) {
            for (int64_t kx = 0; kx < kw; ++kx) {
                const T* src = cols + ((c * kh + ky) * kw + kx) * plane;
                for (int64_t oy = 0; oy < Ho; ++oy) {
                    int64_t iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) {
                        if (!rep) continue;
                        iy = std::clamp<int64_t>(iy, 0, H - 1);
                    }
                    T* dst = grad_in + (c * H + iy) * W;
                    for (int64_t ox = 0; ox < Wo; ++ox) {
                        int64_t ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= W) {
                            if (!rep) continue;
                            ix = std::clamp<int64_t>(ix, 0, W - 1);
                        }
                        dst[ix] += src[oy * Wo + ox];
                    }
                }
            }
        }
    }
}

// forward conv: out (Cout,Ho,Wo) = weight (Cout,Cin,kh,kw) * input + bias
template <typename T>
TensorT<T> conv2d_forward(const TensorT<T>& in, const TensorT<T>& weight, const TensorT<T>& bias,
                          int64_t stride, int64_t pad, PadMode mode = PadMode::kZero,
                          TensorT<T>* cols_out = nullptr) {
    const int64_t C = in.shape()[0], H = in.shape()[1], W = in.shape()[2];
    const int64_t Cout = weight.shape()[0], Cin = weight.shape()[1];
    const int64_t kh = weight.shape()[2], kw = weight.shape()[3];
    if (Cin != C) throw std::runtime_error("conv2d: channel mismatch");
    const int64_t Ho = conv_out_dim(H, kh, stride, pad);
    const int64_t Wo = conv_out_dim(W, kw, stride, pad);
    TensorT<T> cols(Shape{C * kh * kw, Ho * Wo});
    im2col(in.data(), C, H, W, kh, kw, stride, pad, mode, cols.data());
    TensorT<T> out(Shape{Cout, Ho, Wo});
    for (int64_t co = 0; co < Cout; ++co) {
        T* plane = out.data() + co * Ho * Wo;
        const T bv = bias.numel() ? bias[co] : T(0);
        for (int64_t i = 0; i < Ho * Wo; ++i) plane[i] = bv;
    }
    gemm_acc(weight.data(), cols.data(), out.data(), Cout, C * kh * kw, Ho * Wo);
    if (cols_out) *cols_out = std::move(cols);
    return out;
}

// Bilinear sample of field (C,H,W) at coords (2,Hq,Wq); channel 0 of coords
// is x, channel 1 is y, in pixel units of the field. Border clamp.
template <typename T>
TensorT<T> bilinear_sample_forward(const TensorT<T>& field, const TensorT<T>& coords) {
    const int64_t C = field.shape()[0], H = field.shape()[1], W = field.shape()[2];
    const int64_t Hq = coords.shape()[1], Wq = coords.shape()[2];
    const int64_t q = Hq * Wq;
    TensorT<T> out(Shape{C, Hq, Wq});
    for (int64_t i = 0; i < q; ++i) {
        T x = coords[i];
        T y = coords[q + i];
        x = std::min(std::max(x, T(0)), T(W - 1));
        y = std::min(std::max(y, T(0)), T(H - 1));
        const int64_t x0 = std::min(int64_t(x), W - 2 >= 0 ? W - 2 : 0);
        const int64_t y0 = std::min(int64_t(y), H - 2 >= 0 ? H - 2 : 0);
        const T fx = x - T(x0);
        const T fy = y - T(y0);
        const int64_t x1 = std::min(x0 + 1, W - 1);
        const int64_t y1 = std::min(y0 + 1, H - 1);
        const T w00 = (T(1) - fx) * (T(1) - fy), w01 = fx * (T(1) - fy);
        const T w10 = (T(1) - fx) * fy, w11 = fx * fy;
        for (int64_t c = 0; c < C; ++c) {
            const T* p = field.data() + c * H * W;
            out[c * q + i] = w00 * p[y0 * W + x0] + w01 * p[y0 * W + x1] +
                             w10 * p[y1 * W + x0] + w11 * p[y1 * W + x1];
        }
    }
    return out;
}

// align_corners=false bilinear upsample by integer factor s
template <typename T>
TensorT<T> upsample_bilinear_forward(const TensorT<T>& in, int64_t s) {
    const int64_t C = in.shape()[0], h = in.shape()[1], w = in.shape()[2];
    const int64_t H = h * s, W = w * s;
    TensorT<T> out(Shape{C, H, W});
    for (int64_t oy = 0; oy < H; ++oy) {
        T sy = (T(oy) + T(0.5)) / T(s) - T(0.5);
        sy = std::min(std::max(sy, T(0)), T(h - 1));
        const int64_t y0 = std::min(int64_t(sy), h - 2 >= 0 ? h - 2 : 0);
        const int64_t y1 = std::min(y0 + 1, h - 1);
        const T fy = sy - T(y0);
        for (int64_t ox = 0; ox < W; ++ox) {
            T sx = (T(ox) + T(0.5)) / T(s) - T(0.5);
            sx = std::min(std::max(sx, T(0)), T(w - 1));
            const int64_t x0 = std::min(int64_t(sx), w - 2 >= 0 ? w - 2 : 0);
            const int64_t x1 = std::min(x0 + 1, w - 1);
            const T fx = sx - T(x0);
            for (int64_t c = 0; c < C; ++c) {
                const T* p = in.data() + c * h * w;
                out[(c * H + oy) * W + ox] =
                    (T(1) - fy) * ((T(1) - fx) * p[y0 * w + x0] + fx * p[y0 * w + x1]) +
                    fy * ((T(1) - fx) * p[y1 * w + x0] + fx * p[y1 * w + x1]);
            }
        }
    }
    return out;
}

// 2x average pooling over the last two dims (for cost-volume pyramids)
template <typename T>
TensorT<T> avg_pool2_forward(const TensorT<T>& in) {
    const int64_t C = in.shape()[0], H = in.shape()[1], W = in.shape()[2];
    const int64_t Ho = H / 2, Wo = W / 2;
    TensorT<T> out(Shape{C, Ho, Wo});
    for (int64_t c = 0; c < C; ++c) {
        const T* p = in.data() + c * H * W;
        T* o = out.data() + c * Ho * Wo;
        for (int64_t y = 0; y < Ho; ++y)
            for (int64_t x = 0; x < Wo; ++x)
                o[y * Wo + x] = (p[(2 * y) * W + 2 * x] + p[(2 * y) * W + 2 * x + 1] +
                                 p[(2 * y + 1) * W + 2 * x] + p[(2 * y + 1) * W + 2 * x + 1]) *
                                T(0.25);
    }
    return out;
}

} // namespace evresid::kernels
