#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

// Raw-pointer compute kernels, templated on the scalar type. The float tape
// ops and the double-precision test oracles instantiate the same code, so a
// gradient check compares two runs of one kernel body at different precision,
// not two independent implementations of the math. Exception: the conv
// kernels carry explicit 8-lane float overloads (the training hot path) that
// compute the same sums as the scalar template in a different fixed
// association; the tests cross-check the two paths against each other.
//
// Conventions:
//  - image tensors are [N,H,W,C] row-major (channel innermost),
//  - forward kernels overwrite `out`,
//  - backward kernels ACCUMULATE (+=) into the destination gradient,
//  - everything is single-threaded; loop structure, lane splits and partial-
//    sum merges are fixed functions of the shapes alone, so every result is
//    bit-reproducible run to run within one build.

namespace casdm::kern {

template <typename T>
void add(const T* a, const T* b, T* out, int64_t n) {
    for (int64_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

template <typename T>
void sub(const T* a, const T* b, T* out, int64_t n) {
    for (int64_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

template <typename T>
void mul(const T* a, const T* b, T* out, int64_t n) {
    for (int64_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

template <typename T>
void scale(const T* x, T a, T* out, int64_t n) {
    for (int64_t i = 0; i < n; ++i) out[i] = a * x[i];
}

template <typename T>
void add_scalar(const T* x, T c, T* out, int64_t n) {
    for (int64_t i = 0; i < n; ++i) out[i] = x[i] + c;
}

// out = a*x + b*y. Backbone of q_sample / posterior means / DDIM means.
template <typename T>
void affine2(T a, const T* x, T b, const T* y, T* out, int64_t n) {
    for (int64_t i = 0; i < n; ++i) out[i] = a * x[i] + b * y[i];
}

// out = r*a + (1-r)*b with r broadcast over the channel axis when rc == 1.
template <typename T>
void mix(const T* r, const T* a, const T* b, T* out, int64_t outer, int64_t c, int64_t rc) {
    if (rc == c) {
        int64_t n = outer * c;
        for (int64_t i = 0; i < n; ++i) out[i] = r[i] * a[i] + (T(1) - r[i]) * b[i];
    } else { // rc == 1
        for (int64_t o = 0; o < outer; ++o) {
            T rv = r[o];
            const T* pa = a + o * c;
            const T* pb = b + o * c;
            T* po = out + o * c;
            for (int64_t k = 0; k < c; ++k) po[k] = rv * pa[k] + (T(1) - rv) * pb[k];
        }
    }
}

// x0 recovery from predicted noise: out = (xt - b*eps) * inva with
// b = sqrt(1 - abar_t), inva = 1/sqrt(abar_t). One kernel body shared by the
// schedule wrapper and the tape op keeps the recomputation bit-exact.
template <typename T>
void recover_x0(const T* xt, const T* eps, T b, T inva, T* out, int64_t n) {
    for (int64_t i = 0; i < n; ++i) out[i] = (xt[i] - b * eps[i]) * inva;
}

template <typename T>
T sigmoid_one(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
void sigmoid(const T* x, T* out, int64_t n) {
    for (int64_t i = 0; i < n; ++i) out[i] = sigmoid_one(x[i]);
}

// grad via the output value: dy/dx = y*(1-y).
template <typename T>
void sigmoid_bwd(const T* y, const T* g, T* gx, int64_t n) {
    for (int64_t i = 0; i < n; ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
}

template <typename T>
void silu(const T* x, T* out, int64_t n) {
    for (int64_t i = 0; i < n; ++i) out[i] = x[i] * sigmoid_one(x[i]);
}

template <typename T>
void silu_bwd(const T* x, const T* g, T* gx, int64_t n) {
    for (int64_t i = 0; i < n; ++i) {
        T s = sigmoid_one(x[i]);
        gx[i] += g[i] * s * (T(1) + x[i] * (T(1) - s));
    }
}

// 2d convolution, stride 1, zero "same" padding. w is [kh,kw,Cin,Cout],
// bias [Cout]. The inner Cout loop is contiguous on both w and out.
template <typename T>
void conv2d(const T* x, const T* w, const T* bias, T* out,
            int64_t N, int64_t H, int64_t W, int64_t Ci, int64_t Co,
            int64_t kh, int64_t kw) {
    int64_t ph = kh / 2, pw = kw / 2;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x0 = 0; x0 < W; ++x0) {
                T* o = out + ((n * H + y) * W + x0) * Co;
                for (int64_t co = 0; co < Co; ++co) o[co] = bias ? bias[co] : T(0);
                for (int64_t dy = 0; dy < kh; ++dy) {
                    int64_t sy = y + dy - ph;
                    if (sy < 0 || sy >= H) continue;
                    for (int64_t dx = 0; dx < kw; ++dx) {
                        int64_t sx = x0 + dx - pw;
                        if (sx < 0 || sx >= W) continue;
                        const T* xi = x + ((n * H + sy) * W + sx) * Ci;
                        const T* wk = w + (dy * kw + dx) * Ci * Co;
                        for (int64_t ci = 0; ci < Ci; ++ci) {
                            T v = xi[ci];
                            const T* wr = wk + ci * Co;
                            for (int64_t co = 0; co < Co; ++co) o[co] += v * wr[co];
                        }
                    }
                }
            }
}

#if defined(__GNUC__) || defined(__clang__)
#define CASDM_KERN_SIMD 1
#endif

#ifdef CASDM_KERN_SIMD
namespace detail {

// 8-lane float vector for the explicit conv fast paths. Values use the
// naturally aligned type; memory is touched through the aligned(4) may_alias
// variant, which makes plain loads/stores legal at any float address without
// bouncing through a stack slot.
typedef float v8f __attribute__((vector_size(32)));
typedef float v8f_u __attribute__((vector_size(32), aligned(4), may_alias));

inline v8f load8(const float* p) { return *reinterpret_cast<const v8f_u*>(p); }
inline void store8(float* p, v8f v) { *reinterpret_cast<v8f_u*>(p) = v; }
inline v8f splat8(float x) { return v8f{x, x, x, x, x, x, x, x}; }
// fixed reduction tree; part of the summation-order contract
inline float hsum8(v8f v) {
    return ((v[0] + v[4]) + (v[1] + v[5])) + ((v[2] + v[6]) + (v[3] + v[7]));
}

}  // namespace detail

// Float fast path (the training hot loop). Cout runs in 16/8-lane vector
// tiles with four Cin-interleaved partial accumulators merged in a fixed
// tree; the sub-8 Cout tail uses four sequential scalar partials. The lane
// split and partial order are functions of the shapes alone, so results stay
// bit-reproducible. Computes the same sums as the scalar template in a
// different fixed association; the tests cross-check the two paths.
inline void conv2d(const float* __restrict x, const float* __restrict w,
                   const float* __restrict bias, float* __restrict out,
                   int64_t N, int64_t H, int64_t W, int64_t Ci, int64_t Co,
                   int64_t kh, int64_t kw) {
    using detail::v8f;
    using detail::load8;
    using detail::splat8;
    using detail::store8;
    int64_t ph = kh / 2, pw = kw / 2;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t y = 0; y < H; ++y) {
            int64_t dy0 = std::max<int64_t>(0, ph - y);
            int64_t dy1 = std::min<int64_t>(kh, H + ph - y);
            for (int64_t x0 = 0; x0 < W; ++x0) {
                int64_t dx0 = std::max<int64_t>(0, pw - x0);
                int64_t dx1 = std::min<int64_t>(kw, W + pw - x0);
                float* o = out + ((n * H + y) * W + x0) * Co;
                int64_t co0 = 0;
                for (; co0 + 16 <= Co; co0 += 16) {
                    v8f a0 = bias ? load8(bias + co0) : v8f{};
                    v8f b0 = bias ? load8(bias + co0 + 8) : v8f{};
                    v8f a1{}, a2{}, a3{}, b1{}, b2{}, b3{};
                    for (int64_t dy = dy0; dy < dy1; ++dy)
                        for (int64_t dx = dx0; dx < dx1; ++dx) {
                            const float* xi =
                                x + ((n * H + y + dy - ph) * W + x0 + dx - pw) * Ci;
                            const float* wk = w + (dy * kw + dx) * Ci * Co + co0;
                            int64_t ci = 0;
                            for (; ci + 4 <= Ci; ci += 4) {
                                const float* wr = wk + ci * Co;
                                v8f v0 = splat8(xi[ci]), v1 = splat8(xi[ci + 1]);
                                v8f v2 = splat8(xi[ci + 2]), v3 = splat8(xi[ci + 3]);
                                a0 += v0 * load8(wr);
                                b0 += v0 * load8(wr + 8);
                                a1 += v1 * load8(wr + Co);
                                b1 += v1 * load8(wr + Co + 8);
                                a2 += v2 * load8(wr + 2 * Co);
                                b2 += v2 * load8(wr + 2 * Co + 8);
                                a3 += v3 * load8(wr + 3 * Co);
                                b3 += v3 * load8(wr + 3 * Co + 8);
                            }
                            for (; ci < Ci; ++ci) {
                                v8f v = splat8(xi[ci]);
                                a0 += v * load8(wk + ci * Co);
                                b0 += v * load8(wk + ci * Co + 8);
                            }
                        }
                    store8(o + co0, (a0 + a1) + (a2 + a3));
                    store8(o + co0 + 8, (b0 + b1) + (b2 + b3));
                }
                if (co0 + 8 <= Co) {
                    v8f a0 = bias ? load8(bias + co0) : v8f{};
                    v8f a1{}, a2{}, a3{};
                    for (int64_t dy = dy0; dy < dy1; ++dy)
                        for (int64_t dx = dx0; dx < dx1; ++dx) {
                            const float* xi =
                                x + ((n * H + y + dy - ph) * W + x0 + dx - pw) * Ci;
                            const float* wk = w + (dy * kw + dx) * Ci * Co + co0;
                            int64_t ci = 0;
                            for (; ci + 4 <= Ci; ci += 4) {
                                const float* wr = wk + ci * Co;
                                a0 += splat8(xi[ci]) * load8(wr);
                                a1 += splat8(xi[ci + 1]) * load8(wr + Co);
                                a2 += splat8(xi[ci + 2]) * load8(wr + 2 * Co);
                                a3 += splat8(xi[ci + 3]) * load8(wr + 3 * Co);
                            }
                            for (; ci < Ci; ++ci) a0 += splat8(xi[ci]) * load8(wk + ci * Co);
                        }
                    store8(o + co0, (a0 + a1) + (a2 + a3));
                    co0 += 8;
                }
                for (; co0 < Co; ++co0) {
                    float s0 = bias ? bias[co0] : 0.f, s1 = 0.f, s2 = 0.f, s3 = 0.f;
                    for (int64_t dy = dy0; dy < dy1; ++dy)
                        for (int64_t dx = dx0; dx < dx1; ++dx) {
                            const float* xi =
                                x + ((n * H + y + dy - ph) * W + x0 + dx - pw) * Ci;
                            const float* wc = w + (dy * kw + dx) * Ci * Co + co0;
                            int64_t ci = 0;
                            for (; ci + 4 <= Ci; ci += 4) {
                                s0 += xi[ci] * wc[ci * Co];
                                s1 += xi[ci + 1] * wc[(ci + 1) * Co];
                                s2 += xi[ci + 2] * wc[(ci + 2) * Co];
                                s3 += xi[ci + 3] * wc[(ci + 3) * Co];
                            }
                            for (; ci < Ci; ++ci) s0 += xi[ci] * wc[ci * Co];
                        }
                    o[co0] = (s0 + s1) + (s2 + s3);
                }
            }
        }
}
#endif  // CASDM_KERN_SIMD

template <typename T>
void conv2d_bwd_input(const T* g, const T* w, T* gx,
                      int64_t N, int64_t H, int64_t W, int64_t Ci, int64_t Co,
                      int64_t kh, int64_t kw) {
    int64_t ph = kh / 2, pw = kw / 2;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x0 = 0; x0 < W; ++x0) {
                const T* go = g + ((n * H + y) * W + x0) * Co;
                for (int64_t dy = 0; dy < kh; ++dy) {
                    int64_t sy = y + dy - ph;
                    if (sy < 0 || sy >= H) continue;
                    for (int64_t dx = 0; dx < kw; ++dx) {
                        int64_t sx = x0 + dx - pw;
                        if (sx < 0 || sx >= W) continue;
                        T* gi = gx + ((n * H + sy) * W + sx) * Ci;
                        const T* wk = w + (dy * kw + dx) * Ci * Co;
                        for (int64_t ci = 0; ci < Ci; ++ci) {
                            const T* wr = wk + ci * Co;
                            T s = T(0);
                            for (int64_t co = 0; co < Co; ++co) s += go[co] * wr[co];
                            gi[ci] += s;
                        }
                    }
                }
            }
}

#ifdef CASDM_KERN_SIMD
// Float fast path: gathers per input pixel over the output pixels whose
// window covers it, walking them in ascending order. For Cin >= 8 the weights
// are transposed once to [kh,kw,Cout,Cin] so 16/8-lane Cin tiles read
// contiguously (two Cout-interleaved partials, fixed merge); leftover
// channels reduce over Cout in 8 lanes on the untransposed weights with a
// fixed-tree horizontal sum.
inline void conv2d_bwd_input(const float* __restrict g, const float* __restrict w,
                             float* __restrict gx,
                             int64_t N, int64_t H, int64_t W, int64_t Ci, int64_t Co,
                             int64_t kh, int64_t kw) {
    using detail::hsum8;
    using detail::load8;
    using detail::splat8;
    using detail::store8;
    using detail::v8f;
    int64_t ph = kh / 2, pw = kw / 2;
    std::vector<float> wt;
    if (Ci >= 8) {
        wt.resize(static_cast<size_t>(kh * kw * Ci * Co));
        for (int64_t k = 0; k < kh * kw; ++k)
            for (int64_t ci = 0; ci < Ci; ++ci)
                for (int64_t co = 0; co < Co; ++co)
                    wt[(k * Co + co) * Ci + ci] = w[(k * Ci + ci) * Co + co];
    }
    for (int64_t n = 0; n < N; ++n)
        for (int64_t iy = 0; iy < H; ++iy) {
            int64_t oy0 = std::max<int64_t>(0, iy + ph - (kh - 1));
            int64_t oy1 = std::min<int64_t>(H - 1, iy + ph);
            for (int64_t ix = 0; ix < W; ++ix) {
                int64_t ox0 = std::max<int64_t>(0, ix + pw - (kw - 1));
                int64_t ox1 = std::min<int64_t>(W - 1, ix + pw);
                float* gi = gx + ((n * H + iy) * W + ix) * Ci;
                int64_t ci0 = 0;
                for (; ci0 + 16 <= Ci; ci0 += 16) {
                    v8f a0{}, a1{}, b0{}, b1{};
                    for (int64_t oy = oy0; oy <= oy1; ++oy)
                        for (int64_t ox = ox0; ox <= ox1; ++ox) {
                            int64_t k = (iy + ph - oy) * kw + (ix + pw - ox);
                            const float* go = g + ((n * H + oy) * W + ox) * Co;
                            const float* wk = wt.data() + k * Co * Ci + ci0;
                            int64_t co = 0;
                            for (; co + 2 <= Co; co += 2) {
                                const float* w0 = wk + co * Ci;
                                v8f g0 = splat8(go[co]), g1 = splat8(go[co + 1]);
                                a0 += g0 * load8(w0);
                                a1 += g0 * load8(w0 + 8);
                                b0 += g1 * load8(w0 + Ci);
                                b1 += g1 * load8(w0 + Ci + 8);
                            }
                            for (; co < Co; ++co) {
                                v8f g0 = splat8(go[co]);
                                a0 += g0 * load8(wk + co * Ci);
                                a1 += g0 * load8(wk + co * Ci + 8);
                            }
                        }
                    store8(gi + ci0, load8(gi + ci0) + (a0 + b0));
                    store8(gi + ci0 + 8, load8(gi + ci0 + 8) + (a1 + b1));
                }
                if (ci0 + 8 <= Ci) {
                    v8f a0{}, b0{};
                    for (int64_t oy = oy0; oy <= oy1; ++oy)
                        for (int64_t ox = ox0; ox <= ox1; ++ox) {
                            int64_t k = (iy + ph - oy) * kw + (ix + pw - ox);
                            const float* go = g + ((n * H + oy) * W + ox) * Co;
                            const float* wk = wt.data() + k * Co * Ci + ci0;
                            int64_t co = 0;
                            for (; co + 2 <= Co; co += 2) {
                                a0 += splat8(go[co]) * load8(wk + co * Ci);
                                b0 += splat8(go[co + 1]) * load8(wk + (co + 1) * Ci);
                            }
                            for (; co < Co; ++co) a0 += splat8(go[co]) * load8(wk + co * Ci);
                        }
                    store8(gi + ci0, load8(gi + ci0) + (a0 + b0));
                    ci0 += 8;
                }
                for (; ci0 < Ci; ++ci0) {
                    v8f r{};
                    float sc = 0.f;
                    for (int64_t oy = oy0; oy <= oy1; ++oy)
                        for (int64_t ox = ox0; ox <= ox1; ++ox) {
                            int64_t k = (iy + ph - oy) * kw + (ix + pw - ox);
                            const float* go = g + ((n * H + oy) * W + ox) * Co;
                            const float* wr = w + (k * Ci + ci0) * Co;
                            int64_t co = 0;
                            for (; co + 8 <= Co; co += 8) r += load8(go + co) * load8(wr + co);
                            for (; co < Co; ++co) sc += go[co] * wr[co];
                        }
                    gi[ci0] += hsum8(r) + sc;
                }
            }
        }
}
#endif  // CASDM_KERN_SIMD

template <typename T>
void conv2d_bwd_params(const T* x, const T* g, T* gw, T* gb,
                       int64_t N, int64_t H, int64_t W, int64_t Ci, int64_t Co,
                       int64_t kh, int64_t kw) {
    int64_t ph = kh / 2, pw = kw / 2;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x0 = 0; x0 < W; ++x0) {
                const T* go = g + ((n * H + y) * W + x0) * Co;
                if (gb)
                    for (int64_t co = 0; co < Co; ++co) gb[co] += go[co];
                for (int64_t dy = 0; dy < kh; ++dy) {
                    int64_t sy = y + dy - ph;
                    if (sy < 0 || sy >= H) continue;
                    for (int64_t dx = 0; dx < kw; ++dx) {
                        int64_t sx = x0 + dx - pw;
                        if (sx < 0 || sx >= W) continue;
                        const T* xi = x + ((n * H + sy) * W + sx) * Ci;
                        T* wk = gw + (dy * kw + dx) * Ci * Co;
                        for (int64_t ci = 0; ci < Ci; ++ci) {
                            T v = xi[ci];
                            T* wr = wk + ci * Co;
                            for (int64_t co = 0; co < Co; ++co) wr[co] += v * go[co];
                        }
                    }
                }
            }
}

#ifdef CASDM_KERN_SIMD
// Float fast path. The bias gradient takes its own pixel-order pass. For
// Cin >= 4 the weight gradient fixes one (dy,dx) tap at a time, so each
// 4x8-lane gw tile accumulates over all pixels in ascending (n,y,x) order
// inside registers and touches memory once; sub-4 Cin and sub-8 Cout
// leftovers narrow the tile but keep the same per-element pixel order. The
// small-Cin stem shapes fall back to the scalar walk, which is cheap there.
inline void conv2d_bwd_params(const float* __restrict x, const float* __restrict g,
                              float* __restrict gw, float* __restrict gb,
                              int64_t N, int64_t H, int64_t W, int64_t Ci, int64_t Co,
                              int64_t kh, int64_t kw) {
    using detail::load8;
    using detail::splat8;
    using detail::store8;
    using detail::v8f;
    int64_t ph = kh / 2, pw = kw / 2;
    if (gb)
        for (int64_t n = 0; n < N; ++n)
            for (int64_t p = 0; p < H * W; ++p) {
                const float* go = g + (n * H * W + p) * Co;
                for (int64_t co = 0; co < Co; ++co) gb[co] += go[co];
            }
    if (Ci < 4) {
        conv2d_bwd_params<float>(x, g, gw, nullptr, N, H, W, Ci, Co, kh, kw);
        return;
    }
    for (int64_t dy = 0; dy < kh; ++dy) {
        int64_t oy0 = std::max<int64_t>(0, ph - dy);
        int64_t oy1 = std::min<int64_t>(H, H + ph - dy);
        for (int64_t dx = 0; dx < kw; ++dx) {
            int64_t ox0 = std::max<int64_t>(0, pw - dx);
            int64_t ox1 = std::min<int64_t>(W, W + pw - dx);
            float* wk = gw + (dy * kw + dx) * Ci * Co;
            int64_t ci0 = 0;
            for (; ci0 + 4 <= Ci; ci0 += 4) {
                int64_t co0 = 0;
                for (; co0 + 8 <= Co; co0 += 8) {
                    v8f a0{}, a1{}, a2{}, a3{};
                    for (int64_t n = 0; n < N; ++n)
                        for (int64_t oy = oy0; oy < oy1; ++oy)
                            for (int64_t ox = ox0; ox < ox1; ++ox) {
                                const float* xi =
                                    x + ((n * H + oy + dy - ph) * W + ox + dx - pw) * Ci + ci0;
                                v8f gv = load8(g + ((n * H + oy) * W + ox) * Co + co0);
                                a0 += splat8(xi[0]) * gv;
                                a1 += splat8(xi[1]) * gv;
                                a2 += splat8(xi[2]) * gv;
                                a3 += splat8(xi[3]) * gv;
                            }
                    float* w0 = wk + ci0 * Co + co0;
                    store8(w0, load8(w0) + a0);
                    store8(w0 + Co, load8(w0 + Co) + a1);
                    store8(w0 + 2 * Co, load8(w0 + 2 * Co) + a2);
                    store8(w0 + 3 * Co, load8(w0 + 3 * Co) + a3);
                }
                for (; co0 < Co; ++co0) {
                    float s0 = 0.f, s1 = 0.f, s2 = 0.f, s3 = 0.f;
                    for (int64_t n = 0; n < N; ++n)
                        for (int64_t oy = oy0; oy < oy1; ++oy)
                            for (int64_t ox = ox0; ox < ox1; ++ox) {
                                const float* xi =
                                    x + ((n * H + oy + dy - ph) * W + ox + dx - pw) * Ci + ci0;
                                float gv = g[((n * H + oy) * W + ox) * Co + co0];
                                s0 += xi[0] * gv;
                                s1 += xi[1] * gv;
                                s2 += xi[2] * gv;
                                s3 += xi[3] * gv;
                            }
                    wk[ci0 * Co + co0] += s0;
                    wk[(ci0 + 1) * Co + co0] += s1;
                    wk[(ci0 + 2) * Co + co0] += s2;
                    wk[(ci0 + 3) * Co + co0] += s3;
                }
            }
            for (; ci0 < Ci; ++ci0) {
                int64_t co0 = 0;
                for (; co0 + 8 <= Co; co0 += 8) {
                    v8f a{};
                    for (int64_t n = 0; n < N; ++n)
                        for (int64_t oy = oy0; oy < oy1; ++oy)
                            for (int64_t ox = ox0; ox < ox1; ++ox)
                                a += splat8(x[((n * H + oy + dy - ph) * W + ox + dx - pw) * Ci + ci0]) *
                                     load8(g + ((n * H + oy) * W + ox) * Co + co0);
                    float* w0 = wk + ci0 * Co + co0;
                    store8(w0, load8(w0) + a);
                }
                for (; co0 < Co; ++co0) {
                    float s = 0.f;
                    for (int64_t n = 0; n < N; ++n)
                        for (int64_t oy = oy0; oy < oy1; ++oy)
                            for (int64_t ox = ox0; ox < ox1; ++ox)
                                s += x[((n * H + oy + dy - ph) * W + ox + dx - pw) * Ci + ci0] *
                                     g[((n * H + oy) * W + ox) * Co + co0];
                    wk[ci0 * Co + co0] += s;
                }
            }
        }
    }
}
#endif  // CASDM_KERN_SIMD

// x [N,K] · w [K,M] + b [M] -> out [N,M].
template <typename T>
void linear(const T* x, const T* w, const T* b, T* out, int64_t N, int64_t K, int64_t M) {
    for (int64_t n = 0; n < N; ++n) {
        T* o = out + n * M;
        for (int64_t m = 0; m < M; ++m) o[m] = b ? b[m] : T(0);
        const T* xi = x + n * K;
        for (int64_t k = 0; k < K; ++k) {
            T v = xi[k];
            const T* wr = w + k * M;
            for (int64_t m = 0; m < M; ++m) o[m] += v * wr[m];
        }
    }
}

template <typename T>
void linear_bwd(const T* x, const T* w, const T* g, T* gx, T* gw, T* gb,
                int64_t N, int64_t K, int64_t M) {
    for (int64_t n = 0; n < N; ++n) {
        const T* go = g + n * M;
        const T* xi = x + n * K;
        if (gb)
            for (int64_t m = 0; m < M; ++m) gb[m] += go[m];
        for (int64_t k = 0; k < K; ++k) {
            const T* wr = w + k * M;
            if (gx) {
                T s = T(0);
                for (int64_t m = 0; m < M; ++m) s += go[m] * wr[m];
                gx[n * K + k] += s;
            }
            if (gw) {
                T v = xi[k];
                T* gwr = gw + k * M;
                for (int64_t m = 0; m < M; ++m) gwr[m] += v * go[m];
            }
        }
    }
}

// GroupNorm over [N,H,W,C] with C = G * cpg. Normalizes each (n, group)
// slab over H*W*cpg, then applies per-channel gamma/beta. Saves mean and
// rstd per (n, group) for the backward pass.
template <typename T>
void group_norm(const T* x, const T* gamma, const T* beta, T* out,
                T* save_mean, T* save_rstd,
                int64_t N, int64_t H, int64_t W, int64_t C, int64_t G, T eps) {
    int64_t cpg = C / G;
    int64_t hw = H * W;
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t g = 0; g < G; ++g) {
            T sum = T(0), sumsq = T(0);
            for (int64_t p = 0; p < hw; ++p) {
                const T* row = x + (n * hw + p) * C + g * cpg;
                for (int64_t k = 0; k < cpg; ++k) {
                    T v = row[k];
                    sum += v;
                    sumsq += v * v;
                }
            }
            T m = sum / T(hw * cpg);
            T var = sumsq / T(hw * cpg) - m * m;
            if (var < T(0)) var = T(0);
            T rstd = T(1) / std::sqrt(var + eps);
            save_mean[n * G + g] = m;
            save_rstd[n * G + g] = rstd;
            for (int64_t p = 0; p < hw; ++p) {
                const T* row = x + (n * hw + p) * C + g * cpg;
                T* orow = out + (n * hw + p) * C + g * cpg;
                for (int64_t k = 0; k < cpg; ++k) {
                    int64_t c = g * cpg + k;
                    orow[k] = (row[k] - m) * rstd * gamma[c] + beta[c];
                }
            }
        }
    }
}

template <typename T>
void group_norm_bwd(const T* x, const T* gamma, const T* g,
                    const T* save_mean, const T* save_rstd,
                    T* gx, T* ggamma, T* gbeta,
                    int64_t N, int64_t H, int64_t W, int64_t C, int64_t G) {
    int64_t cpg = C / G;
    int64_t hw = H * W;
    T inv_m = T(1) / T(hw * cpg);
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t grp = 0; grp < G; ++grp) {
            T m = save_mean[n * G + grp];
            T rstd = save_rstd[n * G + grp];
            // First pass: per-channel param grads plus the two group sums the
            // input gradient needs: S1 = sum(dxhat), S2 = sum(dxhat * xhat).
            T s1 = T(0), s2 = T(0);
            for (int64_t p = 0; p < hw; ++p) {
                int64_t base = (n * hw + p) * C + grp * cpg;
                for (int64_t k = 0; k < cpg; ++k) {
                    int64_t c = grp * cpg + k;
                    T xhat = (x[base + k] - m) * rstd;
                    T go = g[base + k];
                    if (ggamma) ggamma[c] += go * xhat;
                    if (gbeta) gbeta[c] += go;
                    T dxhat = go * gamma[c];
                    s1 += dxhat;
                    s2 += dxhat * xhat;
                }
            }
            if (gx)
                for (int64_t p = 0; p < hw; ++p) {
                    int64_t base = (n * hw + p) * C + grp * cpg;
                    for (int64_t k = 0; k < cpg; ++k) {
                        int64_t c = grp * cpg + k;
                        T xhat = (x[base + k] - m) * rstd;
                        T dxhat = g[base + k] * gamma[c];
                        gx[base + k] += rstd * (dxhat - inv_m * s1 - xhat * inv_m * s2);
                    }
                }
        }
    }
}

// 2x2 average pooling, stride 2. H and W must be even (checked by the op).
template <typename T>
void avg_pool2(const T* x, T* out, int64_t N, int64_t H, int64_t W, int64_t C) {
    int64_t HO = H / 2, WO = W / 2;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t y = 0; y < HO; ++y)
            for (int64_t x0 = 0; x0 < WO; ++x0) {
                const T* a = x + ((n * H + 2 * y) * W + 2 * x0) * C;
                const T* b = a + C;
                const T* c = a + W * C;
                const T* d = c + C;
                T* o = out + ((n * HO + y) * WO + x0) * C;
                for (int64_t k = 0; k < C; ++k)
                    o[k] = (a[k] + b[k] + c[k] + d[k]) * T(0.25);
            }
}

template <typename T>
void avg_pool2_bwd(const T* g, T* gx, int64_t N, int64_t H, int64_t W, int64_t C) {
    int64_t HO = H / 2, WO = W / 2;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t y = 0; y < HO; ++y)
            for (int64_t x0 = 0; x0 < WO; ++x0) {
                const T* go = g + ((n * HO + y) * WO + x0) * C;
                T* a = gx + ((n * H + 2 * y) * W + 2 * x0) * C;
                T* b = a + C;
                T* c = a + W * C;
                T* d = c + C;
                for (int64_t k = 0; k < C; ++k) {
                    T v = go[k] * T(0.25);
                    a[k] += v; b[k] += v; c[k] += v; d[k] += v;
                }
            }
}

// Nearest-neighbor 2x upsampling.
template <typename T>
void upsample2_nn(const T* x, T* out, int64_t N, int64_t H, int64_t W, int64_t C) {
    int64_t HO = 2 * H, WO = 2 * W;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t y = 0; y < HO; ++y)
            for (int64_t x0 = 0; x0 < WO; ++x0) {
                const T* xi = x + ((n * H + y / 2) * W + x0 / 2) * C;
                T* o = out + ((n * HO + y) * WO + x0) * C;
                for (int64_t k = 0; k < C; ++k) o[k] = xi[k];
            }
}

template <typename T>
void upsample2_nn_bwd(const T* g, T* gx, int64_t N, int64_t H, int64_t W, int64_t C) {
    int64_t HO = 2 * H, WO = 2 * W;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t y = 0; y < HO; ++y)
            for (int64_t x0 = 0; x0 < WO; ++x0) {
                const T* go = g + ((n * HO + y) * WO + x0) * C;
                T* gi = gx + ((n * H + y / 2) * W + x0 / 2) * C;
                for (int64_t k = 0; k < C; ++k) gi[k] += go[k];
            }
}

// Bilinear resize with half-pixel centers (align_corners = false), clamped
// at the borders.
template <typename T>
void bilinear_resize(const T* x, T* out, int64_t N, int64_t H, int64_t W, int64_t C,
                     int64_t HO, int64_t WO) {
    T sy = T(H) / T(HO), sx = T(W) / T(WO);
    for (int64_t n = 0; n < N; ++n)
        for (int64_t oy = 0; oy < HO; ++oy) {
            T fy = (T(oy) + T(0.5)) * sy - T(0.5);
            if (fy < T(0)) fy = T(0);
            if (fy > T(H - 1)) fy = T(H - 1);
            int64_t y0 = static_cast<int64_t>(fy);
            if (y0 > H - 2) y0 = H >= 2 ? H - 2 : 0;
            T wy = fy - T(y0);
            int64_t y1 = H >= 2 ? y0 + 1 : y0;
            for (int64_t ox = 0; ox < WO; ++ox) {
                T fx = (T(ox) + T(0.5)) * sx - T(0.5);
                if (fx < T(0)) fx = T(0);
                if (fx > T(W - 1)) fx = T(W - 1);
                int64_t x0 = static_cast<int64_t>(fx);
                if (x0 > W - 2) x0 = W >= 2 ? W - 2 : 0;
                T wx = fx - T(x0);
                int64_t x1 = W >= 2 ? x0 + 1 : x0;
                const T* p00 = x + ((n * H + y0) * W + x0) * C;
                const T* p01 = x + ((n * H + y0) * W + x1) * C;
                const T* p10 = x + ((n * H + y1) * W + x0) * C;
                const T* p11 = x + ((n * H + y1) * W + x1) * C;
                T* o = out + ((n * HO + oy) * WO + ox) * C;
                T w00 = (T(1) - wy) * (T(1) - wx), w01 = (T(1) - wy) * wx;
                T w10 = wy * (T(1) - wx), w11 = wy * wx;
                for (int64_t k = 0; k < C; ++k)
                    o[k] = w00 * p00[k] + w01 * p01[k] + w10 * p10[k] + w11 * p11[k];
            }
        }
}

template <typename T>
void bilinear_resize_bwd(const T* g, T* gx, int64_t N, int64_t H, int64_t W, int64_t C,
                         int64_t HO, int64_t WO) {
    T sy = T(H) / T(HO), sx = T(W) / T(WO);
    for (int64_t n = 0; n < N; ++n)
        for (int64_t oy = 0; oy < HO; ++oy) {
            T fy = (T(oy) + T(0.5)) * sy - T(0.5);
            if (fy < T(0)) fy = T(0);
            if (fy > T(H - 1)) fy = T(H - 1);
            int64_t y0 = static_cast<int64_t>(fy);
            if (y0 > H - 2) y0 = H >= 2 ? H - 2 : 0;
            T wy = fy - T(y0);
            int64_t y1 = H >= 2 ? y0 + 1 : y0;
            for (int64_t ox = 0; ox < WO; ++ox) {
                T fx = (T(ox) + T(0.5)) * sx - T(0.5);
                if (fx < T(0)) fx = T(0);
                if (fx > T(W - 1)) fx = T(W - 1);
                int64_t x0 = static_cast<int64_t>(fx);
                if (x0 > W - 2) x0 = W >= 2 ? W - 2 : 0;
                T wx = fx - T(x0);
                int64_t x1 = W >= 2 ? x0 + 1 : x0;
                T* p00 = gx + ((n * H + y0) * W + x0) * C;
                T* p01 = gx + ((n * H + y0) * W + x1) * C;
                T* p10 = gx + ((n * H + y1) * W + x0) * C;
                T* p11 = gx + ((n * H + y1) * W + x1) * C;
                const T* go = g + ((n * HO + oy) * WO + ox) * C;
                T w00 = (T(1) - wy) * (T(1) - wx), w01 = (T(1) - wy) * wx;
                T w10 = wy * (T(1) - wx), w11 = wy * wx;
                for (int64_t k = 0; k < C; ++k) {
                    p00[k] += w00 * go[k];
                    p01[k] += w01 * go[k];
                    p10[k] += w10 * go[k];
                    p11[k] += w11 * go[k];
                }
            }
        }
}

// Per-position channel unit normalization y = x / sqrt(eps + sum_c x^2).
// eps sits inside the sqrt so the gradient exists at x = 0.
template <typename T>
void channel_unit_norm(const T* x, T* out, int64_t outer, int64_t C, T eps) {
    for (int64_t o = 0; o < outer; ++o) {
        const T* xi = x + o * C;
        T* oo = out + o * C;
        T ss = eps;
        for (int64_t k = 0; k < C; ++k) ss += xi[k] * xi[k];
        T inv = T(1) / std::sqrt(ss);
        for (int64_t k = 0; k < C; ++k) oo[k] = xi[k] * inv;
    }
}

// d y_c / d x_j = delta_cj / nrm - x_c x_j / nrm^3, so
// gx_j += g_j / nrm - x_j * <g, x> / nrm^3.
template <typename T>
void channel_unit_norm_bwd(const T* x, const T* g, T* gx, int64_t outer, int64_t C, T eps) {
    for (int64_t o = 0; o < outer; ++o) {
        const T* xi = x + o * C;
        const T* gi = g + o * C;
        T* go = gx + o * C;
        T ss = eps, dot = T(0);
        for (int64_t k = 0; k < C; ++k) ss += xi[k] * xi[k];
        for (int64_t k = 0; k < C; ++k) dot += gi[k] * xi[k];
        T nrm = std::sqrt(ss);
        T inv = T(1) / nrm;
        T inv3 = inv * inv * inv;
        for (int64_t k = 0; k < C; ++k) go[k] += gi[k] * inv - xi[k] * dot * inv3;
    }
}

// x [N,H,W,C] plus a per-(sample, channel) bias b [N,C].
template <typename T>
void add_spatial_bias(const T* x, const T* b, T* out, int64_t N, int64_t HW, int64_t C) {
    for (int64_t n = 0; n < N; ++n) {
        const T* bn = b + n * C;
        for (int64_t p = 0; p < HW; ++p) {
            const T* xi = x + (n * HW + p) * C;
            T* o = out + (n * HW + p) * C;
            for (int64_t k = 0; k < C; ++k) o[k] = xi[k] + bn[k];
        }
    }
}

template <typename T>
void spatial_bias_bwd(const T* g, T* gb, int64_t N, int64_t HW, int64_t C) {
    for (int64_t n = 0; n < N; ++n) {
        T* bn = gb + n * C;
        for (int64_t p = 0; p < HW; ++p) {
            const T* gi = g + (n * HW + p) * C;
            for (int64_t k = 0; k < C; ++k) bn[k] += gi[k];
        }
    }
}

template <typename T>
T sum(const T* x, int64_t n) {
    T s = T(0);
    for (int64_t i = 0; i < n; ++i) s += x[i];
    return s;
}

template <typename T>
T mse(const T* a, const T* b, int64_t n) {
    T s = T(0);
    for (int64_t i = 0; i < n; ++i) {
        T d = a[i] - b[i];
        s += d * d;
    }
    return s / T(n);
}

} // namespace casdm::kern
