#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "mvdiff/simd.hpp"
#include "mvdiff/tensor.hpp"
#include "mvdiff/threading.hpp"

// Raw array kernels shared by the autograd layer and the module-level APIs.
// Every reduction runs in a fixed documented order (ascending index, with the
// dot kernel's 8-lane partials combined pairwise), so outputs are bitwise
// reproducible and independent of the thread count.

namespace mvdiff::kernels {

using mvdiff::detail::vec_traits;

template <typename T>
inline void axpy(T a, const T* x, T* y, std::int64_t n) {
    for (std::int64_t i = 0; i < n; ++i) y[i] += a * x[i];
}

// exp for the f32 fast path: exp2-based degree-5 polynomial, ~1e-7 relative
// error, identical arithmetic in scalar and vector form. f64 code keeps
// std::exp (the oracle/gradcheck precision path).
inline float fast_expf(float x) {
    x = std::max(-87.0f, std::min(88.0f, x));
    const float t = x * 1.44269504088896341f;
    float fi = static_cast<float>(static_cast<int>(t));
    if (t < fi) fi -= 1.0f;  // floor
    const float f = t - fi;
    const float p =
        1.0f + f * (0.6931471805599453f +
                    f * (0.2402265069591007f +
                         f * (0.0555041086648216f +
                              f * (0.0096181291076285f + f * 0.0013335581464284f))));
    union {
        std::uint32_t u;
        float f32;
    } s;
    s.u = static_cast<std::uint32_t>(static_cast<int>(fi) + 127) << 23;
    return p * s.f32;
}

#ifdef MVDIFF_VEC
namespace detail_vec {
typedef float vf8 __attribute__((vector_size(32), aligned(4)));
typedef std::int32_t vi8 __attribute__((vector_size(32), aligned(4)));

// Same algorithm as fast_expf, lane-wise.
inline vf8 fast_expf_v(vf8 x) {
    x = x > 88.0f ? (vf8{} + 88.0f) : x;
    x = x < -87.0f ? (vf8{} + -87.0f) : x;
    const vf8 t = x * 1.44269504088896341f;
    vi8 i = __builtin_convertvector(t, vi8);
    vf8 fi = __builtin_convertvector(i, vf8);
    const vi8 below = t < fi;
    fi = below ? fi - 1.0f : fi;
    i = below ? i - 1 : i;
    const vf8 f = t - fi;
    const vf8 p =
        1.0f + f * (0.6931471805599453f +
                    f * (0.2402265069591007f +
                         f * (0.0555041086648216f +
                              f * (0.0096181291076285f + f * 0.0013335581464284f))));
    const vi8 bits = (i + 127) << 23;
    vf8 scale;
    __builtin_memcpy(&scale, &bits, sizeof(scale));
    return p * scale;
}
}  // namespace detail_vec
#endif

template <typename T>
inline T exp_eval(T x) {
    if constexpr (std::is_same_v<T, float>)
        return fast_expf(x);
    else
        return std::exp(x);
}

inline constexpr std::int64_t kParallelCutoff = 16384;

// Data-parallel elementwise driver over fixed 4096-element blocks. Block
// boundaries are independent of the thread count, so the vector/scalar path
// split inside the body is identical for every run.
template <typename Fn>
void ew_parallel(std::int64_t n, Fn fn) {
    if (n < kParallelCutoff) {
        fn(0, n);
        return;
    }
    constexpr std::int64_t B = 4096;
    const std::int64_t blocks = (n + B - 1) / B;
    parallel_for(blocks, [&](std::int64_t b0, std::int64_t b1) {
        fn(b0 * B, std::min(n, b1 * B));
    });
}

// y = x * sigmoid(x)
template <typename T>
void silu_forward(const T* x, T* y, std::int64_t n) {
    const auto body = [&](std::int64_t i0, std::int64_t i1) {
        std::int64_t i = i0;
#ifdef MVDIFF_VEC
        if constexpr (std::is_same_v<T, float>) {
            using detail_vec::vf8;
            for (; i + 8 <= i1; i += 8) {
                const vf8 v = *reinterpret_cast<const vf8*>(x + i);
                const vf8 s = 1.0f / (1.0f + detail_vec::fast_expf_v(-v));
                *reinterpret_cast<vf8*>(y + i) = v * s;
            }
        }
#endif
        for (; i < i1; ++i) {
            const T s = T(1) / (T(1) + exp_eval(-x[i]));
            y[i] = x[i] * s;
        }
    };
    ew_parallel(n, body);
}

template <typename T>
void silu_backward(const T* x, const T* dy, T* dx, std::int64_t n) {
    const auto body = [&](std::int64_t i0, std::int64_t i1) {
        std::int64_t i = i0;
#ifdef MVDIFF_VEC
        if constexpr (std::is_same_v<T, float>) {
            using detail_vec::vf8;
            for (; i + 8 <= i1; i += 8) {
                const vf8 v = *reinterpret_cast<const vf8*>(x + i);
                const vf8 g = *reinterpret_cast<const vf8*>(dy + i);
                const vf8 s = 1.0f / (1.0f + detail_vec::fast_expf_v(-v));
                *reinterpret_cast<vf8*>(dx + i) += g * s * (1.0f + v * (1.0f - s));
            }
        }
#endif
        for (; i < i1; ++i) {
            const T s = T(1) / (T(1) + exp_eval(-x[i]));
            dx[i] += dy[i] * s * (T(1) + x[i] * (T(1) - s));
        }
    };
    ew_parallel(n, body);
}

template <typename T>
void sigmoid_forward(const T* x, T* y, std::int64_t n) {
    const auto body = [&](std::int64_t i0, std::int64_t i1) {
        std::int64_t i = i0;
#ifdef MVDIFF_VEC
        if constexpr (std::is_same_v<T, float>) {
            using detail_vec::vf8;
            for (; i + 8 <= i1; i += 8) {
                const vf8 v = *reinterpret_cast<const vf8*>(x + i);
                *reinterpret_cast<vf8*>(y + i) = 1.0f / (1.0f + detail_vec::fast_expf_v(-v));
            }
        }
#endif
        for (; i < i1; ++i) y[i] = T(1) / (T(1) + exp_eval(-x[i]));
    };
    ew_parallel(n, body);
}

namespace detail {

// One R-row register tile of C[M,N] (+)= A * B with B row-major [P,N].
// R is a compile-time constant so the accumulator tile stays in registers
// and the p-loop carries 2R independent FMA chains. Each C element
// accumulates over p in ascending order regardless of blocking or threads.
template <typename T, int R>
inline void gemm_tile_rows(const T* A, std::int64_t a_rs, std::int64_t a_cs, const T* B,
                           std::int64_t ldb, T* C, std::int64_t ldc, std::int64_t P,
                           std::int64_t N, bool accumulate) {
#ifdef MVDIFF_VEC
    using V = typename vec_traits<T>::v;
    constexpr int W = vec_traits<T>::width;
    constexpr int JB = 2 * W;
    std::int64_t j = 0;
    for (; j + JB <= N; j += JB) {
        V acc0[R] = {}, acc1[R] = {};
        const T* bp = B + j;
        for (std::int64_t p = 0; p < P; ++p, bp += ldb) {
            const V b0 = *reinterpret_cast<const V*>(bp);
            const V b1 = *reinterpret_cast<const V*>(bp + W);
            for (int r = 0; r < R; ++r) {
                const T a = A[r * a_rs + p * a_cs];
                acc0[r] += a * b0;
                acc1[r] += a * b1;
            }
        }
        for (int r = 0; r < R; ++r) {
            T* c = C + r * ldc + j;
            V* c0 = reinterpret_cast<V*>(c);
            V* c1 = reinterpret_cast<V*>(c + W);
            if (accumulate) {
                *c0 += acc0[r];
                *c1 += acc1[r];
            } else {
                *c0 = acc0[r];
                *c1 = acc1[r];
            }
        }
    }
#else
    constexpr int JB = std::is_same_v<T, float> ? 16 : 8;
    std::int64_t j = 0;
#endif
    if (j < N) {  // column tail, scalar
        const std::int64_t nt = N - j;
        T acc[R][16] = {};
        const T* bp = B + j;
        for (std::int64_t p = 0; p < P; ++p, bp += ldb) {
            for (int r = 0; r < R; ++r) {
                const T a = A[r * a_rs + p * a_cs];
                for (std::int64_t q = 0; q < nt; ++q) acc[r][q] += a * bp[q];
            }
        }
        for (int r = 0; r < R; ++r) {
            T* c = C + r * ldc + j;
            if (accumulate)
                for (std::int64_t q = 0; q < nt; ++q) c[q] += acc[r][q];
            else
                for (std::int64_t q = 0; q < nt; ++q) c[q] = acc[r][q];
        }
    }
}

template <typename T>
void gemm_block(const T* A, std::int64_t a_rs, std::int64_t a_cs, const T* B, std::int64_t ldb,
                T* C, std::int64_t ldc, std::int64_t M, std::int64_t P, std::int64_t N,
                bool accumulate) {
    constexpr std::int64_t RB = 4;
    parallel_for((M + RB - 1) / RB, [&](std::int64_t t0, std::int64_t t1) {
        for (std::int64_t tile = t0; tile < t1; ++tile) {
            const std::int64_t i0 = tile * RB;
            const T* a = A + i0 * a_rs;
            T* c = C + i0 * ldc;
            switch (std::min(RB, M - i0)) {
                case 4: gemm_tile_rows<T, 4>(a, a_rs, a_cs, B, ldb, c, ldc, P, N, accumulate); break;
                case 3: gemm_tile_rows<T, 3>(a, a_rs, a_cs, B, ldb, c, ldc, P, N, accumulate); break;
                case 2: gemm_tile_rows<T, 2>(a, a_rs, a_cs, B, ldb, c, ldc, P, N, accumulate); break;
                default: gemm_tile_rows<T, 1>(a, a_rs, a_cs, B, ldb, c, ldc, P, N, accumulate); break;
            }
        }
    });
}

}  // namespace detail

// C[M,N] = A[M,K] * B[N,K]^T
template <typename T>
void matmul_nt(const T* A, const T* B, T* C, std::int64_t M, std::int64_t K, std::int64_t N) {
    std::vector<T> bt(static_cast<size_t>(K * N));
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t k = 0; k < K; ++k) bt[k * N + n] = B[n * K + k];
    detail::gemm_block(A, K, 1, bt.data(), N, C, N, M, K, N, false);
}

// C[M,N] = A[M,K] * B[K,N]
template <typename T>
void matmul_nn(const T* A, const T* B, T* C, std::int64_t M, std::int64_t K, std::int64_t N) {
    detail::gemm_block(A, K, 1, B, N, C, N, M, K, N, false);
}

// C[N,K] += A[M,N]^T * B[M,K]   (accumulates into C)
template <typename T>
void matmul_tn_acc(const T* A, const T* B, T* C, std::int64_t M, std::int64_t N, std::int64_t K) {
    detail::gemm_block(A, 1, N, B, K, C, K, N, M, K, true);
}

struct ConvGeom {
    int batch, cin, h, w;
    int cout, kh, kw;
    int stride, pad;
    int ho, wo;

    ConvGeom(const Shape& x, const Shape& wshape, int stride_, int pad_) {
        require(x.size() == 4 && wshape.size() == 4, "conv2d: expect 4-d input and weight");
        batch = x[0]; cin = x[1]; h = x[2]; w = x[3];
        cout = wshape[0]; kh = wshape[2]; kw = wshape[3];
        require(wshape[1] == cin, "conv2d: weight cin mismatch");
        require(stride_ == 1 || stride_ == 2, "conv2d: unsupported stride");
        stride = stride_;
        pad = pad_;
        ho = (h + 2 * pad - kh) / stride + 1;
        wo = (w + 2 * pad - kw) / stride + 1;
        require(ho > 0 && wo > 0, "conv2d: empty output");
    }

    std::int64_t rows() const { return static_cast<std::int64_t>(batch) * ho * wo; }
    std::int64_t cols() const { return static_cast<std::int64_t>(cin) * kh * kw; }
};

// col[rows, cols]; row r = ((n*ho+oy)*wo+ox), col k = (ci*kh+ky)*kw+kx.
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
    const std::int64_t plane = static_cast<std::int64_t>(g.h) * g.w;
    parallel_for(g.rows(), [&](std::int64_t r0, std::int64_t r1) {
        for (std::int64_t r = r0; r < r1; ++r) {
            const int ox = static_cast<int>(r % g.wo);
            const int oy = static_cast<int>((r / g.wo) % g.ho);
            const int n = static_cast<int>(r / (static_cast<std::int64_t>(g.wo) * g.ho));
            T* dst = col + r * g.cols();
            const T* src = x + static_cast<std::int64_t>(n) * g.cin * plane;
            for (int ci = 0; ci < g.cin; ++ci) {
                for (int ky = 0; ky < g.kh; ++ky) {
                    const int iy = oy * g.stride - g.pad + ky;
                    for (int kx = 0; kx < g.kw; ++kx) {
                        const int ix = ox * g.stride - g.pad + kx;
                        *dst++ = (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w)
                                     ? src[ci * plane + static_cast<std::int64_t>(iy) * g.w + ix]
                                     : T(0);
                    }
                }
            }
        }
    });
}

// Scatter-add of dcol back into dx; parallel over images (disjoint writes).
template <typename T>
void col2im_acc(const T* dcol, const ConvGeom& g, T* dx) {
    const std::int64_t plane = static_cast<std::int64_t>(g.h) * g.w;
    parallel_for(g.batch, [&](std::int64_t n0, std::int64_t n1) {
        for (std::int64_t n = n0; n < n1; ++n) {
            T* dst = dx + n * g.cin * plane;
            for (int oy = 0; oy < g.ho; ++oy) {
                for (int ox = 0; ox < g.wo; ++ox) {
                    const std::int64_t r = (n * g.ho + oy) * g.wo + ox;
                    const T* src = dcol + r * g.cols();
                    for (int ci = 0; ci < g.cin; ++ci) {
                        for (int ky = 0; ky < g.kh; ++ky) {
                            const int iy = oy * g.stride - g.pad + ky;
                            for (int kx = 0; kx < g.kw; ++kx) {
                                const int ix = ox * g.stride - g.pad + kx;
                                if (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w)
                                    dst[ci * plane + static_cast<std::int64_t>(iy) * g.w + ix] +=
                                        src[(ci * g.kh + ky) * g.kw + kx];
                            }
                        }
                    }
                }
            }
        }
    });
}

namespace detail {

// Reusable per-thread scratch; graph ops run on one thread, so buffers
// persist across calls without reallocation.
template <typename T>
std::vector<T>& scratch(int slot) {
    thread_local std::vector<T> bufs[4];
    return bufs[slot];
}

// Zero-padded copy [N,C,H,W] -> [N,C,H+2p,W+2p].
template <typename T>
void pad_input(const T* x, int batch, int c, int h, int w, int p, std::vector<T>& out) {
    const int hp = h + 2 * p, wp = w + 2 * p;
    out.assign(static_cast<size_t>(batch) * c * hp * wp, T(0));
    parallel_for(static_cast<std::int64_t>(batch) * c, [&](std::int64_t i0, std::int64_t i1) {
        for (std::int64_t i = i0; i < i1; ++i) {
            const T* src = x + i * h * w;
            T* dst = out.data() + i * hp * wp + p * wp + p;
            for (int y = 0; y < h; ++y) std::copy_n(src + y * w, w, dst + static_cast<std::int64_t>(y) * wp);
        }
    });
}

// R output rows of one (image, out-channel) plane for a stride-1 conv over a
// padded input. Per element, taps accumulate in ascending (ci, ky, kx) order
// in both the vector body and the scalar tail.
template <typename T, int R>
inline void conv_s1_rows(const T* xpn, std::int64_t pplane, int wp, const T* wco, T bias, int cin,
                         int k, int y0, int wo, T* outn_rows, bool accumulate) {
    std::int64_t x0 = 0;
#ifdef MVDIFF_VEC
    using V = typename vec_traits<T>::v;
    constexpr int W = vec_traits<T>::width;
    for (; x0 + W <= wo; x0 += W) {
        V acc[R];
        for (int r = 0; r < R; ++r)
            acc[r] = accumulate ? *reinterpret_cast<const V*>(outn_rows + r * wo + x0)
                                : (V{} + bias);
        for (int ci = 0; ci < cin; ++ci) {
            const T* base = xpn + ci * pplane;
            for (int ky = 0; ky < k; ++ky) {
                for (int kx = 0; kx < k; ++kx) {
                    const T wv = wco[(ci * k + ky) * k + kx];
                    for (int r = 0; r < R; ++r) {
                        const V in = *reinterpret_cast<const V*>(
                            base + static_cast<std::int64_t>(y0 + r + ky) * wp + x0 + kx);
                        acc[r] += wv * in;
                    }
                }
            }
        }
        for (int r = 0; r < R; ++r) *reinterpret_cast<V*>(outn_rows + r * wo + x0) = acc[r];
    }
#endif
    for (; x0 < wo; ++x0) {  // scalar tail, same tap order
        T acc[R];
        for (int r = 0; r < R; ++r) acc[r] = accumulate ? outn_rows[r * wo + x0] : bias;
        for (int ci = 0; ci < cin; ++ci) {
            const T* base = xpn + ci * pplane;
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    const T wv = wco[(ci * k + ky) * k + kx];
                    for (int r = 0; r < R; ++r)
                        acc[r] += wv * base[static_cast<std::int64_t>(y0 + r + ky) * wp + x0 + kx];
                }
        }
        for (int r = 0; r < R; ++r) outn_rows[r * wo + x0] = acc[r];
    }
}

// Stride-1 direct convolution (k = 3 pad 1, or k = 1 pad 0) over a padded
// input buffer [N, Cin, hp, wp]. Writes (or accumulates into) out.
template <typename T>
void conv_s1_direct(const T* xp, int batch, int cin, int hp, int wp, const T* wgt, const T* bias,
                    int cout, int k, int ho, int wo, T* out, bool accumulate) {
    const std::int64_t pplane = static_cast<std::int64_t>(hp) * wp;
    const std::int64_t oplane = static_cast<std::int64_t>(ho) * wo;
    constexpr int RB = 4;
    parallel_for(static_cast<std::int64_t>(batch) * cout, [&](std::int64_t i0, std::int64_t i1) {
        for (std::int64_t i = i0; i < i1; ++i) {
            const int n = static_cast<int>(i / cout);
            const int co = static_cast<int>(i % cout);
            const T* xpn = xp + static_cast<std::int64_t>(n) * cin * pplane;
            const T* wco = wgt + static_cast<std::int64_t>(co) * cin * k * k;
            const T b = bias ? bias[co] : T(0);
            T* outp = out + (static_cast<std::int64_t>(n) * cout + co) * oplane;
            int y = 0;
            for (; y + RB <= ho; y += RB)
                conv_s1_rows<T, RB>(xpn, pplane, wp, wco, b, cin, k, y, wo, outp + y * wo,
                                    accumulate);
            for (; y < ho; ++y)
                conv_s1_rows<T, 1>(xpn, pplane, wp, wco, b, cin, k, y, wo, outp + y * wo,
                                   accumulate);
        }
    });
}

// dW and dbias for the stride-1 case, reading the padded forward input.
// Per (co, ci) all k*k tap accumulators stream the planes once. Lane
// partials combine in a fixed order so the result does not depend on
// threading.
template <typename T>
void conv_s1_dw(const T* xp, const T* dout, int batch, int cin, int hp, int wp, int cout, int k,
                int ho, int wo, T* dw, T* dbias) {
    const std::int64_t pplane = static_cast<std::int64_t>(hp) * wp;
    const std::int64_t oplane = static_cast<std::int64_t>(ho) * wo;
    parallel_for(cout, [&](std::int64_t c0, std::int64_t c1) {
        for (std::int64_t co = c0; co < c1; ++co) {
            for (int ci = 0; dw && ci < cin; ++ci) {
#ifdef MVDIFF_VEC
                using V = typename vec_traits<T>::v;
                constexpr int W = vec_traits<T>::width;
                V vacc[9] = {};
#endif
                T tail[9] = {};
                for (int n = 0; n < batch; ++n) {
                    const T* dyp = dout + (static_cast<std::int64_t>(n) * cout + co) * oplane;
                    const T* base = xp + (static_cast<std::int64_t>(n) * cin + ci) * pplane;
                    for (int y = 0; y < ho; ++y) {
                        const T* dyrow = dyp + static_cast<std::int64_t>(y) * wo;
                        std::int64_t x = 0;
#ifdef MVDIFF_VEC
                        for (; x + W <= wo; x += W) {
                            const V dv = *reinterpret_cast<const V*>(dyrow + x);
                            for (int ky = 0; ky < k; ++ky) {
                                const T* xrow = base + static_cast<std::int64_t>(y + ky) * wp + x;
                                for (int kx = 0; kx < k; ++kx)
                                    vacc[ky * k + kx] +=
                                        dv * *reinterpret_cast<const V*>(xrow + kx);
                            }
                        }
#endif
                        for (; x < wo; ++x) {
                            const T dv = dyrow[x];
                            for (int ky = 0; ky < k; ++ky)
                                for (int kx = 0; kx < k; ++kx)
                                    tail[ky * k + kx] +=
                                        dv * base[static_cast<std::int64_t>(y + ky) * wp + x + kx];
                        }
                    }
                }
                for (int t = 0; t < k * k; ++t) {
                    T acc = T(0);
#ifdef MVDIFF_VEC
                    for (int q = 0; q < W; ++q) acc += vacc[t][q];
#endif
                    acc += tail[t];
                    dw[(co * cin + ci) * k * k + t] += acc;
                }
            }
            if (dbias) {
                T b = T(0);
                for (int n = 0; n < batch; ++n) {
                    const T* dyp = dout + (static_cast<std::int64_t>(n) * cout + co) * oplane;
                    for (std::int64_t q = 0; q < oplane; ++q) b += dyp[q];
                }
                dbias[co] += b;
            }
        }
    });
}

inline bool direct_conv_ok(int k, int stride, int pad, int wo) {
    return stride == 1 && wo >= 8 && ((k == 3 && pad == 1) || (k == 1 && pad == 0));
}

}  // namespace detail

// out[N,Cout,Ho,Wo] = conv2d(x, w) + bias
template <typename T>
void conv2d_forward(const T* x, const T* w, const T* bias, const ConvGeom& g, T* out,
                    std::vector<T>* col_scratch) {
    if (detail::direct_conv_ok(g.kh, g.stride, g.pad, g.wo)) {
        const T* xp = x;
        int hp = g.h, wp = g.w;
        if (g.pad > 0) {
            std::vector<T>& padded = detail::scratch<T>(0);
            detail::pad_input(x, g.batch, g.cin, g.h, g.w, g.pad, padded);
            xp = padded.data();
            hp = g.h + 2 * g.pad;
            wp = g.w + 2 * g.pad;
        }
        detail::conv_s1_direct(xp, g.batch, g.cin, hp, wp, w, bias, g.cout, g.kh, g.ho, g.wo, out,
                               false);
        return;
    }
    std::vector<T> local;
    std::vector<T>& col = col_scratch ? *col_scratch : detail::scratch<T>(1);
    col.resize(static_cast<size_t>(g.rows() * g.cols()));
    im2col(x, g, col.data());
    std::vector<T>& out_mat = detail::scratch<T>(2);
    out_mat.resize(static_cast<size_t>(g.rows()) * g.cout);
    matmul_nt(col.data(), w, out_mat.data(), g.rows(), g.cols(), g.cout);
    const std::int64_t oplane = static_cast<std::int64_t>(g.ho) * g.wo;
    parallel_for(g.rows(), [&](std::int64_t r0, std::int64_t r1) {
        for (std::int64_t r = r0; r < r1; ++r) {
            const std::int64_t p = r % oplane;
            const std::int64_t n = r / oplane;
            const T* src = out_mat.data() + r * g.cout;
            for (int co = 0; co < g.cout; ++co)
                out[(n * g.cout + co) * oplane + p] = src[co] + (bias ? bias[co] : T(0));
        }
    });
}

// Accumulates dx, dw, dbias. x is the saved forward input.
template <typename T>
void conv2d_backward(const T* x, const T* w, const T* dout, const ConvGeom& g, T* dx, T* dw,
                     T* dbias) {
    if (detail::direct_conv_ok(g.kh, g.stride, g.pad, g.wo)) {
        const int k = g.kh;
        const int hp = g.h + 2 * g.pad, wp = g.w + 2 * g.pad;
        std::vector<T>& padded = detail::scratch<T>(0);
        if (dw || dbias) {
            if (g.pad > 0)
                detail::pad_input(x, g.batch, g.cin, g.h, g.w, g.pad, padded);
            else
                padded.assign(x, x + static_cast<std::int64_t>(g.batch) * g.cin * g.h * g.w);
            detail::conv_s1_dw(padded.data(), dout, g.batch, g.cin, hp, wp, g.cout, k, g.ho, g.wo,
                               dw, dbias);
        }
        if (dx) {
            // full correlation: conv of padded dout with channel-swapped,
            // 180-rotated weights, accumulated into dx
            std::vector<T>& wt = detail::scratch<T>(1);
            wt.resize(static_cast<size_t>(g.cin) * g.cout * k * k);
            for (int co = 0; co < g.cout; ++co)
                for (int ci = 0; ci < g.cin; ++ci)
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx)
                            wt[((static_cast<std::int64_t>(ci) * g.cout + co) * k + ky) * k + kx] =
                                w[((static_cast<std::int64_t>(co) * g.cin + ci) * k + (k - 1 - ky)) *
                                      k +
                                  (k - 1 - kx)];
            const T* dyp = dout;
            int dh = g.ho, dwid = g.wo;
            std::vector<T>& dpad = detail::scratch<T>(2);
            if (g.pad > 0) {
                detail::pad_input(dout, g.batch, g.cout, g.ho, g.wo, g.pad, dpad);
                dyp = dpad.data();
                dh = g.ho + 2 * g.pad;
                dwid = g.wo + 2 * g.pad;
            }
            detail::conv_s1_direct(dyp, g.batch, g.cout, dh, dwid, wt.data(),
                                   static_cast<const T*>(nullptr), g.cin, k, g.h, g.w, dx, true);
        }
        return;
    }
    const std::int64_t M = g.rows(), K = g.cols();
    const std::int64_t oplane = static_cast<std::int64_t>(g.ho) * g.wo;
    std::vector<T>& dy_mat = detail::scratch<T>(3);
    dy_mat.resize(static_cast<size_t>(M) * g.cout);
    parallel_for(M, [&](std::int64_t r0, std::int64_t r1) {
        for (std::int64_t r = r0; r < r1; ++r) {
            const std::int64_t p = r % oplane;
            const std::int64_t n = r / oplane;
            T* dst = dy_mat.data() + r * g.cout;
            for (int co = 0; co < g.cout; ++co) dst[co] = dout[(n * g.cout + co) * oplane + p];
        }
    });
    if (dbias) {
        for (std::int64_t r = 0; r < M; ++r)
            for (int co = 0; co < g.cout; ++co) dbias[co] += dy_mat[r * g.cout + co];
    }
    if (dw) {
        std::vector<T>& col = detail::scratch<T>(1);
        col.resize(static_cast<size_t>(M * K));
        im2col(x, g, col.data());
        matmul_tn_acc(dy_mat.data(), col.data(), dw, M, g.cout, K);
    }
    if (dx) {
        std::vector<T>& dcol = detail::scratch<T>(2);
        dcol.resize(static_cast<size_t>(M * K));
        matmul_nn(dy_mat.data(), w, dcol.data(), M, g.cout, K);
        col2im_acc(dcol.data(), g, dx);
    }
}

// Group normalization over (channels-in-group, H, W) per sample.
// Saves mean/rstd per (n, group) for the backward pass.
template <typename T>
void group_norm_forward(const T* x, const T* gamma, const T* beta, int batch, int ch, int hw,
                        int groups, T eps, T* out, T* mean_save, T* rstd_save) {
    require(ch % groups == 0, "group_norm: channels not divisible by groups");
    const int cg = ch / groups;
    const std::int64_t gsz = static_cast<std::int64_t>(cg) * hw;
    parallel_for(static_cast<std::int64_t>(batch) * groups, [&](std::int64_t i0, std::int64_t i1) {
        for (std::int64_t i = i0; i < i1; ++i) {
            const int n = static_cast<int>(i / groups);
            const int g = static_cast<int>(i % groups);
            const T* src = x + (static_cast<std::int64_t>(n) * ch + g * cg) * hw;
            T sum = T(0);
            for (std::int64_t k = 0; k < gsz; ++k) sum += src[k];
            const T mean = sum / static_cast<T>(gsz);
            T var = T(0);
            for (std::int64_t k = 0; k < gsz; ++k) {
                const T d = src[k] - mean;
                var += d * d;
            }
            var /= static_cast<T>(gsz);
            const T rstd = T(1) / std::sqrt(var + eps);
            mean_save[i] = mean;
            rstd_save[i] = rstd;
            T* dst = out + (static_cast<std::int64_t>(n) * ch + g * cg) * hw;
            for (int c = 0; c < cg; ++c) {
                const T ga = gamma[g * cg + c], be = beta[g * cg + c];
                for (int k = 0; k < hw; ++k) {
                    const std::int64_t idx = static_cast<std::int64_t>(c) * hw + k;
                    dst[idx] = (src[idx] - mean) * rstd * ga + be;
                }
            }
        }
    });
}

template <typename T>
void group_norm_backward(const T* x, const T* gamma, const T* dout, int batch, int ch, int hw,
                         int groups, const T* mean_save, const T* rstd_save, T* dx, T* dgamma,
                         T* dbeta) {
    const int cg = ch / groups;
    const std::int64_t gsz = static_cast<std::int64_t>(cg) * hw;
    if (dx) {
        parallel_for(static_cast<std::int64_t>(batch) * groups,
                     [&](std::int64_t i0, std::int64_t i1) {
            for (std::int64_t i = i0; i < i1; ++i) {
                const int n = static_cast<int>(i / groups);
                const int g = static_cast<int>(i % groups);
                const std::int64_t base = (static_cast<std::int64_t>(n) * ch + g * cg) * hw;
                const T* xs = x + base;
                const T* dy = dout + base;
                const T mean = mean_save[i], rstd = rstd_save[i];
                T s1 = T(0), s2 = T(0);
                for (int c = 0; c < cg; ++c) {
                    const T ga = gamma[g * cg + c];
                    for (int k = 0; k < hw; ++k) {
                        const std::int64_t idx = static_cast<std::int64_t>(c) * hw + k;
                        const T dyg = dy[idx] * ga;
                        s1 += dyg;
                        s2 += dyg * (xs[idx] - mean) * rstd;
                    }
                }
                const T inv_m = T(1) / static_cast<T>(gsz);
                for (int c = 0; c < cg; ++c) {
                    const T ga = gamma[g * cg + c];
                    for (int k = 0; k < hw; ++k) {
                        const std::int64_t idx = static_cast<std::int64_t>(c) * hw + k;
                        const T xhat = (xs[idx] - mean) * rstd;
                        dx[base + idx] += rstd * (dy[idx] * ga - inv_m * (s1 + xhat * s2));
                    }
                }
            }
        });
    }
    if (dgamma || dbeta) {
        for (int n = 0; n < batch; ++n) {  // serial over batch: fixed accumulation order
            for (int g = 0; g < groups; ++g) {
                const std::int64_t i = static_cast<std::int64_t>(n) * groups + g;
                const std::int64_t base = (static_cast<std::int64_t>(n) * ch + g * cg) * hw;
                const T mean = mean_save[i], rstd = rstd_save[i];
                for (int c = 0; c < cg; ++c) {
                    T sg = T(0), sb = T(0);
                    for (int k = 0; k < hw; ++k) {
                        const std::int64_t idx = base + static_cast<std::int64_t>(c) * hw + k;
                        sg += dout[idx] * (x[idx] - mean) * rstd;
                        sb += dout[idx];
                    }
                    if (dgamma) dgamma[g * cg + c] += sg;
                    if (dbeta) dbeta[g * cg + c] += sb;
                }
            }
        }
    }
}

// Softmax over axis 0 of [N, inner]. -inf entries are allowed and map to
// exactly zero weight; each column needs at least one finite entry.
template <typename T>
void softmax_axis0(const T* z, int n, std::int64_t inner, T* w) {
    parallel_for(inner, [&](std::int64_t j0, std::int64_t j1) {
        for (std::int64_t j = j0; j < j1; ++j) {
            T m = -std::numeric_limits<T>::infinity();
            for (int i = 0; i < n; ++i) m = std::max(m, z[i * inner + j]);
            if (!(m > -std::numeric_limits<T>::infinity()))
                throw NumericError("softmax: all entries -inf in a column");
            T sum = T(0);
            for (int i = 0; i < n; ++i) {
                const T zi = z[i * inner + j];
                const T e = std::isinf(zi) ? T(0) : std::exp(zi - m);
                w[i * inner + j] = e;
                sum += e;
            }
            for (int i = 0; i < n; ++i) w[i * inner + j] /= sum;
        }
    });
}

template <typename T>
void softmax_axis0_backward(const T* w, const T* dw, int n, std::int64_t inner, T* dz) {
    parallel_for(inner, [&](std::int64_t j0, std::int64_t j1) {
        for (std::int64_t j = j0; j < j1; ++j) {
            T dot = T(0);
            for (int i = 0; i < n; ++i) dot += w[i * inner + j] * dw[i * inner + j];
            for (int i = 0; i < n; ++i)
                dz[i * inner + j] += w[i * inner + j] * (dw[i * inner + j] - dot);
        }
    });
}

template <typename T>
void upsample2x_nearest(const T* x, int nc, int h, int w, T* out) {
    parallel_for(nc, [&](std::int64_t p0, std::int64_t p1) {
        for (std::int64_t p = p0; p < p1; ++p) {
            const T* src = x + p * h * w;
            T* dst = out + p * 4 * h * w;
            for (int y = 0; y < h; ++y) {
                for (int xx = 0; xx < w; ++xx) {
                    const T v = src[y * w + xx];
                    T* d = dst + (2 * y) * (2 * w) + 2 * xx;
                    d[0] = v;
                    d[1] = v;
                    d[2 * w] = v;
                    d[2 * w + 1] = v;
                }
            }
        }
    });
}

template <typename T>
void upsample2x_nearest_backward(const T* dout, int nc, int h, int w, T* dx) {
    parallel_for(nc, [&](std::int64_t p0, std::int64_t p1) {
        for (std::int64_t p = p0; p < p1; ++p) {
            const T* dsrc = dout + p * 4 * h * w;
            T* dst = dx + p * h * w;
            for (int y = 0; y < h; ++y) {
                for (int xx = 0; xx < w; ++xx) {
                    const T* d = dsrc + (2 * y) * (2 * w) + 2 * xx;
                    dst[y * w + xx] += (d[0] + d[1]) + (d[2 * w] + d[2 * w + 1]);
                }
            }
        }
    });
}

}  // namespace mvdiff::kernels
