#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace uvga {

// Dense kernels shared by the graph ops. Parallel loops partition output
// columns (or rows) so every output element is reduced serially by one
// thread in a fixed k-order; results are bit-identical for any thread count.

namespace gemm_detail {
inline constexpr int kColTile = 256;  // B-tile columns kept hot in cache
inline constexpr int kRowBlock = 8;   // output rows accumulated together
}  // namespace gemm_detail

/// C[M,N] += A[M,K] * B[K,N]
template <class T>
void gemm_nn(const T* A, const T* B, T* C, int M, int K, int N) {
    using namespace gemm_detail;
    const int tiles = (N + kColTile - 1) / kColTile;
    auto tile_fn = [&](int t) {
        const int j0 = t * kColTile;
        const int jn = std::min(N - j0, kColTile);
        T acc[kRowBlock][kColTile];
        for (int i0 = 0; i0 < M; i0 += kRowBlock) {
            const int ib = std::min(kRowBlock, M - i0);
            for (int r = 0; r < ib; ++r) {
                const T* c = C + static_cast<std::int64_t>(i0 + r) * N + j0;
                for (int j = 0; j < jn; ++j) acc[r][j] = c[j];
            }
            for (int k = 0; k < K; ++k) {
                const T* b = B + static_cast<std::int64_t>(k) * N + j0;
                for (int r = 0; r < ib; ++r) {
                    const T a = A[static_cast<std::int64_t>(i0 + r) * K + k];
                    T* ar = acc[r];
                    for (int j = 0; j < jn; ++j) ar[j] += a * b[j];
                }
            }
            for (int r = 0; r < ib; ++r) {
                T* c = C + static_cast<std::int64_t>(i0 + r) * N + j0;
                for (int j = 0; j < jn; ++j) c[j] = acc[r][j];
            }
        }
    };
    if (static_cast<std::int64_t>(M) * K * N > 262144) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int t = 0; t < tiles; ++t) tile_fn(t);
    } else {
        for (int t = 0; t < tiles; ++t) tile_fn(t);
    }
}

/// Blocked out-of-place transpose: dst[j,i] = src[i,j] for src[R,Cc].
template <class T>
void transpose_into(const T* src, T* dst, int R, int Cc) {
    constexpr int B = 32;
    auto block_fn = [&](int i0) {
        for (int j0 = 0; j0 < Cc; j0 += B) {
            const int i1 = std::min(R, i0 + B), j1 = std::min(Cc, j0 + B);
            for (int i = i0; i < i1; ++i)
                for (int j = j0; j < j1; ++j)
                    dst[static_cast<std::int64_t>(j) * R + i] = src[static_cast<std::int64_t>(i) * Cc + j];
        }
    };
    if (static_cast<std::int64_t>(R) * Cc > 262144) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int i0 = 0; i0 < R; i0 += B) block_fn(i0);
    } else {
        for (int i0 = 0; i0 < R; i0 += B) block_fn(i0);
    }
}

/// C[M,N] += A[M,K] * B[N,K]^T. Large problems transpose B once and reuse
/// the tiled NN kernel; the accumulation k-order is unchanged either way.
template <class T>
void gemm_nt(const T* A, const T* B, T* C, int M, int K, int N) {
    const std::int64_t work = static_cast<std::int64_t>(M) * K * N;
    if (work > 262144) {
        static thread_local std::vector<T> scratch;
        scratch.resize(static_cast<size_t>(K) * N);
        transpose_into(B, scratch.data(), N, K);
        gemm_nn(A, scratch.data(), C, M, K, N);
        return;
    }
    for (int i = 0; i < M; ++i) {
        const T* a = A + static_cast<std::int64_t>(i) * K;
        T* c = C + static_cast<std::int64_t>(i) * N;
        for (int j = 0; j < N; ++j) {
            const T* b = B + static_cast<std::int64_t>(j) * K;
            T acc = T(0);
            for (int k = 0; k < K; ++k) acc += a[k] * b[k];
            c[j] += acc;
        }
    }
}

/// C[M,N] += A[K,M]^T * B[K,N]
template <class T>
void gemm_tn(const T* A, const T* B, T* C, int M, int K, int N) {
    using namespace gemm_detail;
    const int tiles = (N + kColTile - 1) / kColTile;
    auto tile_fn = [&](int t) {
        const int j0 = t * kColTile;
        const int jn = std::min(N - j0, kColTile);
        T acc[kRowBlock][kColTile];
        for (int i0 = 0; i0 < M; i0 += kRowBlock) {
            const int ib = std::min(kRowBlock, M - i0);
            for (int r = 0; r < ib; ++r) {
                const T* c = C + static_cast<std::int64_t>(i0 + r) * N + j0;
                for (int j = 0; j < jn; ++j) acc[r][j] = c[j];
            }
            for (int k = 0; k < K; ++k) {
                const T* b = B + static_cast<std::int64_t>(k) * N + j0;
                const T* arow = A + static_cast<std::int64_t>(k) * M + i0;
                for (int r = 0; r < ib; ++r) {
                    const T a = arow[r];
                    T* ar = acc[r];
                    for (int j = 0; j < jn; ++j) ar[j] += a * b[j];
                }
            }
            for (int r = 0; r < ib; ++r) {
                T* c = C + static_cast<std::int64_t>(i0 + r) * N + j0;
                for (int j = 0; j < jn; ++j) c[j] = acc[r][j];
            }
        }
    };
    if (static_cast<std::int64_t>(M) * K * N > 262144) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int t = 0; t < tiles; ++t) tile_fn(t);
    } else {
        for (int t = 0; t < tiles; ++t) tile_fn(t);
    }
}

/// C[b] += A[b] * B[b] for every batch entry; one flat region, fused inner
/// loops (batches are typically tiny, e.g. per-point 3x3 transforms).
template <class T>
void gemm_batched_nn(const T* A, const T* B, T* C, int batch, int M, int K, int N) {
    const std::int64_t sa = static_cast<std::int64_t>(M) * K;
    const std::int64_t sb = static_cast<std::int64_t>(K) * N;
    const std::int64_t sc = static_cast<std::int64_t>(M) * N;
    if (sa <= 64 && sb <= 64) {
        auto batch_fn = [&](int t) {
            const T* a = A + t * sa;
            const T* b = B + t * sb;
            T* c = C + t * sc;
            for (int i = 0; i < M; ++i)
                for (int j = 0; j < N; ++j) {
                    T acc = c[i * N + j];
                    for (int k = 0; k < K; ++k) acc += a[i * K + k] * b[k * N + j];
                    c[i * N + j] = acc;
                }
        };
        if (static_cast<std::int64_t>(batch) * sa * N > 262144) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (int t = 0; t < batch; ++t) batch_fn(t);
        } else {
            for (int t = 0; t < batch; ++t) batch_fn(t);
        }
        return;
    }
    for (int t = 0; t < batch; ++t) gemm_nn(A + t * sa, B + t * sb, C + t * sc, M, K, N);
}

template <class T>
void gemm_batched_nt(const T* A, const T* B, T* C, int batch, int M, int K, int N) {
    const std::int64_t sa = static_cast<std::int64_t>(M) * K;
    const std::int64_t sb = static_cast<std::int64_t>(N) * K;
    const std::int64_t sc = static_cast<std::int64_t>(M) * N;
    if (sa <= 64 && sb <= 64) {
        auto batch_fn = [&](int t) {
            const T* a = A + t * sa;
            const T* b = B + t * sb;
            T* c = C + t * sc;
            for (int i = 0; i < M; ++i)
                for (int j = 0; j < N; ++j) {
                    T acc = c[i * N + j];
                    for (int k = 0; k < K; ++k) acc += a[i * K + k] * b[j * K + k];
                    c[i * N + j] = acc;
                }
        };
        if (static_cast<std::int64_t>(batch) * sa * N > 262144) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (int t = 0; t < batch; ++t) batch_fn(t);
        } else {
            for (int t = 0; t < batch; ++t) batch_fn(t);
        }
        return;
    }
    for (int t = 0; t < batch; ++t) gemm_nt(A + t * sa, B + t * sb, C + t * sc, M, K, N);
}

template <class T>
void gemm_batched_tn(const T* A, const T* B, T* C, int batch, int M, int K, int N) {
    const std::int64_t sa = static_cast<std::int64_t>(K) * M;
    const std::int64_t sb = static_cast<std::int64_t>(K) * N;
    const std::int64_t sc = static_cast<std::int64_t>(M) * N;
    if (sa <= 64 && sb <= 64) {
        auto batch_fn = [&](int t) {
            const T* a = A + t * sa;
            const T* b = B + t * sb;
            T* c = C + t * sc;
            for (int i = 0; i < M; ++i)
                for (int j = 0; j < N; ++j) {
                    T acc = c[i * N + j];
                    for (int k = 0; k < K; ++k) acc += a[k * M + i] * b[k * N + j];
                    c[i * N + j] = acc;
                }
        };
        if (static_cast<std::int64_t>(batch) * sa * N > 262144) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (int t = 0; t < batch; ++t) batch_fn(t);
        } else {
            for (int t = 0; t < batch; ++t) batch_fn(t);
        }
        return;
    }
    for (int t = 0; t < batch; ++t) gemm_tn(A + t * sa, B + t * sb, C + t * sc, M, K, N);
}

inline int conv_out_extent(int in, int kernel, int stride, int pad) {
    return (in + 2 * pad - kernel) / stride + 1;
}

/// x[C,H,W] -> col[C*kh*kw, Ho*Wo], zero padding.
template <class T>
void im2col(const T* x, int C, int H, int W, int kh, int kw, int stride, int pad, T* col) {
    const int Ho = conv_out_extent(H, kh, stride, pad);
    const int Wo = conv_out_extent(W, kw, stride, pad);
    const std::int64_t plane = static_cast<std::int64_t>(Ho) * Wo;
    auto chan_fn = [&](int c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                T* dst = col + ((static_cast<std::int64_t>(c) * kh + ki) * kw + kj) * plane;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride - pad + ki;
                    if (iy < 0 || iy >= H) {
                        for (int ox = 0; ox < Wo; ++ox) dst[static_cast<std::int64_t>(oy) * Wo + ox] = T(0);
                        continue;
                    }
                    const T* src = x + (static_cast<std::int64_t>(c) * H + iy) * W;
                    if (stride == 1) {
                        const int x_lo = std::max(0, pad - kj);
                        const int x_hi = std::min(Wo, W + pad - kj);
                        T* drow = dst + static_cast<std::int64_t>(oy) * Wo;
                        for (int ox = 0; ox < x_lo; ++ox) drow[ox] = T(0);
                        for (int ox = x_lo; ox < x_hi; ++ox) drow[ox] = src[ox - pad + kj];
                        for (int ox = x_hi; ox < Wo; ++ox) drow[ox] = T(0);
                    } else {
                        for (int ox = 0; ox < Wo; ++ox) {
                            const int ix = ox * stride - pad + kj;
                            dst[static_cast<std::int64_t>(oy) * Wo + ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
                        }
                    }
                }
            }
        }
    };
    if (static_cast<std::int64_t>(C) * kh * kw * plane > 262144) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int c = 0; c < C; ++c) chan_fn(c);
    } else {
        for (int c = 0; c < C; ++c) chan_fn(c);
    }
}

/// Scatter-add of col[C*kh*kw, Ho*Wo] back into x[C,H,W].
template <class T>
void col2im(const T* col, int C, int H, int W, int kh, int kw, int stride, int pad, T* x) {
    const int Ho = conv_out_extent(H, kh, stride, pad);
    const int Wo = conv_out_extent(W, kw, stride, pad);
    const std::int64_t plane = static_cast<std::int64_t>(Ho) * Wo;
    auto chan_fn = [&](int c) {  // each thread owns whole channels: no write races
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                const T* src = col + ((static_cast<std::int64_t>(c) * kh + ki) * kw + kj) * plane;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride - pad + ki;
                    if (iy < 0 || iy >= H) continue;
                    T* dst = x + (static_cast<std::int64_t>(c) * H + iy) * W;
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = ox * stride - pad + kj;
                        if (ix >= 0 && ix < W) dst[ix] += src[static_cast<std::int64_t>(oy) * Wo + ox];
                    }
                }
            }
        }
    };
    if (static_cast<std::int64_t>(C) * kh * kw * plane > 262144) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int c = 0; c < C; ++c) chan_fn(c);
    } else {
        for (int c = 0; c < C; ++c) chan_fn(c);
    }
}

}  // namespace uvga
