#pragma once

// Dense row-major kernels. Every loop nest keeps the innermost dimension
// element-wise (no cross-lane reductions), so results do not depend on buffer
// alignment or vector width and repeated calls are bit-identical.

#include <cstddef>

namespace pvp::kernels {

/// C[n,m] = A[n,k] * B[k,m]
template <class T>
void matmul(T* __restrict c, const T* __restrict a, const T* __restrict b, std::size_t n, std::size_t k,
            std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        T* ci = c + i * m;
        for (std::size_t j = 0; j < m; ++j) {
            ci[j] = T{0};
        }
        for (std::size_t p = 0; p < k; ++p) {
            const T aip = a[i * k + p];
            const T* bp = b + p * m;
            for (std::size_t j = 0; j < m; ++j) {
                ci[j] += aip * bp[j];
            }
        }
    }
}

/// C[n,m] += A[n,k] * B[k,m]
template <class T>
void matmul_acc(T* __restrict c, const T* __restrict a, const T* __restrict b, std::size_t n, std::size_t k,
                std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        T* ci = c + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const T aip = a[i * k + p];
            const T* bp = b + p * m;
            for (std::size_t j = 0; j < m; ++j) {
                ci[j] += aip * bp[j];
            }
        }
    }
}

/// C[k,m] += A[n,k]^T * B[n,m]
template <class T>
void matmul_tn_acc(T* __restrict c, const T* __restrict a, const T* __restrict b, std::size_t n, std::size_t k,
                   std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        const T* bi = b + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const T aip = a[i * k + p];
            T* cp = c + p * m;
            for (std::size_t j = 0; j < m; ++j) {
                cp[j] += aip * bi[j];
            }
        }
    }
}

/// dst[c,r] = src[r,c]^T
template <class T>
void transpose(T* __restrict dst, const T* __restrict src, std::size_t rows, std::size_t cols) {
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}

/// Sequential dot product (fixed summation order).
template <class T>
T dot(const T* a, const T* b, std::size_t n) {
    T s{0};
    for (std::size_t i = 0; i < n; ++i) {
        s += a[i] * b[i];
    }
    return s;
}

}  // namespace pvp::kernels
