#pragma once

#include "card/common.hpp"

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace card {

// Minimal owning tensor. Row-major, up to rank 2 in practice; the model code
// works on raw pointers and these are just shape-carrying buffers.
template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        int64_t n = 1;
        for (int d : shape) {
            CARD_CHECK(d >= 0, "negative tensor dim");
            n *= d;
        }
        data.assign(size_t(n), T(0));
    }

    int64_t numel() const { return int64_t(data.size()); }
    int rank() const { return int(shape.size()); }
    int rows() const { return shape.empty() ? 0 : shape[0]; }
    int cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    T * ptr() { return data.data(); }
    const T * ptr() const { return data.data(); }
    T * row(int i) { return data.data() + size_t(i) * size_t(cols()); }
    const T * row(int i) const { return data.data() + size_t(i) * size_t(cols()); }

    void zero() { std::fill(data.begin(), data.end(), T(0)); }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape);
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = U(data[i]);
        return out;
    }
};

// ---- kernels ---------------------------------------------------------------
// Plain loops laid out so the inner dimension is contiguous; -O3 vectorizes
// them well enough for desk-scale models.

// C[m,n] = A[m,k] * B[k,n]
template <typename T>
inline void matmul(const T * a, const T * b, T * c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        T * crow = c + size_t(i) * size_t(n);
        for (int j = 0; j < n; ++j) crow[j] = T(0);
        const T * arow = a + size_t(i) * size_t(k);
        for (int kk = 0; kk < k; ++kk) {
            T av = arow[kk];
            const T * brow = b + size_t(kk) * size_t(n);
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] = A[m,k] * B^T with B stored [n,k]
template <typename T>
inline void matmul_nt(const T * a, const T * b, T * c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T * arow = a + size_t(i) * size_t(k);
        T * crow = c + size_t(i) * size_t(n);
        for (int j = 0; j < n; ++j) {
            const T * brow = b + size_t(j) * size_t(k);
            T acc = T(0);
            for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            crow[j] = acc;
        }
    }
}

// C[k,n] += A^T * B with A stored [m,k], B stored [m,n]
template <typename T>
inline void matmul_tn_acc(const T * a, const T * b, T * c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T * arow = a + size_t(i) * size_t(k);
        const T * brow = b + size_t(i) * size_t(n);
        for (int kk = 0; kk < k; ++kk) {
            T av = arow[kk];
            if (av == T(0)) continue;
            T * crow = c + size_t(kk) * size_t(n);
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
inline void axpy(T alpha, const T * x, T * y, int64_t n) {
    for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// stable in-place softmax over n entries
template <typename T>
inline void softmax_inplace(T * x, int n) {
    T m = x[0];
    for (int i = 1; i < n; ++i) m = std::max(m, x[i]);
    T sum = T(0);
    for (int i = 0; i < n; ++i) {
        x[i] = std::exp(x[i] - m);
        sum += x[i];
    }
    T inv = T(1) / sum;
    for (int i = 0; i < n; ++i) x[i] *= inv;
}

// log(sum(exp(x))) with max shift
template <typename T>
inline T logsumexp(const T * x, int n) {
    T m = x[0];
    for (int i = 1; i < n; ++i) m = std::max(m, x[i]);
    T sum = T(0);
    for (int i = 0; i < n; ++i) sum += std::exp(x[i] - m);
    return m + std::log(sum);
}

}  // namespace card
