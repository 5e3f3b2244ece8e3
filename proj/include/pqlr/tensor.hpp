// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "pqlr/errors.hpp"
#include "pqlr/rng.hpp"

namespace pqlr {

// Dense row-major tensor. Float by default; the double instantiation exists
// for gradient-check tests.
template <typename T>
struct TensorT {
    std::vector<std::size_t> shape;
    std::vector<T> data;

    TensorT() = default;
    TensorT(std::vector<std::size_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (numel(shape) != data.size()) throw ShapeError("tensor: shape/data size mismatch");
    }

    static std::size_t numel(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (auto d : s) n *= d;
        return n;
    }

    static TensorT zeros(std::vector<std::size_t> s) {
        std::size_t n = numel(s);
        return TensorT(std::move(s), std::vector<T>(n, T(0)));
    }

    static TensorT full(std::vector<std::size_t> s, T v) {
        std::size_t n = numel(s);
        return TensorT(std::move(s), std::vector<T>(n, v));
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t rows() const { return shape.at(0); }
    std::size_t cols() const { return shape.at(1); }

    T& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    T at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

namespace detail {
inline void require(bool cond, const char* msg) {
    if (!cond) throw ShapeError(msg);
}
} // namespace detail

// C = A[m,k] * B[k,n]. Accumulation in T via an ikj loop.
template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require(a.rank() == 2 && b.rank() == 2, "matmul: operands must be 2-d");
    detail::require(a.cols() == b.rows(), "matmul: inner dimensions mismatch");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    TensorT<T> c = TensorT<T>::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = &a.data[i * k];
        T* crow = &c.data[i * n];
        for (std::size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            if (av == T(0)) continue;
            const T* brow = &b.data[p * n];
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

// C = A[m,k] * B[n,k]^T.
template <typename T>
TensorT<T> matmul_nt(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require(a.rank() == 2 && b.rank() == 2, "matmul_nt: operands must be 2-d");
    detail::require(a.cols() == b.cols(), "matmul_nt: inner dimensions mismatch");
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    TensorT<T> c = TensorT<T>::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = &a.data[i * k];
        T* crow = &c.data[i * n];
        for (std::size_t j = 0; j < n; ++j) {
            const T* brow = &b.data[j * k];
            T acc = T(0);
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] = acc;
        }
    }
    return c;
}

// C = A[k,m]^T * B[k,n].
template <typename T>
TensorT<T> matmul_tn(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require(a.rank() == 2 && b.rank() == 2, "matmul_tn: operands must be 2-d");
    detail::require(a.rows() == b.rows(), "matmul_tn: inner dimensions mismatch");
    const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
    TensorT<T> c = TensorT<T>::zeros({m, n});
    for (std::size_t p = 0; p < k; ++p) {
        const T* arow = &a.data[p * m];
        const T* brow = &b.data[p * n];
        for (std::size_t i = 0; i < m; ++i) {
            const T av = arow[i];
            if (av == T(0)) continue;
            T* crow = &c.data[i * n];
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

// Row-wise softmax with per-row max subtraction.
template <typename T>
TensorT<T> softmax_rows(const TensorT<T>& x) {
    detail::require(x.rank() == 2, "softmax_rows: input must be 2-d");
    const std::size_t m = x.rows(), n = x.cols();
    TensorT<T> out = TensorT<T>::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const T* row = &x.data[i * n];
        T* orow = &out.data[i * n];
        T mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        for (std::size_t j = 0; j < n; ++j) orow[j] /= sum;
    }
    return out;
}

// Per-row mean-0/variance-1 normalization (population variance) then affine.
// When cache_mean/cache_rstd are non-null they receive per-row statistics for
// the backward pass.
template <typename T>
TensorT<T> layer_norm_rows(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                           T eps, std::vector<T>* cache_mean = nullptr,
                           std::vector<T>* cache_rstd = nullptr) {
    detail::require(x.rank() == 2, "layer_norm_rows: input must be 2-d");
    const std::size_t m = x.rows(), n = x.cols();
    detail::require(gamma.size() == n && beta.size() == n, "layer_norm_rows: affine size mismatch");
    detail::require(n >= 1 && eps > T(0), "layer_norm_rows: bad arguments");
    TensorT<T> out = TensorT<T>::zeros({m, n});
    if (cache_mean) cache_mean->resize(m);
    if (cache_rstd) cache_rstd->resize(m);
    for (std::size_t i = 0; i < m; ++i) {
        const T* row = &x.data[i * n];
        T mean = T(0);
        for (std::size_t j = 0; j < n; ++j) mean += row[j];
        mean /= static_cast<T>(n);
        T var = T(0);
        for (std::size_t j = 0; j < n; ++j) {
            const T d = row[j] - mean;
            var += d * d;
        }
        var /= static_cast<T>(n);
        const T rstd = T(1) / std::sqrt(var + eps);
        if (cache_mean) (*cache_mean)[i] = mean;
        if (cache_rstd) (*cache_rstd)[i] = rstd;
        T* orow = &out.data[i * n];
        for (std::size_t j = 0; j < n; ++j)
            orow[j] = gamma.data[j] * (row[j] - mean) * rstd + beta.data[j];
    }
    return out;
}

// Mean NLL over non-ignored targets plus the exact logit gradient
// (softmax - onehot) / count.
template <typename T>
struct CrossEntropyResult {
    double loss = 0.0;
    TensorT<T> dlogits;
};

template <typename T>
CrossEntropyResult<T> cross_entropy(const TensorT<T>& logits, const std::vector<int>& targets,
                                    int ignore_index) {
    detail::require(logits.rank() == 2, "cross_entropy: logits must be 2-d");
    detail::require(targets.size() == logits.rows(), "cross_entropy: target count mismatch");
    const std::size_t b = logits.rows();
    const int v = static_cast<int>(logits.cols());
    std::size_t count = 0;
    for (int t : targets) {
        if (t == ignore_index) continue;
        if (t < 0 || t >= v) throw DataError("cross_entropy: target out of range");
        ++count;
    }
    if (count == 0) throw NumericError("cross_entropy: all positions ignored, loss undefined");

    CrossEntropyResult<T> res;
    res.dlogits = TensorT<T>::zeros(logits.shape);
    TensorT<T> probs = softmax_rows(logits);
    double loss = 0.0;
    const std::size_t n = logits.cols();
    for (std::size_t i = 0; i < b; ++i) {
        if (targets[i] == ignore_index) continue;
        const T* prow = &probs.data[i * n];
        T* drow = &res.dlogits.data[i * n];
        const std::size_t tgt = static_cast<std::size_t>(targets[i]);
        loss -= std::log(std::max(static_cast<double>(prow[tgt]), 1e-300));
        for (std::size_t j = 0; j < n; ++j) drow[j] = prow[j] / static_cast<T>(count);
        drow[tgt] -= T(1) / static_cast<T>(count);
    }
    res.loss = loss / static_cast<double>(count);
    return res;
}

// Deterministic Gaussian tensor from an Rng stream.
template <typename T = float>
TensorT<T> rng_normal(Rng& rng, std::size_t n, double mean, double stddev) {
    if (stddev < 0.0) throw NumericError("rng_normal: negative stddev");
    TensorT<T> out = TensorT<T>::zeros({n});
    for (auto& v : out.data) v = static_cast<T>(rng.normal(mean, stddev));
    return out;
}

} // namespace pqlr
