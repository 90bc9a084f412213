#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <vector>

#define EIGEN_DONT_PARALLELIZE 1
#include <Eigen/Core>

#include "mesh4d/common.hpp"

namespace mesh4d {

// Row-major dense array of arbitrary rank. All learned-module math treats the
// trailing extent as the channel axis.
template <typename T>
struct DenseArray {
    std::vector<std::size_t> shape;
    std::vector<T> v;

    DenseArray() = default;
    explicit DenseArray(std::vector<std::size_t> s) : shape(std::move(s)), v(numel_of(shape), T(0)) {}
    DenseArray(std::vector<std::size_t> s, std::vector<T> data) : shape(std::move(s)), v(std::move(data)) {
        MESH4D_CHECK(v.size() == numel_of(shape), "DenseArray: data size does not match shape");
    }

    static std::size_t numel_of(const std::vector<std::size_t>& s) {
        return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
    }

    std::size_t numel() const { return v.size(); }
    std::size_t rank() const { return shape.size(); }

    // rows/cols view: rank-1 arrays are 1xN, higher ranks collapse leading axes
    std::size_t rows() const {
        if (shape.empty()) return 1;
        if (shape.size() == 1) return 1;
        std::size_t r = 1;
        for (std::size_t i = 0; i + 1 < shape.size(); ++i) r *= shape[i];
        return r;
    }
    std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }

    T& at(std::size_t r, std::size_t c) { return v[r * cols() + c]; }
    const T& at(std::size_t r, std::size_t c) const { return v[r * cols() + c]; }

    bool same_shape(const DenseArray& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (T x : v)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

    static DenseArray zeros(std::vector<std::size_t> s) { return DenseArray(std::move(s)); }

    static DenseArray full(std::vector<std::size_t> s, T value) {
        DenseArray a(std::move(s));
        std::fill(a.v.begin(), a.v.end(), value);
        return a;
    }

    static DenseArray randn(std::vector<std::size_t> s, Rng& rng, T stddev = T(1)) {
        DenseArray a(std::move(s));
        for (auto& x : a.v) x = static_cast<T>(rng.normal()) * stddev;
        return a;
    }

    template <typename U>
    DenseArray<U> cast() const {
        DenseArray<U> out;
        out.shape = shape;
        out.v.resize(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
        return out;
    }
};

namespace detail {
template <typename T>
using EigenRowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<EigenRowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const EigenRowMat<T>>;
}  // namespace detail

// C = op(A) * op(B), 2-D row-major, Eigen-backed.
template <typename T>
DenseArray<T> matmul_data(const DenseArray<T>& a, bool ta, const DenseArray<T>& b, bool tb) {
    const std::size_t am = ta ? a.cols() : a.rows();
    const std::size_t ak = ta ? a.rows() : a.cols();
    const std::size_t bk = tb ? b.cols() : b.rows();
    const std::size_t bn = tb ? b.rows() : b.cols();
    MESH4D_CHECK(ak == bk, "matmul: inner extents mismatch");
    DenseArray<T> c({am, bn});
    detail::ConstMapMat<T> ma(a.v.data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
    detail::ConstMapMat<T> mb(b.v.data(), static_cast<Eigen::Index>(b.rows()), static_cast<Eigen::Index>(b.cols()));
    detail::MapMat<T> mc(c.v.data(), static_cast<Eigen::Index>(am), static_cast<Eigen::Index>(bn));
    if (!ta && !tb)
        mc.noalias() = ma * mb;
    else if (ta && !tb)
        mc.noalias() = ma.transpose() * mb;
    else if (!ta && tb)
        mc.noalias() = ma * mb.transpose();
    else
        mc.noalias() = ma.transpose() * mb.transpose();
    return c;
}

// C += op(A) * op(B)
template <typename T>
void matmul_acc(DenseArray<T>& c, const DenseArray<T>& a, bool ta, const DenseArray<T>& b, bool tb) {
    detail::ConstMapMat<T> ma(a.v.data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
    detail::ConstMapMat<T> mb(b.v.data(), static_cast<Eigen::Index>(b.rows()), static_cast<Eigen::Index>(b.cols()));
    detail::MapMat<T> mc(c.v.data(), static_cast<Eigen::Index>(c.rows()), static_cast<Eigen::Index>(c.cols()));
    if (!ta && !tb)
        mc.noalias() += ma * mb;
    else if (ta && !tb)
        mc.noalias() += ma.transpose() * mb;
    else if (!ta && tb)
        mc.noalias() += ma * mb.transpose();
    else
        mc.noalias() += ma.transpose() * mb.transpose();
}

}  // namespace mesh4d
