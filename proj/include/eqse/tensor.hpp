#pragma once

// Dense row-major tensor of float or double. Shape/broadcast bookkeeping
// lives here; the autodiff tape (autodiff.hpp) builds on top.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "eqse/common.hpp"

namespace eqse {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    out += ")";
    return out;
}

template <typename Real>
struct Tensor {
    Shape shape;
    std::vector<Real> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(checked_numel(shape), Real(0)) {}
    Tensor(Shape s, std::vector<Real> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != checked_numel(shape))
            throw NumericError("tensor data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    }

    static size_t checked_numel(const Shape& s) {
        for (int64_t d : s)
            if (d <= 0) throw NumericError("tensor extents must be positive, got " + shape_str(s));
        return static_cast<size_t>(shape_numel(s));
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }

    Real& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    const Real& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    /// Element access for 2-D tensors.
    Real& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * shape[1] + c)]; }
    const Real& at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * shape[1] + c)]; }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

    static Tensor full(Shape s, Real v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor scalar(Real v) { return Tensor({1}, {v}); }

    static Tensor randn(Shape s, Rng& rng, Real stddev = Real(1)) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = static_cast<Real>(rng.normal()) * stddev;
        return t;
    }

    static Tensor uniform(Shape s, Rng& rng, Real lo, Real hi) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = static_cast<Real>(rng.uniform(lo, hi));
        return t;
    }

    bool all_finite() const {
        for (Real v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    template <typename Other>
    Tensor<Other> cast() const {
        Tensor<Other> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<Other>(data[i]);
        return out;
    }
};

inline std::vector<int64_t> row_strides(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[static_cast<size_t>(i)] = acc;
        acc *= s[static_cast<size_t>(i)];
    }
    return st;
}

/// NumPy-style broadcast of two shapes (right-aligned, singletons expand).
/// Subsumes the trailing-singleton-axes case; mismatched extents throw.
inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
    Shape out(r);
    for (size_t i = 0; i < r; ++i) {
        int64_t da = i < r - ra ? 1 : a[i - (r - ra)];
        int64_t db = i < r - rb ? 1 : b[i - (r - rb)];
        if (da != db && da != 1 && db != 1)
            throw NumericError(std::string(op) + ": shapes not broadcastable " + shape_str(a) + " vs " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

/// Strides of `s` viewed as shape `out` with broadcast axes pinned to 0.
inline std::vector<int64_t> broadcast_strides(const Shape& s, const Shape& out) {
    std::vector<int64_t> st = row_strides(s);
    std::vector<int64_t> bs(out.size(), 0);
    size_t off = out.size() - s.size();
    for (size_t i = 0; i < s.size(); ++i)
        bs[off + i] = (s[i] == 1 && out[off + i] != 1) ? 0 : st[i];
    return bs;
}

} // namespace eqse
