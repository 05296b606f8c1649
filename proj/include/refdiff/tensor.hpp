#pragma once

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "refdiff/error.hpp"
#include "refdiff/rng.hpp"

namespace refdiff {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

// Dense row-major tensor. Storage scalar is a template parameter: float for
// training/inference, double for the finite-difference test mode.
template <typename S>
struct TensorT {
    Shape shape;
    std::vector<S> data;

    TensorT() = default;

    explicit TensorT(Shape sh) : shape(std::move(sh)) {
        for (int d : shape)
            if (d <= 0) throw dimension_error("tensor extent must be positive, got shape " + shape_str(shape));
        data.assign(size_t(shape_numel(shape)), S(0));
    }

    TensorT(Shape sh, std::vector<S> values) : shape(std::move(sh)), data(std::move(values)) {
        if (int64_t(data.size()) != shape_numel(shape))
            throw dimension_error("tensor data size " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    }

    int64_t numel() const { return int64_t(data.size()); }
    int rank() const { return int(shape.size()); }
    int dim(int i) const { return shape[size_t(i)]; }

    S& operator[](int64_t i) { return data[size_t(i)]; }
    const S& operator[](int64_t i) const { return data[size_t(i)]; }

    S* ptr() { return data.data(); }
    const S* ptr() const { return data.data(); }

    // Row-major offset for a 4-d index; used by corpus/eval helpers.
    int64_t offset4(int a, int b, int c, int d) const {
        return ((int64_t(a) * shape[1] + b) * shape[2] + c) * shape[3] + d;
    }

    static TensorT zeros(Shape sh) { return TensorT(std::move(sh)); }

    static TensorT full(Shape sh, S v) {
        TensorT t(std::move(sh));
        for (auto& x : t.data) x = v;
        return t;
    }

    static TensorT randn(Shape sh, Rng& rng, S scale = S(1)) {
        TensorT t(std::move(sh));
        for (auto& x : t.data) x = S(rng.normal()) * scale;
        return t;
    }

    static TensorT eye(int n) {
        TensorT t(Shape{n, n});
        for (int i = 0; i < n; ++i) t.data[size_t(i) * n + i] = S(1);
        return t;
    }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (S v : data)
            if (!std::isfinite(double(v))) return false;
        return true;
    }

    template <typename T>
    TensorT<T> cast() const {
        TensorT<T> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = T(data[i]);
        return out;
    }
};

using Tensor   = TensorT<float>;
using Tensor64 = TensorT<double>;

}  // namespace refdiff
