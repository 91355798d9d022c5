#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace uvga {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int e : s) {
        if (e <= 0) throw std::invalid_argument("tensor extent must be positive, got " + std::to_string(e));
        n *= e;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

/// Dense row-major tensor. The value buffer always holds exactly
/// prod(shape) elements; scalars use shape {1}.
template <class T>
struct Tensor {
    Shape shape;
    std::vector<T> v;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)) {
        v.assign(static_cast<size_t>(shape_numel(shape)), fill);
    }
    Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), v(std::move(values)) {
        if (static_cast<std::int64_t>(v.size()) != shape_numel(shape))
            throw std::invalid_argument("tensor value count " + std::to_string(v.size()) +
                                        " does not match shape " + shape_str(shape));
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s), T(0)); }
    static Tensor full(Shape s, T fill) { return Tensor(std::move(s), fill); }
    static Tensor scalar(T x) { return Tensor({1}, std::vector<T>{x}); }

    std::int64_t size() const { return static_cast<std::int64_t>(v.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    T& operator[](std::int64_t i) { return v[static_cast<size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return v[static_cast<size_t>(i)]; }

    T& at(int i, int j) { return v[static_cast<size_t>(i) * dim(1) + j]; }
    const T& at(int i, int j) const { return v[static_cast<size_t>(i) * dim(1) + j]; }
    T& at(int i, int j, int k) { return v[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k]; }
    const T& at(int i, int j, int k) const { return v[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (const T& x : v)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

    T item() const {
        if (v.size() != 1) throw std::logic_error("item() on non-scalar tensor " + shape_str(shape));
        return v[0];
    }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != size())
            throw std::invalid_argument("reshape " + shape_str(shape) + " -> " + shape_str(s) + " changes element count");
        Tensor out;
        out.shape = std::move(s);
        out.v = v;
        return out;
    }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.v.resize(v.size());
        for (size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
        return out;
    }
};

template <class T>
inline T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
    T m = T(0);
    for (std::int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace uvga
