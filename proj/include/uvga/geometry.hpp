#pragma once

#include <array>
#include <cmath>
#include <stdexcept>

namespace uvga {

template <class T>
struct Vec3 {
    T x = 0, y = 0, z = 0;

    Vec3() = default;
    Vec3(T x_, T y_, T z_) : x(x_), y(y_), z(z_) {}

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(T s) const { return {x * s, y * s, z * s}; }
    Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }

    T dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    T norm() const { return std::sqrt(dot(*this)); }
    Vec3 normalized() const {
        const T n = norm();
        if (n == T(0)) throw std::domain_error("cannot normalize zero vector");
        return {x / n, y / n, z / n};
    }
};

/// Unit quaternion, stored (w, x, y, z).
template <class T>
struct Quat {
    T w = 1, x = 0, y = 0, z = 0;

    Quat() = default;
    Quat(T w_, T x_, T y_, T z_) : w(w_), x(x_), y(y_), z(z_) {}

    static Quat identity() { return {T(1), T(0), T(0), T(0)}; }

    static Quat from_axis_angle(const Vec3<T>& axis, T angle) {
        const Vec3<T> a = axis.normalized();
        const T h = angle / T(2);
        const T s = std::sin(h);
        return {std::cos(h), a.x * s, a.y * s, a.z * s};
    }

    T norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

    Quat normalized() const {
        const T n = norm();
        if (n == T(0)) throw std::domain_error("cannot normalize zero quaternion");
        return {w / n, x / n, y / n, z / n};
    }

    Quat conjugate() const { return {w, -x, -y, -z}; }

    /// Hamilton product.
    Quat operator*(const Quat& o) const {
        return {w * o.w - x * o.x - y * o.y - z * o.z,
                w * o.x + x * o.w + y * o.z - z * o.y,
                w * o.y - x * o.z + y * o.w + z * o.x,
                w * o.z + x * o.y - y * o.x + z * o.w};
    }

    Vec3<T> rotate(const Vec3<T>& v) const {
        const Quat p{T(0), v.x, v.y, v.z};
        const Quat r = (*this) * p * conjugate();
        return {r.x, r.y, r.z};
    }

    /// Row-major 3x3 rotation matrix.
    std::array<T, 9> to_matrix() const {
        const T xx = x * x, yy = y * y, zz = z * z;
        const T xy = x * y, xz = x * z, yz = y * z;
        const T wx = w * x, wy = w * y, wz = w * z;
        return {1 - 2 * (yy + zz), 2 * (xy - wz),     2 * (xz + wy),
                2 * (xy + wz),     1 - 2 * (xx + zz), 2 * (yz - wx),
                2 * (xz - wy),     2 * (yz + wx),     1 - 2 * (xx + yy)};
    }
};

/// Rigid transform y = R x + t with R given as a quaternion.
template <class T>
struct Rigid {
    Quat<T> rot = Quat<T>::identity();
    Vec3<T> trans{};

    Vec3<T> apply(const Vec3<T>& p) const { return rot.rotate(p) + trans; }

    Rigid compose(const Rigid& o) const {  // this after o
        return {rot * o.rot, rot.rotate(o.trans) + trans};
    }

    Rigid inverse() const {
        const Quat<T> ri = rot.conjugate();
        return {ri, ri.rotate(trans) * T(-1)};
    }
};

/// Row-major 3x4 affine matrix [R | t]; the LBS blend space.
template <class T>
struct Affine34 {
    std::array<T, 12> m{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0};

    static Affine34 identity() { return {}; }

    static Affine34 from_rigid(const Rigid<T>& r) {
        Affine34 a;
        const auto R = r.rot.to_matrix();
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) a.m[static_cast<size_t>(i) * 4 + j] = R[static_cast<size_t>(i) * 3 + j];
            a.m[static_cast<size_t>(i) * 4 + 3] = (i == 0) ? r.trans.x : (i == 1) ? r.trans.y : r.trans.z;
        }
        return a;
    }

    Vec3<T> apply(const Vec3<T>& p) const {
        return {m[0] * p.x + m[1] * p.y + m[2] * p.z + m[3],
                m[4] * p.x + m[5] * p.y + m[6] * p.z + m[7],
                m[8] * p.x + m[9] * p.y + m[10] * p.z + m[11]};
    }

    Affine34& add_scaled(const Affine34& o, T s) {
        for (size_t i = 0; i < 12; ++i) m[i] += s * o.m[i];
        return *this;
    }

    Affine34& set_zero() {
        m.fill(T(0));
        return *this;
    }
};

}  // namespace uvga
