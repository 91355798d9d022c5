#pragma once

#include <cmath>
#include <stdexcept>

#include "uvga/geometry.hpp"

namespace uvga {

/// Pinhole camera, OpenCV convention: x_cam = R (x_world) + t, camera looks
/// down +z, pixel u = fx * x/z + cx (pixel centers at integer + 0.5).
struct Camera {
    double fx = 0, fy = 0, cx = 0, cy = 0;
    int width = 0, height = 0;
    Quat<double> rot = Quat<double>::identity();  // world -> camera
    Vec3<double> trans{};
    double near = 0.01;

    void validate() const {
        if (fx <= 0 || fy <= 0) throw std::invalid_argument("camera: focal lengths must be positive");
        if (width <= 0 || height <= 0) throw std::invalid_argument("camera: image size must be positive");
        if (std::abs(rot.norm() - 1.0) > 1e-6) throw std::invalid_argument("camera: rotation not orthonormal");
        if (near <= 0) throw std::invalid_argument("camera: near plane must be positive");
    }

    Vec3<double> to_camera(const Vec3<double>& p_world) const { return rot.rotate(p_world) + trans; }

    /// Camera at `eye` looking at `target`, image up along world `up`.
    static Camera look_at(const Vec3<double>& eye, const Vec3<double>& target, const Vec3<double>& up,
                          double focal_px, int width, int height, double near_plane = 0.01) {
        const Vec3<double> f = (target - eye).normalized();
        Vec3<double> r = f.cross(up);
        if (r.norm() < 1e-9) r = f.cross({1.0, 0.0, 0.0});
        r = r.normalized();
        const Vec3<double> d = f.cross(r);  // image-down axis
        // rotation rows: right, down, forward
        const double m[9] = {r.x, r.y, r.z, d.x, d.y, d.z, f.x, f.y, f.z};
        Camera c;
        c.rot = quat_from_rows(m);
        c.trans = c.rot.rotate(eye) * -1.0;
        c.fx = c.fy = focal_px;
        c.cx = width / 2.0;
        c.cy = height / 2.0;
        c.width = width;
        c.height = height;
        c.near = near_plane;
        c.validate();
        return c;
    }

    static Quat<double> quat_from_rows(const double m[9]) {
        // Shepperd's method; m is row-major world->camera rotation
        Quat<double> q;
        const double tr = m[0] + m[4] + m[8];
        if (tr > 0) {
            const double s = std::sqrt(tr + 1.0) * 2.0;
            q = {0.25 * s, (m[7] - m[5]) / s, (m[2] - m[6]) / s, (m[3] - m[1]) / s};
        } else if (m[0] > m[4] && m[0] > m[8]) {
            const double s = std::sqrt(1.0 + m[0] - m[4] - m[8]) * 2.0;
            q = {(m[7] - m[5]) / s, 0.25 * s, (m[1] + m[3]) / s, (m[2] + m[6]) / s};
        } else if (m[4] > m[8]) {
            const double s = std::sqrt(1.0 + m[4] - m[0] - m[8]) * 2.0;
            q = {(m[2] - m[6]) / s, (m[1] + m[3]) / s, 0.25 * s, (m[5] + m[7]) / s};
        } else {
            const double s = std::sqrt(1.0 + m[8] - m[0] - m[4]) * 2.0;
            q = {(m[3] - m[1]) / s, (m[2] + m[6]) / s, (m[5] + m[7]) / s, 0.25 * s};
        }
        return q.normalized();
    }
};

}  // namespace uvga
