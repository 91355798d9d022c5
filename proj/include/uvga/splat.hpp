#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <memory>
#include <numeric>
#include <vector>

#include "uvga/camera.hpp"
#include "uvga/geometry.hpp"
#include "uvga/graph.hpp"
#include "uvga/maps.hpp"
#include "uvga/rig.hpp"
#include "uvga/tensor.hpp"
#include "uvga/uvmap.hpp"

namespace uvga::splat {

// Software 3D Gaussian splatting. Conventions (all documented constants):
//  - 2D covariance gets a low-pass blur of 0.3 px^2 on the diagonal
//  - Gaussians are evaluated inside their 3-sigma ellipse (power >= -4.5);
//    outside contributions are dropped in forward AND backward
//  - per-pixel blend weight w = alpha * G is clamped to 0.9999 (clamped
//    weights get zero gradient)
//  - compositing is front-to-back in (depth, original index) order;
//    bit-identical for a fixed scene
inline constexpr double kBlurPx2 = 0.3;
inline constexpr double kPowerCutoff = -4.5;
inline constexpr double kMaxBlendWeight = 0.9999;

template <class T>
struct GaussianCloud {
    Tensor<T> position;  // [M,3]
    Tensor<T> rotation;  // [M,4] (w,x,y,z); normalized internally
    Tensor<T> scale;     // [M,3] positive
    Tensor<T> opacity;   // [M] in [0,1]
    Tensor<T> color;     // [M,3] in [0,1]

    /// A default-constructed cloud (all tensors empty) is the empty cloud.
    int count() const { return position.rank() == 2 ? position.dim(0) : 0; }

    void validate() const {
        const int M = count();
        if (M == 0) {
            if (position.size() + rotation.size() + scale.size() + opacity.size() + color.size() != 0)
                throw std::invalid_argument("gaussian cloud: empty cloud must have all-empty tensors");
            return;
        }
        if (position.shape != Shape{M, 3} || rotation.shape != Shape{M, 4} || scale.shape != Shape{M, 3} ||
            opacity.shape != Shape{M} || color.shape != Shape{M, 3})
            throw std::invalid_argument("gaussian cloud: inconsistent shapes");
    }
};

template <class T>
struct ProjectedSplat {
    T mx = 0, my = 0;             // 2D mean (pixels)
    T sxx = 0, sxy = 0, syy = 0;  // 2D covariance (blur included)
    T depth = 0;                  // camera-space z
    bool visible = false;
};

struct RenderStats {
    int total = 0;
    int culled = 0;
    double project_ms = 0, sort_ms = 0, composite_ms = 0;
};

namespace detail {
template <class T>
std::array<T, 9> quat_to_matrix_normalized(const T* q, T* norm_out = nullptr) {
    const T n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    const T w = q[0] / n, x = q[1] / n, y = q[2] / n, z = q[3] / n;
    if (norm_out) *norm_out = n;
    return {1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)};
}
}  // namespace detail

/// Projects every primitive: camera transform, near culling, covariance
/// Sigma2D = J W Sigma W^T J^T + blur*I, depth = camera z.
template <class T>
std::vector<ProjectedSplat<T>> project(const GaussianCloud<T>& cloud, const Camera& cam,
                                       RenderStats* stats = nullptr) {
    cloud.validate();
    cam.validate();
    const int M = cloud.count();
    std::vector<ProjectedSplat<T>> out(static_cast<size_t>(M));
    if (M == 0) {
        if (stats) stats->total = stats->culled = 0;
        return out;
    }
    const auto Wm = cam.rot.to_matrix();
    int culled = 0;
    for (int m = 0; m < M; ++m) {
        const Vec3<double> pw{static_cast<double>(cloud.position.at(m, 0)),
                              static_cast<double>(cloud.position.at(m, 1)),
                              static_cast<double>(cloud.position.at(m, 2))};
        const Vec3<double> pc = cam.to_camera(pw);
        auto& s = out[static_cast<size_t>(m)];
        if (pc.z <= cam.near) {
            ++culled;
            continue;
        }
        s.visible = true;
        s.depth = static_cast<T>(pc.z);
        s.mx = static_cast<T>(cam.fx * pc.x / pc.z + cam.cx);
        s.my = static_cast<T>(cam.fy * pc.y / pc.z + cam.cy);

        T q[4] = {cloud.rotation.at(m, 0), cloud.rotation.at(m, 1), cloud.rotation.at(m, 2),
                  cloud.rotation.at(m, 3)};
        const auto R = detail::quat_to_matrix_normalized(q);
        const T s0 = cloud.scale.at(m, 0), s1 = cloud.scale.at(m, 1), s2 = cloud.scale.at(m, 2);
        // Sigma_world = R diag(s^2) R^T
        T Sw[9];
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                Sw[i * 3 + j] = R[i * 3 + 0] * s0 * s0 * R[j * 3 + 0] + R[i * 3 + 1] * s1 * s1 * R[j * 3 + 1] +
                                R[i * 3 + 2] * s2 * s2 * R[j * 3 + 2];
        // Sigma_cam = W Sw W^T
        T WS[9];
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                T acc = 0;
                for (int k = 0; k < 3; ++k) acc += static_cast<T>(Wm[static_cast<size_t>(i) * 3 + k]) * Sw[k * 3 + j];
                WS[i * 3 + j] = acc;
            }
        T Sc[9];
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                T acc = 0;
                for (int k = 0; k < 3; ++k) acc += WS[i * 3 + k] * static_cast<T>(Wm[static_cast<size_t>(j) * 3 + k]);
                Sc[i * 3 + j] = acc;
            }
        // J = [[fx/z, 0, -fx x/z^2], [0, fy/z, -fy y/z^2]]
        const T z = static_cast<T>(pc.z);
        const T j00 = static_cast<T>(cam.fx) / z, j02 = static_cast<T>(-cam.fx * pc.x) / (z * z);
        const T j11 = static_cast<T>(cam.fy) / z, j12 = static_cast<T>(-cam.fy * pc.y) / (z * z);
        // Sigma2 = J Sc J^T + blur I
        const T a0 = j00 * Sc[0] + j02 * Sc[6];
        const T a1 = j00 * Sc[1] + j02 * Sc[7];
        const T a2 = j00 * Sc[2] + j02 * Sc[8];
        const T b0 = j11 * Sc[3] + j12 * Sc[6];
        const T b1 = j11 * Sc[4] + j12 * Sc[7];
        const T b2 = j11 * Sc[5] + j12 * Sc[8];
        s.sxx = a0 * j00 + a2 * j02 + static_cast<T>(kBlurPx2);
        s.sxy = a1 * j11 + a2 * j12;
        s.syy = b1 * j11 + b2 * j12 + static_cast<T>(kBlurPx2);
    }
    if (stats) {
        stats->total = M;
        stats->culled = culled;
    }
    return out;
}

/// Depth-sorted visible indices, ties broken by original index ascending.
template <class T>
std::vector<int> depth_order(const std::vector<ProjectedSplat<T>>& proj) {
    std::vector<int> order;
    order.reserve(proj.size());
    for (size_t i = 0; i < proj.size(); ++i)
        if (proj[i].visible) order.push_back(static_cast<int>(i));
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const T da = proj[static_cast<size_t>(a)].depth, db = proj[static_cast<size_t>(b)].depth;
        if (da != db) return da < db;
        return a < b;
    });
    return order;
}

template <class T>
struct SplatInvCov {
    T a, b, c;    // inverse 2D covariance
    int x0, x1, y0, y1;
    bool skip;
};

namespace detail {
template <class T>
SplatInvCov<T> footprint(const ProjectedSplat<T>& s, int width, int height) {
    SplatInvCov<T> f{};
    const T det = s.sxx * s.syy - s.sxy * s.sxy;
    if (det <= T(0)) {
        f.skip = true;
        return f;
    }
    f.a = s.syy / det;
    f.b = -s.sxy / det;
    f.c = s.sxx / det;
    const T mid = (s.sxx + s.syy) / 2;
    const T lam = mid + std::sqrt(std::max(T(0), mid * mid - det));  // largest eigenvalue
    const T r = T(3) * std::sqrt(lam);
    f.x0 = std::max(0, static_cast<int>(std::floor(s.mx - r)));
    f.x1 = std::min(width - 1, static_cast<int>(std::ceil(s.mx + r)));
    f.y0 = std::max(0, static_cast<int>(std::floor(s.my - r)));
    f.y1 = std::min(height - 1, static_cast<int>(std::ceil(s.my + r)));
    f.skip = f.x0 > f.x1 || f.y0 > f.y1;
    return f;
}
}  // namespace detail

/// Front-to-back alpha compositing over the background. Output [4,H,W]:
/// RGB plus accumulated alpha.
template <class T>
Tensor<T> render(const GaussianCloud<T>& cloud, const Camera& cam, const std::array<T, 3>& background,
                 RenderStats* stats = nullptr) {
    namespace chrono = std::chrono;
    const auto t0 = chrono::steady_clock::now();
    const auto proj = project(cloud, cam, stats);
    const auto t1 = chrono::steady_clock::now();
    const auto order = depth_order(proj);
    const auto t2 = chrono::steady_clock::now();

    const int H = cam.height, W = cam.width;
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    Tensor<T> out({4, H, W});
    std::vector<T> trans(static_cast<size_t>(plane), T(1));

    for (int idx : order) {
        const auto& s = proj[static_cast<size_t>(idx)];
        const auto f = detail::footprint(s, W, H);
        if (f.skip) continue;
        const T alpha = cloud.opacity[idx];
        const T cr = cloud.color.at(idx, 0), cg = cloud.color.at(idx, 1), cb = cloud.color.at(idx, 2);
        for (int y = f.y0; y <= f.y1; ++y) {
            for (int x = f.x0; x <= f.x1; ++x) {
                const T dx = static_cast<T>(x) + T(0.5) - s.mx;
                const T dy = static_cast<T>(y) + T(0.5) - s.my;
                const T power = T(-0.5) * (f.a * dx * dx + 2 * f.b * dx * dy + f.c * dy * dy);
                if (power < static_cast<T>(kPowerCutoff)) continue;
                T w = alpha * std::exp(power);
                if (w > static_cast<T>(kMaxBlendWeight)) w = static_cast<T>(kMaxBlendWeight);
                const std::int64_t p = static_cast<std::int64_t>(y) * W + x;
                const T tw = w * trans[static_cast<size_t>(p)];
                out[0 * plane + p] += cr * tw;
                out[1 * plane + p] += cg * tw;
                out[2 * plane + p] += cb * tw;
                trans[static_cast<size_t>(p)] *= (T(1) - w);
            }
        }
    }
    for (std::int64_t p = 0; p < plane; ++p) {
        const T tr = trans[static_cast<size_t>(p)];
        out[0 * plane + p] += background[0] * tr;
        out[1 * plane + p] += background[1] * tr;
        out[2 * plane + p] += background[2] * tr;
        out[3 * plane + p] = T(1) - tr;
    }
    const auto t3 = chrono::steady_clock::now();
    if (stats) {
        stats->project_ms = chrono::duration<double, std::milli>(t1 - t0).count();
        stats->sort_ms = chrono::duration<double, std::milli>(t2 - t1).count();
        stats->composite_ms = chrono::duration<double, std::milli>(t3 - t2).count();
    }
    return out;
}

template <class T>
struct CloudGrads {
    Tensor<T> position, rotation, scale, opacity, color;
};

/// Gradients of render() w.r.t. every Gaussian attribute, given the frame
/// gradient [4,H,W] (RGB + alpha channels). Replays the forward compositing
/// order; the depth sort and footprint cutoffs are treated as constant.
template <class T>
CloudGrads<T> render_backward(const GaussianCloud<T>& cloud, const Camera& cam,
                              const std::array<T, 3>& background, const Tensor<T>& frame_grad) {
    cloud.validate();
    const int H = cam.height, W = cam.width;
    if (frame_grad.shape != Shape{4, H, W})
        throw std::invalid_argument("render_backward: frame gradient must be [4,H,W]");
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    const int M = cloud.count();
    if (M == 0) return CloudGrads<T>{};

    const auto proj = project(cloud, cam);
    const auto order = depth_order(proj);

    // pass 1: per-pixel final transmittance and foreground color
    std::vector<T> t_final(static_cast<size_t>(plane), T(1));
    std::vector<T> fg(static_cast<size_t>(plane) * 3, T(0));
    for (int idx : order) {
        const auto& s = proj[static_cast<size_t>(idx)];
        const auto f = detail::footprint(s, W, H);
        if (f.skip) continue;
        const T alpha = cloud.opacity[idx];
        for (int y = f.y0; y <= f.y1; ++y)
            for (int x = f.x0; x <= f.x1; ++x) {
                const T dx = static_cast<T>(x) + T(0.5) - s.mx;
                const T dy = static_cast<T>(y) + T(0.5) - s.my;
                const T power = T(-0.5) * (f.a * dx * dx + 2 * f.b * dx * dy + f.c * dy * dy);
                if (power < static_cast<T>(kPowerCutoff)) continue;
                T w = alpha * std::exp(power);
                if (w > static_cast<T>(kMaxBlendWeight)) w = static_cast<T>(kMaxBlendWeight);
                const std::int64_t p = static_cast<std::int64_t>(y) * W + x;
                const T tw = w * t_final[static_cast<size_t>(p)];
                for (int ch = 0; ch < 3; ++ch) fg[static_cast<size_t>(p) * 3 + ch] += cloud.color.at(idx, ch) * tw;
                t_final[static_cast<size_t>(p)] *= (T(1) - w);
            }
    }

    CloudGrads<T> grads{Tensor<T>::zeros({M, 3}), Tensor<T>::zeros({M, 4}), Tensor<T>::zeros({M, 3}),
                        Tensor<T>::zeros({M}), Tensor<T>::zeros({M, 3})};

    // pass 2: walk front-to-back again with running prefix state
    std::vector<T> trans(static_cast<size_t>(plane), T(1));
    std::vector<T> front(static_cast<size_t>(plane) * 3, T(0));
    const auto Wm = cam.rot.to_matrix();

    for (int idx : order) {
        const auto& s = proj[static_cast<size_t>(idx)];
        const auto f = detail::footprint(s, W, H);
        if (f.skip) continue;
        const T alpha = cloud.opacity[idx];
        const T col[3] = {cloud.color.at(idx, 0), cloud.color.at(idx, 1), cloud.color.at(idx, 2)};

        T d_mx = 0, d_my = 0, d_ia = 0, d_ib = 0, d_ic = 0, d_alpha = 0;

        for (int y = f.y0; y <= f.y1; ++y) {
            for (int x = f.x0; x <= f.x1; ++x) {
                const T dx = static_cast<T>(x) + T(0.5) - s.mx;
                const T dy = static_cast<T>(y) + T(0.5) - s.my;
                const T power = T(-0.5) * (f.a * dx * dx + 2 * f.b * dx * dy + f.c * dy * dy);
                if (power < static_cast<T>(kPowerCutoff)) continue;
                const T G = std::exp(power);
                T w = alpha * G;
                const bool clamped = w > static_cast<T>(kMaxBlendWeight);
                if (clamped) w = static_cast<T>(kMaxBlendWeight);
                const std::int64_t p = static_cast<std::int64_t>(y) * W + x;
                const T Ti = trans[static_cast<size_t>(p)];
                const T tw = w * Ti;

                const T gr = frame_grad[0 * plane + p], gg = frame_grad[1 * plane + p],
                        gb = frame_grad[2 * plane + p], ga = frame_grad[3 * plane + p];

                // color gradient: dC/dc_i = w T_i
                grads.color.at(idx, 0) += gr * tw;
                grads.color.at(idx, 1) += gg * tw;
                grads.color.at(idx, 2) += gb * tw;

                // blend-weight gradient
                T dw = 0;
                const T om = T(1) - w;
                const T g3[3] = {gr, gg, gb};
                for (int ch = 0; ch < 3; ++ch) {
                    const T behind = fg[static_cast<size_t>(p) * 3 + ch] - front[static_cast<size_t>(p) * 3 + ch] -
                                     col[ch] * tw;
                    dw += g3[ch] * (col[ch] * Ti - (behind + background[ch] * t_final[static_cast<size_t>(p)]) / om);
                }
                dw += ga * t_final[static_cast<size_t>(p)] / om;

                if (!clamped) {
                    d_alpha += dw * G;
                    const T dG = dw * alpha * G;  // d/dpower folded: dG * dpower/d{..}
                    d_mx += dG * (f.a * dx + f.b * dy);
                    d_my += dG * (f.b * dx + f.c * dy);
                    d_ia += dG * (T(-0.5) * dx * dx);
                    d_ib += dG * (-dx * dy);
                    d_ic += dG * (T(-0.5) * dy * dy);
                }

                // advance prefix state
                for (int ch = 0; ch < 3; ++ch) front[static_cast<size_t>(p) * 3 + ch] += col[ch] * tw;
                trans[static_cast<size_t>(p)] *= om;
            }
        }

        grads.opacity[idx] += d_alpha;

        // inverse-covariance grads -> covariance grads: dSigma = -Inv G_inv Inv
        const T det = s.sxx * s.syy - s.sxy * s.sxy;
        const T ia = s.syy / det, ib = -s.sxy / det, ic = s.sxx / det;
        const T gi[4] = {d_ia, d_ib / 2, d_ib / 2, d_ic};  // full-matrix grad of inverse
        T gs[4];  // full-matrix grad of Sigma2
        {
            const T inv[4] = {ia, ib, ib, ic};
            T tmp[4];
            for (int i = 0; i < 2; ++i)
                for (int j = 0; j < 2; ++j) tmp[i * 2 + j] = inv[i * 2 + 0] * gi[0 * 2 + j] + inv[i * 2 + 1] * gi[1 * 2 + j];
            for (int i = 0; i < 2; ++i)
                for (int j = 0; j < 2; ++j)
                    gs[i * 2 + j] = -(tmp[i * 2 + 0] * inv[0 * 2 + j] + tmp[i * 2 + 1] * inv[1 * 2 + j]);
        }

        // recompute projection intermediates for this splat
        const Vec3<double> pw{static_cast<double>(cloud.position.at(idx, 0)),
                              static_cast<double>(cloud.position.at(idx, 1)),
                              static_cast<double>(cloud.position.at(idx, 2))};
        const Vec3<double> pc = cam.to_camera(pw);
        const T z = static_cast<T>(pc.z), xc = static_cast<T>(pc.x), yc = static_cast<T>(pc.y);
        const T fx = static_cast<T>(cam.fx), fy = static_cast<T>(cam.fy);
        const T J[6] = {fx / z, 0, -fx * xc / (z * z), 0, fy / z, -fy * yc / (z * z)};

        T q[4] = {cloud.rotation.at(idx, 0), cloud.rotation.at(idx, 1), cloud.rotation.at(idx, 2),
                  cloud.rotation.at(idx, 3)};
        T qnorm;
        const auto R = detail::quat_to_matrix_normalized(q, &qnorm);
        const T sc[3] = {cloud.scale.at(idx, 0), cloud.scale.at(idx, 1), cloud.scale.at(idx, 2)};
        T Sw[9];
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                Sw[i * 3 + j] = R[i * 3 + 0] * sc[0] * sc[0] * R[j * 3 + 0] +
                                R[i * 3 + 1] * sc[1] * sc[1] * R[j * 3 + 1] +
                                R[i * 3 + 2] * sc[2] * sc[2] * R[j * 3 + 2];
        T Scam[9], WS[9];
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                T acc = 0;
                for (int k = 0; k < 3; ++k) acc += static_cast<T>(Wm[static_cast<size_t>(i) * 3 + k]) * Sw[k * 3 + j];
                WS[i * 3 + j] = acc;
            }
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                T acc = 0;
                for (int k = 0; k < 3; ++k) acc += WS[i * 3 + k] * static_cast<T>(Wm[static_cast<size_t>(j) * 3 + k]);
                Scam[i * 3 + j] = acc;
            }

        // gScam = J^T gs J ; gJ = (gs + gs^T) J Scam
        T gScam[9];
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                gScam[i * 3 + j] = J[0 * 3 + i] * (gs[0] * J[0 * 3 + j] + gs[1] * J[1 * 3 + j]) +
                                   J[1 * 3 + i] * (gs[2] * J[0 * 3 + j] + gs[3] * J[1 * 3 + j]);
        T gJ[6];
        {
            // dL/dJ = (gs + gs^T) J Scam
            const T gsym[4] = {2 * gs[0], gs[1] + gs[2], gs[1] + gs[2], 2 * gs[3]};
            T JS[6];
            for (int i = 0; i < 2; ++i)
                for (int j = 0; j < 3; ++j) {
                    T acc = 0;
                    for (int k = 0; k < 3; ++k) acc += J[i * 3 + k] * Scam[k * 3 + j];
                    JS[i * 3 + j] = acc;
                }
            for (int i = 0; i < 2; ++i)
                for (int j = 0; j < 3; ++j)
                    gJ[i * 3 + j] = gsym[i * 2 + 0] * JS[0 * 3 + j] + gsym[i * 2 + 1] * JS[1 * 3 + j];
        }

        // gSw = W^T gScam W
        T gSw[9], tmp9[9];
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                T acc = 0;
                for (int k = 0; k < 3; ++k) acc += static_cast<T>(Wm[static_cast<size_t>(k) * 3 + i]) * gScam[k * 3 + j];
                tmp9[i * 3 + j] = acc;
            }
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                T acc = 0;
                for (int k = 0; k < 3; ++k) acc += tmp9[i * 3 + k] * static_cast<T>(Wm[static_cast<size_t>(k) * 3 + j]);
                gSw[i * 3 + j] = acc;
            }

        // scale grads: Sw = R D R^T, D = diag(s^2)
        for (int k = 0; k < 3; ++k) {
            T acc = 0;
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) acc += gSw[i * 3 + j] * R[i * 3 + k] * R[j * 3 + k];
            grads.scale.at(idx, k) += acc * 2 * sc[k];
        }

        // rotation grads: dR = (gSw + gSw^T) R D, then chain through the
        // normalized-quaternion-to-matrix map
        T gR[9];
        for (int i = 0; i < 3; ++i)
            for (int k = 0; k < 3; ++k) {
                T acc = 0;
                for (int j = 0; j < 3; ++j) acc += (gSw[i * 3 + j] + gSw[j * 3 + i]) * R[j * 3 + k];
                gR[i * 3 + k] = acc * sc[k] * sc[k];
            }
        {
            const T w = q[0] / qnorm, x = q[1] / qnorm, y = q[2] / qnorm, zq = q[3] / qnorm;
            // dR/d(unit quaternion components)
            T gq[4] = {0, 0, 0, 0};
            gq[0] += 2 * (-zq * gR[1] + y * gR[2] + zq * gR[3] - x * gR[5] - y * gR[6] + x * gR[7]);
            gq[1] += 2 * (y * gR[1] + zq * gR[2] + y * gR[3] - 2 * x * gR[4] - w * gR[5] + zq * gR[6] + w * gR[7] -
                          2 * x * gR[8]);
            gq[2] += 2 * (-2 * y * gR[0] + x * gR[1] + w * gR[2] + x * gR[3] + zq * gR[5] - w * gR[6] + zq * gR[7] -
                          2 * y * gR[8]);
            gq[3] += 2 * (-2 * zq * gR[0] - w * gR[1] + x * gR[2] + w * gR[3] - 2 * zq * gR[4] + y * gR[5] +
                          x * gR[6] + y * gR[7]);
            // through normalization: (I - uu^T)/n
            const T u[4] = {w, x, y, zq};
            T dot = 0;
            for (int i = 0; i < 4; ++i) dot += gq[i] * u[i];
            for (int i = 0; i < 4; ++i) grads.rotation.at(idx, i) += (gq[i] - dot * u[i]) / qnorm;
        }

        // mean + Jacobian grads -> camera-space point grads
        T dxc = d_mx * fx / z;
        T dyc = d_my * fy / z;
        T dzc = -d_mx * fx * xc / (z * z) - d_my * fy * yc / (z * z);
        dxc += gJ[2] * (-fx / (z * z));
        dyc += gJ[5] * (-fy / (z * z));
        dzc += gJ[0] * (-fx / (z * z)) + gJ[4] * (-fy / (z * z)) + gJ[2] * (2 * fx * xc / (z * z * z)) +
               gJ[5] * (2 * fy * yc / (z * z * z));

        // world grads: p_cam = W p + t  =>  dp_world = W^T dp_cam
        for (int d = 0; d < 3; ++d)
            grads.position.at(idx, d) += static_cast<T>(Wm[0 * 3 + d]) * dxc + static_cast<T>(Wm[1 * 3 + d]) * dyc +
                                         static_cast<T>(Wm[2 * 3 + d]) * dzc;
    }
    return grads;
}

// ---------------------------------------------------------------------------
// Cloud assembly from UV maps: valid texels become primitives, LBS-posed.
// ---------------------------------------------------------------------------

template <class T>
GaussianCloud<T> gather_cloud(const maps::GaussianMapSet<T>& m, const uvmap::TexelBinding& binding,
                              const rig::HeadRig& r, const rig::Pose& pose) {
    if (m.height != binding.height || m.width != binding.width)
        throw std::invalid_argument("gather_cloud: binding resolution does not match maps");
    const int M = binding.valid_count();
    if (M == 0) return GaussianCloud<T>{};  // empty cloud
    GaussianCloud<T> cloud{Tensor<T>({M, 3}), Tensor<T>({M, 4}), Tensor<T>({M, 3}), Tensor<T>({M}),
                           Tensor<T>({M, 3})};
    const std::int64_t plane = static_cast<std::int64_t>(m.height) * m.width;
    Tensor<double> pos64({M, 3});
    Tensor<double> rot64({M, 4});
    for (int i = 0; i < M; ++i) {
        const int flat = binding.valid_index[static_cast<size_t>(i)];
        for (int d = 0; d < 3; ++d) {
            pos64.at(i, d) = static_cast<double>(m.position[d * plane + flat]);
            cloud.scale.at(i, d) = m.scale[d * plane + flat];
            cloud.color.at(i, d) = m.color[d * plane + flat];
        }
        for (int d = 0; d < 4; ++d) rot64.at(i, d) = static_cast<double>(m.rotation[d * plane + flat]);
        cloud.opacity[i] = m.opacity[flat];
    }
    const Tensor<double> weights = uvmap::valid_texel_skin_weights(r, binding);
    const auto posed = rig::lbs(r, pose, pos64, &rot64, weights);
    cloud.position = posed.points.template cast<T>();
    cloud.rotation = posed.rotations.template cast<T>();
    return cloud;
}

// ---------------------------------------------------------------------------
// Graph integration: splat_render as a custom differentiable node.
// ---------------------------------------------------------------------------

/// pos [M,3], rot [M,4], scale [M,3], opacity [M], color [M,3] -> [4,H,W].
template <class T>
typename Graph<T>::Id splat_render_node(Graph<T>& g, typename Graph<T>::Id pos, typename Graph<T>::Id rot,
                                        typename Graph<T>::Id scale, typename Graph<T>::Id opacity,
                                        typename Graph<T>::Id color, const Camera& cam,
                                        const std::array<T, 3>& background, RenderStats* stats = nullptr) {
    GaussianCloud<T> cloud{g.value(pos), g.value(rot), g.value(scale), g.value(opacity), g.value(color)};
    Tensor<T> frame = render(cloud, cam, background, stats);
    auto backward = [pos, rot, scale, opacity, color, cam, background](Graph<T>& gg, typename Graph<T>::Id id) {
        const auto& node = gg.node(id);
        GaussianCloud<T> c{gg.value(pos), gg.value(rot), gg.value(scale), gg.value(opacity), gg.value(color)};
        const CloudGrads<T> grads = render_backward(c, cam, background, node.grad);
        gg.accum_grad(pos, grads.position);
        gg.accum_grad(rot, grads.rotation);
        gg.accum_grad(scale, grads.scale);
        gg.accum_grad(opacity, grads.opacity);
        gg.accum_grad(color, grads.color);
    };
    return g.custom({pos, rot, scale, opacity, color}, std::move(frame), std::move(backward), "splat_render");
}

}  // namespace uvga::splat
