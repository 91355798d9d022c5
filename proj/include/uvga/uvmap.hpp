#pragma once

#include <cmath>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "uvga/rig.hpp"
#include "uvga/tensor.hpp"

namespace uvga::uvmap {

/// Fixed texel -> (face, barycentric) surface binding. A texel is valid when
/// its center lies inside some UV triangle; ties on shared edges resolve to
/// the lower face index.
struct TexelBinding {
    int width = 0, height = 0;
    struct Texel {
        int face = -1;
        double b0 = 0, b1 = 0, b2 = 0;
    };
    std::vector<Texel> texels;      // row-major, y * width + x
    std::vector<int> valid_index;   // flat indices of valid texels, ascending

    bool is_valid(int flat) const { return texels[static_cast<size_t>(flat)].face >= 0; }
    int valid_count() const { return static_cast<int>(valid_index.size()); }

    /// Texel center in UV coordinates.
    static void center(int x, int y, int w, int h, double& u, double& v) {
        u = (x + 0.5) / w;
        v = (y + 0.5) / h;
    }
};

/// Rasterizes the rig's UV layout into a texel binding. Throws when two UV
/// triangles overlap with strictly interior coverage (shared edges are fine).
inline TexelBinding bind_texels(const rig::HeadRig& r, int height, int width) {
    if (height < 8 || width < 8) throw std::invalid_argument("bind_texels: resolution must be at least 8x8");
    TexelBinding b;
    b.width = width;
    b.height = height;
    b.texels.assign(static_cast<size_t>(width) * height, {});
    std::vector<double> claimed_minb(static_cast<size_t>(width) * height, 0.0);
    std::set<std::pair<int, int>> overlaps;
    const double interior = 1e-7;

    for (int f = 0; f < r.face_count(); ++f) {
        const double ax = r.uv.at(f, 0, 0), ay = r.uv.at(f, 0, 1);
        const double bx = r.uv.at(f, 1, 0), by = r.uv.at(f, 1, 1);
        const double cx = r.uv.at(f, 2, 0), cy = r.uv.at(f, 2, 1);
        const double lox = std::min({ax, bx, cx}), hix = std::max({ax, bx, cx});
        const double loy = std::min({ay, by, cy}), hiy = std::max({ay, by, cy});
        const int x0 = std::max(0, static_cast<int>(std::floor(lox * width - 0.5)));
        const int x1 = std::min(width - 1, static_cast<int>(std::ceil(hix * width)));
        const int y0 = std::max(0, static_cast<int>(std::floor(loy * height - 0.5)));
        const int y1 = std::min(height - 1, static_cast<int>(std::ceil(hiy * height)));
        const double det = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax);
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                double u, v;
                TexelBinding::center(x, y, width, height, u, v);
                const double px = u - ax, py = v - ay;
                const double b1 = (px * (cy - ay) - py * (cx - ax)) / det;
                const double b2 = ((bx - ax) * py - (by - ay) * px) / det;
                const double b0 = 1.0 - b1 - b2;
                const double minb = std::min({b0, b1, b2});
                if (minb < -1e-12) continue;  // outside
                const int flat = y * width + x;
                auto& t = b.texels[static_cast<size_t>(flat)];
                if (t.face >= 0) {
                    if (minb > interior && claimed_minb[static_cast<size_t>(flat)] > interior)
                        overlaps.insert({t.face, f});
                    continue;  // lower face index keeps the texel
                }
                t.face = f;
                t.b0 = b0;
                t.b1 = b1;
                t.b2 = b2;
                claimed_minb[static_cast<size_t>(flat)] = minb;
            }
        }
    }
    if (!overlaps.empty()) {
        std::string msg = "bind_texels: overlapping uv triangles:";
        int shown = 0;
        for (const auto& [fa, fb] : overlaps) {
            msg += " (" + std::to_string(fa) + "," + std::to_string(fb) + ")";
            if (++shown == 8) {
                msg += " ...";
                break;
            }
        }
        throw std::runtime_error(msg);
    }
    for (int i = 0; i < width * height; ++i)
        if (b.texels[static_cast<size_t>(i)].face >= 0) b.valid_index.push_back(i);
    return b;
}

/// Samples deformed vertex positions into UV space: valid texel = barycentric
/// blend of its face's vertices, invalid texels zero. Returns [3,H,W];
/// optional validity mask [H,W].
inline Tensor<double> uv_position_map(const rig::HeadRig& r, const Tensor<double>& deformed_vertices,
                                      const TexelBinding& b, Tensor<double>* mask_out = nullptr) {
    if (deformed_vertices.shape != Shape{r.vertex_count(), 3})
        throw std::invalid_argument("uv_position_map: vertices must be [V,3] for this rig");
    if (b.width <= 0 || b.height <= 0) throw std::invalid_argument("uv_position_map: empty binding");
    Tensor<double> map({3, b.height, b.width});
    if (mask_out) *mask_out = Tensor<double>({b.height, b.width});
    const std::int64_t plane = static_cast<std::int64_t>(b.height) * b.width;
    for (int flat : b.valid_index) {
        const auto& t = b.texels[static_cast<size_t>(flat)];
        const auto& face = r.faces[static_cast<size_t>(t.face)];
        for (int d = 0; d < 3; ++d) {
            const double val = t.b0 * deformed_vertices.at(face[0], d) +
                               t.b1 * deformed_vertices.at(face[1], d) +
                               t.b2 * deformed_vertices.at(face[2], d);
            map[d * plane + flat] = val;
        }
        if (mask_out) (*mask_out)[flat] = 1.0;
    }
    return map;
}

/// Binary [H,W] mask: texel is 1 iff it is bound to a face with at least two
/// vertices in the named region (threshold 2 of 3).
inline Tensor<double> region_mask(const rig::HeadRig& r, const std::string& region_name, const TexelBinding& b) {
    auto it = r.regions.find(region_name);
    if (it == r.regions.end()) throw std::invalid_argument("region_mask: unknown region '" + region_name + "'");
    std::vector<char> in_region(static_cast<size_t>(r.vertex_count()), 0);
    for (int v : it->second) in_region[static_cast<size_t>(v)] = 1;
    Tensor<double> mask({b.height, b.width});
    for (int flat : b.valid_index) {
        const auto& face = r.faces[static_cast<size_t>(b.texels[static_cast<size_t>(flat)].face)];
        const int hits = in_region[static_cast<size_t>(face[0])] + in_region[static_cast<size_t>(face[1])] +
                         in_region[static_cast<size_t>(face[2])];
        if (hits >= 2) mask[flat] = 1.0;
    }
    return mask;
}

/// The dynamic-region mask: union of face, mouth and eyes.
inline Tensor<double> dynamic_region_mask(const rig::HeadRig& r, const TexelBinding& b) {
    Tensor<double> m = region_mask(r, "face", b);
    const Tensor<double> mouth = region_mask(r, "mouth", b);
    const Tensor<double> eyes = region_mask(r, "eyes", b);
    for (std::int64_t i = 0; i < m.size(); ++i)
        m[i] = (m[i] > 0.0 || mouth[i] > 0.0 || eyes[i] > 0.0) ? 1.0 : 0.0;
    return m;
}

/// Barycentric-blended skin weight rows for every valid texel: [n_valid, J].
/// Rows stay convex because blending is convex.
inline Tensor<double> valid_texel_skin_weights(const rig::HeadRig& r, const TexelBinding& b) {
    const int J = r.joint_count();
    Tensor<double> w({std::max(b.valid_count(), 1), J});
    for (int m = 0; m < b.valid_count(); ++m) {
        const auto& t = b.texels[static_cast<size_t>(b.valid_index[static_cast<size_t>(m)])];
        const auto& face = r.faces[static_cast<size_t>(t.face)];
        for (int j = 0; j < J; ++j)
            w.at(m, j) = t.b0 * r.skin_weights.at(face[0], j) + t.b1 * r.skin_weights.at(face[1], j) +
                         t.b2 * r.skin_weights.at(face[2], j);
    }
    return w;
}

}  // namespace uvga::uvmap
