#pragma once

#include <cmath>
#include <stdexcept>

#include "uvga/graph.hpp"
#include "uvga/rig.hpp"
#include "uvga/tensor.hpp"
#include "uvga/uvmap.hpp"

namespace uvga::maps {

// Raw Gaussian parameter maps are a single [14,H,W] tensor; channel layout:
//   0..2  position offset (pre-tanh)
//   3     opacity (pre-sigmoid)
//   4..6  scale (pre-sigmoid, scaled)
//   7..9  color (pre-sigmoid)
//   10..13 rotation (pre-normalization, w-channel biased by +1)
inline constexpr int kChannels = 14;
inline constexpr int kChPos = 0;
inline constexpr int kChOpacity = 3;
inline constexpr int kChScale = 4;
inline constexpr int kChColor = 7;
inline constexpr int kChRot = 10;

/// Activation constants tying raw maps to world units.
struct ActivationSpec {
    double extent = 0;       // rig bounding-box diagonal (m)
    double pos_range = 0;    // max |position offset| = 0.1 * extent
    double scale_init = 0;   // scale at raw zero (m)
    double scale_max = 0;    // hard upper bound = 0.05 * extent
    double scale_min = 0;    // strict-positivity floor = 1e-3 * scale_max

    static ActivationSpec for_rig(const rig::HeadRig& r, int uv_resolution) {
        ActivationSpec s;
        s.extent = r.extent();
        s.pos_range = 0.1 * s.extent;
        s.scale_max = 0.05 * s.extent;
        // ~ texel spacing on the surface, capped below the hard bound
        s.scale_init = std::min(1.6 * s.extent / uv_resolution, 0.5 * s.scale_max);
        s.scale_min = 1e-3 * s.scale_max;
        return s;
    }

    /// Bias placing the scale sigmoid's zero-point at scale_init.
    double scale_bias() const {
        const double t = (scale_init - scale_min) / (scale_max - scale_init);
        return std::log(t);
    }
    double scale_span() const { return scale_max - scale_min; }
};

/// Attribute-space Gaussian maps {P, alpha, S, C, R} over the UV grid.
template <class T = double>
struct GaussianMapSet {
    Tensor<T> position;  // [3,H,W]
    Tensor<T> opacity;   // [H,W] in [0,1]
    Tensor<T> scale;     // [3,H,W] strictly positive, <= scale_max
    Tensor<T> color;     // [3,H,W] in [0,1]
    Tensor<T> rotation;  // [4,H,W] unit quaternions (w,x,y,z)
    int height = 0, width = 0;
};

/// Plain (non-graph) activation of raw maps. `anchor` is the neutral-surface
/// position map [3,H,W] (P_init).
template <class T>
GaussianMapSet<T> activate_maps(const Tensor<T>& raw, const Tensor<T>& anchor, const ActivationSpec& spec) {
    if (raw.rank() != 3 || raw.dim(0) != kChannels)
        throw std::invalid_argument("activate_maps: raw maps must be [14,H,W]");
    const int H = raw.dim(1), W = raw.dim(2);
    if (anchor.shape != Shape{3, H, W}) throw std::invalid_argument("activate_maps: anchor must be [3,H,W]");
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    GaussianMapSet<T> out;
    out.height = H;
    out.width = W;
    out.position = Tensor<T>({3, H, W});
    out.opacity = Tensor<T>({H, W});
    out.scale = Tensor<T>({3, H, W});
    out.color = Tensor<T>({3, H, W});
    out.rotation = Tensor<T>({4, H, W});
    const T sbias = static_cast<T>(spec.scale_bias());
    auto sigmoid = [](T x) { return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x)); };
    for (std::int64_t i = 0; i < plane; ++i) {
        for (int d = 0; d < 3; ++d) {
            out.position[d * plane + i] = anchor[d * plane + i] +
                static_cast<T>(spec.pos_range) * std::tanh(raw[(kChPos + d) * plane + i]);
            out.scale[d * plane + i] = static_cast<T>(spec.scale_min) +
                static_cast<T>(spec.scale_span()) * sigmoid(raw[(kChScale + d) * plane + i] + sbias);
            out.color[d * plane + i] = sigmoid(raw[(kChColor + d) * plane + i]);
        }
        out.opacity[i] = sigmoid(raw[kChOpacity * plane + i]);
        T q[4];
        q[0] = raw[(kChRot + 0) * plane + i] + T(1);  // identity bias on w
        for (int d = 1; d < 4; ++d) q[d] = raw[(kChRot + d) * plane + i];
        const T norm = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3] + T(1e-12));
        for (int d = 0; d < 4; ++d) out.rotation[d * plane + i] = q[d] / norm;
    }
    return out;
}

/// Graph node bundle of activated maps (same formulas as activate_maps).
template <class T>
struct MapNodes {
    typename Graph<T>::Id position, opacity, scale, color, rotation;
};

template <class T>
MapNodes<T> build_map_activations(Graph<T>& g, typename Graph<T>::Id raw, const Tensor<T>& anchor,
                                  const ActivationSpec& spec) {
    typename Graph<T>::Scope scope(g, "maps");
    const auto& rshape = g.value(raw).shape;
    if (rshape.size() != 3 || rshape[0] != kChannels)
        throw std::invalid_argument("build_map_activations: raw maps must be [14,H,W]");
    const int H = rshape[1], W = rshape[2];
    MapNodes<T> out;
    const auto praw = g.slice(raw, 0, kChPos, kChPos + 3);
    out.position = g.add(g.constant(anchor, "anchor"),
                         g.mul_scalar(g.tanh(praw), static_cast<T>(spec.pos_range)));
    out.opacity = g.reshape(g.sigmoid(g.slice(raw, 0, kChOpacity, kChOpacity + 1)), {H, W});
    out.scale = g.add_scalar(
        g.mul_scalar(g.sigmoid(g.add_scalar(g.slice(raw, 0, kChScale, kChScale + 3),
                                            static_cast<T>(spec.scale_bias()))),
                     static_cast<T>(spec.scale_span())),
        static_cast<T>(spec.scale_min));
    out.color = g.sigmoid(g.slice(raw, 0, kChColor, kChColor + 3));
    // rotation: bias w by 1, then row-normalize with an epsilon guard
    Tensor<T> wbias({4, H, W});
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    for (std::int64_t i = 0; i < plane; ++i) wbias[i] = T(1);
    const auto q = g.add(g.slice(raw, 0, kChRot, kChRot + 4), g.constant(std::move(wbias), "rot_bias"));
    const auto q2 = g.mul(q, q);
    auto comp = [&](int c) { return g.slice(q2, 0, c, c + 1); };
    const auto n2 = g.add(g.add(comp(0), comp(1)), g.add(comp(2), comp(3)));
    const auto norm1 = g.sqrt(g.add_scalar(n2, T(1e-12)));  // [1,H,W]
    const auto norm4 = g.concat({norm1, norm1, norm1, norm1}, 0);
    out.rotation = g.div(q, norm4);
    return out;
}

/// Neutral-surface anchor map (P_init) and the validity mask for a binding.
inline Tensor<double> anchor_position_map(const rig::HeadRig& r, const uvmap::TexelBinding& b,
                                          Tensor<double>* mask_out = nullptr) {
    return uvmap::uv_position_map(r, r.vertices, b, mask_out);
}

}  // namespace uvga::maps
