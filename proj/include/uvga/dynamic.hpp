#pragma once

#include <string>
#include <vector>

#include "uvga/maps.hpp"
#include "uvga/nn.hpp"
#include "uvga/rig.hpp"
#include "uvga/uvmap.hpp"

namespace uvga::dyn {

/// UNet shape contract: spatial size preserved end-to-end, skip connections
/// across matching resolutions, final layer zero-initialized so the decoder
/// starts as the identity on the static avatar.
struct UNetConfig {
    int in_channels = 19;   // id_dim + 3 driving channels
    int out_channels = maps::kChannels;
    int stages = 3;         // down/up pairs
    int base_width = 24;
    int max_width = 96;
    int uv_size = 64;

    int width_at(int level) const {
        int w = base_width;
        for (int l = 0; l < level; ++l) w = std::min(max_width, w * 2);
        return w;
    }

    void validate() const {
        if (uv_size % (1 << stages) != 0)
            throw std::invalid_argument("unet config: uv size must be divisible by 2^stages");
        if (in_channels <= 3) throw std::invalid_argument("unet config: input must include id features");
    }
};

/// Expression-dependent delta decoder: builds the UV driving signal,
/// decodes raw attribute deltas with a UNet, and fuses them into the static
/// raw maps inside the dynamic-region mask.
template <class T>
class DynDecoder {
public:
    explicit DynDecoder(UNetConfig cfg) : cfg_(cfg) { cfg_.validate(); }

    const UNetConfig& config() const { return cfg_; }

    void init_params(ParamStore<T>& ps, Rng& rng) const {
        int cin = cfg_.in_channels;
        for (int s = 0; s < cfg_.stages + 1; ++s) {  // level convs (stride 1)
            const int w = cfg_.width_at(s);
            nn::init_conv(ps, rng, "unet/enc" + std::to_string(s), w, s == 0 ? cin : cfg_.width_at(s), 3);
        }
        for (int s = 1; s <= cfg_.stages; ++s)  // downsampling convs (stride 2)
            nn::init_conv(ps, rng, "unet/down" + std::to_string(s), cfg_.width_at(s), cfg_.width_at(s - 1), 3);
        nn::init_conv(ps, rng, "unet/mid", cfg_.width_at(cfg_.stages), cfg_.width_at(cfg_.stages), 3);
        for (int s = cfg_.stages - 1; s >= 0; --s) {
            const int skip = cfg_.width_at(s);
            const int from = cfg_.width_at(s + 1);
            nn::init_conv(ps, rng, "unet/up" + std::to_string(s), cfg_.width_at(s), from + skip, 3);
        }
        nn::init_conv(ps, rng, "unet/out", cfg_.out_channels, cfg_.width_at(0), 3, /*zero_init=*/true);
    }

    /// P_driving: UV position map of the expression-deformed template
    /// (expression only; pose is routed through LBS, not the driving map).
    static Tensor<double> build_driving_map(const rig::HeadRig& r, const rig::ExpressionParams& expr,
                                            const uvmap::TexelBinding& binding) {
        expr.validate(r);
        return uvmap::uv_position_map(r, rig::deform(r, expr.psi), binding);
    }

    /// Delta maps from identity features [id,H,W] and driving map [3,H,W].
    typename Graph<T>::Id decode_delta(Graph<T>& g, ParamStore<T>& ps, typename Graph<T>::Id f_id,
                                       typename Graph<T>::Id p_driving) const {
        typename Graph<T>::Scope scope(g, "unet");
        const auto& fs = g.value(f_id).shape;
        const auto& ds = g.value(p_driving).shape;
        if (fs.size() != 3 || ds.size() != 3 || fs[1] != ds[1] || fs[2] != ds[2])
            throw std::invalid_argument("decode_delta: feature/driving spatial dims differ");
        if (fs[0] + ds[0] != cfg_.in_channels)
            throw std::invalid_argument("decode_delta: channel count " + std::to_string(fs[0] + ds[0]) +
                                        " != configured " + std::to_string(cfg_.in_channels));
        auto x = g.concat({f_id, p_driving}, 0);

        std::vector<typename Graph<T>::Id> skips;
        x = g.softplus(nn::conv(g, ps, "unet/enc0", x, 1, 1));
        skips.push_back(x);
        for (int s = 1; s <= cfg_.stages; ++s) {
            x = g.softplus(nn::conv(g, ps, "unet/down" + std::to_string(s), x, 2, 1));
            x = g.softplus(nn::conv(g, ps, "unet/enc" + std::to_string(s), x, 1, 1));
            if (s < cfg_.stages) skips.push_back(x);
        }
        x = g.softplus(nn::conv(g, ps, "unet/mid", x, 1, 1));
        for (int s = cfg_.stages - 1; s >= 0; --s) {
            x = g.upsample_nearest(x, 2);
            x = g.concat({x, skips[static_cast<size_t>(s)]}, 0);
            x = g.softplus(nn::conv(g, ps, "unet/up" + std::to_string(s), x, 1, 1));
        }
        return nn::conv(g, ps, "unet/out", x, 1, 1);
    }

    /// Raw-space fusion under the dynamic mask: raw_dyn = raw_st + M .* delta.
    /// Deltas are added pre-activation so re-activated maps keep every range
    /// invariant; outside the mask the result is bit-exact raw_st.
    static typename Graph<T>::Id fuse_dynamic(Graph<T>& g, typename Graph<T>::Id raw_static,
                                              typename Graph<T>::Id delta, typename Graph<T>::Id mask_hw) {
        const auto& rs = g.value(raw_static).shape;
        const auto& ds = g.value(delta).shape;
        if (rs != ds) throw std::invalid_argument("fuse_dynamic: shape mismatch");
        const auto& ms = g.value(mask_hw).shape;
        if (ms.size() != 2 || ms[0] != rs[1] || ms[1] != rs[2])
            throw std::invalid_argument("fuse_dynamic: mask must be [H,W]");
        return g.add(raw_static, g.mul(delta, mask_hw));
    }

private:
    UNetConfig cfg_;
};

}  // namespace uvga::dyn
