#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "uvga/maps.hpp"
#include "uvga/nn.hpp"
#include "uvga/rig.hpp"
#include "uvga/uvmap.hpp"

namespace uvga::recon {

/// Shape contract of the reconstruction model. The full-scale reference
/// (images 512, D=512, L=1024, 2500 queries, depths 6/6, UV 400, id 32)
/// shares every relation; the desk defaults below train on a CPU.
struct ReconConfig {
    int image_size = 128;
    int patch_size = 16;       // realized as two stride-4 convs
    int token_dim = 128;       // D
    int n_max = 4;             // max input images
    int encoder_blocks = 2;    // per-image self-attention depth
    int fuse_blocks = 2;       // global self-attention depth
    int query_blocks = 2;      // cross-attention depth
    int heads = 4;
    int query_hw = 16;         // Head Query grid; N_H = query_hw^2
    int uv_size = 64;          // output UV map resolution
    int id_dim = 16;           // identity feature channels
    int decoder_width = 128;
    int mlp_ratio = 2;

    int tokens_per_image() const {
        const int side = image_size / patch_size;
        return side * side;
    }
    int query_count() const { return query_hw * query_hw; }
    int upsample_factor() const { return uv_size / query_hw; }
    int decoder_stages() const {
        int f = upsample_factor(), n = 0;
        while (f > 1) {
            f /= 2;
            ++n;
        }
        return n;
    }

    void validate() const {
        if (image_size % patch_size != 0) throw std::invalid_argument("recon config: patch must divide image");
        if (patch_size != 16) throw std::invalid_argument("recon config: patch embedder is built for 16px patches");
        if (token_dim % heads != 0 || token_dim % 2 != 0)
            throw std::invalid_argument("recon config: token dim must be divisible by heads and 2");
        if (uv_size % query_hw != 0) throw std::invalid_argument("recon config: query grid must divide uv size");
        int f = upsample_factor();
        while (f > 1) {
            if (f % 2 != 0) throw std::invalid_argument("recon config: upsample factor must be a power of 2");
            f /= 2;
        }
        if (n_max < 1) throw std::invalid_argument("recon config: n_max must be at least 1");
    }
};

/// Canonical avatar produced by one reconstruction: identity features plus
/// activated static Gaussian maps (and the raw pre-activation maps they
/// came from).
template <class T>
struct CanonicalNodes {
    typename Graph<T>::Id f_id;      // [id_dim, H, W]
    typename Graph<T>::Id raw_maps;  // [14, H, W]
    maps::MapNodes<T> maps;
};

/// Feed-forward reconstruction model over the substrate graph. Parameters
/// live in a ParamStore under "recon/..."; graphs are rebuilt per call.
template <class T>
class ReconModel {
public:
    ReconModel(ReconConfig cfg, const rig::HeadRig& r, const uvmap::TexelBinding& binding) : cfg_(cfg) {
        cfg_.validate();
        if (binding.width != cfg_.uv_size || binding.height != cfg_.uv_size)
            throw std::invalid_argument("recon model: binding resolution must match uv_size");
        act_ = maps::ActivationSpec::for_rig(r, cfg_.uv_size);
        anchor_ = maps::anchor_position_map(r, binding).template cast<T>();
    }

    const ReconConfig& config() const { return cfg_; }
    const maps::ActivationSpec& activation() const { return act_; }
    const Tensor<T>& anchor() const { return anchor_; }

    void init_params(ParamStore<T>& ps, Rng& rng) const {
        const int D = cfg_.token_dim;
        nn::init_conv(ps, rng, "recon/embed/conv0", D / 2, 3, 4);
        nn::init_conv(ps, rng, "recon/embed/conv1", D, D / 2, 4);
        ps.create("recon/embed/pos", rng.normal_tensor<T>({cfg_.tokens_per_image(), D}, 0.0, 0.02));
        for (int b = 0; b < cfg_.encoder_blocks; ++b)
            nn::init_self_block(ps, rng, "recon/enc" + std::to_string(b), D, cfg_.mlp_ratio);
        nn::init_layer_norm(ps, "recon/enc_out", D);
        for (int b = 0; b < cfg_.fuse_blocks; ++b)
            nn::init_self_block(ps, rng, "recon/fuse" + std::to_string(b), D, cfg_.mlp_ratio);
        ps.create("recon/query/tokens", rng.normal_tensor<T>({cfg_.query_count(), D}, 0.0, 0.02));
        for (int b = 0; b < cfg_.query_blocks; ++b)
            nn::init_cross_block(ps, rng, "recon/query" + std::to_string(b), D, cfg_.mlp_ratio);
        nn::init_layer_norm(ps, "recon/query_out", D);
        int w = cfg_.decoder_width;
        nn::init_conv(ps, rng, "recon/dec/in", w, D, 3);
        for (int s = 0; s < cfg_.decoder_stages(); ++s) {
            const int wout = std::max(32, w / 2);
            nn::init_conv(ps, rng, "recon/dec/up" + std::to_string(s), wout, w, 3);
            w = wout;
        }
        nn::init_conv(ps, rng, "recon/dec/id_head", cfg_.id_dim, w, 3);
        nn::init_conv(ps, rng, "recon/dec/gauss_head", maps::kChannels, w, 3);
    }

    /// Patch tokens before positional encoding (the translation-symmetric
    /// part of the embedder).
    typename Graph<T>::Id encode_patches(Graph<T>& g, ParamStore<T>& ps, typename Graph<T>::Id image) const {
        typename Graph<T>::Scope scope(g, "embed");
        const auto& s = g.value(image).shape;
        if (s != Shape{3, cfg_.image_size, cfg_.image_size})
            throw std::invalid_argument("encode: image must be [3," + std::to_string(cfg_.image_size) + "," +
                                        std::to_string(cfg_.image_size) + "]");
        auto x = nn::conv(g, ps, "recon/embed/conv0", image, 4, 0);
        x = g.softplus(x);
        x = nn::conv(g, ps, "recon/embed/conv1", x, 4, 0);
        const int side = cfg_.image_size / cfg_.patch_size;
        return g.permute(g.reshape(x, {cfg_.token_dim, side * side}), {1, 0});  // [L,D]
    }

    /// Full per-image encoder: patch embed + positional encoding + per-image
    /// self-attention. Positional encodings are per-image only, so image
    /// order never enters the representation.
    typename Graph<T>::Id encode_image(Graph<T>& g, ParamStore<T>& ps, typename Graph<T>::Id image) const {
        auto tokens = encode_patches(g, ps, image);
        tokens = g.add(tokens, g.param(ps, "recon/embed/pos"));
        {
            typename Graph<T>::Scope scope(g, "enc");
            for (int b = 0; b < cfg_.encoder_blocks; ++b)
                tokens = nn::self_block(g, ps, "recon/enc" + std::to_string(b), tokens, cfg_.heads);
        }
        return nn::layer_norm(g, ps, "recon/enc_out", tokens);
    }

    /// Set fusion over all images' tokens: plain concatenation followed by
    /// global self-attention; no cross-image positional encoding exists.
    typename Graph<T>::Id fuse(Graph<T>& g, ParamStore<T>& ps,
                               const std::vector<typename Graph<T>::Id>& token_sets) const {
        if (token_sets.empty()) throw std::invalid_argument("fuse: at least one image required");
        if (static_cast<int>(token_sets.size()) > cfg_.n_max)
            throw std::invalid_argument("fuse: more than n_max images");
        typename Graph<T>::Scope scope(g, "fuse");
        auto x = token_sets.size() == 1 ? token_sets[0] : g.concat(token_sets, 0);
        for (int b = 0; b < cfg_.fuse_blocks; ++b)
            x = nn::self_block(g, ps, "recon/fuse" + std::to_string(b), x, cfg_.heads);
        return x;
    }

    /// Learned Head Query tokens cross-attend to the fused features; output
    /// size is N_H x D regardless of the input count.
    typename Graph<T>::Id head_query_attend(Graph<T>& g, ParamStore<T>& ps, typename Graph<T>::Id f_agg) const {
        typename Graph<T>::Scope scope(g, "query");
        auto q = g.param(ps, "recon/query/tokens");
        for (int b = 0; b < cfg_.query_blocks; ++b)
            q = nn::cross_block(g, ps, "recon/query" + std::to_string(b), q, f_agg, cfg_.heads);
        return nn::layer_norm(g, ps, "recon/query_out", q);
    }

    /// Row-major reshape of query tokens onto the UV grid (channel-first for
    /// the convolutional decoder).
    typename Graph<T>::Id reshape_uv(Graph<T>& g, typename Graph<T>::Id f_q) const {
        const auto& s = g.value(f_q).shape;
        if (s != Shape{cfg_.query_count(), cfg_.token_dim})
            throw std::invalid_argument("reshape_uv: expected [" + std::to_string(cfg_.query_count()) + "," +
                                        std::to_string(cfg_.token_dim) + "], got " + shape_str(s));
        const auto hw = g.reshape(f_q, {cfg_.query_hw, cfg_.query_hw, cfg_.token_dim});
        return g.permute(hw, {2, 0, 1});  // [D, Hq, Wq]
    }

    /// Convolutional decoding to the identity feature map and the static
    /// Gaussian maps (raw + activated).
    CanonicalNodes<T> decode_maps(Graph<T>& g, ParamStore<T>& ps, typename Graph<T>::Id f_uv) const {
        typename Graph<T>::Scope scope(g, "dec");
        auto x = g.softplus(nn::conv(g, ps, "recon/dec/in", f_uv, 1, 1));
        for (int s = 0; s < cfg_.decoder_stages(); ++s) {
            x = g.upsample_nearest(x, 2);
            x = g.softplus(nn::conv(g, ps, "recon/dec/up" + std::to_string(s), x, 1, 1));
        }
        CanonicalNodes<T> out;
        out.f_id = nn::conv(g, ps, "recon/dec/id_head", x, 1, 1);
        out.raw_maps = nn::conv(g, ps, "recon/dec/gauss_head", x, 1, 1);
        out.maps = maps::build_map_activations(g, out.raw_maps, anchor_, act_);
        return out;
    }

    /// End-to-end reconstruction from 1..n_max images (each [3,S,S], already
    /// mask-premultiplied when masks exist).
    CanonicalNodes<T> reconstruct(Graph<T>& g, ParamStore<T>& ps, const std::vector<Tensor<T>>& images) const {
        if (images.empty()) throw std::invalid_argument("reconstruct: zero input images");
        std::vector<typename Graph<T>::Id> token_sets;
        token_sets.reserve(images.size());
        for (size_t i = 0; i < images.size(); ++i) {
            const auto img = g.constant(images[i], "image" + std::to_string(i));
            token_sets.push_back(encode_image(g, ps, img));
        }
        const auto f_agg = fuse(g, ps, token_sets);
        const auto f_q = head_query_attend(g, ps, f_agg);
        return decode_maps(g, ps, reshape_uv(g, f_q));
    }

private:
    ReconConfig cfg_;
    maps::ActivationSpec act_;
    Tensor<T> anchor_;
};

}  // namespace uvga::recon
