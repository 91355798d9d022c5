#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "uvga/dynamic.hpp"
#include "uvga/params.hpp"
#include "uvga/recon.hpp"
#include "uvga/tensor.hpp"

namespace uvga::pipe {

inline constexpr const char* kModelVersion = "uvga-0.1.0";
inline constexpr char kAssetMagic[8] = {'U', 'V', 'G', 'A', 'A', 'S', 'T', '1'};

/// The feed-forward product: identity features, raw static Gaussian maps,
/// the UNet weights that animate them, and provenance. A loaded asset
/// re-renders identically to the in-memory one.
struct AvatarAsset {
    std::string model_version = kModelVersion;
    std::uint64_t rig_hash = 0;
    int uv_size = 0;
    recon::ReconConfig recon_cfg;
    dyn::UNetConfig unet_cfg;
    Tensor<float> f_id;      // [id_dim, H, W]
    Tensor<float> raw_maps;  // [14, H, W] pre-activation
    ParamStore<float> unet;  // embedded "unet/..." parameters
    std::vector<std::uint64_t> input_hashes;
};

namespace detail {
inline void w_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void w_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline std::uint32_t r_u32(std::istream& is) {
    std::uint32_t v;
    is.read(reinterpret_cast<char*>(&v), 4);
    if (!is) throw std::runtime_error("asset: truncated");
    return v;
}
inline std::uint64_t r_u64(std::istream& is) {
    std::uint64_t v;
    is.read(reinterpret_cast<char*>(&v), 8);
    if (!is) throw std::runtime_error("asset: truncated");
    return v;
}
inline void w_str(std::ostream& os, const std::string& s) {
    w_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string r_str(std::istream& is) {
    std::string s(r_u32(is), '\0');
    is.read(s.data(), static_cast<std::streamsize>(s.size()));
    if (!is) throw std::runtime_error("asset: truncated string");
    return s;
}
inline void w_tensor(std::ostream& os, const Tensor<float>& t) {
    w_u32(os, static_cast<std::uint32_t>(t.shape.size()));
    for (int e : t.shape) w_u32(os, static_cast<std::uint32_t>(e));
    os.write(reinterpret_cast<const char*>(t.v.data()), static_cast<std::streamsize>(t.v.size() * 4));
}
inline Tensor<float> r_tensor(std::istream& is) {
    Shape s(r_u32(is));
    for (auto& e : s) e = static_cast<int>(r_u32(is));
    Tensor<float> t(s);
    is.read(reinterpret_cast<char*>(t.v.data()), static_cast<std::streamsize>(t.v.size() * 4));
    if (!is) throw std::runtime_error("asset: truncated tensor");
    return t;
}

inline std::string config_blob(const recon::ReconConfig& rc, const dyn::UNetConfig& uc) {
    std::ostringstream ss;
    ss << "image_size=" << rc.image_size << "\npatch_size=" << rc.patch_size << "\ntoken_dim=" << rc.token_dim
       << "\nn_max=" << rc.n_max << "\nencoder_blocks=" << rc.encoder_blocks << "\nfuse_blocks=" << rc.fuse_blocks
       << "\nquery_blocks=" << rc.query_blocks << "\nheads=" << rc.heads << "\nquery_hw=" << rc.query_hw
       << "\nuv_size=" << rc.uv_size << "\nid_dim=" << rc.id_dim << "\ndecoder_width=" << rc.decoder_width
       << "\nmlp_ratio=" << rc.mlp_ratio << "\nunet_stages=" << uc.stages << "\nunet_base=" << uc.base_width
       << "\nunet_max=" << uc.max_width << "\n";
    return ss.str();
}

inline void parse_config_blob(const std::string& blob, recon::ReconConfig& rc, dyn::UNetConfig& uc) {
    std::istringstream ss(blob);
    std::string line;
    std::map<std::string, int> kv;
    while (std::getline(ss, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        kv[line.substr(0, eq)] = std::stoi(line.substr(eq + 1));
    }
    auto get = [&](const char* k) {
        auto it = kv.find(k);
        if (it == kv.end()) throw std::runtime_error(std::string("asset: config key missing: ") + k);
        return it->second;
    };
    rc.image_size = get("image_size");
    rc.patch_size = get("patch_size");
    rc.token_dim = get("token_dim");
    rc.n_max = get("n_max");
    rc.encoder_blocks = get("encoder_blocks");
    rc.fuse_blocks = get("fuse_blocks");
    rc.query_blocks = get("query_blocks");
    rc.heads = get("heads");
    rc.query_hw = get("query_hw");
    rc.uv_size = get("uv_size");
    rc.id_dim = get("id_dim");
    rc.decoder_width = get("decoder_width");
    rc.mlp_ratio = get("mlp_ratio");
    uc.stages = get("unet_stages");
    uc.base_width = get("unet_base");
    uc.max_width = get("unet_max");
    uc.in_channels = rc.id_dim + 3;
    uc.uv_size = rc.uv_size;
}
}  // namespace detail

inline void save_asset(const AvatarAsset& a, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("asset: cannot open for write: " + path);
    os.write(kAssetMagic, 8);
    detail::w_u32(os, 1u);
    detail::w_str(os, a.model_version);
    detail::w_u64(os, a.rig_hash);
    detail::w_u32(os, static_cast<std::uint32_t>(a.uv_size));
    detail::w_str(os, detail::config_blob(a.recon_cfg, a.unet_cfg));
    detail::w_u32(os, static_cast<std::uint32_t>(a.input_hashes.size()));
    for (auto h : a.input_hashes) detail::w_u64(os, h);
    detail::w_tensor(os, a.f_id);
    detail::w_tensor(os, a.raw_maps);
    std::ostringstream unet_bytes(std::ios::binary);
    save_checkpoint(a.unet, unet_bytes);
    detail::w_str(os, unet_bytes.str());
    if (!os) throw std::runtime_error("asset: write failed");
}

inline AvatarAsset load_asset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("asset: cannot open for read: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kAssetMagic, 8) != 0) throw std::runtime_error("asset: bad magic");
    if (detail::r_u32(is) != 1) throw std::runtime_error("asset: unsupported version");
    AvatarAsset a;
    a.model_version = detail::r_str(is);
    a.rig_hash = detail::r_u64(is);
    a.uv_size = static_cast<int>(detail::r_u32(is));
    detail::parse_config_blob(detail::r_str(is), a.recon_cfg, a.unet_cfg);
    a.input_hashes.resize(detail::r_u32(is));
    for (auto& h : a.input_hashes) h = detail::r_u64(is);
    a.f_id = detail::r_tensor(is);
    a.raw_maps = detail::r_tensor(is);
    std::istringstream unet_bytes(detail::r_str(is), std::ios::binary);
    load_checkpoint(a.unet, unet_bytes);
    return a;
}

}  // namespace uvga::pipe
