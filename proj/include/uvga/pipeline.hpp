#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "uvga/asset.hpp"
#include "uvga/dataset.hpp"
#include "uvga/dynamic.hpp"
#include "uvga/losses.hpp"
#include "uvga/recon.hpp"
#include "uvga/splat.hpp"

namespace uvga::pipe {

using GraphF = Graph<float>;
using IdF = GraphF::Id;

// ---------------------------------------------------------------------------
// System: rig + binding + models + cached masks/anchors, shared by every
// pipeline verb. Read-only after construction.
// ---------------------------------------------------------------------------

struct System {
    rig::HeadRig head;
    uvmap::TexelBinding binding;
    recon::ReconModel<float> model;
    dyn::DynDecoder<float> dynamic;
    maps::ActivationSpec act;
    Tensor<float> m_dyn;          // [H,W] dynamic-region mask
    Tensor<float> mouth_uv;       // [H,W] mouth-region mask
    Tensor<float> validity;       // [H,W]
    Tensor<float> p_init;         // [3,H,W] neutral anchors
    Tensor<float> s_init;         // [3,H,W] scale anchors
    Tensor<double> texel_weights; // [M,J] skin weights of valid texels
    std::vector<int> mouth_texels;  // flat indices (subset of valid)

    System(rig::HeadRig r, const recon::ReconConfig& rc, const dyn::UNetConfig& uc)
        : head(std::move(r)),
          binding(uvmap::bind_texels(head, rc.uv_size, rc.uv_size)),
          model(rc, head, binding),
          dynamic(uc),
          act(maps::ActivationSpec::for_rig(head, rc.uv_size)) {
        if (uc.in_channels != rc.id_dim + 3)
            throw std::invalid_argument("system: unet input channels must equal id_dim + 3");
        if (uc.uv_size != rc.uv_size) throw std::invalid_argument("system: unet/recon uv size mismatch");
        m_dyn = uvmap::dynamic_region_mask(head, binding).cast<float>();
        mouth_uv = uvmap::region_mask(head, "mouth", binding).cast<float>();
        Tensor<double> vd;
        const auto anchor = maps::anchor_position_map(head, binding, &vd);
        validity = vd.cast<float>();
        p_init = anchor.cast<float>();
        s_init = Tensor<float>({3, rc.uv_size, rc.uv_size}, static_cast<float>(act.scale_init));
        texel_weights = uvmap::valid_texel_skin_weights(head, binding);
        const auto mouth = uvmap::region_mask(head, "mouth", binding);
        for (int flat : binding.valid_index)
            if (mouth[flat] > 0) mouth_texels.push_back(flat);
    }

    int uv() const { return model.config().uv_size; }
    int n_valid() const { return binding.valid_count(); }
};

inline System make_system(const recon::ReconConfig& rc, const dyn::UNetConfig& uc,
                          std::uint64_t rig_seed = 0x0badc0de) {
    rig::ProceduralRigOptions opt;
    opt.seed = rig_seed;
    return System(rig::make_procedural_rig(opt), rc, uc);
}

/// Desk-scale defaults: 128px images, D=128, 64 tokens, 256 queries,
/// depths 2/2, UV 64, id 16; UNet 3 down / 3 up.
inline recon::ReconConfig desk_recon_config() { return recon::ReconConfig{}; }
inline dyn::UNetConfig desk_unet_config() {
    dyn::UNetConfig c;
    c.in_channels = desk_recon_config().id_dim + 3;
    c.uv_size = desk_recon_config().uv_size;
    return c;
}

// ---------------------------------------------------------------------------
// Drive path: (f_id, raw static maps) + expression + camera -> frame node.
// ---------------------------------------------------------------------------

struct DriveTimings {
    double driving_ms = 0, unet_ms = 0, lbs_ms = 0, sort_ms = 0, composite_ms = 0, project_ms = 0;
};

namespace detail {
inline double ms_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

/// Gather node rows of a [C,H,W] map at the valid texels -> [M,C].
inline IdF gather_valid(GraphF& g, IdF map, const uvmap::TexelBinding& b) {
    const auto& s = g.value(map).shape;
    const int C = s[0], H = s[1], W = s[2];
    const auto rows = g.permute(g.reshape(map, {C, H * W}), {1, 0});
    return g.gather_rows(rows, b.valid_index);
}

/// Constant per-point LBS transforms as graph-ready tensors.
struct LbsConsts {
    Tensor<float> rot;    // [M,3,3]
    Tensor<float> trans;  // [M,3]
    Tensor<float> quat;   // [M,4,4] left-multiplication matrices
};

inline LbsConsts lbs_constants(const System& sys, const rig::Pose& pose) {
    const auto st = rig::skinning_transforms(sys.head, pose);
    const auto pt = rig::blend_point_transforms(st, sys.texel_weights);
    const int M = static_cast<int>(pt.affine.size());
    LbsConsts out{Tensor<float>({M, 3, 3}), Tensor<float>({M, 3}), Tensor<float>({M, 4, 4})};
    for (int m = 0; m < M; ++m) {
        const auto& a = pt.affine[static_cast<size_t>(m)].m;
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) out.rot.at(m, i, j) = static_cast<float>(a[static_cast<size_t>(i) * 4 + j]);
            out.trans.at(m, i) = static_cast<float>(a[static_cast<size_t>(i) * 4 + 3]);
        }
        const auto& q = pt.rotation[static_cast<size_t>(m)];
        const double L[16] = {q.w, -q.x, -q.y, -q.z, q.x, q.w, -q.z, q.y,
                              q.y, q.z,  q.w,  -q.x, q.z, -q.y, q.x, q.w};
        for (int i = 0; i < 16; ++i) out.quat[static_cast<std::int64_t>(m) * 16 + i] = static_cast<float>(L[i]);
    }
    return out;
}
}  // namespace detail

/// Builds the per-frame drive graph: driving map -> UNet deltas -> masked
/// fusion -> activations -> texel gather -> LBS -> splat. Returns the
/// rendered [4,H,W] frame node and the activated map nodes used.
struct DriveNodes {
    IdF frame;
    IdF fused_raw;
    maps::MapNodes<float> maps;
};

/// Optional cache of expression-dependent drive constants (driving maps and
/// blended LBS transforms), keyed by (identity, expression index). Used by
/// the training loop where the expression set is fixed.
struct DriveCache {
    std::map<std::pair<int, int>, Tensor<float>> driving;
    std::map<std::pair<int, int>, detail::LbsConsts> lbs;
};

namespace detail {
/// Shared tail of the drive path: activated maps -> texel gather -> LBS ->
/// splat. Identical node sequence for dynamic and static rendering, so a
/// zero UNet delta reproduces the static render bit-exactly.
inline IdF render_map_nodes(const System& sys, GraphF& g, const maps::MapNodes<float>& mapnodes,
                            const rig::Pose& pose, const Camera& cam, const std::array<float, 3>& background,
                            DriveTimings* timings, const LbsConsts* cached_lbs = nullptr) {
    namespace chrono = std::chrono;
    auto t0 = chrono::steady_clock::now();
    const int M = sys.n_valid();
    const LbsConsts lbs = cached_lbs ? *cached_lbs : lbs_constants(sys, pose);
    const auto pos = gather_valid(g, mapnodes.position, sys.binding);
    const auto rot = gather_valid(g, mapnodes.rotation, sys.binding);
    const auto scale = gather_valid(g, mapnodes.scale, sys.binding);
    const auto color = gather_valid(g, mapnodes.color, sys.binding);
    const auto opacity = g.gather_rows(g.reshape(mapnodes.opacity, {sys.uv() * sys.uv()}), sys.binding.valid_index);
    const auto posed = g.add(
        g.reshape(g.batch_matmul(g.constant(lbs.rot, "lbs_rot"), g.reshape(pos, {M, 3, 1})), {M, 3}),
        g.constant(lbs.trans, "lbs_trans"));
    const auto rotated =
        g.reshape(g.batch_matmul(g.constant(lbs.quat, "lbs_quat"), g.reshape(rot, {M, 4, 1})), {M, 4});
    if (timings) timings->lbs_ms += ms_since(t0);

    splat::RenderStats rstats;
    const auto frame = splat::splat_render_node(g, posed, rotated, scale, opacity, color, cam, background, &rstats);
    if (timings) {
        timings->project_ms += rstats.project_ms;
        timings->sort_ms += rstats.sort_ms;
        timings->composite_ms += rstats.composite_ms;
    }
    return frame;
}
}  // namespace detail

inline DriveNodes build_drive(const System& sys, GraphF& g, ParamStore<float>& ps, IdF f_id, IdF raw_maps,
                              const rig::ExpressionParams& expr, const Camera& cam,
                              const std::array<float, 3>& background, DriveTimings* timings = nullptr,
                              DriveCache* cache = nullptr, std::pair<int, int> cache_key = {-1, -1}) {
    namespace chrono = std::chrono;
    auto t0 = chrono::steady_clock::now();
    IdF driving;
    const detail::LbsConsts* cached_lbs = nullptr;
    if (cache) {
        auto& slot = cache->driving[cache_key];
        if (slot.size() == 0)
            slot = dyn::DynDecoder<float>::build_driving_map(sys.head, expr, sys.binding).cast<float>();
        driving = g.constant(slot, "p_driving");
        auto& lslot = cache->lbs[cache_key];
        if (lslot.rot.size() == 0) lslot = detail::lbs_constants(sys, expr.pose);
        cached_lbs = &lslot;
    } else {
        driving = g.constant(dyn::DynDecoder<float>::build_driving_map(sys.head, expr, sys.binding).cast<float>(),
                             "p_driving");
    }
    if (timings) timings->driving_ms += detail::ms_since(t0);

    t0 = chrono::steady_clock::now();
    const auto delta = sys.dynamic.decode_delta(g, ps, f_id, driving);
    const auto fused = dyn::DynDecoder<float>::fuse_dynamic(g, raw_maps, delta, g.constant(sys.m_dyn, "m_dyn"));
    const auto mapnodes = maps::build_map_activations(g, fused, sys.model.anchor(), sys.act);
    if (timings) timings->unet_ms += detail::ms_since(t0);

    DriveNodes out;
    out.frame = detail::render_map_nodes(sys, g, mapnodes, expr.pose, cam, background, timings, cached_lbs);
    out.fused_raw = fused;
    out.maps = mapnodes;
    return out;
}

/// Static-avatar render: the drive path with the UNet delta removed (same
/// graph machinery, so the zero-delta case matches bit-for-bit).
inline Tensor<float> render_static(const System& sys, const Tensor<float>& raw_maps, const rig::Pose& pose,
                                   const Camera& cam, const std::array<float, 3>& background) {
    GraphF g;
    g.check_finite = false;
    const auto mapnodes = maps::build_map_activations(g, g.constant(raw_maps, "raw"), sys.model.anchor(), sys.act);
    return g.value(detail::render_map_nodes(sys, g, mapnodes, pose, cam, background, nullptr));
}

/// Image-space mouth mask: the mouth texels of the expression-deformed
/// surface rendered as an indicator cloud, thresholded at alpha 0.3.
inline Tensor<float> mouth_image_mask(const System& sys, const rig::ExpressionParams& expr, const Camera& cam) {
    const int M = static_cast<int>(sys.mouth_texels.size());
    if (M == 0) return Tensor<float>({cam.height, cam.width});
    const auto surface = uvmap::uv_position_map(sys.head, rig::deform(sys.head, expr.psi), sys.binding);
    const std::int64_t plane = static_cast<std::int64_t>(sys.uv()) * sys.uv();
    Tensor<double> pos({M, 3});
    Tensor<double> weights({M, sys.head.joint_count()});
    // map flat mouth indices to their valid-list positions for weight rows
    std::map<int, int> valid_pos;
    for (int i = 0; i < sys.n_valid(); ++i) valid_pos[sys.binding.valid_index[static_cast<size_t>(i)]] = i;
    for (int m = 0; m < M; ++m) {
        const int flat = sys.mouth_texels[static_cast<size_t>(m)];
        for (int d = 0; d < 3; ++d) pos.at(m, d) = surface[d * plane + flat];
        const int vi = valid_pos.at(flat);
        for (int j = 0; j < sys.head.joint_count(); ++j) weights.at(m, j) = sys.texel_weights.at(vi, j);
    }
    const auto posed = rig::lbs(sys.head, expr.pose, pos, nullptr, weights);
    splat::GaussianCloud<double> cloud{posed.points, Tensor<double>({M, 4}), Tensor<double>({M, 3}),
                                       Tensor<double>({M}, 0.95), Tensor<double>({M, 3}, 1.0)};
    for (int m = 0; m < M; ++m) {
        cloud.rotation.at(m, 0) = 1.0;
        for (int d = 0; d < 3; ++d) cloud.scale.at(m, d) = sys.act.scale_init * 1.5;
    }
    const auto frame = splat::render(cloud, cam, {0.0, 0.0, 0.0});
    const std::int64_t px = static_cast<std::int64_t>(cam.height) * cam.width;
    Tensor<float> mask({cam.height, cam.width});
    for (std::int64_t p = 0; p < px; ++p) mask[p] = frame[3 * px + p] > 0.3 ? 1.0f : 0.0f;
    return mask;
}

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

struct TrainConfig {
    double learning_rate = 3e-5;
    loss::LossWeights weights;
    int max_input_images = 4;
    int supervision_views = 4;  // supervision frames per step, distinct timesteps
    int steps = 2000;
    std::uint64_t seed = 1;
    int checkpoint_every = 1000;
    bool adjusted_sampler = true;
    int sampler_anchors = 20;
    int sampler_random = 6;
    std::string metric = "gradmag3";
    int holdout_expr = -1;  // this (expr, view) pair is never used for
    int holdout_view = -1;  // inputs or supervision when both are >= 0

    bool is_holdout(int e, int v) const { return e == holdout_expr && v == holdout_view; }

    void validate() const {
        if (steps < 0 || supervision_views < 1 || max_input_images < 1)
            throw std::invalid_argument("train config: bad counts");
        weights.validate();
        if (learning_rate <= 0) throw std::invalid_argument("train config: learning rate must be positive");
    }
};

struct LossRow {
    int step = 0;
    double l1 = 0, ssim = 0, lpips = 0, mouth = 0, xyz = 0, scale = 0, total = 0;
};

inline void write_loss_csv(const std::vector<LossRow>& rows, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("train: cannot write loss csv " + path);
    os << "step,l1,ssim,lpips,mouth,xyz,scale,total\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.step, r.l1, r.ssim, r.lpips,
                      r.mouth, r.xyz, r.scale, r.total);
        os << buf;
    }
}

/// Frame cache: images premultiplied by their masks, plus mask-composited
/// ground truth over the dataset background.
class FrameStore {
public:
    FrameStore(const data::DatasetManifest& man) : man_(man) {}

    const Tensor<float>& image(int identity, int expr, int view) {
        const auto& rec = man_.frame(identity, expr, view);
        auto it = cache_.find(rec.image_path);
        if (it != cache_.end()) return it->second;
        const auto im = img::read_png(man_.root + "/" + rec.image_path);
        const auto mk = img::read_png(man_.root + "/" + rec.mask_path);
        auto frame = img::to_frame<float>(im);
        const auto mask = img::to_frame<float>(mk);
        // store the raw frame (already composited over the background);
        // the mask gates encoder inputs
        Tensor<float> masked = frame;
        const std::int64_t plane = static_cast<std::int64_t>(im.height) * im.width;
        for (int c = 0; c < 3; ++c)
            for (std::int64_t p = 0; p < plane; ++p) masked[c * plane + p] *= mask[p];
        cache_[rec.image_path] = std::move(frame);
        masked_[rec.image_path] = std::move(masked);
        return cache_[rec.image_path];
    }

    const Tensor<float>& masked_image(int identity, int expr, int view) {
        image(identity, expr, view);
        return masked_[man_.frame(identity, expr, view).image_path];
    }

private:
    const data::DatasetManifest& man_;
    std::map<std::string, Tensor<float>> cache_;
    std::map<std::string, Tensor<float>> masked_;
};

struct StepLossNodes {
    IdF total;
    IdF l1, ssim, lpips, mouth, xyz, scale;
};

/// Per-frame objective against one ground-truth view.
inline StepLossNodes build_frame_loss(const System& sys, GraphF& g, const DriveNodes& drive,
                                      const Tensor<float>& gt_image, const Tensor<float>& mouth_mask,
                                      const loss::LossWeights& w, const std::string& metric) {
    StepLossNodes out;
    const auto rgb = g.slice(drive.frame, 0, 0, 3);
    const auto gt = g.constant(gt_image, "gt");
    out.l1 = loss::l1(g, rgb, gt);
    out.ssim = loss::ssim_loss(g, rgb, gt);
    out.lpips = loss::perceptual(g, rgb, gt, metric);
    out.mouth = loss::mouth_perceptual(g, rgb, gt, mouth_mask, metric);
    const auto regs = loss::regularizers(g, drive.maps.position, drive.maps.scale, sys.p_init, sys.s_init,
                                         sys.validity);
    out.xyz = regs.xyz;
    out.scale = regs.scale;
    out.total = loss::total(g, out.l1, out.ssim, out.lpips, out.mouth, out.xyz, out.scale, w);
    return out;
}

struct TrainResult {
    std::vector<LossRow> history;
    std::string final_checkpoint;
};

inline TrainResult train(const System& sys, ParamStore<float>& store, const data::DatasetManifest& man,
                         const TrainConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    FrameStore frames(man);
    Rng rng(cfg.seed);

    // sampling plan over timesteps (expression indices), per identity
    std::vector<std::vector<int>> plan_exprs(static_cast<size_t>(man.opts.n_ids));
    bool adjusted = cfg.adjusted_sampler;
    const int need = cfg.sampler_anchors + cfg.sampler_random;
    if (adjusted && man.opts.n_expr < need) {
        std::cerr << "warning=sampler_fallback detail=\"" << man.opts.n_expr << " expressions < " << need
                  << " required; using uniform sampling\"\n";
        adjusted = false;
    }
    if (adjusted) {
        const auto table = data::ExpressionTable::from_manifest(man);
        const auto plan = data::build_adjusted_sampler(table, cfg.sampler_anchors, cfg.sampler_random, cfg.seed);
        for (const auto& slot : plan.slots) plan_exprs[static_cast<size_t>(slot.identity)].push_back(slot.frame);
    } else {
        for (int id = 0; id < man.opts.n_ids; ++id)
            for (int e = 0; e < man.opts.n_expr; ++e) plan_exprs[static_cast<size_t>(id)].push_back(e);
    }

    Adam<float> opt(cfg.learning_rate);
    TrainResult result;
    DriveCache drive_cache;
    std::map<std::tuple<int, int, int>, Tensor<float>> mouth_cache;
    const std::array<float, 3> bg{static_cast<float>(man.opts.background[0]),
                                  static_cast<float>(man.opts.background[1]),
                                  static_cast<float>(man.opts.background[2])};

    // initial checkpoint (step 0)
    const std::string ckpt0 = out_dir + "/ckpt_0.uvgackpt";
    save_checkpoint(store, ckpt0);
    result.final_checkpoint = ckpt0;

    for (int step = 0; step < cfg.steps; ++step) {
        const int identity = rng.index(man.opts.n_ids);
        const auto& timesteps = plan_exprs[static_cast<size_t>(identity)];

        const int n_in = 1 + rng.index(cfg.max_input_images);
        std::vector<Tensor<float>> inputs;
        for (int i = 0; i < n_in; ++i) {
            int e, v;
            do {
                e = timesteps[static_cast<size_t>(rng.index(static_cast<int>(timesteps.size())))];
                v = rng.index(man.opts.n_views);
            } while (cfg.is_holdout(e, v));
            inputs.push_back(frames.masked_image(identity, e, v));
        }

        // supervision: distinct timesteps, random views; the holdout pair is
        // never selected (drawn before graph construction so a diagnostic
        // rebuild replays the identical batch)
        std::vector<int> sup_e, sup_v;
        {
            std::vector<int> pool = timesteps;
            for (int k = 0; k < cfg.supervision_views && !pool.empty(); ++k) {
                const int pick = rng.index(static_cast<int>(pool.size()));
                const int e = pool[static_cast<size_t>(pick)];
                pool.erase(pool.begin() + pick);
                int v = rng.index(man.opts.n_views);
                while (cfg.is_holdout(e, v)) v = rng.index(man.opts.n_views);
                sup_e.push_back(e);
                sup_v.push_back(v);
            }
        }

        auto run_step = [&](bool check_finite) {
            GraphF g;
            g.check_finite = check_finite;
            const auto canon = sys.model.reconstruct(g, store, inputs);
            IdF total = -1;
            LossRow row;
            row.step = step;
            for (size_t k = 0; k < sup_e.size(); ++k) {
                const int e = sup_e[k];
                const int v = sup_v[k];
                const auto& expr = man.expression(identity, e);
                const auto& cam = man.cameras[static_cast<size_t>(man.frame(identity, e, v).camera_index)];
                const auto drive = build_drive(sys, g, store, canon.f_id, canon.raw_maps, expr, cam, bg,
                                               nullptr, &drive_cache, {identity, e});
                auto& mouth_mask = mouth_cache[{identity, e, v}];
                if (mouth_mask.size() == 0) mouth_mask = mouth_image_mask(sys, expr, cam);
                const auto nodes =
                    build_frame_loss(sys, g, drive, frames.image(identity, e, v), mouth_mask, cfg.weights, cfg.metric);
                total = (k == 0) ? nodes.total : g.add(total, nodes.total);
                row.l1 += g.value(nodes.l1).item();
                row.ssim += g.value(nodes.ssim).item();
                row.lpips += g.value(nodes.lpips).item();
                row.mouth += g.value(nodes.mouth).item();
                row.xyz += g.value(nodes.xyz).item();
                row.scale += g.value(nodes.scale).item();
            }
            const float inv = 1.0f / static_cast<float>(sup_e.size());
            total = g.mul_scalar(total, inv);
            row.l1 *= inv;
            row.ssim *= inv;
            row.lpips *= inv;
            row.mouth *= inv;
            row.xyz *= inv;
            row.scale *= inv;
            row.total = g.value(total).item();
            store.zero_grads();
            g.backward(total);
            return row;
        };

        // fast pass without per-op scans; any non-finite loss or parameter
        // gradient triggers a bit-identical diagnostic rebuild that names
        // the offending op before anything is updated
        LossRow row;
        try {
            row = run_step(false);
        } catch (const std::runtime_error& e) {
            throw std::runtime_error("train: aborted at step " + std::to_string(step) + "; component: " + e.what());
        }
        bool healthy = std::isfinite(row.total);
        if (healthy) {
            for (const auto& [name, entry] : store) {
                if (!entry.grad.all_finite()) {
                    healthy = false;
                    break;
                }
            }
        }
        if (!healthy) {
            try {
                run_step(true);
            } catch (const std::runtime_error& e) {
                throw std::runtime_error("train: non-finite value at step " + std::to_string(step) +
                                         "; component: " + e.what());
            }
            throw std::runtime_error("train: non-finite value at step " + std::to_string(step) +
                                     "; component: parameter update");
        }
        opt.step(store);
        result.history.push_back(row);

        if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
            const std::string path = out_dir + "/ckpt_" + std::to_string(step + 1) + ".uvgackpt";
            save_checkpoint(store, path);
            result.final_checkpoint = path;
        }
    }
    if (cfg.steps > 0) {
        const std::string path = out_dir + "/ckpt_final.uvgackpt";
        save_checkpoint(store, path);
        result.final_checkpoint = path;
    }
    write_loss_csv(result.history, out_dir + "/loss.csv");
    return result;
}

// ---------------------------------------------------------------------------
// Reconstruction to an asset, evaluation, refinement.
// ---------------------------------------------------------------------------

inline AvatarAsset reconstruct_asset(const System& sys, ParamStore<float>& store,
                                     const std::vector<Tensor<float>>& images) {
    if (images.empty()) throw std::invalid_argument("reconstruct: zero input images");
    GraphF g;
    const auto canon = sys.model.reconstruct(g, store, images);
    AvatarAsset a;
    a.rig_hash = sys.head.content_hash();
    a.uv_size = sys.uv();
    a.recon_cfg = sys.model.config();
    a.unet_cfg = sys.dynamic.config();
    a.f_id = g.value(canon.f_id);
    a.raw_maps = g.value(canon.raw_maps);
    for (const auto& im : images)
        a.input_hashes.push_back(fnv1a64(im.v.data(), im.v.size() * sizeof(float)));
    for (const auto& name : store.names())
        if (name.rfind("unet/", 0) == 0) a.unet.create(name, store.value(name));
    return a;
}

/// Renders an asset at (expression, camera) through its embedded UNet.
inline Tensor<float> render_asset(const System& sys, const AvatarAsset& asset, const rig::ExpressionParams& expr,
                                  const Camera& cam, const std::array<float, 3>& bg,
                                  DriveTimings* timings = nullptr) {
    GraphF g;
    g.check_finite = false;  // read-only inference path
    ParamStore<float>& unet = const_cast<AvatarAsset&>(asset).unet;
    const auto f_id = g.constant(asset.f_id, "f_id");
    const auto raw = g.constant(asset.raw_maps, "raw");
    const auto drive = build_drive(sys, g, unet, f_id, raw, expr, cam, bg, timings);
    return g.value(drive.frame);
}

inline double psnr(const Tensor<float>& a, const Tensor<float>& b) {
    if (a.shape != b.shape) throw std::invalid_argument("psnr: shape mismatch");
    double mse = 0;
    for (std::int64_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.size());
    if (mse == 0) return 99.0;
    return 10.0 * std::log10(1.0 / mse);
}

struct RefineConfig {
    int iters = 20;
    double learning_rate = 2e-3;
    std::string metric = "gradmag3";
    double divergence_factor = 10.0;  // abort when loss exceeds this multiple of the initial loss
};

struct RefineView {
    Tensor<float> image;         // ground-truth input view
    Tensor<float> masked_image;  // encoder input
    rig::ExpressionParams expr;
    Camera camera;
};

struct RefineReport {
    double l1_before = 0, l1_after = 0;
    int iters = 0;
    double wall_s = 0;
};

/// Test-time personalization: optimizes the reconstruction parameters on the
/// input views under L1+SSIM+perceptual, with the UNet frozen and mouth-texel
/// gradients detached. The refined asset keeps the pre-refine mouth texels of
/// the static maps byte-identical.
inline AvatarAsset refine(const System& sys, ParamStore<float>& store, const AvatarAsset& asset_in,
                          const std::vector<RefineView>& views, const RefineConfig& rcfg, RefineReport* report) {
    if (views.empty()) throw std::invalid_argument("refine: at least one view required");
    const auto t_start = std::chrono::steady_clock::now();
    const std::array<float, 3> bg{0, 0, 0};

    auto mean_l1 = [&](const AvatarAsset& a) {
        double acc = 0;
        for (const auto& v : views) {
            const auto frame = render_asset(sys, a, v.expr, v.camera, bg);
            double l = 0;
            const std::int64_t plane = static_cast<std::int64_t>(v.camera.height) * v.camera.width;
            for (int c = 0; c < 3; ++c)
                for (std::int64_t p = 0; p < plane; ++p)
                    l += std::abs(static_cast<double>(frame[c * plane + p]) - v.image[c * plane + p]);
            acc += l / static_cast<double>(3 * plane);
        }
        return acc / static_cast<double>(views.size());
    };
    const double before = mean_l1(asset_in);

    // mouth-texel detach mask over the UV grid
    Tensor<float> mouth_c1({1, sys.uv(), sys.uv()});
    for (std::int64_t i = 0; i < mouth_c1.size(); ++i) mouth_c1[i] = sys.mouth_uv[i];

    std::vector<Tensor<float>> inputs;
    for (const auto& v : views) inputs.push_back(v.masked_image);

    store.set_frozen("unet/", true);
    Adam<float> opt(rcfg.learning_rate);
    double initial_total = -1;
    int iters_done = 0;
    for (int it = 0; it < rcfg.iters; ++it) {
        GraphF g;
        const auto canon = sys.model.reconstruct(g, store, inputs);
        // detach mouth-region gradients on the decoded maps
        auto detach_mouth = [&](IdF x) {
            const int C = g.value(x).dim(0);
            std::vector<IdF> m1(static_cast<size_t>(C), g.constant(mouth_c1, "mouth"));
            const auto mask = C == 1 ? m1[0] : g.concat(m1, 0);
            const auto inv = g.add_scalar(g.mul_scalar(mask, -1.0f), 1.0f);
            return g.add(g.mul(g.stop_gradient(x), mask), g.mul(x, inv));
        };
        const auto f_id = detach_mouth(canon.f_id);
        const auto raw = detach_mouth(canon.raw_maps);
        IdF total = -1;
        for (size_t k = 0; k < views.size(); ++k) {
            const auto& v = views[k];
            const auto drive = build_drive(sys, g, store, f_id, raw, v.expr, v.camera, bg);
            const auto rgb = g.slice(drive.frame, 0, 0, 3);
            const auto gt = g.constant(v.image, "gt");
            auto frame_loss = g.add(loss::l1(g, rgb, gt),
                                    g.add(g.mul_scalar(loss::ssim_loss(g, rgb, gt), 0.1f),
                                          g.mul_scalar(loss::perceptual(g, rgb, gt, rcfg.metric), 0.2f)));
            total = (k == 0) ? frame_loss : g.add(total, frame_loss);
        }
        total = g.mul_scalar(total, 1.0f / static_cast<float>(views.size()));
        const double now = g.value(total).item();
        if (initial_total < 0) initial_total = now;
        if (now > rcfg.divergence_factor * initial_total) {
            store.set_frozen("unet/", false);
            throw std::runtime_error("refine: diverged at iteration " + std::to_string(it) + " (loss " +
                                     std::to_string(now) + " > " + std::to_string(rcfg.divergence_factor) +
                                     "x initial)");
        }
        store.zero_grads();
        g.backward(total);
        opt.step(store);
        ++iters_done;
    }
    store.set_frozen("unet/", false);

    // assemble the refined asset; mouth texels of the static maps are
    // spliced back byte-identically (exact zero-update on masked texels)
    AvatarAsset out = reconstruct_asset(sys, store, inputs);
    out.input_hashes = asset_in.input_hashes;
    const std::int64_t plane = static_cast<std::int64_t>(sys.uv()) * sys.uv();
    for (int c = 0; c < maps::kChannels; ++c)
        for (std::int64_t p = 0; p < plane; ++p)
            if (sys.mouth_uv[p] > 0) out.raw_maps[c * plane + p] = asset_in.raw_maps[c * plane + p];

    if (report) {
        report->l1_before = before;
        report->l1_after = mean_l1(out);
        report->iters = iters_done;
        report->wall_s = detail::ms_since(t_start) / 1000.0;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Animation + benchmark.
// ---------------------------------------------------------------------------

struct AnimateResult {
    std::vector<DriveTimings> per_frame;
    std::vector<std::string> frame_paths;
};

inline AnimateResult animate(const System& sys, const AvatarAsset& asset,
                             const std::vector<rig::ExpressionParams>& sequence,
                             const std::vector<Camera>& cameras, const std::array<float, 3>& bg,
                             const std::string& out_dir) {
    if (sequence.empty()) throw std::invalid_argument("animate: empty expression sequence");
    if (cameras.empty()) throw std::invalid_argument("animate: at least one camera required");
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    AnimateResult res;
    std::ofstream manifest(out_dir + "/frames.txt");
    std::ofstream timing(out_dir + "/timings.csv");
    timing << "frame,driving_ms,unet_ms,lbs_ms,project_ms,sort_ms,composite_ms,total_ms\n";
    for (size_t f = 0; f < sequence.size(); ++f) {
        DriveTimings t;
        const auto t0 = std::chrono::steady_clock::now();
        const Camera& cam = cameras[f % cameras.size()];
        const auto frame = render_asset(sys, asset, sequence[f], cam, bg, &t);
        const double total_ms = detail::ms_since(t0);
        char name[64];
        std::snprintf(name, sizeof name, "frame_%05zu.png", f);
        img::write_png(img::from_frame(frame, 3), out_dir + "/" + name);
        manifest << name << "\n";
        char buf[256];
        std::snprintf(buf, sizeof buf, "%zu,%.3f,%.3f,%.3f,%.3f,%.3f,%.3f,%.3f\n", f, t.driving_ms, t.unet_ms,
                      t.lbs_ms, t.project_ms, t.sort_ms, t.composite_ms, total_ms);
        timing << buf;
        res.per_frame.push_back(t);
        res.frame_paths.push_back(name);
    }
    return res;
}

struct BenchmarkRow {
    std::string stage;
    double mean_ms = 0, median_ms = 0, p95_ms = 0;
};

struct BenchmarkReport {
    std::vector<BenchmarkRow> rows;
    int frames = 0;
    int primitives = 0;
};

/// Per-stage timing of the drive path. Absolute thresholds are never
/// asserted; full-scale reference figures are printed for context only.
inline BenchmarkReport benchmark(const System& sys, const AvatarAsset& asset, int n_frames,
                                 std::uint64_t seed = 17) {
    if (n_frames < 1) throw std::invalid_argument("benchmark: need at least one frame");
    Rng rng(seed);
    std::vector<DriveTimings> samples;
    std::vector<double> totals;
    const Camera cam = Camera::look_at({0, 0, 0.62}, {0, 0, 0}, {0, 1, 0}, 190.0, 128, 128);
    for (int f = 0; f < n_frames; ++f) {
        auto expr = rig::ExpressionParams::neutral(sys.head);
        for (auto& p : expr.psi) p = rng.uniform(-0.8, 0.8);
        if (rng.uniform() < 0.5)
            expr.pose.joint_rot[2] = Quat<double>::from_axis_angle({1, 0, 0}, rng.uniform(0.0, 0.2));
        DriveTimings t;
        const auto t0 = std::chrono::steady_clock::now();
        render_asset(sys, asset, expr, cam, {0, 0, 0}, &t);
        totals.push_back(detail::ms_since(t0));
        samples.push_back(t);
    }
    auto stat = [&](const std::string& name, auto getter) {
        std::vector<double> v;
        for (const auto& s : samples) v.push_back(getter(s));
        std::sort(v.begin(), v.end());
        BenchmarkRow row;
        row.stage = name;
        row.mean_ms = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
        row.median_ms = v[v.size() / 2];
        row.p95_ms = v[static_cast<size_t>(std::min(v.size() - 1.0, std::floor(0.95 * v.size())))];
        return row;
    };
    BenchmarkReport rep;
    rep.frames = n_frames;
    rep.primitives = sys.n_valid();
    rep.rows.push_back(stat("driving_map", [](const DriveTimings& t) { return t.driving_ms; }));
    rep.rows.push_back(stat("unet", [](const DriveTimings& t) { return t.unet_ms; }));
    rep.rows.push_back(stat("lbs", [](const DriveTimings& t) { return t.lbs_ms; }));
    rep.rows.push_back(stat("project", [](const DriveTimings& t) { return t.project_ms; }));
    rep.rows.push_back(stat("sort", [](const DriveTimings& t) { return t.sort_ms; }));
    rep.rows.push_back(stat("composite", [](const DriveTimings& t) { return t.composite_ms; }));
    {
        std::sort(totals.begin(), totals.end());
        BenchmarkRow row;
        row.stage = "total_drive";
        row.mean_ms = std::accumulate(totals.begin(), totals.end(), 0.0) / totals.size();
        row.median_ms = totals[totals.size() / 2];
        row.p95_ms = totals[static_cast<size_t>(std::min(totals.size() - 1.0, std::floor(0.95 * totals.size())))];
        rep.rows.push_back(row);
    }
    return rep;
}

inline void print_benchmark(const BenchmarkReport& rep, std::ostream& os) {
    os << "benchmark frames=" << rep.frames << " primitives=" << rep.primitives << "\n";
    os << "stage,mean_ms,median_ms,p95_ms\n";
    char buf[160];
    for (const auto& r : rep.rows) {
        std::snprintf(buf, sizeof buf, "%s,%.3f,%.3f,%.3f\n", r.stage.c_str(), r.mean_ms, r.median_ms, r.p95_ms);
        os << buf;
    }
    os << "reference_full_scale_gpu encode_s=0.4 drive_ms=22 fps=45 refine_s=10 (informational, not asserted)\n";
}

// ---------------------------------------------------------------------------
// Config files: plain key=value lines, '#' comments. Keys override the
// corresponding CLI flags when both are given.
// ---------------------------------------------------------------------------

inline std::map<std::string, std::string> read_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("config: cannot open " + path);
    std::map<std::string, std::string> out;
    std::string line;
    while (std::getline(is, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        while (!line.empty() && (line.back() == ' ' || line.back() == '\r')) line.pop_back();
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw std::runtime_error("config: bad line: " + line);
        out[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return out;
}

/// Model-shape keys shared by every verb that builds a System.
inline void apply_model_config(recon::ReconConfig& rc, dyn::UNetConfig& uc,
                               const std::map<std::string, std::string>& kv) {
    auto geti = [&](const char* k, int& slot) {
        auto it = kv.find(k);
        if (it != kv.end()) slot = std::stoi(it->second);
    };
    geti("image_size", rc.image_size);
    geti("token_dim", rc.token_dim);
    geti("n_max", rc.n_max);
    geti("encoder_blocks", rc.encoder_blocks);
    geti("fuse_blocks", rc.fuse_blocks);
    geti("query_blocks", rc.query_blocks);
    geti("heads", rc.heads);
    geti("query_hw", rc.query_hw);
    geti("uv_size", rc.uv_size);
    geti("id_dim", rc.id_dim);
    geti("decoder_width", rc.decoder_width);
    geti("mlp_ratio", rc.mlp_ratio);
    geti("unet_stages", uc.stages);
    geti("unet_base", uc.base_width);
    geti("unet_max", uc.max_width);
    uc.in_channels = rc.id_dim + 3;
    uc.uv_size = rc.uv_size;
    rc.validate();
    uc.validate();
}

inline void apply_config(TrainConfig& cfg, const std::map<std::string, std::string>& kv) {
    auto geti = [&](const char* k, int& slot) {
        auto it = kv.find(k);
        if (it != kv.end()) slot = std::stoi(it->second);
    };
    auto getd = [&](const char* k, double& slot) {
        auto it = kv.find(k);
        if (it != kv.end()) slot = std::stod(it->second);
    };
    getd("learning_rate", cfg.learning_rate);
    geti("steps", cfg.steps);
    geti("supervision_views", cfg.supervision_views);
    geti("max_input_images", cfg.max_input_images);
    geti("checkpoint_every", cfg.checkpoint_every);
    geti("sampler_anchors", cfg.sampler_anchors);
    geti("sampler_random", cfg.sampler_random);
    if (auto it = kv.find("seed"); it != kv.end()) cfg.seed = std::stoull(it->second);
    if (auto it = kv.find("sampler"); it != kv.end()) {
        if (it->second == "adjusted")
            cfg.adjusted_sampler = true;
        else if (it->second == "uniform")
            cfg.adjusted_sampler = false;
        else
            throw std::runtime_error("config: sampler must be adjusted|uniform");
    }
    if (auto it = kv.find("metric"); it != kv.end()) cfg.metric = it->second;
    getd("w_l1", cfg.weights.l1);
    getd("w_ssim", cfg.weights.ssim);
    getd("w_lpips", cfg.weights.lpips);
    getd("w_mouth", cfg.weights.mouth);
    getd("w_xyz", cfg.weights.xyz);
    getd("w_scale", cfg.weights.scale);
}

}  // namespace uvga::pipe
