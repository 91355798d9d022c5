// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Criteria 6 and 7 share one trained model (the closed-loop overfit
// feeds the refinement check).

#include <chrono>
#include <cstdarg>
#include <thread>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "uvga/gradcheck.hpp"
#include "uvga/losses.hpp"
#include "uvga/pipeline.hpp"

using namespace uvga;
using namespace uvga::pipe;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Criterion = std::function<Outcome()>;

double now_s() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list args;
    va_start(args, f);
    std::vsnprintf(buf, sizeof buf, f, args);
    va_end(args);
    return buf;
}

// shared state between criteria 6 and 7
struct TrainedModel {
    bool ready = false;
    ParamStore<float> store;
    std::string data_dir;
};
TrainedModel g_trained;

System& desk_system() {
    static System sys = make_system(desk_recon_config(), desk_unet_config());
    return sys;
}

// --------------------------------------------------------------------------
// 1. gradient suite
// --------------------------------------------------------------------------
Outcome criterion_gradients() {
    const double t0 = now_s();
    auto cases = substrate_gradcheck_catalog(20240901ULL);
    const auto loss_cases = loss::loss_gradcheck_cases();
    cases.insert(cases.end(), loss_cases.begin(), loss_cases.end());
    double worst = 0;
    std::string worst_name;
    for (const auto& c : cases) {
        for (int s = 0; s < 10; ++s) {
            Rng rng(20240901ULL + 1000003ULL * static_cast<std::uint64_t>(s));
            const double err = grad_check(c.build, c.make_inputs(rng), 1e-4);
            if (err > worst) {
                worst = err;
                worst_name = c.name;
            }
        }
    }
    const double wall = now_s() - t0;
    Outcome o;
    o.pass = worst < 1e-4 && wall < 120.0;
    o.detail = fmt("ops=%zu seeds=10 worst=%.3g (%s) tol=1e-4 wall=%.1fs (<120s)", cases.size(), worst,
                   worst_name.c_str(), wall);
    return o;
}

// --------------------------------------------------------------------------
// 2. renderer oracle suite
// --------------------------------------------------------------------------
Outcome criterion_renderer() {
    Outcome o;
    std::ostringstream d;
    bool ok = true;

    // single splat: opaque gaussian covering a pixel center
    {
        const int size = 49;
        const Camera cam = Camera::look_at({0, 0, 1.0}, {0, 0, 0}, {0, 1, 0}, 60.0, size, size);
        splat::GaussianCloud<double> c{Tensor<double>({1, 3}, {0, 0, 0}), Tensor<double>({1, 4}, {1, 0, 0, 0}),
                                       Tensor<double>({1, 3}, {0.08, 0.08, 0.08}), Tensor<double>({1}, {0.999999}),
                                       Tensor<double>({1, 3}, {0.3, 0.6, 0.9})};
        const auto frame = splat::render(c, cam, {0.0, 0.0, 0.0});
        const std::int64_t plane = static_cast<std::int64_t>(size) * size;
        const std::int64_t p = (size / 2) * size + size / 2;
        const double err = std::max({std::abs(frame[0 * plane + p] - 0.3), std::abs(frame[1 * plane + p] - 0.6),
                                     std::abs(frame[2 * plane + p] - 0.9)});
        ok = ok && err < 1e-3;
        d << "single_splat_err=" << err << " (tol 1e-3)";
    }
    // two splats vs closed form
    {
        const Camera cam = Camera::look_at({0, 0, 1.0}, {0, 0, 0}, {0, 1, 0}, 40.0, 32, 32);
        splat::GaussianCloud<double> c{Tensor<double>({2, 3}, {0.0, 0.0, 0.05, 0.01, 0.0, -0.05}),
                                       Tensor<double>({2, 4}, {1, 0, 0, 0, 1, 0, 0, 0}),
                                       Tensor<double>({2, 3}, {0.05, 0.05, 0.05, 0.05, 0.05, 0.05}),
                                       Tensor<double>({2}, {0.6, 0.7}),
                                       Tensor<double>({2, 3}, {0.9, 0.1, 0.2, 0.1, 0.8, 0.3})};
        const std::array<double, 3> bg{0.05, 0.05, 0.05};
        const auto frame = splat::render(c, cam, bg);
        const auto proj = splat::project(c, cam);
        const int px = 17, py = 16;
        auto weight = [&](const splat::ProjectedSplat<double>& s, double alpha) {
            const double det = s.sxx * s.syy - s.sxy * s.sxy;
            const double a = s.syy / det, b = -s.sxy / det, cc = s.sxx / det;
            const double dx = px + 0.5 - s.mx, dy = py + 0.5 - s.my;
            const double power = -0.5 * (a * dx * dx + 2 * b * dx * dy + cc * dy * dy);
            if (power < splat::kPowerCutoff) return 0.0;
            return std::min(alpha * std::exp(power), splat::kMaxBlendWeight);
        };
        const double w0 = weight(proj[0], 0.6), w1 = weight(proj[1], 0.7);
        double err = 0;
        const std::int64_t plane = 32 * 32, p = py * 32 + px;
        for (int ch = 0; ch < 3; ++ch) {
            const double expect = c.color.at(0, ch) * w0 + c.color.at(1, ch) * w1 * (1 - w0) +
                                  bg[static_cast<size_t>(ch)] * (1 - w0) * (1 - w1);
            err = std::max(err, std::abs(frame[ch * plane + p] - expect));
        }
        ok = ok && err < 1e-6;
        d << " two_splat_err=" << err << " (tol 1e-6)";
    }
    // finite-difference gradients on 5 primitives
    {
        Rng rng(777);
        const Camera cam = Camera::look_at({0, 0, 1.0}, {0, 0, 0}, {0, 1, 0}, 40.0, 32, 32);
        const std::array<double, 3> bg{0.1, 0.2, 0.3};
        auto probe = rng.uniform_tensor<double>({4, 32, 32}, -1.0, 1.0);
        splat::GaussianCloud<double> c{Tensor<double>({5, 3}), Tensor<double>({5, 4}), Tensor<double>({5, 3}),
                                       Tensor<double>({5}), Tensor<double>({5, 3})};
        for (int m = 0; m < 5; ++m) {
            for (int dd = 0; dd < 3; ++dd) {
                c.position.at(m, dd) = rng.uniform(-0.12, 0.12);
                c.scale.at(m, dd) = rng.uniform(0.02, 0.06);
                c.color.at(m, dd) = rng.uniform(0.1, 0.9);
            }
            Quat<double> q{rng.normal(), rng.normal(), rng.normal(), rng.normal()};
            q = q.normalized();
            c.rotation.at(m, 0) = q.w;
            c.rotation.at(m, 1) = q.x;
            c.rotation.at(m, 2) = q.y;
            c.rotation.at(m, 3) = q.z;
            c.opacity[m] = rng.uniform(0.3, 0.9);
        }
        auto objective = [&](const splat::GaussianCloud<double>& cc) {
            const auto frame = splat::render(cc, cam, bg);
            double acc = 0;
            for (std::int64_t i = 0; i < frame.size(); ++i) acc += frame[i] * probe[i];
            return acc;
        };
        const auto grads = splat::render_backward(c, cam, bg, probe);
        double worst = 0;
        auto check = [&](Tensor<double>& field, const Tensor<double>& analytic, double eps) {
            for (std::int64_t i = 0; i < field.size(); ++i) {
                const double saved = field[i];
                field[i] = saved + eps;
                const double fp = objective(c);
                field[i] = saved - eps;
                const double fm = objective(c);
                field[i] = saved;
                const double numeric = (fp - fm) / (2 * eps);
                const double rel =
                    std::abs(analytic[i] - numeric) / std::max({std::abs(analytic[i]), std::abs(numeric), 1e-6});
                worst = std::max(worst, rel);
            }
        };
        check(c.position, grads.position, 1e-6);
        check(c.rotation, grads.rotation, 1e-5);
        check(c.scale, grads.scale, 1e-6);
        check(c.opacity, grads.opacity, 1e-6);
        check(c.color, grads.color, 1e-6);
        ok = ok && worst < 1e-3;
        d << " fd_grad_worst=" << worst << " (tol 1e-3)";
    }
    // determinism
    {
        Rng rng(9);
        const Camera cam = Camera::look_at({0, 0, 1.0}, {0, 0, 0}, {0, 1, 0}, 50.0, 48, 48);
        splat::GaussianCloud<double> c{rng.uniform_tensor<double>({20, 3}, -0.1, 0.1),
                                       Tensor<double>({20, 4}), rng.uniform_tensor<double>({20, 3}, 0.02, 0.05),
                                       rng.uniform_tensor<double>({20}, 0.2, 0.9),
                                       rng.uniform_tensor<double>({20, 3}, 0.0, 1.0)};
        for (int m = 0; m < 20; ++m) c.rotation.at(m, 0) = 1.0;
        const auto f1 = splat::render(c, cam, {0, 0, 0});
        const auto f2 = splat::render(c, cam, {0, 0, 0});
        const bool det = f1.v == f2.v;
        ok = ok && det;
        d << " determinism=" << (det ? "bit-exact" : "MISMATCH");
    }
    return {ok, d.str()};
}

// --------------------------------------------------------------------------
// 3. flexibility suite (desk scale, 32-bit)
// --------------------------------------------------------------------------
Outcome criterion_flexibility() {
    auto& sys = desk_system();
    ParamStore<float> store;
    Rng rng(41);
    sys.model.init_params(store, rng);
    sys.dynamic.init_params(store, rng);
    std::vector<Tensor<float>> images;
    for (int i = 0; i < 4; ++i) images.push_back(rng.uniform_tensor<float>({3, 128, 128}, 0, 1));

    bool shapes_ok = true;
    for (int n = 1; n <= 4; ++n) {
        GraphF g;
        g.check_finite = false;
        std::vector<Tensor<float>> subset(images.begin(), images.begin() + n);
        const auto canon = sys.model.reconstruct(g, store, subset);
        shapes_ok = shapes_ok && g.value(canon.f_id).shape == Shape{16, 64, 64} &&
                    g.value(canon.raw_maps).shape == Shape{14, 64, 64};
    }
    auto run = [&](const std::vector<int>& order) {
        GraphF g;
        g.check_finite = false;
        std::vector<Tensor<float>> shuffled;
        for (int idx : order) shuffled.push_back(images[static_cast<size_t>(idx)]);
        const auto canon = sys.model.reconstruct(g, store, shuffled);
        return std::pair<Tensor<float>, Tensor<float>>{g.value(canon.f_id), g.value(canon.raw_maps)};
    };
    const auto a = run({0, 1, 2, 3});
    const auto b = run({2, 3, 1, 0});
    const float err = std::max(max_abs_diff(a.first, b.first), max_abs_diff(a.second, b.second));
    Outcome o;
    o.pass = shapes_ok && err <= 1e-5f;
    o.detail = fmt("N=1..4 shapes %s, permutation max-abs %.3g (tol 1e-5)", shapes_ok ? "fixed" : "BROKEN",
                   static_cast<double>(err));
    return o;
}

// --------------------------------------------------------------------------
// 4. dynamic contract
// --------------------------------------------------------------------------
Outcome criterion_dynamic() {
    auto& sys = desk_system();
    Rng rng(43);
    bool outside_ok = true;
    // random deltas never leak outside M_dyn (activated-attribute comparison)
    for (int trial = 0; trial < 3; ++trial) {
        GraphF g;
        g.check_finite = false;
        const auto raw = g.constant(rng.uniform_tensor<float>({14, 64, 64}, -1, 1));
        const auto delta = g.constant(rng.uniform_tensor<float>({14, 64, 64}, -3, 3));
        const auto fused =
            dyn::DynDecoder<float>::fuse_dynamic(g, raw, delta, g.constant(sys.m_dyn));
        const auto ms = maps::build_map_activations(g, fused, sys.model.anchor(), sys.act);
        const auto mst = maps::build_map_activations(g, raw, sys.model.anchor(), sys.act);
        const std::int64_t plane = 64 * 64;
        auto cmp = [&](GraphF::Id dyn_id, GraphF::Id st_id, int ch) {
            const auto& dv = g.value(dyn_id);
            const auto& sv = g.value(st_id);
            for (int c = 0; c < ch; ++c)
                for (std::int64_t p = 0; p < plane; ++p)
                    if (sys.m_dyn[p] == 0.0f && dv[c * plane + p] != sv[c * plane + p]) return false;
            return true;
        };
        outside_ok = outside_ok && cmp(ms.position, mst.position, 3) && cmp(ms.opacity, mst.opacity, 1) &&
                     cmp(ms.scale, mst.scale, 3) && cmp(ms.color, mst.color, 3) && cmp(ms.rotation, mst.rotation, 4);
    }
    // zero-initialized UNet reproduces the static render bit-exactly, at a
    // non-neutral expression (deltas are zero, not merely the driving map)
    ParamStore<float> store;
    Rng prng(44);
    sys.model.init_params(store, prng);
    sys.dynamic.init_params(store, prng);  // unet/out zero-initialized
    std::vector<Tensor<float>> images{prng.uniform_tensor<float>({3, 128, 128}, 0, 1)};
    const auto asset = reconstruct_asset(sys, store, images);
    auto expr = rig::ExpressionParams::neutral(sys.head);
    expr.psi[3] = 0.8;
    expr.pose.joint_rot[2] = Quat<double>::from_axis_angle({1, 0, 0}, 0.15);
    const Camera cam = Camera::look_at({0, 0, 0.62}, {0, 0, 0}, {0, 1, 0}, 190.0, 128, 128);
    const auto dynamic_frame = render_asset(sys, asset, expr, cam, {0, 0, 0});
    const auto static_frame = render_static(sys, asset.raw_maps, expr.pose, cam, {0, 0, 0});
    const bool zero_unet_ok = dynamic_frame.v == static_frame.v;
    Outcome o;
    o.pass = outside_ok && zero_unet_ok;
    o.detail = fmt("outside-mask bit-exact=%s zero-unet static render bit-exact=%s",
                   outside_ok ? "yes" : "NO", zero_unet_ok ? "yes" : "NO");
    return o;
}

// --------------------------------------------------------------------------
// 5. rig suite
// --------------------------------------------------------------------------
Outcome criterion_rig() {
    const auto r = rig::make_procedural_rig();
    Rng rng(45);
    // deform linearity at machine precision
    double lin_err = 0;
    for (int t = 0; t < 5; ++t) {
        std::vector<double> a(12), b(12), ab(12);
        for (int e = 0; e < 12; ++e) {
            a[static_cast<size_t>(e)] = rng.uniform(-1.5, 1.5);
            b[static_cast<size_t>(e)] = rng.uniform(-1.5, 1.5);
            ab[static_cast<size_t>(e)] = a[static_cast<size_t>(e)] + b[static_cast<size_t>(e)];
        }
        const auto da = rig::deform(r, a), db = rig::deform(r, b), dab = rig::deform(r, ab);
        for (std::int64_t i = 0; i < dab.size(); ++i)
            lin_err = std::max(lin_err, std::abs(dab[i] - (da[i] + db[i] - r.vertices[i])));
    }
    // lbs identity + rigid equivariance
    const auto ident = rig::lbs(r, rig::Pose::identity(3), r.vertices, nullptr, r.skin_weights);
    const double id_err = max_abs_diff(ident.points, r.vertices);
    rig::Pose pose = rig::Pose::identity(3);
    pose.joint_rot[2] = Quat<double>::from_axis_angle({1, 0, 0}, 0.3);
    const auto base = rig::lbs(r, pose, r.vertices, nullptr, r.skin_weights);
    rig::Pose moved = pose;
    moved.global.rot = Quat<double>::from_axis_angle({0.2, 1, 0}, 0.8);
    moved.global.trans = {0.03, -0.05, 0.2};
    const auto res = rig::lbs(r, moved, r.vertices, nullptr, r.skin_weights);
    double rigid_err = 0;
    for (int i = 0; i < r.vertex_count(); ++i) {
        const Vec3<double> bp{base.points.at(i, 0), base.points.at(i, 1), base.points.at(i, 2)};
        const Vec3<double> expect = moved.global.apply(bp);
        rigid_err = std::max({rigid_err, std::abs(res.points.at(i, 0) - expect.x),
                              std::abs(res.points.at(i, 1) - expect.y), std::abs(res.points.at(i, 2) - expect.z)});
    }
    // barycentric affine exactness at 64-bit
    rig::HeadRig quad;
    quad.vertices = Tensor<double>({4, 3});
    quad.faces = {{0, 1, 2}, {0, 2, 3}};
    quad.expr_basis = Tensor<double>({1, 4, 3});
    quad.joints = {{"root", -1, {0, 0, 0}}};
    quad.skin_weights = Tensor<double>({4, 1}, 1.0);
    quad.uv = Tensor<double>({2, 3, 2}, {0, 0, 1, 0, 1, 1, 0, 0, 1, 1, 0, 1});
    const double uvs[4][2] = {{0, 0}, {1, 0}, {1, 1}, {0, 1}};
    auto affine = [](double u, double v) {
        return Vec3<double>{1.7 * u - 0.4 * v + 0.3, -2.1 * u + 0.9 * v, 0.5 * u + 1.5 * v - 1.0};
    };
    for (int i = 0; i < 4; ++i) {
        const auto p = affine(uvs[i][0], uvs[i][1]);
        quad.vertices.at(i, 0) = p.x;
        quad.vertices.at(i, 1) = p.y;
        quad.vertices.at(i, 2) = p.z;
    }
    quad.regions["all"] = {0, 1, 2, 3};
    quad.validate();
    const auto binding = uvmap::bind_texels(quad, 32, 32);
    const auto map = uvmap::uv_position_map(quad, quad.vertices, binding);
    double affine_err = 0;
    const std::int64_t plane = 32 * 32;
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
            double u, v;
            uvmap::TexelBinding::center(x, y, 32, 32, u, v);
            const auto expect = affine(u, v);
            const std::int64_t p = y * 32 + x;
            affine_err = std::max({affine_err, std::abs(map[0 * plane + p] - expect.x),
                                   std::abs(map[1 * plane + p] - expect.y), std::abs(map[2 * plane + p] - expect.z)});
        }
    Outcome o;
    o.pass = lin_err < 1e-12 && id_err < 1e-6 && rigid_err < 1e-6 && affine_err < 1e-9;
    o.detail = fmt("deform_linearity=%.3g lbs_identity=%.3g rigid_equivariance=%.3g affine_exactness=%.3g",
                   lin_err, id_err, rigid_err, affine_err);
    return o;
}

// --------------------------------------------------------------------------
// 6. closed-loop overfit (reference run; threshold pinned at 28 dB)
// --------------------------------------------------------------------------
Outcome criterion_overfit() {
    const double t0 = now_s();
    auto& sys = desk_system();
    const std::string ddir = (fs::temp_directory_path() / "uvga_accept_ds").string();
    data::DatasetManifest man;
    if (fs::exists(ddir + "/manifest.txt")) {
        man = data::load_manifest(ddir, sys.head);
    } else {
        data::DatasetOptions o;
        o.n_ids = 1;
        o.n_expr = 8;
        o.n_views = 8;
        o.image_size = 128;
        o.seed = 12;
        man = data::generate_dataset(sys.head, sys.binding, o, ddir);
    }
    g_trained.store = ParamStore<float>();
    Rng prng(1);
    sys.model.init_params(g_trained.store, prng);
    sys.dynamic.init_params(g_trained.store, prng);

    TrainConfig cfg;
    cfg.steps = 2000;
    cfg.learning_rate = 3e-4;      // overfit schedule for the desk-scale model
    cfg.supervision_views = 2;     // keeps the reference run inside the budget
    cfg.max_input_images = 2;
    cfg.adjusted_sampler = false;  // 8 expressions < the 26-slot plan
    cfg.checkpoint_every = 0;
    cfg.seed = 33;
    cfg.holdout_expr = 7;
    cfg.holdout_view = 7;
    const auto odir = (fs::temp_directory_path() / "uvga_accept_train").string();
    const auto res = train(sys, g_trained.store, man, cfg, odir);

    FrameStore frames(man);
    std::vector<Tensor<float>> inputs{frames.masked_image(0, 0, 0), frames.masked_image(0, 2, 4)};
    const auto asset = reconstruct_asset(sys, g_trained.store, inputs);
    const auto& rec = man.frame(0, 7, 7);
    const auto frame =
        render_asset(sys, asset, man.expression(0, 7), man.cameras[static_cast<size_t>(rec.camera_index)], {0, 0, 0});
    Tensor<float> rgb({3, 128, 128});
    const std::int64_t plane = 128 * 128;
    for (int c = 0; c < 3; ++c)
        for (std::int64_t p = 0; p < plane; ++p) rgb[c * plane + p] = frame[c * plane + p];
    const double held_psnr = psnr(rgb, frames.image(0, 7, 7));
    const double wall_min = (now_s() - t0) / 60.0;

    g_trained.ready = true;
    g_trained.data_dir = ddir;

    Outcome o;
    o.pass = held_psnr >= 28.0 && wall_min < 30.0;
    o.detail = fmt("held-out (expr7,view7) psnr=%.2f dB (>=28), 2000 steps wall=%.1f min (<30, %u hw threads), "
                   "loss %.4f -> %.4f",
                   held_psnr, wall_min, std::thread::hardware_concurrency(), res.history.front().total,
                   res.history.back().total);
    return o;
}

// --------------------------------------------------------------------------
// 7. refinement on an unseen identity
// --------------------------------------------------------------------------
Outcome criterion_refine() {
    if (!g_trained.ready) return {false, "skipped: criterion 6 did not produce a trained model"};
    auto& sys = desk_system();
    const std::string ddir = (fs::temp_directory_path() / "uvga_accept_unseen").string();
    data::DatasetManifest man;
    if (fs::exists(ddir + "/manifest.txt")) {
        man = data::load_manifest(ddir, sys.head);
    } else {
        data::DatasetOptions o;
        o.n_ids = 1;
        o.n_expr = 4;
        o.n_views = 4;
        o.image_size = 128;
        o.seed = 777;  // a different synthetic identity than criterion 6
        man = data::generate_dataset(sys.head, sys.binding, o, ddir);
    }
    FrameStore frames(man);
    std::vector<RefineView> views;
    for (const auto& [e, v] : std::vector<std::pair<int, int>>{{0, 0}, {1, 2}}) {
        RefineView rv;
        rv.image = frames.image(0, e, v);
        rv.masked_image = frames.masked_image(0, e, v);
        rv.expr = man.expression(0, e);
        rv.camera = man.cameras[static_cast<size_t>(man.frame(0, e, v).camera_index)];
        views.push_back(std::move(rv));
    }
    std::vector<Tensor<float>> inputs{views[0].masked_image, views[1].masked_image};
    const auto asset = reconstruct_asset(sys, g_trained.store, inputs);

    std::map<std::string, std::vector<float>> unet_before;
    for (const auto& name : g_trained.store.names())
        if (name.rfind("unet/", 0) == 0) unet_before[name] = g_trained.store.value(name).v;

    RefineConfig rcfg;
    rcfg.iters = 20;
    RefineReport report;
    const double t0 = now_s();
    refine(sys, g_trained.store, asset, views, rcfg, &report);
    const double wall = now_s() - t0;

    bool frozen_ok = true;
    for (const auto& [name, bytes] : unet_before)
        frozen_ok = frozen_ok && g_trained.store.value(name).v == bytes;

    const double reduction = (report.l1_before - report.l1_after) / report.l1_before;
    Outcome o;
    o.pass = reduction >= 0.20 && frozen_ok;
    o.detail = fmt("20 iters on 2 views of an unseen identity: L1 %.4f -> %.4f (-%.1f%%, need >=20%%), "
                   "unet byte-identical=%s, wall=%.1fs (report-only)",
                   report.l1_before, report.l1_after, reduction * 100.0, frozen_ok ? "yes" : "NO", wall);
    return o;
}

// --------------------------------------------------------------------------
// 8. distribution adjustment
// --------------------------------------------------------------------------
Outcome criterion_distribution() {
    // planted clusters: a dominant near-neutral mass plus rare expressive ones
    data::ExpressionTable t;
    t.psi_dim = 6;
    Rng rng(81);
    int frame = 0;
    auto push = [&](std::vector<double> base, int count) {
        for (int i = 0; i < count; ++i) {
            data::ExpressionTable::Row row{0, frame++, base};
            for (auto& v : row.psi) v += rng.uniform(-0.03, 0.03);
            t.rows.push_back(std::move(row));
        }
    };
    push({0.05, 0, 0, 0, 0, 0}, 80);
    push({2.0, 0, 0, 0, 0, 0}, 4);
    push({0, 2.0, 0, 0, 0, 0}, 4);
    push({0, 0, 2.0, 0, 0, 0}, 4);
    push({0, 0, 0, 2.0, 0, 0}, 4);

    // retrieve_similar vs brute-force sort: exact match
    const std::vector<double> anchor = t.rows[85].psi;
    std::vector<std::tuple<double, int, int>> brute;
    for (const auto& row : t.rows)
        brute.push_back({data::cosine_similarity(anchor, row.psi), row.identity, row.frame});
    std::sort(brute.begin(), brute.end(), [](const auto& a, const auto& b) {
        if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
        if (std::get<1>(a) != std::get<1>(b)) return std::get<1>(a) < std::get<1>(b);
        return std::get<2>(a) < std::get<2>(b);
    });
    const auto got = data::retrieve_similar(t, anchor, static_cast<int>(t.rows.size()));
    bool retrieval_ok = got.size() == brute.size();
    for (size_t i = 0; retrieval_ok && i < got.size(); ++i)
        retrieval_ok = got[i].identity == std::get<1>(brute[i]) && got[i].frame == std::get<2>(brute[i]);

    // anchor-neighborhood mass: adjusted vs uniform
    const int k_anchor = 8, rand_per = 4;
    const auto plan = data::build_adjusted_sampler(t, k_anchor, rand_per, 3);
    const auto anchors = data::select_anchors(t, k_anchor);
    auto near_anchor = [&](const std::vector<double>& psi) {
        for (const auto& a : anchors)
            if (data::cosine_similarity(a, psi) >= 0.9) return true;
        return false;
    };
    int adj_hits = 0;
    for (const auto& s : plan.slots)
        if (near_anchor(t.rows[static_cast<size_t>(s.frame)].psi)) ++adj_hits;
    const double adj_mass = static_cast<double>(adj_hits) / plan.slots.size();
    int uni_hits = 0;
    for (const auto& row : t.rows)
        if (near_anchor(row.psi)) ++uni_hits;
    const double uni_mass = static_cast<double>(uni_hits) / t.rows.size();

    Outcome o;
    o.pass = retrieval_ok && adj_mass >= 2.0 * uni_mass;
    o.detail = fmt("retrieval==brute_force=%s, anchor-mass adjusted=%.3f uniform=%.3f (need >=2x)",
                   retrieval_ok ? "exact" : "MISMATCH", adj_mass, uni_mass);
    return o;
}

// --------------------------------------------------------------------------
// 9. loss weights
// --------------------------------------------------------------------------
Outcome criterion_weights() {
    Graph<double> g;
    auto s = [&](double x) { return g.constant(Tensor<double>::scalar(x)); };
    const loss::LossWeights w;  // production defaults 1, 0.1, 0.2, 10, 0.01, 1
    const double t1 = g.value(loss::total(g, s(1), s(0), s(0), s(0), s(0), s(0), w)).item();
    const double t2 = g.value(loss::total(g, s(0), s(0), s(0), s(0.1), s(0), s(0), w)).item();
    Outcome o;
    o.pass = t1 == 1.0 && t2 == 1.0;
    o.detail = fmt("total(L1=1)=%.17g total(Lmouth=0.1)=%.17g (both exactly 1)", t1, t2);
    return o;
}

// --------------------------------------------------------------------------
// 10. benchmark report
// --------------------------------------------------------------------------
Outcome criterion_benchmark() {
    auto& sys = desk_system();
    ParamStore<float> store;
    Rng rng(61);
    sys.model.init_params(store, rng);
    sys.dynamic.init_params(store, rng);
    std::vector<Tensor<float>> inputs{rng.uniform_tensor<float>({3, 128, 128}, 0, 1)};
    const auto asset = reconstruct_asset(sys, store, inputs);
    const auto rep = benchmark(sys, asset, 10);
    std::ostringstream ss;
    print_benchmark(rep, ss);
    const std::string text = ss.str();
    const bool has_stages = text.find("driving_map") != std::string::npos &&
                            text.find("unet") != std::string::npos && text.find("lbs") != std::string::npos &&
                            text.find("sort") != std::string::npos &&
                            text.find("composite") != std::string::npos;
    const bool has_reference = text.find("encode_s=0.4") != std::string::npos &&
                               text.find("drive_ms=22") != std::string::npos &&
                               text.find("fps=45") != std::string::npos &&
                               text.find("refine_s=10") != std::string::npos;
    double total_ms = 0;
    for (const auto& r : rep.rows)
        if (r.stage == "total_drive") total_ms = r.mean_ms;
    Outcome o;
    o.pass = has_stages && has_reference;
    o.detail = fmt("per-stage rows=%s reference figures reported=%s mean_drive=%.1f ms (never asserted)",
                   has_stages ? "yes" : "NO", has_reference ? "yes" : "NO", total_ms);
    return o;
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, Criterion>> criteria = {
        {"1-gradient-suite", criterion_gradients},
        {"2-renderer-oracles", criterion_renderer},
        {"3-flexibility", criterion_flexibility},
        {"4-dynamic-contract", criterion_dynamic},
        {"5-rig-suite", criterion_rig},
        {"6-closed-loop-overfit", criterion_overfit},
        {"7-refinement", criterion_refine},
        {"8-distribution-adjustment", criterion_distribution},
        {"9-loss-weights", criterion_weights},
        {"10-benchmark-report", criterion_benchmark},
    };
    int failures = 0;
    for (const auto& [name, fn] : criteria) {
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail = std::string("exception: ") + e.what();
        }
        std::cout << (o.pass ? "PASS" : "FAIL") << " criterion-" << name << ": " << o.detail << "\n"
                  << std::flush;
        failures += o.pass ? 0 : 1;
    }
    std::cout << (failures == 0 ? "acceptance ok=1" : "acceptance ok=0") << " failed=" << failures << "\n";
    return failures == 0 ? 0 : 1;
}
