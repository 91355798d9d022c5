#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "uvga/dynamic.hpp"

using namespace uvga;
using namespace uvga::dyn;

namespace {

UNetConfig tiny_unet(int uv = 32, int stages = 2) {
    UNetConfig c;
    c.in_channels = 8 + 3;
    c.stages = stages;
    c.base_width = 8;
    c.max_width = 32;
    c.uv_size = uv;
    return c;
}

rig::HeadRig shared_rig() {
    static rig::HeadRig r = rig::make_procedural_rig();
    return r;
}

}  // namespace

TEST_CASE("zero-initialized UNet decodes exactly zero deltas") {
    const auto cfg = tiny_unet();
    DynDecoder<double> dec(cfg);
    ParamStore<double> ps;
    Rng rng(21);
    dec.init_params(ps, rng);
    Graph<double> g;
    auto f_id = g.constant(rng.uniform_tensor<double>({8, 32, 32}, -1, 1));
    auto drv = g.constant(rng.uniform_tensor<double>({3, 32, 32}, -0.2, 0.2));
    const auto delta = dec.decode_delta(g, ps, f_id, drv);
    REQUIRE(g.value(delta).shape == Shape{14, 32, 32});
    for (double v : g.value(delta).v) REQUIRE(v == 0.0);
}

TEST_CASE("UNet preserves spatial dims across scales") {
    // same relation as the full-scale setting (400x400x35 -> 400x400x14)
    for (int uv : {16, 32, 64}) {
        DynDecoder<float> dec(tiny_unet(uv, 2));
        ParamStore<float> ps;
        Rng rng(22);
        dec.init_params(ps, rng);
        Graph<float> g;
        auto f_id = g.constant(rng.uniform_tensor<float>({8, uv, uv}, -1, 1));
        auto drv = g.constant(rng.uniform_tensor<float>({3, uv, uv}, -1, 1));
        REQUIRE(g.value(dec.decode_delta(g, ps, f_id, drv)).shape == Shape{14, uv, uv});
    }
}

TEST_CASE("decode_delta rejects mismatched channel counts") {
    DynDecoder<double> dec(tiny_unet());
    ParamStore<double> ps;
    Rng rng(23);
    dec.init_params(ps, rng);
    Graph<double> g;
    auto f_id = g.constant(Tensor<double>({5, 32, 32}));  // wrong: 5+3 != 11
    auto drv = g.constant(Tensor<double>({3, 32, 32}));
    REQUIRE_THROWS_AS(dec.decode_delta(g, ps, f_id, drv), std::invalid_argument);
}

TEST_CASE("a one-texel poke stays inside the UNet receptive field") {
    // stages=1 keeps the receptive field well under the map size
    const int uv = 32;
    DynDecoder<double> dec(tiny_unet(uv, 1));
    ParamStore<double> ps;
    Rng rng(24);
    dec.init_params(ps, rng);
    // the zero-initialized head would hide everything; randomize it
    ps.value("unet/out/w") = rng.normal_tensor<double>(ps.value("unet/out/w").shape, 0.0, 0.1);

    auto run = [&](const Tensor<double>& drv) {
        Graph<double> g;
        auto f_id = g.constant(Tensor<double>({8, uv, uv}, 0.1));
        return g.value(dec.decode_delta(g, ps, f_id, g.constant(drv)));
    };
    Tensor<double> base({3, uv, uv}, 0.05);
    Tensor<double> poked = base;
    const int cx = 16, cy = 16;
    poked.at(1, cy, cx) += 0.5;

    const auto a = run(base), b = run(poked);
    // receptive field radius for stages=1: enc0(1) + down/enc/mid at half res
    // (3 convs -> 6) + up/out convs (2) = 9; assert with margin
    const int rf = 12;
    bool changed_near = false;
    for (int c = 0; c < 14; ++c)
        for (int y = 0; y < uv; ++y)
            for (int x = 0; x < uv; ++x) {
                const double diff = std::abs(a.at(c, y, x) - b.at(c, y, x));
                if (std::abs(x - cx) > rf || std::abs(y - cy) > rf) {
                    REQUIRE(diff == 0.0);
                } else if (diff > 0 && std::abs(x - cx) <= 2 && std::abs(y - cy) <= 2) {
                    changed_near = true;
                }
            }
    REQUIRE(changed_near);
}

TEST_CASE("driving map: neutral expression reproduces the neutral surface") {
    const auto r = shared_rig();
    const auto binding = uvmap::bind_texels(r, 64, 64);
    const auto neutral = DynDecoder<double>::build_driving_map(r, rig::ExpressionParams::neutral(r), binding);
    const auto expect = uvmap::uv_position_map(r, r.vertices, binding);
    REQUIRE(neutral.v == expect.v);
}

TEST_CASE("driving map ignores pose (jaw routes through LBS, not the map)") {
    const auto r = shared_rig();
    const auto binding = uvmap::bind_texels(r, 64, 64);
    auto open_jaw = rig::ExpressionParams::neutral(r);
    open_jaw.pose.joint_rot[2] = Quat<double>::from_axis_angle({1, 0, 0}, 0.35);
    const auto with_pose = DynDecoder<double>::build_driving_map(r, open_jaw, binding);
    const auto without = DynDecoder<double>::build_driving_map(r, rig::ExpressionParams::neutral(r), binding);
    REQUIRE(with_pose.v == without.v);
}

TEST_CASE("driving maps differ only on the changed blendshape's support") {
    const auto r = shared_rig();
    const auto binding = uvmap::bind_texels(r, 64, 64);
    auto a = rig::ExpressionParams::neutral(r);
    auto b = a;
    b.psi[4] = 0.8;  // cheek shape
    const auto ma = DynDecoder<double>::build_driving_map(r, a, binding);
    const auto mb = DynDecoder<double>::build_driving_map(r, b, binding);

    std::vector<char> touched(static_cast<size_t>(r.vertex_count()), 0);
    for (int i = 0; i < r.vertex_count(); ++i)
        for (int d = 0; d < 3; ++d)
            if (r.expr_basis.at(4, i, d) != 0.0) touched[static_cast<size_t>(i)] = 1;
    const std::int64_t plane = 64 * 64;
    int diffs = 0;
    for (int flat : binding.valid_index) {
        bool differs = false;
        for (int d = 0; d < 3; ++d)
            if (ma[d * plane + flat] != mb[d * plane + flat]) differs = true;
        if (!differs) continue;
        ++diffs;
        const auto& face = r.faces[static_cast<size_t>(binding.texels[static_cast<size_t>(flat)].face)];
        REQUIRE((touched[static_cast<size_t>(face[0])] || touched[static_cast<size_t>(face[1])] ||
                 touched[static_cast<size_t>(face[2])]));
    }
    REQUIRE(diffs > 0);
}

TEST_CASE("fuse_dynamic: zero mask or zero deltas reproduce the static maps bit-exactly") {
    Rng rng(25);
    Graph<double> g;
    auto raw = g.input("raw", rng.uniform_tensor<double>({14, 16, 16}, -1, 1));
    auto delta = g.constant(rng.uniform_tensor<double>({14, 16, 16}, -1, 1));
    auto zero_mask = g.constant(Tensor<double>({16, 16}, 0.0));
    const auto fused0 = DynDecoder<double>::fuse_dynamic(g, raw, delta, zero_mask);
    REQUIRE(g.value(fused0).v == g.value(raw).v);

    auto zero_delta = g.constant(Tensor<double>({14, 16, 16}, 0.0));
    auto ones = g.constant(Tensor<double>({16, 16}, 1.0));
    const auto fused1 = DynDecoder<double>::fuse_dynamic(g, raw, zero_delta, ones);
    REQUIRE(g.value(fused1).v == g.value(raw).v);
}

TEST_CASE("outside the dynamic mask the fused maps equal the static maps bit-exactly") {
    Rng rng(26);
    Graph<double> g;
    auto raw = g.input("raw", rng.uniform_tensor<double>({14, 16, 16}, -1, 1));
    auto delta = g.constant(rng.uniform_tensor<double>({14, 16, 16}, -5, 5));
    Tensor<double> mask({16, 16});
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) mask.at(y, x) = (x >= 8) ? 1.0 : 0.0;
    const auto fused = DynDecoder<double>::fuse_dynamic(g, raw, delta, g.constant(mask));
    const auto& f = g.value(fused);
    const auto& r = g.value(raw);
    for (int c = 0; c < 14; ++c)
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 8; ++x) REQUIRE(f.at(c, y, x) == r.at(c, y, x));
    // inside the mask deltas are applied
    REQUIRE(f.at(0, 0, 12) == r.at(0, 0, 12) + g.value(delta).at(0, 0, 12));
}

TEST_CASE("fused maps keep every activated range invariant") {
    const auto r = shared_rig();
    const auto binding = uvmap::bind_texels(r, 32, 32);
    const auto spec = maps::ActivationSpec::for_rig(r, 32);
    const auto anchor = maps::anchor_position_map(r, binding);
    const auto mask = uvmap::dynamic_region_mask(r, binding);
    Rng rng(27);
    for (int trial = 0; trial < 10; ++trial) {
        Graph<double> g;
        auto raw = g.constant(rng.uniform_tensor<double>({14, 32, 32}, -2, 2));
        auto delta = g.constant(rng.uniform_tensor<double>({14, 32, 32}, -4, 4));
        const auto fused = DynDecoder<double>::fuse_dynamic(g, raw, delta, g.constant(mask));
        const auto m = maps::build_map_activations(g, fused, anchor, spec);
        const auto& alpha = g.value(m.opacity);
        for (double v : alpha.v) {
            REQUIRE(v >= 0.0);
            REQUIRE(v <= 1.0);
        }
        const auto& scale = g.value(m.scale);
        for (double v : scale.v) {
            REQUIRE(v > 0.0);
            REQUIRE(v <= spec.scale_max * 1.0001);
        }
        const auto& rot = g.value(m.rotation);
        const std::int64_t plane = 32 * 32;
        for (std::int64_t i = 0; i < plane; ++i) {
            double n2 = 0;
            for (int d = 0; d < 4; ++d) n2 += rot[d * plane + i] * rot[d * plane + i];
            REQUIRE(std::abs(std::sqrt(n2) - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("gradients vanish exactly under a zero dynamic mask") {
    const auto cfg = tiny_unet(16, 1);
    DynDecoder<double> dec(cfg);
    ParamStore<double> ps;
    Rng rng(28);
    dec.init_params(ps, rng);
    ps.value("unet/out/w") = rng.normal_tensor<double>(ps.value("unet/out/w").shape, 0.0, 0.1);
    ps.zero_grads();
    Graph<double> g;
    auto f_id = g.constant(rng.uniform_tensor<double>({8, 16, 16}, -1, 1));
    auto drv = g.constant(rng.uniform_tensor<double>({3, 16, 16}, -1, 1));
    auto raw = g.constant(rng.uniform_tensor<double>({14, 16, 16}, -1, 1));
    const auto delta = dec.decode_delta(g, ps, f_id, drv);
    const auto fused = DynDecoder<double>::fuse_dynamic(g, raw, delta, g.constant(Tensor<double>({16, 16}, 0.0)));
    g.backward(g.reduce_sum(g.mul(fused, fused)));
    for (const auto& name : ps.names())
        for (double v : ps.grad(name).v) REQUIRE(v == 0.0);
}
