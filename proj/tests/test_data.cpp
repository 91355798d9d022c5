#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "uvga/dataset.hpp"

using namespace uvga;
using namespace uvga::data;

namespace {

rig::HeadRig shared_rig() {
    static rig::HeadRig r = rig::make_procedural_rig();
    return r;
}

std::string temp_dir(const std::string& tag) {
    auto p = std::filesystem::temp_directory_path() / ("uvga_test_" + tag);
    std::filesystem::remove_all(p);
    return p.string();
}

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

/// Planted clusters in psi space: k well-separated directions, n points each.
ExpressionTable planted_clusters(int k, int n_per, int dim, std::uint64_t seed) {
    ExpressionTable t;
    t.psi_dim = dim;
    Rng rng(seed);
    std::vector<std::vector<double>> centers;
    for (int c = 0; c < k; ++c) {
        std::vector<double> center(static_cast<size_t>(dim), 0.0);
        center[static_cast<size_t>(c % dim)] = (c / dim + 1) * 2.0;
        center[static_cast<size_t>((c + 3) % dim)] = (c % 2 ? -1.5 : 1.5);
        centers.push_back(center);
    }
    int frame = 0;
    for (int c = 0; c < k; ++c)
        for (int i = 0; i < n_per; ++i) {
            ExpressionTable::Row row;
            row.identity = 0;
            row.frame = frame++;
            row.psi = centers[static_cast<size_t>(c)];
            for (auto& v : row.psi) v += rng.uniform(-0.05, 0.05);
            t.rows.push_back(std::move(row));
        }
    return t;
}

}  // namespace

TEST_CASE("png codec round trips 8-bit rgb and gray") {
    Rng rng(51);
    img::ImageU8 im;
    im.width = 23;
    im.height = 17;
    im.channels = 3;
    im.data.resize(im.stride() * im.height);
    for (auto& b : im.data) b = static_cast<unsigned char>(rng.bits() & 0xff);
    const auto bytes = img::encode_png(im);
    const auto back = img::decode_png(bytes);
    REQUIRE(back.width == im.width);
    REQUIRE(back.height == im.height);
    REQUIRE(back.channels == 3);
    REQUIRE(back.data == im.data);
}

TEST_CASE("synthetic identity is reproducible from its seed") {
    const auto r = shared_rig();
    const auto b = uvmap::bind_texels(r, 32, 32);
    const auto a1 = make_identity(r, b, 42);
    const auto a2 = make_identity(r, b, 42);
    REQUIRE(a1.base.color.v == a2.base.color.v);
    REQUIRE(a1.base.position.v == a2.base.position.v);
    const auto a3 = make_identity(r, b, 43);
    REQUIRE(a1.base.color.v != a3.base.color.v);
}

TEST_CASE("a (1,1,1) dataset produces a single frame and loads back") {
    const auto r = shared_rig();
    const auto b = uvmap::bind_texels(r, 32, 32);
    DatasetOptions o;
    o.n_ids = 1;
    o.n_expr = 1;
    o.n_views = 1;
    o.image_size = 48;
    const auto dir = temp_dir("single");
    const auto man = generate_dataset(r, b, o, dir);
    REQUIRE(man.frames.size() == 1);
    const auto loaded = load_manifest(dir, r);
    REQUIRE(loaded.frames.size() == 1);
    REQUIRE(loaded.rig_hash == r.content_hash());
    REQUIRE(loaded.cameras.size() == 1);
    std::filesystem::remove_all(dir);
}

TEST_CASE("same seed produces byte-identical datasets") {
    const auto r = shared_rig();
    const auto b = uvmap::bind_texels(r, 32, 32);
    DatasetOptions o;
    o.n_ids = 1;
    o.n_expr = 2;
    o.n_views = 2;
    o.image_size = 40;
    o.seed = 99;
    const auto d1 = temp_dir("rep1"), d2 = temp_dir("rep2");
    generate_dataset(r, b, o, d1);
    generate_dataset(r, b, o, d2);
    for (const char* f : {"manifest.txt", "cameras.csv", "expressions.csv", "images/id000_e001_v001.png",
                          "masks/id000_e000_v000.png"})
        REQUIRE(slurp(d1 + "/" + f) == slurp(d2 + "/" + f));
    std::filesystem::remove_all(d1);
    std::filesystem::remove_all(d2);
}

TEST_CASE("stored params re-render to the stored pixels (closed loop)") {
    const auto r = shared_rig();
    const auto b = uvmap::bind_texels(r, 32, 32);
    DatasetOptions o;
    o.n_ids = 1;
    o.n_expr = 2;
    o.n_views = 2;
    o.image_size = 40;
    o.seed = 7;
    const auto dir = temp_dir("rt");
    const auto man = generate_dataset(r, b, o, dir);
    const auto loaded = load_manifest(dir, r);

    const auto identity = make_identity(r, b, o.seed * 1000003ULL);
    const auto& rec = loaded.frame(0, 1, 1);
    const auto& expr = loaded.expression(0, 1);
    const auto gtmaps = identity_maps_at(identity, r, b, expr.psi);
    const auto cloud = splat::gather_cloud(gtmaps, b, r, expr.pose);
    const auto frame = splat::render(cloud, loaded.cameras[static_cast<size_t>(rec.camera_index)], o.background);
    const auto quantized = img::from_frame(frame, 3);
    const auto stored = img::read_png(dir + "/" + rec.image_path);
    REQUIRE(quantized.data == stored.data);  // bit-identical after quantization
    std::filesystem::remove_all(dir);
}

TEST_CASE("farthest-point anchors: k=1 is the extreme point, k=all is the set") {
    ExpressionTable t;
    t.psi_dim = 2;
    // symmetric cluster around zero plus one extreme point
    t.rows = {{0, 0, {0.1, 0.0}}, {0, 1, {-0.1, 0.0}}, {0, 2, {0.0, 0.1}}, {0, 3, {0.0, -0.1}}, {0, 4, {3.0, 3.0}}};
    const auto a1 = select_anchors(t, 1);
    REQUIRE(a1.size() == 1);
    REQUIRE(a1[0] == std::vector<double>{3.0, 3.0});
    const auto all = select_anchors(t, 5);
    REQUIRE(all.size() == 5);
    REQUIRE_THROWS_AS(select_anchors(t, 0), std::invalid_argument);
}

TEST_CASE("anchors cover planted clusters") {
    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
        const int k = 20;
        const auto t = planted_clusters(k, 12, 8, seed);
        const auto anchors = select_anchors(t, k);
        // count distinct clusters hit: cluster c spans frames [c*12, (c+1)*12)
        std::set<int> hit;
        for (const auto& a : anchors) {
            double best = 1e18;
            int arg = 0;
            for (size_t i = 0; i < t.rows.size(); ++i) {
                double d = 0;
                for (int e = 0; e < 8; ++e) d += (a[static_cast<size_t>(e)] - t.rows[i].psi[static_cast<size_t>(e)]) *
                                                 (a[static_cast<size_t>(e)] - t.rows[i].psi[static_cast<size_t>(e)]);
                if (d < best) {
                    best = d;
                    arg = static_cast<int>(i);
                }
            }
            hit.insert(t.rows[static_cast<size_t>(arg)].frame / 12);
        }
        REQUIRE(static_cast<int>(hit.size()) >= k - 2);
    }
}

TEST_CASE("retrieval: self-match first, orthogonal gives zero, brute-force order") {
    ExpressionTable t;
    t.psi_dim = 3;
    Rng rng(61);
    for (int i = 0; i < 40; ++i)
        t.rows.push_back({i / 20, i % 20, {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)}});
    // plant an exact anchor match
    t.rows[7].psi = {0.5, -0.25, 0.8};
    const std::vector<double> anchor = {0.5, -0.25, 0.8};
    const auto top = retrieve_similar(t, anchor, 10);
    REQUIRE(top[0].identity == t.rows[7].identity);
    REQUIRE(top[0].frame == t.rows[7].frame);
    REQUIRE(top[0].similarity == Catch::Approx(1.0).margin(1e-12));

    // orthogonal anchor: all similarities zero
    ExpressionTable axis;
    axis.psi_dim = 3;
    axis.rows = {{0, 0, {1, 0, 0}}, {0, 1, {0, 1, 0}}};
    const auto orth = retrieve_similar(axis, {0, 0, 1}, 2);
    REQUIRE(orth[0].similarity == 0.0);
    REQUIRE(orth[1].similarity == 0.0);
    // tie broken by (identity, frame) ascending
    REQUIRE(orth[0].frame == 0);

    // brute-force full-sort oracle
    auto brute = t.rows;
    std::vector<std::pair<double, std::pair<int, int>>> scored;
    for (const auto& row : brute)
        scored.push_back({cosine_similarity(anchor, row.psi), {row.identity, row.frame}});
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    const auto got = retrieve_similar(t, anchor, static_cast<int>(t.rows.size()));
    for (size_t i = 0; i < got.size(); ++i) {
        REQUIRE(got[i].identity == scored[i].second.first);
        REQUIRE(got[i].frame == scored[i].second.second);
    }
}

TEST_CASE("retrieval is invariant to positive row scaling") {
    ExpressionTable t;
    t.psi_dim = 4;
    Rng rng(71);
    for (int i = 0; i < 15; ++i)
        t.rows.push_back({0, i, {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)}});
    const std::vector<double> anchor = {0.3, -0.7, 0.2, 0.5};
    const auto before = retrieve_similar(t, anchor, 15);
    for (auto& row : t.rows)
        for (auto& v : row.psi) v *= 4.2;  // positive scaling of every row
    const auto after = retrieve_similar(t, anchor, 15);
    for (size_t i = 0; i < before.size(); ++i) {
        REQUIRE(before[i].frame == after[i].frame);
        REQUIRE(before[i].similarity == Catch::Approx(after[i].similarity).margin(1e-12));
    }
}

TEST_CASE("adjusted sampler picks exact anchor matches when present") {
    // table where identity 0 contains rows exactly equal to the anchors
    const auto t = planted_clusters(6, 8, 8, 5);
    const auto plan = build_adjusted_sampler(t, 6, 2, 11);
    REQUIRE(plan.per_id == 8);
    const auto anchors = select_anchors(t, 6);
    const auto slots = plan.for_identity(0);
    REQUIRE(slots.size() == 8);
    int anchor_slots = 0;
    for (const auto& s : slots)
        if (s.from_anchor) {
            ++anchor_slots;
            // the chosen frame must be cosine-closest to some anchor
            double best = -1;
            for (const auto& a : anchors)
                best = std::max(best, cosine_similarity(a, t.rows[static_cast<size_t>(s.frame)].psi));
            REQUIRE(best > 0.99);
        }
    REQUIRE(anchor_slots == 6);
}

TEST_CASE("seed change alters only the random slots") {
    const auto t = planted_clusters(6, 10, 8, 6);
    const auto p1 = build_adjusted_sampler(t, 6, 3, 1);
    const auto p2 = build_adjusted_sampler(t, 6, 3, 2);
    REQUIRE(p1.slots.size() == p2.slots.size());
    for (size_t i = 0; i < p1.slots.size(); ++i)
        if (p1.slots[i].from_anchor) {
            REQUIRE(p2.slots[i].from_anchor);
            REQUIRE(p1.slots[i].frame == p2.slots[i].frame);
        }
}

TEST_CASE("sampler reports identities with too few frames") {
    const auto t = planted_clusters(3, 2, 8, 7);  // 6 frames total
    REQUIRE_THROWS_WITH(build_adjusted_sampler(t, 20, 6, 0), Catch::Matchers::ContainsSubstring("needs 26"));
}

TEST_CASE("adjusted sampling over-represents anchor neighborhoods vs uniform") {
    // acceptance-style frequency oracle on planted clusters: most mass sits
    // in a dominant neutral cluster, rare expressive clusters at the margins
    ExpressionTable t;
    t.psi_dim = 6;
    Rng rng(81);
    int frame = 0;
    auto push = [&](std::vector<double> base, int count) {
        for (int i = 0; i < count; ++i) {
            ExpressionTable::Row row{0, frame++, base};
            for (auto& v : row.psi) v += rng.uniform(-0.03, 0.03);
            t.rows.push_back(std::move(row));
        }
    };
    push({0.05, 0, 0, 0, 0, 0}, 80);             // dominant near-neutral mass
    push({2.0, 0, 0, 0, 0, 0}, 4);               // rare expressive clusters
    push({0, 2.0, 0, 0, 0, 0}, 4);
    push({0, 0, 2.0, 0, 0, 0}, 4);
    push({0, 0, 0, 2.0, 0, 0}, 4);

    const int k_anchor = 8, rand_per = 4;
    const auto plan = build_adjusted_sampler(t, k_anchor, rand_per, 3);
    const auto anchors = select_anchors(t, k_anchor);
    auto near_anchor = [&](const std::vector<double>& psi) {
        for (const auto& a : anchors)
            if (cosine_similarity(a, psi) >= 0.9) return true;
        return false;
    };
    auto psi_of_frame = [&](int f) { return t.rows[static_cast<size_t>(f)].psi; };

    int adj_hits = 0;
    for (const auto& s : plan.slots)
        if (near_anchor(psi_of_frame(s.frame))) ++adj_hits;
    const double adj_mass = static_cast<double>(adj_hits) / plan.slots.size();

    int uni_hits = 0;
    for (const auto& row : t.rows)
        if (near_anchor(row.psi)) ++uni_hits;
    const double uni_mass = static_cast<double>(uni_hits) / t.rows.size();

    INFO("adjusted " << adj_mass << " uniform " << uni_mass);
    REQUIRE(adj_mass >= 2.0 * uni_mass);
}

TEST_CASE("pca: collinear anchors have ~zero second-axis variance") {
    ExpressionTable t;
    t.psi_dim = 4;
    std::vector<std::vector<double>> anchors;
    for (int i = 0; i < 6; ++i) anchors.push_back({1.0 * i, 2.0 * i, -1.0 * i, 0.5 * i});
    for (int i = 0; i < 6; ++i) t.rows.push_back({0, i, anchors[static_cast<size_t>(i)]});
    const auto proj = pca_project(t, anchors);
    REQUIRE(proj.eigenvalues[1] < 1e-12 * proj.eigenvalues[0] + 1e-18);
}

TEST_CASE("pca preserves pairwise distances for exactly-2D anchors") {
    ExpressionTable t;
    t.psi_dim = 5;
    Rng rng(91);
    // anchors on a fixed 2D plane embedded in 5D
    std::vector<double> u = {1, 0, 1, 0, 0}, v = {0, 1, 0, -1, 1};
    for (auto& x : u) x /= std::sqrt(2.0);
    for (auto& x : v) x /= std::sqrt(3.0);
    std::vector<std::vector<double>> anchors;
    for (int i = 0; i < 8; ++i) {
        const double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2);
        std::vector<double> p(5);
        for (int e = 0; e < 5; ++e) p[static_cast<size_t>(e)] = a * u[static_cast<size_t>(e)] + b * v[static_cast<size_t>(e)];
        anchors.push_back(p);
        t.rows.push_back({0, i, p});
    }
    const auto proj = pca_project(t, anchors);
    for (size_t i = 0; i < anchors.size(); ++i)
        for (size_t j = i + 1; j < anchors.size(); ++j) {
            double d5 = 0;
            for (int e = 0; e < 5; ++e) d5 += (anchors[i][static_cast<size_t>(e)] - anchors[j][static_cast<size_t>(e)]) *
                                              (anchors[i][static_cast<size_t>(e)] - anchors[j][static_cast<size_t>(e)]);
            const double dx = proj.anchors[i][0] - proj.anchors[j][0];
            const double dy = proj.anchors[i][1] - proj.anchors[j][1];
            REQUIRE(std::sqrt(dx * dx + dy * dy) == Catch::Approx(std::sqrt(d5)).epsilon(1e-9));
        }
}

TEST_CASE("pca reconstruction error equals the trailing eigenvalue sum") {
    ExpressionTable t;
    t.psi_dim = 6;
    Rng rng(101);
    std::vector<std::vector<double>> anchors;
    for (int i = 0; i < 12; ++i) {
        std::vector<double> p(6);
        for (auto& x : p) x = rng.normal(0, 1.0);
        anchors.push_back(p);
        t.rows.push_back({0, i, p});
    }
    const auto proj = pca_project(t, anchors);
    // mean squared residual of anchors after rank-2 reconstruction
    double resid = 0;
    for (size_t i = 0; i < anchors.size(); ++i) {
        std::vector<double> rec(6, 0.0);
        for (int d = 0; d < 2; ++d)
            for (int e = 0; e < 6; ++e)
                rec[static_cast<size_t>(e)] += proj.anchors[i][static_cast<size_t>(d)] * proj.axes[static_cast<size_t>(d) * 6 + e];
        for (int e = 0; e < 6; ++e) {
            const double diff = (anchors[i][static_cast<size_t>(e)] - proj.mean[static_cast<size_t>(e)]) - rec[static_cast<size_t>(e)];
            resid += diff * diff;
        }
    }
    resid /= static_cast<double>(anchors.size());
    double trailing = 0;
    for (size_t e = 2; e < proj.eigenvalues.size(); ++e) trailing += proj.eigenvalues[e];
    REQUIRE(resid == Catch::Approx(trailing).epsilon(1e-9));
}

TEST_CASE("expression table csv round trips") {
    const auto t = planted_clusters(3, 4, 5, 13);
    const auto dir = temp_dir("csv");
    std::filesystem::create_directories(dir);
    save_expression_table(t, dir + "/table.csv");
    const auto back = load_expression_table(dir + "/table.csv");
    REQUIRE(back.psi_dim == t.psi_dim);
    REQUIRE(back.rows.size() == t.rows.size());
    for (size_t i = 0; i < t.rows.size(); ++i) {
        REQUIRE(back.rows[i].identity == t.rows[i].identity);
        REQUIRE(back.rows[i].frame == t.rows[i].frame);
        REQUIRE(back.rows[i].psi == t.rows[i].psi);
    }
    std::filesystem::remove_all(dir);
}
