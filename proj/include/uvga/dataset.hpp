#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "uvga/camera.hpp"
#include "uvga/image.hpp"
#include "uvga/maps.hpp"
#include "uvga/rig.hpp"
#include "uvga/rng.hpp"
#include "uvga/splat.hpp"
#include "uvga/uvmap.hpp"

namespace uvga::data {

// ---------------------------------------------------------------------------
// Synthetic identities: procedural UV texture, mild shape jitter, and a
// ground-truth Gaussian map set whose positions ride the deformed surface.
// Everything reproducible from the seed.
// ---------------------------------------------------------------------------

struct SyntheticIdentity {
    std::uint64_t seed = 0;
    std::array<double, 3> shape_scale{1, 1, 1};  // per-axis jitter of the surface
    Tensor<double> offsets;                      // [3,H,W] fixed per-texel offsets (m)
    maps::GaussianMapSet<double> base;           // neutral-pose attribute maps
};

namespace detail {
/// Band-limited procedural color field over UV (sum of a few sinusoids).
struct NoiseField {
    struct Wave {
        double fu, fv, phase, amp;
    };
    std::array<std::vector<Wave>, 3> waves;
    std::array<double, 3> base{0.5, 0.5, 0.5};

    double eval(int channel, double u, double v) const {
        double x = base[static_cast<size_t>(channel)];
        for (const auto& w : waves[static_cast<size_t>(channel)])
            x += w.amp * std::sin(2.0 * M_PI * (w.fu * u + w.fv * v) + w.phase);
        return std::clamp(x, 0.05, 0.95);
    }
};

inline NoiseField make_noise(Rng& rng, const std::array<double, 3>& base) {
    NoiseField f;
    f.base = base;
    for (int c = 0; c < 3; ++c)
        for (int k = 0; k < 4; ++k)
            f.waves[static_cast<size_t>(c)].push_back({rng.uniform(0.5, 4.0), rng.uniform(0.5, 4.0),
                                                       rng.uniform(0.0, 2.0 * M_PI), rng.uniform(0.03, 0.10)});
    return f;
}
}  // namespace detail

inline SyntheticIdentity make_identity(const rig::HeadRig& r, const uvmap::TexelBinding& b,
                                       std::uint64_t seed) {
    Rng rng(seed ^ 0x1d647f00dULL);
    SyntheticIdentity id;
    id.seed = seed;
    for (int d = 0; d < 3; ++d) id.shape_scale[static_cast<size_t>(d)] = rng.uniform(0.97, 1.03);

    const int H = b.height, W = b.width;
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    const auto spec = maps::ActivationSpec::for_rig(r, W);

    // skin-like base with identity hue jitter; hair/mouth/teeth recolored
    const std::array<double, 3> skin{rng.uniform(0.55, 0.8), rng.uniform(0.42, 0.62), rng.uniform(0.34, 0.52)};
    const std::array<double, 3> hair{rng.uniform(0.1, 0.35), rng.uniform(0.08, 0.3), rng.uniform(0.06, 0.25)};
    const auto field = detail::make_noise(rng, skin);

    const auto hair_mask = uvmap::region_mask(r, "hair", b);
    const auto mouth_mask = uvmap::region_mask(r, "mouth", b);
    const auto teeth_mask = uvmap::region_mask(r, "teeth", b);

    Tensor<double> validity;
    const auto anchor = maps::anchor_position_map(r, b, &validity);

    auto& m = id.base;
    m.height = H;
    m.width = W;
    m.position = Tensor<double>({3, H, W});
    m.opacity = Tensor<double>({H, W});
    m.scale = Tensor<double>({3, H, W});
    m.color = Tensor<double>({3, H, W});
    m.rotation = Tensor<double>({4, H, W});
    id.offsets = Tensor<double>({3, H, W});

    for (int flat : b.valid_index) {
        const int x = flat % W, y = flat / W;
        double u, v;
        uvmap::TexelBinding::center(x, y, W, H, u, v);
        for (int c = 0; c < 3; ++c) {
            double col = field.eval(c, u, v);
            if (hair_mask[flat] > 0) col = 0.7 * hair[static_cast<size_t>(c)] + 0.3 * col;
            if (mouth_mask[flat] > 0 && teeth_mask[flat] == 0)
                col = 0.5 * col + 0.5 * (c == 0 ? 0.65 : c == 1 ? 0.3 : 0.3);
            if (teeth_mask[flat] > 0) col = 0.85 + 0.1 * (col - 0.5);
            m.color[c * plane + flat] = std::clamp(col, 0.05, 0.95);
        }
        m.opacity[flat] = 0.97;
        const double s = spec.scale_init * rng.uniform(0.85, 1.2);
        for (int d = 0; d < 3; ++d) {
            m.scale[d * plane + flat] = s;
            id.offsets[d * plane + flat] = rng.uniform(-0.2, 0.2) * spec.scale_init;
            m.position[d * plane + flat] =
                anchor[d * plane + flat] * id.shape_scale[static_cast<size_t>(d)] + id.offsets[d * plane + flat];
        }
        m.rotation[0 * plane + flat] = 1.0;
    }
    return id;
}

/// Ground-truth attribute maps under an expression: positions follow the
/// jitter-scaled deformed surface plus the identity's fixed offsets.
inline maps::GaussianMapSet<double> identity_maps_at(const SyntheticIdentity& id, const rig::HeadRig& r,
                                                     const uvmap::TexelBinding& b,
                                                     const std::vector<double>& psi) {
    maps::GaussianMapSet<double> m = id.base;
    const auto surface = uvmap::uv_position_map(r, rig::deform(r, psi), b);
    const std::int64_t plane = static_cast<std::int64_t>(b.height) * b.width;
    for (int flat : b.valid_index)
        for (int d = 0; d < 3; ++d)
            m.position[d * plane + flat] =
                surface[d * plane + flat] * id.shape_scale[static_cast<size_t>(d)] + id.offsets[d * plane + flat];
    return m;
}

// ---------------------------------------------------------------------------
// Dataset generation: identities x expressions x views rendered to PNG with
// masks, plus a text manifest, camera CSV and expression CSV.
// ---------------------------------------------------------------------------

struct DatasetOptions {
    int n_ids = 1;
    int n_expr = 8;
    int n_views = 8;
    int image_size = 128;
    std::uint64_t seed = 7;
    std::array<double, 3> background{0.0, 0.0, 0.0};
    double jaw_probability = 0.35;  // chance an expression opens the jaw via LBS
};

struct FrameRecord {
    int identity = 0, expr = 0, view = 0;
    std::string image_path, mask_path;  // relative to root
    int camera_index = 0;
};

struct DatasetManifest {
    DatasetOptions opts;
    std::string root;
    std::uint64_t rig_hash = 0;
    int uv_size = 0;
    std::vector<Camera> cameras;                     // n_views
    std::vector<rig::ExpressionParams> expressions;  // n_ids * n_expr, row-major by id
    std::vector<FrameRecord> frames;

    const rig::ExpressionParams& expression(int identity, int expr) const {
        if (identity < 0 || identity >= opts.n_ids || expr < 0 || expr >= opts.n_expr)
            throw std::out_of_range("manifest: expression (" + std::to_string(identity) + "," +
                                    std::to_string(expr) + ") out of range");
        return expressions[static_cast<size_t>(identity) * opts.n_expr + expr];
    }
    const FrameRecord& frame(int identity, int expr, int view) const {
        if (identity < 0 || identity >= opts.n_ids || expr < 0 || expr >= opts.n_expr || view < 0 ||
            view >= opts.n_views)
            throw std::out_of_range("manifest: frame (" + std::to_string(identity) + "," + std::to_string(expr) +
                                    "," + std::to_string(view) + ") out of range");
        return frames[(static_cast<size_t>(identity) * opts.n_expr + expr) * opts.n_views + view];
    }
};

namespace detail {
inline std::string frame_name(int id, int expr, int view, const char* kind) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%s/id%03d_e%03d_v%03d.png", kind, id, expr, view);
    return buf;
}

inline std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}
}  // namespace detail

inline std::vector<Camera> make_view_ring(const DatasetOptions& o, double head_extent, Rng& rng) {
    std::vector<Camera> cams;
    const double dist = 2.4 * head_extent;
    const double focal = 0.62 * o.image_size * dist / head_extent;
    for (int v = 0; v < o.n_views; ++v) {
        const double az = 2.0 * M_PI * v / o.n_views + rng.uniform(-0.06, 0.06);
        const double el = (v % 2 == 0 ? 0.12 : -0.10) + rng.uniform(-0.05, 0.05);
        const Vec3<double> eye{dist * std::cos(el) * std::sin(az), dist * std::sin(el),
                               dist * std::cos(el) * std::cos(az)};
        cams.push_back(Camera::look_at(eye, {0, 0, 0}, {0, 1, 0}, focal, o.image_size, o.image_size));
    }
    return cams;
}

inline std::vector<rig::ExpressionParams> make_expressions(const rig::HeadRig& r, const DatasetOptions& o,
                                                           int identity, Rng& rng) {
    std::vector<rig::ExpressionParams> out;
    for (int e = 0; e < o.n_expr; ++e) {
        auto expr = rig::ExpressionParams::neutral(r);
        if (e > 0) {  // expression 0 stays neutral
            const int active = 2 + rng.index(3);
            for (int k = 0; k < active; ++k) {
                const int which = rng.index(r.expr_count());
                expr.psi[static_cast<size_t>(which)] = rng.uniform(0.35, 1.2) * (rng.uniform() < 0.5 ? -1 : 1);
            }
            if (rng.uniform() < o.jaw_probability)
                expr.pose.joint_rot[2] = Quat<double>::from_axis_angle({1, 0, 0}, rng.uniform(0.05, 0.22));
        }
        (void)identity;
        out.push_back(std::move(expr));
    }
    return out;
}

inline DatasetManifest generate_dataset(const rig::HeadRig& r, const uvmap::TexelBinding& binding,
                                        const DatasetOptions& opts, const std::string& out_dir) {
    namespace fs = std::filesystem;
    if (opts.n_ids <= 0 || opts.n_expr <= 0 || opts.n_views <= 0)
        throw std::invalid_argument("generate_dataset: counts must be positive");
    fs::create_directories(fs::path(out_dir) / "images");
    fs::create_directories(fs::path(out_dir) / "masks");

    DatasetManifest man;
    man.opts = opts;
    man.root = out_dir;
    man.rig_hash = r.content_hash();
    man.uv_size = binding.width;

    Rng master(opts.seed);
    Rng cam_rng = master.fork(1);
    man.cameras = make_view_ring(opts, r.extent() * 0.55, cam_rng);

    for (int id = 0; id < opts.n_ids; ++id) {
        Rng expr_rng = master.fork(100 + static_cast<std::uint64_t>(id));
        auto exprs = make_expressions(r, opts, id, expr_rng);
        for (auto& e : exprs) man.expressions.push_back(std::move(e));
    }

    const std::array<double, 3>& bg = opts.background;
    for (int id = 0; id < opts.n_ids; ++id) {
        const auto identity = make_identity(r, binding, opts.seed * 1000003ULL + static_cast<std::uint64_t>(id));
        for (int e = 0; e < opts.n_expr; ++e) {
            const auto& expr = man.expression(id, e);
            const auto gt_maps = identity_maps_at(identity, r, binding, expr.psi);
            const auto cloud = splat::gather_cloud(gt_maps, binding, r, expr.pose);
            for (int v = 0; v < opts.n_views; ++v) {
                const auto frame = splat::render(cloud, man.cameras[static_cast<size_t>(v)], bg);
                FrameRecord rec;
                rec.identity = id;
                rec.expr = e;
                rec.view = v;
                rec.camera_index = v;
                rec.image_path = detail::frame_name(id, e, v, "images");
                rec.mask_path = detail::frame_name(id, e, v, "masks");
                img::write_png(img::from_frame(frame, 3), out_dir + "/" + rec.image_path);
                // mask from accumulated alpha
                const std::int64_t plane = static_cast<std::int64_t>(opts.image_size) * opts.image_size;
                Tensor<double> alpha({1, opts.image_size, opts.image_size});
                for (std::int64_t p = 0; p < plane; ++p) alpha[p] = frame[3 * plane + p] > 0.5 ? 1.0 : 0.0;
                img::write_png(img::from_frame(alpha, 1), out_dir + "/" + rec.mask_path);
                man.frames.push_back(std::move(rec));
            }
        }
    }

    // manifest text index
    std::ofstream os(out_dir + "/manifest.txt");
    if (!os) throw std::runtime_error("generate_dataset: cannot write manifest");
    os << "uvga_dataset 1\n";
    os << "n_ids=" << opts.n_ids << " n_expr=" << opts.n_expr << " n_views=" << opts.n_views
       << " image_size=" << opts.image_size << " seed=" << opts.seed << " uv=" << man.uv_size << "\n";
    os << "background=" << detail::fmt(bg[0]) << "," << detail::fmt(bg[1]) << "," << detail::fmt(bg[2]) << "\n";
    os << "rig_hash=" << man.rig_hash << "\n";
    for (const auto& f : man.frames)
        os << "frame id=" << f.identity << " expr=" << f.expr << " view=" << f.view << " image=" << f.image_path
           << " mask=" << f.mask_path << " camera=" << f.camera_index << "\n";
    os.close();

    // cameras CSV
    std::ofstream cs(out_dir + "/cameras.csv");
    cs << "index,fx,fy,cx,cy,width,height,qw,qx,qy,qz,tx,ty,tz,near\n";
    for (size_t i = 0; i < man.cameras.size(); ++i) {
        const auto& c = man.cameras[i];
        cs << i << "," << detail::fmt(c.fx) << "," << detail::fmt(c.fy) << "," << detail::fmt(c.cx) << ","
           << detail::fmt(c.cy) << "," << c.width << "," << c.height << "," << detail::fmt(c.rot.w) << ","
           << detail::fmt(c.rot.x) << "," << detail::fmt(c.rot.y) << "," << detail::fmt(c.rot.z) << ","
           << detail::fmt(c.trans.x) << "," << detail::fmt(c.trans.y) << "," << detail::fmt(c.trans.z) << ","
           << detail::fmt(c.near) << "\n";
    }
    cs.close();

    // expressions CSV: id, frame, psi..., joint quats..., global quat+trans
    std::ofstream es(out_dir + "/expressions.csv");
    es << "id,frame";
    for (int e = 0; e < r.expr_count(); ++e) es << ",psi" << e;
    for (int j = 0; j < r.joint_count(); ++j) es << ",q" << j << "w,q" << j << "x,q" << j << "y,q" << j << "z";
    es << ",gw,gx,gy,gz,gtx,gty,gtz\n";
    for (int id = 0; id < opts.n_ids; ++id)
        for (int e = 0; e < opts.n_expr; ++e) {
            const auto& ex = man.expression(id, e);
            es << id << "," << e;
            for (double p : ex.psi) es << "," << detail::fmt(p);
            for (const auto& q : ex.pose.joint_rot)
                es << "," << detail::fmt(q.w) << "," << detail::fmt(q.x) << "," << detail::fmt(q.y) << ","
                   << detail::fmt(q.z);
            const auto& gq = ex.pose.global.rot;
            const auto& gt = ex.pose.global.trans;
            es << "," << detail::fmt(gq.w) << "," << detail::fmt(gq.x) << "," << detail::fmt(gq.y) << ","
               << detail::fmt(gq.z) << "," << detail::fmt(gt.x) << "," << detail::fmt(gt.y) << ","
               << detail::fmt(gt.z) << "\n";
        }
    es.close();
    return man;
}

// ---------------------------------------------------------------------------
// Manifest loading.
// ---------------------------------------------------------------------------

namespace detail {
inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) out.push_back(item);
    return out;
}

inline std::string kv(const std::string& token, const std::string& key) {
    if (token.rfind(key + "=", 0) != 0) throw std::runtime_error("manifest: expected " + key + "= in " + token);
    return token.substr(key.size() + 1);
}
}  // namespace detail

inline std::vector<Camera> load_cameras_csv(const std::string& path) {
    std::ifstream cs(path);
    if (!cs) throw std::runtime_error("cameras: cannot open " + path);
    std::vector<Camera> out;
    std::string line;
    std::getline(cs, line);  // header
    while (std::getline(cs, line)) {
        if (line.empty()) continue;
        const auto t = detail::split(line, ',');
        Camera c;
        c.fx = std::stod(t.at(1));
        c.fy = std::stod(t.at(2));
        c.cx = std::stod(t.at(3));
        c.cy = std::stod(t.at(4));
        c.width = std::stoi(t.at(5));
        c.height = std::stoi(t.at(6));
        c.rot = {std::stod(t.at(7)), std::stod(t.at(8)), std::stod(t.at(9)), std::stod(t.at(10))};
        c.trans = {std::stod(t.at(11)), std::stod(t.at(12)), std::stod(t.at(13))};
        c.near = std::stod(t.at(14));
        c.validate();
        out.push_back(c);
    }
    return out;
}

/// Expression sequence CSV: columns frame, psi..., per-joint quaternions,
/// global quaternion + translation. A leading `id` column (as written by
/// generate_dataset) is accepted and ignored.
inline std::vector<rig::ExpressionParams> load_expression_sequence(const std::string& path,
                                                                   const rig::HeadRig& r) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("sequence: cannot open " + path);
    std::string line;
    std::getline(is, line);
    const bool has_id = detail::split(line, ',').at(0) == "id";
    std::vector<rig::ExpressionParams> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto t = detail::split(line, ',');
        size_t col = has_id ? 2 : 1;
        auto ex = rig::ExpressionParams::neutral(r);
        for (int e = 0; e < r.expr_count(); ++e) ex.psi[static_cast<size_t>(e)] = std::stod(t.at(col++));
        if (col + 4u * static_cast<size_t>(r.joint_count()) + 7u <= t.size()) {
            for (int j = 0; j < r.joint_count(); ++j) {
                ex.pose.joint_rot[static_cast<size_t>(j)] = {std::stod(t.at(col)), std::stod(t.at(col + 1)),
                                                              std::stod(t.at(col + 2)), std::stod(t.at(col + 3))};
                col += 4;
            }
            ex.pose.global.rot = {std::stod(t.at(col)), std::stod(t.at(col + 1)), std::stod(t.at(col + 2)),
                                  std::stod(t.at(col + 3))};
            ex.pose.global.trans = {std::stod(t.at(col + 4)), std::stod(t.at(col + 5)), std::stod(t.at(col + 6))};
        }
        ex.validate(r);
        out.push_back(std::move(ex));
    }
    return out;
}

inline DatasetManifest load_manifest(const std::string& dir, const rig::HeadRig& r) {
    namespace fs = std::filesystem;
    std::ifstream is(dir + "/manifest.txt");
    if (!is) throw std::runtime_error("manifest: cannot open " + dir + "/manifest.txt");
    DatasetManifest man;
    man.root = dir;
    std::string line;
    std::getline(is, line);
    if (line != "uvga_dataset 1") throw std::runtime_error("manifest: bad header");
    std::getline(is, line);
    {
        const auto t = detail::split(line, ' ');
        man.opts.n_ids = std::stoi(detail::kv(t.at(0), "n_ids"));
        man.opts.n_expr = std::stoi(detail::kv(t.at(1), "n_expr"));
        man.opts.n_views = std::stoi(detail::kv(t.at(2), "n_views"));
        man.opts.image_size = std::stoi(detail::kv(t.at(3), "image_size"));
        man.opts.seed = std::stoull(detail::kv(t.at(4), "seed"));
        man.uv_size = std::stoi(detail::kv(t.at(5), "uv"));
    }
    std::getline(is, line);
    {
        const auto rgb = detail::split(detail::kv(line, "background"), ',');
        for (int c = 0; c < 3; ++c) man.opts.background[static_cast<size_t>(c)] = std::stod(rgb.at(static_cast<size_t>(c)));
    }
    std::getline(is, line);
    man.rig_hash = std::stoull(detail::kv(line, "rig_hash"));
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto t = detail::split(line, ' ');
        if (t.at(0) != "frame") throw std::runtime_error("manifest: bad frame line");
        FrameRecord f;
        f.identity = std::stoi(detail::kv(t.at(1), "id"));
        f.expr = std::stoi(detail::kv(t.at(2), "expr"));
        f.view = std::stoi(detail::kv(t.at(3), "view"));
        f.image_path = detail::kv(t.at(4), "image");
        f.mask_path = detail::kv(t.at(5), "mask");
        f.camera_index = std::stoi(detail::kv(t.at(6), "camera"));
        if (!fs::exists(fs::path(dir) / f.image_path))
            throw std::runtime_error("manifest: missing image " + f.image_path);
        if (!fs::exists(fs::path(dir) / f.mask_path))
            throw std::runtime_error("manifest: missing mask " + f.mask_path);
        man.frames.push_back(std::move(f));
    }

    man.cameras = load_cameras_csv(dir + "/cameras.csv");

    // expressions
    std::ifstream es(dir + "/expressions.csv");
    if (!es) throw std::runtime_error("manifest: expressions.csv missing");
    std::getline(es, line);
    man.expressions.resize(static_cast<size_t>(man.opts.n_ids) * man.opts.n_expr,
                           rig::ExpressionParams::neutral(r));
    while (std::getline(es, line)) {
        if (line.empty()) continue;
        const auto t = detail::split(line, ',');
        const int id = std::stoi(t.at(0)), frame = std::stoi(t.at(1));
        auto& ex = man.expressions[static_cast<size_t>(id) * man.opts.n_expr + frame];
        size_t col = 2;
        for (int e = 0; e < r.expr_count(); ++e) ex.psi[static_cast<size_t>(e)] = std::stod(t.at(col++));
        for (int j = 0; j < r.joint_count(); ++j) {
            ex.pose.joint_rot[static_cast<size_t>(j)] = {std::stod(t.at(col)), std::stod(t.at(col + 1)),
                                                          std::stod(t.at(col + 2)), std::stod(t.at(col + 3))};
            col += 4;
        }
        ex.pose.global.rot = {std::stod(t.at(col)), std::stod(t.at(col + 1)), std::stod(t.at(col + 2)),
                              std::stod(t.at(col + 3))};
        ex.pose.global.trans = {std::stod(t.at(col + 4)), std::stod(t.at(col + 5)), std::stod(t.at(col + 6))};
        ex.validate(r);
    }
    return man;
}

// ---------------------------------------------------------------------------
// Expression table + distribution adjustment.
// ---------------------------------------------------------------------------

struct ExpressionTable {
    struct Row {
        int identity = 0, frame = 0;
        std::vector<double> psi;
    };
    int psi_dim = 0;
    std::vector<Row> rows;

    static ExpressionTable from_manifest(const DatasetManifest& man) {
        ExpressionTable t;
        if (man.expressions.empty()) return t;
        t.psi_dim = static_cast<int>(man.expressions[0].psi.size());
        for (int id = 0; id < man.opts.n_ids; ++id)
            for (int e = 0; e < man.opts.n_expr; ++e)
                t.rows.push_back({id, e, man.expression(id, e).psi});
        return t;
    }
};

inline void save_expression_table(const ExpressionTable& t, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("expression table: cannot write " + path);
    os << "id,frame";
    for (int e = 0; e < t.psi_dim; ++e) os << ",psi" << e;
    os << "\n";
    for (const auto& row : t.rows) {
        os << row.identity << "," << row.frame;
        for (double p : row.psi) os << "," << detail::fmt(p);
        os << "\n";
    }
}

inline ExpressionTable load_expression_table(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("expression table: cannot open " + path);
    ExpressionTable t;
    std::string line;
    std::getline(is, line);
    t.psi_dim = static_cast<int>(detail::split(line, ',').size()) - 2;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto tok = detail::split(line, ',');
        ExpressionTable::Row row;
        row.identity = std::stoi(tok.at(0));
        row.frame = std::stoi(tok.at(1));
        for (int e = 0; e < t.psi_dim; ++e) row.psi.push_back(std::stod(tok.at(static_cast<size_t>(e) + 2)));
        t.rows.push_back(std::move(row));
    }
    return t;
}

namespace detail {
inline double euclid(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}
}  // namespace detail

/// Expressive anchor selection by farthest-point sampling in coefficient
/// space, seeded at the point farthest from the mean. Ties resolve to the
/// lower (identity, frame).
inline std::vector<std::vector<double>> select_anchors(const ExpressionTable& t, int k) {
    if (k <= 0) throw std::invalid_argument("select_anchors: k must be positive");
    if (t.rows.empty()) throw std::invalid_argument("select_anchors: empty table");
    if (k > static_cast<int>(t.rows.size())) k = static_cast<int>(t.rows.size());

    std::vector<double> mean(static_cast<size_t>(t.psi_dim), 0.0);
    for (const auto& row : t.rows)
        for (int e = 0; e < t.psi_dim; ++e) mean[static_cast<size_t>(e)] += row.psi[static_cast<size_t>(e)];
    for (auto& v : mean) v /= static_cast<double>(t.rows.size());

    std::vector<char> taken(t.rows.size(), 0);
    std::vector<std::vector<double>> anchors;
    // seed: farthest from the mean
    size_t best = 0;
    double best_d = -1;
    for (size_t i = 0; i < t.rows.size(); ++i) {
        const double d = detail::euclid(t.rows[i].psi, mean);
        if (d > best_d) {
            best_d = d;
            best = i;
        }
    }
    taken[best] = 1;
    anchors.push_back(t.rows[best].psi);
    std::vector<double> min_dist(t.rows.size());
    for (size_t i = 0; i < t.rows.size(); ++i) min_dist[i] = detail::euclid(t.rows[i].psi, anchors[0]);
    while (static_cast<int>(anchors.size()) < k) {
        best_d = -1;
        best = 0;
        for (size_t i = 0; i < t.rows.size(); ++i) {
            if (taken[i]) continue;
            if (min_dist[i] > best_d) {
                best_d = min_dist[i];
                best = i;
            }
        }
        taken[best] = 1;
        anchors.push_back(t.rows[best].psi);
        for (size_t i = 0; i < t.rows.size(); ++i)
            min_dist[i] = std::min(min_dist[i], detail::euclid(t.rows[i].psi, anchors.back()));
    }
    return anchors;
}

struct Retrieved {
    int identity = 0, frame = 0;
    double similarity = 0;
};

inline double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0 || nb == 0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

/// Top-k rows by cosine similarity; zero-norm rows rank last; ties break by
/// (identity, frame) ascending.
inline std::vector<Retrieved> retrieve_similar(const ExpressionTable& t, const std::vector<double>& anchor,
                                               int top_k) {
    if (t.rows.empty()) throw std::invalid_argument("retrieve_similar: empty table");
    double an = 0;
    for (double v : anchor) an += v * v;
    if (an == 0) throw std::invalid_argument("retrieve_similar: zero-norm anchor");
    std::vector<Retrieved> all;
    all.reserve(t.rows.size());
    for (const auto& row : t.rows) {
        double rn = 0;
        for (double v : row.psi) rn += v * v;
        Retrieved r{row.identity, row.frame, 0.0};
        r.similarity = rn == 0 ? -2.0 : cosine_similarity(anchor, row.psi);  // sentinel sorts last
        all.push_back(r);
    }
    std::sort(all.begin(), all.end(), [](const Retrieved& a, const Retrieved& b) {
        if (a.similarity != b.similarity) return a.similarity > b.similarity;
        if (a.identity != b.identity) return a.identity < b.identity;
        return a.frame < b.frame;
    });
    if (top_k > static_cast<int>(all.size())) top_k = static_cast<int>(all.size());
    all.resize(static_cast<size_t>(std::max(top_k, 0)));
    for (auto& r : all)
        if (r.similarity == -2.0) r.similarity = 0.0;
    return all;
}

/// Per-identity training timesteps: for each global anchor the most similar
/// not-yet-chosen frame of that identity, plus `random_per_id` random
/// leftovers. Changing the seed changes only the random slots.
struct SamplingPlan {
    struct Slot {
        int identity = 0, frame = 0;
        bool from_anchor = false;
    };
    int per_id = 0;
    std::vector<Slot> slots;  // grouped by identity

    std::vector<Slot> for_identity(int id) const {
        std::vector<Slot> out;
        for (const auto& s : slots)
            if (s.identity == id) out.push_back(s);
        return out;
    }
};

inline SamplingPlan build_adjusted_sampler(const ExpressionTable& t, int k_anchor = 20, int random_per_id = 6,
                                           std::uint64_t seed = 0) {
    const auto anchors = select_anchors(t, k_anchor);
    std::vector<int> ids;
    for (const auto& row : t.rows)
        if (ids.empty() || ids.back() != row.identity) {
            if (std::find(ids.begin(), ids.end(), row.identity) == ids.end()) ids.push_back(row.identity);
        }
    std::sort(ids.begin(), ids.end());

    const int need = k_anchor + random_per_id;
    std::string shortfall;
    for (int id : ids) {
        int count = 0;
        for (const auto& row : t.rows)
            if (row.identity == id) ++count;
        if (count < need)
            shortfall += " identity " + std::to_string(id) + " has " + std::to_string(count) + " frames, needs " +
                         std::to_string(need) + ";";
    }
    if (!shortfall.empty()) throw std::invalid_argument("build_adjusted_sampler:" + shortfall);

    SamplingPlan plan;
    plan.per_id = need;
    Rng rng(seed ^ 0xAD705EEDULL);
    for (int id : ids) {
        std::vector<size_t> mine;
        for (size_t i = 0; i < t.rows.size(); ++i)
            if (t.rows[i].identity == id) mine.push_back(i);
        std::vector<char> used(mine.size(), 0);
        for (const auto& anchor : anchors) {
            double best_sim = -3;
            size_t best = 0;
            bool found = false;
            for (size_t m = 0; m < mine.size(); ++m) {
                if (used[m]) continue;
                const auto& row = t.rows[mine[m]];
                double rn = 0;
                for (double v : row.psi) rn += v * v;
                const double sim = rn == 0 ? -2.0 : cosine_similarity(anchor, row.psi);
                if (sim > best_sim) {
                    best_sim = sim;
                    best = m;
                    found = true;
                }
            }
            if (!found) break;
            used[best] = 1;
            plan.slots.push_back({id, t.rows[mine[best]].frame, true});
        }
        std::vector<size_t> rest;
        for (size_t m = 0; m < mine.size(); ++m)
            if (!used[m]) rest.push_back(m);
        for (int k = 0; k < random_per_id; ++k) {
            const int pick = rng.index(static_cast<int>(rest.size()));
            plan.slots.push_back({id, t.rows[mine[rest[static_cast<size_t>(pick)]]].frame, false});
            rest.erase(rest.begin() + pick);
        }
    }
    return plan;
}

// ---------------------------------------------------------------------------
// PCA diagnostics over anchors.
// ---------------------------------------------------------------------------

namespace detail {
/// Cyclic Jacobi eigensolver for small symmetric matrices (row-major n x n).
inline void jacobi_eigen(std::vector<double>& a, int n, std::vector<double>& eigvals,
                         std::vector<double>& eigvecs) {
    eigvecs.assign(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) eigvecs[static_cast<size_t>(i) * n + i] = 1.0;
    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = 0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += a[static_cast<size_t>(p) * n + q] * a[static_cast<size_t>(p) * n + q];
        if (off < 1e-24) break;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) {
                const double apq = a[static_cast<size_t>(p) * n + q];
                if (std::abs(apq) < 1e-300) continue;
                const double app = a[static_cast<size_t>(p) * n + p], aqq = a[static_cast<size_t>(q) * n + q];
                const double theta = (aqq - app) / (2 * apq);
                const double tsign = theta >= 0 ? 1.0 : -1.0;
                const double tt = tsign / (std::abs(theta) + std::sqrt(theta * theta + 1));
                const double c = 1.0 / std::sqrt(tt * tt + 1), s = tt * c;
                for (int k = 0; k < n; ++k) {
                    const double akp = a[static_cast<size_t>(k) * n + p], akq = a[static_cast<size_t>(k) * n + q];
                    a[static_cast<size_t>(k) * n + p] = c * akp - s * akq;
                    a[static_cast<size_t>(k) * n + q] = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = a[static_cast<size_t>(p) * n + k], aqk = a[static_cast<size_t>(q) * n + k];
                    a[static_cast<size_t>(p) * n + k] = c * apk - s * aqk;
                    a[static_cast<size_t>(q) * n + k] = s * apk + c * aqk;
                }
                for (int k = 0; k < n; ++k) {
                    const double vkp = eigvecs[static_cast<size_t>(k) * n + p],
                                 vkq = eigvecs[static_cast<size_t>(k) * n + q];
                    eigvecs[static_cast<size_t>(k) * n + p] = c * vkp - s * vkq;
                    eigvecs[static_cast<size_t>(k) * n + q] = s * vkp + c * vkq;
                }
            }
    }
    eigvals.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) eigvals[static_cast<size_t>(i)] = a[static_cast<size_t>(i) * n + i];
}
}  // namespace detail

struct PcaProjection {
    std::vector<std::array<double, 2>> rows;     // all table rows projected
    std::vector<std::array<double, 2>> anchors;  // anchors projected
    std::vector<double> eigenvalues;             // all, descending
    std::vector<double> mean;                    // anchor mean (centering)
    std::vector<double> axes;                    // dim x psi_dim principal axes
};

/// PCA fit on the anchors (mean-centered covariance eigenvectors), all rows
/// projected into the leading `dim` axes.
inline PcaProjection pca_project(const ExpressionTable& t, const std::vector<std::vector<double>>& anchors,
                                 int dim = 2) {
    if (dim != 2) throw std::invalid_argument("pca_project: only dim=2 diagnostics are supported");
    if (static_cast<int>(anchors.size()) < dim) throw std::invalid_argument("pca_project: need >= dim anchors");
    const int E = t.psi_dim;
    PcaProjection out;
    out.mean.assign(static_cast<size_t>(E), 0.0);
    for (const auto& a : anchors)
        for (int e = 0; e < E; ++e) out.mean[static_cast<size_t>(e)] += a[static_cast<size_t>(e)];
    for (auto& v : out.mean) v /= static_cast<double>(anchors.size());

    std::vector<double> cov(static_cast<size_t>(E) * E, 0.0);
    for (const auto& a : anchors)
        for (int i = 0; i < E; ++i)
            for (int j = 0; j < E; ++j)
                cov[static_cast<size_t>(i) * E + j] += (a[static_cast<size_t>(i)] - out.mean[static_cast<size_t>(i)]) *
                                                       (a[static_cast<size_t>(j)] - out.mean[static_cast<size_t>(j)]);
    for (auto& v : cov) v /= static_cast<double>(anchors.size());

    std::vector<double> eigvals, eigvecs;
    std::vector<double> work = cov;
    detail::jacobi_eigen(work, E, eigvals, eigvecs);
    std::vector<int> order(static_cast<size_t>(E));
    for (int i = 0; i < E; ++i) order[static_cast<size_t>(i)] = i;
    std::sort(order.begin(), order.end(), [&](int a, int b) { return eigvals[static_cast<size_t>(a)] > eigvals[static_cast<size_t>(b)]; });
    for (int i = 0; i < E; ++i) out.eigenvalues.push_back(eigvals[static_cast<size_t>(order[static_cast<size_t>(i)])]);
    const double trace = std::max(1e-300, out.eigenvalues[0]);
    if (out.eigenvalues[static_cast<size_t>(dim - 1)] < 1e-12 * trace &&
        out.eigenvalues[static_cast<size_t>(dim - 1)] <= 0)
        throw std::invalid_argument("pca_project: degenerate anchor covariance");

    out.axes.assign(static_cast<size_t>(dim) * E, 0.0);
    for (int d = 0; d < dim; ++d) {
        const int col = order[static_cast<size_t>(d)];
        // sign convention: largest-magnitude component positive
        int arg = 0;
        for (int e = 1; e < E; ++e)
            if (std::abs(eigvecs[static_cast<size_t>(e) * E + col]) >
                std::abs(eigvecs[static_cast<size_t>(arg) * E + col]))
                arg = e;
        const double sign = eigvecs[static_cast<size_t>(arg) * E + col] >= 0 ? 1.0 : -1.0;
        for (int e = 0; e < E; ++e)
            out.axes[static_cast<size_t>(d) * E + e] = sign * eigvecs[static_cast<size_t>(e) * E + col];
    }

    auto project = [&](const std::vector<double>& psi) {
        std::array<double, 2> p{0, 0};
        for (int d = 0; d < dim; ++d)
            for (int e = 0; e < E; ++e)
                p[static_cast<size_t>(d)] += out.axes[static_cast<size_t>(d) * E + e] *
                                             (psi[static_cast<size_t>(e)] - out.mean[static_cast<size_t>(e)]);
        return p;
    };
    for (const auto& row : t.rows) out.rows.push_back(project(row.psi));
    for (const auto& a : anchors) out.anchors.push_back(project(a));
    return out;
}

}  // namespace uvga::data
