#pragma once

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "uvga/geometry.hpp"
#include "uvga/rng.hpp"
#include "uvga/tensor.hpp"

namespace uvga::rig {

struct Joint {
    std::string name;
    int parent = -1;  // -1 for the root
    Vec3<double> pivot;
};

/// Parametric head rig: template mesh, expression blendshapes, a small
/// joint hierarchy with skinning weights, per-face-corner UVs and named
/// vertex regions. All lengths in meters.
struct HeadRig {
    Tensor<double> vertices;                       // [V,3]
    std::vector<std::array<int, 3>> faces;         // F triangles
    Tensor<double> expr_basis;                     // [E,V,3]
    std::vector<Joint> joints;                     // J
    Tensor<double> skin_weights;                   // [V,J], convex rows
    Tensor<double> uv;                             // [F,3,2] per-corner coords in [0,1]^2
    std::map<std::string, std::vector<int>> regions;

    int vertex_count() const { return vertices.dim(0); }
    int face_count() const { return static_cast<int>(faces.size()); }
    int expr_count() const { return expr_basis.rank() == 3 ? expr_basis.dim(0) : 0; }
    int joint_count() const { return static_cast<int>(joints.size()); }

    Vec3<double> vertex(int i) const {
        return {vertices.at(i, 0), vertices.at(i, 1), vertices.at(i, 2)};
    }

    void bounding_box(Vec3<double>& lo, Vec3<double>& hi) const {
        lo = hi = vertex(0);
        for (int i = 1; i < vertex_count(); ++i) {
            const auto p = vertex(i);
            lo.x = std::min(lo.x, p.x); lo.y = std::min(lo.y, p.y); lo.z = std::min(lo.z, p.z);
            hi.x = std::max(hi.x, p.x); hi.y = std::max(hi.y, p.y); hi.z = std::max(hi.z, p.z);
        }
    }

    /// Bounding-box diagonal of the template; the length scale for
    /// position offsets and scale clamps.
    double extent() const {
        Vec3<double> lo, hi;
        bounding_box(lo, hi);
        return (hi - lo).norm();
    }

    void validate() const {
        const int V = vertex_count(), J = joint_count(), F = face_count();
        if (vertices.shape != Shape{V, 3}) throw std::invalid_argument("rig: vertices must be [V,3]");
        if (expr_count() > 0 && expr_basis.shape != Shape{expr_count(), V, 3})
            throw std::invalid_argument("rig: expression basis must be [E,V,3]");
        if (skin_weights.shape != Shape{V, J}) throw std::invalid_argument("rig: skin weights must be [V,J]");
        for (int i = 0; i < V; ++i) {
            double sum = 0.0;
            for (int j = 0; j < J; ++j) {
                const double w = skin_weights.at(i, j);
                if (w < -1e-9) throw std::invalid_argument("rig: negative skin weight at vertex " + std::to_string(i));
                sum += w;
            }
            if (std::abs(sum - 1.0) > 1e-6)
                throw std::invalid_argument("rig: skin weight row " + std::to_string(i) + " sums to " + std::to_string(sum));
        }
        if (uv.shape != Shape{std::max(F, 1), 3, 2} && F > 0)
            throw std::invalid_argument("rig: uv must be [F,3,2]");
        for (int f = 0; f < F; ++f) {
            for (int c = 0; c < 3; ++c) {
                if (faces[f][c] < 0 || faces[f][c] >= V)
                    throw std::invalid_argument("rig: face " + std::to_string(f) + " references missing vertex");
                for (int d = 0; d < 2; ++d) {
                    const double u = uv.at(f, c, d);
                    if (u < -1e-9 || u > 1.0 + 1e-9)
                        throw std::invalid_argument("rig: uv outside [0,1] on face " + std::to_string(f));
                }
            }
            const double ax = uv.at(f, 0, 0), ay = uv.at(f, 0, 1);
            const double area2 = (uv.at(f, 1, 0) - ax) * (uv.at(f, 2, 1) - ay) -
                                 (uv.at(f, 1, 1) - ay) * (uv.at(f, 2, 0) - ax);
            if (std::abs(area2) < 1e-12)
                throw std::invalid_argument("rig: degenerate uv triangle on face " + std::to_string(f));
        }
        for (const auto& [name, verts] : regions)
            for (int idx : verts)
                if (idx < 0 || idx >= V)
                    throw std::invalid_argument("rig: region '" + name + "' references missing vertex");
        for (size_t j = 0; j < joints.size(); ++j)
            if (joints[j].parent >= static_cast<int>(j))
                throw std::invalid_argument("rig: joint parents must precede children");
    }

    std::uint64_t content_hash() const;
};

/// Joint pose: one local rotation per joint plus a global rigid transform
/// applied after skinning.
struct Pose {
    std::vector<Quat<double>> joint_rot;
    Rigid<double> global;

    static Pose identity(int joint_count) {
        Pose p;
        p.joint_rot.assign(static_cast<size_t>(joint_count), Quat<double>::identity());
        return p;
    }

    bool is_identity() const {
        for (const auto& q : joint_rot)
            if (!(q.w == 1.0 && q.x == 0.0 && q.y == 0.0 && q.z == 0.0)) return false;
        const auto& g = global;
        return g.rot.w == 1.0 && g.rot.x == 0.0 && g.rot.y == 0.0 && g.rot.z == 0.0 &&
               g.trans.x == 0.0 && g.trans.y == 0.0 && g.trans.z == 0.0;
    }

    void validate(int joint_count) const {
        if (static_cast<int>(joint_rot.size()) != joint_count)
            throw std::invalid_argument("pose: expected " + std::to_string(joint_count) + " joint rotations");
        for (const auto& q : joint_rot)
            if (std::abs(q.norm() - 1.0) > 1e-6) throw std::invalid_argument("pose: joint quaternion not unit-norm");
        if (std::abs(global.rot.norm() - 1.0) > 1e-6)
            throw std::invalid_argument("pose: global quaternion not unit-norm");
    }
};

/// Expression coefficients plus pose; the per-frame driving signal.
struct ExpressionParams {
    std::vector<double> psi;
    Pose pose;

    void validate(const HeadRig& r) const {
        if (static_cast<int>(psi.size()) != r.expr_count())
            throw std::invalid_argument("expression: expected " + std::to_string(r.expr_count()) +
                                        " coefficients, got " + std::to_string(psi.size()));
        pose.validate(r.joint_count());
    }

    static ExpressionParams neutral(const HeadRig& r) {
        ExpressionParams e;
        e.psi.assign(static_cast<size_t>(r.expr_count()), 0.0);
        e.pose = Pose::identity(r.joint_count());
        return e;
    }
};

/// Blendshape deformation (no skinning): vertices + sum_e psi_e * basis_e.
inline Tensor<double> deform(const HeadRig& r, const std::vector<double>& psi) {
    if (static_cast<int>(psi.size()) != r.expr_count())
        throw std::invalid_argument("deform: coefficient count " + std::to_string(psi.size()) +
                                    " != basis count " + std::to_string(r.expr_count()));
    Tensor<double> out = r.vertices;
    const int V = r.vertex_count();
    for (int e = 0; e < r.expr_count(); ++e) {
        const double w = psi[static_cast<size_t>(e)];
        if (w == 0.0) continue;
        const double* b = r.expr_basis.v.data() + static_cast<std::int64_t>(e) * V * 3;
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(V) * 3; ++i) out[i] += w * b[i];
    }
    return out;
}

/// Per-joint skinning transforms M_j (posed world * inverse rest world) and
/// their world rotations, with the global rigid transform kept separate.
struct SkinningTransforms {
    std::vector<Affine34<double>> joint;       // J, global not folded in
    std::vector<Quat<double>> joint_world_rot; // J
    Rigid<double> global;
};

inline SkinningTransforms skinning_transforms(const HeadRig& r, const Pose& pose) {
    pose.validate(r.joint_count());
    const int J = r.joint_count();
    SkinningTransforms out;
    out.joint.resize(static_cast<size_t>(J));
    out.joint_world_rot.resize(static_cast<size_t>(J));
    out.global = pose.global;
    std::vector<Rigid<double>> world(static_cast<size_t>(J));
    for (int j = 0; j < J; ++j) {
        const auto& jt = r.joints[static_cast<size_t>(j)];
        const Vec3<double> parent_pivot = jt.parent >= 0 ? r.joints[static_cast<size_t>(jt.parent)].pivot : Vec3<double>{};
        const Rigid<double> local{pose.joint_rot[static_cast<size_t>(j)], jt.pivot - parent_pivot};
        world[static_cast<size_t>(j)] = jt.parent >= 0 ? world[static_cast<size_t>(jt.parent)].compose(local) : local;
        // M_j = world_j composed with translation by -pivot (inverse rest)
        const Rigid<double>& w = world[static_cast<size_t>(j)];
        Rigid<double> m{w.rot, w.rot.rotate(jt.pivot * -1.0) + w.trans};
        out.joint[static_cast<size_t>(j)] = Affine34<double>::from_rigid(m);
        out.joint_world_rot[static_cast<size_t>(j)] = w.rot;
    }
    return out;
}

/// Per-point blended transforms: affine for positions, quaternion for
/// primitive rotations. Quaternion blending is a normalized weighted sum
/// with signs aligned to the largest-weight joint (an approximation that is
/// continuous for small rotations).
struct PointTransforms {
    std::vector<Affine34<double>> affine;  // global rigid folded in
    std::vector<Quat<double>> rotation;    // global rotation folded in
};

inline PointTransforms blend_point_transforms(const SkinningTransforms& st, const Tensor<double>& weights,
                                              double tolerance = 1e-6) {
    const int J = static_cast<int>(st.joint.size());
    if (weights.rank() != 2 || weights.dim(1) != J)
        throw std::invalid_argument("lbs: weights must be [M," + std::to_string(J) + "]");
    const int M = weights.dim(0);
    PointTransforms out;
    out.affine.resize(static_cast<size_t>(M));
    out.rotation.resize(static_cast<size_t>(M));
    const Affine34<double> ga = Affine34<double>::from_rigid(st.global);
    for (int m = 0; m < M; ++m) {
        double sum = 0.0;
        int top = 0;
        for (int j = 0; j < J; ++j) {
            const double w = weights.at(m, j);
            if (w < -tolerance) throw std::invalid_argument("lbs: negative weight in row " + std::to_string(m));
            sum += w;
            if (w > weights.at(m, top)) top = j;
        }
        if (std::abs(sum - 1.0) > tolerance)
            throw std::invalid_argument("lbs: weight row " + std::to_string(m) + " sums to " + std::to_string(sum));

        Affine34<double> blend;
        blend.set_zero();
        for (int j = 0; j < J; ++j) blend.add_scaled(st.joint[static_cast<size_t>(j)], weights.at(m, j));
        // fold the global rigid on the left: y = G (M x) + t_G
        Affine34<double> full;
        const auto G = st.global.rot.to_matrix();
        for (int i = 0; i < 3; ++i)
            for (int c = 0; c < 4; ++c) {
                double acc = 0.0;
                for (int k = 0; k < 3; ++k) acc += G[static_cast<size_t>(i) * 3 + k] * blend.m[static_cast<size_t>(k) * 4 + c];
                full.m[static_cast<size_t>(i) * 4 + c] = acc;
            }
        full.m[3] += st.global.trans.x;
        full.m[7] += st.global.trans.y;
        full.m[11] += st.global.trans.z;
        out.affine[static_cast<size_t>(m)] = full;

        const Quat<double>& ref = st.joint_world_rot[static_cast<size_t>(top)];
        Quat<double> q{0, 0, 0, 0};
        for (int j = 0; j < J; ++j) {
            const Quat<double>& qj = st.joint_world_rot[static_cast<size_t>(j)];
            const double dot = ref.w * qj.w + ref.x * qj.x + ref.y * qj.y + ref.z * qj.z;
            const double s = (dot < 0.0 ? -1.0 : 1.0) * weights.at(m, j);
            q.w += s * qj.w; q.x += s * qj.x; q.y += s * qj.y; q.z += s * qj.z;
        }
        out.rotation[static_cast<size_t>(m)] = (st.global.rot * q.normalized()).normalized();
    }
    return out;
}

struct LbsResult {
    Tensor<double> points;     // [M,3]
    Tensor<double> rotations;  // [M,4] unit quaternions (w,x,y,z); empty when no input rotations
};

/// Linear blend skinning of arbitrary points (and optional per-point
/// rotations) under convex per-point joint weights.
inline LbsResult lbs(const HeadRig& r, const Pose& pose, const Tensor<double>& points,
                     const Tensor<double>* rotations, const Tensor<double>& weights) {
    if (points.rank() != 2 || points.dim(1) != 3) throw std::invalid_argument("lbs: points must be [M,3]");
    const int M = points.dim(0);
    if (weights.dim(0) != M) throw std::invalid_argument("lbs: weight row count mismatch");
    if (rotations && (rotations->rank() != 2 || rotations->dim(0) != M || rotations->dim(1) != 4))
        throw std::invalid_argument("lbs: rotations must be [M,4]");
    const auto pt = blend_point_transforms(skinning_transforms(r, pose), weights);
    LbsResult out;
    out.points = Tensor<double>({M, 3});
    for (int m = 0; m < M; ++m) {
        const Vec3<double> p{points.at(m, 0), points.at(m, 1), points.at(m, 2)};
        const Vec3<double> q = pt.affine[static_cast<size_t>(m)].apply(p);
        out.points.at(m, 0) = q.x;
        out.points.at(m, 1) = q.y;
        out.points.at(m, 2) = q.z;
    }
    if (rotations) {
        out.rotations = Tensor<double>({M, 4});
        for (int m = 0; m < M; ++m) {
            const Quat<double> qin{rotations->at(m, 0), rotations->at(m, 1), rotations->at(m, 2), rotations->at(m, 3)};
            const Quat<double> qc = (pt.rotation[static_cast<size_t>(m)] * qin).normalized();
            out.rotations.at(m, 0) = qc.w;
            out.rotations.at(m, 1) = qc.x;
            out.rotations.at(m, 2) = qc.y;
            out.rotations.at(m, 3) = qc.z;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Procedural template: a low-poly head-like ellipsoid with nose, two teeth
// proxy quads riding the jaw, 12 smooth expression blendshapes, and
// face/mouth/eyes/hair/teeth regions. Deterministic in the seed.
// ---------------------------------------------------------------------------

struct ProceduralRigOptions {
    std::uint64_t seed = 0x0badc0de;
    int stacks = 22;
    int slices = 26;
    int expr_count = 12;
};

namespace detail {
inline double ang_dist(double theta_a, double phi_a, double theta_b, double phi_b) {
    // great-circle distance on the unit sphere
    const double ca = std::cos(theta_a), sa = std::sin(theta_a);
    const double cb = std::cos(theta_b), sb = std::sin(theta_b);
    const double d = ca * cb + sa * sb * std::cos(phi_a - phi_b);
    return std::acos(std::clamp(d, -1.0, 1.0));
}
}  // namespace detail

inline HeadRig make_procedural_rig(const ProceduralRigOptions& opt = {}) {
    const int S = opt.stacks, C = opt.slices, E = opt.expr_count;
    if (S < 6 || C < 8 || E < 1 || E > 64) throw std::invalid_argument("procedural rig: bad options");
    Rng rng(opt.seed);
    HeadRig r;

    const double rad = 0.11;
    const Vec3<double> scale{0.82, 1.05, 0.95};
    const int rings = S - 1;
    const int V_sphere = rings * C + 2;
    const int V = V_sphere + 8;  // + two teeth quads

    std::vector<double> vtheta(static_cast<size_t>(V), 0.0), vphi(static_cast<size_t>(V), 0.0);
    r.vertices = Tensor<double>({V, 3});
    auto set_vertex = [&](int i, const Vec3<double>& p) {
        r.vertices.at(i, 0) = p.x;
        r.vertices.at(i, 1) = p.y;
        r.vertices.at(i, 2) = p.z;
    };

    // front of the face is +z (phi = 0), y is up
    auto sphere_point = [&](double theta, double phi) {
        Vec3<double> p{std::sin(theta) * std::sin(phi) * scale.x * rad, std::cos(theta) * scale.y * rad,
                       std::sin(theta) * std::cos(phi) * scale.z * rad};
        // nose: a gentle outward bump on the front
        const double dn = detail::ang_dist(theta, phi, 0.58 * M_PI, 0.0);
        const double bump = 0.022 * std::exp(-dn * dn / (2.0 * 0.16 * 0.16));
        const Vec3<double> dir{std::sin(theta) * std::sin(phi), std::cos(theta), std::sin(theta) * std::cos(phi)};
        return p + dir * bump;
    };

    set_vertex(0, sphere_point(0.0, 0.0));           // north pole
    vtheta[0] = 0.0;
    set_vertex(1, sphere_point(M_PI, 0.0));          // south pole
    vtheta[1] = M_PI;
    for (int i = 0; i < rings; ++i) {
        const double theta = M_PI * (i + 1) / S;
        for (int j = 0; j < C; ++j) {
            double phi = 2.0 * M_PI * j / C;
            if (phi > M_PI) phi -= 2.0 * M_PI;  // signed, front-centered
            const int idx = 2 + i * C + j;
            set_vertex(idx, sphere_point(theta, phi));
            vtheta[static_cast<size_t>(idx)] = theta;
            vphi[static_cast<size_t>(idx)] = phi;
        }
    }

    // teeth proxy quads tucked behind the lips; upper rides the head,
    // lower rides the jaw
    const int t0 = V_sphere;
    const double tz = 0.068, tw = 0.020, td = 0.007;
    const double ty_up = -0.021, ty_lo = -0.034;
    set_vertex(t0 + 0, {-tw, ty_up, tz - td});
    set_vertex(t0 + 1, {tw, ty_up, tz - td});
    set_vertex(t0 + 2, {tw, ty_up, tz + td});
    set_vertex(t0 + 3, {-tw, ty_up, tz + td});
    set_vertex(t0 + 4, {-tw, ty_lo, tz - td});
    set_vertex(t0 + 5, {tw, ty_lo, tz - td});
    set_vertex(t0 + 6, {tw, ty_lo, tz + td});
    set_vertex(t0 + 7, {-tw, ty_lo, tz + td});

    // faces with per-corner UVs; sphere unwraps to u in [0.02,0.98],
    // v in [0.30,0.98]; teeth islands live below at v in [0.04,0.20]
    std::vector<std::array<double, 2>> corner_uvs;
    auto sphere_uv = [&](double theta, double phi_unwrapped) -> std::array<double, 2> {
        return {0.02 + 0.96 * (phi_unwrapped / (2.0 * M_PI)), 0.30 + 0.68 * (theta / M_PI)};
    };
    auto push_face = [&](int a, int b, int c, std::array<double, 2> ua, std::array<double, 2> ub,
                         std::array<double, 2> uc) {
        r.faces.push_back({a, b, c});
        corner_uvs.push_back(ua);
        corner_uvs.push_back(ub);
        corner_uvs.push_back(uc);
    };
    auto ring_vertex = [&](int ring, int j) { return 2 + ring * C + (j % C); };

    for (int j = 0; j < C; ++j) {  // pole fans
        const double th = M_PI / S;
        auto ua = sphere_uv(th, 2.0 * M_PI * j / C);
        auto ub = sphere_uv(th, 2.0 * M_PI * (j + 1) / C);
        push_face(0, ring_vertex(0, j), ring_vertex(0, j + 1), {(ua[0] + ub[0]) / 2, 0.30}, ua, ub);
    }
    for (int i = 0; i + 1 < rings; ++i) {
        const double th0 = M_PI * (i + 1) / S, th1 = M_PI * (i + 2) / S;
        for (int j = 0; j < C; ++j) {
            const double p0 = 2.0 * M_PI * j / C, p1 = 2.0 * M_PI * (j + 1) / C;
            const int a = ring_vertex(i, j), b = ring_vertex(i, j + 1);
            const int c = ring_vertex(i + 1, j), d = ring_vertex(i + 1, j + 1);
            push_face(a, c, b, sphere_uv(th0, p0), sphere_uv(th1, p0), sphere_uv(th0, p1));
            push_face(b, c, d, sphere_uv(th0, p1), sphere_uv(th1, p0), sphere_uv(th1, p1));
        }
    }
    for (int j = 0; j < C; ++j) {
        const double th = M_PI * rings / S;
        auto ua = sphere_uv(th, 2.0 * M_PI * j / C);
        auto ub = sphere_uv(th, 2.0 * M_PI * (j + 1) / C);
        push_face(1, ring_vertex(rings - 1, j + 1), ring_vertex(rings - 1, j), {(ua[0] + ub[0]) / 2, 0.98}, ub, ua);
    }
    // teeth islands: two axis-aligned rectangles
    auto quad_island = [&](int base, double u0, double u1, double v0, double v1) {
        push_face(base + 0, base + 1, base + 2, {u0, v0}, {u1, v0}, {u1, v1});
        push_face(base + 0, base + 2, base + 3, {u0, v0}, {u1, v1}, {u0, v1});
    };
    quad_island(t0, 0.08, 0.42, 0.04, 0.20);      // upper teeth
    quad_island(t0 + 4, 0.58, 0.92, 0.04, 0.20);  // lower teeth

    const int F = static_cast<int>(r.faces.size());
    r.uv = Tensor<double>({F, 3, 2});
    for (int f = 0; f < F; ++f)
        for (int c = 0; c < 3; ++c) {
            r.uv.at(f, c, 0) = corner_uvs[static_cast<size_t>(f) * 3 + c][0];
            r.uv.at(f, c, 1) = corner_uvs[static_cast<size_t>(f) * 3 + c][1];
        }

    // joints: global root, neck, jaw (jaw childed to the neck)
    r.joints = {{"global", -1, {0.0, 0.0, 0.0}},
                {"neck", 0, {0.0, -0.115, -0.010}},
                {"jaw", 1, {0.0, -0.030, 0.025}}};

    // skinning: head carries everything, neck ramps in toward the base,
    // jaw claims the lower front; teeth are rigidly bound
    r.skin_weights = Tensor<double>({V, 3});
    const double mouth_theta = 0.70 * M_PI, mouth_phi = 0.0;
    for (int i = 0; i < V_sphere; ++i) {
        const double th = vtheta[static_cast<size_t>(i)], ph = vphi[static_cast<size_t>(i)];
        const double y = r.vertices.at(i, 1);
        double w_neck = y < -0.075 ? std::min(0.85, (-0.075 - y) / 0.08) : 0.0;
        const double dm = detail::ang_dist(th, ph, mouth_theta, mouth_phi);
        double w_jaw = 0.9 * std::exp(-dm * dm / (2.0 * 0.22 * 0.22));
        if (w_jaw < 1e-4) w_jaw = 0.0;
        double w_head = 1.0 - w_neck - w_jaw;
        if (w_head < 0.0) {
            const double s = 1.0 / (w_neck + w_jaw);
            w_neck *= s;
            w_jaw *= s;
            w_head = 0.0;
        }
        r.skin_weights.at(i, 0) = w_head;
        r.skin_weights.at(i, 1) = w_neck;
        r.skin_weights.at(i, 2) = w_jaw;
    }
    for (int k = 0; k < 4; ++k) {
        r.skin_weights.at(t0 + k, 0) = 1.0;      // upper teeth: head
        r.skin_weights.at(t0 + 4 + k, 2) = 1.0;  // lower teeth: jaw
    }

    // regions
    auto& face_set = r.regions["face"];
    auto& mouth_set = r.regions["mouth"];
    auto& eyes_set = r.regions["eyes"];
    auto& hair_set = r.regions["hair"];
    auto& teeth_set = r.regions["teeth"];
    for (int i = 0; i < V_sphere; ++i) {
        const double th = vtheta[static_cast<size_t>(i)], ph = vphi[static_cast<size_t>(i)];
        const double front = detail::ang_dist(th, ph, 0.55 * M_PI, 0.0);
        if (front < 0.48 * M_PI) face_set.push_back(i);  // covers every blendshape's support
        if (detail::ang_dist(th, ph, mouth_theta, mouth_phi) < 0.17 * M_PI) mouth_set.push_back(i);
        if (detail::ang_dist(th, ph, 0.45 * M_PI, 0.11 * M_PI) < 0.07 * M_PI ||
            detail::ang_dist(th, ph, 0.45 * M_PI, -0.11 * M_PI) < 0.07 * M_PI)
            eyes_set.push_back(i);
        if (th < 0.30 * M_PI || front > 0.60 * M_PI) hair_set.push_back(i);
    }
    for (int k = 0; k < 8; ++k) {
        teeth_set.push_back(t0 + k);
        mouth_set.push_back(t0 + k);
    }

    // blendshapes: smooth normal-direction bumps at canonical face sites
    struct Site { double theta, phi, amp, sigma; };
    const std::vector<Site> sites = {
        {0.40 * M_PI, 0.10 * M_PI, 0.014, 0.16},   // brow L
        {0.40 * M_PI, -0.10 * M_PI, 0.014, 0.16},  // brow R
        {0.45 * M_PI, 0.12 * M_PI, 0.010, 0.10},   // eye L
        {0.45 * M_PI, -0.12 * M_PI, 0.010, 0.10},  // eye R
        {0.58 * M_PI, 0.20 * M_PI, 0.016, 0.18},   // cheek L
        {0.58 * M_PI, -0.20 * M_PI, 0.016, 0.18},  // cheek R
        {0.66 * M_PI, 0.0, 0.018, 0.14},           // upper lip
        {0.74 * M_PI, 0.0, 0.018, 0.14},           // lower lip / chin
        {0.70 * M_PI, 0.14 * M_PI, 0.013, 0.13},   // mouth corner L
        {0.70 * M_PI, -0.14 * M_PI, 0.013, 0.13},  // mouth corner R
        {0.34 * M_PI, 0.0, 0.015, 0.22},           // forehead
        {0.56 * M_PI, 0.0, 0.012, 0.10},           // nose scrunch
    };
    r.expr_basis = Tensor<double>({E, V, 3});
    for (int e = 0; e < E; ++e) {
        const Site s = sites[static_cast<size_t>(e % sites.size())];
        const double amp = s.amp * rng.uniform(0.85, 1.15);
        const double sigma = s.sigma * rng.uniform(0.9, 1.1);
        for (int i = 0; i < V_sphere; ++i) {
            const double d = detail::ang_dist(vtheta[static_cast<size_t>(i)], vphi[static_cast<size_t>(i)], s.theta, s.phi);
            const double fall = amp * std::exp(-d * d / (2.0 * sigma * sigma));
            if (fall < 1e-6) continue;
            const Vec3<double> dir = Vec3<double>{r.vertices.at(i, 0) / scale.x, r.vertices.at(i, 1) / scale.y,
                                                  r.vertices.at(i, 2) / scale.z}
                                         .normalized();
            r.expr_basis.at(e, i, 0) = fall * dir.x;
            r.expr_basis.at(e, i, 1) = fall * dir.y;
            r.expr_basis.at(e, i, 2) = fall * dir.z;
        }
    }

    r.validate();
    return r;
}

// ---------------------------------------------------------------------------
// Rig container: counts header + blocks, little-endian, f32 payloads.
// Layout documented in docs/formats.md.
// ---------------------------------------------------------------------------

inline constexpr char kRigMagic[8] = {'U', 'V', 'G', 'A', 'R', 'I', 'G', '1'};

namespace detail {
inline void w_u32(std::ostream& os, std::uint32_t x) { os.write(reinterpret_cast<const char*>(&x), 4); }
inline void w_i32(std::ostream& os, std::int32_t x) { os.write(reinterpret_cast<const char*>(&x), 4); }
inline void w_f32(std::ostream& os, float x) { os.write(reinterpret_cast<const char*>(&x), 4); }
inline std::uint32_t r_u32(std::istream& is) {
    std::uint32_t x;
    is.read(reinterpret_cast<char*>(&x), 4);
    if (!is) throw std::runtime_error("rig file: truncated");
    return x;
}
inline std::int32_t r_i32(std::istream& is) {
    std::int32_t x;
    is.read(reinterpret_cast<char*>(&x), 4);
    if (!is) throw std::runtime_error("rig file: truncated");
    return x;
}
inline float r_f32(std::istream& is) {
    float x;
    is.read(reinterpret_cast<char*>(&x), 4);
    if (!is) throw std::runtime_error("rig file: truncated");
    return x;
}
inline void w_f32_block(std::ostream& os, const Tensor<double>& t) {
    for (double x : t.v) w_f32(os, static_cast<float>(x));
}
inline void r_f32_block(std::istream& is, Tensor<double>& t) {
    for (auto& x : t.v) x = static_cast<double>(r_f32(is));
}
}  // namespace detail

inline void save_rig(const HeadRig& r, std::ostream& os) {
    os.write(kRigMagic, 8);
    detail::w_u32(os, 1u);  // version
    detail::w_u32(os, static_cast<std::uint32_t>(r.vertex_count()));
    detail::w_u32(os, static_cast<std::uint32_t>(r.face_count()));
    detail::w_u32(os, static_cast<std::uint32_t>(r.expr_count()));
    detail::w_u32(os, static_cast<std::uint32_t>(r.joint_count()));
    detail::w_u32(os, static_cast<std::uint32_t>(r.regions.size()));
    detail::w_f32_block(os, r.vertices);
    for (const auto& f : r.faces)
        for (int c : f) detail::w_u32(os, static_cast<std::uint32_t>(c));
    detail::w_f32_block(os, r.expr_basis);
    for (const auto& j : r.joints) {
        detail::w_u32(os, static_cast<std::uint32_t>(j.name.size()));
        os.write(j.name.data(), static_cast<std::streamsize>(j.name.size()));
        detail::w_i32(os, j.parent);
        detail::w_f32(os, static_cast<float>(j.pivot.x));
        detail::w_f32(os, static_cast<float>(j.pivot.y));
        detail::w_f32(os, static_cast<float>(j.pivot.z));
    }
    detail::w_f32_block(os, r.skin_weights);
    detail::w_f32_block(os, r.uv);
    for (const auto& [name, verts] : r.regions) {
        detail::w_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::w_u32(os, static_cast<std::uint32_t>(verts.size()));
        for (int v : verts) detail::w_u32(os, static_cast<std::uint32_t>(v));
    }
    if (!os) throw std::runtime_error("rig file: write failed");
}

inline HeadRig load_rig(std::istream& is) {
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kRigMagic, 8) != 0) throw std::runtime_error("rig file: bad magic");
    if (detail::r_u32(is) != 1) throw std::runtime_error("rig file: unsupported version");
    const int V = static_cast<int>(detail::r_u32(is));
    const int F = static_cast<int>(detail::r_u32(is));
    const int E = static_cast<int>(detail::r_u32(is));
    const int J = static_cast<int>(detail::r_u32(is));
    const int R = static_cast<int>(detail::r_u32(is));
    HeadRig r;
    r.vertices = Tensor<double>({V, 3});
    detail::r_f32_block(is, r.vertices);
    r.faces.resize(static_cast<size_t>(F));
    for (auto& f : r.faces)
        for (int c = 0; c < 3; ++c) f[static_cast<size_t>(c)] = static_cast<int>(detail::r_u32(is));
    r.expr_basis = Tensor<double>({E, V, 3});
    detail::r_f32_block(is, r.expr_basis);
    r.joints.resize(static_cast<size_t>(J));
    for (auto& j : r.joints) {
        const auto len = detail::r_u32(is);
        j.name.resize(len);
        is.read(j.name.data(), len);
        j.parent = detail::r_i32(is);
        j.pivot = {detail::r_f32(is), detail::r_f32(is), detail::r_f32(is)};
    }
    r.skin_weights = Tensor<double>({V, J});
    detail::r_f32_block(is, r.skin_weights);
    r.uv = Tensor<double>({F, 3, 2});
    detail::r_f32_block(is, r.uv);
    for (int k = 0; k < R; ++k) {
        const auto len = detail::r_u32(is);
        std::string name(len, '\0');
        is.read(name.data(), len);
        const auto count = detail::r_u32(is);
        auto& verts = r.regions[name];
        verts.resize(count);
        for (auto& v : verts) v = static_cast<int>(detail::r_u32(is));
    }
    // f32 round-off can leave weight rows slightly off 1; renormalize
    for (int i = 0; i < V; ++i) {
        double sum = 0.0;
        for (int j = 0; j < J; ++j) sum += r.skin_weights.at(i, j);
        if (sum > 0.0)
            for (int j = 0; j < J; ++j) r.skin_weights.at(i, j) /= sum;
    }
    r.validate();
    return r;
}

inline void save_rig(const HeadRig& r, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("rig file: cannot open for write: " + path);
    save_rig(r, os);
}

inline HeadRig load_rig(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("rig file: cannot open for read: " + path);
    return load_rig(is);
}

inline std::uint64_t HeadRig::content_hash() const {
    std::ostringstream ss(std::ios::binary);
    save_rig(*this, ss);
    const std::string bytes = ss.str();
    return fnv1a64(bytes.data(), bytes.size());
}

}  // namespace uvga::rig
