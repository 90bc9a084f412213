#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mesh4d/common.hpp"

namespace mesh4d {

using Face = std::array<uint32_t, 3>;

struct TriMesh {
    std::vector<Vec3> vertices;
    std::vector<Face> faces;

    std::size_t vertex_count() const { return vertices.size(); }
    std::size_t face_count() const { return faces.size(); }

    void validate() const {
        MESH4D_CHECK(!vertices.empty(), "TriMesh: no vertices");
        for (const Vec3& v : vertices) MESH4D_CHECK(v.finite(), "TriMesh: non-finite vertex");
        double max_extent = 0.0;
        Vec3 lo = vertices[0], hi = vertices[0];
        for (const Vec3& v : vertices) {
            lo = {std::min(lo.x, v.x), std::min(lo.y, v.y), std::min(lo.z, v.z)};
            hi = {std::max(hi.x, v.x), std::max(hi.y, v.y), std::max(hi.z, v.z)};
        }
        max_extent = std::max({hi.x - lo.x, hi.y - lo.y, hi.z - lo.z});
        const double s = max_extent > 0.0 ? 1.0 / max_extent : 1.0;
        for (const Face& f : faces) {
            for (uint32_t idx : f) MESH4D_CHECK(idx < vertices.size(), "TriMesh: face index out of range");
            const Vec3 a = vertices[f[0]], b = vertices[f[1]], c = vertices[f[2]];
            const double area = 0.5 * (b - a).cross(c - a).norm() * s * s;
            MESH4D_CHECK(area > 1e-12, "TriMesh: degenerate face");
        }
    }
};

// T per-frame vertex arrays in 1:1 index correspondence over one shared face array.
struct MeshSequence {
    std::vector<Face> faces;
    std::vector<std::vector<Vec3>> frames;

    std::size_t frame_count() const { return frames.size(); }
    std::size_t vertex_count() const { return frames.empty() ? 0 : frames[0].size(); }

    TriMesh frame_mesh(std::size_t t) const {
        MESH4D_CHECK(t < frames.size(), "MeshSequence: frame index out of range");
        return TriMesh{frames[t], faces};
    }

    void validate() const {
        MESH4D_CHECK(!frames.empty(), "MeshSequence: no frames");
        const std::size_t nv = frames[0].size();
        for (const auto& fr : frames) {
            MESH4D_CHECK(fr.size() == nv, "MeshSequence: frames disagree on vertex count");
            for (const Vec3& v : fr) MESH4D_CHECK(v.finite(), "MeshSequence: non-finite vertex");
        }
        frame_mesh(0).validate();
    }
};

// M surface points as (face, barycentric) records transported across frames.
struct SurfaceSampleSet {
    std::vector<uint32_t> face_index;              // M
    std::vector<std::array<double, 3>> barycentric;  // M x 3
    std::vector<std::vector<Vec3>> positions;        // T arrays of M
    std::vector<std::vector<Vec3>> normals;          // T arrays of M (unit, flat face normals)

    std::size_t count() const { return face_index.size(); }
    std::size_t frame_count() const { return positions.size(); }
};

// Per-vertex displacement from frame 1 to frame t; displacements[0] is zero.
struct DeformationField {
    std::vector<std::vector<Vec3>> displacements;  // T arrays of N_v

    std::size_t frame_count() const { return displacements.size(); }
};

inline Vec3 face_normal(const Vec3& a, const Vec3& b, const Vec3& c) {
    return (b - a).cross(c - a).normalized();
}

inline double face_area(const Vec3& a, const Vec3& b, const Vec3& c) {
    return 0.5 * (b - a).cross(c - a).norm();
}

// Barycentric combination in a fixed order; shared by sampling and transport so
// frame-1 positions reproduce bit-identically.
inline Vec3 barycentric_point(const std::array<double, 3>& b, const Vec3& v0, const Vec3& v1, const Vec3& v2) {
    return v0 * b[0] + v1 * b[1] + v2 * b[2];
}

// Barycentric coordinates of `point` w.r.t. the triangle (projects onto the
// triangle plane first).
inline std::array<double, 3> barycentric_coordinates(const Vec3& point, const Vec3& v0, const Vec3& v1,
                                                     const Vec3& v2) {
    const Vec3 e0 = v1 - v0, e1 = v2 - v0;
    const double d00 = e0.dot(e0), d01 = e0.dot(e1), d11 = e1.dot(e1);
    const double denom = d00 * d11 - d01 * d01;
    MESH4D_CHECK(std::abs(denom) > 1e-24, "barycentric_coordinates: degenerate triangle");
    const Vec3 p = point - v0;
    const double d20 = p.dot(e0), d21 = p.dot(e1);
    const double b1 = (d11 * d20 - d01 * d21) / denom;
    const double b2 = (d00 * d21 - d01 * d20) / denom;
    return {1.0 - b1 - b2, b1, b2};
}

// Area-weighted uniform surface sampling; deterministic for a fixed seed.
// Barycentric coordinates use the square-root warp for exact per-triangle
// uniformity.
inline SurfaceSampleSet sample_surface(const TriMesh& mesh, std::size_t count, uint64_t seed) {
    mesh.validate();
    MESH4D_CHECK(count >= 1, "sample_surface: count must be >= 1");

    std::vector<double> cum(mesh.faces.size());
    double total = 0.0;
    for (std::size_t i = 0; i < mesh.faces.size(); ++i) {
        const Face& f = mesh.faces[i];
        total += face_area(mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
        cum[i] = total;
    }
    MESH4D_CHECK(total > 1e-12, "sample_surface: degenerate mesh (zero total area)");

    Rng rng(seed);
    SurfaceSampleSet s;
    s.face_index.resize(count);
    s.barycentric.resize(count);
    s.positions.assign(1, std::vector<Vec3>(count));
    s.normals.assign(1, std::vector<Vec3>(count));
    for (std::size_t i = 0; i < count; ++i) {
        const double u = rng.uniform() * total;
        const std::size_t fi =
            static_cast<std::size_t>(std::lower_bound(cum.begin(), cum.end(), u) - cum.begin());
        const std::size_t face = std::min(fi, mesh.faces.size() - 1);
        const double r1 = rng.uniform(), r2 = rng.uniform();
        const double sq = std::sqrt(r1);
        const std::array<double, 3> b = {1.0 - sq, sq * (1.0 - r2), sq * r2};
        const Face& f = mesh.faces[face];
        s.face_index[i] = static_cast<uint32_t>(face);
        s.barycentric[i] = b;
        s.positions[0][i] = barycentric_point(b, mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
        s.normals[0][i] = face_normal(mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
    }
    return s;
}

// Transport samples across all frames of a corresponding sequence. Normals are
// recomputed from the deformed geometry of the owning face.
inline SurfaceSampleSet transport_samples(const SurfaceSampleSet& samples, const MeshSequence& seq) {
    seq.validate();
    for (uint32_t fi : samples.face_index)
        MESH4D_CHECK(fi < seq.faces.size(), "transport_samples: face index out of range");

    SurfaceSampleSet out;
    out.face_index = samples.face_index;
    out.barycentric = samples.barycentric;
    const std::size_t T = seq.frame_count();
    const std::size_t M = samples.count();
    out.positions.assign(T, std::vector<Vec3>(M));
    out.normals.assign(T, std::vector<Vec3>(M));
    for (std::size_t t = 0; t < T; ++t) {
        const auto& verts = seq.frames[t];
        for (std::size_t i = 0; i < M; ++i) {
            const Face& f = seq.faces[samples.face_index[i]];
            out.positions[t][i] = barycentric_point(samples.barycentric[i], verts[f[0]], verts[f[1]], verts[f[2]]);
            out.normals[t][i] = face_normal(verts[f[0]], verts[f[1]], verts[f[2]]);
        }
    }
    return out;
}

inline MeshSequence apply_deformation(const TriMesh& mesh, const DeformationField& field) {
    MESH4D_CHECK(!field.displacements.empty(), "apply_deformation: empty field");
    MeshSequence seq;
    seq.faces = mesh.faces;
    seq.frames.resize(field.frame_count());
    for (std::size_t t = 0; t < field.frame_count(); ++t) {
        MESH4D_CHECK(field.displacements[t].size() == mesh.vertices.size(),
                     "apply_deformation: displacement row count mismatch");
        auto& fr = seq.frames[t];
        fr.resize(mesh.vertices.size());
        for (std::size_t i = 0; i < mesh.vertices.size(); ++i) fr[i] = mesh.vertices[i] + field.displacements[t][i];
    }
    return seq;
}

struct VertexNormals {
    std::vector<Vec3> normals;
    std::vector<std::size_t> isolated;  // vertices with no incident (non-degenerate) face
};

// Area-weighted vertex normals (unnormalized cross products accumulate in face
// order, which bakes in the area weighting).
inline VertexNormals vertex_normals(const TriMesh& mesh) {
    mesh.validate();
    VertexNormals out;
    out.normals.assign(mesh.vertices.size(), Vec3{});
    for (const Face& f : mesh.faces) {
        const Vec3 n = (mesh.vertices[f[1]] - mesh.vertices[f[0]]).cross(mesh.vertices[f[2]] - mesh.vertices[f[0]]);
        out.normals[f[0]] += n;
        out.normals[f[1]] += n;
        out.normals[f[2]] += n;
    }
    for (std::size_t i = 0; i < out.normals.size(); ++i) {
        const double n = out.normals[i].norm();
        if (n > 1e-20)
            out.normals[i] = out.normals[i] / n;
        else {
            out.normals[i] = Vec3{};
            out.isolated.push_back(i);
        }
    }
    return out;
}

// Greedy max-min selection; ties broken by lowest index; output in selection order.
inline std::vector<std::size_t> farthest_point_sampling(const std::vector<Vec3>& points, std::size_t count,
                                                        std::size_t start) {
    MESH4D_CHECK(count <= points.size(), "farthest_point_sampling: count exceeds point count");
    MESH4D_CHECK(start < points.size(), "farthest_point_sampling: start index out of range");
    std::vector<std::size_t> picked;
    picked.reserve(count);
    if (count == 0) return picked;
    picked.push_back(start);
    std::vector<double> dist(points.size(), std::numeric_limits<double>::infinity());
    for (std::size_t k = 1; k < count; ++k) {
        const Vec3& last = points[picked.back()];
        std::size_t best = 0;
        double best_d = -1.0;
        for (std::size_t i = 0; i < points.size(); ++i) {
            const double d = (points[i] - last).norm2();
            if (d < dist[i]) dist[i] = d;
            if (dist[i] > best_d) {
                best_d = dist[i];
                best = i;
            }
        }
        picked.push_back(best);
    }
    return picked;
}

struct NormalizeResult {
    MeshSequence seq;
    double scale = 1.0;
    Vec3 center;
};

// Center the frame-1 bounding box at the origin and scale it to fit
// [-0.9, 0.9]^3; the same transform is applied to every frame.
inline NormalizeResult normalize_sequence(const MeshSequence& seq) {
    seq.validate();
    Vec3 lo = seq.frames[0][0], hi = seq.frames[0][0];
    for (const Vec3& v : seq.frames[0]) {
        lo = {std::min(lo.x, v.x), std::min(lo.y, v.y), std::min(lo.z, v.z)};
        hi = {std::max(hi.x, v.x), std::max(hi.y, v.y), std::max(hi.z, v.z)};
    }
    const double extent = std::max({hi.x - lo.x, hi.y - lo.y, hi.z - lo.z});
    MESH4D_CHECK(extent > 1e-12, "normalize_sequence: zero-extent bounding box");
    NormalizeResult r;
    r.center = (lo + hi) * 0.5;
    r.scale = 1.8 / extent;
    r.seq.faces = seq.faces;
    r.seq.frames.resize(seq.frame_count());
    for (std::size_t t = 0; t < seq.frame_count(); ++t) {
        r.seq.frames[t].resize(seq.frames[t].size());
        for (std::size_t i = 0; i < seq.frames[t].size(); ++i)
            r.seq.frames[t][i] = (seq.frames[t][i] - r.center) * r.scale;
    }
    return r;
}

inline double bbox_diagonal(const TriMesh& mesh) {
    Vec3 lo = mesh.vertices[0], hi = mesh.vertices[0];
    for (const Vec3& v : mesh.vertices) {
        lo = {std::min(lo.x, v.x), std::min(lo.y, v.y), std::min(lo.z, v.z)};
        hi = {std::max(hi.x, v.x), std::max(hi.y, v.y), std::max(hi.z, v.z)};
    }
    return (hi - lo).norm();
}

}  // namespace mesh4d
