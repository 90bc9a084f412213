#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mesh4d/common.hpp"
#include "mesh4d/mesh.hpp"
#include "mesh4d/skeleton.hpp"

namespace mesh4d {

// Fixed frontal orthographic view looking down -z; projects (x, y).
struct OrthoCamera {
    Vec3 center;
    double half_extent = 1.0;
};

struct JointCurve {
    double amplitude = 0.0;  // radians, |angle| kept <= 75 deg
    double frequency = 1.0;  // cycles over the clip
    double phase = 0.0;
};

struct RigSpec {
    std::size_t bone_count = 2;
    std::vector<double> bone_lengths;
    double tube_radius = 0.08;
    std::size_t radial_segments = 10;
    std::size_t axial_segments_per_bone = 6;
    std::vector<JointCurve> joint_curves;

    void validate() const {
        MESH4D_CHECK(bone_count >= 1 && bone_count <= kDefaultMaxBones, "RigSpec: bad bone count");
        MESH4D_CHECK(bone_lengths.size() == bone_count, "RigSpec: bone length count mismatch");
        MESH4D_CHECK(joint_curves.size() == bone_count, "RigSpec: joint curve count mismatch");
        MESH4D_CHECK(radial_segments >= 3 && axial_segments_per_bone >= 1, "RigSpec: bad tessellation");
        for (const JointCurve& c : joint_curves)
            MESH4D_CHECK(std::abs(c.amplitude) <= 75.0 * M_PI / 180.0, "RigSpec: amplitude exceeds 75 deg");
    }
};

struct SynthSample {
    MeshSequence sequence;
    Skeleton skeleton;               // per-frame, padded to kDefaultMaxBones
    SkinningWeights vertex_weights;  // per vertex
    OrthoCamera camera;
    std::string id;
    std::vector<std::string> diagnostics;
};

struct RigidTransform {
    Mat3 rotation;
    Vec3 translation;
};

struct ChainRig {
    TriMesh rest_mesh;
    std::vector<Vec3> rest_joints;   // bone_count + 1
    SkinningWeights vertex_weights;  // padded to kDefaultMaxBones
    RigSpec spec;
};

namespace detail {

inline double point_segment_distance(const Vec3& p, const Vec3& a, const Vec3& b) {
    const Vec3 ab = b - a;
    const double len2 = ab.norm2();
    if (len2 < 1e-24) return (p - a).norm();
    const double t = std::clamp((p - a).dot(ab) / len2, 0.0, 1.0);
    return (p - (a + ab * t)).norm();
}

inline double signed_volume(const TriMesh& mesh) {
    double vol = 0.0;
    for (const Face& f : mesh.faces) {
        const Vec3 &a = mesh.vertices[f[0]], &b = mesh.vertices[f[1]], &c = mesh.vertices[f[2]];
        vol += a.dot(b.cross(c)) / 6.0;
    }
    return vol;
}

}  // namespace detail

// Capped tube along the rest bone chain with smooth distance-falloff skinning
// weights over the two nearest bone segments.
inline ChainRig gen_chain_rig(const RigSpec& spec, uint64_t seed) {
    spec.validate();
    (void)seed;  // geometry is fully determined by the spec; seed reserved for future jitter

    ChainRig rig;
    rig.spec = spec;

    double total_len = 0.0;
    rig.rest_joints.push_back(Vec3{0, 0, 0});
    for (std::size_t b = 0; b < spec.bone_count; ++b) {
        total_len += spec.bone_lengths[b];
        rig.rest_joints.push_back(Vec3{total_len, 0, 0});
    }
    const Vec3 offset{-total_len * 0.5, 0, 0};
    for (Vec3& j : rig.rest_joints) j += offset;

    const std::size_t R = spec.radial_segments;
    const std::size_t rings = spec.bone_count * spec.axial_segments_per_bone + 1;
    TriMesh& mesh = rig.rest_mesh;
    for (std::size_t i = 0; i < rings; ++i) {
        const std::size_t bone = std::min((i == 0 ? 0 : (i - 1) / spec.axial_segments_per_bone),
                                          spec.bone_count - 1);
        const std::size_t local = i - bone * spec.axial_segments_per_bone;
        const double x = rig.rest_joints[bone].x +
                         (rig.rest_joints[bone + 1].x - rig.rest_joints[bone].x) *
                             (static_cast<double>(local) / spec.axial_segments_per_bone);
        for (std::size_t k = 0; k < R; ++k) {
            const double phi = 2.0 * M_PI * static_cast<double>(k) / static_cast<double>(R);
            mesh.vertices.push_back(Vec3{x, spec.tube_radius * std::cos(phi), spec.tube_radius * std::sin(phi)});
        }
    }
    const uint32_t cap_front = static_cast<uint32_t>(mesh.vertices.size());
    mesh.vertices.push_back(rig.rest_joints.front());
    const uint32_t cap_back = static_cast<uint32_t>(mesh.vertices.size());
    mesh.vertices.push_back(rig.rest_joints.back());

    auto ring_vertex = [R](std::size_t ring, std::size_t k) {
        return static_cast<uint32_t>(ring * R + (k % R));
    };
    for (std::size_t i = 0; i + 1 < rings; ++i)
        for (std::size_t k = 0; k < R; ++k) {
            mesh.faces.push_back({ring_vertex(i, k), ring_vertex(i + 1, k), ring_vertex(i + 1, k + 1)});
            mesh.faces.push_back({ring_vertex(i, k), ring_vertex(i + 1, k + 1), ring_vertex(i, k + 1)});
        }
    for (std::size_t k = 0; k < R; ++k) {
        mesh.faces.push_back({cap_front, ring_vertex(0, k + 1), ring_vertex(0, k)});
        mesh.faces.push_back({cap_back, ring_vertex(rings - 1, k), ring_vertex(rings - 1, k + 1)});
    }
    if (detail::signed_volume(mesh) < 0.0)
        for (Face& f : mesh.faces) std::swap(f[1], f[2]);

    rig.vertex_weights.weights.assign(mesh.vertices.size(), std::vector<double>(kDefaultMaxBones, 0.0));
    for (std::size_t vi = 0; vi < mesh.vertices.size(); ++vi) {
        std::vector<std::pair<double, std::size_t>> dist;
        for (std::size_t b = 0; b < spec.bone_count; ++b)
            dist.emplace_back(
                detail::point_segment_distance(mesh.vertices[vi], rig.rest_joints[b], rig.rest_joints[b + 1]), b);
        std::sort(dist.begin(), dist.end());
        const std::size_t take = std::min<std::size_t>(2, dist.size());
        double sum = 0.0;
        for (std::size_t k = 0; k < take; ++k) {
            const double d = dist[k].first / spec.tube_radius;
            const double w = std::exp(-d * d);
            rig.vertex_weights.weights[vi][dist[k].second] = w;
            sum += w;
        }
        for (std::size_t k = 0; k < take; ++k) rig.vertex_weights.weights[vi][dist[k].second] /= sum;
    }
    return rig;
}

// v' = sum_b w_vb * (R_b v + t_b)
inline std::vector<Vec3> lbs_deform(const TriMesh& rest, const SkinningWeights& weights,
                                    const std::vector<RigidTransform>& bone_transforms) {
    MESH4D_CHECK(weights.count() == rest.vertices.size(), "lbs_deform: weight row count mismatch");
    std::vector<Vec3> out(rest.vertices.size());
    for (std::size_t vi = 0; vi < rest.vertices.size(); ++vi) {
        Vec3 acc{};
        for (std::size_t b = 0; b < bone_transforms.size(); ++b) {
            const double w = weights.weights[vi][b];
            if (w == 0.0) continue;
            acc += w * (bone_transforms[b].rotation * rest.vertices[vi] + bone_transforms[b].translation);
        }
        out[vi] = acc;
    }
    return out;
}

struct FkPose {
    std::vector<RigidTransform> bone_transforms;  // rest -> posed, per active bone
    std::vector<Vec3> joints;                     // posed joint positions, bone_count + 1
};

// Forward kinematics along the chain; joint b rotates about +z by its curve
// angle at normalized time tau.
inline FkPose forward_kinematics(const ChainRig& rig, double tau, double amplitude_scale = 1.0) {
    FkPose pose;
    Mat3 world = Mat3::identity();
    Vec3 p = rig.rest_joints[0];
    pose.joints.push_back(p);
    for (std::size_t b = 0; b < rig.spec.bone_count; ++b) {
        const JointCurve& c = rig.spec.joint_curves[b];
        const double angle =
            amplitude_scale * c.amplitude * std::sin(2.0 * M_PI * c.frequency * tau + c.phase);
        world = world * Mat3::rotation(Vec3{0, 0, 1}, angle);
        RigidTransform tr;
        tr.rotation = world;
        tr.translation = p - world * rig.rest_joints[b];
        pose.bone_transforms.push_back(tr);
        p = p + world * (rig.rest_joints[b + 1] - rig.rest_joints[b]);
        pose.joints.push_back(p);
    }
    return pose;
}

namespace detail {

inline bool chain_self_intersects(const FkPose& pose, const RigSpec& spec) {
    for (std::size_t i = 0; i + 2 < spec.bone_count; ++i)
        for (std::size_t j = i + 2; j < spec.bone_count; ++j) {
            const Vec3 ci = (pose.joints[i] + pose.joints[i + 1]) * 0.5;
            const Vec3 cj = (pose.joints[j] + pose.joints[j + 1]) * 0.5;
            const double ri = spec.bone_lengths[i] * 0.5 + spec.tube_radius;
            const double rj = spec.bone_lengths[j] * 0.5 + spec.tube_radius;
            if ((ci - cj).norm() < ri + rj) return true;
        }
    return false;
}

}  // namespace detail

// Evaluate the joint curves per frame, pose via FK + LBS, and record per-frame
// bone head/tail positions. Non-adjacent bone collisions (bounding-sphere
// heuristic) trigger a retry with damped amplitudes.
inline SynthSample animate(const ChainRig& rig, std::size_t total_frames, uint64_t seed,
                           const std::string& id = "sample") {
    MESH4D_CHECK(total_frames >= 2, "animate: need at least 2 frames");
    (void)seed;

    SynthSample out;
    out.id = id;

    double amp_scale = 1.0;
    for (int attempt = 0; attempt < 4; ++attempt) {
        bool collided = false;
        for (std::size_t f = 0; f < total_frames && !collided; ++f) {
            const double tau = static_cast<double>(f) / static_cast<double>(total_frames - 1);
            if (detail::chain_self_intersects(forward_kinematics(rig, tau, amp_scale), rig.spec)) collided = true;
        }
        if (!collided) break;
        amp_scale *= 0.75;
        out.diagnostics.push_back("self-intersection heuristic tripped; amplitudes damped to " +
                                  std::to_string(amp_scale));
    }

    out.sequence.faces = rig.rest_mesh.faces;
    out.skeleton.active_bones = rig.spec.bone_count;
    for (std::size_t f = 0; f < total_frames; ++f) {
        const double tau = static_cast<double>(f) / static_cast<double>(total_frames - 1);
        const FkPose pose = forward_kinematics(rig, tau, amp_scale);
        out.sequence.frames.push_back(lbs_deform(rig.rest_mesh, rig.vertex_weights, pose.bone_transforms));
        std::vector<Vec3> heads(kDefaultMaxBones), tails(kDefaultMaxBones);
        for (std::size_t b = 0; b < rig.spec.bone_count; ++b) {
            heads[b] = pose.joints[b];
            tails[b] = pose.joints[b + 1];
        }
        out.skeleton.heads.push_back(std::move(heads));
        out.skeleton.tails.push_back(std::move(tails));
    }
    out.vertex_weights = rig.vertex_weights;

    Vec3 lo = out.sequence.frames[0][0], hi = lo;
    for (const auto& fr : out.sequence.frames)
        for (const Vec3& v : fr) {
            lo = {std::min(lo.x, v.x), std::min(lo.y, v.y), std::min(lo.z, v.z)};
            hi = {std::max(hi.x, v.x), std::max(hi.y, v.y), std::max(hi.z, v.z)};
        }
    out.camera.center = (lo + hi) * 0.5;
    out.camera.half_extent = 0.5 * std::max(hi.x - lo.x, hi.y - lo.y) * 1.15;
    return out;
}

// Evenly strided T-frame subsequence; stride drawn uniformly from the strides
// in {1,2,3,4} that fit, start uniform over the valid range. Frame 1 of the
// subsequence becomes the canonical frame.
inline SynthSample subsample_frames(const SynthSample& sample, std::size_t T, uint64_t seed) {
    const std::size_t total = sample.sequence.frame_count();
    MESH4D_CHECK(T >= 1, "subsample_frames: T must be positive");
    std::vector<std::size_t> valid;
    for (std::size_t s = 1; s <= 4; ++s)
        if ((T - 1) * s + 1 <= total) valid.push_back(s);
    MESH4D_CHECK(!valid.empty(), "subsample_frames: sequence too short");

    Rng rng(seed);
    const std::size_t stride = valid[rng.uniform_index(valid.size())];
    const std::size_t span = (T - 1) * stride + 1;
    const std::size_t start = static_cast<std::size_t>(rng.uniform_index(total - span + 1));

    SynthSample out;
    out.id = sample.id;
    out.camera = sample.camera;
    out.sequence.faces = sample.sequence.faces;
    out.skeleton.active_bones = sample.skeleton.active_bones;
    out.vertex_weights = sample.vertex_weights;
    for (std::size_t k = 0; k < T; ++k) {
        const std::size_t f = start + k * stride;
        out.sequence.frames.push_back(sample.sequence.frames[f]);
        out.skeleton.heads.push_back(sample.skeleton.heads[f]);
        out.skeleton.tails.push_back(sample.skeleton.tails[f]);
    }
    return out;
}

// Insert `factor` linearly interpolated frames between each consecutive pair.
inline DeformationField interpolate_deformation(const DeformationField& field, std::size_t factor) {
    DeformationField out;
    const std::size_t T = field.frame_count();
    MESH4D_CHECK(T >= 1, "interpolate_deformation: empty field");
    for (std::size_t t = 0; t + 1 < T; ++t) {
        out.displacements.push_back(field.displacements[t]);
        for (std::size_t k = 1; k <= factor; ++k) {
            const double a = static_cast<double>(k) / static_cast<double>(factor + 1);
            std::vector<Vec3> mid(field.displacements[t].size());
            for (std::size_t i = 0; i < mid.size(); ++i)
                mid[i] = field.displacements[t][i] * (1.0 - a) + field.displacements[t + 1][i] * a;
            out.displacements.push_back(std::move(mid));
        }
    }
    out.displacements.push_back(field.displacements.back());
    return out;
}

// Orthographic binary rasterization; a pixel is set iff its center is covered
// by any triangle (front- or back-facing).
inline std::vector<uint8_t> render_silhouette(const TriMesh& mesh, const OrthoCamera& camera,
                                              std::size_t resolution) {
    MESH4D_CHECK(resolution >= 1, "render_silhouette: bad resolution");
    const double res = static_cast<double>(resolution);
    auto to_px = [&](const Vec3& p) {
        const double u = ((p.x - camera.center.x) / (2.0 * camera.half_extent) + 0.5) * res;
        const double v = (0.5 - (p.y - camera.center.y) / (2.0 * camera.half_extent)) * res;
        return std::pair<double, double>(u, v);
    };
    for (const Vec3& p : mesh.vertices) {
        auto [u, v] = to_px(p);
        MESH4D_CHECK(u >= -0.5 && u <= res + 0.5 && v >= -0.5 && v <= res + 0.5,
                     "render_silhouette: mesh outside camera frustum");
    }

    std::vector<uint8_t> img(resolution * resolution, 0);
    for (const Face& f : mesh.faces) {
        auto [u0, v0] = to_px(mesh.vertices[f[0]]);
        auto [u1, v1] = to_px(mesh.vertices[f[1]]);
        auto [u2, v2] = to_px(mesh.vertices[f[2]]);
        const double area2 = (u1 - u0) * (v2 - v0) - (u2 - u0) * (v1 - v0);
        if (std::abs(area2) < 1e-12) continue;
        const long xmin = std::max(0L, static_cast<long>(std::floor(std::min({u0, u1, u2}))));
        const long xmax = std::min(static_cast<long>(resolution) - 1, static_cast<long>(std::ceil(std::max({u0, u1, u2}))));
        const long ymin = std::max(0L, static_cast<long>(std::floor(std::min({v0, v1, v2}))));
        const long ymax = std::min(static_cast<long>(resolution) - 1, static_cast<long>(std::ceil(std::max({v0, v1, v2}))));
        for (long y = ymin; y <= ymax; ++y)
            for (long x = xmin; x <= xmax; ++x) {
                const double px = x + 0.5, py = y + 0.5;
                const double w0 = ((u1 - px) * (v2 - py) - (u2 - px) * (v1 - py)) / area2;
                const double w1 = ((u2 - px) * (v0 - py) - (u0 - px) * (v2 - py)) / area2;
                const double w2 = 1.0 - w0 - w1;
                if (w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0)
                    img[static_cast<std::size_t>(y) * resolution + static_cast<std::size_t>(x)] = 1;
            }
    }
    return img;
}

// Deterministic toy-benchmark rig: 2-5 bones, varied lengths and curves.
inline RigSpec random_rig_spec(Rng& rng) {
    RigSpec spec;
    spec.bone_count = 2 + rng.uniform_index(4);
    spec.tube_radius = rng.uniform(0.06, 0.10);
    spec.radial_segments = 10;
    spec.axial_segments_per_bone = 6;
    for (std::size_t b = 0; b < spec.bone_count; ++b) {
        spec.bone_lengths.push_back(rng.uniform(0.25, 0.45));
        JointCurve c;
        c.amplitude = rng.uniform(20.0, 60.0) * M_PI / 180.0;
        c.frequency = rng.uniform(0.5, 1.5);
        c.phase = rng.uniform(0.0, 2.0 * M_PI);
        spec.joint_curves.push_back(c);
    }
    return spec;
}

}  // namespace mesh4d
