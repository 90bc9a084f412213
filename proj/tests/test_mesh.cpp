#include <catch2/catch_amalgamated.hpp>

#include "mesh4d/mesh.hpp"
#include "testutil.hpp"

using namespace mesh4d;
using Catch::Approx;

TEST_CASE("barycentric coordinates: canonical points") {
    const Vec3 a{0, 0, 0}, b{2, 0, 0}, c{0, 3, 0};
    SECTION("centroid") {
        const auto w = barycentric_coordinates((a + b + c) / 3.0, a, b, c);
        CHECK(w[0] == Approx(1.0 / 3.0).margin(1e-12));
        CHECK(w[1] == Approx(1.0 / 3.0).margin(1e-12));
        CHECK(w[2] == Approx(1.0 / 3.0).margin(1e-12));
    }
    SECTION("vertex 0") {
        const auto w = barycentric_coordinates(a, a, b, c);
        CHECK(w[0] == Approx(1.0).margin(1e-12));
        CHECK(w[1] == Approx(0.0).margin(1e-12));
        CHECK(w[2] == Approx(0.0).margin(1e-12));
    }
    SECTION("edge midpoint of (v1, v2)") {
        const auto w = barycentric_coordinates((b + c) * 0.5, a, b, c);
        CHECK(w[0] == Approx(0.0).margin(1e-12));
        CHECK(w[1] == Approx(0.5).margin(1e-12));
        CHECK(w[2] == Approx(0.5).margin(1e-12));
    }
    SECTION("degenerate triangle rejected") {
        CHECK_THROWS_AS(barycentric_coordinates(a, a, a, c), ValidationError);
    }
}

TEST_CASE("barycentric reconstruction is an identity on sampled points") {
    Rng rng(99);
    for (int trial = 0; trial < 50; ++trial) {
        Vec3 a{rng.normal(), rng.normal(), rng.normal()};
        Vec3 b{rng.normal(), rng.normal(), rng.normal()};
        Vec3 c{rng.normal(), rng.normal(), rng.normal()};
        if (face_area(a, b, c) < 1e-3) continue;
        const double u = rng.uniform(), v = rng.uniform() * (1.0 - u);
        const Vec3 p = a * (1.0 - u - v) + b * u + c * v;
        const auto w = barycentric_coordinates(p, a, b, c);
        const Vec3 rec = barycentric_point(w, a, b, c);
        CHECK((rec - p).norm() < 1e-6);
        CHECK(w[0] + w[1] + w[2] == Approx(1.0).margin(1e-9));
    }
}

TEST_CASE("sample_surface: single triangle stays on the simplex") {
    const TriMesh tri = testutil::single_triangle();
    const SurfaceSampleSet s = sample_surface(tri, 100, 7);
    REQUIRE(s.count() == 100);
    for (std::size_t i = 0; i < s.count(); ++i) {
        const auto& b = s.barycentric[i];
        CHECK(b[0] >= 0.0);
        CHECK(b[1] >= 0.0);
        CHECK(b[2] >= 0.0);
        CHECK(b[0] + b[1] + b[2] == Approx(1.0).margin(1e-9));
        CHECK(s.positions[0][i].z == 0.0);
        CHECK(s.positions[0][i].x >= -1e-12);
        CHECK(s.positions[0][i].y >= -1e-12);
        CHECK(s.positions[0][i].x + s.positions[0][i].y <= 1.0 + 1e-9);
    }
}

TEST_CASE("sample_surface: area-weighted face frequencies pass chi-square") {
    // two triangles with 3:1 area ratio
    TriMesh m;
    m.vertices = {{0, 0, 0}, {3, 0, 0}, {0, 2, 0}, {4, 0, 0}, {5, 0, 0}, {4, 2, 0}};
    m.faces = {{0, 1, 2}, {3, 4, 5}};
    REQUIRE(face_area(m.vertices[0], m.vertices[1], m.vertices[2]) ==
            Approx(3.0 * face_area(m.vertices[3], m.vertices[4], m.vertices[5])));
    for (uint64_t seed : {1, 2, 3, 4, 5}) {
        const SurfaceSampleSet s = sample_surface(m, 4000, seed);
        std::size_t n0 = 0;
        for (uint32_t fi : s.face_index) n0 += fi == 0 ? 1 : 0;
        const double e0 = 3000.0, e1 = 1000.0;
        const double chi2 = (n0 - e0) * (n0 - e0) / e0 + (4000.0 - n0 - e1) * (4000.0 - n0 - e1) / e1;
        CHECK(chi2 < 6.635);  // p > 0.01 with 1 dof
    }
}

TEST_CASE("sample_surface: mean of uniform samples on a unit square") {
    TriMesh m;
    m.vertices = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0}};
    m.faces = {{0, 1, 2}, {0, 2, 3}};
    const SurfaceSampleSet s = sample_surface(m, 10000, 11);
    Vec3 mean{};
    for (const Vec3& p : s.positions[0]) mean += p;
    mean = mean / 10000.0;
    CHECK(std::abs(mean.x - 0.5) < 0.02);
    CHECK(std::abs(mean.y - 0.5) < 0.02);
    CHECK(std::abs(mean.z) < 1e-12);
}

TEST_CASE("sample_surface: degenerate mesh rejected") {
    TriMesh m;
    m.vertices = {{0, 0, 0}, {1e-9, 0, 0}, {0, 1e-9, 0}};
    m.faces = {{0, 1, 2}};
    CHECK_THROWS_AS(sample_surface(m, 10, 1), ValidationError);
}

TEST_CASE("sample_surface is deterministic per seed") {
    const TriMesh cube = testutil::unit_cube();
    const SurfaceSampleSet a = sample_surface(cube, 500, 42);
    const SurfaceSampleSet b = sample_surface(cube, 500, 42);
    REQUIRE(a.face_index == b.face_index);
    for (std::size_t i = 0; i < a.count(); ++i) {
        CHECK(a.barycentric[i] == b.barycentric[i]);
    }
}

TEST_CASE("transport_samples: identity, translation, rotation") {
    const TriMesh cube = testutil::unit_cube();
    const SurfaceSampleSet base = sample_surface(cube, 200, 3);

    SECTION("identity sequence reproduces frame-1 positions bit-identically") {
        MeshSequence seq;
        seq.faces = cube.faces;
        seq.frames = {cube.vertices, cube.vertices, cube.vertices};
        const SurfaceSampleSet moved = transport_samples(base, seq);
        for (std::size_t t = 0; t < 3; ++t)
            for (std::size_t i = 0; i < moved.count(); ++i) {
                CHECK(moved.positions[t][i].x == base.positions[0][i].x);
                CHECK(moved.positions[t][i].y == base.positions[0][i].y);
                CHECK(moved.positions[t][i].z == base.positions[0][i].z);
            }
    }
    SECTION("translated frame transports exactly") {
        MeshSequence seq;
        seq.faces = cube.faces;
        seq.frames = {cube.vertices, testutil::translated(cube, {1, 0, 0}).vertices};
        const SurfaceSampleSet moved = transport_samples(base, seq);
        for (std::size_t i = 0; i < moved.count(); ++i) {
            CHECK(moved.positions[1][i].x == Approx(moved.positions[0][i].x + 1.0).margin(1e-12));
            CHECK(moved.positions[1][i].y == Approx(moved.positions[0][i].y).margin(1e-12));
        }
    }
    SECTION("rotation rotates the recomputed normals") {
        const Mat3 rot = Mat3::rotation({0, 0, 1}, M_PI / 2.0);
        TriMesh rotated = cube;
        for (Vec3& v : rotated.vertices) v = rot * v;
        MeshSequence seq;
        seq.faces = cube.faces;
        seq.frames = {cube.vertices, rotated.vertices};
        const SurfaceSampleSet moved = transport_samples(base, seq);
        for (std::size_t i = 0; i < moved.count(); ++i) {
            const Vec3 expect = rot * moved.normals[0][i];
            CHECK((moved.normals[1][i] - expect).norm() < 1e-6);
        }
    }
}

TEST_CASE("apply_deformation") {
    const TriMesh cube = testutil::unit_cube();
    SECTION("zero field keeps all frames identical") {
        DeformationField f;
        f.displacements.assign(4, std::vector<Vec3>(cube.vertex_count(), Vec3{}));
        const MeshSequence seq = apply_deformation(cube, f);
        REQUIRE(seq.frame_count() == 4);
        for (const auto& fr : seq.frames)
            for (std::size_t i = 0; i < fr.size(); ++i) CHECK((fr[i] - cube.vertices[i]).norm() == 0.0);
        CHECK(seq.faces == cube.faces);
    }
    SECTION("constant displacement shifts one frame") {
        DeformationField f;
        f.displacements.assign(3, std::vector<Vec3>(cube.vertex_count(), Vec3{}));
        for (Vec3& d : f.displacements[2]) d = {0, 1, 0};
        const MeshSequence seq = apply_deformation(cube, f);
        for (std::size_t i = 0; i < cube.vertex_count(); ++i)
            CHECK((seq.frames[2][i] - (cube.vertices[i] + Vec3{0, 1, 0})).norm() == 0.0);
    }
    SECTION("subtract-then-apply roundtrip is bit-identical") {
        Rng rng(5);
        MeshSequence orig;
        orig.faces = cube.faces;
        for (int t = 0; t < 3; ++t) {
            std::vector<Vec3> fr = cube.vertices;
            if (t > 0)
                for (Vec3& v : fr) v += Vec3{rng.normal() * 0.1, rng.normal() * 0.1, rng.normal() * 0.1};
            orig.frames.push_back(fr);
        }
        DeformationField f;
        f.displacements.assign(orig.frame_count(), std::vector<Vec3>(cube.vertex_count()));
        for (std::size_t t = 0; t < orig.frame_count(); ++t)
            for (std::size_t i = 0; i < cube.vertex_count(); ++i)
                f.displacements[t][i] = orig.frames[t][i] - orig.frames[0][i];
        TriMesh canon{orig.frames[0], orig.faces};
        const MeshSequence rebuilt = apply_deformation(canon, f);
        for (std::size_t t = 0; t < orig.frame_count(); ++t)
            for (std::size_t i = 0; i < cube.vertex_count(); ++i) {
                CHECK(rebuilt.frames[t][i].x == orig.frames[t][i].x);
                CHECK(rebuilt.frames[t][i].y == orig.frames[t][i].y);
                CHECK(rebuilt.frames[t][i].z == orig.frames[t][i].z);
            }
    }
    SECTION("shape mismatch rejected") {
        DeformationField f;
        f.displacements.assign(2, std::vector<Vec3>(3, Vec3{}));
        CHECK_THROWS_AS(apply_deformation(cube, f), ValidationError);
    }
}

TEST_CASE("vertex_normals") {
    SECTION("cube corner gets the symmetric diagonal normal") {
        const TriMesh cube = testutil::unit_cube();
        const VertexNormals vn = vertex_normals(cube);
        // analytic area-weighted oracle at vertex 6 = (1,1,1)
        Vec3 acc{};
        for (const Face& f : cube.faces)
            if (f[0] == 6 || f[1] == 6 || f[2] == 6)
                acc += (cube.vertices[f[1]] - cube.vertices[f[0]]).cross(cube.vertices[f[2]] - cube.vertices[f[0]]);
        const Vec3 expect = acc.normalized();
        CHECK((vn.normals[6] - expect).norm() < 1e-12);
        CHECK((vn.normals[6] - Vec3{1, 1, 1}.normalized()).norm() < 1e-9);
    }
    SECTION("flat square normals all point up") {
        TriMesh m;
        m.vertices = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0}};
        m.faces = {{0, 1, 2}, {0, 2, 3}};
        const VertexNormals vn = vertex_normals(m);
        for (const Vec3& n : vn.normals) CHECK((n - Vec3{0, 0, 1}).norm() < 1e-12);
    }
    SECTION("icosphere normals are nearly radial") {
        const TriMesh sphere = testutil::icosphere(2);
        const VertexNormals vn = vertex_normals(sphere);
        for (std::size_t i = 0; i < sphere.vertex_count(); ++i) {
            const double cosang = vn.normals[i].dot(sphere.vertices[i].normalized());
            CHECK(std::acos(std::clamp(cosang, -1.0, 1.0)) < 2.0 * M_PI / 180.0);
        }
        CHECK(vn.isolated.empty());
    }
    SECTION("isolated vertex flagged with zero normal") {
        TriMesh m = testutil::single_triangle();
        m.vertices.push_back({5, 5, 5});
        const VertexNormals vn = vertex_normals(m);
        REQUIRE(vn.isolated.size() == 1);
        CHECK(vn.isolated[0] == 3);
        CHECK(vn.normals[3].norm() == 0.0);
    }
}

namespace {

// O(M*N) reference: recompute the min distance to the selected set per step.
std::vector<std::size_t> fps_brute(const std::vector<Vec3>& pts, std::size_t count, std::size_t start) {
    std::vector<std::size_t> picked{start};
    while (picked.size() < count) {
        std::size_t best = 0;
        double best_d = -1.0;
        for (std::size_t i = 0; i < pts.size(); ++i) {
            double dmin = std::numeric_limits<double>::infinity();
            for (std::size_t j : picked) dmin = std::min(dmin, (pts[i] - pts[j]).norm2());
            if (dmin > best_d) {
                best_d = dmin;
                best = i;
            }
        }
        picked.push_back(best);
    }
    return picked;
}

}  // namespace

TEST_CASE("farthest_point_sampling") {
    SECTION("unit square corners: opposite corner picked second") {
        const std::vector<Vec3> pts = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0}};
        const auto picked = farthest_point_sampling(pts, 2, 0);
        REQUIRE(picked.size() == 2);
        CHECK(picked[0] == 0);
        CHECK(picked[1] == 2);
    }
    SECTION("N = M yields a permutation") {
        Rng rng(17);
        std::vector<Vec3> pts(30);
        for (Vec3& p : pts) p = {rng.normal(), rng.normal(), rng.normal()};
        const auto picked = farthest_point_sampling(pts, pts.size(), 4);
        std::vector<bool> seen(pts.size(), false);
        for (std::size_t i : picked) seen[i] = true;
        for (bool s : seen) CHECK(s);
    }
    SECTION("matches the brute-force reference exactly on 20 random instances") {
        for (uint64_t seed = 0; seed < 20; ++seed) {
            Rng rng(1000 + seed);
            std::vector<Vec3> pts(200);
            for (Vec3& p : pts) p = {rng.normal(), rng.normal(), rng.normal()};
            const std::size_t start = rng.uniform_index(pts.size());
            CHECK(farthest_point_sampling(pts, 50, start) == fps_brute(pts, 50, start));
        }
    }
    SECTION("N > M rejected") {
        const std::vector<Vec3> pts = {{0, 0, 0}, {1, 0, 0}};
        CHECK_THROWS_AS(farthest_point_sampling(pts, 3, 0), ValidationError);
    }
}

TEST_CASE("normalize_sequence") {
    SECTION("already-normalized cube is a fixed point") {
        const TriMesh box = testutil::make_box({-0.9, -0.9, -0.9}, {0.9, 0.9, 0.9});
        MeshSequence seq;
        seq.faces = box.faces;
        seq.frames = {box.vertices};
        const NormalizeResult r = normalize_sequence(seq);
        CHECK(r.scale == Approx(1.0).margin(1e-9));
        CHECK(r.center.norm() < 1e-9);
    }
    SECTION("cube (0,0,0)-(2,2,2)") {
        const TriMesh box = testutil::make_box({0, 0, 0}, {2, 2, 2});
        MeshSequence seq;
        seq.faces = box.faces;
        seq.frames = {box.vertices, box.vertices};
        const NormalizeResult r = normalize_sequence(seq);
        CHECK(r.scale == Approx(0.9).margin(1e-12));
        CHECK((r.center - Vec3{1, 1, 1}).norm() < 1e-12);
    }
    SECTION("translation invariance of the output frames") {
        const TriMesh box = testutil::make_box({0, 0, 0}, {1, 2, 3});
        MeshSequence seq;
        seq.faces = box.faces;
        seq.frames = {box.vertices, testutil::translated(box, {0.3, 0, 0}).vertices};
        const NormalizeResult a = normalize_sequence(seq);
        MeshSequence moved = seq;
        for (auto& fr : moved.frames)
            for (Vec3& v : fr) v += Vec3{5, -2, 1};
        const NormalizeResult b = normalize_sequence(moved);
        for (std::size_t t = 0; t < 2; ++t)
            for (std::size_t i = 0; i < seq.vertex_count(); ++i)
                CHECK((a.seq.frames[t][i] - b.seq.frames[t][i]).norm() < 1e-12);
    }
    SECTION("zero-extent bounding box rejected") {
        MeshSequence seq;
        seq.faces = {{0, 1, 2}};
        seq.frames = {{{0, 0, 0}, {0, 0, 0}, {0, 0, 0}}};
        CHECK_THROWS_AS(normalize_sequence(seq), ValidationError);
    }
}
