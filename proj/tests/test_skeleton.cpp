#include <catch2/catch_amalgamated.hpp>

#include "mesh4d/skeleton.hpp"
#include "testutil.hpp"

using namespace mesh4d;
using Catch::Approx;

namespace {

SkinningWeights random_weights(std::size_t points, std::size_t active, std::size_t max_bones, uint64_t seed) {
    Rng rng(seed);
    SkinningWeights w;
    w.weights.assign(points, std::vector<double>(max_bones, 0.0));
    for (auto& row : w.weights) {
        double sum = 0.0;
        for (std::size_t b = 0; b < active; ++b) {
            row[b] = rng.uniform();
            sum += row[b];
        }
        for (std::size_t b = 0; b < active; ++b) row[b] /= sum;
    }
    return w;
}

SkinningWeights one_hot(std::initializer_list<std::size_t> bones, std::size_t max_bones) {
    SkinningWeights w;
    for (std::size_t b : bones) {
        std::vector<double> row(max_bones, 0.0);
        row[b] = 1.0;
        w.weights.push_back(row);
    }
    return w;
}

}  // namespace

TEST_CASE("interpolate_sample_weights") {
    const TriMesh tri = testutil::single_triangle();
    SkinningWeights vw = one_hot({0, 1, 2}, 8);

    SurfaceSampleSet samples;
    samples.face_index = {0, 0};
    samples.barycentric = {{1.0, 0.0, 0.0}, {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0}};
    samples.positions = {{{0, 0, 0}, {1.0 / 3.0, 1.0 / 3.0, 0}}};
    samples.normals = {{{0, 0, 1}, {0, 0, 1}}};

    const SkinningWeights sw = interpolate_sample_weights(vw, samples, tri.faces);
    SECTION("sample at a vertex copies that vertex row") {
        CHECK(sw.weights[0][0] == Approx(1.0));
        CHECK(sw.weights[0][1] == Approx(0.0));
    }
    SECTION("centroid of a one-hot face blends equally") {
        CHECK(sw.weights[1][0] == Approx(1.0 / 3.0));
        CHECK(sw.weights[1][1] == Approx(1.0 / 3.0));
        CHECK(sw.weights[1][2] == Approx(1.0 / 3.0));
    }
    SECTION("random weights renormalize to 1") {
        SkinningWeights rvw = random_weights(3, 5, 8, 77);
        const SkinningWeights rsw = interpolate_sample_weights(rvw, samples, tri.faces);
        for (const auto& row : rsw.weights) {
            double sum = 0.0;
            for (double x : row) sum += x;
            CHECK(sum == Approx(1.0).margin(1e-6));
        }
    }
}

TEST_CASE("point_pair_mask basics") {
    SECTION("same bone, one-hot, tau 0.5: open") {
        const SkinningWeights w = one_hot({2, 2}, 8);
        const AttentionMask m = point_pair_mask(w, 0.5);
        CHECK_FALSE(m.masked(0, 1));
        CHECK_FALSE(m.masked(1, 0));
    }
    SECTION("different bones, tau 0: masked (dot product not strictly above)") {
        const SkinningWeights w = one_hot({0, 1}, 8);
        const AttentionMask m = point_pair_mask(w, 0.0);
        CHECK(m.masked(0, 1));
        CHECK(m.masked(1, 0));
        CHECK_FALSE(m.masked(0, 0));
    }
}

TEST_CASE("point_pair_mask matches a brute-force double loop") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        const SkinningWeights w = random_weights(32, 6, 16, 100 + seed);
        const double tau = 0.02 + 0.01 * static_cast<double>(seed % 5);
        const AttentionMask m = point_pair_mask(w, tau);
        for (std::size_t i = 0; i < 32; ++i)
            for (std::size_t j = 0; j < 32; ++j) {
                double dot = 0.0;
                for (std::size_t b = 0; b < 16; ++b) dot += w.weights[i][b] * w.weights[j][b];
                CHECK(m.masked(i, j) == !(dot > tau));
            }
    }
}

TEST_CASE("point_pair_mask properties") {
    const SkinningWeights w = random_weights(24, 5, 12, 9);
    SECTION("symmetry") {
        const AttentionMask m = point_pair_mask(w, 0.05);
        for (std::size_t i = 0; i < 24; ++i)
            for (std::size_t j = 0; j < 24; ++j) CHECK(m.masked(i, j) == m.masked(j, i));
    }
    SECTION("diagonal open whenever the squared row norm exceeds tau") {
        const AttentionMask m = point_pair_mask(w, 0.05);
        for (std::size_t i = 0; i < 24; ++i) {
            double n2 = 0.0;
            for (double x : w.weights[i]) n2 += x * x;
            if (n2 > 0.05) CHECK_FALSE(m.masked(i, i));
        }
    }
    SECTION("raising tau only adds masked entries") {
        const AttentionMask lo = point_pair_mask(w, 0.03);
        const AttentionMask hi = point_pair_mask(w, 0.2);
        for (std::size_t i = 0; i < lo.values.size(); ++i)
            if (lo.values[i] != 0.0) CHECK(hi.values[i] != 0.0);
    }
}

TEST_CASE("point_bone_mask") {
    SECTION("one-hot weights, tau 0.5: exactly one open bone per point") {
        const SkinningWeights w = one_hot({0, 3, 7}, 8);
        const AttentionMask m = point_bone_mask(w, 0.5);
        for (std::size_t i = 0; i < 3; ++i) {
            std::size_t open = 0;
            for (std::size_t b = 0; b < 8; ++b) open += m.masked(i, b) ? 0 : 1;
            CHECK(open == 1);
        }
        CHECK_FALSE(m.masked(1, 3));
    }
    SECTION("inactive zero columns always masked for tau >= 0") {
        const SkinningWeights w = random_weights(10, 4, 12, 3);
        for (double tau : {0.0, 0.05, 0.3}) {
            const AttentionMask m = point_bone_mask(w, tau);
            for (std::size_t i = 0; i < 10; ++i)
                for (std::size_t b = 4; b < 12; ++b) CHECK(m.masked(i, b));
        }
    }
    SECTION("matches a brute-force threshold scan") {
        for (uint64_t seed = 0; seed < 20; ++seed) {
            const SkinningWeights w = random_weights(16, 5, 10, 500 + seed);
            const double tau = 0.01 * static_cast<double>(1 + seed % 8);
            const AttentionMask m = point_bone_mask(w, tau);
            for (std::size_t i = 0; i < 16; ++i)
                for (std::size_t b = 0; b < 10; ++b) CHECK(m.masked(i, b) == !(w.weights[i][b] > tau));
        }
    }
    SECTION("fully-masked rows reported and fallback opens the strongest bone") {
        SkinningWeights w;
        w.weights = {{0.5, 0.5, 0, 0}, {0.2, 0.3, 0.5, 0}};
        AttentionMask m = point_bone_mask(w, 0.9);
        REQUIRE(m.fully_masked_rows.size() == 2);
        apply_strongest_bone_fallback(m, w);
        CHECK(m.fully_masked_rows.empty());
        CHECK_FALSE(m.masked(0, 0));  // ties break to the lowest index
        CHECK(m.masked(0, 1));
        CHECK_FALSE(m.masked(1, 2));
    }
}

TEST_CASE("skinning weight validation") {
    SkinningWeights w = random_weights(6, 3, 8, 21);
    CHECK_NOTHROW(w.validate(3));
    w.weights[2][5] = 0.1;  // inactive column
    CHECK_THROWS_AS(w.validate(3), ValidationError);
}
