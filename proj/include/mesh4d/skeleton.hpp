#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "mesh4d/common.hpp"
#include "mesh4d/mesh.hpp"

namespace mesh4d {

inline constexpr std::size_t kDefaultMaxBones = 64;

// Per-frame bone head/tail positions padded with zero rows up to max_bones.
struct Skeleton {
    std::vector<std::vector<Vec3>> heads;  // T arrays of max_bones
    std::vector<std::vector<Vec3>> tails;  // T arrays of max_bones
    std::size_t active_bones = 0;

    std::size_t frame_count() const { return heads.size(); }
    std::size_t max_bones() const { return heads.empty() ? 0 : heads[0].size(); }

    void validate() const {
        MESH4D_CHECK(heads.size() == tails.size(), "Skeleton: head/tail frame counts differ");
        for (std::size_t t = 0; t < heads.size(); ++t) {
            MESH4D_CHECK(heads[t].size() == max_bones() && tails[t].size() == max_bones(),
                         "Skeleton: inconsistent bone padding");
            MESH4D_CHECK(active_bones <= max_bones(), "Skeleton: active_bones exceeds padding");
            for (std::size_t b = 0; b < max_bones(); ++b) {
                MESH4D_CHECK(heads[t][b].finite() && tails[t][b].finite(), "Skeleton: non-finite bone");
                if (b < active_bones)
                    MESH4D_CHECK((tails[t][b] - heads[t][b]).norm() > 1e-9, "Skeleton: zero-length active bone");
                else
                    MESH4D_CHECK(heads[t][b].norm() == 0.0 && tails[t][b].norm() == 0.0,
                                 "Skeleton: inactive bone row not zero");
            }
        }
    }
};

// M x max_bones convex influence weights; inactive bone columns are all zero.
struct SkinningWeights {
    std::vector<std::vector<double>> weights;  // M rows of max_bones

    std::size_t count() const { return weights.size(); }
    std::size_t max_bones() const { return weights.empty() ? 0 : weights[0].size(); }

    void validate(std::size_t active_bones) const {
        for (const auto& row : weights) {
            MESH4D_CHECK(row.size() == max_bones(), "SkinningWeights: ragged rows");
            double sum = 0.0;
            for (std::size_t b = 0; b < row.size(); ++b) {
                MESH4D_CHECK(row[b] >= 0.0 && row[b] <= 1.0, "SkinningWeights: entry outside [0,1]");
                if (b >= active_bones) MESH4D_CHECK(row[b] == 0.0, "SkinningWeights: inactive bone has weight");
                sum += row[b];
            }
            MESH4D_CHECK(std::abs(sum - 1.0) < 1e-4, "SkinningWeights: row does not sum to 1");
        }
    }
};

// Additive attention bias: every entry is either 0 (open) or the masked
// sentinel standing in for -inf.
struct AttentionMask {
    static constexpr double kMasked = -std::numeric_limits<double>::max();

    std::size_t rows = 0, cols = 0;
    std::vector<double> values;
    std::vector<std::size_t> fully_masked_rows;

    bool masked(std::size_t r, std::size_t c) const { return values[r * cols + c] != 0.0; }

    static AttentionMask open(std::size_t rows, std::size_t cols) {
        AttentionMask m;
        m.rows = rows;
        m.cols = cols;
        m.values.assign(rows * cols, 0.0);
        return m;
    }
};

// Sample-point weights from per-vertex weights: barycentric combination of the
// owning face's vertex rows, renormalized.
inline SkinningWeights interpolate_sample_weights(const SkinningWeights& vertex_weights, const SurfaceSampleSet& samples,
                                                  const std::vector<Face>& faces) {
    const std::size_t B = vertex_weights.max_bones();
    SkinningWeights out;
    out.weights.assign(samples.count(), std::vector<double>(B, 0.0));
    for (std::size_t i = 0; i < samples.count(); ++i) {
        MESH4D_CHECK(samples.face_index[i] < faces.size(), "interpolate_sample_weights: face index out of range");
        const Face& f = faces[samples.face_index[i]];
        for (uint32_t vi : f)
            MESH4D_CHECK(vi < vertex_weights.count(), "interpolate_sample_weights: vertex weight row missing");
        const auto& b = samples.barycentric[i];
        double sum = 0.0;
        for (std::size_t k = 0; k < B; ++k) {
            const double w = b[0] * vertex_weights.weights[f[0]][k] + b[1] * vertex_weights.weights[f[1]][k] +
                             b[2] * vertex_weights.weights[f[2]][k];
            out.weights[i][k] = std::max(0.0, w);
            sum += out.weights[i][k];
        }
        if (sum > 0.0)
            for (double& w : out.weights[i]) w /= sum;
    }
    return out;
}

// M x M mask: pair (i, j) open iff the skinning-weight dot product exceeds tau_s.
inline AttentionMask point_pair_mask(const SkinningWeights& w, double tau_s) {
    const std::size_t M = w.count();
    const std::size_t B = w.max_bones();
    AttentionMask m = AttentionMask::open(M, M);
    for (std::size_t i = 0; i < M; ++i) {
        bool any_open = false;
        for (std::size_t j = 0; j < M; ++j) {
            double dot = 0.0;
            for (std::size_t b = 0; b < B; ++b) dot += w.weights[i][b] * w.weights[j][b];
            if (!(dot > tau_s)) m.values[i * M + j] = AttentionMask::kMasked;
            else any_open = true;
        }
        if (!any_open) m.fully_masked_rows.push_back(i);
    }
    return m;
}

// M x B mask: (i, b) open iff w_ib exceeds tau_b. Fully-masked rows are
// reported so the caller can fall back to the strongest bone.
inline AttentionMask point_bone_mask(const SkinningWeights& w, double tau_b) {
    const std::size_t M = w.count();
    const std::size_t B = w.max_bones();
    AttentionMask m = AttentionMask::open(M, B);
    for (std::size_t i = 0; i < M; ++i) {
        bool any_open = false;
        for (std::size_t b = 0; b < B; ++b) {
            if (!(w.weights[i][b] > tau_b)) m.values[i * B + b] = AttentionMask::kMasked;
            else any_open = true;
        }
        if (!any_open) m.fully_masked_rows.push_back(i);
    }
    return m;
}

// Open the argmax-weight bone on every fully-masked row (cross-attention with
// an empty key set is undefined).
inline void apply_strongest_bone_fallback(AttentionMask& mask, const SkinningWeights& w) {
    for (std::size_t i : mask.fully_masked_rows) {
        std::size_t best = 0;
        for (std::size_t b = 1; b < mask.cols; ++b)
            if (w.weights[i][b] > w.weights[i][best]) best = b;
        mask.values[i * mask.cols + best] = 0.0;
    }
    mask.fully_masked_rows.clear();
}

}  // namespace mesh4d
