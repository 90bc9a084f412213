#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mesh4d/autograd.hpp"
#include "mesh4d/common.hpp"
#include "mesh4d/io.hpp"
#include "mesh4d/mesh.hpp"
#include "mesh4d/nn.hpp"
#include "mesh4d/skeleton.hpp"
#include "mesh4d/synth.hpp"
#include "mesh4d/tensor.hpp"

namespace mesh4d {

struct VaeConfig {
    std::size_t M = 2048;   // sampled surface points
    std::size_t N = 256;    // compressed token count after FPS
    std::size_t c = 1024;   // hidden width
    std::size_t c_o = 64;   // latent width
    std::size_t L_enc = 8;
    std::size_t L_dec = 16;
    std::size_t T = 6;
    std::size_t B_max = kDefaultMaxBones;
    std::size_t heads = 16;
    std::size_t num_freqs = 8;
    double tau_s = 0.05;
    double tau_b = 0.05;
    double lambda_kl = 5e-5;
    std::size_t loss_subset = 1024;  // random vertex subset for the reconstruction term
    bool use_skeleton = true;
    bool use_temporal_global = true;

    static VaeConfig toy() {
        VaeConfig cfg;
        cfg.M = 256;
        cfg.N = 32;
        cfg.c = 64;
        cfg.c_o = 8;
        cfg.T = 4;
        cfg.L_enc = 2;
        cfg.L_dec = 4;
        cfg.heads = 4;
        return cfg;
    }

    void validate() const {
        MESH4D_CHECK(N <= M, "VaeConfig: N must not exceed M");
        MESH4D_CHECK(c % heads == 0, "VaeConfig: c must be divisible by heads");
        MESH4D_CHECK(c % 2 == 0, "VaeConfig: c must be even for rotary encoding");
        MESH4D_CHECK(M > 0 && N > 0 && c > 0 && c_o > 0 && T > 0 && L_enc > 0 && L_dec > 0 && heads > 0,
                     "VaeConfig: all dimensions must be positive");
    }

    std::size_t pe_width() const { return fourier_embedding_width(3, num_freqs); }
    std::size_t pair_embed_width() const { return 2 * (pe_width() + 3); }
    std::size_t bone_embed_width() const { return 4 * pe_width(); }
};

inline DenseArray<double> pack_vec3(const std::vector<Vec3>& pts) {
    DenseArray<double> a({pts.size(), 3});
    for (std::size_t i = 0; i < pts.size(); ++i) {
        a.v[i * 3 + 0] = pts[i].x;
        a.v[i * 3 + 1] = pts[i].y;
        a.v[i * 3 + 2] = pts[i].z;
    }
    return a;
}

namespace detail {

inline std::vector<AttnGroup> per_frame_groups(std::size_t T, std::size_t rows_per_frame) {
    std::vector<AttnGroup> groups(T);
    for (std::size_t t = 0; t < T; ++t) {
        groups[t].q_rows.resize(rows_per_frame);
        groups[t].kv_rows.resize(rows_per_frame);
        for (std::size_t i = 0; i < rows_per_frame; ++i) {
            groups[t].q_rows[i] = static_cast<int32_t>(t * rows_per_frame + i);
            groups[t].kv_rows[i] = groups[t].q_rows[i];
        }
    }
    return groups;
}

inline std::vector<AttnGroup> per_frame_cross_groups(std::size_t T, std::size_t q_per_frame,
                                                     std::size_t kv_per_frame) {
    std::vector<AttnGroup> groups(T);
    for (std::size_t t = 0; t < T; ++t) {
        groups[t].q_rows.resize(q_per_frame);
        groups[t].kv_rows.resize(kv_per_frame);
        for (std::size_t i = 0; i < q_per_frame; ++i)
            groups[t].q_rows[i] = static_cast<int32_t>(t * q_per_frame + i);
        for (std::size_t i = 0; i < kv_per_frame; ++i)
            groups[t].kv_rows[i] = static_cast<int32_t>(t * kv_per_frame + i);
    }
    return groups;
}

inline std::vector<AttnGroup> per_token_temporal_groups(std::size_t T, std::size_t N) {
    std::vector<AttnGroup> groups(N);
    for (std::size_t n = 0; n < N; ++n) {
        groups[n].q_rows.resize(T);
        groups[n].kv_rows.resize(T);
        for (std::size_t t = 0; t < T; ++t) {
            groups[n].q_rows[t] = static_cast<int32_t>(t * N + n);
            groups[n].kv_rows[t] = groups[n].q_rows[t];
        }
    }
    return groups;
}

inline std::vector<double> frame_positions(std::size_t T, std::size_t N,
                                           const std::vector<double>& frame_indices) {
    std::vector<double> pos(T * N);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t n = 0; n < N; ++n) pos[t * N + n] = frame_indices[t];
    return pos;
}

}  // namespace detail

// Geometry-side inputs for one encoder pass, all in normalized object space.
struct VaeEncodeInputs {
    SurfaceSampleSet samples;      // transported across the T frames
    SkinningWeights sample_weights;  // per sample point (empty when skeleton unused)
    AttentionMask pair_mask;
    AttentionMask bone_mask;
    const Skeleton* skeleton = nullptr;
    std::vector<std::size_t> fps_indices;
};

// Samples the canonical surface, transports the samples, interpolates skinning
// weights and builds the two skeleton masks plus the FPS token selection.
inline VaeEncodeInputs prepare_encode_inputs(const MeshSequence& seq, const Skeleton* skeleton,
                                             const SkinningWeights* vertex_weights, const VaeConfig& cfg,
                                             uint64_t seed) {
    VaeEncodeInputs in;
    MESH4D_CHECK(seq.frame_count() == cfg.T, "encode: sequence frame count must match config T");
    const TriMesh canonical = seq.frame_mesh(0);
    in.samples = transport_samples(sample_surface(canonical, cfg.M, seed), seq);
    if (cfg.use_skeleton) {
        MESH4D_CHECK(skeleton != nullptr && vertex_weights != nullptr,
                     "encode: skeleton inputs required by configuration");
        MESH4D_CHECK(skeleton->frame_count() == cfg.T, "encode: skeleton frame count mismatch");
        in.skeleton = skeleton;
        in.sample_weights = interpolate_sample_weights(*vertex_weights, in.samples, seq.faces);
        in.pair_mask = point_pair_mask(in.sample_weights, cfg.tau_s);
        in.bone_mask = point_bone_mask(in.sample_weights, cfg.tau_b);
        apply_strongest_bone_fallback(in.bone_mask, in.sample_weights);
    }
    in.fps_indices = farthest_point_sampling(in.samples.positions[0], cfg.N, 0);
    return in;
}

template <typename T>
struct VaeEncodeOut {
    Var<T> mean, log_variance, sample;
    std::vector<std::size_t> fps_indices;
    DenseArray<double> fps_positions;  // N x 3 canonical-frame positions
};

template <typename T>
struct VaeModel {
    VaeConfig cfg;
    ParameterSet<T> params;

    static VaeModel init(const VaeConfig& cfg, uint64_t seed) {
        cfg.validate();
        VaeModel m;
        m.cfg = cfg;
        Rng rng(seed);
        init_linear(m.params, rng, "enc.embed", cfg.pair_embed_width(), cfg.c);
        init_linear(m.params, rng, "enc.bone_embed", cfg.bone_embed_width(), cfg.c);
        init_mha(m.params, rng, "enc.inject.self", cfg.c, /*zero_out=*/true);
        init_mha(m.params, rng, "enc.inject.bone", cfg.c, /*zero_out=*/true);
        init_mha(m.params, rng, "enc.fps", cfg.c, /*zero_out=*/false);
        for (std::size_t l = 0; l < cfg.L_enc; ++l) init_block(m.params, rng, "enc.block" + std::to_string(l), cfg);
        init_linear_zero(m.params, "enc.head_mean", cfg.c, cfg.c_o);
        init_linear_zero(m.params, "enc.head_logvar", cfg.c, cfg.c_o);

        init_linear(m.params, rng, "dec.in", cfg.c_o, cfg.c);
        for (std::size_t l = 0; l < cfg.L_dec; ++l) init_block(m.params, rng, "dec.block" + std::to_string(l), cfg);
        init_linear(m.params, rng, "dec.query_embed", cfg.pe_width(), cfg.c);
        init_mha(m.params, rng, "dec.cross", cfg.c, /*zero_out=*/false);
        init_layer_norm(m.params, "dec.ln_out", cfg.c);
        init_linear_zero(m.params, "dec.head", cfg.c, 3);
        return m;
    }

    static void init_block(ParameterSet<T>& ps, Rng& rng, const std::string& prefix, const VaeConfig& cfg) {
        init_layer_norm(ps, prefix + ".ln_t", cfg.c);
        init_mha(ps, rng, prefix + ".attn_t", cfg.c, /*zero_out=*/true);
        init_layer_norm(ps, prefix + ".ln_g", cfg.c);
        init_mha(ps, rng, prefix + ".attn_g", cfg.c, /*zero_out=*/true);
        init_layer_norm(ps, prefix + ".ln_s", cfg.c);
        init_mha(ps, rng, prefix + ".attn_s", cfg.c, /*zero_out=*/true);
        init_layer_norm(ps, prefix + ".ln_m", cfg.c);
        init_mlp(ps, rng, prefix + ".mlp", cfg.c, /*zero_out=*/true);
    }

    // One spatio-temporal block: temporal attention, global attention, spatial
    // attention, then the MLP; pre-normalized, each with residual. Temporal
    // and global attention rotate queries/keys by the frame index.
    Var<T> spatio_temporal_block(Bind<T>& b, const std::string& prefix, Var<T> x, std::size_t frames,
                                 std::size_t tokens_per_frame, const std::vector<double>& frame_indices) const {
        const std::vector<double> pos = detail::frame_positions(frames, tokens_per_frame, frame_indices);
        if (cfg.use_temporal_global) {
            Var<T> n1 = layer_norm_fwd(b, prefix + ".ln_t", x);
            x = add(x, mha_fwd(b, prefix + ".attn_t", n1, n1, static_cast<int>(cfg.heads),
                               detail::per_token_temporal_groups(frames, tokens_per_frame), nullptr, pos, pos));
            Var<T> n2 = layer_norm_fwd(b, prefix + ".ln_g", x);
            x = add(x, mha_fwd(b, prefix + ".attn_g", n2, n2, static_cast<int>(cfg.heads),
                               full_attention_group(frames * tokens_per_frame, frames * tokens_per_frame), nullptr,
                               pos, pos));
        }
        Var<T> n3 = layer_norm_fwd(b, prefix + ".ln_s", x);
        x = add(x, mha_fwd(b, prefix + ".attn_s", n3, n3, static_cast<int>(cfg.heads),
                           detail::per_frame_groups(frames, tokens_per_frame)));
        Var<T> n4 = layer_norm_fwd(b, prefix + ".ln_m", x);
        x = add(x, mlp_fwd(b, prefix + ".mlp", n4));
        return x;
    }

    // Point-pair embedding of Eq. 3 for all frames at once:
    // rows (t*M + i) = f_l(PE(P_1) ++ n_1 ++ PE(P_t) ++ n_t).
    Var<T> embed_point_pairs(Bind<T>& b, const SurfaceSampleSet& samples) const {
        const std::size_t M = samples.count();
        const std::size_t pw = cfg.pe_width();
        const std::size_t iw = cfg.pair_embed_width();
        const DenseArray<double> pe1 = fourier_positional_embedding(pack_vec3(samples.positions[0]), cfg.num_freqs);
        const DenseArray<double> n1 = pack_vec3(samples.normals[0]);
        DenseArray<T> in({cfg.T * M, iw});
        for (std::size_t t = 0; t < cfg.T; ++t) {
            const DenseArray<double> pet =
                fourier_positional_embedding(pack_vec3(samples.positions[t]), cfg.num_freqs);
            const DenseArray<double> nt = pack_vec3(samples.normals[t]);
            for (std::size_t i = 0; i < M; ++i) {
                T* row = &in.v[(t * M + i) * iw];
                for (std::size_t j = 0; j < pw; ++j) row[j] = static_cast<T>(pe1.v[i * pw + j]);
                for (std::size_t j = 0; j < 3; ++j) row[pw + j] = static_cast<T>(n1.v[i * 3 + j]);
                for (std::size_t j = 0; j < pw; ++j) row[pw + 3 + j] = static_cast<T>(pet.v[i * pw + j]);
                for (std::size_t j = 0; j < 3; ++j) row[2 * pw + 3 + j] = static_cast<T>(nt.v[i * 3 + j]);
            }
        }
        return linear_fwd(b, "enc.embed", b.tape.constant(std::move(in)));
    }

    // Bone embedding: rows (t*B + k) = f_l(PE(tail_1) ++ PE(head_1) ++ PE(tail_t) ++ PE(head_t)).
    Var<T> embed_bones(Bind<T>& b, const Skeleton& skeleton) const {
        const std::size_t B = cfg.B_max;
        const std::size_t pw = cfg.pe_width();
        MESH4D_CHECK(skeleton.max_bones() == B, "embed_bones: skeleton padding mismatch");
        const DenseArray<double> t1 = fourier_positional_embedding(pack_vec3(skeleton.tails[0]), cfg.num_freqs);
        const DenseArray<double> h1 = fourier_positional_embedding(pack_vec3(skeleton.heads[0]), cfg.num_freqs);
        DenseArray<T> in({cfg.T * B, 4 * pw});
        for (std::size_t t = 0; t < cfg.T; ++t) {
            const DenseArray<double> tt = fourier_positional_embedding(pack_vec3(skeleton.tails[t]), cfg.num_freqs);
            const DenseArray<double> ht = fourier_positional_embedding(pack_vec3(skeleton.heads[t]), cfg.num_freqs);
            for (std::size_t k = 0; k < B; ++k) {
                T* row = &in.v[(t * B + k) * 4 * pw];
                for (std::size_t j = 0; j < pw; ++j) row[j] = static_cast<T>(t1.v[k * pw + j]);
                for (std::size_t j = 0; j < pw; ++j) row[pw + j] = static_cast<T>(h1.v[k * pw + j]);
                for (std::size_t j = 0; j < pw; ++j) row[2 * pw + j] = static_cast<T>(tt.v[k * pw + j]);
                for (std::size_t j = 0; j < pw; ++j) row[3 * pw + j] = static_cast<T>(ht.v[k * pw + j]);
            }
        }
        return linear_fwd(b, "enc.bone_embed", b.tape.constant(std::move(in)));
    }

    // Skeleton injection: masked self-attention with residual, then masked
    // cross-attention to the bone features with residual (both masks shared
    // across frames). Without skeleton inputs the self-attention runs unmasked
    // and the bone pathway is skipped.
    Var<T> inject_skeleton(Bind<T>& b, Var<T> h, const VaeEncodeInputs& in) const {
        const std::size_t M = cfg.M;
        Var<T> hhat = add(h, mha_fwd(b, "enc.inject.self", h, h, static_cast<int>(cfg.heads),
                                     detail::per_frame_groups(cfg.T, M),
                                     cfg.use_skeleton ? &in.pair_mask : nullptr));
        if (!cfg.use_skeleton) return hhat;
        Var<T> bones = embed_bones(b, *in.skeleton);
        return add(hhat, mha_fwd(b, "enc.inject.bone", hhat, bones, static_cast<int>(cfg.heads),
                                 detail::per_frame_cross_groups(cfg.T, M, cfg.B_max), &in.bone_mask));
    }

    // FPS compression (Eq. 5): queries are the features of the FPS-selected
    // rows, keys/values are all M features; no residual.
    Var<T> fps_compress(Bind<T>& b, Var<T> h_prime, const std::vector<std::size_t>& fps_indices) const {
        std::vector<int32_t> rows;
        rows.reserve(cfg.T * cfg.N);
        for (std::size_t t = 0; t < cfg.T; ++t)
            for (std::size_t n = 0; n < cfg.N; ++n)
                rows.push_back(static_cast<int32_t>(t * cfg.M + fps_indices[n]));
        Var<T> queries = gather_rows(h_prime, std::move(rows));
        return mha_fwd(b, "enc.fps", queries, h_prime, static_cast<int>(cfg.heads),
                       detail::per_frame_cross_groups(cfg.T, cfg.N, cfg.M));
    }

    VaeEncodeOut<T> encode(Bind<T>& b, const VaeEncodeInputs& in, uint64_t noise_seed) const {
        MESH4D_CHECK(in.samples.count() == cfg.M, "encode: sample count mismatch");
        MESH4D_CHECK(in.samples.frame_count() == cfg.T, "encode: sample frame count mismatch");
        Var<T> h = embed_point_pairs(b, in.samples);
        h = inject_skeleton(b, h, in);
        Var<T> tokens = fps_compress(b, h, in.fps_indices);
        std::vector<double> frame_indices(cfg.T);
        for (std::size_t t = 0; t < cfg.T; ++t) frame_indices[t] = static_cast<double>(t);
        for (std::size_t l = 0; l < cfg.L_enc; ++l)
            tokens = spatio_temporal_block(b, "enc.block" + std::to_string(l), tokens, cfg.T, cfg.N, frame_indices);
        VaeEncodeOut<T> out;
        out.mean = linear_fwd(b, "enc.head_mean", tokens);
        out.log_variance = linear_fwd(b, "enc.head_logvar", tokens);
        out.sample = reparameterize(out.mean, out.log_variance,
                                    draw_standard_normal<T>({cfg.T * cfg.N, cfg.c_o}, noise_seed));
        out.fps_indices = in.fps_indices;
        out.fps_positions = DenseArray<double>({cfg.N, 3});
        for (std::size_t n = 0; n < cfg.N; ++n) {
            const Vec3& p = in.samples.positions[0][in.fps_indices[n]];
            out.fps_positions.v[n * 3 + 0] = p.x;
            out.fps_positions.v[n * 3 + 1] = p.y;
            out.fps_positions.v[n * 3 + 2] = p.z;
        }
        return out;
    }

    // Decode the deformation field at the query vertices. Returns rows
    // (t*N_q + i) = displacement of query i at frame t, in the same space as
    // the latent was encoded from. Frame 1 runs through the same path.
    Var<T> decode(Bind<T>& b, Var<T> latent_sample, const DenseArray<double>& query_vertices) const {
        MESH4D_CHECK(query_vertices.cols() == 3, "decode: queries must be N_q x 3");
        const std::size_t Nq = query_vertices.rows();
        Var<T> x = linear_fwd(b, "dec.in", latent_sample);
        std::vector<double> frame_indices(cfg.T);
        for (std::size_t t = 0; t < cfg.T; ++t) frame_indices[t] = static_cast<double>(t);
        for (std::size_t l = 0; l < cfg.L_dec; ++l)
            x = spatio_temporal_block(b, "dec.block" + std::to_string(l), x, cfg.T, cfg.N, frame_indices);

        const DenseArray<T> pe =
            fourier_positional_embedding(query_vertices, cfg.num_freqs).template cast<T>();
        Var<T> q = linear_fwd(b, "dec.query_embed", b.tape.constant(pe));
        std::vector<int32_t> tiled(cfg.T * Nq);
        for (std::size_t t = 0; t < cfg.T; ++t)
            for (std::size_t i = 0; i < Nq; ++i) tiled[t * Nq + i] = static_cast<int32_t>(i);
        Var<T> q_tiled = gather_rows(q, std::move(tiled));
        Var<T> feats = mha_fwd(b, "dec.cross", q_tiled, x, static_cast<int>(cfg.heads),
                               detail::per_frame_cross_groups(cfg.T, Nq, cfg.N));
        return linear_fwd(b, "dec.head", layer_norm_fwd(b, "dec.ln_out", feats));
    }
};

// Eq. 7: sum over frames of the mean-over-subset squared displacement error,
// plus lambda * KL against the standard normal.
template <typename T>
Var<T> vae_loss(Var<T> pred, const DenseArray<T>& target_displacements, Var<T> mean, Var<T> log_variance,
                std::size_t queries_per_frame, double lambda_kl) {
    Tape<T>& tape = *pred.tape;
    MESH4D_CHECK(tape.value(pred).same_shape(target_displacements), "vae_loss: prediction/target shape mismatch");
    Var<T> diff = add_const(scale(pred, T(-1)), target_displacements);
    Var<T> recon = scale(sum_all(mul(diff, diff)), T(1) / static_cast<T>(queries_per_frame));
    Var<T> kl = kl_standard_normal(mean, log_variance);
    return add(recon, scale(kl, static_cast<T>(lambda_kl)));
}

inline uint64_t derive_seed(uint64_t seed, uint64_t stream, uint64_t index = 0) {
    Rng r(seed ^ (stream * 0x9E3779B97F4A7C15ULL) ^ (index * 0xC2B2AE3D27D4EB4FULL));
    return r.next_u64();
}

struct VaeTrainConfig {
    std::size_t steps = 2000;
    double lr = 1e-3;
    double weight_decay = 0.01;
    uint64_t seed = 1;
};

struct TrainLogEntry {
    int64_t step = 0;
    double loss = 0.0, recon = 0.0, kl = 0.0;
};

// Extract plain latent values (and noise sample) from a finished encode pass.
template <typename T>
DeformationLatent latent_from_encode(const Tape<T>& tape, const VaeEncodeOut<T>& out, const VaeConfig& cfg) {
    DeformationLatent l;
    l.T = cfg.T;
    l.N = cfg.N;
    l.c_o = cfg.c_o;
    l.mean = tape.value(out.mean).template cast<double>();
    l.log_variance = tape.value(out.log_variance).template cast<double>();
    l.sample = tape.value(out.sample).template cast<double>();
    l.fps_positions = out.fps_positions;
    return l;
}

// One optimization step of the deformation VAE on a single normalized
// sequence. Returns (loss, recon, kl).
template <typename T>
TrainLogEntry vae_train_step(VaeModel<T>& model, const MeshSequence& norm_seq, const Skeleton* skeleton,
                             const SkinningWeights* vertex_weights, const VaeTrainConfig& tc, int64_t step,
                             const std::string& sample_id) {
    const VaeConfig& cfg = model.cfg;
    const uint64_t surface_seed = derive_seed(tc.seed, 2, static_cast<uint64_t>(step));
    const uint64_t noise_seed = derive_seed(tc.seed, 3, static_cast<uint64_t>(step));
    const uint64_t subset_seed = derive_seed(tc.seed, 4, static_cast<uint64_t>(step));

    const VaeEncodeInputs inputs = prepare_encode_inputs(norm_seq, skeleton, vertex_weights, cfg, surface_seed);

    const std::size_t Nv = norm_seq.vertex_count();
    const std::size_t Nq = std::min(cfg.loss_subset, Nv);
    Rng subset_rng(subset_seed);
    std::vector<std::size_t> all(Nv);
    for (std::size_t i = 0; i < Nv; ++i) all[i] = i;
    for (std::size_t i = 0; i < Nq; ++i)
        std::swap(all[i], all[i + subset_rng.uniform_index(Nv - i)]);
    all.resize(Nq);

    DenseArray<double> queries({Nq, 3});
    DenseArray<T> target({cfg.T * Nq, 3});
    for (std::size_t i = 0; i < Nq; ++i) {
        const Vec3& v1 = norm_seq.frames[0][all[i]];
        queries.v[i * 3 + 0] = v1.x;
        queries.v[i * 3 + 1] = v1.y;
        queries.v[i * 3 + 2] = v1.z;
        for (std::size_t t = 0; t < cfg.T; ++t) {
            const Vec3 d = norm_seq.frames[t][all[i]] - v1;
            target.v[(t * Nq + i) * 3 + 0] = static_cast<T>(d.x);
            target.v[(t * Nq + i) * 3 + 1] = static_cast<T>(d.y);
            target.v[(t * Nq + i) * 3 + 2] = static_cast<T>(d.z);
        }
    }

    Tape<T> tape;
    Bind<T> bind{tape, model.params, {}};
    const VaeEncodeOut<T> enc = model.encode(bind, inputs, noise_seed);
    Var<T> pred = model.decode(bind, enc.sample, queries);
    Var<T> diff = sub(pred, tape.constant(target));
    Var<T> recon = scale(sum_all(mul(diff, diff)), T(1) / static_cast<T>(Nq));
    Var<T> kl = kl_standard_normal(enc.mean, enc.log_variance);
    Var<T> loss = add(recon, scale(kl, static_cast<T>(cfg.lambda_kl)));

    TrainLogEntry entry;
    entry.step = step;
    entry.loss = static_cast<double>(tape.value(loss).v[0]);
    entry.recon = static_cast<double>(tape.value(recon).v[0]);
    entry.kl = static_cast<double>(tape.value(kl).v[0]);
    MESH4D_NUMERIC_CHECK(std::isfinite(entry.loss), "train_vae: non-finite loss on sample " + sample_id);

    tape.backward(loss);
    adamw_step(model.params, bind.grads(), tc.lr, tc.weight_decay);
    return entry;
}

// Full training loop over a dataset of synthetic samples: per step draw a
// sample, a frame-stride subsequence, and a surface sampling; optimize Eq. 7.
template <typename T>
std::vector<TrainLogEntry> train_vae(VaeModel<T>& model, const std::vector<SynthSample>& dataset,
                                     const VaeTrainConfig& tc, std::vector<TrainLogEntry>* append_log = nullptr) {
    MESH4D_CHECK(!dataset.empty(), "train_vae: empty dataset");
    std::vector<TrainLogEntry> log;
    const int64_t start_step = model.params.step;
    for (std::size_t k = 0; k < tc.steps; ++k) {
        const int64_t step = start_step + static_cast<int64_t>(k);
        Rng pick(derive_seed(tc.seed, 1, static_cast<uint64_t>(step)));
        const SynthSample& sample = dataset[pick.uniform_index(dataset.size())];
        const SynthSample window =
            subsample_frames(sample, model.cfg.T, derive_seed(tc.seed, 5, static_cast<uint64_t>(step)));
        const NormalizeResult norm = normalize_sequence(window.sequence);
        Skeleton norm_skel = window.skeleton;
        for (auto& frame : norm_skel.heads)
            for (std::size_t b = 0; b < norm_skel.active_bones; ++b)
                frame[b] = (frame[b] - norm.center) * norm.scale;
        for (auto& frame : norm_skel.tails)
            for (std::size_t b = 0; b < norm_skel.active_bones; ++b)
                frame[b] = (frame[b] - norm.center) * norm.scale;
        TrainLogEntry e = vae_train_step(model, norm.seq, &norm_skel, &window.vertex_weights, tc, step + 1,
                                         sample.id);
        log.push_back(e);
        if (append_log) append_log->push_back(e);
    }
    return log;
}

struct ReconstructionError {
    double mean_vertex_error = 0.0;   // mean over frames and vertices, object units of the input
    double bbox_diagonal = 0.0;       // frame-1 bounding-box diagonal, same units
    double frame1_mean_norm = 0.0;    // decoder's deviation from zero at frame 1 (diagnostic)
    double relative() const { return mean_vertex_error / bbox_diagonal; }
};

// Encode a T-frame window of the sample and decode at every vertex; report the
// mean reconstruction error. Uses the latent mean (no sampling noise).
template <typename T>
ReconstructionError vae_reconstruction_error(const VaeModel<T>& model, const SynthSample& sample, uint64_t seed) {
    const VaeConfig& cfg = model.cfg;
    const SynthSample window = subsample_frames(sample, cfg.T, derive_seed(seed, 11));
    const NormalizeResult norm = normalize_sequence(window.sequence);
    Skeleton norm_skel = window.skeleton;
    for (auto& frame : norm_skel.heads)
        for (std::size_t b = 0; b < norm_skel.active_bones; ++b) frame[b] = (frame[b] - norm.center) * norm.scale;
    for (auto& frame : norm_skel.tails)
        for (std::size_t b = 0; b < norm_skel.active_bones; ++b) frame[b] = (frame[b] - norm.center) * norm.scale;

    const VaeEncodeInputs inputs =
        prepare_encode_inputs(norm.seq, &norm_skel, &window.vertex_weights, cfg, derive_seed(seed, 12));

    Tape<T> tape;
    Bind<T> bind{tape, model.params, {}};
    const VaeEncodeOut<T> enc = model.encode(bind, inputs, derive_seed(seed, 13));
    const DenseArray<double> queries = pack_vec3(norm.seq.frames[0]);
    Var<T> pred = model.decode(bind, enc.mean, queries);

    const DenseArray<T>& disp = tape.value(pred);
    const std::size_t Nv = norm.seq.vertex_count();
    ReconstructionError err;
    double acc = 0.0, acc1 = 0.0;
    for (std::size_t t = 0; t < cfg.T; ++t)
        for (std::size_t i = 0; i < Nv; ++i) {
            const Vec3 gt = norm.seq.frames[t][i] - norm.seq.frames[0][i];
            const Vec3 p{static_cast<double>(disp.v[(t * Nv + i) * 3 + 0]),
                         static_cast<double>(disp.v[(t * Nv + i) * 3 + 1]),
                         static_cast<double>(disp.v[(t * Nv + i) * 3 + 2])};
            const double d = (p - gt).norm();
            acc += d;
            if (t == 0) acc1 += p.norm();
        }
    err.mean_vertex_error = acc / static_cast<double>(cfg.T * Nv);
    err.frame1_mean_norm = acc1 / static_cast<double>(Nv);
    err.bbox_diagonal = bbox_diagonal(norm.seq.frame_mesh(0));
    return err;
}

}  // namespace mesh4d
