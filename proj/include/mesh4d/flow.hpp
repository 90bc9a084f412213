#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mesh4d/autograd.hpp"
#include "mesh4d/common.hpp"
#include "mesh4d/io.hpp"
#include "mesh4d/mesh.hpp"
#include "mesh4d/nn.hpp"
#include "mesh4d/synth.hpp"
#include "mesh4d/tensor.hpp"
#include "mesh4d/vae.hpp"

namespace mesh4d {

struct FlowConfig {
    std::size_t euler_steps = 50;
    double cfg_weight = 5.0;
    bool cfg_enabled = false;  // CFG off by default; slightly better without it
    double condition_dropout_prob = 0.1;

    std::size_t blocks = 8;
    std::size_t heads = 16;
    std::size_t c = 1024;    // hidden width; matches the VAE for shared-block initialization
    std::size_t N_s = 256;   // canonical-shape token count
    std::size_t c_s = 64;    // canonical-shape token width
    std::size_t feat_tokens = 9;  // silhouette feature tokens per frame
    std::size_t c_v = 8;          // silhouette feature width
    std::size_t sil_resolution = 64;
    std::size_t num_freqs = 8;

    // latent geometry mirrored from the VAE
    std::size_t T = 6, N = 256, c_o = 64;
    std::size_t surface_samples = 2048;  // canonical surface sampling before FPS (the VAE's M)

    static FlowConfig toy(const VaeConfig& vae) {
        FlowConfig cfg;
        cfg.blocks = 2;
        cfg.heads = vae.heads;
        cfg.c = vae.c;
        cfg.N_s = 32;
        cfg.c_s = 16;
        cfg.T = vae.T;
        cfg.N = vae.N;
        cfg.c_o = vae.c_o;
        cfg.surface_samples = vae.M;
        return cfg;
    }

    void validate() const {
        MESH4D_CHECK(euler_steps >= 1, "FlowConfig: need at least one Euler step");
        MESH4D_CHECK(cfg_weight >= 0.0, "FlowConfig: cfg weight must be non-negative");
        MESH4D_CHECK(c % heads == 0 && c % 2 == 0, "FlowConfig: bad hidden width");
        MESH4D_CHECK(condition_dropout_prob >= 0.0 && condition_dropout_prob <= 1.0,
                     "FlowConfig: dropout probability outside [0,1]");
    }

    std::size_t pe_width() const { return fourier_embedding_width(3, num_freqs); }
};

struct ConditionBundle {
    DenseArray<double> shape_tokens;                 // N_s x c_s
    std::vector<DenseArray<double>> frame_features;  // T arrays of F x c_v
    DenseArray<double> spatial_embedding;            // N x 3, canonical-surface points
    std::vector<double> frame_indices;               // T

    void validate(const FlowConfig& cfg) const {
        MESH4D_CHECK(frame_features.size() == cfg.T, "ConditionBundle: frame feature count mismatch");
        MESH4D_CHECK(shape_tokens.rows() == cfg.N_s && shape_tokens.cols() == cfg.c_s,
                     "ConditionBundle: shape token shape mismatch");
        MESH4D_CHECK(spatial_embedding.rows() == cfg.N, "ConditionBundle: spatial embedding count mismatch");
        MESH4D_CHECK(frame_indices.size() == cfg.T, "ConditionBundle: frame index count mismatch");
        for (const auto& f : frame_features)
            MESH4D_CHECK(f.rows() == cfg.feat_tokens && f.cols() == cfg.c_v,
                         "ConditionBundle: feature token shape mismatch");
    }
};

// ---------------------------------------------------------------------------
// Flow-matching path construction (Eq. 2)
// ---------------------------------------------------------------------------

struct FlowSample {
    DenseArray<double> z_t;       // t*z + (1-t)*noise
    DenseArray<double> velocity;  // z - noise
};

inline FlowSample make_flow_sample(const DenseArray<double>& z, const DenseArray<double>& noise, double t) {
    MESH4D_CHECK(z.same_shape(noise), "make_flow_sample: shape mismatch");
    MESH4D_CHECK(t >= 0.0 && t <= 1.0, "make_flow_sample: t outside [0,1]");
    FlowSample s;
    s.z_t = DenseArray<double>(z.shape);
    s.velocity = DenseArray<double>(z.shape);
    for (std::size_t i = 0; i < z.numel(); ++i) {
        s.z_t.v[i] = t * z.v[i] + (1.0 - t) * noise.v[i];
        s.velocity.v[i] = z.v[i] - noise.v[i];
    }
    return s;
}

inline DenseArray<double> cfg_velocity(const DenseArray<double>& v_cond, const DenseArray<double>& v_uncond,
                                       double w) {
    MESH4D_CHECK(v_cond.same_shape(v_uncond), "cfg_velocity: shape mismatch");
    DenseArray<double> out(v_cond.shape);
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.v[i] = v_uncond.v[i] + w * (v_cond.v[i] - v_uncond.v[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Silhouette features (stand-in for the out-of-scope pretrained video encoder)
// ---------------------------------------------------------------------------

struct SilhouetteFeatures {
    DenseArray<double> tokens;  // feat_tokens x c_v
    bool empty = false;
};

// 8x8 occupancy grid rows as 8 tokens plus one token of image moments
// (area, centroid, second central moments).
inline SilhouetteFeatures features_from_silhouette(const std::vector<uint8_t>& img, std::size_t resolution) {
    MESH4D_CHECK(img.size() == resolution * resolution, "features_from_silhouette: size mismatch");
    SilhouetteFeatures out;
    out.tokens = DenseArray<double>({9, 8});
    const double res = static_cast<double>(resolution);

    for (std::size_t gy = 0; gy < 8; ++gy)
        for (std::size_t gx = 0; gx < 8; ++gx) {
            const std::size_t x0 = gx * resolution / 8, x1 = (gx + 1) * resolution / 8;
            const std::size_t y0 = gy * resolution / 8, y1 = (gy + 1) * resolution / 8;
            std::size_t set = 0;
            for (std::size_t y = y0; y < y1; ++y)
                for (std::size_t x = x0; x < x1; ++x) set += img[y * resolution + x];
            const std::size_t cells = (x1 - x0) * (y1 - y0);
            out.tokens.v[gy * 8 + gx] = cells ? static_cast<double>(set) / cells : 0.0;
        }

    double count = 0.0, su = 0.0, sv = 0.0;
    for (std::size_t y = 0; y < resolution; ++y)
        for (std::size_t x = 0; x < resolution; ++x)
            if (img[y * resolution + x]) {
                count += 1.0;
                su += (x + 0.5) / res;
                sv += (y + 0.5) / res;
            }
    double* m = &out.tokens.v[8 * 8];
    if (count == 0.0) {
        out.empty = true;  // zero features, reported to the caller
        return out;
    }
    const double cu = su / count, cv = sv / count;
    double m20 = 0.0, m02 = 0.0, m11 = 0.0;
    for (std::size_t y = 0; y < resolution; ++y)
        for (std::size_t x = 0; x < resolution; ++x)
            if (img[y * resolution + x]) {
                const double du = (x + 0.5) / res - cu, dv = (y + 0.5) / res - cv;
                m20 += du * du;
                m02 += dv * dv;
                m11 += du * dv;
            }
    m[0] = count / (res * res);
    m[1] = cu;
    m[2] = cv;
    m[3] = m20 / count;
    m[4] = m02 / count;
    m[5] = m11 / count;
    return out;
}

// Per-frame silhouette features for a whole sequence (fixed frontal camera).
inline std::vector<DenseArray<double>> synth_frame_features(const MeshSequence& seq, const OrthoCamera& camera,
                                                            std::size_t resolution,
                                                            std::vector<std::string>* diagnostics = nullptr) {
    seq.validate();
    std::vector<DenseArray<double>> feats;
    for (std::size_t t = 0; t < seq.frame_count(); ++t) {
        const SilhouetteFeatures f =
            features_from_silhouette(render_silhouette(seq.frame_mesh(t), camera, resolution), resolution);
        if (f.empty && diagnostics)
            diagnostics->push_back("empty silhouette at frame " + std::to_string(t));
        feats.push_back(f.tokens);
    }
    return feats;
}

inline OrthoCamera camera_for_sequence(const MeshSequence& seq, double margin = 1.15) {
    Vec3 lo = seq.frames[0][0], hi = lo;
    for (const auto& fr : seq.frames)
        for (const Vec3& v : fr) {
            lo = {std::min(lo.x, v.x), std::min(lo.y, v.y), std::min(lo.z, v.z)};
            hi = {std::max(hi.x, v.x), std::max(hi.y, v.y), std::max(hi.z, v.z)};
        }
    OrthoCamera cam;
    cam.center = (lo + hi) * 0.5;
    cam.half_extent = 0.5 * std::max(hi.x - lo.x, hi.y - lo.y) * margin;
    return cam;
}

// ---------------------------------------------------------------------------
// Velocity model
// ---------------------------------------------------------------------------

template <typename T>
struct FlowModel {
    FlowConfig cfg;
    ParameterSet<T> params;

    static FlowModel init(const FlowConfig& cfg, uint64_t seed) {
        cfg.validate();
        FlowModel m;
        m.cfg = cfg;
        Rng rng(seed);
        init_linear(m.params, rng, "flow.in", cfg.c_o, cfg.c);
        init_linear(m.params, rng, "flow.t_embed", cfg.pe_width(), cfg.c);
        init_linear_zero(m.params, "flow.spatial_embed", cfg.pe_width(), cfg.c);
        init_linear(m.params, rng, "flow.shape_tokens_proj", cfg.pe_width(), cfg.c_s);
        init_linear(m.params, rng, "flow.shape_in", cfg.c_s, cfg.c);
        init_linear(m.params, rng, "flow.feat_in", cfg.c_v, cfg.c);
        m.params.create("flow.null_shape", {1, cfg.c});
        m.params.create("flow.null_feat", {1, cfg.c});
        m.params.create("flow.null_spatial", {1, cfg.c});
        for (std::size_t i = 0; i < cfg.blocks; ++i) {
            const std::string p = "flow.block" + std::to_string(i);
            init_linear_zero(m.params, p + ".ada_attn_s", cfg.c, cfg.c);
            init_linear_zero(m.params, p + ".ada_attn_b", cfg.c, cfg.c);
            init_mha(m.params, rng, p + ".attn_s", cfg.c, /*zero_out=*/false);
            init_layer_norm(m.params, p + ".ln_t", cfg.c);
            init_mha(m.params, rng, p + ".attn_t", cfg.c, /*zero_out=*/true);
            init_layer_norm(m.params, p + ".ln_cs", cfg.c);
            init_mha(m.params, rng, p + ".cross_shape", cfg.c, /*zero_out=*/true);
            init_layer_norm(m.params, p + ".ln_cf", cfg.c);
            init_mha(m.params, rng, p + ".cross_feat", cfg.c, /*zero_out=*/true);
            init_linear_zero(m.params, p + ".ada_mlp_s", cfg.c, cfg.c);
            init_linear_zero(m.params, p + ".ada_mlp_b", cfg.c, cfg.c);
            init_mlp(m.params, rng, p + ".mlp", cfg.c, /*zero_out=*/false);
        }
        init_layer_norm(m.params, "flow.out_ln", cfg.c);
        init_linear_zero(m.params, "flow.head", cfg.c, cfg.c_o);
        return m;
    }

    // Predicted velocity for the noisy latent z_t at time t under the given
    // conditions. `use_null` swaps every condition for its learned null token
    // (classifier-free unconditional pass); `backbone_only` runs just the
    // self-attention / MLP path with timestep modulation.
    Var<T> velocity_forward(Bind<T>& b, Var<T> z_t, double t, const ConditionBundle& cond, bool use_null = false,
                            bool backbone_only = false) const {
        Tape<T>& tape = b.tape;
        cond.validate(cfg);
        MESH4D_CHECK(tape.value(z_t).rows() == cfg.T * cfg.N && tape.value(z_t).cols() == cfg.c_o,
                     "velocity_forward: latent shape mismatch");

        Var<T> x = linear_fwd(b, "flow.in", z_t);

        DenseArray<double> t_coord({1, 3});
        t_coord.v[0] = t;
        Var<T> t_emb = linear_fwd(
            b, "flow.t_embed",
            tape.constant(fourier_positional_embedding(t_coord, cfg.num_freqs).template cast<T>()));

        std::vector<int32_t> tile_tn(cfg.T * cfg.N);
        for (std::size_t tt = 0; tt < cfg.T; ++tt)
            for (std::size_t n = 0; n < cfg.N; ++n) tile_tn[tt * cfg.N + n] = static_cast<int32_t>(n);

        if (!backbone_only) {
            Var<T> spatial =
                use_null ? b("flow.null_spatial")
                         : linear_fwd(b, "flow.spatial_embed",
                                      tape.constant(
                                          fourier_positional_embedding(cond.spatial_embedding, cfg.num_freqs)
                                              .template cast<T>()));
            std::vector<int32_t> rows = use_null ? std::vector<int32_t>(cfg.T * cfg.N, 0) : tile_tn;
            x = add(x, gather_rows(spatial, std::move(rows)));
        }

        Var<T> shape_kv, feat_kv;
        if (!backbone_only) {
            if (use_null) {
                shape_kv = gather_rows(b("flow.null_shape"), std::vector<int32_t>(cfg.N_s, 0));
                feat_kv = gather_rows(b("flow.null_feat"),
                                      std::vector<int32_t>(cfg.T * cfg.feat_tokens, 0));
            } else {
                shape_kv = linear_fwd(b, "flow.shape_in", tape.constant(cond.shape_tokens.template cast<T>()));
                DenseArray<T> feats({cfg.T * cfg.feat_tokens, cfg.c_v});
                for (std::size_t tt = 0; tt < cfg.T; ++tt)
                    for (std::size_t r = 0; r < cfg.feat_tokens; ++r)
                        for (std::size_t j = 0; j < cfg.c_v; ++j)
                            feats.v[((tt * cfg.feat_tokens) + r) * cfg.c_v + j] =
                                static_cast<T>(cond.frame_features[tt].v[r * cfg.c_v + j]);
                feat_kv = linear_fwd(b, "flow.feat_in", tape.constant(std::move(feats)));
            }
        }

        const std::vector<double> pos = detail::frame_positions(cfg.T, cfg.N, cond.frame_indices);
        for (std::size_t i = 0; i < cfg.blocks; ++i) {
            const std::string p = "flow.block" + std::to_string(i);
            // timestep-modulated self-attention over N per frame
            Var<T> n1 = row_affine(layer_norm_plain(x), linear_fwd(b, p + ".ada_attn_s", t_emb),
                                   linear_fwd(b, p + ".ada_attn_b", t_emb));
            x = add(x, mha_fwd(b, p + ".attn_s", n1, n1, static_cast<int>(cfg.heads),
                               detail::per_frame_groups(cfg.T, cfg.N)));
            if (!backbone_only) {
                Var<T> n2 = layer_norm_fwd(b, p + ".ln_t", x);
                x = add(x, mha_fwd(b, p + ".attn_t", n2, n2, static_cast<int>(cfg.heads),
                                   detail::per_token_temporal_groups(cfg.T, cfg.N), nullptr, pos, pos));
                Var<T> n3 = layer_norm_fwd(b, p + ".ln_cs", x);
                std::vector<AttnGroup> shape_groups(1);
                shape_groups[0] = full_attention_group(cfg.T * cfg.N, cfg.N_s)[0];
                x = add(x, mha_fwd(b, p + ".cross_shape", n3, shape_kv, static_cast<int>(cfg.heads),
                                   std::move(shape_groups)));
                Var<T> n4 = layer_norm_fwd(b, p + ".ln_cf", x);
                x = add(x, mha_fwd(b, p + ".cross_feat", n4, feat_kv, static_cast<int>(cfg.heads),
                                   detail::per_frame_cross_groups(cfg.T, cfg.N, cfg.feat_tokens)));
            }
            Var<T> n5 = row_affine(layer_norm_plain(x), linear_fwd(b, p + ".ada_mlp_s", t_emb),
                                   linear_fwd(b, p + ".ada_mlp_b", t_emb));
            x = add(x, mlp_fwd(b, p + ".mlp", n5));
        }
        return linear_fwd(b, "flow.head", layer_norm_fwd(b, "flow.out_ln", x));
    }

    // Value-only forward on a throwaway tape.
    DenseArray<double> velocity(const DenseArray<double>& z_t, double t, const ConditionBundle& cond,
                                bool use_null = false) const {
        Tape<T> tape;
        Bind<T> bind{tape, params, {}};
        Var<T> out = velocity_forward(bind, tape.constant(z_t.template cast<T>()), t, cond, use_null);
        return tape.value(out).template cast<double>();
    }
};

// Canonical-shape tokens: positional embedding of an FPS point subset pushed
// through the (frozen) stand-in projection.
template <typename T>
DenseArray<double> build_shape_tokens(const FlowModel<T>& model, const TriMesh& canonical, uint64_t seed) {
    const FlowConfig& cfg = model.cfg;
    const SurfaceSampleSet s = sample_surface(canonical, cfg.surface_samples, seed);
    const std::vector<std::size_t> idx = farthest_point_sampling(s.positions[0], cfg.N_s, 0);
    std::vector<Vec3> pts(cfg.N_s);
    for (std::size_t i = 0; i < cfg.N_s; ++i) pts[i] = s.positions[0][idx[i]];
    const DenseArray<double> pe = fourier_positional_embedding(pack_vec3(pts), cfg.num_freqs);
    DenseArray<double> w = model.params.at("flow.shape_tokens_proj.w").value.template cast<double>();
    DenseArray<double> tokens = matmul_data(pe, false, w, false);
    const DenseArray<T>& bias = model.params.at("flow.shape_tokens_proj.b").value;
    for (std::size_t r = 0; r < tokens.rows(); ++r)
        for (std::size_t j = 0; j < tokens.cols(); ++j) tokens.v[r * tokens.cols() + j] += static_cast<double>(bias.v[j]);
    return tokens;
}

// Assemble the conditioning inputs. Training passes the latent's stored FPS
// positions; inference re-runs FPS on the canonical surface with the same
// sampling parameters, so matched seeds reproduce the training embedding.
template <typename T>
ConditionBundle build_condition(const FlowModel<T>& model, const TriMesh& canonical_normalized,
                                std::vector<DenseArray<double>> frame_features, uint64_t seed,
                                const DenseArray<double>* train_fps_positions = nullptr) {
    const FlowConfig& cfg = model.cfg;
    MESH4D_CHECK(!frame_features.empty(), "build_condition: missing frame features");
    ConditionBundle cond;
    if (train_fps_positions) {
        cond.spatial_embedding = *train_fps_positions;
    } else {
        const SurfaceSampleSet s = sample_surface(canonical_normalized, cfg.surface_samples, seed);
        const std::vector<std::size_t> idx = farthest_point_sampling(s.positions[0], cfg.N, 0);
        cond.spatial_embedding = DenseArray<double>({cfg.N, 3});
        for (std::size_t n = 0; n < cfg.N; ++n) {
            cond.spatial_embedding.v[n * 3 + 0] = s.positions[0][idx[n]].x;
            cond.spatial_embedding.v[n * 3 + 1] = s.positions[0][idx[n]].y;
            cond.spatial_embedding.v[n * 3 + 2] = s.positions[0][idx[n]].z;
        }
    }
    cond.shape_tokens = build_shape_tokens(model, canonical_normalized, derive_seed(seed, 21));
    cond.frame_features = std::move(frame_features);
    cond.frame_indices.resize(cfg.T);
    for (std::size_t t = 0; t < cfg.T; ++t) cond.frame_indices[t] = static_cast<double>(t);
    cond.validate(cfg);
    return cond;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct FmBatchItem {
    DenseArray<double> latent;  // (T*N) x c_o target sample
    ConditionBundle cond;
};

// One flow-matching optimization step: per element draw t ~ U(0,1) and
// Gaussian noise, form the straight path, regress the constant velocity.
// The loss is the batch mean of the squared L2 norm of the velocity residual.
// All conditions jointly drop to their null tokens with the configured
// probability.
template <typename T>
double fm_train_step(FlowModel<T>& model, const std::vector<FmBatchItem>& batch, double lr, double weight_decay,
                     uint64_t seed, int64_t step) {
    MESH4D_CHECK(!batch.empty(), "fm_train_step: empty batch");
    std::map<std::string, DenseArray<T>> grad_acc;
    double loss_acc = 0.0;
    for (std::size_t bi = 0; bi < batch.size(); ++bi) {
        Rng rng(derive_seed(seed, 31, static_cast<uint64_t>(step) * 1000003ULL + bi));
        const double t = rng.uniform();
        const bool drop = rng.uniform() < model.cfg.condition_dropout_prob;
        DenseArray<double> noise(batch[bi].latent.shape);
        for (auto& x : noise.v) x = rng.normal();
        const FlowSample fs = make_flow_sample(batch[bi].latent, noise, t);

        Tape<T> tape;
        Bind<T> bind{tape, model.params, {}};
        Var<T> pred = model.velocity_forward(bind, tape.constant(fs.z_t.template cast<T>()), t, batch[bi].cond,
                                             drop);
        Var<T> diff = sub(pred, tape.constant(fs.velocity.template cast<T>()));
        Var<T> loss = sum_all(mul(diff, diff));
        const double loss_val = static_cast<double>(tape.value(loss).v[0]);
        MESH4D_NUMERIC_CHECK(std::isfinite(loss_val), "fm_train_step: non-finite loss");
        loss_acc += loss_val;
        tape.backward(loss);
        for (auto& [name, g] : bind.grads()) {
            auto it = grad_acc.find(name);
            if (it == grad_acc.end())
                grad_acc.emplace(name, std::move(g));
            else
                detail::axpy(it->second, g);
        }
    }
    const T inv_b = T(1) / static_cast<T>(batch.size());
    for (auto& [name, g] : grad_acc)
        for (auto& x : g.v) x *= inv_b;
    adamw_step(model.params, grad_acc, lr, weight_decay);
    return loss_acc / static_cast<double>(batch.size());
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

// First-order Euler integration of dz/dt = v(z, t) from seeded noise at t=0
// to t=1 with uniform steps.
inline DenseArray<double> euler_integrate(
    const std::function<DenseArray<double>(const DenseArray<double>&, double)>& velocity,
    std::vector<std::size_t> shape, std::size_t steps, uint64_t seed) {
    MESH4D_CHECK(steps >= 1, "euler_integrate: need at least one step");
    Rng rng(seed);
    DenseArray<double> z(std::move(shape));
    for (auto& x : z.v) x = rng.normal();
    const double dt = 1.0 / static_cast<double>(steps);
    for (std::size_t k = 0; k < steps; ++k) {
        const double t = static_cast<double>(k) * dt;
        const DenseArray<double> v = velocity(z, t);
        MESH4D_CHECK(v.same_shape(z), "euler_integrate: velocity shape mismatch");
        for (std::size_t i = 0; i < z.numel(); ++i) z.v[i] += dt * v.v[i];
    }
    return z;
}

// Draw a deformation latent by integrating the learned velocity field.
template <typename T>
DeformationLatent euler_sample(const FlowModel<T>& model, const ConditionBundle& cond, uint64_t seed) {
    const FlowConfig& cfg = model.cfg;
    cond.validate(cfg);
    auto vel = [&](const DenseArray<double>& z, double t) {
        DenseArray<double> v = model.velocity(z, t, cond, false);
        if (cfg.cfg_enabled) {
            const DenseArray<double> v_un = model.velocity(z, t, cond, true);
            v = cfg_velocity(v, v_un, cfg.cfg_weight);
        }
        return v;
    };
    DeformationLatent l;
    l.T = cfg.T;
    l.N = cfg.N;
    l.c_o = cfg.c_o;
    l.sample = euler_integrate(vel, {cfg.T * cfg.N, cfg.c_o}, cfg.euler_steps, seed);
    l.mean = l.sample;
    l.log_variance = DenseArray<double>::full({cfg.T * cfg.N, cfg.c_o}, -30.0);
    l.fps_positions = cond.spatial_embedding;
    return l;
}

// Copy the VAE decoder's spatial-attention and MLP sublayers into the matching
// velocity-model blocks (the shared-block initialization).
template <typename T>
void init_flow_from_vae_decoder(FlowModel<T>& flow, const ParameterSet<T>& vae_params, std::size_t vae_L_dec) {
    static const char* kSuffixes[] = {".attn_s.q.w", ".attn_s.q.b", ".attn_s.k.w", ".attn_s.k.b",
                                      ".attn_s.v.w", ".attn_s.v.b", ".attn_s.out.w", ".attn_s.out.b",
                                      ".mlp.fc1.w",  ".mlp.fc1.b",  ".mlp.fc2.w",  ".mlp.fc2.b"};
    const std::size_t blocks = std::min(flow.cfg.blocks, vae_L_dec);
    for (std::size_t i = 0; i < blocks; ++i) {
        for (const char* suffix : kSuffixes) {
            const std::string src = "dec.block" + std::to_string(i) + suffix;
            const std::string dst = "flow.block" + std::to_string(i) + suffix;
            MESH4D_CHECK(vae_params.has(src), "init_flow_from_vae_decoder: missing " + src);
            const DenseArray<T>& sv = vae_params.at(src).value;
            DenseArray<T>& dv = flow.params.at(dst).value;
            MESH4D_CHECK(sv.same_shape(dv), "init_flow_from_vae_decoder: shape mismatch at " + src);
            dv = sv;
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset-level flow training and end-to-end sampling
// ---------------------------------------------------------------------------

struct FlowTrainConfig {
    std::size_t steps = 2000;
    double lr = 1e-3;
    double weight_decay = 0.01;
    uint64_t seed = 2;
    std::size_t batch = 1;
};

// Encode a normalized window with the frozen VAE and package the flow-matching
// training item (latent sample + conditions).
template <typename T>
FmBatchItem make_flow_item(const VaeModel<T>& vae, const FlowModel<T>& flow, const SynthSample& window_raw,
                           uint64_t seed) {
    const VaeConfig& vcfg = vae.cfg;
    const NormalizeResult norm = normalize_sequence(window_raw.sequence);
    Skeleton norm_skel = window_raw.skeleton;
    for (auto& frame : norm_skel.heads)
        for (std::size_t b = 0; b < norm_skel.active_bones; ++b) frame[b] = (frame[b] - norm.center) * norm.scale;
    for (auto& frame : norm_skel.tails)
        for (std::size_t b = 0; b < norm_skel.active_bones; ++b) frame[b] = (frame[b] - norm.center) * norm.scale;

    const VaeEncodeInputs inputs =
        prepare_encode_inputs(norm.seq, &norm_skel, &window_raw.vertex_weights, vcfg, derive_seed(seed, 41));
    Tape<T> tape;
    Bind<T> bind{tape, vae.params, {}};
    const VaeEncodeOut<T> enc = vae.encode(bind, inputs, derive_seed(seed, 42));
    const DeformationLatent latent = latent_from_encode(tape, enc, vcfg);

    FmBatchItem item;
    item.latent = latent.sample;
    const std::vector<DenseArray<double>> feats =
        synth_frame_features(norm.seq, camera_for_sequence(norm.seq), flow.cfg.sil_resolution);
    item.cond = build_condition(flow, norm.seq.frame_mesh(0), feats, derive_seed(seed, 43),
                                &latent.fps_positions);
    return item;
}

template <typename T>
std::vector<TrainLogEntry> train_flow(FlowModel<T>& flow, const VaeModel<T>& frozen_vae,
                                      const std::vector<SynthSample>& dataset, const FlowTrainConfig& tc,
                                      std::vector<TrainLogEntry>* append_log = nullptr) {
    MESH4D_CHECK(!dataset.empty(), "train_flow: empty dataset");
    std::vector<TrainLogEntry> log;
    const int64_t start_step = flow.params.step;
    for (std::size_t k = 0; k < tc.steps; ++k) {
        const int64_t step = start_step + static_cast<int64_t>(k);
        std::vector<FmBatchItem> batch;
        for (std::size_t bi = 0; bi < tc.batch; ++bi) {
            Rng pick(derive_seed(tc.seed, 51, static_cast<uint64_t>(step) * 131ULL + bi));
            const SynthSample& sample = dataset[pick.uniform_index(dataset.size())];
            const SynthSample window = subsample_frames(
                sample, frozen_vae.cfg.T, derive_seed(tc.seed, 52, static_cast<uint64_t>(step) * 131ULL + bi));
            batch.push_back(make_flow_item(frozen_vae, flow, window,
                                           derive_seed(tc.seed, 53, static_cast<uint64_t>(step) * 131ULL + bi)));
        }
        TrainLogEntry e;
        e.step = step + 1;
        e.loss = fm_train_step(flow, batch, tc.lr, tc.weight_decay, tc.seed, step + 1);
        log.push_back(e);
        if (append_log) append_log->push_back(e);
        flow.params.step = step + 1;
    }
    return log;
}

// Decode a latent at every canonical vertex into a deformation field in the
// canonical mesh's own units. The decoder's frame-1 deviation from zero is
// reported as a diagnostic and the emitted field pins frame 1 to zero.
template <typename T>
DeformationField decode_deformation_field(const VaeModel<T>& vae, const DeformationLatent& latent,
                                          const TriMesh& canonical, double* frame1_deviation = nullptr) {
    MeshSequence canonical_seq;
    canonical_seq.faces = canonical.faces;
    canonical_seq.frames.push_back(canonical.vertices);
    const NormalizeResult norm = normalize_sequence(canonical_seq);
    const TriMesh canonical_norm = norm.seq.frame_mesh(0);

    Tape<T> tape;
    Bind<T> bind{tape, vae.params, {}};
    Var<T> pred = vae.decode(bind, tape.constant(latent.sample.template cast<T>()),
                             pack_vec3(canonical_norm.vertices));
    const DenseArray<T>& disp = tape.value(pred);

    const std::size_t Nv = canonical.vertices.size();
    const std::size_t T_frames = latent.T;
    DeformationField field;
    field.displacements.assign(T_frames, std::vector<Vec3>(Nv));
    double dev = 0.0;
    for (std::size_t t = 0; t < T_frames; ++t)
        for (std::size_t i = 0; i < Nv; ++i) {
            const Vec3 d = Vec3{static_cast<double>(disp.v[(t * Nv + i) * 3 + 0]),
                                static_cast<double>(disp.v[(t * Nv + i) * 3 + 1]),
                                static_cast<double>(disp.v[(t * Nv + i) * 3 + 2])} /
                           norm.scale;
            if (t == 0) {
                dev += d.norm();
                continue;  // the field maps frame 1 to itself
            }
            field.displacements[t][i] = d;
        }
    if (frame1_deviation) *frame1_deviation = dev / static_cast<double>(Nv);
    return field;
}

// Full inference: condition on the canonical mesh and per-frame silhouettes,
// sample a latent, decode the deformation field at every vertex, and apply it.
template <typename T>
MeshSequence sample_deformed_sequence(const VaeModel<T>& vae, const FlowModel<T>& flow, const TriMesh& canonical,
                                      const std::vector<std::vector<uint8_t>>& silhouettes,
                                      std::size_t sil_resolution, uint64_t seed,
                                      DeformationLatent* latent_out = nullptr) {
    const FlowConfig& cfg = flow.cfg;
    MESH4D_CHECK(silhouettes.size() == cfg.T, "sample_deformed_sequence: need one silhouette per frame");

    MeshSequence canonical_seq;
    canonical_seq.faces = canonical.faces;
    canonical_seq.frames.push_back(canonical.vertices);
    const NormalizeResult norm = normalize_sequence(canonical_seq);
    const TriMesh canonical_norm = norm.seq.frame_mesh(0);

    std::vector<DenseArray<double>> feats;
    for (const auto& sil : silhouettes)
        feats.push_back(features_from_silhouette(sil, sil_resolution).tokens);

    const ConditionBundle cond = build_condition(flow, canonical_norm, feats, derive_seed(seed, 61));
    const DeformationLatent latent = euler_sample(flow, cond, derive_seed(seed, 62));
    if (latent_out) *latent_out = latent;

    const DeformationField field = decode_deformation_field(vae, latent, canonical);
    return apply_deformation(canonical, field);
}

}  // namespace mesh4d
