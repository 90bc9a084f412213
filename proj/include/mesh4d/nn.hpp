#pragma once

#include <string>
#include <vector>

#include "mesh4d/autograd.hpp"
#include "mesh4d/common.hpp"
#include "mesh4d/tensor.hpp"

namespace mesh4d {

// ---------------------------------------------------------------------------
// Positional embedding
// ---------------------------------------------------------------------------

inline std::size_t fourier_embedding_width(std::size_t coord_dim, std::size_t num_freqs) {
    return coord_dim * (2 * num_freqs + 1);
}

// Raw coordinates concatenated with sin/cos at frequencies 2^0*pi ..
// 2^(F-1)*pi per axis. Layout per point: [coords, sin(f_k * coords),
// cos(f_k * coords) for each k].
template <typename T>
DenseArray<T> fourier_positional_embedding(const DenseArray<T>& coords, std::size_t num_freqs) {
    const std::size_t d = coords.cols();
    const std::size_t rows = coords.rows();
    const std::size_t w = fourier_embedding_width(d, num_freqs);
    DenseArray<T> out({rows, w});
    for (std::size_t r = 0; r < rows; ++r) {
        std::size_t o = 0;
        for (std::size_t j = 0; j < d; ++j) out.v[r * w + o++] = coords.v[r * d + j];
        for (std::size_t k = 0; k < num_freqs; ++k) {
            const double f = std::pow(2.0, static_cast<double>(k)) * M_PI;
            for (std::size_t j = 0; j < d; ++j)
                out.v[r * w + o++] = static_cast<T>(std::sin(f * static_cast<double>(coords.v[r * d + j])));
            for (std::size_t j = 0; j < d; ++j)
                out.v[r * w + o++] = static_cast<T>(std::cos(f * static_cast<double>(coords.v[r * d + j])));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Parameter initialization
// ---------------------------------------------------------------------------

template <typename T>
void init_linear(ParameterSet<T>& ps, Rng& rng, const std::string& prefix, std::size_t din, std::size_t dout) {
    DenseArray<T>& w = ps.create(prefix + ".w", {din, dout});
    const double std_dev = 1.0 / std::sqrt(static_cast<double>(din));
    for (auto& x : w.v) x = static_cast<T>(rng.normal() * std_dev);
    ps.create(prefix + ".b", {dout});
}

// Output projections of residual modules start at zero so every residual
// block is the identity at initialization.
template <typename T>
void init_linear_zero(ParameterSet<T>& ps, const std::string& prefix, std::size_t din, std::size_t dout) {
    ps.create(prefix + ".w", {din, dout});
    ps.create(prefix + ".b", {dout});
}

template <typename T>
void init_layer_norm(ParameterSet<T>& ps, const std::string& prefix, std::size_t c) {
    DenseArray<T>& g = ps.create(prefix + ".g", {c});
    std::fill(g.v.begin(), g.v.end(), T(1));
    ps.create(prefix + ".b", {c});
}

template <typename T>
void init_mha(ParameterSet<T>& ps, Rng& rng, const std::string& prefix, std::size_t c, bool zero_out) {
    init_linear(ps, rng, prefix + ".q", c, c);
    init_linear(ps, rng, prefix + ".k", c, c);
    init_linear(ps, rng, prefix + ".v", c, c);
    if (zero_out)
        init_linear_zero(ps, prefix + ".out", c, c);
    else
        init_linear(ps, rng, prefix + ".out", c, c);
}

template <typename T>
void init_mlp(ParameterSet<T>& ps, Rng& rng, const std::string& prefix, std::size_t c, bool zero_out,
              std::size_t hidden_mult = 4) {
    init_linear(ps, rng, prefix + ".fc1", c, hidden_mult * c);
    if (zero_out)
        init_linear_zero(ps, prefix + ".fc2", hidden_mult * c, c);
    else
        init_linear(ps, rng, prefix + ".fc2", hidden_mult * c, c);
}

// ---------------------------------------------------------------------------
// Forward helpers
// ---------------------------------------------------------------------------

template <typename T>
Var<T> linear_fwd(Bind<T>& b, const std::string& prefix, Var<T> x) {
    return add_bias(matmul(x, b(prefix + ".w")), b(prefix + ".b"));
}

template <typename T>
Var<T> layer_norm_fwd(Bind<T>& b, const std::string& prefix, Var<T> x) {
    return layer_norm(x, b(prefix + ".g"), b(prefix + ".b"));
}

// Learned multi-head attention: Q/K/V/output projections around the fused
// core. `groups` partitions rows into independent attention instances.
template <typename T>
Var<T> mha_fwd(Bind<T>& b, const std::string& prefix, Var<T> q_in, Var<T> kv_in, int heads,
               std::vector<AttnGroup> groups, const AttentionMask* mask = nullptr,
               std::vector<double> rope_pos_q = {}, std::vector<double> rope_pos_k = {}) {
    Var<T> q = linear_fwd(b, prefix + ".q", q_in);
    Var<T> k = linear_fwd(b, prefix + ".k", kv_in);
    Var<T> v = linear_fwd(b, prefix + ".v", kv_in);
    Var<T> core = attention_core(q, k, v, heads, std::move(groups), mask, std::move(rope_pos_q),
                                 std::move(rope_pos_k));
    return linear_fwd(b, prefix + ".out", core);
}

// The spec-level op: self/cross attention over a single group with an
// optional additive mask.
template <typename T>
Var<T> masked_multihead_attention(Bind<T>& b, const std::string& prefix, Var<T> queries, Var<T> keys_values,
                                  const AttentionMask* mask, int heads) {
    auto& t = *queries.tape;
    return mha_fwd(b, prefix, queries, keys_values, heads,
                   full_attention_group(t.value(queries).rows(), t.value(keys_values).rows()), mask);
}

template <typename T>
Var<T> mlp_fwd(Bind<T>& b, const std::string& prefix, Var<T> x) {
    return linear_fwd(b, prefix + ".fc2", silu(linear_fwd(b, prefix + ".fc1", x)));
}

// Rotary temporal encoding on a frame-major (T*N) x c token array.
template <typename T>
Var<T> rope_temporal(Var<T> tokens, std::size_t frames, std::size_t tokens_per_frame,
                     const std::vector<double>& frame_indices) {
    MESH4D_CHECK(frame_indices.size() == frames, "rope_temporal: one index per frame required");
    MESH4D_CHECK(tokens.tape->value(tokens).rows() == frames * tokens_per_frame,
                 "rope_temporal: row count mismatch");
    std::vector<double> pos(frames * tokens_per_frame);
    for (std::size_t t = 0; t < frames; ++t)
        for (std::size_t n = 0; n < tokens_per_frame; ++n) pos[t * tokens_per_frame + n] = frame_indices[t];
    return rope_rows(tokens, std::move(pos));
}

// z = mean + exp(0.5 * log_variance) * eps; gradients flow to mean and
// log_variance only.
template <typename T>
Var<T> reparameterize(Var<T> mean, Var<T> log_variance, const DenseArray<T>& eps) {
    MESH4D_CHECK(mean.tape->value(mean).same_shape(eps), "reparameterize: noise shape mismatch");
    Var<T> std_dev = exp_op(scale(log_variance, T(0.5)));
    return add(mean, mul_const(std_dev, eps));
}

template <typename T>
DenseArray<T> draw_standard_normal(std::vector<std::size_t> shape, uint64_t seed) {
    Rng rng(seed);
    return DenseArray<T>::randn(std::move(shape), rng);
}

// mean over all entries of 0.5 * (exp(lv) + mean^2 - 1 - lv)
template <typename T>
Var<T> kl_standard_normal(Var<T> mean, Var<T> log_variance) {
    Var<T> m2 = mul(mean, mean);
    Var<T> term = add(exp_op(log_variance), m2);
    term = add_scalar(term, T(-1));
    term = sub(term, log_variance);
    return scale(mean_all(term), T(0.5));
}

// Sum over frames of the per-frame mean squared 3-vector error.
template <typename T>
Var<T> mse_rows(Var<T> pred, const DenseArray<T>& target) {
    Tape<T>& t = *pred.tape;
    MESH4D_CHECK(t.value(pred).same_shape(target), "mse_rows: shape mismatch");
    Var<T> d = add_const(scale(pred, T(-1)), target);
    Var<T> sq = mul(d, d);
    return scale(sum_all(sq), T(1) / static_cast<T>(target.rows()));
}

}  // namespace mesh4d
