#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "mesh4d/common.hpp"
#include "mesh4d/skeleton.hpp"
#include "mesh4d/tensor.hpp"

namespace mesh4d {

template <typename T>
class Tape;

template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    int32_t id = -1;
};

// Reverse-mode tape. Forward ops append nodes; backward replays closures in
// reverse order. One tape per forward pass; backward may run once.
template <typename T>
class Tape {
public:
    struct Diagnostics {
        std::size_t fully_masked_rows = 0;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> constant(DenseArray<T> value) { return push(std::move(value), false); }
    Var<T> leaf(DenseArray<T> value) { return push(std::move(value), true); }

    const DenseArray<T>& value(Var<T> x) const { return nodes_[x.id].value; }
    const DenseArray<T>& grad(Var<T> x) const { return nodes_[x.id].grad; }
    bool has_grad(Var<T> x) const { return !nodes_[x.id].grad.v.empty(); }
    bool requires_grad(Var<T> x) const { return nodes_[x.id].requires_grad; }

    void backward(Var<T> loss) {
        MESH4D_CHECK(!backward_done_, "backward: tape already consumed");
        MESH4D_CHECK(value(loss).numel() == 1, "backward: loss must be scalar");
        MESH4D_CHECK(requires_grad(loss), "backward: loss does not depend on any leaf");
        backward_done_ = true;
        ensure_grad(loss.id).v[0] = T(1);
        for (int32_t i = loss.id; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.back && !n.grad.v.empty()) n.back(*this);
        }
    }

    Diagnostics diag;

    // --- used by op implementations ---
    DenseArray<T>& ensure_grad(int32_t id) {
        Node& n = nodes_[id];
        if (n.grad.v.empty()) n.grad = DenseArray<T>::zeros(n.value.shape);
        return n.grad;
    }

    Var<T> push(DenseArray<T> value, bool needs_grad) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = needs_grad;
        nodes_.push_back(std::move(n));
        return Var<T>{this, static_cast<int32_t>(nodes_.size() - 1)};
    }

    void set_back(int32_t id, std::function<void(Tape&)> back) { nodes_[id].back = std::move(back); }

private:
    struct Node {
        DenseArray<T> value;
        DenseArray<T> grad;
        bool requires_grad = false;
        std::function<void(Tape&)> back;
    };
    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

namespace detail {

// Record an op: value + a backward functor that receives (tape, output var).
template <typename T, typename F>
Var<T> make_op(Tape<T>& t, DenseArray<T> value, bool needs_grad, F back) {
    Var<T> y = t.push(std::move(value), needs_grad);
    if (needs_grad) t.set_back(y.id, [y, back = std::move(back)](Tape<T>& tp) mutable { back(tp, y); });
    return y;
}

template <typename T>
void axpy(DenseArray<T>& dst, const DenseArray<T>& src, T scale = T(1)) {
    for (std::size_t i = 0; i < dst.v.size(); ++i) dst.v[i] += scale * src.v[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise / shape ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    Tape<T>& t = *a.tape;
    MESH4D_CHECK(a.tape == b.tape && t.value(a).same_shape(t.value(b)), "add: shape mismatch");
    DenseArray<T> out = t.value(a);
    detail::axpy(out, t.value(b));
    const bool req = t.requires_grad(a) || t.requires_grad(b);
    return detail::make_op(t, std::move(out), req, [a, b](Tape<T>& tp, Var<T> y) {
        const DenseArray<T>& dy = tp.grad(y);
        if (tp.requires_grad(a)) detail::axpy(tp.ensure_grad(a.id), dy);
        if (tp.requires_grad(b)) detail::axpy(tp.ensure_grad(b.id), dy);
    });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    Tape<T>& t = *a.tape;
    MESH4D_CHECK(a.tape == b.tape && t.value(a).same_shape(t.value(b)), "sub: shape mismatch");
    DenseArray<T> out = t.value(a);
    detail::axpy(out, t.value(b), T(-1));
    const bool req = t.requires_grad(a) || t.requires_grad(b);
    return detail::make_op(t, std::move(out), req, [a, b](Tape<T>& tp, Var<T> y) {
        const DenseArray<T>& dy = tp.grad(y);
        if (tp.requires_grad(a)) detail::axpy(tp.ensure_grad(a.id), dy);
        if (tp.requires_grad(b)) detail::axpy(tp.ensure_grad(b.id), dy, T(-1));
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    Tape<T>& t = *a.tape;
    MESH4D_CHECK(a.tape == b.tape && t.value(a).same_shape(t.value(b)), "mul: shape mismatch");
    DenseArray<T> out = t.value(a);
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] *= t.value(b).v[i];
    const bool req = t.requires_grad(a) || t.requires_grad(b);
    return detail::make_op(t, std::move(out), req, [a, b](Tape<T>& tp, Var<T> y) {
        const DenseArray<T>& dy = tp.grad(y);
        if (tp.requires_grad(a)) {
            DenseArray<T>& da = tp.ensure_grad(a.id);
            const auto& bv = tp.value(b).v;
            for (std::size_t i = 0; i < da.v.size(); ++i) da.v[i] += dy.v[i] * bv[i];
        }
        if (tp.requires_grad(b)) {
            DenseArray<T>& db = tp.ensure_grad(b.id);
            const auto& av = tp.value(a).v;
            for (std::size_t i = 0; i < db.v.size(); ++i) db.v[i] += dy.v[i] * av[i];
        }
    });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
    Tape<T>& t = *a.tape;
    DenseArray<T> out = t.value(a);
    for (auto& x : out.v) x *= s;
    return detail::make_op(t, std::move(out), t.requires_grad(a), [a, s](Tape<T>& tp, Var<T> y) {
        detail::axpy(tp.ensure_grad(a.id), tp.grad(y), s);
    });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T s) {
    Tape<T>& t = *a.tape;
    DenseArray<T> out = t.value(a);
    for (auto& x : out.v) x += s;
    return detail::make_op(t, std::move(out), t.requires_grad(a), [a](Tape<T>& tp, Var<T> y) {
        detail::axpy(tp.ensure_grad(a.id), tp.grad(y));
    });
}

template <typename T>
Var<T> exp_op(Var<T> a) {
    Tape<T>& t = *a.tape;
    DenseArray<T> out = t.value(a);
    for (auto& x : out.v) x = std::exp(x);
    return detail::make_op(t, std::move(out), t.requires_grad(a), [a](Tape<T>& tp, Var<T> y) {
        DenseArray<T>& da = tp.ensure_grad(a.id);
        const auto& yv = tp.value(y).v;
        const auto& dy = tp.grad(y).v;
        for (std::size_t i = 0; i < da.v.size(); ++i) da.v[i] += dy[i] * yv[i];
    });
}

// x * sigmoid(x): the smooth gate used between MLP layers.
template <typename T>
Var<T> silu(Var<T> a) {
    Tape<T>& t = *a.tape;
    DenseArray<T> out = t.value(a);
    for (auto& x : out.v) {
        const T s = T(1) / (T(1) + std::exp(-x));
        x = x * s;
    }
    return detail::make_op(t, std::move(out), t.requires_grad(a), [a](Tape<T>& tp, Var<T> y) {
        DenseArray<T>& da = tp.ensure_grad(a.id);
        const auto& av = tp.value(a).v;
        const auto& dy = tp.grad(y).v;
        for (std::size_t i = 0; i < da.v.size(); ++i) {
            const T s = T(1) / (T(1) + std::exp(-av[i]));
            da.v[i] += dy[i] * (s + av[i] * s * (T(1) - s));
        }
    });
}

template <typename T>
Var<T> mul_const(Var<T> a, DenseArray<T> c) {
    Tape<T>& t = *a.tape;
    MESH4D_CHECK(t.value(a).same_shape(c), "mul_const: shape mismatch");
    DenseArray<T> out = t.value(a);
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] *= c.v[i];
    auto cc = std::make_shared<DenseArray<T>>(std::move(c));
    return detail::make_op(t, std::move(out), t.requires_grad(a), [a, cc](Tape<T>& tp, Var<T> y) {
        DenseArray<T>& da = tp.ensure_grad(a.id);
        const auto& dy = tp.grad(y).v;
        for (std::size_t i = 0; i < da.v.size(); ++i) da.v[i] += dy[i] * cc->v[i];
    });
}

template <typename T>
Var<T> add_const(Var<T> a, const DenseArray<T>& c) {
    Tape<T>& t = *a.tape;
    MESH4D_CHECK(t.value(a).same_shape(c), "add_const: shape mismatch");
    DenseArray<T> out = t.value(a);
    detail::axpy(out, c);
    return detail::make_op(t, std::move(out), t.requires_grad(a), [a](Tape<T>& tp, Var<T> y) {
        detail::axpy(tp.ensure_grad(a.id), tp.grad(y));
    });
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, bool ta = false, bool tb = false) {
    Tape<T>& t = *a.tape;
    MESH4D_CHECK(a.tape == b.tape, "matmul: tape mismatch");
    DenseArray<T> out = matmul_data(t.value(a), ta, t.value(b), tb);
    const bool req = t.requires_grad(a) || t.requires_grad(b);
    return detail::make_op(t, std::move(out), req, [a, b, ta, tb](Tape<T>& tp, Var<T> y) {
        const DenseArray<T>& dy = tp.grad(y);
        if (tp.requires_grad(a)) {
            DenseArray<T>& da = tp.ensure_grad(a.id);
            if (!ta && !tb) matmul_acc(da, dy, false, tp.value(b), true);
            else if (ta && !tb) matmul_acc(da, tp.value(b), false, dy, true);
            else if (!ta && tb) matmul_acc(da, dy, false, tp.value(b), false);
            else matmul_acc(da, tp.value(b), true, dy, true);
        }
        if (tp.requires_grad(b)) {
            DenseArray<T>& db = tp.ensure_grad(b.id);
            if (!ta && !tb) matmul_acc(db, tp.value(a), true, dy, false);
            else if (ta && !tb) matmul_acc(db, tp.value(a), false, dy, false);
            else if (!ta && tb) matmul_acc(db, dy, true, tp.value(a), false);
            else matmul_acc(db, dy, true, tp.value(a), true);
        }
    });
}

// y[r, :] = x[r, :] + b  (bias broadcast over rows)
template <typename T>
Var<T> add_bias(Var<T> x, Var<T> b) {
    Tape<T>& t = *x.tape;
    const std::size_t c = t.value(x).cols();
    MESH4D_CHECK(t.value(b).numel() == c, "add_bias: bias width mismatch");
    DenseArray<T> out = t.value(x);
    const std::size_t rows = out.rows();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) out.v[r * c + j] += t.value(b).v[j];
    const bool req = t.requires_grad(x) || t.requires_grad(b);
    return detail::make_op(t, std::move(out), req, [x, b](Tape<T>& tp, Var<T> y) {
        const DenseArray<T>& dy = tp.grad(y);
        const std::size_t c = dy.cols(), rows = dy.rows();
        if (tp.requires_grad(x)) detail::axpy(tp.ensure_grad(x.id), dy);
        if (tp.requires_grad(b)) {
            DenseArray<T>& db = tp.ensure_grad(b.id);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < c; ++j) db.v[j] += dy.v[r * c + j];
        }
    });
}

// y[r] = x[idx[r]]; duplicate indices accumulate gradient.
template <typename T>
Var<T> gather_rows(Var<T> x, std::vector<int32_t> indices) {
    Tape<T>& t = *x.tape;
    const std::size_t c = t.value(x).cols();
    const std::size_t rows_in = t.value(x).rows();
    DenseArray<T> out({indices.size(), c});
    for (std::size_t r = 0; r < indices.size(); ++r) {
        MESH4D_CHECK(indices[r] >= 0 && static_cast<std::size_t>(indices[r]) < rows_in,
                     "gather_rows: index out of range");
        for (std::size_t j = 0; j < c; ++j) out.v[r * c + j] = t.value(x).v[indices[r] * c + j];
    }
    auto idx = std::make_shared<std::vector<int32_t>>(std::move(indices));
    return detail::make_op(t, std::move(out), t.requires_grad(x), [x, idx](Tape<T>& tp, Var<T> y) {
        DenseArray<T>& dx = tp.ensure_grad(x.id);
        const DenseArray<T>& dy = tp.grad(y);
        const std::size_t c = dy.cols();
        for (std::size_t r = 0; r < idx->size(); ++r)
            for (std::size_t j = 0; j < c; ++j) dx.v[(*idx)[r] * c + j] += dy.v[r * c + j];
    });
}

template <typename T>
Var<T> sum_all(Var<T> a) {
    Tape<T>& t = *a.tape;
    T s = T(0);
    for (T x : t.value(a).v) s += x;
    DenseArray<T> out({1});
    out.v[0] = s;
    return detail::make_op(t, std::move(out), t.requires_grad(a), [a](Tape<T>& tp, Var<T> y) {
        const T dy = tp.grad(y).v[0];
        DenseArray<T>& da = tp.ensure_grad(a.id);
        for (auto& g : da.v) g += dy;
    });
}

template <typename T>
Var<T> mean_all(Var<T> a) {
    const std::size_t n = a.tape->value(a).numel();
    return scale(sum_all(a), T(1) / static_cast<T>(n));
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
struct LnSaved {
    DenseArray<T> xhat;          // rows x c
    std::vector<T> inv_std;      // rows
};

template <typename T>
std::shared_ptr<LnSaved<T>> layer_norm_forward(const DenseArray<T>& x, DenseArray<T>& out, T eps) {
    const std::size_t rows = x.rows(), c = x.cols();
    auto saved = std::make_shared<LnSaved<T>>();
    saved->xhat = DenseArray<T>({rows, c});
    saved->inv_std.resize(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        T mean = T(0);
        for (std::size_t j = 0; j < c; ++j) mean += x.v[r * c + j];
        mean /= static_cast<T>(c);
        T var = T(0);
        for (std::size_t j = 0; j < c; ++j) {
            const T d = x.v[r * c + j] - mean;
            var += d * d;
        }
        var /= static_cast<T>(c);
        const T inv = T(1) / std::sqrt(var + eps);
        saved->inv_std[r] = inv;
        for (std::size_t j = 0; j < c; ++j) {
            const T xh = (x.v[r * c + j] - mean) * inv;
            saved->xhat.v[r * c + j] = xh;
            out.v[r * c + j] = xh;
        }
    }
    return saved;
}

template <typename T>
void layer_norm_backward_rows(const DenseArray<T>& dxhat, const LnSaved<T>& saved, DenseArray<T>& dx) {
    const std::size_t rows = dxhat.rows(), c = dxhat.cols();
    for (std::size_t r = 0; r < rows; ++r) {
        T sum_d = T(0), sum_dx = T(0);
        for (std::size_t j = 0; j < c; ++j) {
            sum_d += dxhat.v[r * c + j];
            sum_dx += dxhat.v[r * c + j] * saved.xhat.v[r * c + j];
        }
        const T inv_c = T(1) / static_cast<T>(c);
        for (std::size_t j = 0; j < c; ++j) {
            const T term = dxhat.v[r * c + j] - sum_d * inv_c - saved.xhat.v[r * c + j] * sum_dx * inv_c;
            dx.v[r * c + j] += saved.inv_std[r] * term;
        }
    }
}

}  // namespace detail

// Per-row normalization over the channel axis, learned gain/bias, eps 1e-5.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
    Tape<T>& t = *x.tape;
    const std::size_t c = t.value(x).cols();
    MESH4D_CHECK(t.value(gain).numel() == c && t.value(bias).numel() == c, "layer_norm: affine width mismatch");
    DenseArray<T> out(t.value(x).shape);
    auto saved = detail::layer_norm_forward(t.value(x), out, eps);
    const std::size_t rows = out.rows();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j)
            out.v[r * c + j] = out.v[r * c + j] * t.value(gain).v[j] + t.value(bias).v[j];
    const bool req = t.requires_grad(x) || t.requires_grad(gain) || t.requires_grad(bias);
    return detail::make_op(t, std::move(out), req, [x, gain, bias, saved](Tape<T>& tp, Var<T> y) {
        const DenseArray<T>& dy = tp.grad(y);
        const std::size_t rows = dy.rows(), c = dy.cols();
        if (tp.requires_grad(gain)) {
            DenseArray<T>& dg = tp.ensure_grad(gain.id);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < c; ++j) dg.v[j] += dy.v[r * c + j] * saved->xhat.v[r * c + j];
        }
        if (tp.requires_grad(bias)) {
            DenseArray<T>& db = tp.ensure_grad(bias.id);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < c; ++j) db.v[j] += dy.v[r * c + j];
        }
        if (tp.requires_grad(x)) {
            DenseArray<T> dxhat({rows, c});
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < c; ++j) dxhat.v[r * c + j] = dy.v[r * c + j] * tp.value(gain).v[j];
            detail::layer_norm_backward_rows(dxhat, *saved, tp.ensure_grad(x.id));
        }
    });
}

// Normalization without learned affine (used under adaptive modulation).
template <typename T>
Var<T> layer_norm_plain(Var<T> x, T eps = T(1e-5)) {
    Tape<T>& t = *x.tape;
    DenseArray<T> out(t.value(x).shape);
    auto saved = detail::layer_norm_forward(t.value(x), out, eps);
    return detail::make_op(t, std::move(out), t.requires_grad(x), [x, saved](Tape<T>& tp, Var<T> y) {
        if (!tp.requires_grad(x)) return;
        detail::layer_norm_backward_rows(tp.grad(y), *saved, tp.ensure_grad(x.id));
    });
}

// y[r, j] = x[r, j] * (1 + s[j]) + b[j]  (adaptive modulation, s/b broadcast over rows)
template <typename T>
Var<T> row_affine(Var<T> x, Var<T> s, Var<T> b) {
    Tape<T>& t = *x.tape;
    const std::size_t c = t.value(x).cols(), rows = t.value(x).rows();
    MESH4D_CHECK(t.value(s).numel() == c && t.value(b).numel() == c, "row_affine: width mismatch");
    DenseArray<T> out(t.value(x).shape);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j)
            out.v[r * c + j] = t.value(x).v[r * c + j] * (T(1) + t.value(s).v[j]) + t.value(b).v[j];
    const bool req = t.requires_grad(x) || t.requires_grad(s) || t.requires_grad(b);
    return detail::make_op(t, std::move(out), req, [x, s, b](Tape<T>& tp, Var<T> y) {
        const DenseArray<T>& dy = tp.grad(y);
        const std::size_t rows = dy.rows(), c = dy.cols();
        if (tp.requires_grad(x)) {
            DenseArray<T>& dx = tp.ensure_grad(x.id);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < c; ++j) dx.v[r * c + j] += dy.v[r * c + j] * (T(1) + tp.value(s).v[j]);
        }
        if (tp.requires_grad(s)) {
            DenseArray<T>& ds = tp.ensure_grad(s.id);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < c; ++j) ds.v[j] += dy.v[r * c + j] * tp.value(x).v[r * c + j];
        }
        if (tp.requires_grad(b)) {
            DenseArray<T>& db = tp.ensure_grad(b.id);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < c; ++j) db.v[j] += dy.v[r * c + j];
        }
    });
}

// ---------------------------------------------------------------------------
// Rotary temporal encoding
// ---------------------------------------------------------------------------

namespace detail {

// Rotate consecutive channel pairs of row r by theta_k * pos[r],
// theta_k = base^(-2k/c). dir=-1 applies the inverse rotation.
template <typename T>
void rope_rotate(DenseArray<T>& x, const std::vector<double>& pos, double base, int dir) {
    const std::size_t rows = x.rows(), c = x.cols();
    const std::size_t pairs = c / 2;
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t k = 0; k < pairs; ++k) {
            const double theta = std::pow(base, -2.0 * static_cast<double>(k) / static_cast<double>(c));
            const double ang = dir * theta * pos[r];
            const T ca = static_cast<T>(std::cos(ang)), sa = static_cast<T>(std::sin(ang));
            T& x0 = x.v[r * c + 2 * k];
            T& x1 = x.v[r * c + 2 * k + 1];
            const T a = x0, b = x1;
            x0 = a * ca - b * sa;
            x1 = a * sa + b * ca;
        }
    }
}

}  // namespace detail

// Rotary encoding over the full channel axis; positions give each row's
// temporal index. Norm-preserving; inner products depend on index differences.
template <typename T>
Var<T> rope_rows(Var<T> x, std::vector<double> positions, double base = 10000.0) {
    Tape<T>& t = *x.tape;
    MESH4D_CHECK(t.value(x).cols() % 2 == 0, "rope_rows: channel width must be even");
    MESH4D_CHECK(positions.size() == t.value(x).rows(), "rope_rows: one position per row required");
    DenseArray<T> out = t.value(x);
    detail::rope_rotate(out, positions, base, +1);
    auto pos = std::make_shared<std::vector<double>>(std::move(positions));
    return detail::make_op(t, std::move(out), t.requires_grad(x), [x, pos, base](Tape<T>& tp, Var<T> y) {
        DenseArray<T> dy = tp.grad(y);
        detail::rope_rotate(dy, *pos, base, -1);
        detail::axpy(tp.ensure_grad(x.id), dy);
    });
}

// ---------------------------------------------------------------------------
// Fused grouped multi-head attention core
// ---------------------------------------------------------------------------

// One independent attention instance: q_rows attend to kv_rows.
struct AttnGroup {
    std::vector<int32_t> q_rows;
    std::vector<int32_t> kv_rows;
};

inline std::vector<AttnGroup> full_attention_group(std::size_t q_rows, std::size_t kv_rows) {
    AttnGroup g;
    g.q_rows.resize(q_rows);
    g.kv_rows.resize(kv_rows);
    for (std::size_t i = 0; i < q_rows; ++i) g.q_rows[i] = static_cast<int32_t>(i);
    for (std::size_t i = 0; i < kv_rows; ++i) g.kv_rows[i] = static_cast<int32_t>(i);
    return {g};
}

namespace detail {

template <typename T>
void gather_block(const DenseArray<T>& src, const std::vector<int32_t>& rows, std::size_t off, std::size_t dh,
                  DenseArray<T>& dst) {
    const std::size_t c = src.cols();
    for (std::size_t r = 0; r < rows.size(); ++r)
        std::memcpy(&dst.v[r * dh], &src.v[rows[r] * c + off], dh * sizeof(T));
}

template <typename T>
void scatter_add_block(DenseArray<T>& dst, const std::vector<int32_t>& rows, std::size_t off, std::size_t dh,
                       const DenseArray<T>& src) {
    const std::size_t c = dst.cols();
    for (std::size_t r = 0; r < rows.size(); ++r) {
        T* d = &dst.v[rows[r] * c + off];
        const T* s = &src.v[r * dh];
        for (std::size_t j = 0; j < dh; ++j) d[j] += s[j];
    }
}

template <typename T>
struct AttnSaved {
    std::vector<DenseArray<T>> probs;            // per (group, head): Gq x Gk
    std::vector<std::vector<uint8_t>> row_uniform;  // per group: 1 iff the q row was fully masked
    DenseArray<T> q_rot, k_rot;                  // post-rope inputs
    std::vector<AttnGroup> groups;
    std::shared_ptr<std::vector<double>> pos_q, pos_k;
    std::shared_ptr<AttentionMask> mask_copy;
    int heads = 1;
    double rope_base = 10000.0;
};

}  // namespace detail

// softmax((Q K^T + mask) / sqrt(d_head)) V per head and group. A mask (if
// given) must match the q/kv extents of every group and is shared across
// them; masked entries carry the -inf sentinel and are excluded from the
// softmax. A fully-masked row yields the uniform average of values and bumps
// the tape diagnostic counter. Optional rotary positions are applied to q and
// k (full channel width) before the head split.
template <typename T>
Var<T> attention_core(Var<T> q, Var<T> k, Var<T> v, int heads, std::vector<AttnGroup> groups,
                      const AttentionMask* mask = nullptr, std::vector<double> rope_pos_q = {},
                      std::vector<double> rope_pos_k = {}, double rope_base = 10000.0) {
    Tape<T>& t = *q.tape;
    MESH4D_CHECK(q.tape == k.tape && q.tape == v.tape, "attention_core: tape mismatch");
    const std::size_t c = t.value(q).cols();
    MESH4D_CHECK(t.value(k).cols() == c && t.value(v).cols() == c, "attention_core: channel mismatch");
    MESH4D_CHECK(heads >= 1 && c % static_cast<std::size_t>(heads) == 0,
                 "attention_core: channels not divisible by heads");
    MESH4D_CHECK(t.value(k).rows() == t.value(v).rows(), "attention_core: key/value row mismatch");
    MESH4D_NUMERIC_CHECK(t.value(q).all_finite() && t.value(k).all_finite() && t.value(v).all_finite(),
                         "attention_core: non-finite input");
    if (mask)
        for (const AttnGroup& g : groups)
            MESH4D_CHECK(mask->rows == g.q_rows.size() && mask->cols == g.kv_rows.size(),
                         "attention_core: mask shape mismatch");

    const std::size_t dh = c / static_cast<std::size_t>(heads);
    const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));

    auto saved = std::make_shared<detail::AttnSaved<T>>();
    saved->groups = std::move(groups);
    saved->heads = heads;
    saved->rope_base = rope_base;
    if (mask) saved->mask_copy = std::make_shared<AttentionMask>(*mask);
    saved->q_rot = t.value(q);
    saved->k_rot = t.value(k);
    if (!rope_pos_q.empty()) {
        MESH4D_CHECK(rope_pos_q.size() == t.value(q).rows() && rope_pos_k.size() == t.value(k).rows(),
                     "attention_core: rope position count mismatch");
        saved->pos_q = std::make_shared<std::vector<double>>(std::move(rope_pos_q));
        saved->pos_k = std::make_shared<std::vector<double>>(std::move(rope_pos_k));
        detail::rope_rotate(saved->q_rot, *saved->pos_q, rope_base, +1);
        detail::rope_rotate(saved->k_rot, *saved->pos_k, rope_base, +1);
    }

    DenseArray<T> out(t.value(q).shape);
    const AttentionMask* m = saved->mask_copy ? saved->mask_copy.get() : nullptr;
    for (const AttnGroup& g : saved->groups) {
        const std::size_t Gq = g.q_rows.size(), Gk = g.kv_rows.size();
        std::vector<uint8_t> uniform_rows(Gq, 0);
        if (m)
            for (std::size_t a = 0; a < Gq; ++a) {
                bool all_masked = true;
                for (std::size_t bI = 0; bI < Gk && all_masked; ++bI)
                    if (!m->masked(a, bI)) all_masked = false;
                if (all_masked) {
                    uniform_rows[a] = 1;
                    t.diag.fully_masked_rows += 1;
                }
            }
        DenseArray<T> qg({Gq, dh}), kg({Gk, dh}), vg({Gk, dh});
        for (int h = 0; h < heads; ++h) {
            const std::size_t off = static_cast<std::size_t>(h) * dh;
            detail::gather_block(saved->q_rot, g.q_rows, off, dh, qg);
            detail::gather_block(saved->k_rot, g.kv_rows, off, dh, kg);
            detail::gather_block(t.value(v), g.kv_rows, off, dh, vg);
            DenseArray<T> probs = matmul_data(qg, false, kg, true);  // Gq x Gk logits
            for (std::size_t a = 0; a < Gq; ++a) {
                T* row = &probs.v[a * Gk];
                if (uniform_rows[a]) {
                    for (std::size_t bI = 0; bI < Gk; ++bI) row[bI] = T(1) / static_cast<T>(Gk);
                    continue;
                }
                T maxl = -std::numeric_limits<T>::infinity();
                for (std::size_t bI = 0; bI < Gk; ++bI) {
                    if (m && m->masked(a, bI)) continue;
                    const T l = row[bI] * inv_sqrt_dh;
                    row[bI] = l;
                    if (l > maxl) maxl = l;
                }
                T denom = T(0);
                for (std::size_t bI = 0; bI < Gk; ++bI) {
                    if (m && m->masked(a, bI)) {
                        row[bI] = T(0);
                        continue;
                    }
                    row[bI] = std::exp(row[bI] - maxl);
                    denom += row[bI];
                }
                for (std::size_t bI = 0; bI < Gk; ++bI) row[bI] /= denom;
            }
            const DenseArray<T> yg = matmul_data(probs, false, vg, false);
            detail::scatter_add_block(out, g.q_rows, off, dh, yg);
            saved->probs.push_back(std::move(probs));
        }
        saved->row_uniform.push_back(std::move(uniform_rows));
    }

    const bool req = t.requires_grad(q) || t.requires_grad(k) || t.requires_grad(v);
    return detail::make_op(t, std::move(out), req, [q, k, v, saved, inv_sqrt_dh, dh, c](Tape<T>& tp, Var<T> y) {
        const DenseArray<T>& dy = tp.grad(y);
        DenseArray<T> dq_rot(tp.value(q).shape), dk_rot(tp.value(k).shape);
        const bool need_qk = tp.requires_grad(q) || tp.requires_grad(k);
        const bool need_v = tp.requires_grad(v);
        std::size_t prob_idx = 0;
        for (std::size_t gi = 0; gi < saved->groups.size(); ++gi) {
            const AttnGroup& g = saved->groups[gi];
            const std::size_t Gq = g.q_rows.size(), Gk = g.kv_rows.size();
            const std::vector<uint8_t>& uniform_rows = saved->row_uniform[gi];
            DenseArray<T> dyg({Gq, dh}), kg({Gk, dh}), qg({Gq, dh}), vg({Gk, dh});
            for (int h = 0; h < saved->heads; ++h) {
                const std::size_t off = static_cast<std::size_t>(h) * dh;
                const DenseArray<T>& probs = saved->probs[prob_idx++];
                detail::gather_block(dy, g.q_rows, off, dh, dyg);
                if (need_v) {
                    DenseArray<T> dvg = matmul_data(probs, true, dyg, false);
                    detail::scatter_add_block(tp.ensure_grad(v.id), g.kv_rows, off, dh, dvg);
                }
                if (!need_qk) continue;
                detail::gather_block(tp.value(v), g.kv_rows, off, dh, vg);
                DenseArray<T> ds = matmul_data(dyg, false, vg, true);  // dP, reused in place for dS
                for (std::size_t a = 0; a < Gq; ++a) {
                    T* dsr = &ds.v[a * Gk];
                    const T* pr = &probs.v[a * Gk];
                    if (uniform_rows[a]) {
                        for (std::size_t bI = 0; bI < Gk; ++bI) dsr[bI] = T(0);
                        continue;
                    }
                    T dot = T(0);
                    for (std::size_t bI = 0; bI < Gk; ++bI) dot += pr[bI] * dsr[bI];
                    for (std::size_t bI = 0; bI < Gk; ++bI) dsr[bI] = pr[bI] * (dsr[bI] - dot) * inv_sqrt_dh;
                }
                detail::gather_block(saved->q_rot, g.q_rows, off, dh, qg);
                detail::gather_block(saved->k_rot, g.kv_rows, off, dh, kg);
                DenseArray<T> dqg = matmul_data(ds, false, kg, false);
                DenseArray<T> dkg = matmul_data(ds, true, qg, false);
                detail::scatter_add_block(dq_rot, g.q_rows, off, dh, dqg);
                detail::scatter_add_block(dk_rot, g.kv_rows, off, dh, dkg);
            }
        }
        if (tp.requires_grad(q)) {
            if (saved->pos_q) detail::rope_rotate(dq_rot, *saved->pos_q, saved->rope_base, -1);
            detail::axpy(tp.ensure_grad(q.id), dq_rot);
        }
        if (tp.requires_grad(k)) {
            if (saved->pos_k) detail::rope_rotate(dk_rot, *saved->pos_k, saved->rope_base, -1);
            detail::axpy(tp.ensure_grad(k.id), dk_rot);
        }
    });
}

// ---------------------------------------------------------------------------
// Parameters and optimizer
// ---------------------------------------------------------------------------

template <typename T>
struct ParameterSet {
    struct Entry {
        DenseArray<T> value, m, v;
    };
    std::map<std::string, Entry> entries;
    int64_t step = 0;

    DenseArray<T>& create(const std::string& name, std::vector<std::size_t> shape) {
        MESH4D_CHECK(entries.find(name) == entries.end(), "ParameterSet: duplicate parameter " + name);
        Entry e;
        e.value = DenseArray<T>::zeros(shape);
        e.m = DenseArray<T>::zeros(shape);
        e.v = DenseArray<T>::zeros(std::move(shape));
        return entries.emplace(name, std::move(e)).first->second.value;
    }

    bool has(const std::string& name) const { return entries.find(name) != entries.end(); }

    Entry& at(const std::string& name) {
        auto it = entries.find(name);
        MESH4D_CHECK(it != entries.end(), "ParameterSet: unknown parameter " + name);
        return it->second;
    }
    const Entry& at(const std::string& name) const {
        auto it = entries.find(name);
        MESH4D_CHECK(it != entries.end(), "ParameterSet: unknown parameter " + name);
        return it->second;
    }

    std::size_t total_scalars() const {
        std::size_t n = 0;
        for (const auto& [k, e] : entries) n += e.value.numel();
        return n;
    }

    template <typename U>
    ParameterSet<U> cast() const {
        ParameterSet<U> out;
        out.step = step;
        for (const auto& [k, e] : entries)
            out.entries.emplace(k, typename ParameterSet<U>::Entry{e.value.template cast<U>(),
                                                                   e.m.template cast<U>(),
                                                                   e.v.template cast<U>()});
        return out;
    }
};

// Binds parameters into a tape as leaves, once per name per tape.
template <typename T>
struct Bind {
    Tape<T>& tape;
    const ParameterSet<T>& params;
    std::map<std::string, Var<T>> bound;

    Var<T> operator()(const std::string& name) {
        auto it = bound.find(name);
        if (it != bound.end()) return it->second;
        Var<T> v = tape.leaf(params.at(name).value);
        bound.emplace(name, v);
        return v;
    }

    // Gradients after backward; parameters never touched by the graph get zeros.
    std::map<std::string, DenseArray<T>> grads() const {
        std::map<std::string, DenseArray<T>> g;
        for (const auto& [name, entry] : params.entries) {
            auto it = bound.find(name);
            if (it != bound.end() && tape.has_grad(it->second))
                g.emplace(name, tape.grad(it->second));
            else
                g.emplace(name, DenseArray<T>::zeros(entry.value.shape));
        }
        return g;
    }
};

// Decoupled-weight-decay Adam step over every parameter; `step` is 1-based.
template <typename T>
void adamw_step(ParameterSet<T>& ps, const std::map<std::string, DenseArray<T>>& grads, double lr,
                double weight_decay = 0.01, double beta1 = 0.9, double beta2 = 0.999, int64_t step = -1,
                double eps = 1e-8) {
    if (step < 0) step = ++ps.step;
    else ps.step = step;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (auto& [name, e] : ps.entries) {
        auto git = grads.find(name);
        for (std::size_t i = 0; i < e.value.numel(); ++i) {
            const double g = git != grads.end() ? static_cast<double>(git->second.v[i]) : 0.0;
            MESH4D_NUMERIC_CHECK(std::isfinite(g), "adamw_step: non-finite gradient in " + name);
            double m = beta1 * static_cast<double>(e.m.v[i]) + (1.0 - beta1) * g;
            double v = beta2 * static_cast<double>(e.v.v[i]) + (1.0 - beta2) * g * g;
            e.m.v[i] = static_cast<T>(m);
            e.v.v[i] = static_cast<T>(v);
            const double mhat = m / bc1;
            const double vhat = v / bc2;
            double p = static_cast<double>(e.value.v[i]);
            p -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p);
            e.value.v[i] = static_cast<T>(p);
        }
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

struct FdReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
};

// Central differences against reverse-mode gradients. `build` constructs the
// scalar loss on a fresh tape: Var<T> build(Tape<T>&, Bind<T>&). `stride`
// subsamples coordinates of large tensors deterministically.
template <typename T, typename BuildLoss>
FdReport finite_difference_check(ParameterSet<T>& ps, BuildLoss build, double epsilon = 1e-5,
                                 std::size_t stride = 1) {
    auto eval = [&]() -> double {
        Tape<T> tape;
        Bind<T> bind{tape, ps, {}};
        Var<T> loss = build(tape, bind);
        return static_cast<double>(tape.value(loss).v[0]);
    };

    std::map<std::string, DenseArray<T>> analytic;
    {
        Tape<T> tape;
        Bind<T> bind{tape, ps, {}};
        Var<T> loss = build(tape, bind);
        tape.backward(loss);
        analytic = bind.grads();
    }

    FdReport rep;
    for (auto& [name, e] : ps.entries) {
        const std::size_t n = e.value.numel();
        const std::size_t step = std::max<std::size_t>(1, n <= 8 ? 1 : stride);
        for (std::size_t i = 0; i < n; i += step) {
            const T orig = e.value.v[i];
            e.value.v[i] = orig + static_cast<T>(epsilon);
            const double lp = eval();
            e.value.v[i] = orig - static_cast<T>(epsilon);
            const double lm = eval();
            e.value.v[i] = orig;
            const double fd = (lp - lm) / (2.0 * epsilon);
            const double an = static_cast<double>(analytic.at(name).v[i]);
            const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8});
            ++rep.checked;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_param = name;
                rep.worst_index = i;
            }
        }
    }
    return rep;
}

}  // namespace mesh4d
