#include <catch2/catch_amalgamated.hpp>

#include "mesh4d/autograd.hpp"
#include "mesh4d/nn.hpp"

using namespace mesh4d;
using Catch::Approx;

namespace {

template <typename F>
double fd_max_err(ParameterSet<double>& ps, F build) {
    return finite_difference_check(ps, build, 1e-5).max_rel_err;
}

DenseArray<double> randn(std::vector<std::size_t> shape, uint64_t seed, double s = 1.0) {
    Rng rng(seed);
    return DenseArray<double>::randn(std::move(shape), rng, s);
}

}  // namespace

TEST_CASE("linear layer basics") {
    ParameterSet<double> ps;
    ps.create("lin.w", {3, 3});
    ps.create("lin.b", {3});
    SECTION("identity weight, zero bias") {
        for (int i = 0; i < 3; ++i) ps.at("lin.w").value.at(i, i) = 1.0;
        Tape<double> t;
        Bind<double> b{t, ps, {}};
        const DenseArray<double> x = randn({5, 3}, 1);
        Var<double> y = linear_fwd(b, "lin", t.constant(x));
        for (std::size_t i = 0; i < x.numel(); ++i) CHECK(t.value(y).v[i] == x.v[i]);
    }
    SECTION("zero weight: every row equals the bias") {
        ps.at("lin.b").value.v = {1.0, -2.0, 0.5};
        Tape<double> t;
        Bind<double> b{t, ps, {}};
        Var<double> y = linear_fwd(b, "lin", t.constant(randn({4, 3}, 2)));
        for (std::size_t r = 0; r < 4; ++r) {
            CHECK(t.value(y).at(r, 0) == 1.0);
            CHECK(t.value(y).at(r, 1) == -2.0);
            CHECK(t.value(y).at(r, 2) == 0.5);
        }
    }
    SECTION("random case matches a handwritten matrix multiply") {
        ParameterSet<double> ps2;
        Rng rng(5);
        init_linear(ps2, rng, "lin", 3, 2);
        const DenseArray<double> x = randn({4, 3}, 6);
        Tape<double> t;
        Bind<double> b{t, ps2, {}};
        Var<double> y = linear_fwd(b, "lin", t.constant(x));
        const auto& w = ps2.at("lin.w").value;
        const auto& bias = ps2.at("lin.b").value;
        for (std::size_t r = 0; r < 4; ++r)
            for (std::size_t j = 0; j < 2; ++j) {
                double acc = bias.v[j];
                for (std::size_t k = 0; k < 3; ++k) acc += x.at(r, k) * w.at(k, j);
                CHECK(std::abs(t.value(y).at(r, j) - acc) < 1e-12);
            }
    }
}

TEST_CASE("backward: closed forms and linearity") {
    SECTION("linear regression gradient matches the normal-equation residual") {
        ParameterSet<double> ps;
        ps.create("w", {4, 1});
        ps.at("w").value = randn({4, 1}, 3, 0.5);
        const DenseArray<double> X = randn({12, 4}, 4);
        const DenseArray<double> y = randn({12, 1}, 5);
        Tape<double> t;
        Bind<double> b{t, ps, {}};
        Var<double> pred = matmul(t.constant(X), b("w"));
        Var<double> diff = sub(pred, t.constant(y));
        Var<double> loss = sum_all(mul(diff, diff));
        t.backward(loss);
        // closed form: 2 X^T (Xw - y)
        DenseArray<double> resid = matmul_data(X, false, ps.at("w").value, false);
        for (std::size_t i = 0; i < 12; ++i) resid.v[i] -= y.v[i];
        const DenseArray<double> expect = matmul_data(X, true, resid, false);
        const auto grads = b.grads();
        for (std::size_t i = 0; i < 4; ++i)
            CHECK(std::abs(grads.at("w").v[i] - 2.0 * expect.v[i]) < 1e-10);
    }
    SECTION("untouched parameter gets exactly zero") {
        ParameterSet<double> ps;
        ps.create("used", {2});
        ps.create("unused", {3});
        Tape<double> t;
        Bind<double> b{t, ps, {}};
        Var<double> loss = sum_all(mul(b("used"), b("used")));
        t.backward(loss);
        for (double g : b.grads().at("unused").v) CHECK(g == 0.0);
    }
    SECTION("sum of two losses gives the sum of gradients") {
        ParameterSet<double> ps;
        ps.create("p", {3});
        ps.at("p").value.v = {1.0, -1.0, 2.0};
        auto grad_of = [&](int which) {
            Tape<double> t;
            Bind<double> b{t, ps, {}};
            Var<double> p = b("p");
            Var<double> l1 = sum_all(mul(p, p));
            Var<double> l2 = scale(sum_all(p), 3.0);
            Var<double> loss = which == 0 ? l1 : which == 1 ? l2 : add(l1, l2);
            t.backward(loss);
            return b.grads().at("p");
        };
        const auto g1 = grad_of(0), g2 = grad_of(1), g12 = grad_of(2);
        for (std::size_t i = 0; i < 3; ++i) CHECK(g12.v[i] == Approx(g1.v[i] + g2.v[i]).margin(1e-14));
    }
    SECTION("backward twice on one tape is rejected") {
        ParameterSet<double> ps;
        ps.create("p", {2});
        Tape<double> t;
        Bind<double> b{t, ps, {}};
        Var<double> loss = sum_all(b("p"));
        t.backward(loss);
        CHECK_THROWS_AS(t.backward(loss), ValidationError);
    }
}

TEST_CASE("finite differences validate every primitive") {
    SECTION("matmul and bias") {
        ParameterSet<double> ps;
        Rng rng(11);
        init_linear(ps, rng, "l", 5, 4);
        const DenseArray<double> x = randn({3, 5}, 12);
        CHECK(fd_max_err(ps, [&](Tape<double>& t, Bind<double>& b) {
                  return sum_all(mul(linear_fwd(b, "l", t.constant(x)), linear_fwd(b, "l", t.constant(x))));
              }) < 1e-4);
    }
    SECTION("elementwise chain: exp, silu, scale, add_scalar") {
        ParameterSet<double> ps;
        ps.create("p", {6});
        ps.at("p").value = randn({6}, 13, 0.3);
        CHECK(fd_max_err(ps, [&](Tape<double>&, Bind<double>& b) {
                  Var<double> p = b("p");
                  return mean_all(mul(silu(exp_op(scale(p, 0.7))), add_scalar(p, 0.3)));
              }) < 1e-4);
    }
    SECTION("layer_norm with affine") {
        ParameterSet<double> ps;
        ps.create("x", {4, 6});
        ps.at("x").value = randn({4, 6}, 14);
        Rng rng(15);
        init_layer_norm(ps, "ln", 6);
        ps.at("ln.g").value = randn({6}, 16, 0.2);
        for (auto& g : ps.at("ln.g").value.v) g += 1.0;
        CHECK(fd_max_err(ps, [&](Tape<double>&, Bind<double>& b) {
                  return sum_all(mul(layer_norm_fwd(b, "ln", b("x")), layer_norm_fwd(b, "ln", b("x"))));
              }) < 1e-4);
    }
    SECTION("row_affine modulation") {
        ParameterSet<double> ps;
        ps.create("x", {5, 4});
        ps.create("s", {4});
        ps.create("t", {4});
        ps.at("x").value = randn({5, 4}, 17);
        ps.at("s").value = randn({4}, 18, 0.2);
        ps.at("t").value = randn({4}, 19, 0.2);
        CHECK(fd_max_err(ps, [&](Tape<double>&, Bind<double>& b) {
                  return sum_all(mul(row_affine(b("x"), b("s"), b("t")), row_affine(b("x"), b("s"), b("t"))));
              }) < 1e-4);
    }
    SECTION("rope rotation") {
        ParameterSet<double> ps;
        ps.create("x", {6, 8});
        ps.at("x").value = randn({6, 8}, 20);
        const std::vector<double> pos = {0, 1, 2, 0, 1, 2};
        CHECK(fd_max_err(ps, [&](Tape<double>&, Bind<double>& b) {
                  return sum_all(mul(rope_rows(b("x"), pos), rope_rows(b("x"), pos)));
              }) < 1e-4);
    }
    SECTION("gather_rows with duplicates") {
        ParameterSet<double> ps;
        ps.create("x", {5, 3});
        ps.at("x").value = randn({5, 3}, 21);
        const std::vector<int32_t> idx = {0, 2, 2, 4, 1, 0};
        CHECK(fd_max_err(ps, [&](Tape<double>&, Bind<double>& b) {
                  Var<double> g = gather_rows(b("x"), idx);
                  return sum_all(mul(g, g));
              }) < 1e-4);
    }
    SECTION("masked multi-head attention") {
        ParameterSet<double> ps;
        Rng rng(22);
        init_mha(ps, rng, "a", 8, false);
        const DenseArray<double> x = randn({6, 8}, 23);
        AttentionMask mask = AttentionMask::open(6, 6);
        mask.values[1 * 6 + 3] = AttentionMask::kMasked;
        mask.values[2 * 6 + 0] = AttentionMask::kMasked;
        CHECK(fd_max_err(ps, [&](Tape<double>& t, Bind<double>& b) {
                  Var<double> y = masked_multihead_attention(b, "a", t.constant(x), t.constant(x), &mask, 2);
                  return sum_all(mul(y, y));
              }) < 1e-4);
    }
    SECTION("grouped attention with rope and distinct q/kv") {
        ParameterSet<double> ps;
        Rng rng(24);
        init_mha(ps, rng, "a", 8, false);
        ps.create("q", {6, 8});
        ps.create("kv", {9, 8});
        ps.at("q").value = randn({6, 8}, 25, 0.5);
        ps.at("kv").value = randn({9, 8}, 26, 0.5);
        std::vector<AttnGroup> groups(3);
        for (int g = 0; g < 3; ++g) {
            groups[g].q_rows = {2 * g, 2 * g + 1};
            groups[g].kv_rows = {3 * g, 3 * g + 1, 3 * g + 2};
        }
        const std::vector<double> pos_q = {0, 1, 0, 1, 0, 1};
        const std::vector<double> pos_k = {0, 1, 2, 0, 1, 2, 0, 1, 2};
        CHECK(fd_max_err(ps, [&](Tape<double>&, Bind<double>& b) {
                  Var<double> y = mha_fwd(b, "a", b("q"), b("kv"), 2, groups, nullptr, pos_q, pos_k);
                  return sum_all(mul(y, y));
              }) < 1e-4);
    }
    SECTION("mlp block") {
        ParameterSet<double> ps;
        Rng rng(27);
        init_mlp(ps, rng, "m", 6, false);
        const DenseArray<double> x = randn({4, 6}, 28);
        CHECK(fd_max_err(ps, [&](Tape<double>& t, Bind<double>& b) {
                  Var<double> y = mlp_fwd(b, "m", t.constant(x));
                  return sum_all(mul(y, y));
              }) < 1e-4);
    }
    SECTION("kl and reparameterize") {
        ParameterSet<double> ps;
        ps.create("mean", {3, 4});
        ps.create("lv", {3, 4});
        ps.at("mean").value = randn({3, 4}, 29, 0.5);
        ps.at("lv").value = randn({3, 4}, 30, 0.3);
        const DenseArray<double> eps = randn({3, 4}, 31);
        CHECK(fd_max_err(ps, [&](Tape<double>&, Bind<double>& b) {
                  Var<double> z = reparameterize(b("mean"), b("lv"), eps);
                  return add(sum_all(mul(z, z)), kl_standard_normal(b("mean"), b("lv")));
              }) < 1e-4);
    }
}

TEST_CASE("gradient checker detects an injected sign-flip bug") {
    ParameterSet<double> ps;
    ps.create("p", {4});
    ps.at("p").value = randn({4}, 40);
    const double err = fd_max_err(ps, [&](Tape<double>& t, Bind<double>& b) {
        Var<double> p = b("p");
        // deliberately wrong backward: claims d(2x)/dx = -2
        DenseArray<double> out = t.value(p);
        for (auto& x : out.v) x *= 2.0;
        Var<double> y = t.push(std::move(out), true);
        t.set_back(y.id, [p, y](Tape<double>& tp) {
            for (std::size_t i = 0; i < tp.grad(y).v.size(); ++i)
                tp.ensure_grad(p.id).v[i] += -2.0 * tp.grad(y).v[i];
        });
        return sum_all(mul(y, y));
    });
    CHECK(err > 0.5);
}

TEST_CASE("adamw") {
    SECTION("zero gradient and zero decay leave parameters unchanged") {
        ParameterSet<double> ps;
        ps.create("p", {3});
        ps.at("p").value.v = {1.0, 2.0, 3.0};
        std::map<std::string, DenseArray<double>> grads;
        grads.emplace("p", DenseArray<double>::zeros({3}));
        adamw_step(ps, grads, 0.1, 0.0);
        CHECK(ps.at("p").value.v == std::vector<double>{1.0, 2.0, 3.0});
    }
    SECTION("single step on a scalar decreases it by about lr") {
        ParameterSet<double> ps;
        ps.create("p", {1});
        ps.at("p").value.v = {0.7};
        std::map<std::string, DenseArray<double>> grads;
        grads.emplace("p", DenseArray<double>::full({1}, 1.0));
        adamw_step(ps, grads, 0.1, 0.0);
        // bias-corrected moments give mhat/sqrt(vhat) = 1/(1 + eps') ~ 1
        CHECK(ps.at("p").value.v[0] == Approx(0.6).margin(1e-6));
    }
    SECTION("weight decay only shrinks multiplicatively") {
        ParameterSet<double> ps;
        ps.create("p", {2});
        ps.at("p").value.v = {2.0, -4.0};
        adamw_step(ps, {}, 0.1, 0.05);
        CHECK(ps.at("p").value.v[0] == Approx(2.0 * (1.0 - 0.1 * 0.05)).margin(1e-12));
        CHECK(ps.at("p").value.v[1] == Approx(-4.0 * (1.0 - 0.1 * 0.05)).margin(1e-12));
    }
    SECTION("deterministic across repeated runs") {
        auto run = [] {
            ParameterSet<float> ps;
            ps.create("p", {8});
            for (std::size_t i = 0; i < 8; ++i) ps.at("p").value.v[i] = static_cast<float>(i) * 0.25f;
            for (int s = 0; s < 5; ++s) {
                std::map<std::string, DenseArray<float>> grads;
                grads.emplace("p", DenseArray<float>::full({8}, 0.3f + 0.1f * s));
                adamw_step(ps, grads, 1e-2, 0.01);
            }
            return ps.at("p").value.v;
        };
        CHECK(run() == run());
    }
}
