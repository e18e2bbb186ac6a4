#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "casdm/kernels.hpp"
#include "casdm/optim.hpp"
#include "casdm/tape.hpp"
#include "testutil.hpp"

using namespace casdm;

namespace {

using GraphFn = std::function<Var(Tape&, const ParamStore&)>;

double eval_scalar(const GraphFn& g, const ParamStore& ps) {
    Tape t;
    Var loss = g(t, ps);
    return static_cast<double>(loss.val()[0]);
}

// Tape gradients vs double-precision central differences over float-realized
// steps, elementwise |analytic - fd| <= atol + rtol*|fd|.
void check_grads(const GraphFn& g, const ParamStore& ps, double h = 1e-3, double atol = 2e-4,
                 double rtol = 1e-2) {
    Tape t;
    Var loss = g(t, ps);
    Gradients gs = t.backward(loss);
    auto analytic = gs.for_store(ps);
    auto fd = finite_diff_grad([&](const ParamStore& p) { return eval_scalar(g, p); }, ps, h);
    for (const auto& [path, ga] : analytic) {
        const auto& gf = fd.at(path);
        REQUIRE(ga.size() == static_cast<int64_t>(gf.size()));
        for (int64_t i = 0; i < ga.size(); ++i) {
            double a = ga[i];
            double f = gf[static_cast<size_t>(i)];
            INFO("param ", path, " index ", i, " analytic ", a, " fd ", f);
            CHECK(std::abs(a - f) <= atol + rtol * std::abs(f));
        }
    }
}

ParamStore one_param(const std::string& name, Tensor t) {
    ParamStore ps;
    ps.add(name, std::move(t));
    return ps;
}

} // namespace

TEST_CASE("elementwise and affine op gradients match finite differences") {
    Rng rng(1);
    ParamStore ps;
    ps.add("a", tu::random_tensor({2, 3, 3, 2}, rng));
    ps.add("b", tu::random_tensor({2, 3, 3, 2}, rng));
    Tensor target = tu::random_tensor({2, 3, 3, 2}, rng);

    check_grads([&](Tape& t, const ParamStore& p) {
        Var a = t.param(p, "a");
        Var b = t.param(p, "b");
        Var y = t.add(t.mul(a, b), t.sub(a, b));
        y = t.affine2(0.7f, y, -1.3f, a);
        y = t.add_scalar(t.scale(y, 0.5f), 0.25f);
        return t.mse(y, t.input(target));
    }, ps);
}

TEST_CASE("recover_x0 gradients match finite differences") {
    Rng rng(2);
    ParamStore ps;
    ps.add("xt", tu::random_tensor({1, 4, 4, 1}, rng));
    ps.add("eps", tu::normal_tensor({1, 4, 4, 1}, rng));
    check_grads([&](Tape& t, const ParamStore& p) {
        Var y = t.recover_x0(t.param(p, "xt"), t.param(p, "eps"), 0.8f, 1.6f);
        return t.mean_all(t.mul(y, y));
    }, ps);
}

TEST_CASE("mix gradients match finite differences in both broadcast modes") {
    Rng rng(3);
    SUBCASE("channel broadcast r") {
        ParamStore ps;
        ps.add("r", tu::random_tensor({1, 3, 3, 1}, rng, 0.1f, 0.9f));
        ps.add("a", tu::random_tensor({1, 3, 3, 2}, rng));
        ps.add("b", tu::random_tensor({1, 3, 3, 2}, rng));
        check_grads([&](Tape& t, const ParamStore& p) {
            Var m = t.mix(t.param(p, "r"), t.param(p, "a"), t.param(p, "b"));
            return t.sum_all(t.mul(m, m));
        }, ps);
    }
    SUBCASE("elementwise r") {
        ParamStore ps;
        ps.add("r", tu::random_tensor({1, 2, 2, 3}, rng, 0.1f, 0.9f));
        ps.add("a", tu::random_tensor({1, 2, 2, 3}, rng));
        ps.add("b", tu::random_tensor({1, 2, 2, 3}, rng));
        check_grads([&](Tape& t, const ParamStore& p) {
            Var m = t.mix(t.param(p, "r"), t.param(p, "a"), t.param(p, "b"));
            return t.mean_all(m);
        }, ps);
    }
}

TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(4);
    ParamStore ps;
    ps.add("x", tu::random_tensor({2, 4, 4, 2}, rng));
    ps.add("w", tu::random_tensor({3, 3, 2, 3}, rng, -0.5f, 0.5f));
    ps.add("b", tu::random_tensor({3}, rng, -0.1f, 0.1f));
    Tensor target = tu::random_tensor({2, 4, 4, 3}, rng);
    check_grads([&](Tape& t, const ParamStore& p) {
        Var y = t.conv2d(t.param(p, "x"), t.param(p, "w"), t.param(p, "b"));
        return t.mse(y, t.input(target));
    }, ps);
}

TEST_CASE("conv2d with identity kernel reproduces its input") {
    Rng rng(5);
    Tensor x = tu::random_tensor({1, 5, 5, 2}, rng);
    Tensor w = Tensor::zeros({3, 3, 2, 2});
    // center tap, channel passthrough: w[1,1,c,c] = 1
    for (int64_t c = 0; c < 2; ++c) w[((1 * 3 + 1) * 2 + c) * 2 + c] = 1.0f;
    Tape t(false);
    Var y = t.conv2d(t.input(x), t.input(w), t.input(Tensor::zeros({2})));
    CHECK(tu::bitwise_equal(y.val(), x));
}

TEST_CASE("linear gradients match finite differences") {
    Rng rng(6);
    ParamStore ps;
    ps.add("x", tu::random_tensor({3, 4}, rng));
    ps.add("w", tu::random_tensor({4, 5}, rng, -0.5f, 0.5f));
    ps.add("b", tu::random_tensor({5}, rng, -0.1f, 0.1f));
    Tensor target = tu::random_tensor({3, 5}, rng);
    check_grads([&](Tape& t, const ParamStore& p) {
        Var y = t.linear(t.param(p, "x"), t.param(p, "w"), t.param(p, "b"));
        return t.mse(y, t.input(target));
    }, ps);
}

TEST_CASE("group_norm normalizes per group and its gradients check out") {
    Rng rng(7);
    SUBCASE("normalization property") {
        Tensor x = tu::normal_tensor({2, 4, 4, 6}, rng);
        Tape t(false);
        Var y = t.group_norm(t.input(x), t.input(Tensor::full({6}, 1.0f)),
                             t.input(Tensor::zeros({6})), 3, 1e-5f);
        const Tensor& yv = y.val();
        // per (n, group) mean ~ 0 and var ~ 1
        for (int64_t n = 0; n < 2; ++n)
            for (int64_t g = 0; g < 3; ++g) {
                double sum = 0.0, sumsq = 0.0;
                int64_t cnt = 0;
                for (int64_t p = 0; p < 16; ++p)
                    for (int64_t k = 0; k < 2; ++k) {
                        double v = yv[(n * 16 + p) * 6 + g * 2 + k];
                        sum += v;
                        sumsq += v * v;
                        ++cnt;
                    }
                double mean = sum / cnt;
                double var = sumsq / cnt - mean * mean;
                CHECK(std::abs(mean) <= 1e-5);
                CHECK(std::abs(var - 1.0) <= 1e-3);
            }
    }
    SUBCASE("gradients") {
        ParamStore ps;
        ps.add("x", tu::normal_tensor({1, 3, 3, 4}, rng));
        ps.add("gamma", tu::random_tensor({4}, rng, 0.5f, 1.5f));
        ps.add("beta", tu::random_tensor({4}, rng, -0.2f, 0.2f));
        Tensor target = tu::random_tensor({1, 3, 3, 4}, rng);
        check_grads([&](Tape& t, const ParamStore& p) {
            Var y = t.group_norm(t.param(p, "x"), t.param(p, "gamma"), t.param(p, "beta"), 2,
                                 1e-5f);
            return t.mse(y, t.input(target));
        }, ps, 1e-3, 4e-4, 2e-2);
    }
}

TEST_CASE("activation gradients match finite differences") {
    Rng rng(8);
    ParamStore ps;
    ps.add("x", tu::normal_tensor({2, 2, 2, 3}, rng));
    check_grads([&](Tape& t, const ParamStore& p) {
        Var a = t.silu(t.param(p, "x"));
        Var b = t.sigmoid(t.param(p, "x"));
        return t.mean_all(t.mul(a, b));
    }, ps);
}

TEST_CASE("pooling, upsampling and resize gradients match finite differences") {
    Rng rng(9);
    ParamStore ps;
    ps.add("x", tu::random_tensor({1, 4, 4, 2}, rng));
    SUBCASE("avg_pool2") {
        check_grads([&](Tape& t, const ParamStore& p) {
            Var y = t.avg_pool2(t.param(p, "x"));
            return t.sum_all(t.mul(y, y));
        }, ps);
    }
    SUBCASE("upsample2_nn") {
        check_grads([&](Tape& t, const ParamStore& p) {
            Var y = t.upsample2_nn(t.param(p, "x"));
            return t.mean_all(t.mul(y, y));
        }, ps);
    }
    SUBCASE("bilinear_resize") {
        check_grads([&](Tape& t, const ParamStore& p) {
            Var y = t.bilinear_resize(t.param(p, "x"), 6, 6);
            return t.mean_all(t.mul(y, y));
        }, ps);
    }
}

TEST_CASE("bilinear_resize to the same size is the identity") {
    Rng rng(10);
    Tensor x = tu::random_tensor({1, 4, 4, 3}, rng);
    Tape t(false);
    Var y = t.bilinear_resize(t.input(x), 4, 4);
    CHECK(tu::bitwise_equal(y.val(), x));
}

TEST_CASE("avg_pool2 and upsample2_nn values") {
    Tensor x({1, 2, 2, 1}, {1.0f, 2.0f, 3.0f, 4.0f});
    Tape t(false);
    Var pooled = t.avg_pool2(t.input(x));
    CHECK(pooled.val()[0] == 2.5f);
    Var up = t.upsample2_nn(t.input(x));
    const Tensor& u = up.val();
    REQUIRE(u.size() == 16);
    CHECK(u[0] == 1.0f);
    CHECK(u[1] == 1.0f);
    CHECK(u[4] == 1.0f);
    CHECK(u[15] == 4.0f);
    CHECK_THROWS_AS(t.avg_pool2(t.input(Tensor::zeros({1, 3, 4, 1}))), std::invalid_argument);
}

TEST_CASE("channel_unit_norm normalizes and differentiates") {
    Rng rng(11);
    SUBCASE("unit norm and zero safety") {
        Tensor x = tu::normal_tensor({1, 2, 2, 4}, rng);
        Tape t(false);
        const Tensor& y = t.channel_unit_norm(t.input(x), 1e-10f).val();
        for (int64_t o = 0; o < 4; ++o) {
            double ss = 0.0;
            for (int64_t k = 0; k < 4; ++k) ss += y[o * 4 + k] * y[o * 4 + k];
            CHECK(std::abs(ss - 1.0) <= 1e-5);
        }
        Tape t2(false);
        const Tensor& z = t2.channel_unit_norm(t2.input(Tensor::zeros({1, 1, 1, 4})), 1e-10f).val();
        for (int64_t k = 0; k < 4; ++k) CHECK(z[k] == 0.0f);
    }
    SUBCASE("gradients") {
        ParamStore ps;
        ps.add("x", tu::normal_tensor({1, 2, 2, 3}, rng));
        Tensor target = tu::random_tensor({1, 2, 2, 3}, rng);
        check_grads([&](Tape& t, const ParamStore& p) {
            Var y = t.channel_unit_norm(t.param(p, "x"), 1e-10f);
            return t.mse(y, t.input(target));
        }, ps);
    }
}

TEST_CASE("add_spatial_bias, concat and slice gradients match finite differences") {
    Rng rng(12);
    ParamStore ps;
    ps.add("x", tu::random_tensor({2, 2, 2, 3}, rng));
    ps.add("bias", tu::random_tensor({2, 3}, rng));
    ps.add("y", tu::random_tensor({2, 2, 2, 2}, rng));
    check_grads([&](Tape& t, const ParamStore& p) {
        Var a = t.add_spatial_bias(t.param(p, "x"), t.param(p, "bias"));
        Var cat = t.concat_c(a, t.param(p, "y"));        // [2,2,2,5]
        Var left = t.slice_c(cat, 0, 2);
        Var right = t.slice_c(cat, 2, 5);
        return t.add(t.mean_all(t.mul(left, left)), t.mean_all(t.mul(right, right)));
    }, ps);
}

TEST_CASE("concat_c then slice_c reproduces both halves bitwise") {
    Rng rng(13);
    Tensor a = tu::random_tensor({1, 3, 3, 2}, rng);
    Tensor b = tu::random_tensor({1, 3, 3, 4}, rng);
    Tape t(false);
    Var cat = t.concat_c(t.input(a), t.input(b));
    CHECK(cat.val().dims() == std::vector<int64_t>{1, 3, 3, 6});
    CHECK(tu::bitwise_equal(t.slice_c(cat, 0, 2).val(), a));
    CHECK(tu::bitwise_equal(t.slice_c(cat, 2, 6).val(), b));
}

TEST_CASE("stop_gradient blocks every path through it") {
    Rng rng(14);
    ParamStore ps;
    ps.add("w", tu::random_tensor({4}, rng));
    ps.add("u", tu::random_tensor({4}, rng));
    Tape t;
    Var w = t.param(ps, "w");
    Var u = t.param(ps, "u");
    Var blocked = t.stop_gradient(t.mul(w, u));
    CHECK(tu::bitwise_equal(blocked.val(), t.mul(w, u).val()));
    CHECK_FALSE(t.requires_grad(blocked));
    Var loss = t.sum_all(t.mul(blocked, u));
    Gradients gs = t.backward(loss);
    // w is reachable only through the detached node: structurally zero.
    CHECK_FALSE(gs.has(w));
    Tensor zw = gs.wrt(w);
    for (int64_t i = 0; i < zw.size(); ++i) CHECK(zw[i] == 0.0f);
    // u still gets its direct-path gradient, exactly the blocked values.
    REQUIRE(gs.has(u));
    CHECK(tu::bitwise_equal(*gs.maybe(u), blocked.val()));
    auto store_grads = gs.for_store(ps);
    for (int64_t i = 0; i < 4; ++i) CHECK(store_grads.at("w")[i] == 0.0f);
}

TEST_CASE("a parameter used twice accumulates both path gradients") {
    ParamStore ps;
    ps.add("w", Tensor({2}, {3.0f, -2.0f}));
    Tape t;
    Var w = t.param(ps, "w");
    Tensor a({2}, {2.0f, 5.0f});
    Tensor b({2}, {-1.0f, 4.0f});
    // loss = sum(w*a) + sum(w*b) => dloss/dw = a + b exactly
    Var loss = t.add(t.sum_all(t.mul(w, t.input(a))), t.sum_all(t.mul(w, t.input(b))));
    Gradients gs = t.backward(loss);
    const Tensor& gw = *gs.maybe(w);
    CHECK(gw[0] == 1.0f);
    CHECK(gw[1] == 9.0f);
}

TEST_CASE("backward is repeatable and deterministic on one tape") {
    Rng rng(15);
    ParamStore ps;
    ps.add("w", tu::random_tensor({3, 3, 2, 2}, rng, -0.5f, 0.5f));
    ps.add("b", tu::random_tensor({2}, rng, -0.1f, 0.1f));
    Tensor x = tu::random_tensor({1, 4, 4, 2}, rng);
    Tape t;
    Var y = t.conv2d(t.input(x), t.param(ps, "w"), t.param(ps, "b"));
    Var loss = t.mean_all(t.mul(y, y));
    Gradients g1 = t.backward(loss);
    Gradients g2 = t.backward(loss);
    auto m1 = g1.for_store(ps);
    auto m2 = g2.for_store(ps);
    for (const auto& [path, ga] : m1) CHECK(tu::bitwise_equal(ga, m2.at(path)));
}

TEST_CASE("tape records a snapshot of parameter values") {
    ParamStore ps = one_param("w", Tensor({2}, {1.0f, 2.0f}));
    Tape t;
    Var w = t.param(ps, "w");
    ps.at("w")[0] = 100.0f; // mutate after recording
    CHECK(w.val()[0] == 1.0f);
    Var loss = t.sum_all(t.mul(w, w));
    Gradients gs = t.backward(loss);
    CHECK((*gs.maybe(w))[0] == 2.0f); // 2*w with the snapshot value
}

TEST_CASE("tape ops refuse mismatched shapes and foreign vars") {
    Tape t;
    Var a = t.input(Tensor::zeros({2, 2}));
    Var b = t.input(Tensor::zeros({2, 3}));
    CHECK_THROWS_AS(t.add(a, b), std::invalid_argument);
    CHECK_THROWS_AS(t.mse(a, b), std::invalid_argument);
    CHECK_THROWS_AS(t.backward(a), std::invalid_argument); // non-scalar loss

    Tape other;
    Var c = other.input(Tensor::zeros({2, 2}));
    CHECK_THROWS_AS(t.add(a, c), std::invalid_argument);
    CHECK_THROWS_AS(t.backward(Var{}), std::invalid_argument);
}

TEST_CASE("for_store fills zeros for a store the loss never touches") {
    Rng rng(16);
    ParamStore used = one_param("w", tu::random_tensor({3}, rng));
    ParamStore untouched = one_param("p", tu::random_tensor({2}, rng));
    Tape t;
    Var loss = t.sum_all(t.param(used, "w"));
    Gradients gs = t.backward(loss);
    auto zg = gs.for_store(untouched);
    REQUIRE(zg.count("p") == 1);
    for (int64_t i = 0; i < 2; ++i) CHECK(zg.at("p")[i] == 0.0f);
}

TEST_CASE("no-grad tape records values but produces no gradients") {
    ParamStore ps = one_param("w", Tensor({2}, {1.0f, 2.0f}));
    Tape t(false);
    Var w = t.param(ps, "w");
    Var loss = t.sum_all(t.mul(w, w));
    CHECK(loss.val()[0] == 5.0f);
    Gradients gs = t.backward(loss);
    CHECK_FALSE(gs.has(w));
}

TEST_CASE("mse value matches its composed form") {
    Rng rng(17);
    Tensor a = tu::random_tensor({2, 3}, rng);
    Tensor b = tu::random_tensor({2, 3}, rng);
    Tape t(false);
    Var fused = t.mse(t.input(a), t.input(b));
    Var composed = t.mean_all(t.mul(t.sub(t.input(a), t.input(b)), t.sub(t.input(a), t.input(b))));
    CHECK(std::abs(fused.val()[0] - composed.val()[0]) <= 1e-6f);
}

// The conv kernels have an explicit 8-lane float fast path next to the scalar
// template. Both must compute the same sums (different fixed association), so
// drive every tile and tail branch and compare elementwise.
TEST_CASE("conv kernels: float fast path matches the scalar template") {
    Rng rng(23);
    struct Sh {
        int64_t n, h, w, ci, co, k;
    };
    const Sh shapes[] = {
        {2, 8, 8, 32, 32, 3},  // full 16-lane tiles
        {1, 5, 7, 17, 33, 3},  // every tail at once
        {1, 8, 8, 1, 8, 3},    // stem-like: tiny Cin, one 8-lane tile
        {1, 4, 4, 3, 5, 3},    // below all vector widths
        {2, 3, 3, 9, 12, 5},   // 5x5 taps, 8+tail in both channel dims
        {1, 1, 1, 4, 16, 3},   // window clipped to a single pixel
        {1, 6, 6, 8, 1, 3},    // single output channel
    };
    for (const auto& s : shapes) {
        CAPTURE(s.ci);
        CAPTURE(s.co);
        Tensor x = tu::random_tensor({s.n, s.h, s.w, s.ci}, rng);
        Tensor w = tu::random_tensor({s.k, s.k, s.ci, s.co}, rng);
        Tensor b = tu::random_tensor({s.co}, rng);
        Tensor g = tu::random_tensor({s.n, s.h, s.w, s.co}, rng);
        auto diff = [](const Tensor& lhs, const Tensor& rhs) {
            double worst = 0;
            for (int64_t i = 0; i < lhs.size(); ++i)
                worst = std::max(worst, std::abs(double(lhs.data()[i]) - double(rhs.data()[i])) /
                                            (1.0 + std::abs(double(rhs.data()[i]))));
            return worst;
        };
        Tensor out_f({s.n, s.h, s.w, s.co}), out_s({s.n, s.h, s.w, s.co});
        kern::conv2d(x.data(), w.data(), b.data(), out_f.data(), s.n, s.h, s.w, s.ci, s.co, s.k, s.k);
        kern::conv2d<float>(x.data(), w.data(), b.data(), out_s.data(), s.n, s.h, s.w, s.ci, s.co,
                            s.k, s.k);
        CHECK(diff(out_f, out_s) <= 3e-5);

        Tensor gx_f = Tensor::zeros({s.n, s.h, s.w, s.ci}), gx_s = Tensor::zeros({s.n, s.h, s.w, s.ci});
        kern::conv2d_bwd_input(g.data(), w.data(), gx_f.data(), s.n, s.h, s.w, s.ci, s.co, s.k, s.k);
        kern::conv2d_bwd_input<float>(g.data(), w.data(), gx_s.data(), s.n, s.h, s.w, s.ci, s.co,
                                      s.k, s.k);
        CHECK(diff(gx_f, gx_s) <= 3e-5);

        Tensor gw_f = Tensor::zeros({s.k, s.k, s.ci, s.co}), gw_s = Tensor::zeros({s.k, s.k, s.ci, s.co});
        Tensor gb_f = Tensor::zeros({s.co}), gb_s = Tensor::zeros({s.co});
        kern::conv2d_bwd_params(x.data(), g.data(), gw_f.data(), gb_f.data(), s.n, s.h, s.w, s.ci,
                                s.co, s.k, s.k);
        kern::conv2d_bwd_params<float>(x.data(), g.data(), gw_s.data(), gb_s.data(), s.n, s.h, s.w,
                                       s.ci, s.co, s.k, s.k);
        CHECK(diff(gw_f, gw_s) <= 3e-5);
        CHECK(diff(gb_f, gb_s) <= 3e-5);
    }
}
