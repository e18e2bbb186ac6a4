#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "casdm/checkpoint.hpp"
#include "casdm/errors.hpp"
#include "casdm/losses.hpp"
#include "casdm/metric.hpp"
#include "casdm/optim.hpp"
#include "testutil.hpp"

using namespace casdm;

namespace {

using GraphFn = std::function<Var(Tape&, const ParamStore&)>;

double eval_scalar(const GraphFn& g, const ParamStore& ps) {
    Tape t;
    Var loss = g(t, ps);
    return static_cast<double>(loss.val()[0]);
}

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

bool stores_equal(const ParamStore& a, const ParamStore& b) {
    if (a.count() != b.count()) return false;
    for (const auto& [path, t] : a)
        if (!b.has(path) || !tu::bitwise_equal(t, b.at(path))) return false;
    return true;
}

// tiny extractor so finite differences stay cheap
FeatureExtractor tiny_extractor() {
    FeatureExtractor small;
    small.kernel = 3;
    small.in_channels = 1;
    small.channels = {3, 4};
    Rng rng(5);
    Tensor w1({3, 3, 1, 3});
    init_trunc_normal(w1, 9, rng);
    Tensor b1({3});
    for (int i = 0; i < 3; ++i) b1.data()[i] = 0.05f * static_cast<float>(rng.normal());
    Tensor w2({3, 3, 3, 4});
    init_trunc_normal(w2, 27, rng);
    Tensor b2({4});
    for (int i = 0; i < 4; ++i) b2.data()[i] = 0.05f * static_cast<float>(rng.normal());
    small.weights.add("s0.w", std::move(w1));
    small.weights.add("s0.b", std::move(b1));
    small.weights.add("s1.w", std::move(w2));
    small.weights.add("s1.b", std::move(b2));
    small.id = "test-tiny";
    return small;
}

} // namespace

TEST_CASE("seeded extractors are deterministic and distinct per backbone") {
    FeatureExtractor a = make_extractor("lpips_avgpool", 1, 7);
    FeatureExtractor b = make_extractor("lpips_avgpool", 1, 7);
    CHECK(a.id == b.id);
    CHECK(stores_equal(a.weights, b.weights));
    CHECK(a.stages() == 4);
    CHECK(a.channels == std::vector<int>{8, 16, 32, 64});
    CHECK(a.kernel == 3);

    FeatureExtractor c = make_extractor("lpips_avgpool", 1, 8);
    CHECK_FALSE(stores_equal(a.weights, c.weights));

    FeatureExtractor p = make_extractor("plain_cnn", 1, 7);
    CHECK(p.stages() == 3);
    CHECK(p.kernel == 5);

    CHECK_THROWS_AS(make_extractor("vgg16", 1, 7), ConfigError);
}

TEST_CASE("extract_features: tap count, halving, and determinism") {
    Rng rng(11);
    FeatureExtractor ex = make_extractor("lpips_avgpool", 1, 7);
    Tensor x = tu::random_tensor({2, 32, 32, 1}, rng, 0.0f, 1.0f);
    Tape tp(false);
    auto taps = extract_features(tp, ex, tp.input(x));
    REQUIRE(taps.size() == 4);
    const int64_t sizes[4] = {16, 8, 4, 2};
    const int64_t chans[4] = {8, 16, 32, 64};
    for (int i = 0; i < 4; ++i) {
        CHECK(taps[static_cast<size_t>(i)].val().dims() ==
              std::vector<int64_t>{2, sizes[i], sizes[i], chans[i]});
    }
    Tape tp2(false);
    auto taps2 = extract_features(tp2, ex, tp2.input(x));
    for (int i = 0; i < 4; ++i)
        CHECK(tu::bitwise_equal(taps[static_cast<size_t>(i)].val(),
                                taps2[static_cast<size_t>(i)].val()));
}

TEST_CASE("extract_features rejects unusable resolutions") {
    Rng rng(13);
    FeatureExtractor ex = make_extractor("lpips_avgpool", 1, 7);
    Tape tp(false);
    // too small for 4 halvings
    Tensor small = tu::random_tensor({1, 8, 8, 1}, rng, 0.0f, 1.0f);
    CHECK_THROWS_AS(extract_features(tp, ex, tp.input(small)), std::invalid_argument);
    // not a multiple of 16
    Tensor odd = tu::random_tensor({1, 48, 32, 1}, rng, 0.0f, 1.0f);
    CHECK_NOTHROW(extract_features(tp, ex, tp.input(odd)));
    Tensor bad = tu::random_tensor({1, 24, 24, 1}, rng, 0.0f, 1.0f);
    CHECK_THROWS_AS(extract_features(tp, ex, tp.input(bad)), std::invalid_argument);
    // channel mismatch
    Tensor c3 = tu::random_tensor({1, 32, 32, 3}, rng, 0.0f, 1.0f);
    CHECK_THROWS_AS(extract_features(tp, ex, tp.input(c3)), std::invalid_argument);
}

TEST_CASE("zero image produces constant bias-driven features") {
    FeatureExtractor ex = make_extractor("lpips_avgpool", 1, 7);
    Tape tp(false);
    auto taps = extract_features(tp, ex, tp.input(Tensor::zeros({1, 32, 32, 1})));
    // first tap (16x16): padding effects reach one pooled pixel into the map,
    // so pixels with row/col in [1,14] all hold the same bias-driven constant
    {
        const Tensor& tv = taps[0].val();
        const int64_t w = tv.dim(2), c = tv.dim(3);
        for (int64_t k = 0; k < c; ++k) {
            const float v = tv.data()[(8 * w + 8) * c + k];
            CHECK(v == tv.data()[(8 * w + 9) * c + k]);
            CHECK(v == tv.data()[(9 * w + 8) * c + k]);
            CHECK(v == tv.data()[(1 * w + 1) * c + k]);
        }
    }
    // deeper taps mix border effects, but bias propagation keeps them nonzero
    for (const Var& tap : taps) {
        bool any_nonzero = false;
        for (float v : tap.val().vec())
            if (v != 0.0f) any_nonzero = true;
        CHECK(any_nonzero);
    }
}

TEST_CASE("metric transform maps range and resolution") {
    Rng rng(17);
    MetricTransform mt;
    mt.resolution = 32;
    Tensor x = tu::random_tensor({2, 8, 8, 1}, rng);
    Tape tp(false);
    Var y = metric_transform(tp, tp.input(x), mt);
    CHECK(y.val().dims() == std::vector<int64_t>{2, 32, 32, 1});
    float lo = 1e9f, hi = -1e9f;
    for (float v : y.val().vec()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    CHECK(lo >= 0.0f);
    CHECK(hi <= 1.0f);

    // same-resolution transform: the resize is an identity, so endpoints map
    // exactly
    MetricTransform same;
    same.resolution = 8;
    Tensor ends({1, 8, 8, 1});
    for (int64_t i = 0; i < ends.size(); ++i) ends.data()[i] = (i % 2 == 0) ? -1.0f : 1.0f;
    Tape tp2(false);
    Var z = metric_transform(tp2, tp2.input(ends), same);
    for (int64_t i = 0; i < ends.size(); ++i)
        CHECK(z.val().vec()[static_cast<size_t>(i)] == ((i % 2 == 0) ? 0.0f : 1.0f));
}

TEST_CASE("feature_distance: zero on identical, symmetric, loop oracle") {
    Rng rng(19);
    FeatureExtractor ex = make_extractor("lpips_avgpool", 1, 7);
    Tensor xa = tu::random_tensor({2, 32, 32, 1}, rng, 0.0f, 1.0f);
    Tensor xb = tu::random_tensor({2, 32, 32, 1}, rng, 0.0f, 1.0f);

    Tape tp(false);
    auto fa = extract_features(tp, ex, tp.input(xa));
    auto fb = extract_features(tp, ex, tp.input(xb));
    auto fa2 = extract_features(tp, ex, tp.input(xa));

    CHECK(feature_distance(tp, fa, fa2).val()[0] == 0.0f);
    const float dab = feature_distance(tp, fa, fb).val()[0];
    const float dba = feature_distance(tp, fb, fa).val()[0];
    CHECK(std::abs(dab - dba) <= 1e-6f);
    CHECK(dab > 0.0f);

    // brute-force double-precision reimplementation
    double want = 0.0;
    for (size_t i = 0; i < fa.size(); ++i) {
        const Tensor& ta = fa[i].val();
        const Tensor& tb = fb[i].val();
        const int64_t n = ta.dim(0), h = ta.dim(1), w = ta.dim(2), c = ta.dim(3);
        double tap_sum = 0.0;
        for (int64_t p = 0; p < n * h * w; ++p) {
            double na = 0.0, nb = 0.0;
            for (int64_t k = 0; k < c; ++k) {
                na += static_cast<double>(ta.data()[p * c + k]) * ta.data()[p * c + k];
                nb += static_cast<double>(tb.data()[p * c + k]) * tb.data()[p * c + k];
            }
            na = std::sqrt(na + 1e-8);
            nb = std::sqrt(nb + 1e-8);
            for (int64_t k = 0; k < c; ++k) {
                const double d = ta.data()[p * c + k] / na - tb.data()[p * c + k] / nb;
                tap_sum += d * d;
            }
        }
        want += tap_sum / static_cast<double>(n * h * w);
    }
    CHECK(std::abs(static_cast<double>(dab) - want) <= 1e-6);

    // tap structure mismatch
    std::vector<Var> short_taps(fa.begin(), fa.end() - 1);
    CHECK_THROWS_AS(feature_distance(tp, short_taps, fb), std::invalid_argument);
}

TEST_CASE("metric_loss gradient matches finite differences") {
    Rng rng(23);
    FeatureExtractor ex = tiny_extractor();
    MetricTransform mt;
    mt.resolution = 8;
    Tensor target = tu::random_tensor({1, 8, 8, 1}, rng, -0.6f, 0.6f);
    for (int seed = 0; seed < 3; ++seed) {
        ParamStore ps;
        Rng prng(100 + seed);
        ps.add("img", tu::random_tensor({1, 8, 8, 1}, prng, -0.6f, 0.6f));
        check_grads(
            [&](Tape& t, const ParamStore& p) {
                return metric_loss(t, t.input(target), t.param(p, "img"), ex, mt);
            },
            ps, 1e-3, 3e-4, 2e-2);
    }
}

TEST_CASE("metric_loss is symmetric and zero at equality") {
    Rng rng(29);
    FeatureExtractor ex = make_extractor("lpips_avgpool", 1, 7);
    MetricTransform mt;
    mt.resolution = 32;
    Tensor a = tu::random_tensor({2, 8, 8, 1}, rng);
    Tensor b = tu::random_tensor({2, 8, 8, 1}, rng);
    Tape tp(false);
    Var ia = tp.input(a), ib = tp.input(b);
    CHECK(metric_loss(tp, ia, ia, ex, mt).val()[0] == 0.0f);
    const float ab = metric_loss(tp, ia, ib, ex, mt).val()[0];
    const float ba = metric_loss(tp, ib, ia, ex, mt).val()[0];
    CHECK(std::abs(ab - ba) <= 1e-6f);
    CHECK(ab >= 0.0f);
}

TEST_CASE("feature distance grows with image offset") {
    Rng rng(31);
    FeatureExtractor ex = make_extractor("lpips_avgpool", 1, 7);
    MetricTransform mt;
    mt.resolution = 32;
    Tensor probe = tu::random_tensor({1, 8, 8, 1}, rng, -0.4f, 0.4f);
    std::vector<float> dist;
    for (int i = 0; i <= 5; ++i) {
        const float delta = 0.1f * static_cast<float>(i);
        Tensor shifted = probe;
        for (int64_t j = 0; j < shifted.size(); ++j) shifted.data()[j] += delta;
        Tape tp(false);
        dist.push_back(metric_loss(tp, tp.input(probe), tp.input(shifted), ex, mt).val()[0]);
    }
    CHECK(dist[0] == 0.0f);
    for (size_t i = 1; i < dist.size(); ++i) CHECK(dist[i] >= dist[i - 1]);
    CHECK(dist.back() > dist.front());
}

TEST_CASE("extractor weights stay frozen under backprop through the loss") {
    Rng rng(37);
    FeatureExtractor ex = tiny_extractor();
    ParamStore snapshot;
    for (const auto& [p, t] : ex.weights) snapshot.add(p, t);
    MetricTransform mt;
    mt.resolution = 8;
    ParamStore ps;
    ps.add("img", tu::random_tensor({1, 8, 8, 1}, rng, -0.5f, 0.5f));
    Tensor target = tu::random_tensor({1, 8, 8, 1}, rng, -0.5f, 0.5f);
    Tape tp;
    Var loss = metric_loss(tp, tp.input(target), tp.param(ps, "img"), ex, mt);
    Gradients g = tp.backward(loss);
    // gradient reaches the image but the extractor weights are untouched
    bool any = false;
    auto img_grads = g.for_store(ps);
    for (float v : img_grads.at("img").vec())
        if (v != 0.0f) any = true;
    CHECK(any);
    CHECK(stores_equal(ex.weights, snapshot));
    for (const auto& [p, t] : g.for_store(ex.weights)) {
        (void)p;
        for (float v : t.vec()) CHECK(v == 0.0f);
    }
}

TEST_CASE("extractor file round-trip and malformed files") {
    tu::TempDir dir("casdm-metric");
    FeatureExtractor ex = make_extractor("plain_cnn", 1, 55);
    const std::string path = dir.file("ex.cdm");
    save_extractor(path, ex);

    FeatureExtractor back = make_extractor("file:" + path, 1, 0);
    CHECK(back.channels == ex.channels);
    CHECK(back.kernel == ex.kernel);
    CHECK(back.in_channels == ex.in_channels);
    CHECK(stores_equal(back.weights, ex.weights));

    Rng rng(41);
    Tensor probe = tu::random_tensor({1, 32, 32, 1}, rng, 0.0f, 1.0f);
    Tape tp(false);
    auto ta = extract_features(tp, ex, tp.input(probe));
    auto tb = extract_features(tp, back, tp.input(probe));
    for (size_t i = 0; i < ta.size(); ++i) CHECK(tu::bitwise_equal(ta[i].val(), tb[i].val()));

    // wrong declared input channels
    CHECK_THROWS_AS(make_extractor("file:" + path, 3, 0), ConfigError);

    // missing meta entry
    {
        ParamStore bad;
        for (const auto& [p, t] : ex.weights) bad.add(p, t);
        bad.add("meta.kernel", Tensor::full({1}, 5.0f));
        bad.add("meta.in_channels", Tensor::full({1}, 1.0f));
        const std::string bp = dir.file("bad1.cdm");
        save_params(bp, bad);
        CHECK_THROWS_WITH_AS(load_extractor_file(bp),
                             doctest::Contains("meta.channels"), FormatError);
    }
    // non-integer meta value
    {
        ParamStore bad;
        bad.add("meta.kernel", Tensor::full({1}, 2.5f));
        const std::string bp = dir.file("bad2.cdm");
        save_params(bp, bad);
        CHECK_THROWS_WITH_AS(load_extractor_file(bp),
                             doctest::Contains("meta.kernel"), FormatError);
    }
    // wrong weight shape
    {
        ParamStore bad;
        Tensor chans({3});
        chans.data()[0] = 16.0f;
        chans.data()[1] = 32.0f;
        chans.data()[2] = 32.0f;
        bad.add("meta.channels", std::move(chans));
        bad.add("meta.kernel", Tensor::full({1}, 5.0f));
        bad.add("meta.in_channels", Tensor::full({1}, 1.0f));
        bad.add("s0.w", Tensor::zeros({3, 3, 1, 16})); // kernel says 5
        bad.add("s0.b", Tensor::zeros({16}));
        const std::string bp = dir.file("bad3.cdm");
        save_params(bp, bad);
        CHECK_THROWS_WITH_AS(load_extractor_file(bp), doctest::Contains("s0.w"), FormatError);
    }
    // missing file surfaces as IoError
    CHECK_THROWS_AS(load_extractor_file(dir.file("nope.cdm")), IoError);
}

TEST_CASE("extract_features_flat produces per-image rows") {
    Rng rng(43);
    FeatureExtractor ex = make_extractor("lpips_avgpool", 1, 7);
    MetricTransform mt;
    mt.resolution = 32;
    Tensor imgs = tu::random_tensor({70, 8, 8, 1}, rng); // crosses one chunk boundary
    Tensor last = extract_features_flat(ex, mt, imgs, 3);
    CHECK(last.dims() == std::vector<int64_t>{70, 2 * 2 * 64});
    Tensor pooled = extract_features_flat(ex, mt, imgs, -1);
    CHECK(pooled.dims() == std::vector<int64_t>{70, 8 + 16 + 32 + 64});

    // rows depend only on the row's image: single-image extraction matches
    Tensor one({1, 8, 8, 1});
    std::copy_n(imgs.data() + 69 * 64, 64, one.data());
    Tensor row = extract_features_flat(ex, mt, one, 3);
    for (int64_t i = 0; i < row.size(); ++i)
        CHECK(row.vec()[static_cast<size_t>(i)] ==
              last.vec()[static_cast<size_t>(69 * row.size() + i)]);

    CHECK_THROWS_AS(extract_features_flat(ex, mt, imgs, 4), std::invalid_argument);
    CHECK_THROWS_AS(extract_features_flat(ex, mt, imgs, -2), std::invalid_argument);
}

TEST_CASE("loss_eps and loss_x0: zero, offset, loop oracle") {
    Rng rng(47);
    Tensor a = tu::normal_tensor({2, 4, 4, 3}, rng);
    Tape tp(false);
    Var ia = tp.input(a);
    CHECK(loss_eps(tp, ia, ia).val()[0] == 0.0f);
    CHECK(loss_x0(tp, ia, ia).val()[0] == 0.0f);

    Tensor b = a;
    for (int64_t i = 0; i < b.size(); ++i) b.data()[i] += 0.25f;
    CHECK(loss_eps(tp, ia, tp.input(b)).val()[0] == doctest::Approx(0.0625).epsilon(1e-6));

    Tensor c = tu::normal_tensor({2, 4, 4, 3}, rng);
    double want = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a.vec()[static_cast<size_t>(i)]) -
                         c.vec()[static_cast<size_t>(i)];
        want += d * d;
    }
    want /= static_cast<double>(a.size());
    CHECK(std::abs(static_cast<double>(loss_eps(tp, ia, tp.input(c)).val()[0]) - want) <=
          1e-6 + 1e-5 * want);
}

TEST_CASE("loss_mu: gradient reaches only r") {
    Rng rng(53);
    ParamStore ps;
    ps.add("mu_x0", tu::normal_tensor({2, 4, 4, 2}, rng));
    ps.add("mu_eps", tu::normal_tensor({2, 4, 4, 2}, rng));
    ps.add("r", tu::random_tensor({2, 4, 4, 1}, rng, 0.05f, 0.95f));
    Tensor mu_tilde = tu::normal_tensor({2, 4, 4, 2}, rng);

    Tape tp;
    Var loss = loss_mu(tp, tp.input(mu_tilde), tp.param(ps, "mu_x0"), tp.param(ps, "mu_eps"),
                       tp.param(ps, "r"));
    Gradients g = tp.backward(loss);
    auto grads = g.for_store(ps);
    for (float v : grads.at("mu_x0").vec()) CHECK(v == 0.0f);
    for (float v : grads.at("mu_eps").vec()) CHECK(v == 0.0f);

    // closed form for the r partial under mean reduction, channel-summed
    const Tensor& mx = ps.at("mu_x0");
    const Tensor& me = ps.at("mu_eps");
    const Tensor& r = ps.at("r");
    const int64_t numel = mx.size();
    for (int64_t p = 0; p < r.size(); ++p) {
        double want = 0.0;
        for (int64_t k = 0; k < 2; ++k) {
            const int64_t i = p * 2 + k;
            const double mix = static_cast<double>(r.vec()[static_cast<size_t>(p)]) *
                                   mx.vec()[static_cast<size_t>(i)] +
                               (1.0 - r.vec()[static_cast<size_t>(p)]) *
                                   me.vec()[static_cast<size_t>(i)];
            want += 2.0 * (mix - mu_tilde.vec()[static_cast<size_t>(i)]) *
                    (mx.vec()[static_cast<size_t>(i)] - me.vec()[static_cast<size_t>(i)]);
        }
        want /= static_cast<double>(numel);
        const double got = grads.at("r").vec()[static_cast<size_t>(p)];
        CHECK(std::abs(got - want) <= 1e-6 + 1e-4 * std::abs(want));
    }

    // finite differences on r only
    check_grads(
        [&](Tape& t, const ParamStore& p) {
            return loss_mu(t, t.input(mu_tilde), t.input(mx), t.input(me), t.param(p, "r"));
        },
        [&] {
            ParamStore only;
            only.add("r", r);
            return only;
        }());
}

TEST_CASE("loss_mu is r-independent when the mu estimates agree") {
    Rng rng(59);
    Tensor mu = tu::normal_tensor({1, 4, 4, 2}, rng);
    Tensor mu_tilde = tu::normal_tensor({1, 4, 4, 2}, rng);
    ParamStore ps;
    ps.add("r", tu::random_tensor({1, 4, 4, 1}, rng, 0.1f, 0.9f));
    Tape tp;
    Var loss = loss_mu(tp, tp.input(mu_tilde), tp.input(mu), tp.input(mu), tp.param(ps, "r"));
    Gradients g = tp.backward(loss);
    auto r_grads = g.for_store(ps);
    for (float v : r_grads.at("r").vec()) CHECK(v == 0.0f);
}

TEST_CASE("compose_losses arithmetic and defaults") {
    Tape tp(false);
    LossWeights w; // defaults 1,1,1,0.1
    CHECK(w.lambda_eps == 1.0f);
    CHECK(w.lambda_x0 == 1.0f);
    CHECK(w.lambda_mu == 1.0f);
    CHECK(w.lambda_lpips == 0.1f);
    auto [lt, lp] = compose_losses(tp, tp.input(Tensor::full({1}, 2.0f)),
                                   tp.input(Tensor::full({1}, 3.0f)),
                                   tp.input(Tensor::full({1}, 4.0f)),
                                   tp.input(Tensor::full({1}, 5.0f)), w);
    CHECK(lt.val()[0] == 2.0f);
    CHECK(lp.val()[0] == 7.5f);

    LossWeights off = w;
    off.lambda_lpips = 0.0f;
    auto [lt2, lp2] = compose_losses(tp, tp.input(Tensor::full({1}, 2.0f)),
                                     tp.input(Tensor::full({1}, 3.0f)),
                                     tp.input(Tensor::full({1}, 4.0f)),
                                     tp.input(Tensor::full({1}, 5.0f)), off);
    CHECK(lt2.val()[0] == 2.0f);
    CHECK(lp2.val()[0] == 7.0f);

    LossWeights bad = w;
    bad.lambda_mu = -0.5f;
    CHECK_THROWS_AS(compose_losses(tp, lt, lt, lt, lt, bad), std::invalid_argument);
}

TEST_CASE("loss report csv format") {
    LossReport r;
    r.step = 12;
    r.t = 345;
    r.l_eps = 1.5;
    r.l_x0 = 0.25;
    r.l_mu = 0.125;
    r.l_lpips = 0.0625;
    r.l_theta = 1.5;
    r.l_phi = 0.38125;
    CHECK(LossReport::csv_header() == "step,t,l_eps,l_x0,l_mu,l_lpips,l_theta,l_phi");
    CHECK(r.csv_row() == "12,345,1.5,0.25,0.125,0.0625,1.5,0.38125");
}
