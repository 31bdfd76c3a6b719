#include <catch2/catch_amalgamated.hpp>

#include "mvdiff/autograd.hpp"
#include "mvdiff/composer.hpp"

using namespace mvdiff;

namespace {

template <typename T>
StreamBundle<T> random_bundle(Rng& rng, int n, int c = 2, int h = 4, int w = 4) {
    return StreamBundle<T>::make(Tensor<T>::randn({n, c, h, w}, rng),
                                 Tensor<T>::randn({n, c, h, w}, rng));
}

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

}  // namespace

TEST_CASE("normalize_weights: single view is exactly one", "[composer]") {
    Rng rng(1);
    auto b = random_bundle<double>(rng, 1);
    Tensor<double> w = normalize_weights(b.logits, 1);
    for (std::int64_t i = 0; i < w.numel(); ++i) CHECK(w[i] == 1.0);
}

TEST_CASE("normalize_weights: symmetry and closed form", "[composer]") {
    Tensor<double> logits = Tensor<double>::zeros({2, 1, 2, 2});
    Tensor<double> w = normalize_weights(logits, 2);
    for (std::int64_t i = 0; i < w.numel(); ++i) CHECK(w[i] == 0.5);

    // logits (0, ln 3) -> weights (0.25, 0.75)
    Tensor<double> l2({2, 1, 1, 1}, {0.0, std::log(3.0)});
    Tensor<double> w2 = normalize_weights(l2, 2);
    CHECK(w2[0] == Catch::Approx(0.25).epsilon(1e-12));
    CHECK(w2[1] == Catch::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("normalize_weights: sums to one, padded slots exactly zero", "[composer]") {
    Rng rng(2);
    const int n = 5, valid = 3;
    Tensor<double> logits = Tensor<double>::randn({n, 2, 3, 3}, rng);
    const std::int64_t inner = logits.numel() / n;
    for (int i = valid; i < n; ++i)
        for (std::int64_t j = 0; j < inner; ++j) logits[i * inner + j] = kNegInf;
    Tensor<double> w = normalize_weights(logits, valid);
    for (std::int64_t j = 0; j < inner; ++j) {
        double sum = 0;
        for (int i = 0; i < valid; ++i) {
            CHECK(w[i * inner + j] >= 0.0);
            sum += w[i * inner + j];
        }
        CHECK(sum == Catch::Approx(1.0).epsilon(1e-12));
        for (int i = valid; i < n; ++i) CHECK(w[i * inner + j] == 0.0);
    }
}

TEST_CASE("normalize_weights error paths", "[composer]") {
    Rng rng(3);
    Tensor<double> logits = Tensor<double>::randn({2, 1, 2, 2}, rng);
    CHECK_THROWS_AS(normalize_weights(logits, 0), InvalidArgument);
    logits[0] = kNegInf;  // -inf in a valid slot
    CHECK_THROWS_AS(normalize_weights(logits, 2), NumericError);
    Tensor<double> unpadded = Tensor<double>::randn({3, 1, 2, 2}, rng);
    CHECK_THROWS_AS(normalize_weights(unpadded, 2), InvalidArgument);  // pad not -inf
}

TEST_CASE("compose_noise: identity, mean, per-pixel reference loop", "[composer]") {
    Rng rng(4);
    auto b1 = random_bundle<double>(rng, 1);
    Tensor<double> w1 = normalize_weights(b1.logits, 1);
    Tensor<double> out1 = compose_noise(b1, w1);
    for (std::int64_t i = 0; i < out1.numel(); ++i) CHECK(out1[i] == b1.eps_hat[i]);

    // equal logits -> elementwise mean of two views
    Tensor<double> eps = Tensor<double>::randn({2, 1, 2, 2}, rng);
    auto b2 = StreamBundle<double>::make(eps, Tensor<double>::zeros({2, 1, 2, 2}));
    Tensor<double> w2 = normalize_weights(b2.logits, 2);
    Tensor<double> out2 = compose_noise(b2, w2);
    for (std::int64_t i = 0; i < out2.numel(); ++i)
        CHECK(out2[i] == Catch::Approx(0.5 * (eps[i] + eps[4 + i])).epsilon(1e-12));

    // three random streams vs a scalar per-pixel loop
    auto b3 = random_bundle<double>(rng, 3);
    Tensor<double> w3 = normalize_weights(b3.logits, 3);
    Tensor<double> out3 = compose_noise(b3, w3);
    const std::int64_t inner = b3.eps_hat.numel() / 3;
    for (std::int64_t j = 0; j < inner; ++j) {
        double expect = 0;
        for (int i = 0; i < 3; ++i) expect += w3[i * inner + j] * b3.eps_hat[i * inner + j];
        CHECK(out3[j] == Catch::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("compose_average: identity, uniform equivalence, scalar oracle", "[composer]") {
    Rng rng(5);
    auto b1 = random_bundle<double>(rng, 1);
    Tensor<double> a1 = compose_average(b1);
    for (std::int64_t i = 0; i < a1.numel(); ++i) CHECK(a1[i] == b1.eps_hat[i]);

    auto b3 = random_bundle<double>(rng, 3);
    // equal logits -> compose_noise equals compose_average within roundoff
    std::fill(b3.logits.vec().begin(), b3.logits.vec().end(), 0.7);
    Tensor<double> w = normalize_weights(b3.logits, 3);
    Tensor<double> cn = compose_noise(b3, w);
    Tensor<double> ca = compose_average(b3);
    CHECK(max_abs_diff(cn, ca) < 1e-14);

    const std::int64_t inner = b3.eps_hat.numel() / 3;
    for (std::int64_t j = 0; j < inner; ++j) {
        double mean = 0;
        for (int i = 0; i < 3; ++i) mean += b3.eps_hat[i * inner + j];
        mean /= 3.0;
        CHECK(ca[j] == Catch::Approx(mean).epsilon(1e-12));
    }
}

TEST_CASE("permutation invariance is exact under canonical ordering", "[composer]") {
    Rng rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 2 + static_cast<int>(rng.uniform_below(4));
        auto b = random_bundle<float>(rng, n);
        Tensor<float> w = normalize_weights(b.logits, n, b.stream_ids);
        Tensor<float> base = compose_noise(b, w);

        // permute slots together with their stream ids
        std::vector<int> perm(static_cast<size_t>(n));
        std::iota(perm.begin(), perm.end(), 0);
        rng.shuffle(perm.begin(), perm.end());
        StreamBundle<float> p;
        p.valid_count = n;
        p.eps_hat = Tensor<float>(b.eps_hat.shape());
        p.logits = Tensor<float>(b.logits.shape());
        p.stream_ids.resize(static_cast<size_t>(n));
        const std::int64_t inner = b.eps_hat.numel() / n;
        for (int slot = 0; slot < n; ++slot) {
            const int src = perm[static_cast<size_t>(slot)];
            std::copy_n(b.eps_hat.data() + src * inner, inner, p.eps_hat.data() + slot * inner);
            std::copy_n(b.logits.data() + src * inner, inner, p.logits.data() + slot * inner);
            p.stream_ids[static_cast<size_t>(slot)] = b.stream_ids[static_cast<size_t>(src)];
        }
        Tensor<float> wp = normalize_weights(p.logits, n, p.stream_ids);
        Tensor<float> out = compose_noise(p, wp);
        CHECK(out == base);  // exact equality
    }
}

TEST_CASE("padding neutrality: appended -inf slots never change the result", "[composer]") {
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        const int n = 1 + static_cast<int>(rng.uniform_below(4));
        auto b = random_bundle<float>(rng, n);
        Tensor<float> w = normalize_weights(b.logits, n, b.stream_ids);
        Tensor<float> base = compose_noise(b, w);

        const int pad = 1 + static_cast<int>(rng.uniform_below(3));
        StreamBundle<float> q;
        q.valid_count = n;
        Shape s = b.eps_hat.shape();
        s[0] = n + pad;
        q.eps_hat = Tensor<float>(s);
        q.logits = Tensor<float>(s);
        const std::int64_t inner = b.eps_hat.numel() / n;
        std::copy_n(b.eps_hat.data(), n * inner, q.eps_hat.data());
        std::copy_n(b.logits.data(), n * inner, q.logits.data());
        Rng junk(trial);
        for (std::int64_t i = n * inner; i < q.eps_hat.numel(); ++i) {
            q.eps_hat[i] = static_cast<float>(junk.gaussian());  // arbitrary finite
            q.logits[i] = -std::numeric_limits<float>::infinity();
        }
        q.stream_ids.resize(static_cast<size_t>(n + pad));
        std::iota(q.stream_ids.begin(), q.stream_ids.end(), 0);
        Tensor<float> wq = normalize_weights(q.logits, n, q.stream_ids);
        Tensor<float> out = compose_noise(q, wq);
        CHECK(out == base);
        // and the valid-slot weights themselves are bitwise unchanged
        for (std::int64_t i = 0; i < n * inner; ++i) CHECK(wq[i] == w[i]);
    }
}

TEST_CASE("convex combination bound on random bundles", "[composer]") {
    Rng rng(8);
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = 1 + static_cast<int>(rng.uniform_below(5));
        auto b = random_bundle<double>(rng, n, 1, 2, 2);
        Tensor<double> w = normalize_weights(b.logits, n);
        Tensor<double> out = compose_noise(b, w);
        const std::int64_t inner = b.eps_hat.numel() / n;
        for (std::int64_t j = 0; j < inner; ++j) {
            double lo = b.eps_hat[j], hi = b.eps_hat[j];
            for (int i = 1; i < n; ++i) {
                lo = std::min(lo, b.eps_hat[i * inner + j]);
                hi = std::max(hi, b.eps_hat[i * inner + j]);
            }
            const double slack = 4e-15 * std::max(std::abs(lo), std::abs(hi));
            CHECK(out[j] >= lo - slack);
            CHECK(out[j] <= hi + slack);
        }
    }
}

TEST_CASE("gradient flows through both eps_hat and logits", "[composer]") {
    Rng rng(9);
    const int n = 3;
    Tensor<double> eps = Tensor<double>::randn({n, 1, 3, 3}, rng);
    Tensor<double> logits = Tensor<double>::randn({n, 1, 3, 3}, rng);
    Tensor<double> target = Tensor<double>::randn({1, 3, 3}, rng);
    Graph<double> g;
    auto ev = g.input(eps, true);
    auto lv = g.input(logits, true);
    auto w = g.softmax_axis0(lv);
    auto comp = g.sum_axis0(g.mul(w, ev));
    auto diff = g.sub(comp, g.input(target));
    auto loss = g.mean_all(g.mul(diff, diff));
    g.backward(loss);
    double eps_norm = 0, logit_norm = 0;
    Tensor<double> ge = g.grad(ev), gl = g.grad(lv);
    for (std::int64_t i = 0; i < ge.numel(); ++i) {
        eps_norm += ge[i] * ge[i];
        logit_norm += gl[i] * gl[i];
    }
    CHECK(eps_norm > 0.0);
    CHECK(logit_norm > 0.0);
}

TEST_CASE("graph softmax path matches normalize_weights on iota ids", "[composer]") {
    Rng rng(10);
    auto b = random_bundle<float>(rng, 4);
    Tensor<float> w_api = normalize_weights(b.logits, 4);
    Graph<float> g(false);
    auto wv = g.softmax_axis0(g.input(b.logits));
    CHECK(g.value(wv) == w_api);
}

TEST_CASE("weight masks: channel-average, masses sum to one", "[composer]") {
    Rng rng(11);
    auto b = random_bundle<double>(rng, 3, 2, 4, 4);
    Tensor<double> w = normalize_weights(b.logits, 3);
    WeightMasks<double> wm = weight_masks(w, 3);
    REQUIRE(wm.masks.size() == 3);
    double mass_sum = 0;
    for (double m : wm.masses) mass_sum += m;
    CHECK(mass_sum == Catch::Approx(1.0).epsilon(1e-9));
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
            double s = 0;
            for (int i = 0; i < 3; ++i) s += wm.masks[static_cast<size_t>(i)][y * 4 + x];
            CHECK(s == Catch::Approx(1.0).epsilon(1e-9));
        }
}
