#include <catch2/catch_amalgamated.hpp>

#include "mvdiff/schedule.hpp"
#include "test_helpers.hpp"

using namespace mvdiff;
using test_helpers::rel_err;

TEST_CASE("linear schedule endpoints and degenerate single step", "[schedule]") {
    auto s = build_linear_schedule<double>(2000, 1e-6, 0.01);
    CHECK(s.beta_at(1) == 1e-6);
    CHECK(s.beta_at(2000) == 0.01);
    for (int t = 2; t <= 2000; ++t) CHECK(s.beta_at(t) > s.beta_at(t - 1));

    auto s1 = build_linear_schedule<double>(1, 0.5, 0.9);
    CHECK(s1.steps == 1);
    CHECK(s1.beta_at(1) == 0.5);

    CHECK_THROWS_AS(build_linear_schedule<double>(0, 1e-6, 0.01), InvalidArgument);
    CHECK_THROWS_AS(build_linear_schedule<double>(10, 0.0, 0.01), InvalidArgument);
    CHECK_THROWS_AS(build_linear_schedule<double>(10, 0.2, 0.1), InvalidArgument);
    CHECK_THROWS_AS(build_linear_schedule<double>(10, 0.2, 1.0), InvalidArgument);
}

TEST_CASE("gamma: recurrence exact, strictly decreasing, frozen endpoint", "[schedule]") {
    auto s = build_linear_schedule<double>(2000, 1e-6, 0.01);
    for (int t = 1; t <= 2000; ++t) {
        CHECK(s.gamma_f64_at(t) == s.gamma_f64_at(t - 1) * s.alpha_f64_at(t));  // exact
        if (t > 1) CHECK(s.gamma_f64_at(t) < s.gamma_f64_at(t - 1));
    }
    CHECK(s.gamma_f64_at(0) == 1.0);

    // independent direct product oracle
    double prod = 1.0;
    for (int t = 1; t <= 2000; ++t)
        prod *= 1.0 - (1e-6 + (t - 1) / 1999.0 * (0.01 - 1e-6));
    CHECK(rel_err(s.gamma_f64_at(2000), prod) < 1e-12);
    // regression constant (order 1e-5): direct f64 product, frozen
    CHECK(rel_err(s.gamma_f64_at(2000), 4.3859782361332086e-05) < 1e-12);
}

TEST_CASE("forward_noise formula cases", "[schedule]") {
    Rng rng(3);
    auto s = build_linear_schedule<double>(100, 1e-4, 0.02);
    Tensor<double> y0 = Tensor<double>::randn({1, 4, 4}, rng);
    Tensor<double> eps = Tensor<double>::randn({1, 4, 4}, rng);

    // gamma = 1 (the t = 0 convention) reproduces y0 exactly
    Tensor<double> same = forward_noise_gamma(y0, eps, 1.0);
    CHECK(same == y0);

    // eps = 0 scales by sqrt(gamma)
    Tensor<double> z = Tensor<double>::zeros(y0.shape());
    Tensor<double> scaled = forward_noise(y0, 50, z, s);
    const double root = std::sqrt(s.gamma_f64_at(50));
    for (std::int64_t i = 0; i < y0.numel(); ++i)
        CHECK(scaled[i] == Catch::Approx(root * y0[i]).margin(1e-15));

    CHECK_THROWS_AS(forward_noise(y0, 0, eps, s), InvalidArgument);
    CHECK_THROWS_AS(forward_noise(y0, 101, eps, s), InvalidArgument);
    Tensor<double> wrong = Tensor<double>::zeros({1, 2, 2});
    CHECK_THROWS_AS(forward_noise(y0, 5, wrong, s), InvalidArgument);
}

TEST_CASE("marginal variance matches Monte Carlo at t = T", "[schedule]") {
    auto s = build_linear_schedule<double>(200, 1e-4, 0.05);
    Rng rng(77);
    const int draws = 10000;
    const int pix = 16;  // 4x4 image
    Tensor<double> y0 = Tensor<double>::zeros({1, 4, 4});
    std::vector<double> sum(pix, 0), sumsq(pix, 0);
    for (int d = 0; d < draws; ++d) {
        Tensor<double> eps = Tensor<double>::randn({1, 4, 4}, rng);
        Tensor<double> yt = forward_noise(y0, 200, eps, s);
        for (int p = 0; p < pix; ++p) {
            sum[p] += yt[p];
            sumsq[p] += yt[p] * yt[p];
        }
    }
    const double expect = 1.0 - s.gamma_f64_at(200);
    for (int p = 0; p < pix; ++p) {
        const double var = sumsq[p] / draws - (sum[p] / draws) * (sum[p] / draws);
        CHECK(std::abs(var - expect) / expect < 0.05);
    }
}

TEST_CASE("sequential transitions compose to the marginal (Monte Carlo)", "[schedule]") {
    // p(y_t | y_{t-1}) = N(sqrt(alpha_t) y_{t-1}, (1 - alpha_t) I) composed
    // t times from y0 = 0 has variance 1 - gamma_t.
    auto s = build_linear_schedule<double>(20, 1e-3, 0.08);
    Rng rng(13);
    const int draws = 10000;
    double sum = 0, sumsq = 0;
    for (int d = 0; d < draws; ++d) {
        double y = 0.0;
        for (int t = 1; t <= 20; ++t) {
            const double a = s.alpha_f64_at(t);
            y = std::sqrt(a) * y + std::sqrt(1.0 - a) * rng.gaussian();
        }
        sum += y;
        sumsq += y * y;
    }
    const double var = sumsq / draws - (sum / draws) * (sum / draws);
    const double expect = 1.0 - s.gamma_f64_at(20);
    CHECK(std::abs(var - expect) / expect < 0.05);
}

TEST_CASE("posterior: t = 1 exactness, zeros, frozen 2-step scalar", "[schedule]") {
    auto s = build_linear_schedule<double>(10, 0.05, 0.3);
    Rng rng(5);
    Tensor<double> y0 = Tensor<double>::randn({1, 3, 3}, rng);
    Tensor<double> yt = Tensor<double>::randn({1, 3, 3}, rng);

    auto p1 = posterior_params(y0, yt, 1, s);
    CHECK(p1.mu == y0);      // exact: gamma_0 = 1 makes the y_t coefficient vanish
    CHECK(p1.sigma2 == 0.0);

    Tensor<double> z = Tensor<double>::zeros({1, 3, 3});
    auto pz = posterior_params(z, z, 5, s);
    for (std::int64_t i = 0; i < pz.mu.numel(); ++i) CHECK(pz.mu[i] == 0.0);

    // hand-evaluated scalar case: T = 2, beta = (0.1, 0.3), y0 = 0.7, yt = -0.4
    auto s2 = build_linear_schedule<double>(2, 0.1, 0.3);
    Tensor<double> a = Tensor<double>::scalar(0.7);
    Tensor<double> b = Tensor<double>::scalar(-0.4);
    auto p2 = posterior_params(a, b, 2, s2);
    CHECK(p2.mu[0] == Catch::Approx(0.4479921392682294).epsilon(1e-12));
    CHECK(p2.sigma2 == Catch::Approx(0.08108108108108109).epsilon(1e-12));

    // property: sigma^2 in [0, 1 - alpha_t]
    for (int t = 1; t <= 10; ++t) {
        auto p = posterior_params(y0, yt, t, s);
        CHECK(p.sigma2 >= 0.0);
        CHECK(p.sigma2 <= 1.0 - s.alpha_f64_at(t) + 1e-15);
    }
    CHECK_THROWS_AS(posterior_params(y0, yt, 0, s), InvalidArgument);
}

TEST_CASE("predict_y0 inverts forward_noise", "[schedule]") {
    auto s = build_linear_schedule<double>(2000, 1e-6, 0.01);
    Rng rng(17);
    Tensor<double> y0 = Tensor<double>::randn({1, 4, 4}, rng);
    Tensor<double> eps = Tensor<double>::randn({1, 4, 4}, rng);
    for (int t : {1, 500, 1000, 2000}) {
        Tensor<double> yt = forward_noise(y0, t, eps, s);
        Tensor<double> rec = predict_y0(yt, eps, t, s);
        CHECK(max_abs_diff(rec, y0) < 1e-9);
    }
    // eps_hat = 0 divides by sqrt(gamma)
    Tensor<double> z = Tensor<double>::zeros({1, 4, 4});
    Tensor<double> yq = predict_y0(y0, z, 100, s);
    const double inv = 1.0 / std::sqrt(s.gamma_f64_at(100));
    for (std::int64_t i = 0; i < y0.numel(); ++i)
        CHECK(yq[i] == Catch::Approx(y0[i] * inv).margin(1e-12));

    // f32 round trip at t = 1000 within 1e-4
    auto sf = build_linear_schedule<float>(2000, 1e-6, 0.01);
    Rng rng2(18);
    Tensor<float> y0f = Tensor<float>::randn({1, 8, 8}, rng2);
    Tensor<float> epsf = Tensor<float>::randn({1, 8, 8}, rng2);
    Tensor<float> ytf = forward_noise(y0f, 1000, epsf, sf);
    Tensor<float> recf = predict_y0(ytf, epsf, 1000, sf);
    CHECK(max_abs_diff(recf, y0f) < 1e-4);
}

TEST_CASE("reverse_step formula and t = 1 contract", "[schedule]") {
    auto s3 = build_linear_schedule<double>(3, 0.1, 0.3);  // beta = 0.1, 0.2, 0.3
    Tensor<double> y = Tensor<double>::scalar(0.5);
    Tensor<double> eps = Tensor<double>::scalar(-0.25);
    Tensor<double> z = Tensor<double>::scalar(0.8);
    Tensor<double> z0 = Tensor<double>::scalar(0.0);

    // eps = 0, z = 0 -> y / sqrt(alpha_t)
    Tensor<double> out = reverse_step(y, z0, z0, 2, s3);
    CHECK(out[0] == Catch::Approx(0.5 / std::sqrt(s3.alpha_f64_at(2))).epsilon(1e-14));

    // hand-evaluated scalar values (frozen)
    out = reverse_step(y, eps, z, 2, s3);
    CHECK(out[0] == Catch::Approx(1.0224321526159783).epsilon(1e-12));
    out = reverse_step(y, eps, z0, 1, s3);
    CHECK(out[0] == Catch::Approx(0.6103796100280633).epsilon(1e-12));

    // nonzero z at t = 1 is rejected
    CHECK_THROWS_AS(reverse_step(y, eps, z, 1, s3), InvalidArgument);
    CHECK_THROWS_AS(reverse_step(y, eps, z, 4, s3), InvalidArgument);
}
