#pragma once

#include <cmath>
#include <vector>

#include "mvdiff/tensor.hpp"

namespace mvdiff {

// Per-timestep noise schedule: beta_t, alpha_t = 1 - beta_t and the running
// product gamma_t, with the gamma_0 == 1 convention so t = 1 formulas are
// well-defined. Tables are computed once in f64 and stored in the working
// precision; products of thousands of near-one factors lose too much in f32.
template <typename T>
struct NoiseSchedule {
    int steps = 0;
    double beta_start = 0, beta_end = 0;
    std::vector<T> beta, alpha, gamma;
    std::vector<double> alpha_f64, gamma_f64;

    T gamma_at(int t) const {  // t in 0..steps
        require(t >= 0 && t <= steps, "gamma_at: t out of range");
        return t == 0 ? T(1) : gamma[t - 1];
    }
    double gamma_f64_at(int t) const {
        require(t >= 0 && t <= steps, "gamma_f64_at: t out of range");
        return t == 0 ? 1.0 : gamma_f64[t - 1];
    }
    double alpha_f64_at(int t) const {
        require(t >= 1 && t <= steps, "alpha_f64_at: t out of range");
        return alpha_f64[t - 1];
    }
    T alpha_at(int t) const {
        require(t >= 1 && t <= steps, "alpha_at: t out of range");
        return alpha[t - 1];
    }
    T beta_at(int t) const {
        require(t >= 1 && t <= steps, "beta_at: t out of range");
        return beta[t - 1];
    }
    void check_t(int t) const { require(t >= 1 && t <= steps, "timestep out of range"); }
};

// beta_t = beta_start + (t-1)/(T-1) * (beta_end - beta_start); degenerate
// T = 1 uses beta_start alone.
template <typename T>
NoiseSchedule<T> build_linear_schedule(int steps, double beta_start, double beta_end) {
    require(steps >= 1, "schedule: need at least one timestep");
    require(beta_start > 0 && beta_start <= beta_end && beta_end < 1,
            "schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule<T> s;
    s.steps = steps;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.beta.resize(steps);
    s.alpha.resize(steps);
    s.gamma.resize(steps);
    s.alpha_f64.resize(steps);
    s.gamma_f64.resize(steps);
    double prod = 1.0;
    for (int t = 1; t <= steps; ++t) {
        const double b = steps == 1 ? beta_start
                                    : beta_start + (static_cast<double>(t - 1) / (steps - 1)) *
                                                       (beta_end - beta_start);
        const double a = 1.0 - b;
        prod *= a;
        s.beta[t - 1] = static_cast<T>(b);
        s.alpha[t - 1] = static_cast<T>(a);
        s.alpha_f64[t - 1] = a;
        s.gamma_f64[t - 1] = prod;
        s.gamma[t - 1] = static_cast<T>(prod);
    }
    return s;
}

// y_t = sqrt(gamma) * y0 + sqrt(1 - gamma) * eps, for an explicit gamma.
template <typename T>
Tensor<T> forward_noise_gamma(const Tensor<T>& y0, const Tensor<T>& eps, double gamma) {
    require(y0.same_shape(eps), "forward_noise: shape mismatch");
    const T a = static_cast<T>(std::sqrt(gamma));
    const T b = static_cast<T>(std::sqrt(1.0 - gamma));
    Tensor<T> out(y0.shape());
    for (std::int64_t i = 0; i < y0.numel(); ++i) out[i] = a * y0[i] + b * eps[i];
    return out;
}

template <typename T>
Tensor<T> forward_noise(const Tensor<T>& y0, int t, const Tensor<T>& eps,
                        const NoiseSchedule<T>& s) {
    s.check_t(t);
    return forward_noise_gamma(y0, eps, s.gamma_f64_at(t));
}

template <typename T>
struct PosteriorParams {
    Tensor<T> mu;
    double sigma2 = 0;
};

// q(y_{t-1} | y0, y_t): mu = c0 * y0 + c1 * y_t with
// c0 = sqrt(gamma_{t-1}) (1-alpha_t) / (1-gamma_t),
// c1 = sqrt(alpha_t) (1-gamma_{t-1}) / (1-gamma_t),
// sigma^2 = (1-gamma_{t-1})(1-alpha_t)/(1-gamma_t).
template <typename T>
PosteriorParams<T> posterior_params(const Tensor<T>& y0, const Tensor<T>& yt, int t,
                                    const NoiseSchedule<T>& s) {
    s.check_t(t);
    require(y0.same_shape(yt), "posterior_params: shape mismatch");
    const double g_prev = s.gamma_f64_at(t - 1);
    const double g_t = s.gamma_f64_at(t);
    const double a_t = s.alpha_f64_at(t);
    const double c0 = std::sqrt(g_prev) * (1.0 - a_t) / (1.0 - g_t);
    const double c1 = std::sqrt(a_t) * (1.0 - g_prev) / (1.0 - g_t);
    PosteriorParams<T> out;
    out.mu = Tensor<T>(y0.shape());
    const T tc0 = static_cast<T>(c0), tc1 = static_cast<T>(c1);
    for (std::int64_t i = 0; i < y0.numel(); ++i) out.mu[i] = tc0 * y0[i] + tc1 * yt[i];
    out.sigma2 = (1.0 - g_prev) * (1.0 - a_t) / (1.0 - g_t);
    return out;
}

// y0_hat = (y_t - sqrt(1 - gamma_t) * eps_hat) / sqrt(gamma_t)
template <typename T>
Tensor<T> predict_y0(const Tensor<T>& yt, const Tensor<T>& eps_hat, int t,
                     const NoiseSchedule<T>& s) {
    s.check_t(t);
    require(yt.same_shape(eps_hat), "predict_y0: shape mismatch");
    const double g = s.gamma_f64_at(t);
    const T inv = static_cast<T>(1.0 / std::sqrt(g));
    const T b = static_cast<T>(std::sqrt(1.0 - g));
    Tensor<T> out(yt.shape());
    for (std::int64_t i = 0; i < yt.numel(); ++i) out[i] = (yt[i] - b * eps_hat[i]) * inv;
    return out;
}

// y_{t-1} = (y_t - (1-alpha_t)/sqrt(1-gamma_t) * eps_comp) / sqrt(alpha_t)
//           + sqrt(1-alpha_t) * z        (z must be zero at t = 1)
template <typename T>
Tensor<T> reverse_step(const Tensor<T>& yt, const Tensor<T>& eps_comp, const Tensor<T>& z, int t,
                       const NoiseSchedule<T>& s) {
    s.check_t(t);
    require(yt.same_shape(eps_comp) && yt.same_shape(z), "reverse_step: shape mismatch");
    if (t == 1) {
        for (std::int64_t i = 0; i < z.numel(); ++i)
            require(z[i] == T(0), "reverse_step: z must be zero at t = 1");
    }
    const double g_t = s.gamma_f64_at(t);
    const double a_t = s.alpha_f64_at(t);
    const T inv_sqrt_a = static_cast<T>(1.0 / std::sqrt(a_t));
    const T coef = static_cast<T>((1.0 - a_t) / std::sqrt(1.0 - g_t));
    const T noise_std = static_cast<T>(std::sqrt(1.0 - a_t));
    Tensor<T> out(yt.shape());
    for (std::int64_t i = 0; i < yt.numel(); ++i)
        out[i] = inv_sqrt_a * (yt[i] - coef * eps_comp[i]) + noise_std * z[i];
    out.check_finite("reverse_step");
    return out;
}

}  // namespace mvdiff
