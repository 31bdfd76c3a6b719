#pragma once

#include <cmath>
#include <vector>

#include "mvdiff/common.hpp"
#include "mvdiff/rng.hpp"

namespace mvdiff {

// Analytic Gaussian energy mixture: p(x) ∝ Σ exp(-E_i(x)) with
// E_i(x) = ||x - mu_i||^2 / (2 sigma_i^2) + d log(sigma_i).
// The mixture grounds the composer's softmax weighting: the score of a
// mixture of experts is exactly the softmax(-E)-weighted sum of per-expert
// score contributions, for any energies. Everything here is f64.
struct GaussianMixture {
    int dim = 1;
    std::vector<std::vector<double>> means;  // N x dim
    std::vector<double> sigmas;              // per-component sigma_i > 0

    int components() const { return static_cast<int>(means.size()); }

    void validate() const {
        require(dim >= 1 && !means.empty(), "mixture: need N >= 1, d >= 1");
        require(means.size() == sigmas.size(), "mixture: means/sigmas size mismatch");
        for (const auto& m : means)
            require(static_cast<int>(m.size()) == dim, "mixture: mean dimension mismatch");
        for (double s : sigmas) require(s > 0, "mixture: sigma must be positive");
    }

    static GaussianMixture random(Rng& rng, int n, int d, bool vary_sigma = true) {
        GaussianMixture m;
        m.dim = d;
        for (int i = 0; i < n; ++i) {
            std::vector<double> mu(static_cast<size_t>(d));
            for (auto& v : mu) v = -2.0 + 4.0 * rng.uniform();
            m.means.push_back(std::move(mu));
            m.sigmas.push_back(vary_sigma ? 0.5 + 1.5 * rng.uniform() : 1.0);
        }
        m.validate();
        return m;
    }

    double energy(int i, const std::vector<double>& x) const {
        const auto& mu = means[static_cast<size_t>(i)];
        const double s2 = sigmas[static_cast<size_t>(i)] * sigmas[static_cast<size_t>(i)];
        double q = 0;
        for (int k = 0; k < dim; ++k) {
            const double d = x[static_cast<size_t>(k)] - mu[static_cast<size_t>(k)];
            q += d * d;
        }
        return q / (2.0 * s2) + dim * std::log(sigmas[static_cast<size_t>(i)]);
    }

    // grad of -E_i: (mu_i - x) / sigma_i^2
    std::vector<double> neg_energy_grad(int i, const std::vector<double>& x) const {
        const auto& mu = means[static_cast<size_t>(i)];
        const double s2 = sigmas[static_cast<size_t>(i)] * sigmas[static_cast<size_t>(i)];
        std::vector<double> g(static_cast<size_t>(dim));
        for (int k = 0; k < dim; ++k)
            g[static_cast<size_t>(k)] = (mu[static_cast<size_t>(k)] - x[static_cast<size_t>(k)]) / s2;
        return g;
    }

    // log Σ exp(-E_i(x)) up to the normalizing constant, stable via max shift.
    double log_density(const std::vector<double>& x) const {
        double m = -energy(0, x);
        for (int i = 1; i < components(); ++i) m = std::max(m, -energy(i, x));
        double s = 0;
        for (int i = 0; i < components(); ++i) s += std::exp(-energy(i, x) - m);
        return m + std::log(s);
    }

    // softmax(-E(x)): the inferred per-expert weights.
    std::vector<double> weights(const std::vector<double>& x) const {
        double m = -energy(0, x);
        for (int i = 1; i < components(); ++i) m = std::max(m, -energy(i, x));
        double den = 0;
        for (int i = 0; i < components(); ++i) den += std::exp(-energy(i, x) - m);
        std::vector<double> w(static_cast<size_t>(components()));
        for (int i = 0; i < components(); ++i)
            w[static_cast<size_t>(i)] = std::exp(-energy(i, x) - m) / den;
        return w;
    }
};

// Route 1: score as the ratio of exp-weighted sums,
// grad log p = (Σ exp(-E_i) ∇(-E_i)) / (Σ exp(-E_j)), with max-shift.
inline std::vector<double> mixture_score(const std::vector<double>& x, const GaussianMixture& m) {
    m.validate();
    double shift = -m.energy(0, x);
    for (int i = 1; i < m.components(); ++i) shift = std::max(shift, -m.energy(i, x));
    std::vector<double> num(static_cast<size_t>(m.dim), 0.0);
    double den = 0;
    for (int i = 0; i < m.components(); ++i) {
        const double e = std::exp(-m.energy(i, x) - shift);
        den += e;
        const std::vector<double> g = m.neg_energy_grad(i, x);
        for (int k = 0; k < m.dim; ++k) num[static_cast<size_t>(k)] += e * g[static_cast<size_t>(k)];
    }
    for (int k = 0; k < m.dim; ++k) num[static_cast<size_t>(k)] /= den;
    return num;
}

// Route 2: per-expert softmax weights first, then the weighted sum of expert
// score contributions — the form the learned composer mirrors.
inline std::vector<double> moe_composed_score(const std::vector<double>& x,
                                              const GaussianMixture& m) {
    m.validate();
    const std::vector<double> w = m.weights(x);
    std::vector<double> score(static_cast<size_t>(m.dim), 0.0);
    for (int i = 0; i < m.components(); ++i) {
        const std::vector<double> g = m.neg_energy_grad(i, x);
        for (int k = 0; k < m.dim; ++k)
            score[static_cast<size_t>(k)] += w[static_cast<size_t>(i)] * g[static_cast<size_t>(k)];
    }
    return score;
}

inline double vec_norm(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

// Max over random probe points of the relative disagreement between the two
// score routes. The identity says this is zero up to roundoff.
inline double verify_identity(const GaussianMixture& m, int sample_count, Rng& rng,
                              double eps_floor = 1e-12) {
    require(sample_count >= 1, "verify_identity: sample_count >= 1");
    m.validate();
    double worst = 0;
    for (int s = 0; s < sample_count; ++s) {
        std::vector<double> x(static_cast<size_t>(m.dim));
        const int anchor = static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(m.components())));
        for (int k = 0; k < m.dim; ++k)
            x[static_cast<size_t>(k)] =
                m.means[static_cast<size_t>(anchor)][static_cast<size_t>(k)] + 2.0 * rng.gaussian();
        const std::vector<double> a = mixture_score(x, m);
        const std::vector<double> b = moe_composed_score(x, m);
        std::vector<double> d(static_cast<size_t>(m.dim));
        for (int k = 0; k < m.dim; ++k) d[static_cast<size_t>(k)] = a[static_cast<size_t>(k)] - b[static_cast<size_t>(k)];
        worst = std::max(worst, vec_norm(d) / (vec_norm(a) + eps_floor));
    }
    return worst;
}

// Central-difference check of mixture_score against the log-density itself.
inline double score_fd_max_rel_err(const GaussianMixture& m, int sample_count, Rng& rng,
                                   double fd_eps = 1e-6) {
    m.validate();
    double worst = 0;
    for (int s = 0; s < sample_count; ++s) {
        std::vector<double> x(static_cast<size_t>(m.dim));
        const int anchor = static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(m.components())));
        for (int k = 0; k < m.dim; ++k)
            x[static_cast<size_t>(k)] =
                m.means[static_cast<size_t>(anchor)][static_cast<size_t>(k)] + 1.5 * rng.gaussian();
        const std::vector<double> sc = mixture_score(x, m);
        std::vector<double> fd(static_cast<size_t>(m.dim));
        for (int k = 0; k < m.dim; ++k) {
            std::vector<double> xp = x, xm = x;
            xp[static_cast<size_t>(k)] += fd_eps;
            xm[static_cast<size_t>(k)] -= fd_eps;
            fd[static_cast<size_t>(k)] = (m.log_density(xp) - m.log_density(xm)) / (2.0 * fd_eps);
        }
        std::vector<double> d(static_cast<size_t>(m.dim));
        for (int k = 0; k < m.dim; ++k) d[static_cast<size_t>(k)] = sc[static_cast<size_t>(k)] - fd[static_cast<size_t>(k)];
        worst = std::max(worst, vec_norm(d) / (vec_norm(sc) + 1e-12));
    }
    return worst;
}

}  // namespace mvdiff
