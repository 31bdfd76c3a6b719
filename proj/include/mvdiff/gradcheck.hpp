#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mvdiff/autograd.hpp"
#include "mvdiff/backbone.hpp"

namespace mvdiff {

// Full-model gradient check: reverse-mode gradients of a loss that exercises
// both heads, against central finite differences, for every element of every
// named parameter. Zero-initialized tensors (FiLM projections, output head)
// are perturbed first so no path is trivially inactive. Returns the max
// relative error |g - fd| / max(|g|, |fd|, floor).
template <typename T>
double backbone_gradcheck(const UNet<T>& unet, ParamStore<T>& store, Rng& rng, T fd_eps = T(1e-5),
                          double floor = 1e-6) {
    const DenoiserConfig& cfg = unet.config();
    for (const std::string& name : store.names()) {
        Tensor<T>& v = store.value(name);
        for (std::int64_t i = 0; i < v.numel(); ++i)
            v[i] += static_cast<T>(0.05 * rng.gaussian());
    }

    const int streams = 2;
    Tensor<T> x = Tensor<T>::randn({streams, 2 * cfg.image_channels, cfg.resolution,
                                    cfg.resolution}, rng);
    Tensor<T> t_eps = Tensor<T>::randn({streams, cfg.image_channels, cfg.resolution,
                                        cfg.resolution}, rng);
    Tensor<T> t_logit = Tensor<T>::randn(t_eps.shape(), rng);
    const std::vector<std::pair<double, int>> psi_t = {{0.7, 3}, {2.1, 9}};

    const auto build = [&](Graph<T>& g) {
        auto xv = g.input(x);
        auto emb = unet.embed(g, store, psi_t);
        auto [eps, logits] = unet.forward(g, store, xv, emb);
        auto d1 = g.sub(eps, g.input(t_eps));
        auto d2 = g.sub(logits, g.input(t_logit));
        return g.add(g.mean_all(g.mul(d1, d1)), g.mean_all(g.mul(d2, d2)));
    };

    evaluate_with_gradients<T>(store, build);

    const auto loss_at = [&]() {
        Graph<T> g(false);
        auto xv = g.input(x);
        auto emb = unet.embed(g, store, psi_t);
        auto [eps, logits] = unet.forward(g, store, xv, emb);
        double s1 = 0, s2 = 0;
        const Tensor<T>& e = g.value(eps);
        const Tensor<T>& l = g.value(logits);
        for (std::int64_t i = 0; i < e.numel(); ++i) {
            const double de = static_cast<double>(e[i]) - static_cast<double>(t_eps[i]);
            const double dl = static_cast<double>(l[i]) - static_cast<double>(t_logit[i]);
            s1 += de * de;
            s2 += dl * dl;
        }
        return s1 / static_cast<double>(e.numel()) + s2 / static_cast<double>(l.numel());
    };

    double worst = 0;
    for (const std::string& name : store.names()) {
        const Tensor<T> grad = store.grad(name);
        Tensor<T>& v = store.value(name);
        double gmax = 0;
        for (std::int64_t k = 0; k < grad.numel(); ++k)
            gmax = std::max(gmax, std::abs(static_cast<double>(grad[k])));
        const double eff_floor = std::max(floor, 1e-3 * gmax);  // per-parameter scale
        for (std::int64_t k = 0; k < v.numel(); ++k) {
            const T orig = v[k];
            v[k] = orig + fd_eps;
            const double fp = loss_at();
            v[k] = orig - fd_eps;
            const double fm = loss_at();
            v[k] = orig;
            const double fd = (fp - fm) / (2.0 * static_cast<double>(fd_eps));
            const double an = static_cast<double>(grad[k]);
            const double rel =
                std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), eff_floor});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace mvdiff
