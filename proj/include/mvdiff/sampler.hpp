#pragma once

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include "mvdiff/backbone.hpp"
#include "mvdiff/composer.hpp"
#include "mvdiff/schedule.hpp"

namespace mvdiff {

enum class ComposeMode { weighted, averaged };

inline const char* compose_mode_name(ComposeMode m) {
    return m == ComposeMode::weighted ? "weighted" : "averaged";
}
inline ComposeMode compose_mode_from(const std::string& s) {
    if (s == "weighted") return ComposeMode::weighted;
    if (s == "averaged") return ComposeMode::averaged;
    throw InvalidArgument("unknown composition mode '" + s + "'");
}

template <typename T>
struct SampleResult {
    Tensor<T> image;                // [C,H,W], clamped to [-1,1]
    std::vector<Tensor<T>> masks;   // per input view (caller order), mean over t and channels
    std::vector<double> masses;     // scalar mass per view
};

// One reverse diffusion pass: y_T ~ N(0,I); for t = T..1 run every stream,
// normalize the weight logits across views, compose the noise prediction and
// apply the reverse update (z forced to 0 at t = 1). Streams are processed in
// content-canonical order so the result is permutation invariant; the noise
// streams are named substreams of the seed, so the drawn noise sequence does
// not depend on the view count.
template <typename T>
SampleResult<T> sample(const std::vector<Tensor<float>>& views, double delta_psi,
                       const UNet<T>& unet, ParamStore<T>& store, const NoiseSchedule<T>& schedule,
                       std::uint64_t seed, ComposeMode mode = ComposeMode::weighted,
                       bool collect_masks = false) {
    require(!views.empty(), "sample: need at least one conditioning view");
    const DenoiserConfig& cfg = unet.config();
    const int c = cfg.image_channels, res = cfg.resolution;
    for (const auto& v : views)
        require(v.ndim() == 3 && v.dim(0) == c && v.dim(1) == res && v.dim(2) == res,
                "sample: view resolution mismatch with model");

    const std::vector<int> order = canonical_view_order(views);
    const int n = static_cast<int>(views.size());
    const std::int64_t plane = static_cast<std::int64_t>(c) * res * res;

    Rng rng_init = Rng::substream(seed, "sample.init");
    Rng rng_step = Rng::substream(seed, "sample.step");
    Tensor<T> y = Tensor<T>::randn({c, res, res}, rng_init);

    std::vector<Tensor<T>> mask_acc;
    if (collect_masks)
        mask_acc.assign(static_cast<size_t>(n), Tensor<T>::zeros({res, res}));

    const double psi = wrap_angle(delta_psi);
    for (int t = schedule.steps; t >= 1; --t) {
        Tensor<T> z = Tensor<T>::zeros({c, res, res});
        if (t > 1) z = Tensor<T>::randn({c, res, res}, rng_step);

        Graph<T> g(false);
        Tensor<T> x({n, 2 * c, res, res});
        for (int i = 0; i < n; ++i) {
            const Tensor<float>& src = views[static_cast<size_t>(order[i])];
            T* row = x.data() + static_cast<std::int64_t>(i) * 2 * plane;
            for (std::int64_t k = 0; k < plane; ++k) row[k] = static_cast<T>(src[k]);
            std::copy_n(y.data(), plane, row + plane);
        }
        typename Graph<T>::Val xv = g.input(std::move(x));
        std::vector<std::pair<double, int>> psi_t(static_cast<size_t>(n), {psi, t});
        typename Graph<T>::Val emb = unet.embed(g, store, psi_t);
        auto [eps_v, logits_v] = unet.forward(g, store, xv, emb);

        StreamBundle<T> bundle = StreamBundle<T>::make(g.value(eps_v), g.value(logits_v));
        Tensor<T> eps_comp;
        if (mode == ComposeMode::weighted) {
            Tensor<T> weights = normalize_weights(bundle.logits, n);
            if (collect_masks) {
                WeightMasks<T> wm = weight_masks(weights, n);
                for (int i = 0; i < n; ++i)
                    for (std::int64_t k = 0; k < wm.masks[static_cast<size_t>(i)].numel(); ++k)
                        mask_acc[static_cast<size_t>(i)][k] += wm.masks[static_cast<size_t>(i)][k];
            }
            eps_comp = compose_noise(bundle, weights);
        } else {
            eps_comp = compose_average(bundle);
            if (collect_masks) {
                for (int i = 0; i < n; ++i)
                    for (std::int64_t k = 0; k < mask_acc[static_cast<size_t>(i)].numel(); ++k)
                        mask_acc[static_cast<size_t>(i)][k] += T(1) / static_cast<T>(n);
            }
        }
        y = reverse_step(y, eps_comp, z, t, schedule);
    }

    for (std::int64_t k = 0; k < y.numel(); ++k)
        y[k] = std::clamp(y[k], T(-1), T(1));

    SampleResult<T> out;
    out.image = std::move(y);
    if (collect_masks) {
        out.masks.assign(static_cast<size_t>(n), Tensor<T>());
        out.masses.assign(static_cast<size_t>(n), 0.0);
        for (int i = 0; i < n; ++i) {
            Tensor<T>& m = mask_acc[static_cast<size_t>(i)];
            double mass = 0;
            for (std::int64_t k = 0; k < m.numel(); ++k) {
                m[k] /= static_cast<T>(schedule.steps);
                mass += static_cast<double>(m[k]);
            }
            // map canonical stream position back to the caller's view index
            out.masks[static_cast<size_t>(order[i])] = std::move(m);
            out.masses[static_cast<size_t>(order[i])] = mass / (res * res);
        }
    }
    return out;
}

template <typename T>
SampleResult<T> sample_with_masks(const std::vector<Tensor<float>>& views, double delta_psi,
                                  const UNet<T>& unet, ParamStore<T>& store,
                                  const NoiseSchedule<T>& schedule, std::uint64_t seed,
                                  ComposeMode mode = ComposeMode::weighted) {
    return sample(views, delta_psi, unet, store, schedule, seed, mode, true);
}

// Autoregressive ring sweep: iteration k = 1..steps generates at
// start_angle + k * angle_step and appends the result to the conditioning
// set, so the set grows by exactly one view per step.
template <typename T>
std::vector<Tensor<float>> autoregressive_sweep(const std::vector<Tensor<float>>& initial_views,
                                                double start_angle, double angle_step, int steps,
                                                const UNet<T>& unet, ParamStore<T>& store,
                                                const NoiseSchedule<T>& schedule,
                                                std::uint64_t seed,
                                                ComposeMode mode = ComposeMode::weighted) {
    require(steps >= 1, "sweep: steps >= 1");
    require(!initial_views.empty(), "sweep: need at least one view");
    std::vector<Tensor<float>> views = initial_views;
    std::vector<Tensor<float>> generated;
    for (int k = 1; k <= steps; ++k) {
        const double psi = start_angle + k * angle_step;
        const std::uint64_t step_seed =
            detail::splitmix64(seed ^ detail::fnv1a64("sweep.k" + std::to_string(k)));
        SampleResult<T> r = sample(views, psi, unet, store, schedule, step_seed, mode);
        Tensor<float> img = r.image.to_f32();
        views.push_back(img);
        generated.push_back(std::move(img));
    }
    return generated;
}

}  // namespace mvdiff
