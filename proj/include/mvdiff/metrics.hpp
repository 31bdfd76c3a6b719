#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mvdiff/dataset.hpp"
#include "mvdiff/tensor.hpp"

namespace mvdiff {

// PSNR over images in [-1, 1] (peak = 2 by default). Identical images return
// the documented 99 dB cap; the cap also bounds near-zero-MSE results.
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double peak = 2.0) {
    require(a.same_shape(b), "psnr: shape mismatch");
    const double mse = mean_sq_diff(a, b);
    constexpr double cap = 99.0;
    if (mse == 0.0) return cap;
    return std::min(cap, 10.0 * std::log10(peak * peak / mse));
}

struct SsimConfig {
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01, k2 = 0.03;
    double peak = 2.0;  // images in [-1,1]
};

// Mean SSIM over valid (fully inside) windows, Gaussian-weighted local
// statistics, averaged across channels.
template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, const SsimConfig& cfg = {}) {
    require(a.same_shape(b), "ssim: shape mismatch");
    require(a.ndim() == 3, "ssim: expect [C,H,W]");
    const int c = a.dim(0), h = a.dim(1), w = a.dim(2);
    require(h >= cfg.window && w >= cfg.window, "ssim: image smaller than window");

    const int win = cfg.window;
    std::vector<double> kernel(static_cast<size_t>(win) * win);
    {
        double sum = 0;
        const double half = (win - 1) / 2.0;
        for (int y = 0; y < win; ++y)
            for (int x = 0; x < win; ++x) {
                const double dy = y - half, dx = x - half;
                const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * cfg.sigma * cfg.sigma));
                kernel[static_cast<size_t>(y) * win + x] = v;
                sum += v;
            }
        for (auto& v : kernel) v /= sum;
    }

    const double c1 = (cfg.k1 * cfg.peak) * (cfg.k1 * cfg.peak);
    const double c2 = (cfg.k2 * cfg.peak) * (cfg.k2 * cfg.peak);
    double total = 0;
    std::int64_t count = 0;
    for (int cc = 0; cc < c; ++cc) {
        for (int oy = 0; oy + win <= h; ++oy) {
            for (int ox = 0; ox + win <= w; ++ox) {
                double ma = 0, mb = 0;
                for (int y = 0; y < win; ++y)
                    for (int x = 0; x < win; ++x) {
                        const double k = kernel[static_cast<size_t>(y) * win + x];
                        ma += k * static_cast<double>(a.at3(cc, oy + y, ox + x));
                        mb += k * static_cast<double>(b.at3(cc, oy + y, ox + x));
                    }
                double va = 0, vb = 0, cov = 0;
                for (int y = 0; y < win; ++y)
                    for (int x = 0; x < win; ++x) {
                        const double k = kernel[static_cast<size_t>(y) * win + x];
                        const double da = static_cast<double>(a.at3(cc, oy + y, ox + x)) - ma;
                        const double db = static_cast<double>(b.at3(cc, oy + y, ox + x)) - mb;
                        va += k * da * da;
                        vb += k * db * db;
                        cov += k * da * db;
                    }
                const double num = (2 * ma * mb + c1) * (2 * cov + c2);
                const double den = (ma * ma + mb * mb + c1) * (va + vb + c2);
                total += num / den;
                ++count;
            }
        }
    }
    return total / static_cast<double>(count);
}

struct ViewPolicy {
    enum class Kind { fixed, uniform, explicit_list };
    Kind kind = Kind::fixed;
    int n = 1;                       // fixed count, or V_max for uniform
    std::vector<int> azimuth_indices;  // explicit list

    static ViewPolicy parse(const std::string& s) {
        ViewPolicy p;
        if (s.rfind("fixed:", 0) == 0) {
            p.kind = Kind::fixed;
            p.n = std::stoi(s.substr(6));
        } else if (s.rfind("uniform:", 0) == 0) {
            p.kind = Kind::uniform;
            p.n = std::stoi(s.substr(8));
        } else if (s.rfind("list:", 0) == 0) {
            p.kind = Kind::explicit_list;
            std::string rest = s.substr(5);
            size_t pos = 0;
            while (pos < rest.size()) {
                size_t comma = rest.find(',', pos);
                if (comma == std::string::npos) comma = rest.size();
                p.azimuth_indices.push_back(std::stoi(rest.substr(pos, comma - pos)));
                pos = comma + 1;
            }
            require(!p.azimuth_indices.empty(), "view policy list is empty");
        } else {
            throw UsageError("view policy must be fixed:<n>, uniform:<vmax> or list:<k,k,...>");
        }
        return p;
    }

    std::string str() const {
        if (kind == Kind::fixed) return "fixed:" + std::to_string(n);
        if (kind == Kind::uniform) return "uniform:" + std::to_string(n);
        std::string s = "list:";
        for (size_t i = 0; i < azimuth_indices.size(); ++i)
            s += (i ? "," : "") + std::to_string(azimuth_indices[i]);
        return s;
    }
};

// Conditioning views + target drawn for evaluation under a view policy.
inline TrainingTuple sample_eval_tuple(Rng& rng, const ObjectViews& obj, const ViewPolicy& policy,
                                       PoseMode pose_mode) {
    const int k_total = obj.azimuths;
    std::vector<int> chosen;
    switch (policy.kind) {
        case ViewPolicy::Kind::explicit_list:
            chosen = policy.azimuth_indices;
            for (int k : chosen) require(k >= 0 && k < k_total, "eval: azimuth index out of range");
            break;
        case ViewPolicy::Kind::fixed:
        case ViewPolicy::Kind::uniform: {
            int n = policy.n;
            if (policy.kind == ViewPolicy::Kind::uniform) n = rng.uniform_int(1, policy.n);
            require(n >= 1 && n <= k_total, "eval: view count out of range");
            std::vector<int> perm(static_cast<size_t>(k_total));
            std::iota(perm.begin(), perm.end(), 0);
            rng.shuffle(perm.begin(), perm.end());
            chosen.assign(perm.begin(), perm.begin() + n);
            break;
        }
    }
    const int target_k = static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(k_total)));
    TrainingTuple t;
    for (int k : chosen) t.views.push_back(obj.views[static_cast<size_t>(k)]);
    const double target_az = 2.0 * kPi * target_k / k_total;
    if (pose_mode == PoseMode::canonical)
        t.delta_psi = wrap_angle(target_az);
    else
        t.delta_psi = wrap_angle(target_az - 2.0 * kPi * chosen[0] / k_total);
    t.target = obj.views[static_cast<size_t>(target_k)];
    return t;
}

struct EvalReport {
    std::vector<double> psnr_per_repeat, ssim_per_repeat;
    double mean_psnr = 0, mean_ssim = 0;
    int objects = 0, repeats = 0;
    std::vector<double> per_object_psnr;  // pooled over repeats
};

// The generator maps (views, delta_psi, per-sample seed) to an image; tests
// inject oracles here and the CLI injects the diffusion sampler. Per repeat:
// one tuple per object, generate, score.
using GeneratorFn =
    std::function<Tensor<float>(const std::vector<Tensor<float>>&, double, std::uint64_t)>;

inline EvalReport evaluate(const LoadedSplit& split, const ViewPolicy& policy, int repeats,
                           std::uint64_t seed, PoseMode pose_mode, const GeneratorFn& generate,
                           int max_objects = -1) {
    require(!split.objects.empty(), "evaluate: empty split");
    require(repeats >= 1, "evaluate: repeats >= 1");
    const int n_obj = max_objects > 0
                          ? std::min<int>(max_objects, static_cast<int>(split.objects.size()))
                          : static_cast<int>(split.objects.size());
    EvalReport report;
    report.objects = n_obj;
    report.repeats = repeats;
    for (int r = 0; r < repeats; ++r) {
        double psum = 0, ssum = 0;
        for (int i = 0; i < n_obj; ++i) {
            const ObjectViews& obj = split.objects[static_cast<size_t>(i)];
            Rng rng = Rng::substream(seed, "eval.r" + std::to_string(r) + ".obj" +
                                               std::to_string(obj.object_id));
            TrainingTuple tup = sample_eval_tuple(rng, obj, policy, pose_mode);
            const std::uint64_t sample_seed = rng.next_u64();
            Tensor<float> gen = generate(tup.views, tup.delta_psi, sample_seed);
            const double p = psnr(gen, tup.target);
            psum += p;
            ssum += ssim(gen, tup.target);
            report.per_object_psnr.push_back(p);
        }
        report.psnr_per_repeat.push_back(psum / n_obj);
        report.ssim_per_repeat.push_back(ssum / n_obj);
    }
    for (double v : report.psnr_per_repeat) report.mean_psnr += v;
    for (double v : report.ssim_per_repeat) report.mean_ssim += v;
    report.mean_psnr /= repeats;
    report.mean_ssim /= repeats;
    return report;
}

}  // namespace mvdiff
