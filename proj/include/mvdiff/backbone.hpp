#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mvdiff/autograd.hpp"
#include "mvdiff/params.hpp"
#include "mvdiff/rng.hpp"
#include "mvdiff/tensor.hpp"

namespace mvdiff {

// Sinusoidal encoding: pairs (sin(v w_k), cos(v w_k)), w_k = max_period^(-2k/dim).
template <typename T>
Tensor<T> positional_encoding(double v, int dim, double max_period = 10000.0) {
    require(dim > 0 && dim % 2 == 0, "positional_encoding: dim must be positive and even");
    require(max_period > 0, "positional_encoding: max_period must be positive");
    Tensor<T> out({dim});
    for (int k = 0; k < dim / 2; ++k) {
        const double omega = std::pow(max_period, -2.0 * k / dim);
        out[2 * k] = static_cast<T>(std::sin(v * omega));
        out[2 * k + 1] = static_cast<T>(std::cos(v * omega));
    }
    return out;
}

// Everything the per-view stream sees: its input view, the shared noisy
// target, and the global (delta_psi, t) conditioning.
template <typename T>
struct ConditioningTuple {
    Tensor<T> view;   // [C,H,W], data range [-1, 1]
    Tensor<T> noisy;  // [C,H,W]
    double delta_psi = 0;
    int t = 1;
};

struct DenoiserConfig {
    int image_channels = 1;
    int resolution = 16;
    int base_channels = 32;
    int depth = 3;  // resolution levels; channels double per level
    int blocks_per_level = 2;
    int embed_dim = 128;
    int groupnorm_groups = 8;

    void validate() const {
        require(image_channels >= 1 && resolution >= 1 && base_channels >= 1, "config: sizes");
        require(depth >= 1 && blocks_per_level >= 1, "config: depth/blocks");
        require(embed_dim >= 2 && embed_dim % 2 == 0, "config: embed_dim must be even");
        require(groupnorm_groups >= 1, "config: groups");
        const int down_factor = 1 << (depth - 1);
        require(resolution % down_factor == 0,
                "config: resolution must be divisible by 2^(depth-1)");
    }

    int level_channels(int level) const { return base_channels << level; }

    nlohmann::json to_json() const {
        return {{"image_channels", image_channels}, {"resolution", resolution},
                {"base_channels", base_channels},   {"depth", depth},
                {"blocks_per_level", blocks_per_level}, {"embed_dim", embed_dim},
                {"groupnorm_groups", groupnorm_groups}};
    }
    static DenoiserConfig from_json(const nlohmann::json& j) {
        DenoiserConfig c;
        c.image_channels = j.at("image_channels").get<int>();
        c.resolution = j.at("resolution").get<int>();
        c.base_channels = j.at("base_channels").get<int>();
        c.depth = j.at("depth").get<int>();
        c.blocks_per_level = j.at("blocks_per_level").get<int>();
        c.embed_dim = j.at("embed_dim").get<int>();
        c.groupnorm_groups = j.at("groupnorm_groups").get<int>();
        c.validate();
        return c;
    }
};

namespace detail {

// Largest divisor of channels not exceeding the configured group count.
inline int groups_for(int channels, int configured) {
    for (int g = std::min(channels, configured); g > 1; --g)
        if (channels % g == 0) return g;
    return 1;
}

template <typename T>
Tensor<T> trunc_normal(Shape shape, double sigma, Rng& rng) {
    Tensor<T> t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        double z;
        do {
            z = rng.gaussian();
        } while (std::abs(z) > 2.0);
        t[i] = static_cast<T>(z * sigma);
    }
    return t;
}

}  // namespace detail

// Standalone FiLM: out = (1 + scale_c) * h_c + shift_c per channel, with
// (scale, shift) produced by a linear projection of the embedding.
template <typename T>
Tensor<T> film(const Tensor<T>& features, const Tensor<T>& embedding, const Tensor<T>& scale_w,
               const Tensor<T>& scale_b, const Tensor<T>& shift_w, const Tensor<T>& shift_b) {
    require(features.ndim() == 3, "film: expect [C,H,W]");
    const int c = features.dim(0);
    require(scale_w.ndim() == 2 && scale_w.dim(0) == c && shift_w.dim(0) == c &&
                scale_w.dim(1) == embedding.numel() && shift_w.dim(1) == embedding.numel(),
            "film: channel mismatch");
    Tensor<T> out(features.shape());
    const std::int64_t hw = static_cast<std::int64_t>(features.dim(1)) * features.dim(2);
    for (int ch = 0; ch < c; ++ch) {
        T scale = scale_b[ch], shift = shift_b[ch];
        for (std::int64_t k = 0; k < embedding.numel(); ++k) {
            scale += scale_w[ch * embedding.numel() + k] * embedding[k];
            shift += shift_w[ch * embedding.numel() + k] * embedding[k];
        }
        for (std::int64_t k = 0; k < hw; ++k)
            out[ch * hw + k] = (T(1) + scale) * features[ch * hw + k] + shift;
    }
    out.check_finite("film");
    return out;
}

// The per-view denoiser: a small U-Net over (input view ⊕ noisy target)
// channels, conditioned on (delta_psi, t) through a sinusoidal-encoding MLP
// injected via FiLM in every ResNet block, with a dual head emitting noise
// prediction and weight logits. Streams share parameters and are processed
// as a batch along axis 0.
template <typename T>
class UNet {
public:
    using Val = typename Graph<T>::Val;

    explicit UNet(DenoiserConfig cfg) : cfg_(cfg) { cfg_.validate(); }

    const DenoiserConfig& config() const { return cfg_; }

    void init_params(ParamStore<T>& store, Rng& rng) const {
        add_linear(store, rng, "embed.hidden", cfg_.embed_dim, cfg_.embed_dim, false);
        add_linear(store, rng, "embed.out", cfg_.embed_dim, cfg_.embed_dim, false);
        const int in_ch = 2 * cfg_.image_channels;
        for (int l = 0; l < cfg_.depth; ++l) {
            const int ch = cfg_.level_channels(l);
            for (int b = 0; b < cfg_.blocks_per_level; ++b) {
                const int bin = (b == 0) ? (l == 0 ? in_ch : cfg_.level_channels(l - 1)) : ch;
                add_res_block(store, rng, down_block_name(l, b), bin, ch);
            }
            if (l + 1 < cfg_.depth)
                add_conv(store, rng, "down" + std::to_string(l) + ".down", cfg_.level_channels(l),
                         cfg_.level_channels(l), 3, false);
        }
        for (int l = cfg_.depth - 2; l >= 0; --l) {
            const int ch = cfg_.level_channels(l);
            for (int b = 0; b < cfg_.blocks_per_level; ++b) {
                const int bin = (b == 0) ? cfg_.level_channels(l + 1) + ch : ch;
                add_res_block(store, rng, up_block_name(l, b), bin, ch);
            }
        }
        store.add("head.norm.gamma", Tensor<T>::full({cfg_.base_channels}, T(1)));
        store.add("head.norm.beta", Tensor<T>::zeros({cfg_.base_channels}));
        add_conv(store, rng, "head.conv", cfg_.base_channels, 2 * cfg_.image_channels, 1, true);
    }

    // Joint embedding of (delta_psi, t): their sinusoidal encodings are
    // concatenated, then a hidden sigmoid layer and an output linear layer.
    Tensor<T> encode_conditioning(double delta_psi, int t) const {
        const int half = cfg_.embed_dim / 2;
        Tensor<T> pe_psi = positional_encoding<T>(wrap_angle(delta_psi), half);
        Tensor<T> pe_t = positional_encoding<T>(static_cast<double>(t), half);
        Tensor<T> joint({cfg_.embed_dim});
        std::copy_n(pe_psi.data(), half, joint.data());
        std::copy_n(pe_t.data(), half, joint.data() + half);
        return joint;
    }

    Val embed(Graph<T>& g, ParamStore<T>& store,
              const std::vector<std::pair<double, int>>& psi_t) const {
        const int s = static_cast<int>(psi_t.size());
        Tensor<T> enc({s, cfg_.embed_dim});
        for (int i = 0; i < s; ++i) {
            Tensor<T> row = encode_conditioning(psi_t[i].first, psi_t[i].second);
            std::copy_n(row.data(), cfg_.embed_dim, enc.data() + static_cast<std::int64_t>(i) * cfg_.embed_dim);
        }
        Val x = g.input(std::move(enc));
        Val h = g.sigmoid(g.linear(x, g.param(store, "embed.hidden.w"),
                                   g.param(store, "embed.hidden.b")));
        return g.linear(h, g.param(store, "embed.out.w"), g.param(store, "embed.out.b"));
    }

    // x: [S, 2C, H, W]; emb: [S, embed_dim]. Returns (eps_hat, logits).
    std::pair<Val, Val> forward(Graph<T>& g, ParamStore<T>& store, Val x, Val emb) const {
        const auto& xs = g.value(x).shape();
        require(xs.size() == 4 && xs[1] == 2 * cfg_.image_channels && xs[2] == cfg_.resolution &&
                    xs[3] == cfg_.resolution,
                "unet: input must be [S, 2C, " + std::to_string(cfg_.resolution) + ", " +
                    std::to_string(cfg_.resolution) + "]");
        Val h = x;
        std::vector<Val> skips;
        for (int l = 0; l < cfg_.depth; ++l) {
            for (int b = 0; b < cfg_.blocks_per_level; ++b)
                h = res_block(g, store, down_block_name(l, b), h, emb);
            if (l + 1 < cfg_.depth) {
                skips.push_back(h);
                const std::string n = "down" + std::to_string(l) + ".down";
                h = g.conv2d(h, g.param(store, n + ".w"), g.param(store, n + ".b"), 2, 1);
            }
        }
        for (int l = cfg_.depth - 2; l >= 0; --l) {
            h = g.upsample2x(h);
            h = g.concat_channels(h, skips[static_cast<size_t>(l)]);
            for (int b = 0; b < cfg_.blocks_per_level; ++b)
                h = res_block(g, store, up_block_name(l, b), h, emb);
        }
        h = g.group_norm(h, g.param(store, "head.norm.gamma"), g.param(store, "head.norm.beta"),
                         detail::groups_for(cfg_.base_channels, cfg_.groupnorm_groups));
        h = g.silu(h);
        h = g.conv2d(h, g.param(store, "head.conv.w"), g.param(store, "head.conv.b"), 1, 0);
        const int c = cfg_.image_channels;
        return {g.slice_channels(h, 0, c), g.slice_channels(h, c, 2 * c)};
    }

    // Single-stream convenience path over one conditioning tuple.
    std::pair<Tensor<T>, Tensor<T>> denoise_stream(const ConditioningTuple<T>& cond,
                                                   ParamStore<T>& store) const {
        require(cond.view.ndim() == 3 && cond.view.dim(0) == cfg_.image_channels &&
                    cond.view.dim(1) == cfg_.resolution && cond.view.dim(2) == cfg_.resolution,
                "denoise_stream: view resolution mismatch with config");
        require(cond.noisy.same_shape(cond.view), "denoise_stream: noisy/view shape mismatch");
        Graph<T> g;
        Tensor<T> x({1, 2 * cfg_.image_channels, cfg_.resolution, cfg_.resolution});
        const std::int64_t plane = cond.view.numel();
        std::copy_n(cond.view.data(), plane, x.data());
        std::copy_n(cond.noisy.data(), plane, x.data() + plane);
        Val xv = g.input(std::move(x));
        Val ev = embed(g, store, {{cond.delta_psi, cond.t}});
        auto [eps, logits] = forward(g, store, xv, ev);
        Shape chw{cfg_.image_channels, cfg_.resolution, cfg_.resolution};
        Tensor<T> eps_out(chw, g.value(eps).vec());
        Tensor<T> logits_out(chw, g.value(logits).vec());
        return {std::move(eps_out), std::move(logits_out)};
    }

private:
    static std::string down_block_name(int l, int b) {
        return "down" + std::to_string(l) + ".block" + std::to_string(b);
    }
    static std::string up_block_name(int l, int b) {
        return "up" + std::to_string(l) + ".block" + std::to_string(b);
    }

    void add_linear(ParamStore<T>& store, Rng& rng, const std::string& name, int out, int in,
                    bool zero) const {
        store.add(name + ".w", zero ? Tensor<T>::zeros({out, in})
                                    : detail::trunc_normal<T>({out, in}, 1.0 / std::sqrt(in), rng));
        store.add(name + ".b", Tensor<T>::zeros({out}));
    }

    void add_conv(ParamStore<T>& store, Rng& rng, const std::string& name, int cin, int cout,
                  int k, bool zero) const {
        const double fan_in = static_cast<double>(cin) * k * k;
        store.add(name + ".w", zero ? Tensor<T>::zeros({cout, cin, k, k})
                                    : detail::trunc_normal<T>({cout, cin, k, k},
                                                              1.0 / std::sqrt(fan_in), rng));
        store.add(name + ".b", Tensor<T>::zeros({cout}));
    }

    void add_res_block(ParamStore<T>& store, Rng& rng, const std::string& name, int cin,
                       int cout) const {
        store.add(name + ".norm1.gamma", Tensor<T>::full({cin}, T(1)));
        store.add(name + ".norm1.beta", Tensor<T>::zeros({cin}));
        add_conv(store, rng, name + ".conv1", cin, cout, 3, false);
        add_linear(store, rng, name + ".film_scale", cout, cfg_.embed_dim, true);
        add_linear(store, rng, name + ".film_shift", cout, cfg_.embed_dim, true);
        store.add(name + ".norm2.gamma", Tensor<T>::full({cout}, T(1)));
        store.add(name + ".norm2.beta", Tensor<T>::zeros({cout}));
        add_conv(store, rng, name + ".conv2", cout, cout, 3, false);
        if (cin != cout) add_conv(store, rng, name + ".shortcut", cin, cout, 1, false);
    }

    // GN -> SiLU -> conv3x3 -> GN -> FiLM -> SiLU -> conv3x3, plus shortcut.
    Val res_block(Graph<T>& g, ParamStore<T>& store, const std::string& name, Val x,
                  Val emb) const {
        const auto& xs = g.value(x).shape();
        const int cin = xs[1];
        const int cout = g.value(g.param(store, name + ".conv1.w")).dim(0);
        Val h = g.group_norm(x, g.param(store, name + ".norm1.gamma"),
                             g.param(store, name + ".norm1.beta"),
                             detail::groups_for(cin, cfg_.groupnorm_groups));
        h = g.silu(h);
        h = g.conv2d(h, g.param(store, name + ".conv1.w"), g.param(store, name + ".conv1.b"), 1, 1);
        Val scale = g.linear(emb, g.param(store, name + ".film_scale.w"),
                             g.param(store, name + ".film_scale.b"));
        Val shift = g.linear(emb, g.param(store, name + ".film_shift.w"),
                             g.param(store, name + ".film_shift.b"));
        h = g.group_norm(h, g.param(store, name + ".norm2.gamma"),
                         g.param(store, name + ".norm2.beta"),
                         detail::groups_for(cout, cfg_.groupnorm_groups));
        h = g.scale_shift(h, scale, shift);
        h = g.silu(h);
        h = g.conv2d(h, g.param(store, name + ".conv2.w"), g.param(store, name + ".conv2.b"), 1, 1);
        Val sc = x;
        if (cin != cout)
            sc = g.conv2d(x, g.param(store, name + ".shortcut.w"),
                          g.param(store, name + ".shortcut.b"), 1, 0);
        return g.add(h, sc);
    }

    DenoiserConfig cfg_;
};

}  // namespace mvdiff
