#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "mvdiff/kernels.hpp"
#include "mvdiff/tensor.hpp"

namespace mvdiff {

// Per-view noise predictions and weight logits for one target. Slots at
// index >= valid_count are padding: their logits must be -inf (zero weight
// after softmax) and their eps_hat content is ignored. stream_ids fix the
// canonical summation order; floating-point addition is not associative, so
// exact permutation invariance needs a content-independent order.
template <typename T>
struct StreamBundle {
    Tensor<T> eps_hat;  // [N, C, H, W]
    Tensor<T> logits;   // [N, C, H, W]
    std::vector<int> stream_ids;
    int valid_count = 0;

    static StreamBundle make(Tensor<T> eps_hat, Tensor<T> logits, int valid_count = -1,
                             std::vector<int> ids = {}) {
        require(eps_hat.ndim() == 4 && eps_hat.same_shape(logits),
                "stream bundle: eps_hat/logits must be matching 4-d tensors");
        StreamBundle b;
        const int n = eps_hat.dim(0);
        b.valid_count = valid_count < 0 ? n : valid_count;
        require(b.valid_count >= 1 && b.valid_count <= n, "stream bundle: bad valid_count");
        if (ids.empty()) {
            ids.resize(static_cast<size_t>(n));
            std::iota(ids.begin(), ids.end(), 0);
        }
        require(static_cast<int>(ids.size()) == n, "stream bundle: ids size mismatch");
        b.stream_ids = std::move(ids);
        b.eps_hat = std::move(eps_hat);
        b.logits = std::move(logits);
        return b;
    }

    int views() const { return eps_hat.dim(0); }
};

namespace detail {

// Valid slot indices in ascending stream-id order.
inline std::vector<int> canonical_order(const std::vector<int>& ids, int valid_count) {
    std::vector<int> order(static_cast<size_t>(valid_count));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return ids[a] < ids[b]; });
    return order;
}

}  // namespace detail

// Content-based canonical order for a set of conditioning views: lexicographic
// over pixel values. Independent of the caller's ordering, which makes the
// downstream summation order (and hence the composed result) permutation
// invariant without any cooperation from the caller. Ties mean identical
// images, whose contributions are interchangeable anyway.
template <typename T>
std::vector<int> canonical_view_order(const std::vector<Tensor<T>>& views) {
    std::vector<int> order(views.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        const auto& va = views[static_cast<size_t>(a)].vec();
        const auto& vb = views[static_cast<size_t>(b)].vec();
        return std::lexicographical_compare(va.begin(), va.end(), vb.begin(), vb.end());
    });
    return order;
}

// Softmax across the view axis, independently at every (c, h, w). Padded
// slots come out exactly zero; the per-pixel exp-sum runs over valid slots in
// ascending stream-id order so permuting slots cannot change any weight.
template <typename T>
Tensor<T> normalize_weights(const Tensor<T>& logits, int valid_count,
                            const std::vector<int>& stream_ids = {}) {
    require(logits.ndim() == 4, "normalize_weights: expect [N,C,H,W]");
    const int n = logits.dim(0);
    require(valid_count >= 1 && valid_count <= n, "normalize_weights: need 1 <= valid <= N");
    std::vector<int> ids = stream_ids;
    if (ids.empty()) {
        ids.resize(static_cast<size_t>(n));
        std::iota(ids.begin(), ids.end(), 0);
    }
    require(static_cast<int>(ids.size()) == n, "normalize_weights: ids size mismatch");
    const std::int64_t inner = logits.numel() / n;
    const T neg_inf = -std::numeric_limits<T>::infinity();
    for (int i = 0; i < valid_count; ++i)
        for (std::int64_t j = 0; j < inner; ++j)
            if (!std::isfinite(logits[i * inner + j]))
                throw NumericError("normalize_weights: non-finite logit in a valid slot");
    for (int i = valid_count; i < n; ++i)
        for (std::int64_t j = 0; j < inner; ++j)
            require(logits[i * inner + j] == neg_inf,
                    "normalize_weights: padded slots must be -inf");

    const std::vector<int> order = detail::canonical_order(ids, valid_count);
    Tensor<T> w(logits.shape());
    parallel_for(inner, [&](std::int64_t j0, std::int64_t j1) {
        for (std::int64_t j = j0; j < j1; ++j) {
            T m = neg_inf;
            for (int i = 0; i < valid_count; ++i) m = std::max(m, logits[i * inner + j]);
            T den = T(0);
            for (int slot : order) den += std::exp(logits[slot * inner + j] - m);
            for (int slot : order) w[slot * inner + j] = std::exp(logits[slot * inner + j] - m) / den;
            for (int i = valid_count; i < n; ++i) w[i * inner + j] = T(0);
        }
    });
    return w;
}

// eps_comp = sum_i w_i ∘ eps_hat_i over valid views, ascending stream id.
template <typename T>
Tensor<T> compose_noise(const StreamBundle<T>& bundle, const Tensor<T>& weights) {
    require(weights.same_shape(bundle.eps_hat), "compose_noise: weight shape mismatch");
    const int n = bundle.views();
    const std::int64_t inner = bundle.eps_hat.numel() / n;
    const std::vector<int> order = detail::canonical_order(bundle.stream_ids, bundle.valid_count);
    for (int slot : order) {
        for (std::int64_t j = 0; j < inner; ++j)
            if (!std::isfinite(bundle.eps_hat[slot * inner + j]))
                throw NumericError("compose_noise: non-finite eps_hat in a valid slot");
    }
    Shape s(bundle.eps_hat.shape().begin() + 1, bundle.eps_hat.shape().end());
    Tensor<T> out(s);
    for (int slot : order) {
        const T* w = weights.data() + slot * inner;
        const T* e = bundle.eps_hat.data() + slot * inner;
        for (std::int64_t j = 0; j < inner; ++j) out[j] += w[j] * e[j];
    }
    out.check_finite("compose_noise");
    return out;
}

// Unweighted mean over valid views (the weighting-scheme ablation).
template <typename T>
Tensor<T> compose_average(const StreamBundle<T>& bundle) {
    const int n = bundle.views();
    const std::int64_t inner = bundle.eps_hat.numel() / n;
    const std::vector<int> order = detail::canonical_order(bundle.stream_ids, bundle.valid_count);
    Shape s(bundle.eps_hat.shape().begin() + 1, bundle.eps_hat.shape().end());
    Tensor<T> out(s);
    for (int slot : order) {
        const T* e = bundle.eps_hat.data() + slot * inner;
        for (std::int64_t j = 0; j < inner; ++j) out[j] += e[j];
    }
    const T inv = T(1) / static_cast<T>(bundle.valid_count);
    for (std::int64_t j = 0; j < inner; ++j) out[j] *= inv;
    out.check_finite("compose_average");
    return out;
}

// Channel-averaged per-view masks from a weight tensor, e.g. for exporting
// the adaptive-weighting visualization. Masks over views sum to one per
// pixel; the scalar mass is the mask's mean.
template <typename T>
struct WeightMasks {
    std::vector<Tensor<T>> masks;  // valid_count entries of [H, W]
    std::vector<double> masses;
};

template <typename T>
WeightMasks<T> weight_masks(const Tensor<T>& weights, int valid_count) {
    require(weights.ndim() == 4, "weight_masks: expect [N,C,H,W]");
    const int c = weights.dim(1), h = weights.dim(2), w = weights.dim(3);
    WeightMasks<T> out;
    for (int i = 0; i < valid_count; ++i) {
        Tensor<T> m({h, w});
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                T acc = T(0);
                for (int cc = 0; cc < c; ++cc) acc += weights.at4(i, cc, y, x);
                m[static_cast<std::int64_t>(y) * w + x] = acc / static_cast<T>(c);
            }
        double mass = 0;
        for (std::int64_t k = 0; k < m.numel(); ++k) mass += static_cast<double>(m[k]);
        out.masses.push_back(mass / static_cast<double>(m.numel()));
        out.masks.push_back(std::move(m));
    }
    return out;
}

}  // namespace mvdiff
