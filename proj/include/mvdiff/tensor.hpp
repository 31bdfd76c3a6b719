#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "mvdiff/common.hpp"
#include "mvdiff/rng.hpp"
#include "mvdiff/simd.hpp"
#include "mvdiff/threading.hpp"

namespace mvdiff {

namespace detail {

// Fast finiteness scan: |x| <= max_finite fails for inf and NaN.
template <typename T>
bool all_finite_range(const T* x, std::int64_t n) {
    const T bound = std::numeric_limits<T>::max();
    std::int64_t i = 0;
#ifdef MVDIFF_VEC
    using V = typename vec_traits<T>::v;
    constexpr int W = vec_traits<T>::width;
    if (n >= W) {
        auto ok = (V{} == V{});  // all lanes true
        for (; i + W <= n; i += W) {
            const V v = *reinterpret_cast<const V*>(x + i);
            ok &= (v <= bound) & (v >= -bound);
        }
        for (int q = 0; q < W; ++q)
            if (!ok[q]) return false;
    }
#endif
    for (; i < n; ++i)
        if (!(x[i] <= bound && x[i] >= -bound)) return false;
    return true;
}

template <typename T>
bool all_finite_fast(const T* x, std::int64_t n) {
    if (n < (1 << 16)) return all_finite_range(x, n);
    std::atomic<bool> ok{true};
    parallel_for(n, [&](std::int64_t a, std::int64_t b) {
        if (!ok.load(std::memory_order_relaxed)) return;
        if (!all_finite_range(x + a, b - a)) ok.store(false, std::memory_order_relaxed);
    });
    return ok.load();
}

}  // namespace detail

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) {
        require(d >= 0, "negative shape extent");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Dense row-major n-d array; the element type is the dtype (float or double).
template <typename T>
class Tensor {
    static_assert(std::is_floating_point_v<T>);

public:
    Tensor() = default;
    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), T(0)) {}
    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        require(shape_numel(shape_) == static_cast<std::int64_t>(data_.size()),
                "tensor: shape/data size mismatch");
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, T value) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    static Tensor scalar(T value) { return Tensor({1}, {value}); }

    static Tensor randn(Shape shape, Rng& rng) {
        Tensor t(std::move(shape));
        for (auto& v : t.data_) v = static_cast<T>(rng.gaussian());
        return t;
    }

    const Shape& shape() const { return shape_; }
    int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    int ndim() const { return static_cast<int>(shape_.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](std::int64_t i) { return data_[static_cast<size_t>(i)]; }
    T operator[](std::int64_t i) const { return data_[static_cast<size_t>(i)]; }

    T item() const {
        require(numel() == 1, "item() on non-scalar tensor " + shape_str(shape_));
        return data_[0];
    }

    // 4-d accessor (N, C, H, W) — the layout every image-shaped op assumes.
    T& at4(int n, int c, int h, int w) {
        return data_[((static_cast<size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    T at4(int n, int c, int h, int w) const {
        return data_[((static_cast<size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    // 3-d accessor (C, H, W).
    T& at3(int c, int h, int w) {
        return data_[(static_cast<size_t>(c) * shape_[1] + h) * shape_[2] + w];
    }
    T at3(int c, int h, int w) const {
        return data_[(static_cast<size_t>(c) * shape_[1] + h) * shape_[2] + w];
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    bool all_finite() const { return detail::all_finite_fast(data_.data(), numel()); }

    void check_finite(const char* what) const {
        if (!all_finite()) throw NumericError(std::string(what) + ": non-finite value");
    }

    Tensor<double> to_f64() const {
        Tensor<double> out(shape_);
        for (std::int64_t i = 0; i < numel(); ++i) out[i] = static_cast<double>(data_[i]);
        return out;
    }
    Tensor<float> to_f32() const {
        Tensor<float> out(shape_);
        for (std::int64_t i = 0; i < numel(); ++i) out[i] = static_cast<float>(data_[i]);
        return out;
    }

    bool operator==(const Tensor& other) const {
        return shape_ == other.shape_ && data_ == other.data_;
    }

private:
    Shape shape_;
    std::vector<T> data_;
};

template <typename T>
const char* dtype_name() {
    if constexpr (std::is_same_v<T, float>) return "f32";
    else return "f64";
}

// Max |a-b| over all elements; shapes must match.
template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.same_shape(b), "max_abs_diff: shape mismatch");
    double m = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return m;
}

template <typename T>
double mean_sq_diff(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.same_shape(b), "mean_sq_diff: shape mismatch");
    double s = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += d * d;
    }
    return a.numel() ? s / static_cast<double>(a.numel()) : 0.0;
}

}  // namespace mvdiff
