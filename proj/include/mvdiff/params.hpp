#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mvdiff/kernels.hpp"
#include "mvdiff/tensor.hpp"

namespace mvdiff {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Named learnable tensors plus per-parameter gradient buffer and Adam state.
// std::map keeps iteration order (and hence update order) deterministic.
template <typename T>
class ParamStore {
public:
    struct Entry {
        Tensor<T> value;
        Tensor<T> grad;
        Tensor<T> m;  // Adam first moment
        Tensor<T> v;  // Adam second moment
        std::int64_t step = 0;
        bool grad_set = false;
    };

    void add(const std::string& name, Tensor<T> init) {
        require(!entries_.contains(name), "param '" + name + "' already exists");
        init.check_finite(("param " + name).c_str());
        Entry e;
        e.grad = Tensor<T>::zeros(init.shape());
        e.m = Tensor<T>::zeros(init.shape());
        e.v = Tensor<T>::zeros(init.shape());
        e.value = std::move(init);
        entries_.emplace(name, std::move(e));
    }

    bool has(const std::string& name) const { return entries_.contains(name); }
    size_t size() const { return entries_.size(); }

    std::int64_t num_params() const {
        std::int64_t n = 0;
        for (const auto& [k, e] : entries_) n += e.value.numel();
        return n;
    }

    Entry& entry(const std::string& name) {
        auto it = entries_.find(name);
        require(it != entries_.end(), "unknown param '" + name + "'");
        return it->second;
    }
    const Entry& entry(const std::string& name) const {
        auto it = entries_.find(name);
        require(it != entries_.end(), "unknown param '" + name + "'");
        return it->second;
    }

    Tensor<T>& value(const std::string& name) { return entry(name).value; }
    const Tensor<T>& value(const std::string& name) const { return entry(name).value; }
    const Tensor<T>& grad(const std::string& name) const { return entry(name).grad; }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& [k, e] : entries_) out.push_back(k);
        return out;
    }

    void zero_grad() {
        for (auto& [k, e] : entries_) {
            std::fill(e.grad.vec().begin(), e.grad.vec().end(), T(0));
            e.grad_set = false;
        }
    }

    void accumulate_grad(const std::string& name, const Tensor<T>& g) {
        Entry& e = entry(name);
        require(g.same_shape(e.value), "grad shape mismatch for '" + name + "'");
        for (std::int64_t i = 0; i < g.numel(); ++i) e.grad[i] += g[i];
        e.grad_set = true;
    }

    void mark_grads_populated() {
        for (auto& [k, e] : entries_) e.grad_set = true;
    }

    // Bias-corrected Adam update; clears gradients and advances step counts.
    void adam_step(const AdamConfig& cfg) {
        for (auto& [name, e] : entries_) {
            if (!e.grad_set) throw InvalidArgument("adam_step: missing gradient for '" + name + "'");
        }
        for (auto& [name, e] : entries_) {
            e.step += 1;
            const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
            const T bc1 = static_cast<T>(1.0 - std::pow(cfg.beta1, static_cast<double>(e.step)));
            const T bc2 = static_cast<T>(1.0 - std::pow(cfg.beta2, static_cast<double>(e.step)));
            const T lr = static_cast<T>(cfg.lr), eps = static_cast<T>(cfg.eps);
            const auto body = [&](std::int64_t i0, std::int64_t i1) {
                for (std::int64_t i = i0; i < i1; ++i) {
                    const T g = e.grad[i];
                    e.m[i] = b1 * e.m[i] + (T(1) - b1) * g;
                    e.v[i] = b2 * e.v[i] + (T(1) - b2) * g * g;
                    const T mhat = e.m[i] / bc1;
                    const T vhat = e.v[i] / bc2;
                    e.value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
                }
            };
            kernels::ew_parallel(e.value.numel(), body);
            e.value.check_finite(("adam_step: param " + name).c_str());
            std::fill(e.grad.vec().begin(), e.grad.vec().end(), T(0));
            e.grad_set = false;
        }
    }

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

private:
    std::map<std::string, Entry> entries_;
};

}  // namespace mvdiff
