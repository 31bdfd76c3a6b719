#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mvdiff/kernels.hpp"
#include "mvdiff/params.hpp"
#include "mvdiff/tensor.hpp"

namespace mvdiff {

// Eager tape: every op computes its value immediately and records a backward
// closure. Node creation order is a topological order, so backward() is a
// single reverse sweep. Ops check their outputs for non-finite values and
// throw; the only tensors allowed to carry -inf are softmax inputs (padding).
template <typename T>
class Graph {
public:
    struct Val {
        int i = -1;
        bool valid() const { return i >= 0; }
    };

    Graph() = default;
    // record_grads = false gives an inference-only graph: parameters bind as
    // plain constants and no backward closures are kept.
    explicit Graph(bool record_grads) : record_grads_(record_grads) {}

    Val input(Tensor<T> v, bool requires_grad = false, bool allow_neg_inf = false) {
        if (!allow_neg_inf) v.check_finite("graph input");
        return make_leaf(std::move(v), requires_grad && record_grads_);
    }

    // Leaf bound to a named parameter; repeated binds return the same node.
    Val param(ParamStore<T>& store, const std::string& name) {
        const std::pair<void*, std::string> key{static_cast<void*>(&store), name};
        auto it = bound_.find(key);
        if (it != bound_.end()) return Val{it->second};
        Val v = make_leaf(store.value(name), record_grads_);
        nodes_[v.i].store = &store;
        nodes_[v.i].pname = name;
        bound_.emplace(key, v.i);
        return v;
    }

    const Tensor<T>& value(Val v) const { return nodes_[v.i].value; }

    Tensor<T> grad(Val v) const {
        const Node& n = nodes_[v.i];
        require(n.requires_grad, "grad(): node does not require grad");
        if (!n.grad_alloc) return Tensor<T>::zeros(n.value.shape());
        return n.grad;
    }

    size_t num_nodes() const { return nodes_.size(); }

    // ---- elementwise ----

    Val add(Val a, Val b) { return binary_elementwise("add", a, b, [](T x, T y) { return x + y; },
        [](T, T, T g) { return std::pair<T, T>(g, g); }); }

    Val sub(Val a, Val b) { return binary_elementwise("sub", a, b, [](T x, T y) { return x - y; },
        [](T, T, T g) { return std::pair<T, T>(g, -g); }); }

    Val mul(Val a, Val b) { return binary_elementwise("mul", a, b, [](T x, T y) { return x * y; },
        [](T x, T y, T g) { return std::pair<T, T>(g * y, g * x); }); }

    Val scale(Val a, T s) {
        const Tensor<T>& x = nodes_[a.i].value;
        Tensor<T> out(x.shape());
        for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] * s;
        return make_op("scale", std::move(out), {a}, [a, s](Graph& g, int self) {
            g.add_grad(a, [&](Tensor<T>& da) {
                const Tensor<T>& go = g.nodes_[self].grad;
                for (std::int64_t i = 0; i < da.numel(); ++i) da[i] += go[i] * s;
            });
        });
    }

    Val silu(Val a) {
        const Tensor<T>& x = nodes_[a.i].value;
        Tensor<T> out(x.shape());
        kernels::silu_forward(x.data(), out.data(), x.numel());
        return make_op("silu", std::move(out), {a}, [a](Graph& g, int self) {
            g.add_grad(a, [&](Tensor<T>& da) {
                const Tensor<T>& x2 = g.nodes_[a.i].value;
                const Tensor<T>& go = g.nodes_[self].grad;
                kernels::silu_backward(x2.data(), go.data(), da.data(), da.numel());
            });
        });
    }

    Val sigmoid(Val a) {
        const Tensor<T>& x = nodes_[a.i].value;
        Tensor<T> out(x.shape());
        kernels::sigmoid_forward(x.data(), out.data(), x.numel());
        return make_op("sigmoid", std::move(out), {a}, [a](Graph& g, int self) {
            g.add_grad(a, [&](Tensor<T>& da) {
                const Tensor<T>& y = g.nodes_[self].value;
                const Tensor<T>& go = g.nodes_[self].grad;
                for (std::int64_t i = 0; i < da.numel(); ++i)
                    da[i] += go[i] * y[i] * (T(1) - y[i]);
            });
        });
    }

    // ---- broadcast helpers ----

    // x[N,C,H,W] + b[C]
    Val add_bias_channels(Val xa, Val ba) {
        const Tensor<T>& x = nodes_[xa.i].value;
        const Tensor<T>& b = nodes_[ba.i].value;
        require(x.ndim() == 4 && b.ndim() == 1 && b.dim(0) == x.dim(1),
                "add_bias_channels: bad shapes");
        Tensor<T> out(x.shape());
        const std::int64_t hw = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
        const int N = x.dim(0), C = x.dim(1);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * hw;
                for (std::int64_t k = 0; k < hw; ++k) out[base + k] = x[base + k] + b[c];
            }
        return make_op("add_bias_channels", std::move(out), {xa, ba},
                       [xa, ba, N, C, hw](Graph& g, int self) {
            const Tensor<T>& go = g.nodes_[self].grad;
            g.add_grad(xa, [&](Tensor<T>& dx) {
                for (std::int64_t i = 0; i < dx.numel(); ++i) dx[i] += go[i];
            });
            g.add_grad(ba, [&](Tensor<T>& db) {
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * hw;
                        T s = T(0);
                        for (std::int64_t k = 0; k < hw; ++k) s += go[base + k];
                        db[c] += s;
                    }
            });
        });
    }

    // y[n,c,h,w] = x[n,c,h,w] * (1 + s[n,c]) + b[n,c]   (FiLM core)
    Val scale_shift(Val xa, Val sa, Val ba) {
        const Tensor<T>& x = nodes_[xa.i].value;
        const Tensor<T>& s = nodes_[sa.i].value;
        const Tensor<T>& b = nodes_[ba.i].value;
        require(x.ndim() == 4 && s.ndim() == 2 && b.ndim() == 2, "scale_shift: bad ranks");
        const int N = x.dim(0), C = x.dim(1);
        require(s.dim(0) == N && s.dim(1) == C && b.dim(0) == N && b.dim(1) == C,
                "scale_shift: channel mismatch");
        const std::int64_t hw = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
        Tensor<T> out(x.shape());
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * hw;
                const T sc = T(1) + s[static_cast<std::int64_t>(n) * C + c];
                const T sh = b[static_cast<std::int64_t>(n) * C + c];
                for (std::int64_t k = 0; k < hw; ++k) out[base + k] = x[base + k] * sc + sh;
            }
        return make_op("scale_shift", std::move(out), {xa, sa, ba},
                       [xa, sa, ba, N, C, hw](Graph& g, int self) {
            const Tensor<T>& go = g.nodes_[self].grad;
            const Tensor<T>& x2 = g.nodes_[xa.i].value;
            const Tensor<T>& s2 = g.nodes_[sa.i].value;
            g.add_grad(xa, [&](Tensor<T>& dx) {
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * hw;
                        const T sc = T(1) + s2[static_cast<std::int64_t>(n) * C + c];
                        for (std::int64_t k = 0; k < hw; ++k) dx[base + k] += go[base + k] * sc;
                    }
            });
            g.add_grad(sa, [&](Tensor<T>& ds) {
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * hw;
                        T acc = T(0);
                        for (std::int64_t k = 0; k < hw; ++k) acc += go[base + k] * x2[base + k];
                        ds[static_cast<std::int64_t>(n) * C + c] += acc;
                    }
            });
            g.add_grad(ba, [&](Tensor<T>& db) {
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * hw;
                        T acc = T(0);
                        for (std::int64_t k = 0; k < hw; ++k) acc += go[base + k];
                        db[static_cast<std::int64_t>(n) * C + c] += acc;
                    }
            });
        });
    }

    // ---- linear algebra ----

    // y[M,N] = x[M,K] * w[N,K]^T + b[N]
    Val linear(Val xa, Val wa, Val ba) {
        const Tensor<T>& x = nodes_[xa.i].value;
        const Tensor<T>& w = nodes_[wa.i].value;
        const Tensor<T>& b = nodes_[ba.i].value;
        require(x.ndim() == 2 && w.ndim() == 2 && b.ndim() == 1, "linear: bad ranks");
        const std::int64_t M = x.dim(0), K = x.dim(1), N = w.dim(0);
        require(w.dim(1) == K && b.dim(0) == N, "linear: shape mismatch");
        Tensor<T> out({static_cast<int>(M), static_cast<int>(N)});
        kernels::matmul_nt(x.data(), w.data(), out.data(), M, K, N);
        for (std::int64_t m = 0; m < M; ++m)
            for (std::int64_t n = 0; n < N; ++n) out[m * N + n] += b[n];
        return make_op("linear", std::move(out), {xa, wa, ba},
                       [xa, wa, ba, M, K, N](Graph& g, int self) {
            const Tensor<T>& go = g.nodes_[self].grad;
            const Tensor<T>& x2 = g.nodes_[xa.i].value;
            const Tensor<T>& w2 = g.nodes_[wa.i].value;
            g.add_grad(xa, [&](Tensor<T>& dx) {
                std::vector<T> tmp(static_cast<size_t>(M * K));
                kernels::matmul_nn(go.data(), w2.data(), tmp.data(), M, N, K);
                for (std::int64_t i = 0; i < dx.numel(); ++i) dx[i] += tmp[i];
            });
            g.add_grad(wa, [&](Tensor<T>& dw) {
                kernels::matmul_tn_acc(go.data(), x2.data(), dw.data(), M, N, K);
            });
            g.add_grad(ba, [&](Tensor<T>& db) {
                for (std::int64_t m = 0; m < M; ++m)
                    for (std::int64_t n = 0; n < N; ++n) db[n] += go[m * N + n];
            });
        });
    }

    // y[M,N] = a[M,K] * b[K,N]
    Val matmul(Val aa, Val ba) {
        const Tensor<T>& a = nodes_[aa.i].value;
        const Tensor<T>& b = nodes_[ba.i].value;
        require(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0), "matmul: shape mismatch");
        const std::int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
        Tensor<T> out({static_cast<int>(M), static_cast<int>(N)});
        kernels::matmul_nn(a.data(), b.data(), out.data(), M, K, N);
        return make_op("matmul", std::move(out), {aa, ba}, [aa, ba, M, K, N](Graph& g, int self) {
            const Tensor<T>& go = g.nodes_[self].grad;
            const Tensor<T>& a2 = g.nodes_[aa.i].value;
            const Tensor<T>& b2 = g.nodes_[ba.i].value;
            g.add_grad(aa, [&](Tensor<T>& da) {
                std::vector<T> tmp(static_cast<size_t>(M * K));
                kernels::matmul_nt(go.data(), b2.data(), tmp.data(), M, N, K);
                for (std::int64_t i = 0; i < da.numel(); ++i) da[i] += tmp[i];
            });
            g.add_grad(ba, [&](Tensor<T>& db) {
                kernels::matmul_tn_acc(a2.data(), go.data(), db.data(), M, K, N);
            });
        });
    }

    Val conv2d(Val xa, Val wa, Val ba, int stride, int pad) {
        const Tensor<T>& x = nodes_[xa.i].value;
        const Tensor<T>& w = nodes_[wa.i].value;
        const Tensor<T>& b = nodes_[ba.i].value;
        kernels::ConvGeom geom(x.shape(), w.shape(), stride, pad);
        require(b.ndim() == 1 && b.dim(0) == geom.cout, "conv2d: bias shape");
        Tensor<T> out({geom.batch, geom.cout, geom.ho, geom.wo});
        kernels::conv2d_forward(x.data(), w.data(), b.data(), geom, out.data(),
                                static_cast<std::vector<T>*>(nullptr));
        return make_op("conv2d", std::move(out), {xa, wa, ba}, [xa, wa, ba, geom](Graph& g,
                                                                                  int self) {
            const Tensor<T>& go = g.nodes_[self].grad;
            const Tensor<T>& x2 = g.nodes_[xa.i].value;
            const Tensor<T>& w2 = g.nodes_[wa.i].value;
            const bool need_dx = g.nodes_[xa.i].requires_grad;
            const bool need_dw = g.nodes_[wa.i].requires_grad;
            const bool need_db = g.nodes_[ba.i].requires_grad;
            T* dx = need_dx ? g.grad_buf(xa).data() : nullptr;
            T* dw = need_dw ? g.grad_buf(wa).data() : nullptr;
            T* db = need_db ? g.grad_buf(ba).data() : nullptr;
            kernels::conv2d_backward(x2.data(), w2.data(), go.data(), geom, dx, dw, db);
        });
    }

    // ---- shape ops ----

    Val concat_channels(Val aa, Val ba) {
        const Tensor<T>& a = nodes_[aa.i].value;
        const Tensor<T>& b = nodes_[ba.i].value;
        require(a.ndim() == 4 && b.ndim() == 4 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) &&
                    a.dim(3) == b.dim(3),
                "concat_channels: shape mismatch");
        const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
        const std::int64_t hw = static_cast<std::int64_t>(a.dim(2)) * a.dim(3);
        Tensor<T> out({N, Ca + Cb, a.dim(2), a.dim(3)});
        for (int n = 0; n < N; ++n) {
            std::copy_n(a.data() + static_cast<std::int64_t>(n) * Ca * hw, Ca * hw,
                        out.data() + static_cast<std::int64_t>(n) * (Ca + Cb) * hw);
            std::copy_n(b.data() + static_cast<std::int64_t>(n) * Cb * hw, Cb * hw,
                        out.data() + static_cast<std::int64_t>(n) * (Ca + Cb) * hw + Ca * hw);
        }
        return make_op("concat_channels", std::move(out), {aa, ba},
                       [aa, ba, N, Ca, Cb, hw](Graph& g, int self) {
            const Tensor<T>& go = g.nodes_[self].grad;
            g.add_grad(aa, [&](Tensor<T>& da) {
                for (int n = 0; n < N; ++n) {
                    const T* src = go.data() + static_cast<std::int64_t>(n) * (Ca + Cb) * hw;
                    T* dst = da.data() + static_cast<std::int64_t>(n) * Ca * hw;
                    for (std::int64_t i = 0; i < Ca * hw; ++i) dst[i] += src[i];
                }
            });
            g.add_grad(ba, [&](Tensor<T>& db) {
                for (int n = 0; n < N; ++n) {
                    const T* src =
                        go.data() + static_cast<std::int64_t>(n) * (Ca + Cb) * hw + Ca * hw;
                    T* dst = db.data() + static_cast<std::int64_t>(n) * Cb * hw;
                    for (std::int64_t i = 0; i < Cb * hw; ++i) dst[i] += src[i];
                }
            });
        });
    }

    Val slice_channels(Val xa, int c0, int c1) {
        const Tensor<T>& x = nodes_[xa.i].value;
        require(x.ndim() == 4 && 0 <= c0 && c0 < c1 && c1 <= x.dim(1), "slice_channels: range");
        const int N = x.dim(0), C = x.dim(1), Cs = c1 - c0;
        const std::int64_t hw = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
        Tensor<T> out({N, Cs, x.dim(2), x.dim(3)});
        for (int n = 0; n < N; ++n)
            std::copy_n(x.data() + (static_cast<std::int64_t>(n) * C + c0) * hw, Cs * hw,
                        out.data() + static_cast<std::int64_t>(n) * Cs * hw);
        return make_op("slice_channels", std::move(out), {xa},
                       [xa, c0, N, C, Cs, hw](Graph& g, int self) {
            const Tensor<T>& go = g.nodes_[self].grad;
            g.add_grad(xa, [&](Tensor<T>& dx) {
                for (int n = 0; n < N; ++n) {
                    const T* src = go.data() + static_cast<std::int64_t>(n) * Cs * hw;
                    T* dst = dx.data() + (static_cast<std::int64_t>(n) * C + c0) * hw;
                    for (std::int64_t i = 0; i < Cs * hw; ++i) dst[i] += src[i];
                }
            });
        });
    }

    // Rows [r0, r1) along axis 0 of any tensor.
    Val slice_rows(Val xa, int r0, int r1) {
        const Tensor<T>& x = nodes_[xa.i].value;
        require(x.ndim() >= 1 && 0 <= r0 && r0 < r1 && r1 <= x.dim(0), "slice_rows: range");
        const std::int64_t row = x.numel() / x.dim(0);
        Shape s = x.shape();
        s[0] = r1 - r0;
        Tensor<T> out(s);
        std::copy_n(x.data() + r0 * row, (r1 - r0) * row, out.data());
        return make_op("slice_rows", std::move(out), {xa}, [xa, r0, r1, row](Graph& g, int self) {
            const Tensor<T>& go = g.nodes_[self].grad;
            g.add_grad(xa, [&](Tensor<T>& dx) {
                T* dst = dx.data() + r0 * row;
                for (std::int64_t i = 0; i < (r1 - r0) * row; ++i) dst[i] += go[i];
            });
        });
    }

    // ---- normalization / activation over structured axes ----

    Val group_norm(Val xa, Val ga, Val ba, int groups, T eps = static_cast<T>(1e-5)) {
        const Tensor<T>& x = nodes_[xa.i].value;
        const Tensor<T>& gamma = nodes_[ga.i].value;
        const Tensor<T>& beta = nodes_[ba.i].value;
        require(x.ndim() == 4, "group_norm: expect 4-d");
        const int N = x.dim(0), C = x.dim(1);
        const int hw = x.dim(2) * x.dim(3);
        require(gamma.ndim() == 1 && gamma.dim(0) == C && beta.ndim() == 1 && beta.dim(0) == C,
                "group_norm: affine shape");
        require(groups >= 1 && C % groups == 0, "group_norm: groups must divide channels");
        Tensor<T> out(x.shape());
        std::vector<T> aux(static_cast<size_t>(N) * groups * 2);
        kernels::group_norm_forward(x.data(), gamma.data(), beta.data(), N, C, hw, groups, eps,
                                    out.data(), aux.data(),
                                    aux.data() + static_cast<size_t>(N) * groups);
        Val v = make_op("group_norm", std::move(out), {xa, ga, ba},
                        [xa, ga, ba, N, C, hw, groups](Graph& g, int self) {
            const Tensor<T>& go = g.nodes_[self].grad;
            const Tensor<T>& x2 = g.nodes_[xa.i].value;
            const Tensor<T>& gamma2 = g.nodes_[ga.i].value;
            const std::vector<T>& aux = g.nodes_[self].aux;
            const T* mean = aux.data();
            const T* rstd = aux.data() + static_cast<size_t>(N) * groups;
            T* dx = g.nodes_[xa.i].requires_grad ? g.grad_buf(xa).data() : nullptr;
            T* dgamma = g.nodes_[ga.i].requires_grad ? g.grad_buf(ga).data() : nullptr;
            T* dbeta = g.nodes_[ba.i].requires_grad ? g.grad_buf(ba).data() : nullptr;
            kernels::group_norm_backward(x2.data(), gamma2.data(), go.data(), N, C, hw, groups,
                                         mean, rstd, dx, dgamma, dbeta);
        });
        nodes_[v.i].aux = std::move(aux);
        return v;
    }

    // Softmax over axis 0; -inf entries (padding) become exactly zero weights.
    Val softmax_axis0(Val za) {
        const Tensor<T>& z = nodes_[za.i].value;
        require(z.ndim() >= 1 && z.dim(0) >= 1, "softmax_axis0: empty");
        const int n = z.dim(0);
        const std::int64_t inner = z.numel() / n;
        Tensor<T> out(z.shape());
        kernels::softmax_axis0(z.data(), n, inner, out.data());
        return make_op("softmax_axis0", std::move(out), {za}, [za, n, inner](Graph& g, int self) {
            const Tensor<T>& w = g.nodes_[self].value;
            const Tensor<T>& go = g.nodes_[self].grad;
            g.add_grad(za, [&](Tensor<T>& dz) {
                kernels::softmax_axis0_backward(w.data(), go.data(), n, inner, dz.data());
            });
        });
    }

    Val upsample2x(Val xa) {
        const Tensor<T>& x = nodes_[xa.i].value;
        require(x.ndim() == 4, "upsample2x: expect 4-d");
        const int nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
        Tensor<T> out({x.dim(0), x.dim(1), 2 * h, 2 * w});
        kernels::upsample2x_nearest(x.data(), nc, h, w, out.data());
        return make_op("upsample2x", std::move(out), {xa}, [xa, nc, h, w](Graph& g, int self) {
            const Tensor<T>& go = g.nodes_[self].grad;
            g.add_grad(xa, [&](Tensor<T>& dx) {
                kernels::upsample2x_nearest_backward(go.data(), nc, h, w, dx.data());
            });
        });
    }

    // ---- reductions ----

    Val sum_axis0(Val xa) {
        const Tensor<T>& x = nodes_[xa.i].value;
        require(x.ndim() >= 2, "sum_axis0: rank");
        const int n = x.dim(0);
        const std::int64_t inner = x.numel() / n;
        Shape s(x.shape().begin() + 1, x.shape().end());
        Tensor<T> out(s);
        for (int i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < inner; ++j) out[j] += x[i * inner + j];
        return make_op("sum_axis0", std::move(out), {xa}, [xa, n, inner](Graph& g, int self) {
            const Tensor<T>& go = g.nodes_[self].grad;
            g.add_grad(xa, [&](Tensor<T>& dx) {
                for (int i = 0; i < n; ++i)
                    for (std::int64_t j = 0; j < inner; ++j) dx[i * inner + j] += go[j];
            });
        });
    }

    Val sum_all(Val xa) {
        const Tensor<T>& x = nodes_[xa.i].value;
        T s = T(0);
        for (std::int64_t i = 0; i < x.numel(); ++i) s += x[i];
        return make_op("sum_all", Tensor<T>::scalar(s), {xa}, [xa](Graph& g, int self) {
            const T go = g.nodes_[self].grad[0];
            g.add_grad(xa, [&](Tensor<T>& dx) {
                for (std::int64_t i = 0; i < dx.numel(); ++i) dx[i] += go;
            });
        });
    }

    Val mean_all(Val xa) {
        const Tensor<T>& x = nodes_[xa.i].value;
        require(x.numel() > 0, "mean_all: empty");
        T s = T(0);
        for (std::int64_t i = 0; i < x.numel(); ++i) s += x[i];
        const T inv = T(1) / static_cast<T>(x.numel());
        return make_op("mean_all", Tensor<T>::scalar(s * inv), {xa}, [xa, inv](Graph& g, int self) {
            const T go = g.nodes_[self].grad[0] * inv;
            g.add_grad(xa, [&](Tensor<T>& dx) {
                for (std::int64_t i = 0; i < dx.numel(); ++i) dx[i] += go;
            });
        });
    }

    // ---- backward ----

    void backward(Val loss) {
        require(loss.valid() && loss.i < static_cast<int>(nodes_.size()), "backward: bad node");
        require(nodes_[loss.i].value.numel() == 1, "backward: loss must be scalar");
        if (!nodes_[loss.i].requires_grad) return;  // loss independent of every parameter
        grad_buf(loss)[0] = T(1);
        for (int i = loss.i; i >= 0; --i) {
            Node& n = nodes_[i];
            if (!n.grad_alloc || !n.back) continue;
            n.back(*this, i);
        }
        for (const Node& n : nodes_) {
            if (n.store && n.grad_alloc) n.store->accumulate_grad(n.pname, n.grad);
        }
    }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
        bool grad_alloc = false;
        std::function<void(Graph&, int)> back;
        ParamStore<T>* store = nullptr;
        std::string pname;
        std::vector<T> aux;
    };

    Val make_leaf(Tensor<T> v, bool requires_grad) {
        Node n;
        n.value = std::move(v);
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return Val{static_cast<int>(nodes_.size()) - 1};
    }

    Val make_op(const char* name, Tensor<T> out, std::initializer_list<Val> parents,
                std::function<void(Graph&, int)> back) {
        out.check_finite(name);
        Node n;
        n.value = std::move(out);
        for (Val p : parents) n.requires_grad = n.requires_grad || nodes_[p.i].requires_grad;
        if (n.requires_grad) n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Val{static_cast<int>(nodes_.size()) - 1};
    }

    template <typename Fwd, typename Bwd>
    Val binary_elementwise(const char* name, Val a, Val b, Fwd fwd, Bwd bwd) {
        const Tensor<T>& x = nodes_[a.i].value;
        const Tensor<T>& y = nodes_[b.i].value;
        require(x.same_shape(y), std::string(name) + ": shape mismatch " + shape_str(x.shape()) +
                                     " vs " + shape_str(y.shape()));
        Tensor<T> out(x.shape());
        run_sized(x.numel(), [&](std::int64_t i0, std::int64_t i1) {
            for (std::int64_t i = i0; i < i1; ++i) out[i] = fwd(x[i], y[i]);
        });
        return make_op(name, std::move(out), {a, b}, [a, b, bwd](Graph& g, int self) {
            const Tensor<T>& go = g.nodes_[self].grad;
            const Tensor<T>& x2 = g.nodes_[a.i].value;
            const Tensor<T>& y2 = g.nodes_[b.i].value;
            g.add_grad(a, [&](Tensor<T>& da) {
                run_sized(da.numel(), [&](std::int64_t i0, std::int64_t i1) {
                    for (std::int64_t i = i0; i < i1; ++i) da[i] += bwd(x2[i], y2[i], go[i]).first;
                });
            });
            g.add_grad(b, [&](Tensor<T>& db) {
                run_sized(db.numel(), [&](std::int64_t i0, std::int64_t i1) {
                    for (std::int64_t i = i0; i < i1; ++i) db[i] += bwd(x2[i], y2[i], go[i]).second;
                });
            });
        });
    }

    template <typename Fn>
    static void run_sized(std::int64_t n, Fn fn) {
        kernels::ew_parallel(n, fn);
    }

    Tensor<T>& grad_buf(Val v) {
        Node& n = nodes_[v.i];
        if (!n.grad_alloc) {
            n.grad = Tensor<T>::zeros(n.value.shape());
            n.grad_alloc = true;
        }
        return n.grad;
    }

    template <typename Fn>
    void add_grad(Val parent, Fn fn) {
        if (!nodes_[parent.i].requires_grad) return;
        fn(grad_buf(parent));
    }

    std::vector<Node> nodes_;
    std::map<std::pair<void*, std::string>, int> bound_;
    bool record_grads_ = true;
};

// Central-difference gradient of a scalar function, one coordinate at a time.
template <typename T>
Tensor<T> finite_difference_gradient(const std::function<T(const Tensor<T>&)>& f,
                                     const Tensor<T>& theta, T eps) {
    require(eps > T(0), "finite_difference_gradient: eps must be positive");
    Tensor<T> g(theta.shape());
    Tensor<T> probe = theta;
    for (std::int64_t k = 0; k < theta.numel(); ++k) {
        const T orig = probe[k];
        probe[k] = orig + eps;
        const T fp = f(probe);
        probe[k] = orig - eps;
        const T fm = f(probe);
        probe[k] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NumericError("finite_difference_gradient: non-finite function value");
        g[k] = (fp - fm) / (T(2) * eps);
    }
    return g;
}

// Runs a differentiable program over a ParamStore: zeroes grads, builds the
// graph, backprops from the scalar loss, and leaves every parameter's
// gradient populated (zero where the loss does not depend on it).
template <typename T>
T evaluate_with_gradients(ParamStore<T>& store,
                          const std::function<typename Graph<T>::Val(Graph<T>&)>& build) {
    store.zero_grad();
    Graph<T> g;
    auto loss = build(g);
    require(loss.valid(), "evaluate_with_gradients: program returned no node");
    require(g.value(loss).numel() == 1, "evaluate_with_gradients: loss must be scalar");
    if (g.value(loss).numel() == 1 && !std::isfinite(g.value(loss)[0]))
        throw NumericError("evaluate_with_gradients: non-finite loss");
    g.backward(loss);
    store.mark_grads_populated();
    return g.value(loss)[0];
}

}  // namespace mvdiff
