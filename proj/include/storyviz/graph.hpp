#pragma once

#include <Eigen/Core>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "storyviz/nn.hpp"
#include "storyviz/tensor.hpp"

namespace storyviz {

template <typename T>
using EigenMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
inline Eigen::Map<EigenMat<T>> emap(Tensor<T>& t) {
    return Eigen::Map<EigenMat<T>>(t.data.data(), t.rows, t.cols);
}
template <typename T>
inline Eigen::Map<const EigenMat<T>> emap(const Tensor<T>& t) {
    return Eigen::Map<const EigenMat<T>>(t.data.data(), t.rows, t.cols);
}

// Reverse-mode autodiff on a per-sample tape. Values are computed eagerly at
// op construction; backward() replays closures in reverse creation order.
// One Graph instance per training sample; gradients are flushed into the
// ParamStore afterwards, so batch accumulation order is fixed.
template <typename T>
class Graph {
   public:
    using Id = int;

    explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    const Tensor<T>& val(Id id) const { return nodes_[id].value; }
    Tensor<T>& val_mut(Id id) { return nodes_[id].value; }
    const Tensor<T>& grad(Id id) const { return nodes_[id].grad; }
    bool requires_grad(Id id) const { return nodes_[id].requires_grad; }
    size_t num_nodes() const { return nodes_.size(); }

    // ---- leaves ----

    Id input(Tensor<T> v, bool requires_grad = false) {
        return make(std::move(v), requires_grad && grad_enabled_);
    }

    Id param(Parameter<T>& p) {
        Id id = make(Tensor<T>(p.value), grad_enabled_ && p.trainable);
        nodes_[id].pref = &p;
        return id;
    }

    Id scalar(T v) { return input(Tensor<T>::full(1, 1, v)); }

    // ---- elementwise ----

    Id add(Id a, Id b) {
        check_same(a, b, "add");
        Tensor<T> out = nodes_[a].value;
        const auto& bv = nodes_[b].value;
        for (int64_t i = 0; i < out.numel(); ++i) out.data[i] += bv.data[i];
        Id o = make_op(std::move(out), {a, b});
        if (wants_grad(o)) {
            set_backward(o, [this, o, a, b] {
                const auto& g = nodes_[o].grad;
                if (needs(a)) axpy_into(a, g, T(1));
                if (needs(b)) axpy_into(b, g, T(1));
            });
        }
        return o;
    }

    Id sub(Id a, Id b) {
        check_same(a, b, "sub");
        Tensor<T> out = nodes_[a].value;
        const auto& bv = nodes_[b].value;
        for (int64_t i = 0; i < out.numel(); ++i) out.data[i] -= bv.data[i];
        Id o = make_op(std::move(out), {a, b});
        if (wants_grad(o)) {
            set_backward(o, [this, o, a, b] {
                const auto& g = nodes_[o].grad;
                if (needs(a)) axpy_into(a, g, T(1));
                if (needs(b)) axpy_into(b, g, T(-1));
            });
        }
        return o;
    }

    Id mul(Id a, Id b) {
        check_same(a, b, "mul");
        Tensor<T> out = nodes_[a].value;
        const auto& bv = nodes_[b].value;
        for (int64_t i = 0; i < out.numel(); ++i) out.data[i] *= bv.data[i];
        Id o = make_op(std::move(out), {a, b});
        if (wants_grad(o)) {
            set_backward(o, [this, o, a, b] {
                const auto& g = nodes_[o].grad;
                if (needs(a)) {
                    auto& ga = ensure_grad(a);
                    const auto& bv2 = nodes_[b].value;
                    for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * bv2.data[i];
                }
                if (needs(b)) {
                    auto& gb = ensure_grad(b);
                    const auto& av2 = nodes_[a].value;
                    for (int64_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i] * av2.data[i];
                }
            });
        }
        return o;
    }

    Id scale(Id a, T s) {
        Tensor<T> out = nodes_[a].value;
        for (auto& v : out.data) v *= s;
        Id o = make_op(std::move(out), {a});
        if (wants_grad(o)) {
            set_backward(o, [this, o, a, s] {
                if (needs(a)) axpy_into(a, nodes_[o].grad, s);
            });
        }
        return o;
    }

    Id add_const(Id a, T c) {
        Tensor<T> out = nodes_[a].value;
        for (auto& v : out.data) v += c;
        Id o = make_op(std::move(out), {a});
        if (wants_grad(o)) {
            set_backward(o, [this, o, a] {
                if (needs(a)) axpy_into(a, nodes_[o].grad, T(1));
            });
        }
        return o;
    }

    // ---- matrix products (Eigen, single threaded) ----

    Id matmul(Id a, Id b) {
        const auto& av = nodes_[a].value;
        const auto& bv = nodes_[b].value;
        check(av.cols == bv.rows, "matmul: inner dims mismatch");
        Tensor<T> out(av.rows, bv.cols);
        emap(out).noalias() = emap(av) * emap(bv);
        Id o = make_op(std::move(out), {a, b});
        if (wants_grad(o)) {
            set_backward(o, [this, o, a, b] {
                const auto& g = nodes_[o].grad;
                if (needs(a)) {
                    auto& ga = ensure_grad(a);
                    emap(ga).noalias() += emap(g) * emap(nodes_[b].value).transpose();
                }
                if (needs(b)) {
                    auto& gb = ensure_grad(b);
                    emap(gb).noalias() += emap(nodes_[a].value).transpose() * emap(g);
                }
            });
        }
        return o;
    }

    // a (R,K) times b (C,K) transposed -> (R,C). Attention logits, tied heads.
    Id matmul_nt(Id a, Id b) {
        const auto& av = nodes_[a].value;
        const auto& bv = nodes_[b].value;
        check(av.cols == bv.cols, "matmul_nt: inner dims mismatch");
        Tensor<T> out(av.rows, bv.rows);
        emap(out).noalias() = emap(av) * emap(bv).transpose();
        Id o = make_op(std::move(out), {a, b});
        if (wants_grad(o)) {
            set_backward(o, [this, o, a, b] {
                const auto& g = nodes_[o].grad;
                if (needs(a)) {
                    auto& ga = ensure_grad(a);
                    emap(ga).noalias() += emap(g) * emap(nodes_[b].value);
                }
                if (needs(b)) {
                    auto& gb = ensure_grad(b);
                    emap(gb).noalias() += emap(g).transpose() * emap(nodes_[a].value);
                }
            });
        }
        return o;
    }

    // ---- broadcasts ----

    // v is (1,C): added to every row of a.
    Id add_row_broadcast(Id a, Id v) {
        const auto& av = nodes_[a].value;
        const auto& vv = nodes_[v].value;
        check(vv.rows == 1 && vv.cols == av.cols, "add_row_broadcast: bad bias shape");
        Tensor<T> out = av;
        for (int r = 0; r < out.rows; ++r)
            for (int c = 0; c < out.cols; ++c) out.at(r, c) += vv.at(0, c);
        Id o = make_op(std::move(out), {a, v});
        if (wants_grad(o)) {
            set_backward(o, [this, o, a, v] {
                const auto& g = nodes_[o].grad;
                if (needs(a)) axpy_into(a, g, T(1));
                if (needs(v)) {
                    auto& gv = ensure_grad(v);
                    for (int r = 0; r < g.rows; ++r)
                        for (int c = 0; c < g.cols; ++c) gv.at(0, c) += g.at(r, c);
                }
            });
        }
        return o;
    }

    // v is (R,1): added to every column of a. Per-channel bias in (C,HW) maps.
    Id add_col_broadcast(Id a, Id v) {
        const auto& av = nodes_[a].value;
        const auto& vv = nodes_[v].value;
        check(vv.cols == 1 && vv.rows == av.rows, "add_col_broadcast: bad bias shape");
        Tensor<T> out = av;
        for (int r = 0; r < out.rows; ++r)
            for (int c = 0; c < out.cols; ++c) out.at(r, c) += vv.at(r, 0);
        Id o = make_op(std::move(out), {a, v});
        if (wants_grad(o)) {
            set_backward(o, [this, o, a, v] {
                const auto& g = nodes_[o].grad;
                if (needs(a)) axpy_into(a, g, T(1));
                if (needs(v)) {
                    auto& gv = ensure_grad(v);
                    for (int r = 0; r < g.rows; ++r)
                        for (int c = 0; c < g.cols; ++c) gv.at(r, 0) += g.at(r, c);
                }
            });
        }
        return o;
    }

    Id mul_row_broadcast(Id a, Id v) {
        const auto& av = nodes_[a].value;
        const auto& vv = nodes_[v].value;
        check(vv.rows == 1 && vv.cols == av.cols, "mul_row_broadcast: bad scale shape");
        Tensor<T> out = av;
        for (int r = 0; r < out.rows; ++r)
            for (int c = 0; c < out.cols; ++c) out.at(r, c) *= vv.at(0, c);
        Id o = make_op(std::move(out), {a, v});
        if (wants_grad(o)) {
            set_backward(o, [this, o, a, v] {
                const auto& g = nodes_[o].grad;
                if (needs(a)) {
                    auto& ga = ensure_grad(a);
                    const auto& vv2 = nodes_[v].value;
                    for (int r = 0; r < g.rows; ++r)
                        for (int c = 0; c < g.cols; ++c) ga.at(r, c) += g.at(r, c) * vv2.at(0, c);
                }
                if (needs(v)) {
                    auto& gv = ensure_grad(v);
                    const auto& av2 = nodes_[a].value;
                    for (int r = 0; r < g.rows; ++r)
                        for (int c = 0; c < g.cols; ++c) gv.at(0, c) += g.at(r, c) * av2.at(r, c);
                }
            });
        }
        return o;
    }

    Id mul_col_broadcast(Id a, Id v) {
        const auto& av = nodes_[a].value;
        const auto& vv = nodes_[v].value;
        check(vv.cols == 1 && vv.rows == av.rows, "mul_col_broadcast: bad scale shape");
        Tensor<T> out = av;
        for (int r = 0; r < out.rows; ++r)
            for (int c = 0; c < out.cols; ++c) out.at(r, c) *= vv.at(r, 0);
        Id o = make_op(std::move(out), {a, v});
        if (wants_grad(o)) {
            set_backward(o, [this, o, a, v] {
                const auto& g = nodes_[o].grad;
                if (needs(a)) {
                    auto& ga = ensure_grad(a);
                    const auto& vv2 = nodes_[v].value;
                    for (int r = 0; r < g.rows; ++r)
                        for (int c = 0; c < g.cols; ++c) ga.at(r, c) += g.at(r, c) * vv2.at(r, 0);
                }
                if (needs(v)) {
                    auto& gv = ensure_grad(v);
                    const auto& av2 = nodes_[a].value;
                    for (int r = 0; r < g.rows; ++r)
                        for (int c = 0; c < g.cols; ++c) gv.at(r, 0) += g.at(r, c) * av2.at(r, c);
                }
            });
        }
        return o;
    }

    // ---- activations ----

    Id silu(Id a) {
        Tensor<T> out = nodes_[a].value;
        for (auto& v : out.data) {
            const T s = T(1) / (T(1) + std::exp(-v));
            v = v * s;
        }
        Id o = make_op(std::move(out), {a});
        if (wants_grad(o)) {
            set_backward(o, [this, o, a] {
                if (!needs(a)) return;
                const auto& g = nodes_[o].grad;
                const auto& x = nodes_[a].value;
                auto& ga = ensure_grad(a);
                for (int64_t i = 0; i < g.numel(); ++i) {
                    const T s = T(1) / (T(1) + std::exp(-x.data[i]));
                    ga.data[i] += g.data[i] * s * (T(1) + x.data[i] * (T(1) - s));
                }
            });
        }
        return o;
    }

    Id gelu(Id a) {
        constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
        constexpr double kA = 0.044715;
        Tensor<T> out = nodes_[a].value;
        for (auto& v : out.data) {
            const double x = double(v);
            v = T(0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x))));
        }
        Id o = make_op(std::move(out), {a});
        if (wants_grad(o)) {
            set_backward(o, [this, o, a] {
                if (!needs(a)) return;
                const auto& g = nodes_[o].grad;
                const auto& xs = nodes_[a].value;
                auto& ga = ensure_grad(a);
                for (int64_t i = 0; i < g.numel(); ++i) {
                    const double x = double(xs.data[i]);
                    const double u = kC * (x + kA * x * x * x);
                    const double th = std::tanh(u);
                    const double d =
                        0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kC * (1.0 + 3.0 * kA * x * x);
                    ga.data[i] += g.data[i] * T(d);
                }
            });
        }
        return o;
    }

    // ---- normalizations ----

    // x is (C,HW); groups must divide C; stats over each group's channels and
    // all spatial positions. Affine handled separately by the caller.
    Id group_norm(Id a, int groups, T eps = T(1e-5)) {
        const auto& x = nodes_[a].value;
        check(groups > 0 && x.rows % groups == 0, "group_norm: groups must divide channels");
        const int gsz = x.rows / groups;
        Tensor<T> out(x.rows, x.cols);
        std::vector<T> inv_std(groups);
        for (int g = 0; g < groups; ++g) {
            const int r0 = g * gsz;
            double mean = 0.0;
            const int64_t n = int64_t(gsz) * x.cols;
            for (int r = r0; r < r0 + gsz; ++r)
                for (int c = 0; c < x.cols; ++c) mean += double(x.at(r, c));
            mean /= double(n);
            double var = 0.0;
            for (int r = r0; r < r0 + gsz; ++r)
                for (int c = 0; c < x.cols; ++c) {
                    const double d = double(x.at(r, c)) - mean;
                    var += d * d;
                }
            var /= double(n);
            const T is = T(1.0 / std::sqrt(var + double(eps)));
            inv_std[g] = is;
            for (int r = r0; r < r0 + gsz; ++r)
                for (int c = 0; c < x.cols; ++c) out.at(r, c) = (x.at(r, c) - T(mean)) * is;
        }
        Id o = make_op(std::move(out), {a});
        if (wants_grad(o)) {
            set_backward(o, [this, o, a, groups, gsz, inv_std = std::move(inv_std)] {
                if (!needs(a)) return;
                const auto& g = nodes_[o].grad;
                const auto& y = nodes_[o].value;
                auto& ga = ensure_grad(a);
                for (int gi = 0; gi < groups; ++gi) {
                    const int r0 = gi * gsz;
                    const int64_t n = int64_t(gsz) * g.cols;
                    double gsum = 0.0, gysum = 0.0;
                    for (int r = r0; r < r0 + gsz; ++r)
                        for (int c = 0; c < g.cols; ++c) {
                            gsum += double(g.at(r, c));
                            gysum += double(g.at(r, c)) * double(y.at(r, c));
                        }
                    const double gm = gsum / double(n);
                    const double gym = gysum / double(n);
                    for (int r = r0; r < r0 + gsz; ++r)
                        for (int c = 0; c < g.cols; ++c)
                            ga.at(r, c) += inv_std[gi] *
                                           T(double(g.at(r, c)) - gm - double(y.at(r, c)) * gym);
                }
            });
        }
        return o;
    }

    // Per-row normalization over columns. Affine handled by the caller.
    Id layer_norm(Id a, T eps = T(1e-5)) {
        const auto& x = nodes_[a].value;
        Tensor<T> out(x.rows, x.cols);
        std::vector<T> inv_std(x.rows);
        for (int r = 0; r < x.rows; ++r) {
            double mean = 0.0;
            for (int c = 0; c < x.cols; ++c) mean += double(x.at(r, c));
            mean /= double(x.cols);
            double var = 0.0;
            for (int c = 0; c < x.cols; ++c) {
                const double d = double(x.at(r, c)) - mean;
                var += d * d;
            }
            var /= double(x.cols);
            const T is = T(1.0 / std::sqrt(var + double(eps)));
            inv_std[r] = is;
            for (int c = 0; c < x.cols; ++c) out.at(r, c) = (x.at(r, c) - T(mean)) * is;
        }
        Id o = make_op(std::move(out), {a});
        if (wants_grad(o)) {
            set_backward(o, [this, o, a, inv_std = std::move(inv_std)] {
                if (!needs(a)) return;
                const auto& g = nodes_[o].grad;
                const auto& y = nodes_[o].value;
                auto& ga = ensure_grad(a);
                for (int r = 0; r < g.rows; ++r) {
                    double gsum = 0.0, gysum = 0.0;
                    for (int c = 0; c < g.cols; ++c) {
                        gsum += double(g.at(r, c));
                        gysum += double(g.at(r, c)) * double(y.at(r, c));
                    }
                    const double gm = gsum / double(g.cols);
                    const double gym = gysum / double(g.cols);
                    for (int c = 0; c < g.cols; ++c)
                        ga.at(r, c) +=
                            inv_std[r] * T(double(g.at(r, c)) - gm - double(y.at(r, c)) * gym);
                }
            });
        }
        return o;
    }

    // ---- softmax and losses ----

    Id softmax_rows(Id a) {
        const auto& x = nodes_[a].value;
        Tensor<T> out(x.rows, x.cols);
        for (int r = 0; r < x.rows; ++r) {
            T mx = x.at(r, 0);
            for (int c = 1; c < x.cols; ++c) mx = std::max(mx, x.at(r, c));
            double sum = 0.0;
            for (int c = 0; c < x.cols; ++c) {
                const double e = std::exp(double(x.at(r, c) - mx));
                out.at(r, c) = T(e);
                sum += e;
            }
            const T inv = T(1.0 / sum);
            for (int c = 0; c < x.cols; ++c) out.at(r, c) *= inv;
        }
        Id o = make_op(std::move(out), {a});
        if (wants_grad(o)) {
            set_backward(o, [this, o, a] {
                if (!needs(a)) return;
                const auto& g = nodes_[o].grad;
                const auto& y = nodes_[o].value;
                auto& ga = ensure_grad(a);
                for (int r = 0; r < g.rows; ++r) {
                    double dot = 0.0;
                    for (int c = 0; c < g.cols; ++c) dot += double(g.at(r, c)) * double(y.at(r, c));
                    for (int c = 0; c < g.cols; ++c)
                        ga.at(r, c) += y.at(r, c) * T(double(g.at(r, c)) - dot);
                }
            });
        }
        return o;
    }

    // Mean NLL over rows whose target is >= 0; target -1 means ignore.
    Id cross_entropy_rows(Id logits, std::vector<int> targets) {
        const auto& x = nodes_[logits].value;
        check(int(targets.size()) == x.rows, "cross_entropy_rows: target count mismatch");
        int count = 0;
        for (int t : targets)
            if (t >= 0) ++count;
        check(count > 0, "cross_entropy_rows: no selected rows");
        Tensor<T> probs(x.rows, x.cols);
        double loss = 0.0;
        for (int r = 0; r < x.rows; ++r) {
            T mx = x.at(r, 0);
            for (int c = 1; c < x.cols; ++c) mx = std::max(mx, x.at(r, c));
            double sum = 0.0;
            for (int c = 0; c < x.cols; ++c) {
                const double e = std::exp(double(x.at(r, c) - mx));
                probs.at(r, c) = T(e);
                sum += e;
            }
            const T inv = T(1.0 / sum);
            for (int c = 0; c < x.cols; ++c) probs.at(r, c) *= inv;
            if (targets[r] >= 0) {
                check(targets[r] < x.cols, "cross_entropy_rows: target out of range");
                loss += std::log(sum) + double(mx) - double(x.at(r, targets[r]));
            }
        }
        loss /= double(count);
        Id o = make_op(Tensor<T>::full(1, 1, T(loss)), {logits});
        if (wants_grad(o)) {
            set_backward(o, [this, o, logits, targets = std::move(targets), count,
                             probs = std::move(probs)] {
                if (!needs(logits)) return;
                const T g = nodes_[o].grad.at(0, 0);
                auto& gl = ensure_grad(logits);
                const T inv = g / T(count);
                for (int r = 0; r < gl.rows; ++r) {
                    if (targets[r] < 0) continue;
                    for (int c = 0; c < gl.cols; ++c) gl.at(r, c) += inv * probs.at(r, c);
                    gl.at(r, targets[r]) -= inv;
                }
            });
        }
        return o;
    }

    // Mean binary cross-entropy of sigmoid(logits) against plain 0/1-ish
    // targets; stable log1p(exp(-|z|)) form, no separate sigmoid node.
    Id sigmoid_bce(Id logits, Tensor<T> targets) {
        const auto& x = nodes_[logits].value;
        check(targets.rows == x.rows && targets.cols == x.cols, "sigmoid_bce: shape mismatch");
        const size_t n = x.numel();
        double loss = 0.0;
        for (size_t i = 0; i < n; ++i) {
            const double z = double(x.data[i]);
            loss += std::max(z, 0.0) - double(targets.data[i]) * z + std::log1p(std::exp(-std::abs(z)));
        }
        loss /= double(n);
        Id o = make_op(Tensor<T>::full(1, 1, T(loss)), {logits});
        if (wants_grad(o)) {
            set_backward(o, [this, o, logits, targets = std::move(targets), n] {
                if (!needs(logits)) return;
                const T g = nodes_[o].grad.at(0, 0) / T(n);
                auto& gl = ensure_grad(logits);
                const auto& x2 = nodes_[logits].value;
                for (size_t i = 0; i < n; ++i) {
                    const T s = T(1) / (T(1) + std::exp(-x2.data[i]));
                    gl.data[i] += g * (s - targets.data[i]);
                }
            });
        }
        return o;
    }

    // ---- shape ops ----

    Id transpose(Id a) {
        const auto& x = nodes_[a].value;
        Tensor<T> out(x.cols, x.rows);
        for (int r = 0; r < x.rows; ++r)
            for (int c = 0; c < x.cols; ++c) out.at(c, r) = x.at(r, c);
        Id o = make_op(std::move(out), {a});
        if (wants_grad(o)) {
            set_backward(o, [this, o, a] {
                if (!needs(a)) return;
                const auto& g = nodes_[o].grad;
                auto& ga = ensure_grad(a);
                for (int r = 0; r < g.rows; ++r)
                    for (int c = 0; c < g.cols; ++c) ga.at(c, r) += g.at(r, c);
            });
        }
        return o;
    }

    Id reshape(Id a, int r, int c) {
        const auto& x = nodes_[a].value;
        check(int64_t(r) * c == x.numel(), "reshape: numel mismatch");
        Tensor<T> out(r, c);
        out.data = x.data;
        Id o = make_op(std::move(out), {a});
        if (wants_grad(o)) {
            set_backward(o, [this, o, a] {
                if (!needs(a)) return;
                const auto& g = nodes_[o].grad;
                auto& ga = ensure_grad(a);
                for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
            });
        }
        return o;
    }

    Id concat_rows(Id a, Id b) {
        const auto& av = nodes_[a].value;
        const auto& bv = nodes_[b].value;
        check(av.cols == bv.cols, "concat_rows: col mismatch");
        const int ar = av.rows;  // hoisted: make_op may reallocate nodes_
        Tensor<T> out(av.rows + bv.rows, av.cols);
        std::copy(av.data.begin(), av.data.end(), out.data.begin());
        std::copy(bv.data.begin(), bv.data.end(), out.data.begin() + av.numel());
        Id o = make_op(std::move(out), {a, b});
        if (wants_grad(o)) {
            set_backward(o, [this, o, a, b, ar] {
                const auto& g = nodes_[o].grad;
                if (needs(a)) {
                    auto& ga = ensure_grad(a);
                    for (int r = 0; r < ar; ++r)
                        for (int c = 0; c < g.cols; ++c) ga.at(r, c) += g.at(r, c);
                }
                if (needs(b)) {
                    auto& gb = ensure_grad(b);
                    for (int r = ar; r < g.rows; ++r)
                        for (int c = 0; c < g.cols; ++c) gb.at(r - ar, c) += g.at(r, c);
                }
            });
        }
        return o;
    }

    Id concat_cols(Id a, Id b) {
        const auto& av = nodes_[a].value;
        const auto& bv = nodes_[b].value;
        check(av.rows == bv.rows, "concat_cols: row mismatch");
        const int ac = av.cols;  // hoisted: make_op may reallocate nodes_
        Tensor<T> out(av.rows, av.cols + bv.cols);
        for (int r = 0; r < av.rows; ++r) {
            for (int c = 0; c < av.cols; ++c) out.at(r, c) = av.at(r, c);
            for (int c = 0; c < bv.cols; ++c) out.at(r, av.cols + c) = bv.at(r, c);
        }
        Id o = make_op(std::move(out), {a, b});
        if (wants_grad(o)) {
            set_backward(o, [this, o, a, b, ac] {
                const auto& g = nodes_[o].grad;
                if (needs(a)) {
                    auto& ga = ensure_grad(a);
                    for (int r = 0; r < g.rows; ++r)
                        for (int c = 0; c < ac; ++c) ga.at(r, c) += g.at(r, c);
                }
                if (needs(b)) {
                    auto& gb = ensure_grad(b);
                    for (int r = 0; r < g.rows; ++r)
                        for (int c = ac; c < g.cols; ++c) gb.at(r, c - ac) += g.at(r, c);
                }
            });
        }
        return o;
    }

    Id slice_rows(Id a, int r0, int nrows) {
        const auto& x = nodes_[a].value;
        check(r0 >= 0 && r0 + nrows <= x.rows, "slice_rows: out of range");
        Tensor<T> out(nrows, x.cols);
        for (int r = 0; r < nrows; ++r)
            for (int c = 0; c < x.cols; ++c) out.at(r, c) = x.at(r0 + r, c);
        Id o = make_op(std::move(out), {a});
        if (wants_grad(o)) {
            set_backward(o, [this, o, a, r0] {
                if (!needs(a)) return;
                const auto& g = nodes_[o].grad;
                auto& ga = ensure_grad(a);
                for (int r = 0; r < g.rows; ++r)
                    for (int c = 0; c < g.cols; ++c) ga.at(r0 + r, c) += g.at(r, c);
            });
        }
        return o;
    }

    Id slice_cols(Id a, int c0, int ncols) {
        const auto& x = nodes_[a].value;
        check(c0 >= 0 && c0 + ncols <= x.cols, "slice_cols: out of range");
        Tensor<T> out(x.rows, ncols);
        for (int r = 0; r < x.rows; ++r)
            for (int c = 0; c < ncols; ++c) out.at(r, c) = x.at(r, c0 + c);
        Id o = make_op(std::move(out), {a});
        if (wants_grad(o)) {
            set_backward(o, [this, o, a, c0] {
                if (!needs(a)) return;
                const auto& g = nodes_[o].grad;
                auto& ga = ensure_grad(a);
                for (int r = 0; r < g.rows; ++r)
                    for (int c = 0; c < g.cols; ++c) ga.at(r, c0 + c) += g.at(r, c);
            });
        }
        return o;
    }

    // out[i,:] = x[idx[i],:]. Token embedding lookup when x is a table param.
    Id gather_rows(Id a, std::vector<int> idx) {
        const auto& x = nodes_[a].value;
        Tensor<T> out(int(idx.size()), x.cols);
        for (size_t i = 0; i < idx.size(); ++i) {
            check(idx[i] >= 0 && idx[i] < x.rows, "gather_rows: index out of range");
            for (int c = 0; c < x.cols; ++c) out.at(int(i), c) = x.at(idx[i], c);
        }
        Id o = make_op(std::move(out), {a});
        if (wants_grad(o)) {
            set_backward(o, [this, o, a, idx = std::move(idx)] {
                if (!needs(a)) return;
                const auto& g = nodes_[o].grad;
                auto& ga = ensure_grad(a);
                for (size_t i = 0; i < idx.size(); ++i)
                    for (int c = 0; c < g.cols; ++c) ga.at(idx[i], c) += g.at(int(i), c);
            });
        }
        return o;
    }

    // Copy of x with row positions[i] replaced by rows[i,:]. Positions distinct.
    Id row_replace(Id a, std::vector<int> positions, Id rows) {
        const auto& x = nodes_[a].value;
        const auto& rv = nodes_[rows].value;
        check(int(positions.size()) == rv.rows, "row_replace: count mismatch");
        check(rv.cols == x.cols, "row_replace: col mismatch");
        Tensor<T> out = x;
        std::vector<char> hit(size_t(x.rows), 0);
        for (size_t i = 0; i < positions.size(); ++i) {
            const int p = positions[i];
            check(p >= 0 && p < x.rows, "row_replace: position out of range");
            check(!hit[size_t(p)], "row_replace: duplicate position");
            hit[size_t(p)] = 1;
            for (int c = 0; c < x.cols; ++c) out.at(p, c) = rv.at(int(i), c);
        }
        Id o = make_op(std::move(out), {a, rows});
        if (wants_grad(o)) {
            set_backward(o, [this, o, a, rows, positions = std::move(positions)] {
                const auto& g = nodes_[o].grad;
                if (needs(a)) {
                    auto& ga = ensure_grad(a);
                    std::vector<char> rep(size_t(g.rows), 0);
                    for (int p : positions) rep[size_t(p)] = 1;
                    for (int r = 0; r < g.rows; ++r) {
                        if (rep[size_t(r)]) continue;
                        for (int c = 0; c < g.cols; ++c) ga.at(r, c) += g.at(r, c);
                    }
                }
                if (needs(rows)) {
                    auto& gr = ensure_grad(rows);
                    for (size_t i = 0; i < positions.size(); ++i)
                        for (int c = 0; c < g.cols; ++c) gr.at(int(i), c) += g.at(positions[i], c);
                }
            });
        }
        return o;
    }

    // ---- reductions ----

    Id sum_all(Id a) {
        const auto& x = nodes_[a].value;
        double s = 0.0;
        for (const T& v : x.data) s += double(v);
        Id o = make_op(Tensor<T>::full(1, 1, T(s)), {a});
        if (wants_grad(o)) {
            set_backward(o, [this, o, a] {
                if (!needs(a)) return;
                const T g = nodes_[o].grad.at(0, 0);
                auto& ga = ensure_grad(a);
                for (auto& v : ga.data) v += g;
            });
        }
        return o;
    }

    Id mean_all(Id a) {
        const auto& x = nodes_[a].value;
        double s = 0.0;
        for (const T& v : x.data) s += double(v);
        const int64_t n = x.numel();
        Id o = make_op(Tensor<T>::full(1, 1, T(s / double(n))), {a});
        if (wants_grad(o)) {
            set_backward(o, [this, o, a, n] {
                if (!needs(a)) return;
                const T g = nodes_[o].grad.at(0, 0) / T(n);
                auto& ga = ensure_grad(a);
                for (auto& v : ga.data) v += g;
            });
        }
        return o;
    }

    // Row means: (R,C) -> (R,1). Global average pooling when rows are channels.
    Id mean_cols(Id a) {
        const auto& x = nodes_[a].value;
        Tensor<T> out(x.rows, 1);
        for (int r = 0; r < x.rows; ++r) {
            double s = 0.0;
            for (int c = 0; c < x.cols; ++c) s += double(x.at(r, c));
            out.at(r, 0) = T(s / double(x.cols));
        }
        Id o = make_op(std::move(out), {a});
        if (wants_grad(o)) {
            set_backward(o, [this, o, a] {
                if (!needs(a)) return;
                const auto& g = nodes_[o].grad;
                auto& ga = ensure_grad(a);
                const T inv = T(1) / T(ga.cols);
                for (int r = 0; r < ga.rows; ++r)
                    for (int c = 0; c < ga.cols; ++c) ga.at(r, c) += g.at(r, 0) * inv;
            });
        }
        return o;
    }

    // ---- spatial ops on (C,HW) feature maps ----

    // x: (in_c, H*W), w: (out_c, in_c*kh*kw). Output (out_c, OH*OW).
    Id conv2d(Id x, Id w, int H, int W, int kh, int kw, int stride, int pad) {
        const auto& xv = nodes_[x].value;
        const auto& wv = nodes_[w].value;
        check(xv.cols == H * W, "conv2d: spatial size mismatch");
        check(wv.cols == xv.rows * kh * kw, "conv2d: kernel shape mismatch");
        const int OH = (H + 2 * pad - kh) / stride + 1;
        const int OW = (W + 2 * pad - kw) / stride + 1;
        check(OH > 0 && OW > 0, "conv2d: empty output");
        Tensor<T> col = im2col(xv, H, W, kh, kw, stride, pad, OH, OW);
        Tensor<T> out(wv.rows, OH * OW);
        emap(out).noalias() = emap(wv) * emap(col);
        Id o = make_op(std::move(out), {x, w});
        if (wants_grad(o)) {
            set_backward(o, [this, o, x, w, H, W, kh, kw, stride, pad, OH, OW,
                             col = std::move(col)] {
                const auto& g = nodes_[o].grad;
                if (needs(w)) {
                    auto& gw = ensure_grad(w);
                    emap(gw).noalias() += emap(g) * emap(col).transpose();
                }
                if (needs(x)) {
                    Tensor<T> dcol(col.rows, col.cols);
                    emap(dcol).noalias() = emap(nodes_[w].value).transpose() * emap(g);
                    auto& gx = ensure_grad(x);
                    col2im_accum(dcol, gx, H, W, kh, kw, stride, pad, OH, OW);
                }
            });
        }
        return o;
    }

    Id upsample_nearest2x(Id a, int H, int W) {
        const auto& x = nodes_[a].value;
        check(x.cols == H * W, "upsample_nearest2x: spatial size mismatch");
        Tensor<T> out(x.rows, 4 * H * W);
        const int OW = 2 * W;
        for (int ch = 0; ch < x.rows; ++ch)
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx) {
                    const T v = x.at(ch, y * W + xx);
                    out.at(ch, (2 * y) * OW + 2 * xx) = v;
                    out.at(ch, (2 * y) * OW + 2 * xx + 1) = v;
                    out.at(ch, (2 * y + 1) * OW + 2 * xx) = v;
                    out.at(ch, (2 * y + 1) * OW + 2 * xx + 1) = v;
                }
        Id o = make_op(std::move(out), {a});
        if (wants_grad(o)) {
            set_backward(o, [this, o, a, H, W] {
                if (!needs(a)) return;
                const auto& g = nodes_[o].grad;
                auto& ga = ensure_grad(a);
                const int OW = 2 * W;
                for (int ch = 0; ch < ga.rows; ++ch)
                    for (int y = 0; y < H; ++y)
                        for (int xx = 0; xx < W; ++xx)
                            ga.at(ch, y * W + xx) += g.at(ch, (2 * y) * OW + 2 * xx) +
                                                    g.at(ch, (2 * y) * OW + 2 * xx + 1) +
                                                    g.at(ch, (2 * y + 1) * OW + 2 * xx) +
                                                    g.at(ch, (2 * y + 1) * OW + 2 * xx + 1);
            });
        }
        return o;
    }

    // ---- autodiff driver ----

    void backward(Id loss) {
        check(nodes_[loss].value.rows == 1 && nodes_[loss].value.cols == 1,
              "backward: loss must be scalar");
        check(grad_enabled_, "backward: graph built with grads disabled");
        ensure_grad(loss).at(0, 0) = T(1);
        for (int i = loss; i >= 0; --i) {
            auto& n = nodes_[i];
            if (!n.requires_grad || n.grad.data.empty() || !n.backward) continue;
            n.backward();
        }
    }

    // Adds accumulated gradients of param nodes into their Parameter.grad.
    void flush_param_grads() {
        for (auto& n : nodes_) {
            if (!n.pref || n.grad.data.empty()) continue;
            auto& pg = n.pref->grad;
            for (int64_t i = 0; i < n.grad.numel(); ++i) pg.data[i] += n.grad.data[i];
        }
    }

   private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
        std::function<void()> backward;
        Parameter<T>* pref = nullptr;
    };

    static void check(bool ok, const char* msg) {
        if (!ok) throw std::runtime_error(std::string("graph: ") + msg);
    }

    void check_same(Id a, Id b, const char* op) {
        if (!nodes_[a].value.same_shape(nodes_[b].value))
            throw std::runtime_error(std::string("graph: ") + op + ": shape mismatch");
    }

    Id make(Tensor<T>&& v, bool rg) {
        nodes_.push_back(Node{std::move(v), Tensor<T>(), rg, nullptr, nullptr});
        return Id(nodes_.size() - 1);
    }

    Id make_op(Tensor<T>&& v, std::initializer_list<Id> inputs) {
        bool rg = false;
        if (grad_enabled_)
            for (Id i : inputs) rg = rg || nodes_[i].requires_grad;
        return make(std::move(v), rg);
    }

    bool wants_grad(Id o) const { return nodes_[o].requires_grad; }
    bool needs(Id i) const { return nodes_[i].requires_grad; }

    void set_backward(Id o, std::function<void()> fn) { nodes_[o].backward = std::move(fn); }

    Tensor<T>& ensure_grad(Id id) {
        auto& n = nodes_[id];
        if (n.grad.data.empty()) n.grad = Tensor<T>(n.value.rows, n.value.cols);
        return n.grad;
    }

    void axpy_into(Id id, const Tensor<T>& g, T alpha) {
        auto& ga = ensure_grad(id);
        for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += alpha * g.data[i];
    }

    static Tensor<T> im2col(const Tensor<T>& x, int H, int W, int kh, int kw, int stride, int pad,
                            int OH, int OW) {
        const int in_c = x.rows;
        Tensor<T> col(in_c * kh * kw, OH * OW);
        for (int ci = 0; ci < in_c; ++ci)
            for (int ki = 0; ki < kh; ++ki)
                for (int kj = 0; kj < kw; ++kj) {
                    const int row = (ci * kh + ki) * kw + kj;
                    for (int oy = 0; oy < OH; ++oy) {
                        const int iy = oy * stride - pad + ki;
                        if (iy < 0 || iy >= H) continue;  // row stays zero
                        for (int ox = 0; ox < OW; ++ox) {
                            const int ix = ox * stride - pad + kj;
                            if (ix < 0 || ix >= W) continue;
                            col.at(row, oy * OW + ox) = x.at(ci, iy * W + ix);
                        }
                    }
                }
        return col;
    }

    static void col2im_accum(const Tensor<T>& dcol, Tensor<T>& dx, int H, int W, int kh, int kw,
                             int stride, int pad, int OH, int OW) {
        const int in_c = dx.rows;
        for (int ci = 0; ci < in_c; ++ci)
            for (int ki = 0; ki < kh; ++ki)
                for (int kj = 0; kj < kw; ++kj) {
                    const int row = (ci * kh + ki) * kw + kj;
                    for (int oy = 0; oy < OH; ++oy) {
                        const int iy = oy * stride - pad + ki;
                        if (iy < 0 || iy >= H) continue;
                        for (int ox = 0; ox < OW; ++ox) {
                            const int ix = ox * stride - pad + kj;
                            if (ix < 0 || ix >= W) continue;
                            dx.at(ci, iy * W + ix) += dcol.at(row, oy * OW + ox);
                        }
                    }
                }
    }

    bool grad_enabled_;
    std::vector<Node> nodes_;
};

using GraphF = Graph<float>;
using GraphD = Graph<double>;

// ---- composite helpers ----

template <typename T>
typename Graph<T>::Id mse(Graph<T>& g, typename Graph<T>::Id a, typename Graph<T>::Id b) {
    auto d = g.sub(a, b);
    return g.mean_all(g.mul(d, d));
}

// a + alpha * b, elementwise.
template <typename T>
typename Graph<T>::Id axpy(Graph<T>& g, typename Graph<T>::Id a, T alpha,
                           typename Graph<T>::Id b) {
    return g.add(a, g.scale(b, alpha));
}

// Linear layer y = x W + b with W stored (in,out) and b (1,out); b < 0 skips bias.
template <typename T>
typename Graph<T>::Id linear(Graph<T>& g, typename Graph<T>::Id x, typename Graph<T>::Id w,
                             typename Graph<T>::Id b = -1) {
    auto y = g.matmul(x, w);
    if (b >= 0) y = g.add_row_broadcast(y, b);
    return y;
}

}  // namespace storyviz
