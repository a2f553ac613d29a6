#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <vector>

#include "strokekit/resample.hpp"
#include "strokekit/tensor.hpp"

namespace strokekit::ops {

namespace detail {

template <typename T, typename F>
void record(const Tensor<T>& out, std::vector<std::shared_ptr<TensorImpl<T>>> hold, F&& fn) {
    if (auto* tp = Tape<T>::active()) tp->record(out, std::move(hold), std::forward<F>(fn));
}

template <typename T>
const std::vector<T>& out_grad(Tape<T>& tp, const std::shared_ptr<TensorImpl<T>>& impl) {
    return *tp.find(impl.get()); // present: backward() only visits reached nodes
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    SK_CHECK(a.shape() == b.shape(), ShapeError,
             op << ": shapes " << shape_str(a.shape()) << " and " << shape_str(b.shape())
                << " differ");
}

} // namespace detail

// ---- elementwise binary ----

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "add");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto ad = a.data(), bd = b.data();
    auto od = out.raw();
    for (int64_t i = 0; i < out.numel(); ++i) od[i] = ad[i] + bd[i];
    detail::record(out, {a.impl(), b.impl()},
                   [yi = out.impl(), ai = a.impl(), bi = b.impl()](Tape<T>& tp) {
                       const auto& go = detail::out_grad(tp, yi);
                       auto& ga = tp.buffer(ai);
                       for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
                       auto& gb = tp.buffer(bi);
                       for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
                   });
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto ad = a.data(), bd = b.data();
    auto od = out.raw();
    for (int64_t i = 0; i < out.numel(); ++i) od[i] = ad[i] - bd[i];
    detail::record(out, {a.impl(), b.impl()},
                   [yi = out.impl(), ai = a.impl(), bi = b.impl()](Tape<T>& tp) {
                       const auto& go = detail::out_grad(tp, yi);
                       auto& ga = tp.buffer(ai);
                       for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
                       auto& gb = tp.buffer(bi);
                       for (size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
                   });
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto ad = a.data(), bd = b.data();
    auto od = out.raw();
    for (int64_t i = 0; i < out.numel(); ++i) od[i] = ad[i] * bd[i];
    detail::record(out, {a.impl(), b.impl()},
                   [yi = out.impl(), ai = a.impl(), bi = b.impl()](Tape<T>& tp) {
                       const auto& go = detail::out_grad(tp, yi);
                       auto& ga = tp.buffer(ai);
                       for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bi->data[i];
                       auto& gb = tp.buffer(bi);
                       for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * ai->data[i];
                   });
    return out;
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "div");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto ad = a.data(), bd = b.data();
    auto od = out.raw();
    for (int64_t i = 0; i < out.numel(); ++i) od[i] = ad[i] / bd[i];
    detail::record(out, {a.impl(), b.impl()},
                   [yi = out.impl(), ai = a.impl(), bi = b.impl()](Tape<T>& tp) {
                       const auto& go = detail::out_grad(tp, yi);
                       auto& ga = tp.buffer(ai);
                       for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] / bi->data[i];
                       auto& gb = tp.buffer(bi);
                       for (size_t i = 0; i < go.size(); ++i) {
                           T d = bi->data[i];
                           gb[i] -= go[i] * ai->data[i] / (d * d);
                       }
                   });
    return out;
}

// Elementwise max; at ties the gradient goes to `a`.
template <typename T>
Tensor<T> max_(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "max");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto ad = a.data(), bd = b.data();
    auto od = out.raw();
    for (int64_t i = 0; i < out.numel(); ++i) od[i] = std::max(ad[i], bd[i]);
    detail::record(out, {a.impl(), b.impl()},
                   [yi = out.impl(), ai = a.impl(), bi = b.impl()](Tape<T>& tp) {
                       const auto& go = detail::out_grad(tp, yi);
                       auto& ga = tp.buffer(ai);
                       auto& gb = tp.buffer(bi);
                       for (size_t i = 0; i < go.size(); ++i) {
                           if (ai->data[i] >= bi->data[i]) ga[i] += go[i];
                           else gb[i] += go[i];
                       }
                   });
    return out;
}

// Elementwise min; at ties the gradient goes to `a`.
template <typename T>
Tensor<T> min_(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "min");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto ad = a.data(), bd = b.data();
    auto od = out.raw();
    for (int64_t i = 0; i < out.numel(); ++i) od[i] = std::min(ad[i], bd[i]);
    detail::record(out, {a.impl(), b.impl()},
                   [yi = out.impl(), ai = a.impl(), bi = b.impl()](Tape<T>& tp) {
                       const auto& go = detail::out_grad(tp, yi);
                       auto& ga = tp.buffer(ai);
                       auto& gb = tp.buffer(bi);
                       for (size_t i = 0; i < go.size(); ++i) {
                           if (ai->data[i] <= bi->data[i]) ga[i] += go[i];
                           else gb[i] += go[i];
                       }
                   });
    return out;
}

// ---- scalar-constant and unary ----

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto ad = a.data();
    auto od = out.raw();
    for (int64_t i = 0; i < out.numel(); ++i) od[i] = ad[i] + c;
    detail::record(out, {a.impl()}, [yi = out.impl(), ai = a.impl()](Tape<T>& tp) {
        const auto& go = detail::out_grad(tp, yi);
        auto& ga = tp.buffer(ai);
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    });
    return out;
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto ad = a.data();
    auto od = out.raw();
    for (int64_t i = 0; i < out.numel(); ++i) od[i] = ad[i] * c;
    detail::record(out, {a.impl()}, [yi = out.impl(), ai = a.impl(), c](Tape<T>& tp) {
        const auto& go = detail::out_grad(tp, yi);
        auto& ga = tp.buffer(ai);
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * c;
    });
    return out;
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
    return mul_scalar(a, T(-1));
}

// x^p for x >= 0; at x == 0 the gradient is defined as 0 for p > 1, 1 for p == 1.
template <typename T>
Tensor<T> pow_scalar(const Tensor<T>& a, T p) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto ad = a.data();
    auto od = out.raw();
    for (int64_t i = 0; i < out.numel(); ++i) od[i] = std::pow(ad[i], p);
    detail::record(out, {a.impl()}, [yi = out.impl(), ai = a.impl(), p](Tape<T>& tp) {
        const auto& go = detail::out_grad(tp, yi);
        auto& ga = tp.buffer(ai);
        for (size_t i = 0; i < go.size(); ++i) {
            T x = ai->data[i];
            T d;
            if (x == T(0)) d = (p == T(1)) ? T(1) : T(0);
            else d = p * std::pow(x, p - T(1));
            ga[i] += go[i] * d;
        }
    });
    return out;
}

template <typename T>
Tensor<T> abs_(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto ad = a.data();
    auto od = out.raw();
    for (int64_t i = 0; i < out.numel(); ++i) od[i] = std::abs(ad[i]);
    detail::record(out, {a.impl()}, [yi = out.impl(), ai = a.impl()](Tape<T>& tp) {
        const auto& go = detail::out_grad(tp, yi);
        auto& ga = tp.buffer(ai);
        for (size_t i = 0; i < go.size(); ++i) {
            T x = ai->data[i];
            ga[i] += go[i] * (x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)));
        }
    });
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto ad = a.data();
    auto od = out.raw();
    for (int64_t i = 0; i < out.numel(); ++i) od[i] = ad[i] > T(0) ? ad[i] : T(0);
    detail::record(out, {a.impl()}, [yi = out.impl(), ai = a.impl()](Tape<T>& tp) {
        const auto& go = detail::out_grad(tp, yi);
        auto& ga = tp.buffer(ai);
        for (size_t i = 0; i < go.size(); ++i) {
            if (ai->data[i] > T(0)) ga[i] += go[i];
        }
    });
    return out;
}

// Exact GELU: x * Phi(x) with the Gaussian CDF, not the tanh approximation.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto ad = a.data();
    auto od = out.raw();
    const T inv_sqrt2 = T(1) / std::sqrt(T(2));
    for (int64_t i = 0; i < out.numel(); ++i) {
        T x = ad[i];
        od[i] = x * T(0.5) * std::erfc(-x * inv_sqrt2);
    }
    detail::record(out, {a.impl()}, [yi = out.impl(), ai = a.impl(), inv_sqrt2](Tape<T>& tp) {
        const auto& go = detail::out_grad(tp, yi);
        auto& ga = tp.buffer(ai);
        const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * T(M_PI));
        for (size_t i = 0; i < go.size(); ++i) {
            T x = ai->data[i];
            T cdf = T(0.5) * std::erfc(-x * inv_sqrt2);
            T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
            ga[i] += go[i] * (cdf + x * pdf);
        }
    });
    return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto ad = a.data();
    auto od = out.raw();
    for (int64_t i = 0; i < out.numel(); ++i) {
        T x = ad[i];
        od[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                          : std::exp(x) / (T(1) + std::exp(x));
    }
    detail::record(out, {a.impl()}, [yi = out.impl(), ai = a.impl()](Tape<T>& tp) {
        const auto& go = detail::out_grad(tp, yi);
        auto& ga = tp.buffer(ai);
        for (size_t i = 0; i < go.size(); ++i) {
            T s = yi->data[i];
            ga[i] += go[i] * s * (T(1) - s);
        }
    });
    return out;
}

// log(1 + e^x), evaluated on the stable branch.
template <typename T>
Tensor<T> softplus(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto ad = a.data();
    auto od = out.raw();
    for (int64_t i = 0; i < out.numel(); ++i) {
        T x = ad[i];
        od[i] = x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    }
    detail::record(out, {a.impl()}, [yi = out.impl(), ai = a.impl()](Tape<T>& tp) {
        const auto& go = detail::out_grad(tp, yi);
        auto& ga = tp.buffer(ai);
        for (size_t i = 0; i < go.size(); ++i) {
            T x = ai->data[i];
            T s = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                            : std::exp(x) / (T(1) + std::exp(x));
            ga[i] += go[i] * s;
        }
    });
    return out;
}

// ---- linear algebra ----

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    SK_CHECK(a.rank() == 2 && b.rank() == 2 && a.extent(1) == b.extent(0), ShapeError,
             "matmul: incompatible shapes " << shape_str(a.shape()) << " and "
                                            << shape_str(b.shape()));
    const int m = a.extent(0), k = a.extent(1), n = b.extent(1);
    Tensor<T> out = Tensor<T>::zeros({m, n});
    const T* ad = a.data().data();
    const T* bd = b.data().data();
    T* od = out.raw().data();
    for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
            T av = ad[i * k + p];
            if (av == T(0)) continue;
            const T* brow = bd + p * n;
            T* orow = od + i * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    detail::record(out, {a.impl(), b.impl()},
                   [yi = out.impl(), ai = a.impl(), bi = b.impl(), m, k, n](Tape<T>& tp) {
                       const auto& go = detail::out_grad(tp, yi);
                       auto& ga = tp.buffer(ai);
                       auto& gb = tp.buffer(bi);
                       // ga = go . b^T
                       for (int i = 0; i < m; ++i)
                           for (int p = 0; p < k; ++p) {
                               T acc = T(0);
                               for (int j = 0; j < n; ++j)
                                   acc += go[i * n + j] * bi->data[p * n + j];
                               ga[i * k + p] += acc;
                           }
                       // gb = a^T . go
                       for (int i = 0; i < m; ++i)
                           for (int p = 0; p < k; ++p) {
                               T av = ai->data[i * k + p];
                               if (av == T(0)) continue;
                               for (int j = 0; j < n; ++j)
                                   gb[p * n + j] += av * go[i * n + j];
                           }
                   });
    return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    SK_CHECK(a.rank() == 2, ShapeError, "transpose expects rank 2, got " << shape_str(a.shape()));
    const int m = a.extent(0), n = a.extent(1);
    Tensor<T> out = Tensor<T>::zeros({n, m});
    auto ad = a.data();
    auto od = out.raw();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) od[j * m + i] = ad[i * n + j];
    detail::record(out, {a.impl()}, [yi = out.impl(), ai = a.impl(), m, n](Tape<T>& tp) {
        const auto& go = detail::out_grad(tp, yi);
        auto& ga = tp.buffer(ai);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) ga[i * n + j] += go[j * m + i];
    });
    return out;
}

// x: [R,C] plus a length-C row bias.
template <typename T>
Tensor<T> bias_add_rows(const Tensor<T>& x, const Tensor<T>& b) {
    SK_CHECK(x.rank() == 2 && b.rank() == 1 && b.extent(0) == x.extent(1), ShapeError,
             "bias_add_rows: " << shape_str(x.shape()) << " with bias " << shape_str(b.shape()));
    const int r = x.extent(0), c = x.extent(1);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    auto xd = x.data();
    auto bd = b.data();
    auto od = out.raw();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) od[i * c + j] = xd[i * c + j] + bd[j];
    detail::record(out, {x.impl(), b.impl()},
                   [yi = out.impl(), xi = x.impl(), bi = b.impl(), r, c](Tape<T>& tp) {
                       const auto& go = detail::out_grad(tp, yi);
                       auto& gx = tp.buffer(xi);
                       for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
                       auto& gb = tp.buffer(bi);
                       for (int i = 0; i < r; ++i)
                           for (int j = 0; j < c; ++j) gb[j] += go[i * c + j];
                   });
    return out;
}

// x: [C,H,W] plus a length-C channel bias.
template <typename T>
Tensor<T> bias_add_channels(const Tensor<T>& x, const Tensor<T>& b) {
    SK_CHECK(x.rank() == 3 && b.rank() == 1 && b.extent(0) == x.extent(0), ShapeError,
             "bias_add_channels: " << shape_str(x.shape()) << " with bias "
                                   << shape_str(b.shape()));
    const int c = x.extent(0);
    const int64_t hw = static_cast<int64_t>(x.extent(1)) * x.extent(2);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    auto xd = x.data();
    auto bd = b.data();
    auto od = out.raw();
    for (int ch = 0; ch < c; ++ch)
        for (int64_t i = 0; i < hw; ++i) od[ch * hw + i] = xd[ch * hw + i] + bd[ch];
    detail::record(out, {x.impl(), b.impl()},
                   [yi = out.impl(), xi = x.impl(), bi = b.impl(), c, hw](Tape<T>& tp) {
                       const auto& go = detail::out_grad(tp, yi);
                       auto& gx = tp.buffer(xi);
                       for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
                       auto& gb = tp.buffer(bi);
                       for (int ch = 0; ch < c; ++ch) {
                           T acc = T(0);
                           for (int64_t i = 0; i < hw; ++i) acc += go[ch * hw + i];
                           gb[ch] += acc;
                       }
                   });
    return out;
}

// x scaled by a one-element tensor; both operands receive gradients.
template <typename T>
Tensor<T> mul_bcast_scalar(const Tensor<T>& x, const Tensor<T>& s) {
    SK_CHECK(s.numel() == 1, ShapeError,
             "mul_bcast_scalar: scale must be one element, got " << shape_str(s.shape()));
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    auto xd = x.data();
    const T sv = s.data()[0];
    auto od = out.raw();
    for (int64_t i = 0; i < out.numel(); ++i) od[i] = xd[i] * sv;
    detail::record(out, {x.impl(), s.impl()},
                   [yi = out.impl(), xi = x.impl(), si = s.impl()](Tape<T>& tp) {
                       const auto& go = detail::out_grad(tp, yi);
                       const T sv = si->data[0];
                       auto& gx = tp.buffer(xi);
                       for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * sv;
                       auto& gs = tp.buffer(si);
                       T acc = T(0);
                       for (size_t i = 0; i < go.size(); ++i) acc += go[i] * xi->data[i];
                       gs[0] += acc;
                   });
    return out;
}

// ---- reductions ----

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::scalar(std::accumulate(a.data().begin(), a.data().end(), T(0)));
    detail::record(out, {a.impl()}, [yi = out.impl(), ai = a.impl()](Tape<T>& tp) {
        const auto& go = detail::out_grad(tp, yi);
        auto& ga = tp.buffer(ai);
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += go[0];
    });
    return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    SK_CHECK(a.numel() > 0, ShapeError, "mean of empty tensor");
    const T inv = T(1) / static_cast<T>(a.numel());
    Tensor<T> out =
        Tensor<T>::scalar(std::accumulate(a.data().begin(), a.data().end(), T(0)) * inv);
    detail::record(out, {a.impl()}, [yi = out.impl(), ai = a.impl(), inv](Tape<T>& tp) {
        const auto& go = detail::out_grad(tp, yi);
        auto& ga = tp.buffer(ai);
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += go[0] * inv;
    });
    return out;
}

// ---- softmax family ----

// Row-wise softmax of a [R,C] matrix with max subtraction.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
    SK_CHECK(x.rank() == 2, ShapeError, "softmax_rows expects rank 2, got "
                                            << shape_str(x.shape()));
    const int r = x.extent(0), c = x.extent(1);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    auto xd = x.data();
    auto od = out.raw();
    for (int i = 0; i < r; ++i) {
        T mx = xd[i * c];
        for (int j = 1; j < c; ++j) mx = std::max(mx, xd[i * c + j]);
        T z = T(0);
        for (int j = 0; j < c; ++j) {
            T e = std::exp(xd[i * c + j] - mx);
            od[i * c + j] = e;
            z += e;
        }
        for (int j = 0; j < c; ++j) od[i * c + j] /= z;
    }
    detail::record(out, {x.impl()}, [yi = out.impl(), xi = x.impl(), r, c](Tape<T>& tp) {
        const auto& go = detail::out_grad(tp, yi);
        auto& gx = tp.buffer(xi);
        for (int i = 0; i < r; ++i) {
            T dot = T(0);
            for (int j = 0; j < c; ++j) dot += go[i * c + j] * yi->data[i * c + j];
            for (int j = 0; j < c; ++j)
                gx[i * c + j] += yi->data[i * c + j] * (go[i * c + j] - dot);
        }
    });
    return out;
}

// Per-row cross entropy of logits against integer class targets: out[r] =
// logsumexp(x[r]) - x[r, target[r]].
template <typename T>
Tensor<T> softmax_xent_rows(const Tensor<T>& x, std::vector<int> targets) {
    SK_CHECK(x.rank() == 2, ShapeError, "softmax_xent_rows expects rank 2, got "
                                            << shape_str(x.shape()));
    const int r = x.extent(0), c = x.extent(1);
    SK_CHECK(static_cast<int>(targets.size()) == r, ShapeError,
             "softmax_xent_rows: " << targets.size() << " targets for " << r << " rows");
    for (int t : targets)
        SK_CHECK(t >= 0 && t < c, ContractError, "target class " << t << " out of range");
    Tensor<T> out = Tensor<T>::zeros({r});
    auto xd = x.data();
    auto od = out.raw();
    for (int i = 0; i < r; ++i) {
        T mx = xd[i * c];
        for (int j = 1; j < c; ++j) mx = std::max(mx, xd[i * c + j]);
        T z = T(0);
        for (int j = 0; j < c; ++j) z += std::exp(xd[i * c + j] - mx);
        od[i] = mx + std::log(z) - xd[i * c + targets[static_cast<size_t>(i)]];
    }
    detail::record(
        out, {x.impl()},
        [yi = out.impl(), xi = x.impl(), r, c, targets = std::move(targets)](Tape<T>& tp) {
            const auto& go = detail::out_grad(tp, yi);
            auto& gx = tp.buffer(xi);
            for (int i = 0; i < r; ++i) {
                T mx = xi->data[i * c];
                for (int j = 1; j < c; ++j) mx = std::max(mx, xi->data[i * c + j]);
                T z = T(0);
                for (int j = 0; j < c; ++j) z += std::exp(xi->data[i * c + j] - mx);
                for (int j = 0; j < c; ++j) {
                    T p = std::exp(xi->data[i * c + j] - mx) / z;
                    T ind = (j == targets[static_cast<size_t>(i)]) ? T(1) : T(0);
                    gx[i * c + j] += go[i] * (p - ind);
                }
            }
        });
    return out;
}

// ---- shape surgery ----

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape s) {
    SK_CHECK(shape_numel(s) == a.numel(), ShapeError,
             "reshape " << shape_str(a.shape()) << " to " << shape_str(s));
    Tensor<T> out = Tensor<T>::from(std::move(s), {a.data().begin(), a.data().end()});
    detail::record(out, {a.impl()}, [yi = out.impl(), ai = a.impl()](Tape<T>& tp) {
        const auto& go = detail::out_grad(tp, yi);
        auto& ga = tp.buffer(ai);
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    });
    return out;
}

// Concatenate along axis 0; trailing extents must agree.
template <typename T>
Tensor<T> concat0(const std::vector<Tensor<T>>& parts) {
    SK_CHECK(!parts.empty(), ShapeError, "concat0 of zero tensors");
    Shape s = parts[0].shape();
    SK_CHECK(!s.empty(), ShapeError, "concat0 needs rank >= 1");
    int total = 0;
    for (const auto& p : parts) {
        SK_CHECK(p.rank() == static_cast<int>(s.size()), ShapeError,
                 "concat0 rank mismatch: " << shape_str(p.shape()) << " vs " << shape_str(s));
        for (size_t a = 1; a < s.size(); ++a)
            SK_CHECK(p.shape()[a] == s[a], ShapeError,
                     "concat0 trailing extents differ: " << shape_str(p.shape()) << " vs "
                                                         << shape_str(s));
        total += p.extent(0);
    }
    s[0] = total;
    Tensor<T> out = Tensor<T>::zeros(s);
    auto od = out.raw();
    int64_t off = 0;
    std::vector<std::shared_ptr<TensorImpl<T>>> hold;
    std::vector<std::pair<std::shared_ptr<TensorImpl<T>>, int64_t>> spans;
    for (const auto& p : parts) {
        std::copy(p.data().begin(), p.data().end(), od.begin() + off);
        hold.push_back(p.impl());
        spans.emplace_back(p.impl(), off);
        off += p.numel();
    }
    detail::record(out, std::move(hold),
                   [yi = out.impl(), spans = std::move(spans)](Tape<T>& tp) {
                       const auto& go = detail::out_grad(tp, yi);
                       for (const auto& [impl, start] : spans) {
                           auto& g = tp.buffer(impl);
                           for (size_t i = 0; i < g.size(); ++i)
                               g[i] += go[static_cast<size_t>(start) + i];
                       }
                   });
    return out;
}

// Contiguous slice [i0, i1) along axis 0 of any rank >= 1 tensor.
template <typename T>
Tensor<T> slice0(const Tensor<T>& a, int i0, int i1) {
    SK_CHECK(a.rank() >= 1, ShapeError, "slice0 needs rank >= 1");
    SK_CHECK(0 <= i0 && i0 < i1 && i1 <= a.extent(0), ShapeError,
             "slice0 [" << i0 << "," << i1 << ") out of range for " << shape_str(a.shape()));
    Shape s = a.shape();
    const int64_t stride = a.numel() / s[0];
    s[0] = i1 - i0;
    Tensor<T> out = Tensor<T>::zeros(s);
    std::copy(a.data().begin() + i0 * stride, a.data().begin() + i1 * stride,
              out.raw().begin());
    detail::record(out, {a.impl()},
                   [yi = out.impl(), ai = a.impl(), i0, stride](Tape<T>& tp) {
                       const auto& go = detail::out_grad(tp, yi);
                       auto& ga = tp.buffer(ai);
                       for (size_t i = 0; i < go.size(); ++i)
                           ga[static_cast<size_t>(i0 * stride) + i] += go[i];
                   });
    return out;
}

// Column slice [c0, c1) of a [R,C] matrix.
template <typename T>
Tensor<T> cols(const Tensor<T>& a, int c0, int c1) {
    SK_CHECK(a.rank() == 2, ShapeError, "cols expects rank 2, got " << shape_str(a.shape()));
    const int r = a.extent(0), c = a.extent(1);
    SK_CHECK(0 <= c0 && c0 < c1 && c1 <= c, ShapeError,
             "cols [" << c0 << "," << c1 << ") out of range for " << shape_str(a.shape()));
    const int w = c1 - c0;
    Tensor<T> out = Tensor<T>::zeros({r, w});
    auto ad = a.data();
    auto od = out.raw();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < w; ++j) od[i * w + j] = ad[i * c + c0 + j];
    detail::record(out, {a.impl()},
                   [yi = out.impl(), ai = a.impl(), r, c, c0, w](Tape<T>& tp) {
                       const auto& go = detail::out_grad(tp, yi);
                       auto& ga = tp.buffer(ai);
                       for (int i = 0; i < r; ++i)
                           for (int j = 0; j < w; ++j) ga[i * c + c0 + j] += go[i * w + j];
                   });
    return out;
}

// Row gather of a [R,C] matrix; duplicate indices accumulate gradients.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, std::vector<int> idx) {
    SK_CHECK(a.rank() == 2, ShapeError, "gather_rows expects rank 2, got "
                                            << shape_str(a.shape()));
    const int r = a.extent(0), c = a.extent(1);
    for (int i : idx)
        SK_CHECK(i >= 0 && i < r, ShapeError, "gather_rows index " << i << " out of range");
    const int k = static_cast<int>(idx.size());
    Tensor<T> out = Tensor<T>::zeros({k, c});
    auto ad = a.data();
    auto od = out.raw();
    for (int i = 0; i < k; ++i)
        std::copy(ad.begin() + idx[static_cast<size_t>(i)] * c,
                  ad.begin() + (idx[static_cast<size_t>(i)] + 1) * c, od.begin() + i * c);
    detail::record(out, {a.impl()},
                   [yi = out.impl(), ai = a.impl(), c, idx = std::move(idx)](Tape<T>& tp) {
                       const auto& go = detail::out_grad(tp, yi);
                       auto& ga = tp.buffer(ai);
                       for (size_t i = 0; i < idx.size(); ++i)
                           for (int j = 0; j < c; ++j)
                               ga[static_cast<size_t>(idx[i]) * c + j] += go[i * c + j];
                   });
    return out;
}

// ---- normalization ----

// GroupNorm over [C,H,W]: statistics per group of C/G channels across space.
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, int num_groups, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps) {
    SK_CHECK(x.rank() == 3, ShapeError, "group_norm expects [C,H,W], got "
                                            << shape_str(x.shape()));
    const int c = x.extent(0), h = x.extent(1), w = x.extent(2);
    SK_CHECK(num_groups > 0 && c % num_groups == 0, ConfigError,
             "group_norm: " << c << " channels not divisible by " << num_groups << " groups");
    SK_CHECK(gamma.rank() == 1 && gamma.extent(0) == c && beta.rank() == 1 &&
                 beta.extent(0) == c,
             ShapeError, "group_norm affine params must be length " << c);
    const int cg = c / num_groups;
    const int64_t hw = static_cast<int64_t>(h) * w;
    const int64_t gsize = cg * hw;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    auto xd = x.data();
    auto gd = gamma.data();
    auto bd = beta.data();
    auto od = out.raw();
    std::vector<T> mu(static_cast<size_t>(num_groups)), istd(static_cast<size_t>(num_groups));
    for (int g = 0; g < num_groups; ++g) {
        const int64_t base = static_cast<int64_t>(g) * gsize;
        T m = T(0);
        for (int64_t i = 0; i < gsize; ++i) m += xd[base + i];
        m /= static_cast<T>(gsize);
        T v = T(0);
        for (int64_t i = 0; i < gsize; ++i) {
            T d = xd[base + i] - m;
            v += d * d;
        }
        v /= static_cast<T>(gsize);
        mu[static_cast<size_t>(g)] = m;
        istd[static_cast<size_t>(g)] = T(1) / std::sqrt(v + eps);
    }
    for (int ch = 0; ch < c; ++ch) {
        const int g = ch / cg;
        for (int64_t i = 0; i < hw; ++i) {
            T xn = (xd[ch * hw + i] - mu[static_cast<size_t>(g)]) * istd[static_cast<size_t>(g)];
            od[ch * hw + i] = gd[ch] * xn + bd[ch];
        }
    }
    detail::record(
        out, {x.impl(), gamma.impl(), beta.impl()},
        [yi = out.impl(), xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), num_groups, cg,
         hw, gsize, mu, istd](Tape<T>& tp) {
            const auto& go = detail::out_grad(tp, yi);
            auto& gx = tp.buffer(xi);
            auto& gg = tp.buffer(gi);
            auto& gb = tp.buffer(bi);
            for (int g = 0; g < num_groups; ++g) {
                const int64_t base = static_cast<int64_t>(g) * gsize;
                const T m = mu[static_cast<size_t>(g)];
                const T is = istd[static_cast<size_t>(g)];
                // ghat = dL/dxn; accumulate its group mean and xn-weighted mean
                T sum_gh = T(0), sum_ghxn = T(0);
                for (int cc = 0; cc < cg; ++cc) {
                    const int ch = g * cg + cc;
                    for (int64_t i = 0; i < hw; ++i) {
                        const int64_t k = ch * hw + i;
                        T xn = (xi->data[k] - m) * is;
                        T gh = go[k] * gi->data[ch];
                        sum_gh += gh;
                        sum_ghxn += gh * xn;
                        gg[ch] += go[k] * xn;
                        gb[ch] += go[k];
                    }
                }
                const T inv_n = T(1) / static_cast<T>(gsize);
                for (int cc = 0; cc < cg; ++cc) {
                    const int ch = g * cg + cc;
                    for (int64_t i = 0; i < hw; ++i) {
                        const int64_t k = ch * hw + i;
                        T xn = (xi->data[k] - m) * is;
                        T gh = go[k] * gi->data[ch];
                        gx[k] += is * (gh - inv_n * sum_gh - xn * inv_n * sum_ghxn);
                    }
                }
            }
        });
    return out;
}

// LayerNorm over the last axis of a [R,C] matrix.
template <typename T>
Tensor<T> layer_norm_rows(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          T eps) {
    SK_CHECK(x.rank() == 2, ShapeError, "layer_norm_rows expects rank 2, got "
                                            << shape_str(x.shape()));
    const int r = x.extent(0), c = x.extent(1);
    SK_CHECK(gamma.rank() == 1 && gamma.extent(0) == c && beta.rank() == 1 &&
                 beta.extent(0) == c,
             ShapeError, "layer_norm_rows affine params must be length " << c);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    auto xd = x.data();
    auto gd = gamma.data();
    auto bd = beta.data();
    auto od = out.raw();
    std::vector<T> mu(static_cast<size_t>(r)), istd(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) {
        T m = T(0);
        for (int j = 0; j < c; ++j) m += xd[i * c + j];
        m /= static_cast<T>(c);
        T v = T(0);
        for (int j = 0; j < c; ++j) {
            T d = xd[i * c + j] - m;
            v += d * d;
        }
        v /= static_cast<T>(c);
        mu[static_cast<size_t>(i)] = m;
        istd[static_cast<size_t>(i)] = T(1) / std::sqrt(v + eps);
        for (int j = 0; j < c; ++j)
            od[i * c + j] = gd[j] * (xd[i * c + j] - m) * istd[static_cast<size_t>(i)] + bd[j];
    }
    detail::record(
        out, {x.impl(), gamma.impl(), beta.impl()},
        [yi = out.impl(), xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), r, c, mu,
         istd](Tape<T>& tp) {
            const auto& go = detail::out_grad(tp, yi);
            auto& gx = tp.buffer(xi);
            auto& gg = tp.buffer(gi);
            auto& gb = tp.buffer(bi);
            const T inv_n = T(1) / static_cast<T>(c);
            for (int i = 0; i < r; ++i) {
                const T m = mu[static_cast<size_t>(i)];
                const T is = istd[static_cast<size_t>(i)];
                T sum_gh = T(0), sum_ghxn = T(0);
                for (int j = 0; j < c; ++j) {
                    T xn = (xi->data[i * c + j] - m) * is;
                    T gh = go[i * c + j] * gi->data[j];
                    sum_gh += gh;
                    sum_ghxn += gh * xn;
                    gg[j] += go[i * c + j] * xn;
                    gb[j] += go[i * c + j];
                }
                for (int j = 0; j < c; ++j) {
                    T xn = (xi->data[i * c + j] - m) * is;
                    T gh = go[i * c + j] * gi->data[j];
                    gx[i * c + j] += is * (gh - inv_n * sum_gh - xn * inv_n * sum_ghxn);
                }
            }
        });
    return out;
}

// ---- convolution ----

// Grouped cross-correlation: x [Cin,H,W], w [Cout,Cin/g,k,k], optional bias
// [Cout], square kernel, symmetric zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, int stride,
                 int pad, int groups) {
    SK_CHECK(x.rank() == 3 && w.rank() == 4, ShapeError,
             "conv2d expects x [C,H,W] and w [O,I,k,k], got " << shape_str(x.shape()) << " and "
                                                              << shape_str(w.shape()));
    const int cin = x.extent(0), h = x.extent(1), ww = x.extent(2);
    const int cout = w.extent(0), cin_g = w.extent(1), kh = w.extent(2), kw = w.extent(3);
    SK_CHECK(groups > 0 && cin % groups == 0 && cout % groups == 0, ConfigError,
             "conv2d: channels (" << cin << " in, " << cout << " out) not divisible by "
                                  << groups << " groups");
    SK_CHECK(cin_g == cin / groups, ShapeError, "conv2d: weight expects " << cin_g
                                                                          << " channels/group but input gives "
                                                                          << cin / groups);
    SK_CHECK(kh == kw, ShapeError, "conv2d: kernel must be square, got " << kh << "x" << kw);
    SK_CHECK(stride >= 1 && pad >= 0, ConfigError, "conv2d: bad stride/pad");
    if (bias)
        SK_CHECK(bias->rank() == 1 && bias->extent(0) == cout, ShapeError,
                 "conv2d bias must be length " << cout);
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (ww + 2 * pad - kw) / stride + 1;
    SK_CHECK(oh > 0 && ow > 0, ShapeError, "conv2d: kernel larger than padded input");
    const int cout_g = cout / groups;
    Tensor<T> out = Tensor<T>::zeros({cout, oh, ow});
    const T* xd = x.data().data();
    const T* wd = w.data().data();
    T* od = out.raw().data();
    for (int oc = 0; oc < cout; ++oc) {
        const int g = oc / cout_g;
        const int icb = g * cin_g;
        const T b = bias ? bias->data()[oc] : T(0);
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                T acc = b;
                const int iy0 = oy * stride - pad;
                const int ix0 = ox * stride - pad;
                for (int ic = 0; ic < cin_g; ++ic) {
                    const T* xch = xd + static_cast<int64_t>(icb + ic) * h * ww;
                    const T* wch = wd + ((static_cast<int64_t>(oc) * cin_g + ic) * kh) * kw;
                    for (int ky = 0; ky < kh; ++ky) {
                        const int iy = iy0 + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            const int ix = ix0 + kx;
                            if (ix < 0 || ix >= ww) continue;
                            acc += xch[iy * ww + ix] * wch[ky * kw + kx];
                        }
                    }
                }
                od[(static_cast<int64_t>(oc) * oh + oy) * ow + ox] = acc;
            }
        }
    }
    std::vector<std::shared_ptr<TensorImpl<T>>> hold = {x.impl(), w.impl()};
    std::shared_ptr<TensorImpl<T>> bimpl;
    if (bias) {
        bimpl = bias->impl();
        hold.push_back(bimpl);
    }
    detail::record(
        out, std::move(hold),
        [yi = out.impl(), xi = x.impl(), wi = w.impl(), bimpl, cin_g, cout_g, kh, kw, stride,
         pad, h, ww, oh, ow, cout](Tape<T>& tp) {
            const auto& go = detail::out_grad(tp, yi);
            auto& gx = tp.buffer(xi);
            auto& gw = tp.buffer(wi);
            std::vector<T>* gb = bimpl ? &tp.buffer(bimpl) : nullptr;
            for (int oc = 0; oc < cout; ++oc) {
                const int g = oc / cout_g;
                const int icb = g * cin_g;
                for (int oy = 0; oy < oh; ++oy) {
                    for (int ox = 0; ox < ow; ++ox) {
                        const T gv = go[(static_cast<int64_t>(oc) * oh + oy) * ow + ox];
                        if (gv == T(0)) continue;
                        if (gb) (*gb)[oc] += gv;
                        const int iy0 = oy * stride - pad;
                        const int ix0 = ox * stride - pad;
                        for (int ic = 0; ic < cin_g; ++ic) {
                            const int64_t xb = static_cast<int64_t>(icb + ic) * h * ww;
                            const int64_t wb =
                                (static_cast<int64_t>(oc) * cin_g + ic) * kh * kw;
                            for (int ky = 0; ky < kh; ++ky) {
                                const int iy = iy0 + ky;
                                if (iy < 0 || iy >= h) continue;
                                for (int kx = 0; kx < kw; ++kx) {
                                    const int ix = ix0 + kx;
                                    if (ix < 0 || ix >= ww) continue;
                                    gx[xb + iy * ww + ix] += gv * wi->data[wb + ky * kw + kx];
                                    gw[wb + ky * kw + kx] += gv * xi->data[xb + iy * ww + ix];
                                }
                            }
                        }
                    }
                }
            }
        });
    return out;
}

// ---- interpolation ----

enum class Interp { Area, Bilinear, Nearest };

namespace detail {

inline ResamplePlan plan_for(Interp mode, int n, int m) {
    switch (mode) {
    case Interp::Area: return area_plan(n, m);
    case Interp::Bilinear: return linear_plan(n, m);
    case Interp::Nearest: return nearest_plan(n, m);
    }
    SK_THROW(ContractError, "unknown interpolation mode");
}

inline ResamplePlan transpose_plan(const ResamplePlan& plan, int n_src) {
    ResamplePlan t(static_cast<size_t>(n_src));
    for (size_t j = 0; j < plan.size(); ++j)
        for (const auto& tap : plan[j])
            t[static_cast<size_t>(tap.src)].push_back({static_cast<int>(j), tap.w});
    return t;
}

// Resample axis 1 (of [C,H,W]) according to plan; W untouched.
template <typename T>
std::vector<T> apply_plan_rows(const std::vector<T>& src, int c, int h, int w,
                               const ResamplePlan& plan) {
    const int oh = static_cast<int>(plan.size());
    std::vector<T> dst(static_cast<size_t>(c) * oh * w, T(0));
    for (int ch = 0; ch < c; ++ch) {
        const T* sp = src.data() + static_cast<int64_t>(ch) * h * w;
        T* dp = dst.data() + static_cast<int64_t>(ch) * oh * w;
        for (int y = 0; y < oh; ++y)
            for (const auto& tap : plan[static_cast<size_t>(y)]) {
                const T wgt = static_cast<T>(tap.w);
                const T* srow = sp + static_cast<int64_t>(tap.src) * w;
                T* drow = dp + static_cast<int64_t>(y) * w;
                for (int x = 0; x < w; ++x) drow[x] += wgt * srow[x];
            }
    }
    return dst;
}

// Resample axis 2 (of [C,H,W]) according to plan; H untouched.
template <typename T>
std::vector<T> apply_plan_cols(const std::vector<T>& src, int c, int h, int w,
                               const ResamplePlan& plan) {
    const int ow = static_cast<int>(plan.size());
    std::vector<T> dst(static_cast<size_t>(c) * h * ow, T(0));
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y) {
            const T* srow = src.data() + (static_cast<int64_t>(ch) * h + y) * w;
            T* drow = dst.data() + (static_cast<int64_t>(ch) * h + y) * ow;
            for (int x = 0; x < ow; ++x)
                for (const auto& tap : plan[static_cast<size_t>(x)])
                    drow[x] += static_cast<T>(tap.w) * srow[tap.src];
        }
    return dst;
}

} // namespace detail

// Spatial resize of [C,H,W] to (th, tw). Linear in the input, so the
// backward pass applies the transposed tap weights.
template <typename T>
Tensor<T> interpolate(const Tensor<T>& x, int th, int tw, Interp mode) {
    SK_CHECK(x.rank() == 3, ShapeError, "interpolate expects [C,H,W], got "
                                            << shape_str(x.shape()));
    SK_CHECK(th > 0 && tw > 0, ShapeError, "interpolate: target extents must be positive");
    const int c = x.extent(0), h = x.extent(1), w = x.extent(2);
    ResamplePlan rows = detail::plan_for(mode, h, th);
    ResamplePlan cols = detail::plan_for(mode, w, tw);
    std::vector<T> mid =
        detail::apply_plan_rows(std::vector<T>(x.data().begin(), x.data().end()), c, h, w, rows);
    std::vector<T> res = detail::apply_plan_cols(mid, c, th, w, cols);
    Tensor<T> out = Tensor<T>::from({c, th, tw}, std::move(res));
    detail::record(out, {x.impl()},
                   [yi = out.impl(), xi = x.impl(), c, h, w, th, tw,
                    rows = std::move(rows), cols = std::move(cols)](Tape<T>& tp) {
                       const auto& go = detail::out_grad(tp, yi);
                       ResamplePlan tcols = detail::transpose_plan(cols, w);
                       ResamplePlan trows = detail::transpose_plan(rows, h);
                       std::vector<T> mid = detail::apply_plan_cols(go, c, th, tw, tcols);
                       std::vector<T> gx = detail::apply_plan_rows(mid, c, th, w, trows);
                       auto& g = tp.buffer(xi);
                       for (size_t i = 0; i < g.size(); ++i) g[i] += gx[i];
                   });
    return out;
}

} // namespace strokekit::ops
